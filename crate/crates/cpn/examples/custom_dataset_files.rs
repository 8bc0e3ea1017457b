//! Builds the three input files for your own data: the binary embedding
//! table, the attribute-score CSV, and the split JSON. Writing through the
//! library guarantees the CLI can load them back.
//!
//! Embeddings here are made up; in practice they come from a frozen image
//! backbone, one feature vector per image.

use cpn::dataio::{
    load_attributes, load_embeddings, load_split, write_attributes, write_embeddings,
    write_split, AttributeLevel, AttributeTable, DatasetBundle, EmbeddingTable, SplitSpec,
};
use cpn::episodes::RngStream;
use cpn::gradcore::Vector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Six classes, four images each, eight-dimensional features.
    let dim = 8;
    let mut rng = RngStream::new(42, 0);
    let mut records = Vec::new();
    for class in 0u32..6 {
        for _ in 0..4 {
            let feature: Vec<f64> = (0..dim)
                .map(|j| if j as u32 % 6 == class { 1.0 } else { 0.1 * rng.normal() })
                .collect();
            records.push((Vector::new(feature)?, class));
        }
    }
    let embeddings = EmbeddingTable::new(dim, records)?;

    // One row per class: (class id, attribute scores). `Image` level rows
    // are averaged per class instead of being consumed verbatim. Scales are
    // free; classification only uses compositional direction.
    let rows: Vec<(u32, Vec<f64>)> = (0u32..6)
        .map(|c| {
            let scores = (0..3)
                .map(|a| if (c + a) % 2 == 0 { 1.0 + f64::from(c) } else { 0.0 })
                .collect();
            (c, scores)
        })
        .collect();
    let attributes = AttributeTable::from_rows(AttributeLevel::Category, &rows)?;

    let split = SplitSpec::new(vec![0, 1, 2], vec![3], vec![4, 5])?;

    let dir = std::env::temp_dir().join("cpn-custom-dataset");
    std::fs::create_dir_all(&dir)?;
    let emb_path = dir.join("embeddings.bin");
    let attr_path = dir.join("attributes.csv");
    let split_path = dir.join("split.json");
    write_embeddings(&emb_path, &embeddings)?;
    write_attributes(&attr_path, &attributes)?;
    write_split(&split_path, &split)?;
    println!("wrote {}", emb_path.display());
    println!("wrote {}", attr_path.display());
    println!("wrote {}", split_path.display());

    // Round-trip exactly as the CLI does, then cross-validate the pieces.
    let bundle = DatasetBundle::validate(
        load_embeddings(&emb_path)?,
        load_attributes(&attr_path, AttributeLevel::Category, None)?.normalized_by_max(),
        load_split(&split_path)?,
    )?;
    println!(
        "validated bundle: {} records, dim {}, {} attribute components",
        bundle.embeddings().len(),
        bundle.dim(),
        bundle.m()
    );
    Ok(())
}
