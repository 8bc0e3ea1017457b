//! Generates a synthetic corpus with known ground truth and writes the
//! on-disk artifacts the CLI consumes: embeddings, attribute scores, the
//! class split, and the ground-truth file.
//!
//! The oracle classifies with the true class directions, so its accuracy
//! bounds what any model can achieve on this data.

use cpn::dataio::{write_attributes, write_embeddings, write_split};
use cpn::episodes::EpisodeSpec;
use cpn::synthgen::{generate, oracle_accuracy, save_truth, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig::default();
    let (bundle, truth) = generate(&cfg)?;
    println!(
        "generated {} records, {} classes, dim {}",
        bundle.embeddings().len(),
        cfg.total_classes(),
        bundle.dim()
    );

    let dir = std::env::temp_dir().join("cpn-synthesize-dataset");
    std::fs::create_dir_all(&dir)?;
    write_embeddings(&dir.join("embeddings.bin"), bundle.embeddings())?;
    write_attributes(&dir.join("attributes.csv"), bundle.attributes())?;
    write_split(&dir.join("split.json"), bundle.split())?;
    save_truth(&dir.join("truth.bin"), &truth)?;
    println!("artifacts written under {}", dir.display());

    let spec = EpisodeSpec::new(5, 1, 15)?;
    let report = oracle_accuracy(&bundle, &truth, bundle.split().novel(), &spec, 500, 0)?;
    println!(
        "oracle on novel classes: {:.2}% +- {:.2} over {} episodes",
        report.mean_acc, report.ci95, report.n_episodes
    );
    Ok(())
}
