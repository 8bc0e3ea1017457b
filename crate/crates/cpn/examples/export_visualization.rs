//! Dumps one episode's query features and per-variant prototypes as CSV for
//! external projection tools (t-SNE, PCA, and the like).
//!
//! Rows are `role,variant,class_id,f_1..f_d`: every query feature once, then
//! one prototype row per (variant, episode class).

use cpn::episodes::{eval_stream, sample_episode, EpisodeSpec, RngStream};
use cpn::eval::export_viz;
use cpn::model::{GenInputMode, Variant};
use cpn::synthgen::{generate, SynthConfig};
use cpn::training::{meta_train, pretrain, SgdConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (bundle, _) = generate(&SynthConfig::default())?;
    let (pretrained, _) =
        pretrain(&bundle, &SgdConfig::pretrain_default(), GenInputMode::Comp, 0)?;
    let spec = EpisodeSpec::new(5, 1, 40)?;
    let (adaptive, _) = meta_train(
        &bundle,
        &pretrained,
        &SgdConfig::meta_default(),
        Variant::Adaptive,
        &spec,
        0,
    )?;

    let mut rng = RngStream::new(0, eval_stream(0));
    let episode = sample_episode(&bundle, bundle.split().novel(), &spec, &mut rng)?;

    let path = std::env::temp_dir().join("cpn-export-visualization/viz.csv");
    let variants = [Variant::Vp, Variant::Lcp, Variant::Adaptive];
    export_viz(&bundle, &adaptive, &episode, &variants, &path)?;

    let text = std::fs::read_to_string(&path)?;
    let rows = text.lines().count() - 1;
    println!(
        "wrote {rows} rows ({} queries + {} prototypes) to {}",
        episode.query.len(),
        variants.len() * episode.classes.len(),
        path.display()
    );
    for line in text.lines().take(3) {
        let short: String = line.chars().take(72).collect();
        println!("  {short}...");
    }
    Ok(())
}
