//! Reproduces the prototype-variant and gate-input ablations as one table.
//!
//! Rows cover random, visual, and learned prototypes on their own, the three
//! fusion heads, and the three generator-input choices, each evaluated at
//! one and five shots on the same seeded episodes.

use cpn::episodes::EpisodeSpec;
use cpn::eval::run_ablation;
use cpn::model::{GenInputMode, Variant};
use cpn::synthgen::{generate, SynthConfig};
use cpn::training::{meta_train, pretrain, SgdConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig {
        sigma: 0.7,
        ..SynthConfig::default()
    };
    let (bundle, _) = generate(&cfg)?;
    let (pretrained, _) =
        pretrain(&bundle, &SgdConfig::pretrain_default(), GenInputMode::Comp, 0)?;

    let train_spec = EpisodeSpec::new(5, 1, 15)?;
    let meta_cfg = SgdConfig::meta_default();
    let (adaptive, _) = meta_train(
        &bundle,
        &pretrained,
        &meta_cfg,
        Variant::Adaptive,
        &train_spec,
        0,
    )?;

    // The remaining fused variants and generator inputs are meta-trained
    // inside run_ablation from the same pre-trained parameters and seed.
    let table = run_ablation(
        &bundle,
        &pretrained,
        &adaptive,
        &meta_cfg,
        &train_spec,
        &EpisodeSpec::new(5, 1, 15)?,
        &EpisodeSpec::new(5, 5, 15)?,
        500,
        0,
    )?;
    print!("{}", table.render_text());
    Ok(())
}
