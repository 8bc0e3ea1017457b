//! Episodic evaluation: mean accuracy with 95% confidence intervals, the
//! prototype and generator-input ablation grids, and export of query and
//! prototype vectors for external projection tools.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DatasetBundle;
use crate::episodes::{
    eval_stream, sample_episode, Episode, EpisodeError, EpisodeSpec, RngStream,
};
use crate::model::{
    episode_prototypes, gather_support, predict, CpnParams, GenInputMode, ModelError, Variant,
};
use crate::training::{meta_train, randomize_protos, SgdConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Mean episodic accuracy and its 95% half-width, both in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Variant name, generator-input label, or "oracle".
    pub variant: String,
    pub spec: EpisodeSpec,
    pub n_episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub seed: u64,
}

/// Normal-approximation interval: 1.96 s / sqrt(n) with the n-1 variance.
fn mean_and_ci95(accs: &[f64]) -> (f64, f64) {
    let n = accs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = accs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Shared episodic harness: episode `i` is drawn from stream id `i`, so the
/// evaluated task set depends only on (bundle, pool, spec, seed), never on
/// thread count or on which classifier runs. `classify` maps an episode to
/// one predicted class id per query, in query order.
pub(crate) fn evaluate_with<F>(
    bundle: &DatasetBundle,
    pool: &[u32],
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    label: &str,
    classify: F,
) -> Result<EvalReport, EvalError>
where
    F: Fn(usize, &Episode) -> Result<Vec<u32>, EvalError> + Sync,
{
    let accs = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, eval_stream(i));
            let episode = sample_episode(bundle, pool, spec, &mut rng)?;
            let predicted = classify(i, &episode)?;
            debug_assert_eq!(predicted.len(), episode.query.len());
            let correct = predicted
                .iter()
                .zip(&episode.query)
                .filter(|(p, (_, truth))| **p == *truth)
                .count();
            Ok(100.0 * correct as f64 / episode.query.len() as f64)
        })
        .collect::<Result<Vec<f64>, EvalError>>()?;
    let (mean_acc, ci95) = mean_and_ci95(&accs);
    Ok(EvalReport {
        variant: label.to_string(),
        spec: *spec,
        n_episodes,
        mean_acc,
        ci95,
        seed,
    })
}

/// Evaluates `params` under `variant` over seeded episodes from `pool`.
/// Read-only in both the bundle and the parameters; `RICP` classifies with
/// whatever component prototypes `params` carries, so callers wanting random
/// ones substitute them first.
pub fn evaluate(
    bundle: &DatasetBundle,
    params: &CpnParams,
    variant: Variant,
    pool: &[u32],
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    evaluate_with(
        bundle,
        pool,
        spec,
        n_episodes,
        seed,
        variant.as_str(),
        |_, episode| {
            let preds = predict(episode, bundle, params, variant)?;
            Ok(preds.into_iter().map(|p| p.class).collect())
        },
    )
}

// ------------------------------------------------------------- viz export

/// Writes one CSV row per query feature and one per (variant, class)
/// prototype: `role,variant,class_id,f_1..f_d`. Query rows use "-" for the
/// variant column. Values are written at single precision.
pub fn export_viz(
    bundle: &DatasetBundle,
    params: &CpnParams,
    episode: &Episode,
    variants: &[Variant],
    path: &Path,
) -> Result<(), EvalError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let d = bundle.dim();
    let mut out = csv::Writer::from_writer(std::io::BufWriter::new(std::fs::File::create(path)?));
    let mut header = vec!["role".to_string(), "variant".to_string(), "class_id".to_string()];
    header.extend((1..=d).map(|j| format!("f_{j}")));
    out.write_record(&header)?;

    let mut row = Vec::with_capacity(3 + d);
    for &(record, class) in &episode.query {
        row.clear();
        row.push("query".to_string());
        row.push("-".to_string());
        row.push(class.to_string());
        row.extend(
            bundle
                .embeddings()
                .feature(record)
                .iter()
                .map(|v| format!("{}", *v as f32)),
        );
        out.write_record(&row)?;
    }

    let support = gather_support(episode, bundle)?;
    for &variant in variants {
        let protos = episode_prototypes(params, variant, &support)?;
        for (sc, proto) in support.iter().zip(&protos) {
            row.clear();
            row.push("proto".to_string());
            row.push(variant.as_str().to_string());
            row.push(sc.class.to_string());
            row.extend(proto.iter().map(|v| format!("{}", *v as f32)));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------- ablation grid

/// One grid row: a prototype variant or generator-input mode evaluated at
/// both shot settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub one_shot: EvalReport,
    pub five_shot: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Plain-text rendering with aligned columns.
    pub fn render_text(&self) -> String {
        let label_width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(std::iter::once("setting".len()))
            .max()
            .unwrap_or(0);
        let cell = |r: &EvalReport| format!("{:.2} +- {:.2}", r.mean_acc, r.ci95);
        let mut out = String::new();
        let shots = |r: &AblationRow| (cell(&r.one_shot), cell(&r.five_shot));
        let width1 = self
            .rows
            .iter()
            .map(|r| shots(r).0.len())
            .chain(std::iter::once("1-shot".len()))
            .max()
            .unwrap_or(0);
        out.push_str(&format!(
            "{:<label_width$}  {:>width1$}  {}\n",
            "setting", "1-shot", "5-shot"
        ));
        for r in &self.rows {
            let (one, five) = shots(r);
            out.push_str(&format!(
                "{:<label_width$}  {:>width1$}  {}\n",
                r.label, one, five
            ));
        }
        out
    }

    /// JSON array of rows followed by a trailing newline.
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut out, &self.rows).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Builds the full grid over novel classes: one row per prototype variant
/// (RICP, VP, LCP, RICP+VP, LCP+VP, CONCAT, ADAPTIVE) and one per generator
/// input (concat, vis, comp), each evaluated at both shot settings.
///
/// `pretrained` is the pre-training-only model; the non-fused rows read it
/// directly (RICP with freshly randomized component prototypes) and the
/// fused rows meta-train from it with `meta_cfg` and `train_spec`. `adaptive`
/// is the already meta-trained ADAPTIVE model; the generator-input row whose
/// mode matches it is reused rather than retrained.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    bundle: &DatasetBundle,
    pretrained: &CpnParams,
    adaptive: &CpnParams,
    meta_cfg: &SgdConfig,
    train_spec: &EpisodeSpec,
    spec_1shot: &EpisodeSpec,
    spec_5shot: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<AblationTable, EvalError> {
    let novel = bundle.split().novel();
    let mut rows = Vec::new();
    let mut push = |label: &str, params: &CpnParams, variant: Variant| -> Result<(), EvalError> {
        rows.push(AblationRow {
            label: label.to_string(),
            one_shot: evaluate(bundle, params, variant, novel, spec_1shot, n_episodes, seed)?,
            five_shot: evaluate(bundle, params, variant, novel, spec_5shot, n_episodes, seed)?,
        });
        Ok(())
    };

    let ricp = randomize_protos(pretrained, seed);
    push(Variant::Ricp.as_str(), &ricp, Variant::Ricp)?;
    push(Variant::Vp.as_str(), pretrained, Variant::Vp)?;
    push(Variant::Lcp.as_str(), pretrained, Variant::Lcp)?;
    for variant in [Variant::RicpVp, Variant::LcpVp, Variant::Concat] {
        let (params, _) = meta_train(bundle, pretrained, meta_cfg, variant, train_spec, seed)?;
        push(variant.as_str(), &params, variant)?;
    }
    push(Variant::Adaptive.as_str(), adaptive, Variant::Adaptive)?;

    for mode in [GenInputMode::Concat, GenInputMode::Vis, GenInputMode::Comp] {
        let label = format!("gen-input={}", mode.as_str());
        if adaptive.gen_input_mode() == mode {
            push(&label, adaptive, Variant::Adaptive)?;
            continue;
        }
        let start = pretrained.clone().with_gen_input_mode(mode);
        let (params, _) =
            meta_train(bundle, &start, meta_cfg, Variant::Adaptive, train_spec, seed)?;
        push(&label, &params, Variant::Adaptive)?;
    }
    Ok(AblationTable { rows })
}
