//! Synthetic attribute-grounded datasets with known ground truth.
//!
//! Classes live on unit directions mu = l2_normalize(sum_j z_j r_j) built
//! from a hidden component matrix, exactly the structure the model assumes.
//! Records are mu plus isotropic Gaussian noise. Because the generator keeps
//! every intermediate, the returned [`GroundTruth`] supports an oracle
//! classifier that upper-bounds anything learnable from the data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{
    AttributeLevel, AttributeTable, DataError, DatasetBundle, EmbeddingTable, SplitSpec,
};
use crate::episodes::{EpisodeSpec, RngStream, SYNTH_STREAM};
use crate::eval::{EvalError, EvalReport};
use crate::gradcore::{cosine_sim, l2_normalize, weighted_sum, Matrix, Vector};
use crate::model::{
    f32_bytes, f64_values, read_section_file, write_section_file, CheckpointError, ModelError,
    SectionDecl,
};

/// Resample attempts across all classes before generation gives up.
const REJECTION_BUDGET: usize = 10_000;

const TRUTH_MAGIC: &str = "CPNT1";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error(
        "placed only {placed} class directions at min angle {min_angle} rad \
         within {REJECTION_BUDGET} resamples"
    )]
    RejectionBudgetExceeded { placed: usize, min_angle: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    File(#[from] CheckpointError),
}

/// Generator settings. `sigma` is the expected noise norm per record (the
/// per-coordinate variance is sigma^2/d); `sparsity` is the probability an
/// attribute is active for a class; `min_angle` (radians) separates every
/// pair of ground-truth class directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub m: usize,
    pub d: usize,
    pub n_base: usize,
    pub n_val: usize,
    pub n_novel: usize,
    pub per_class: usize,
    pub sigma: f64,
    pub sparsity: f64,
    pub min_angle: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            m: 20,
            d: 32,
            n_base: 40,
            n_val: 10,
            n_novel: 10,
            per_class: 50,
            sigma: 0.05,
            sparsity: 0.5,
            min_angle: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn total_classes(&self) -> usize {
        self.n_base + self.n_val + self.n_novel
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::BadConfig(msg.into()));
        if self.m < 1 {
            return bad("m must be at least 1");
        }
        if self.d < 2 {
            return bad("d must be at least 2");
        }
        if self.n_base < 1 || self.n_val < 1 || self.n_novel < 1 {
            return bad("each split needs at least one class");
        }
        if self.per_class < 1 {
            return bad("per_class must be at least 1");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be non-negative and finite");
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad("sparsity must lie in (0, 1]");
        }
        if !(self.min_angle >= 0.0 && self.min_angle.is_finite()) {
            return bad("min_angle must be non-negative and finite");
        }
        Ok(())
    }
}

/// Everything hidden from the model: the component matrix, the per-class
/// attribute draws, and the resulting unit class directions, indexed by
/// class id.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub r_true: Matrix,
    pub z_true: Vec<Vector>,
    pub mu_true: Vec<Vector>,
}

/// Draws the dataset. All randomness comes from the synthesis stream of
/// `cfg.seed`, in a fixed order: component rows, then per-class attribute
/// vectors (with rejection), then record noise, class by class. Class ids
/// are consecutive from zero: base, then val, then novel.
pub fn generate(cfg: &SynthConfig) -> Result<(DatasetBundle, GroundTruth), SynthError> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, SYNTH_STREAM);
    let total = cfg.total_classes();

    let mut rows = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        loop {
            let raw = Vector::new((0..cfg.d).map(|_| rng.normal()).collect())
                .expect("gaussian draws are finite");
            if let Ok(unit) = l2_normalize(&raw) {
                rows.push(unit);
                break;
            }
        }
    }
    let r_true = Matrix::from_rows(&rows).expect("m unit rows of width d");

    let mut z_true: Vec<Vector> = Vec::with_capacity(total);
    let mut mu_true: Vec<Vector> = Vec::with_capacity(total);
    let mut rejections = 0usize;
    let cos_limit = cfg.min_angle.cos();
    while mu_true.len() < total {
        let mut z = vec![0.0; cfg.m];
        for slot in &mut z {
            if rng.unit_f64() < cfg.sparsity {
                *slot = 0.5 + rng.unit_f64();
            }
        }
        let accepted = if z.iter().all(|v| *v == 0.0) {
            None
        } else {
            let zv = Vector::new(z).expect("finite scores");
            let raw = weighted_sum(&zv, &r_true).expect("widths fixed at m and d");
            match l2_normalize(&raw) {
                Ok(mu) if mu_true.iter().all(|prev| mu.dot(prev) <= cos_limit) => Some((zv, mu)),
                _ => None,
            }
        };
        match accepted {
            Some((zv, mu)) => {
                z_true.push(zv);
                mu_true.push(mu);
            }
            None => {
                rejections += 1;
                if rejections >= REJECTION_BUDGET {
                    return Err(SynthError::RejectionBudgetExceeded {
                        placed: mu_true.len(),
                        min_angle: cfg.min_angle,
                    });
                }
            }
        }
    }

    let coord_std = cfg.sigma / (cfg.d as f64).sqrt();
    let mut records = Vec::with_capacity(total * cfg.per_class);
    for (class, mu) in mu_true.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let feature: Vec<f64> = mu.iter().map(|m| m + coord_std * rng.normal()).collect();
            records.push((Vector::new(feature).expect("finite"), class as u32));
        }
    }

    let embeddings = EmbeddingTable::new(cfg.d, records)?;
    let attr_rows: Vec<(u32, Vec<f64>)> = z_true
        .iter()
        .enumerate()
        .map(|(c, z)| (c as u32, z.to_vec()))
        .collect();
    let attributes = AttributeTable::from_rows(AttributeLevel::Category, &attr_rows)?;
    let split = SplitSpec::new(
        (0..cfg.n_base as u32).collect(),
        (cfg.n_base as u32..(cfg.n_base + cfg.n_val) as u32).collect(),
        ((cfg.n_base + cfg.n_val) as u32..total as u32).collect(),
    )?;
    let bundle = DatasetBundle::validate(embeddings, attributes, split)?;
    Ok((
        bundle,
        GroundTruth {
            r_true,
            z_true,
            mu_true,
        },
    ))
}

/// Classifies queries by cosine similarity to the true class directions.
/// No learning is involved, so this is the reference any learned
/// compositional prototype is compared against.
pub fn oracle_accuracy(
    bundle: &DatasetBundle,
    truth: &GroundTruth,
    pool: &[u32],
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mu_of = |class: u32| -> Result<&Vector, EvalError> {
        truth
            .mu_true
            .get(class as usize)
            .ok_or(EvalError::Model(ModelError::MissingAttribute { class }))
    };
    crate::eval::evaluate_with(
        bundle,
        pool,
        spec,
        n_episodes,
        seed,
        "oracle",
        |_, episode| {
            let mus: Vec<&Vector> = episode
                .classes
                .iter()
                .map(|c| mu_of(*c))
                .collect::<Result<_, _>>()?;
            episode
                .query
                .iter()
                .map(|&(record, _)| {
                    let f = bundle.embeddings().feature(record);
                    let mut best = 0usize;
                    let mut best_cos = f64::NEG_INFINITY;
                    for (i, mu) in mus.iter().enumerate() {
                        let c = cosine_sim(f, mu).map_err(ModelError::Grad)?;
                        if c > best_cos {
                            best_cos = c;
                            best = i;
                        }
                    }
                    Ok(episode.classes[best])
                })
                .collect()
        },
    )
}

// -------------------------------------------------------- truth file i/o

#[derive(Serialize, Deserialize)]
struct TruthHeader {
    magic: String,
    m: usize,
    d: usize,
    classes: usize,
    sections: Vec<SectionDecl>,
}

/// Writes the ground truth in the section-file layout shared with parameter
/// checkpoints: one JSON header line, then f32 payload sections `r_true`,
/// `z_true`, `mu_true`.
pub fn save_truth(path: &Path, truth: &GroundTruth) -> Result<(), SynthError> {
    let classes = truth.z_true.len();
    let sections: Vec<(&str, Vec<u8>)> = vec![
        ("r_true", f32_bytes(truth.r_true.as_slice().iter().copied())),
        (
            "z_true",
            f32_bytes(truth.z_true.iter().flat_map(|v| v.iter().copied())),
        ),
        (
            "mu_true",
            f32_bytes(truth.mu_true.iter().flat_map(|v| v.iter().copied())),
        ),
    ];
    let header = TruthHeader {
        magic: TRUTH_MAGIC.into(),
        m: truth.r_true.rows(),
        d: truth.r_true.cols(),
        classes,
        sections: sections
            .iter()
            .map(|(name, bytes)| SectionDecl {
                name: (*name).into(),
                bytes: bytes.len(),
            })
            .collect(),
    };
    let payload: Vec<u8> = sections.into_iter().flat_map(|(_, b)| b).collect();
    write_section_file(path, &header, &payload)?;
    Ok(())
}

pub fn load_truth(path: &Path) -> Result<GroundTruth, SynthError> {
    let (header_line, payload) = read_section_file(path)?;
    let header: TruthHeader =
        serde_json::from_str(&header_line).map_err(CheckpointError::Json)?;
    if header.magic != TRUTH_MAGIC {
        return Err(SynthError::File(CheckpointError::BadMagic {
            expected: TRUTH_MAGIC.into(),
            found: header.magic,
        }));
    }
    let (m, d, classes) = (header.m, header.d, header.classes);
    let expected: &[(&str, usize)] = &[
        ("r_true", 4 * m * d),
        ("z_true", 4 * classes * m),
        ("mu_true", 4 * classes * d),
    ];
    let declared: usize = header.sections.iter().map(|s| s.bytes).sum();
    if payload.len() != declared {
        return Err(SynthError::File(CheckpointError::PayloadSize {
            expected: declared,
            found: payload.len(),
        }));
    }
    let mut r_true = None;
    let mut z_true = None;
    let mut mu_true = None;
    let mut at = 0usize;
    for decl in &header.sections {
        let size = expected
            .iter()
            .find(|(name, _)| *name == decl.name)
            .map(|(_, s)| *s)
            .ok_or_else(|| {
                CheckpointError::BadSections(format!("unknown section {:?}", decl.name))
            })?;
        if decl.bytes != size {
            return Err(SynthError::File(CheckpointError::SectionSize {
                name: decl.name.clone(),
                declared: decl.bytes,
                expected: size,
            }));
        }
        let values = f64_values(&payload[at..at + decl.bytes]);
        at += decl.bytes;
        let chunked = |width: usize| -> Result<Vec<Vector>, CheckpointError> {
            values
                .chunks(width.max(1))
                .map(|c| Vector::new(c.to_vec()).map_err(CheckpointError::from))
                .collect()
        };
        match decl.name.as_str() {
            "r_true" => r_true = Some(Matrix::new(m, d, values).map_err(CheckpointError::from)?),
            "z_true" => z_true = Some(chunked(m)?),
            "mu_true" => mu_true = Some(chunked(d)?),
            _ => unreachable!(),
        }
    }
    let missing =
        |name: &str| CheckpointError::BadSections(format!("missing section {name:?}"));
    Ok(GroundTruth {
        r_true: r_true.ok_or_else(|| missing("r_true"))?,
        z_true: z_true.ok_or_else(|| missing("z_true"))?,
        mu_true: mu_true.ok_or_else(|| missing("mu_true"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            m: 6,
            d: 12,
            n_base: 8,
            n_val: 3,
            n_novel: 3,
            per_class: 10,
            sigma: 0.05,
            sparsity: 0.5,
            min_angle: 0.5,
            seed: 42,
        }
    }

    #[test]
    fn zero_noise_features_equal_class_directions() {
        let cfg = SynthConfig {
            sigma: 0.0,
            ..small_cfg()
        };
        let (bundle, truth) = generate(&cfg).unwrap();
        for i in 0..bundle.embeddings().len() {
            let class = bundle.embeddings().label(i) as usize;
            assert_eq!(
                bundle.embeddings().feature(i).as_slice(),
                truth.mu_true[class].as_slice()
            );
        }
    }

    #[test]
    fn zero_noise_oracle_is_perfect() {
        let cfg = SynthConfig {
            sigma: 0.0,
            ..small_cfg()
        };
        let (bundle, truth) = generate(&cfg).unwrap();
        let spec = EpisodeSpec::new(3, 1, 5).unwrap();
        let report =
            oracle_accuracy(&bundle, &truth, bundle.split().novel(), &spec, 300, 7).unwrap();
        assert_eq!(report.mean_acc, 100.0);
        assert_eq!(report.ci95, 0.0);
        assert_eq!(report.variant, "oracle");
    }

    #[test]
    fn default_scale_oracle_is_nearly_perfect() {
        let (bundle, truth) = generate(&SynthConfig::default()).unwrap();
        let spec = EpisodeSpec::new(5, 1, 15).unwrap();
        let report =
            oracle_accuracy(&bundle, &truth, bundle.split().novel(), &spec, 2000, 7).unwrap();
        assert!(report.mean_acc >= 99.0, "oracle at {}", report.mean_acc);
    }

    #[test]
    fn oracle_degrades_monotonically_with_noise() {
        let spec = EpisodeSpec::new(5, 1, 5).unwrap();
        let mut accs = Vec::new();
        for sigma in [0.0, 0.1, 0.3] {
            let cfg = SynthConfig {
                sigma,
                ..small_cfg()
            };
            let (bundle, truth) = generate(&cfg).unwrap();
            let all: Vec<u32> = (0..cfg.total_classes() as u32).collect();
            let report = oracle_accuracy(&bundle, &truth, &all, &spec, 500, 11).unwrap();
            accs.push(report.mean_acc);
        }
        assert!(accs[0] >= accs[1] && accs[1] >= accs[2], "{accs:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let (b1, t1) = generate(&cfg).unwrap();
        let (b2, t2) = generate(&cfg).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(t1, t2);
        let other = SynthConfig {
            seed: 43,
            ..cfg
        };
        let (b3, _) = generate(&other).unwrap();
        assert_ne!(b1, b3);
    }

    #[test]
    fn ground_truth_invariants_hold() {
        let cfg = SynthConfig {
            min_angle: 0.7,
            n_base: 4,
            n_val: 2,
            n_novel: 2,
            ..small_cfg()
        };
        let (bundle, truth) = generate(&cfg).unwrap();
        for j in 0..truth.r_true.rows() {
            let norm: f64 = truth.r_true.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        for z in &truth.z_true {
            assert!(z.iter().all(|v| *v >= 0.0));
            assert!(z.iter().any(|v| *v > 0.0));
        }
        for (a, mu_a) in truth.mu_true.iter().enumerate() {
            for mu_b in truth.mu_true.iter().skip(a + 1) {
                let angle = mu_a.dot(mu_b).clamp(-1.0, 1.0).acos();
                assert!(angle >= cfg.min_angle - 1e-9, "angle {angle}");
            }
        }
        // The attribute table carries the exact generating scores.
        for (c, z) in truth.z_true.iter().enumerate() {
            assert_eq!(bundle.attributes().get(c as u32).unwrap(), z);
        }
    }

    #[test]
    fn noise_is_isotropic_at_the_stated_scale() {
        let cfg = SynthConfig {
            m: 5,
            d: 16,
            n_base: 4,
            n_val: 1,
            n_novel: 1,
            per_class: 2000,
            sigma: 0.3,
            sparsity: 0.5,
            min_angle: 0.5,
            seed: 9,
        };
        let (bundle, truth) = generate(&cfg).unwrap();
        let n = bundle.embeddings().len();
        assert_eq!(n, 12_000);
        let mut sq_sum = vec![0.0; cfg.d];
        for i in 0..n {
            let mu = &truth.mu_true[bundle.embeddings().label(i) as usize];
            for (k, (f, m)) in bundle.embeddings().feature(i).iter().zip(mu.iter()).enumerate() {
                let e = f - m;
                sq_sum[k] += e * e;
            }
        }
        let expected = cfg.sigma * cfg.sigma / cfg.d as f64;
        for (k, s) in sq_sum.iter().enumerate() {
            let var = s / n as f64;
            assert!(
                (var - expected).abs() < 0.1 * expected,
                "coordinate {k}: {var} vs {expected}"
            );
        }
    }

    #[test]
    fn impossible_geometry_exhausts_the_budget() {
        let cfg = SynthConfig {
            d: 2,
            n_base: 30,
            n_val: 15,
            n_novel: 15,
            min_angle: 0.5,
            ..small_cfg()
        };
        assert!(matches!(
            generate(&cfg).unwrap_err(),
            SynthError::RejectionBudgetExceeded { .. }
        ));
    }

    #[test]
    fn bad_configs_are_named() {
        let err = generate(&SynthConfig {
            sparsity: 0.0,
            ..small_cfg()
        })
        .unwrap_err();
        assert!(err.to_string().contains("sparsity"));
        let err = generate(&SynthConfig {
            d: 1,
            ..small_cfg()
        })
        .unwrap_err();
        assert!(err.to_string().contains("d must"));
    }

    #[test]
    fn truth_file_round_trips_at_single_precision() {
        let (_, truth) = generate(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.cpn");
        save_truth(&path, &truth).unwrap();
        let back = load_truth(&path).unwrap();
        assert_eq!(back.z_true.len(), truth.z_true.len());
        for (a, b) in back.r_true.as_slice().iter().zip(truth.r_true.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        for (a, b) in back.mu_true.iter().zip(&truth.mu_true) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        save_truth(&dir.path().join("again.cpn"), &truth).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("again.cpn")).unwrap()
        );
    }
}
