//! The classification head: component prototypes, prototype composition
//! and fusion, and cosine-softmax prediction.
//!
//! A class prototype can be built three ways and the ablation variants
//! enumerate the combinations:
//!
//! - compositional: attribute-weighted sum of L2-normalized component
//!   prototype rows (`LCP` when learned, `RICP` when random);
//! - visual: mean of the support features (`VP`);
//! - fused: convex combination of the two, gated by a learned sigmoid
//!   weight (`RICP+VP`, `LCP+VP`, `ADAPTIVE`), or concatenated and
//!   projected back to d dims (`CONCAT`).
//!
//! Inference is pure: a [`CpnParams`] value is immutable here and safe to
//! share across threads. All mutation happens in the training module.

mod checkpoint;
pub mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub(crate) use checkpoint::{
    f32_bytes, f64_values, read_section_file, write_section_file, SectionDecl,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DatasetBundle;
use crate::episodes::Episode;
use crate::gradcore::{
    self, cosine_sim, l2_normalize, softmax, weighted_sum, GradError, Matrix, Vector,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("class {class} has an all-zero attribute vector")]
    ZeroAttributeVector { class: u32 },
    #[error("visual prototype needs at least one support feature")]
    EmptySupport,
    #[error("generator input mode {mode} expects weight length {expected}, found {found}")]
    GenDimMismatch {
        mode: GenInputMode,
        expected: usize,
        found: usize,
    },
    #[error("variant {0} requires the concat fusion head")]
    MissingConcatHead(Variant),
    #[error("class {class} has no attribute vector in the bundle")]
    MissingAttribute { class: u32 },
}

// ------------------------------------------------------------------ types

/// Prototype construction strategies covered by the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Randomly initialized component prototypes, composed only.
    #[serde(rename = "ricp")]
    Ricp,
    /// Visual prototype (support mean) only.
    #[serde(rename = "vp")]
    Vp,
    /// Learned component prototypes, composed only.
    #[serde(rename = "lcp")]
    Lcp,
    /// Gated fusion of a random compositional prototype with the visual one.
    #[serde(rename = "ricp+vp")]
    RicpVp,
    /// Gated fusion of the learned compositional prototype (frozen during
    /// meta-training) with the visual one.
    #[serde(rename = "lcp+vp")]
    LcpVp,
    /// Concatenation [visual, compositional] projected back to d dims.
    #[serde(rename = "concat")]
    Concat,
    /// Gated fusion with component prototypes further meta-optimized.
    #[serde(rename = "adaptive")]
    Adaptive,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Ricp,
        Variant::Vp,
        Variant::Lcp,
        Variant::RicpVp,
        Variant::LcpVp,
        Variant::Concat,
        Variant::Adaptive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Ricp => "ricp",
            Variant::Vp => "vp",
            Variant::Lcp => "lcp",
            Variant::RicpVp => "ricp+vp",
            Variant::LcpVp => "lcp+vp",
            Variant::Concat => "concat",
            Variant::Adaptive => "adaptive",
        }
    }

    /// True when the variant runs the sigmoid gate.
    pub fn uses_generator(&self) -> bool {
        matches!(self, Variant::RicpVp | Variant::LcpVp | Variant::Adaptive)
    }

    /// True when component prototypes stay frozen during meta-training.
    pub fn freezes_protos(&self) -> bool {
        matches!(self, Variant::RicpVp | Variant::LcpVp)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ricp" => Ok(Variant::Ricp),
            "vp" => Ok(Variant::Vp),
            "lcp" => Ok(Variant::Lcp),
            "ricp+vp" => Ok(Variant::RicpVp),
            "lcp+vp" => Ok(Variant::LcpVp),
            "concat" => Ok(Variant::Concat),
            "adaptive" => Ok(Variant::Adaptive),
            other => Err(format!(
                "unknown variant {other:?} (expected one of ricp, vp, lcp, \
                 ricp+vp, lcp+vp, concat, adaptive)"
            )),
        }
    }
}

/// What the weight generator looks at when producing the fusion weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenInputMode {
    /// Normalized compositional prototype (the default).
    Comp,
    /// Normalized visual prototype.
    Vis,
    /// Concatenation [visual, compositional], input length 2d.
    Concat,
}

impl GenInputMode {
    pub const ALL: [GenInputMode; 3] = [GenInputMode::Comp, GenInputMode::Vis, GenInputMode::Concat];

    pub fn as_str(&self) -> &'static str {
        match self {
            GenInputMode::Comp => "comp",
            GenInputMode::Vis => "vis",
            GenInputMode::Concat => "concat",
        }
    }

    /// Generator weight length for feature dim `d`.
    pub fn input_len(&self, d: usize) -> usize {
        match self {
            GenInputMode::Comp | GenInputMode::Vis => d,
            GenInputMode::Concat => 2 * d,
        }
    }
}

impl std::fmt::Display for GenInputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GenInputMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "comp" => Ok(GenInputMode::Comp),
            "vis" => Ok(GenInputMode::Vis),
            "concat" => Ok(GenInputMode::Concat),
            other => Err(format!(
                "unknown generator input mode {other:?} (expected comp, vis, or concat)"
            )),
        }
    }
}

/// One learnable row per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPrototypes {
    pub(crate) r: Matrix,
}

impl ComponentPrototypes {
    pub fn new(r: Matrix) -> Self {
        ComponentPrototypes { r }
    }

    pub fn m(&self) -> usize {
        self.r.rows()
    }

    pub fn d(&self) -> usize {
        self.r.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.r
    }
}

/// The fusion gate: lambda = sigmoid(w . input + b).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGenerator {
    pub(crate) w: Vector,
    pub(crate) b: f64,
}

impl WeightGenerator {
    pub fn new(w: Vector, b: f64) -> Result<Self, GradError> {
        if !b.is_finite() {
            return Err(GradError::NonFinite(0));
        }
        Ok(WeightGenerator { w, b })
    }

    pub fn zeros(input_len: usize) -> Self {
        WeightGenerator {
            w: Vector::zeros(input_len),
            b: 0.0,
        }
    }

    pub fn w(&self) -> &Vector {
        &self.w
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

/// Learnable softmax temperatures for the two training stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub(crate) tau1: f64,
    pub(crate) tau2: f64,
}

impl Temperatures {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self, GradError> {
        if !tau1.is_finite() {
            return Err(GradError::NonFinite(0));
        }
        if !tau2.is_finite() {
            return Err(GradError::NonFinite(1));
        }
        Ok(Temperatures { tau1, tau2 })
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }
}

/// Projection head for the concatenation variant: d x 2d weight plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatFusionHead {
    pub(crate) w: Matrix,
    pub(crate) b: Vector,
}

impl ConcatFusionHead {
    pub fn new(w: Matrix, b: Vector) -> Result<Self, GradError> {
        if w.cols() != 2 * w.rows() {
            return Err(GradError::DimMismatch {
                expected: 2 * w.rows(),
                found: w.cols(),
            });
        }
        if b.len() != w.rows() {
            return Err(GradError::DimMismatch {
                expected: w.rows(),
                found: b.len(),
            });
        }
        Ok(ConcatFusionHead { w, b })
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }
}

/// Every learnable parameter of the head, plus the generator input mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CpnParams {
    pub(crate) protos: ComponentPrototypes,
    pub(crate) gen: WeightGenerator,
    pub(crate) temps: Temperatures,
    pub(crate) concat_head: Option<ConcatFusionHead>,
    pub(crate) gen_input_mode: GenInputMode,
}

impl CpnParams {
    pub fn new(
        protos: ComponentPrototypes,
        gen: WeightGenerator,
        temps: Temperatures,
        gen_input_mode: GenInputMode,
    ) -> Result<Self, ModelError> {
        let expected = gen_input_mode.input_len(protos.d());
        if gen.w.len() != expected {
            return Err(ModelError::GenDimMismatch {
                mode: gen_input_mode,
                expected,
                found: gen.w.len(),
            });
        }
        Ok(CpnParams {
            protos,
            gen,
            temps,
            concat_head: None,
            gen_input_mode,
        })
    }

    pub fn with_concat_head(mut self, head: ConcatFusionHead) -> Result<Self, ModelError> {
        if head.w.rows() != self.d() {
            return Err(ModelError::GenDimMismatch {
                mode: self.gen_input_mode,
                expected: self.d(),
                found: head.w.rows(),
            });
        }
        self.concat_head = Some(head);
        Ok(self)
    }

    pub fn protos(&self) -> &ComponentPrototypes {
        &self.protos
    }

    pub fn gen(&self) -> &WeightGenerator {
        &self.gen
    }

    pub fn temps(&self) -> &Temperatures {
        &self.temps
    }

    pub fn concat_head(&self) -> Option<&ConcatFusionHead> {
        self.concat_head.as_ref()
    }

    pub fn gen_input_mode(&self) -> GenInputMode {
        self.gen_input_mode
    }

    pub fn m(&self) -> usize {
        self.protos.m()
    }

    pub fn d(&self) -> usize {
        self.protos.d()
    }

    /// Swaps in a new component prototype matrix of the same shape.
    pub fn with_protos(mut self, r: Matrix) -> Result<Self, ModelError> {
        if r.rows() != self.m() || r.cols() != self.d() {
            return Err(ModelError::Grad(GradError::DimMismatch {
                expected: self.m() * self.d(),
                found: r.rows() * r.cols(),
            }));
        }
        self.protos = ComponentPrototypes::new(r);
        Ok(self)
    }

    /// Swaps in a new generator (validated against the input mode).
    pub fn with_gen(mut self, gen: WeightGenerator) -> Result<Self, ModelError> {
        let expected = self.gen_input_mode.input_len(self.d());
        if gen.w.len() != expected {
            return Err(ModelError::GenDimMismatch {
                mode: self.gen_input_mode,
                expected,
                found: gen.w.len(),
            });
        }
        self.gen = gen;
        Ok(self)
    }

    /// Swaps the generator input mode, resetting the generator to zeros of
    /// the matching length.
    pub fn with_gen_input_mode(mut self, mode: GenInputMode) -> Self {
        self.gen_input_mode = mode;
        self.gen = WeightGenerator::zeros(mode.input_len(self.d()));
        self
    }

    pub fn with_temps(mut self, temps: Temperatures) -> Self {
        self.temps = temps;
        self
    }
}

// ------------------------------------------------------------ forward ops

/// Compositional prototype: sum_j z_j * (r_j / ||r_j||). Serves as the
/// per-class prototype in pre-training and as p_comp in the meta stages.
pub fn class_prototype(protos: &ComponentPrototypes, z: &Vector) -> Result<Vector, ModelError> {
    if z.iter().all(|x| *x == 0.0) {
        return Err(ModelError::ZeroAttributeVector { class: 0 });
    }
    let mut rows = Vec::with_capacity(protos.m());
    for j in 0..protos.m() {
        let row = Vector::from_raw(protos.r.row(j).to_vec());
        rows.push(l2_normalize(&row)?);
    }
    let normalized = Matrix::from_rows(&rows)?;
    Ok(weighted_sum(z, &normalized)?)
}

/// Softmax over tau * cos(feature, prototype) for each prototype.
fn cosine_softmax(feature: &Vector, prototypes: &[Vector], tau: f64) -> Result<Vector, ModelError> {
    let mut logits = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        logits.push(tau * cosine_sim(feature, p)?);
    }
    Ok(softmax(&Vector::from_raw(logits)))
}

/// Base-class probabilities at temperature tau1.
pub fn base_class_probs(
    feature: &Vector,
    prototypes: &[Vector],
    tau1: f64,
) -> Result<Vector, ModelError> {
    cosine_softmax(feature, prototypes, tau1)
}

/// Query probabilities over fused prototypes at temperature tau2.
pub fn query_probs(
    query_feature: &Vector,
    fused: &[Vector],
    tau2: f64,
) -> Result<Vector, ModelError> {
    cosine_softmax(query_feature, fused, tau2)
}

/// Arithmetic mean of the support features. Each coordinate is summed in
/// sorted order so the result cannot depend on support-list order.
pub fn visual_prototype(features: &[&Vector]) -> Result<Vector, ModelError> {
    let first = features.first().ok_or(ModelError::EmptySupport)?;
    let d = first.len();
    for f in features {
        if f.len() != d {
            return Err(ModelError::Grad(GradError::DimMismatch {
                expected: d,
                found: f.len(),
            }));
        }
    }
    let mut mean = vec![0.0; d];
    let mut column = Vec::with_capacity(features.len());
    for (k, slot) in mean.iter_mut().enumerate() {
        column.clear();
        column.extend(features.iter().map(|f| f[k]));
        column.sort_by(f64::total_cmp);
        *slot = column.iter().sum::<f64>() / features.len() as f64;
    }
    Ok(Vector::from_raw(mean))
}

/// The gate input for a given mode; concat order is [visual, compositional].
pub(crate) fn gen_input(mode: GenInputMode, p_comp_hat: &Vector, p_vis_hat: &Vector) -> Vec<f64> {
    match mode {
        GenInputMode::Comp => p_comp_hat.to_vec(),
        GenInputMode::Vis => p_vis_hat.to_vec(),
        GenInputMode::Concat => {
            let mut v = p_vis_hat.to_vec();
            v.extend(p_comp_hat.iter());
            v
        }
    }
}

/// Fusion weight lambda = sigmoid(w . input + b), clamped into the open
/// interval (0,1): sigmoid saturates to exactly 0 or 1 in double precision
/// around |x| > 37, and downstream convexity arguments need both prototypes
/// to keep nonzero weight.
pub fn fusion_weight(
    gen: &WeightGenerator,
    mode: GenInputMode,
    p_comp_hat: &Vector,
    p_vis_hat: &Vector,
) -> Result<f64, ModelError> {
    let input = gen_input(mode, p_comp_hat, p_vis_hat);
    if input.len() != gen.w.len() {
        return Err(ModelError::GenDimMismatch {
            mode,
            expected: gen.w.len(),
            found: input.len(),
        });
    }
    let t = gradcore::dot(gen.w.as_slice(), &input) + gen.b;
    Ok(gradcore::sigmoid(t).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Convex combination lambda * p_comp_hat + (1 - lambda) * p_vis_hat.
/// For unit inputs the result has norm at most 1.
pub fn fuse(lambda: f64, p_comp_hat: &Vector, p_vis_hat: &Vector) -> Vector {
    assert_eq!(
        p_comp_hat.len(),
        p_vis_hat.len(),
        "fuse on mismatched dims"
    );
    debug_assert!((0.0..=1.0).contains(&lambda));
    let mut out = p_comp_hat.scale(lambda);
    out.axpy(1.0 - lambda, p_vis_hat);
    out
}

// -------------------------------------------------------------- episodes

/// Per-class slice of an episode's support set.
#[derive(Debug)]
pub struct SupportClass<'a> {
    pub class: u32,
    pub z: &'a Vector,
    pub features: Vec<&'a Vector>,
}

/// Resolves episode support records against the bundle, in episode class
/// order. Query attribute vectors are never touched.
pub fn gather_support<'a>(
    episode: &Episode,
    bundle: &'a DatasetBundle,
) -> Result<Vec<SupportClass<'a>>, ModelError> {
    let mut out = Vec::with_capacity(episode.classes.len());
    for &class in &episode.classes {
        let z = bundle
            .attributes()
            .get(class)
            .ok_or(ModelError::MissingAttribute { class })?;
        let features = episode
            .support_of(class)
            .map(|i| bundle.embeddings().feature(i))
            .collect();
        out.push(SupportClass { class, z, features });
    }
    Ok(out)
}

/// Builds the per-class prototypes a variant classifies against, aligned
/// with the support class order. `RICP` composes whatever component
/// prototypes are in `params`; drawing the random matrix is the caller's
/// job so that one draw can serve a whole evaluation.
pub fn episode_prototypes(
    params: &CpnParams,
    variant: Variant,
    support: &[SupportClass<'_>],
) -> Result<Vec<Vector>, ModelError> {
    let mut out = Vec::with_capacity(support.len());
    for sc in support {
        let proto = match variant {
            Variant::Vp => {
                let p_vis = visual_prototype(&sc.features)?;
                l2_normalize(&p_vis)?
            }
            Variant::Lcp | Variant::Ricp => {
                let p_comp = class_prototype(&params.protos, sc.z)
                    .map_err(|e| tag_class(e, sc.class))?;
                l2_normalize(&p_comp)?
            }
            Variant::RicpVp | Variant::LcpVp | Variant::Adaptive => {
                let p_comp = class_prototype(&params.protos, sc.z)
                    .map_err(|e| tag_class(e, sc.class))?;
                let p_comp_hat = l2_normalize(&p_comp)?;
                let p_vis_hat = l2_normalize(&visual_prototype(&sc.features)?)?;
                let lambda =
                    fusion_weight(&params.gen, params.gen_input_mode, &p_comp_hat, &p_vis_hat)?;
                fuse(lambda, &p_comp_hat, &p_vis_hat)
            }
            Variant::Concat => {
                let head = params
                    .concat_head
                    .as_ref()
                    .ok_or(ModelError::MissingConcatHead(variant))?;
                let p_comp = class_prototype(&params.protos, sc.z)
                    .map_err(|e| tag_class(e, sc.class))?;
                let p_comp_hat = l2_normalize(&p_comp)?;
                let p_vis_hat = l2_normalize(&visual_prototype(&sc.features)?)?;
                let mut cat = p_vis_hat.to_vec();
                cat.extend(p_comp_hat.iter());
                let mut o = head.w.matvec(&cat);
                for (oi, bi) in o.iter_mut().zip(head.b.iter()) {
                    *oi += bi;
                }
                l2_normalize(&Vector::from_raw(o))?
            }
        };
        out.push(proto);
    }
    Ok(out)
}

fn tag_class(e: ModelError, class: u32) -> ModelError {
    match e {
        ModelError::ZeroAttributeVector { .. } => ModelError::ZeroAttributeVector { class },
        other => other,
    }
}

/// One classified query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Argmax class; ties go to the lowest class id.
    pub class: u32,
    /// Probabilities aligned with the episode's sorted class list.
    pub probs: Vector,
}

/// Classifies every query in the episode. Queries contribute only their
/// feature vectors; their attribute scores are unavailable by API shape.
pub fn predict(
    episode: &Episode,
    bundle: &DatasetBundle,
    params: &CpnParams,
    variant: Variant,
) -> Result<Vec<Prediction>, ModelError> {
    let support = gather_support(episode, bundle)?;
    let prototypes = episode_prototypes(params, variant, &support)?;
    let mut out = Vec::with_capacity(episode.query.len());
    for &(record, _) in &episode.query {
        let feature = bundle.embeddings().feature(record);
        let probs = query_probs(feature, &prototypes, params.temps.tau2)?;
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            // Strict comparison keeps the earliest (lowest class id) on ties.
            if *p > probs[best] {
                best = i;
            }
        }
        out.push(Prediction {
            class: episode.classes[best],
            probs,
        });
    }
    Ok(out)
}
