//! Training losses with hand-derived parameter gradients.
//!
//! Two losses drive the two stages:
//!
//! - the pre-training batch loss: mean cross-entropy of cosine-softmax
//!   (temperature tau1) over compositional prototypes of every base class;
//! - the episode query loss: mean cross-entropy of cosine-softmax
//!   (temperature tau2) over the variant's per-class prototypes.
//!
//! Both run one cached forward pass and one backward pass that chains the
//! primitive gradients from [`crate::gradcore`]. Gradient groups absent
//! from a variant's graph come back as `None`; the optimizer skips those
//! parameters entirely (no weight-decay drift on frozen groups).

use crate::episodes::Episode;
use crate::dataio::DatasetBundle;
use crate::gradcore::{
    l2_normalize, l2_normalize_vjp, softmax_xent, FdCheck, GradError, Matrix, Vector, FD_STEP,
};
use crate::model::{
    fusion_weight, gen_input, visual_prototype, CpnParams, GenInputMode, ModelError,
    SupportClass, Variant,
};

/// Gradients per parameter group; `None` marks a group outside the graph.
#[derive(Debug, Clone)]
pub struct CpnGrads {
    pub r: Option<Matrix>,
    pub gen_w: Option<Vector>,
    pub gen_b: Option<f64>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub concat_w: Option<Matrix>,
    pub concat_b: Option<Vector>,
}

impl CpnGrads {
    pub fn none() -> Self {
        CpnGrads {
            r: None,
            gen_w: None,
            gen_b: None,
            tau1: None,
            tau2: None,
            concat_w: None,
            concat_b: None,
        }
    }
}

/// Episode support plus query features with class positions. Queries carry
/// features only; the attribute table is consulted for support classes.
pub struct EpisodeBatch<'a> {
    pub support: Vec<SupportClass<'a>>,
    pub queries: Vec<(&'a Vector, usize)>,
}

impl<'a> EpisodeBatch<'a> {
    pub fn gather(episode: &Episode, bundle: &'a DatasetBundle) -> Result<Self, ModelError> {
        let support = crate::model::gather_support(episode, bundle)?;
        let mut queries = Vec::with_capacity(episode.query.len());
        for &(record, class) in &episode.query {
            let position = episode
                .class_position(class)
                .ok_or(ModelError::MissingAttribute { class })?;
            queries.push((bundle.embeddings().feature(record), position));
        }
        Ok(EpisodeBatch { support, queries })
    }
}

// -------------------------------------------------------- episode forward

struct ClassForward {
    /// Unnormalized compositional prototype, when the variant composes one.
    pc: Option<Vector>,
    pch: Option<Vector>,
    pvh: Option<Vector>,
    /// Gate input and fusion weight for the fused variants.
    input: Option<Vec<f64>>,
    lambda: Option<f64>,
    /// Concat pathway: input [vis, comp] and pre-normalization output.
    cat: Option<Vec<f64>>,
    o: Option<Vector>,
    /// The prototype queries are classified against.
    pf: Vector,
    npf: f64,
}

struct QueryForward {
    cos: Vec<f64>,
    dlogits: Vector,
    nf: f64,
}

struct EpisodeForward {
    classes: Vec<ClassForward>,
    queries: Vec<QueryForward>,
    loss: f64,
}

fn normalized_rows(r: &Matrix) -> Result<Vec<Vector>, GradError> {
    (0..r.rows())
        .map(|j| l2_normalize(&Vector::from_raw(r.row(j).to_vec())))
        .collect()
}

fn compose(rhat: &[Vector], z: &Vector, class: u32) -> Result<Vector, ModelError> {
    if z.len() != rhat.len() {
        return Err(ModelError::Grad(GradError::DimMismatch {
            expected: rhat.len(),
            found: z.len(),
        }));
    }
    if z.iter().all(|x| *x == 0.0) {
        return Err(ModelError::ZeroAttributeVector { class });
    }
    let d = rhat[0].len();
    let mut pc = Vector::zeros(d);
    for (zj, row) in z.iter().zip(rhat.iter()) {
        pc.axpy(*zj, row);
    }
    Ok(pc)
}

fn episode_forward(
    params: &CpnParams,
    variant: Variant,
    batch: &EpisodeBatch<'_>,
) -> Result<EpisodeForward, ModelError> {
    let needs_comp = variant != Variant::Vp;
    let rhat = if needs_comp {
        Some(normalized_rows(&params.protos.r)?)
    } else {
        None
    };

    let mut classes = Vec::with_capacity(batch.support.len());
    for sc in &batch.support {
        let mut fwd = ClassForward {
            pc: None,
            pch: None,
            pvh: None,
            input: None,
            lambda: None,
            cat: None,
            o: None,
            pf: Vector::zeros(1),
            npf: 0.0,
        };
        if let Some(rhat) = &rhat {
            let pc = compose(rhat, sc.z, sc.class)?;
            fwd.pch = Some(l2_normalize(&pc)?);
            fwd.pc = Some(pc);
        }
        if variant != Variant::Lcp && variant != Variant::Ricp {
            fwd.pvh = Some(l2_normalize(&visual_prototype(&sc.features)?)?);
        }
        fwd.pf = match variant {
            Variant::Vp => fwd.pvh.clone().unwrap(),
            Variant::Lcp | Variant::Ricp => fwd.pch.clone().unwrap(),
            Variant::RicpVp | Variant::LcpVp | Variant::Adaptive => {
                let pch = fwd.pch.as_ref().unwrap();
                let pvh = fwd.pvh.as_ref().unwrap();
                let lambda = fusion_weight(&params.gen, params.gen_input_mode, pch, pvh)?;
                fwd.input = Some(gen_input(params.gen_input_mode, pch, pvh));
                fwd.lambda = Some(lambda);
                crate::model::fuse(lambda, pch, pvh)
            }
            Variant::Concat => {
                let head = params
                    .concat_head
                    .as_ref()
                    .ok_or(ModelError::MissingConcatHead(variant))?;
                let pch = fwd.pch.as_ref().unwrap();
                let pvh = fwd.pvh.as_ref().unwrap();
                let mut cat = pvh.to_vec();
                cat.extend(pch.iter());
                let mut o = head.w.matvec(&cat);
                for (oi, bi) in o.iter_mut().zip(head.b.iter()) {
                    *oi += bi;
                }
                let o = Vector::from_raw(o);
                let pf = l2_normalize(&o)?;
                fwd.cat = Some(cat);
                fwd.o = Some(o);
                pf
            }
        };
        fwd.npf = fwd.pf.norm();
        classes.push(fwd);
    }

    let tau2 = params.temps.tau2;
    let mut queries = Vec::with_capacity(batch.queries.len());
    let mut loss = 0.0;
    for &(feature, target) in &batch.queries {
        let nf = feature.norm();
        if nf <= crate::gradcore::NORM_EPS {
            return Err(ModelError::Grad(GradError::NearZeroNorm));
        }
        let cos: Vec<f64> = classes
            .iter()
            .map(|c| feature.dot(&c.pf) / (nf * c.npf))
            .collect();
        let logits = Vector::from_raw(cos.iter().map(|c| tau2 * c).collect());
        let (l, dlogits) = softmax_xent(&logits, target)?;
        loss += l;
        queries.push(QueryForward { cos, dlogits, nf });
    }
    loss /= batch.queries.len().max(1) as f64;

    Ok(EpisodeForward {
        classes,
        queries,
        loss,
    })
}

/// Mean query cross-entropy for one episode.
pub fn episode_loss(
    params: &CpnParams,
    variant: Variant,
    batch: &EpisodeBatch<'_>,
) -> Result<f64, ModelError> {
    Ok(episode_forward(params, variant, batch)?.loss)
}

/// Episode loss together with gradients for every parameter group in the
/// variant's graph.
pub fn episode_loss_grads(
    params: &CpnParams,
    variant: Variant,
    batch: &EpisodeBatch<'_>,
) -> Result<(f64, CpnGrads), ModelError> {
    let fwd = episode_forward(params, variant, batch)?;
    let d = params.d();
    let m = params.m();
    let scale = 1.0 / batch.queries.len().max(1) as f64;
    let tau2 = params.temps.tau2;

    // Query loss into per-class prototype gradients plus the tau2 pathway.
    let mut g_pf: Vec<Vector> = fwd.classes.iter().map(|_| Vector::zeros(d)).collect();
    let mut g_tau2 = 0.0;
    for (qf, &(feature, _)) in fwd.queries.iter().zip(&batch.queries) {
        for (s, cls) in fwd.classes.iter().enumerate() {
            let g = qf.dlogits[s] * scale;
            let c = qf.cos[s];
            g_tau2 += g * c;
            let coeff = g * tau2;
            // d cos / d pf = f / (|f||pf|) - cos * pf / |pf|^2
            g_pf[s].axpy(coeff / (qf.nf * cls.npf), feature);
            g_pf[s].axpy(-coeff * c / (cls.npf * cls.npf), &cls.pf);
        }
    }

    let needs_comp = variant != Variant::Vp;
    let mut g_rhat: Vec<Vector> = (0..if needs_comp { m } else { 0 })
        .map(|_| Vector::zeros(d))
        .collect();
    let gen_len = params.gen.w.len();
    let mut g_gen_w = Vector::zeros(gen_len);
    let mut g_gen_b = 0.0;
    let mut g_concat_w = params
        .concat_head
        .as_ref()
        .map(|h| Matrix::zeros(h.w.rows(), h.w.cols()));
    let mut g_concat_b = params.concat_head.as_ref().map(|_| Vector::zeros(d));

    for (s, cls) in fwd.classes.iter().enumerate() {
        // Route the prototype gradient back to the compositional branch.
        let g_pch: Option<Vector> = match variant {
            Variant::Vp => None,
            Variant::Lcp | Variant::Ricp => Some(g_pf[s].clone()),
            Variant::RicpVp | Variant::LcpVp | Variant::Adaptive => {
                let lambda = cls.lambda.unwrap();
                let pch = cls.pch.as_ref().unwrap();
                let pvh = cls.pvh.as_ref().unwrap();
                let g_lambda = g_pf[s].dot(pch) - g_pf[s].dot(pvh);
                let g_t = g_lambda * lambda * (1.0 - lambda);
                let input = cls.input.as_ref().unwrap();
                for (gw, x) in g_gen_w.as_mut_slice().iter_mut().zip(input.iter()) {
                    *gw += g_t * x;
                }
                g_gen_b += g_t;
                let mut g_pch = g_pf[s].scale(lambda);
                match params.gen_input_mode {
                    GenInputMode::Comp => g_pch.axpy(g_t, params.gen.w()),
                    GenInputMode::Vis => {}
                    GenInputMode::Concat => {
                        // Only the compositional half feeds parameters.
                        let w = params.gen.w.as_slice();
                        for (g, wk) in g_pch.as_mut_slice().iter_mut().zip(&w[d..]) {
                            *g += g_t * wk;
                        }
                    }
                }
                Some(g_pch)
            }
            Variant::Concat => {
                let head = params.concat_head.as_ref().unwrap();
                let o = cls.o.as_ref().unwrap();
                let cat = cls.cat.as_ref().unwrap();
                let g_o = l2_normalize_vjp(o, &g_pf[s]).map_err(ModelError::Grad)?;
                let gw = g_concat_w.as_mut().unwrap();
                for i in 0..gw.rows() {
                    let gi = g_o[i];
                    for (slot, ck) in gw.row_mut(i).iter_mut().zip(cat.iter()) {
                        *slot += gi * ck;
                    }
                }
                g_concat_b.as_mut().unwrap().axpy(1.0, &g_o);
                let g_cat = head.w.matvec_t(g_o.as_slice());
                Some(Vector::from_raw(g_cat[d..].to_vec()))
            }
        };
        if let Some(g_pch) = g_pch {
            let pc = cls.pc.as_ref().unwrap();
            let g_pc = l2_normalize_vjp(pc, &g_pch).map_err(ModelError::Grad)?;
            let z = batch.support[s].z;
            for (j, zj) in z.iter().enumerate() {
                if *zj != 0.0 {
                    g_rhat[j].axpy(*zj, &g_pc);
                }
            }
        }
    }

    let mut grads = CpnGrads::none();
    grads.tau2 = Some(g_tau2);
    if needs_comp {
        let mut g_r = Matrix::zeros(m, d);
        for (j, g) in g_rhat.iter().enumerate() {
            let row = Vector::from_raw(params.protos.r.row(j).to_vec());
            let g_row = l2_normalize_vjp(&row, g).map_err(ModelError::Grad)?;
            g_r.row_mut(j).copy_from_slice(g_row.as_slice());
        }
        grads.r = Some(g_r);
    }
    if variant.uses_generator() {
        grads.gen_w = Some(g_gen_w);
        grads.gen_b = Some(g_gen_b);
    }
    if variant == Variant::Concat {
        grads.concat_w = g_concat_w;
        grads.concat_b = g_concat_b;
    }
    Ok((fwd.loss, grads))
}

// ------------------------------------------------------- pretrain forward

struct PretrainForward {
    pcs: Vec<Vector>,
    npcs: Vec<f64>,
    per_example: Vec<QueryForward>,
    loss: f64,
}

fn pretrain_forward(
    params: &CpnParams,
    features: &[&Vector],
    targets: &[usize],
    class_z: &[&Vector],
) -> Result<PretrainForward, ModelError> {
    assert_eq!(features.len(), targets.len(), "one target per feature");
    let rhat = normalized_rows(&params.protos.r)?;
    let mut pcs = Vec::with_capacity(class_z.len());
    for (c, z) in class_z.iter().enumerate() {
        pcs.push(compose(&rhat, z, c as u32)?);
    }
    let npcs: Vec<f64> = pcs.iter().map(|p| p.norm()).collect();
    for (c, n) in npcs.iter().enumerate() {
        if *n <= crate::gradcore::NORM_EPS {
            return Err(ModelError::ZeroAttributeVector { class: c as u32 });
        }
    }

    let tau1 = params.temps.tau1;
    let mut per_example = Vec::with_capacity(features.len());
    let mut loss = 0.0;
    for (feature, &target) in features.iter().zip(targets) {
        let nf = feature.norm();
        if nf <= crate::gradcore::NORM_EPS {
            return Err(ModelError::Grad(GradError::NearZeroNorm));
        }
        let cos: Vec<f64> = pcs
            .iter()
            .zip(&npcs)
            .map(|(p, np)| feature.dot(p) / (nf * np))
            .collect();
        let logits = Vector::from_raw(cos.iter().map(|c| tau1 * c).collect());
        let (l, dlogits) = softmax_xent(&logits, target)?;
        loss += l;
        per_example.push(QueryForward { cos, dlogits, nf });
    }
    loss /= features.len().max(1) as f64;
    Ok(PretrainForward {
        pcs,
        npcs,
        per_example,
        loss,
    })
}

/// Mean cross-entropy of one pre-training batch against the compositional
/// prototypes of every listed class. `targets` index into `class_z`.
pub fn pretrain_batch_loss(
    params: &CpnParams,
    features: &[&Vector],
    targets: &[usize],
    class_z: &[&Vector],
) -> Result<f64, ModelError> {
    Ok(pretrain_forward(params, features, targets, class_z)?.loss)
}

/// Pre-training loss with gradients for R and tau1.
pub fn pretrain_batch_loss_grads(
    params: &CpnParams,
    features: &[&Vector],
    targets: &[usize],
    class_z: &[&Vector],
) -> Result<(f64, CpnGrads), ModelError> {
    let fwd = pretrain_forward(params, features, targets, class_z)?;
    let d = params.d();
    let m = params.m();
    let scale = 1.0 / features.len().max(1) as f64;
    let tau1 = params.temps.tau1;

    let mut g_pc: Vec<Vector> = fwd.pcs.iter().map(|_| Vector::zeros(d)).collect();
    let mut g_tau1 = 0.0;
    for (ex, feature) in fwd.per_example.iter().zip(features) {
        for (c, pc) in fwd.pcs.iter().enumerate() {
            let g = ex.dlogits[c] * scale;
            let cos = ex.cos[c];
            g_tau1 += g * cos;
            let coeff = g * tau1;
            let npc = fwd.npcs[c];
            g_pc[c].axpy(coeff / (ex.nf * npc), feature);
            g_pc[c].axpy(-coeff * cos / (npc * npc), pc);
        }
    }

    let mut g_rhat: Vec<Vector> = (0..m).map(|_| Vector::zeros(d)).collect();
    for (c, z) in class_z.iter().enumerate() {
        for (j, zj) in z.iter().enumerate() {
            if *zj != 0.0 {
                g_rhat[j].axpy(*zj, &g_pc[c]);
            }
        }
    }
    let mut g_r = Matrix::zeros(m, d);
    for (j, g) in g_rhat.iter().enumerate() {
        let row = Vector::from_raw(params.protos.r.row(j).to_vec());
        let g_row = l2_normalize_vjp(&row, g).map_err(ModelError::Grad)?;
        g_r.row_mut(j).copy_from_slice(g_row.as_slice());
    }

    let mut grads = CpnGrads::none();
    grads.r = Some(g_r);
    grads.tau1 = Some(g_tau1);
    Ok((fwd.loss, grads))
}

// ----------------------------------------------- finite-difference sweeps

/// Packs every parameter into one flat vector:
/// [R | gen w | gen b | tau1 | tau2 | concat W | concat b].
pub(crate) fn pack_params(params: &CpnParams) -> Vec<f64> {
    let mut flat = params.protos.r.as_slice().to_vec();
    flat.extend_from_slice(params.gen.w.as_slice());
    flat.push(params.gen.b);
    flat.push(params.temps.tau1);
    flat.push(params.temps.tau2);
    if let Some(head) = &params.concat_head {
        flat.extend_from_slice(head.w.as_slice());
        flat.extend_from_slice(head.b.as_slice());
    }
    flat
}

/// Rebuilds parameters from a flat vector laid out by [`pack_params`].
pub(crate) fn unpack_params(template: &CpnParams, flat: &[f64]) -> CpnParams {
    let mut params = template.clone();
    let (m, d) = (template.m(), template.d());
    let mut at = 0;
    params.protos.r = Matrix::new(m, d, flat[at..at + m * d].to_vec()).unwrap();
    at += m * d;
    let gl = template.gen.w.len();
    params.gen.w = Vector::new(flat[at..at + gl].to_vec()).unwrap();
    at += gl;
    params.gen.b = flat[at];
    params.temps.tau1 = flat[at + 1];
    params.temps.tau2 = flat[at + 2];
    at += 3;
    if let Some(head) = &mut params.concat_head {
        let (hr, hc) = (head.w.rows(), head.w.cols());
        head.w = Matrix::new(hr, hc, flat[at..at + hr * hc].to_vec()).unwrap();
        at += hr * hc;
        head.b = Vector::new(flat[at..at + hr].to_vec()).unwrap();
        at += hr;
    }
    debug_assert_eq!(at, flat.len());
    params
}

/// Flattens gradients with the [`pack_params`] layout; absent groups are
/// zero, which is exactly what finite differences of an unused parameter
/// must see.
pub(crate) fn pack_grads(template: &CpnParams, grads: &CpnGrads) -> Vec<f64> {
    let (m, d) = (template.m(), template.d());
    let mut flat = match &grads.r {
        Some(g) => g.as_slice().to_vec(),
        None => vec![0.0; m * d],
    };
    match &grads.gen_w {
        Some(g) => flat.extend_from_slice(g.as_slice()),
        None => flat.extend(std::iter::repeat_n(0.0, template.gen.w.len())),
    }
    flat.push(grads.gen_b.unwrap_or(0.0));
    flat.push(grads.tau1.unwrap_or(0.0));
    flat.push(grads.tau2.unwrap_or(0.0));
    if let Some(head) = &template.concat_head {
        match &grads.concat_w {
            Some(g) => flat.extend_from_slice(g.as_slice()),
            None => flat.extend(std::iter::repeat_n(0.0, head.w.rows() * head.w.cols())),
        }
        match &grads.concat_b {
            Some(g) => flat.extend_from_slice(g.as_slice()),
            None => flat.extend(std::iter::repeat_n(0.0, head.b.len())),
        }
    }
    flat
}

/// Finite-difference sweep of the end-to-end losses at seeded random
/// points: the episode loss for every variant pathway and each generator
/// input mode, plus the pre-training batch loss. Used by the `gradcheck`
/// command alongside [`crate::gradcore::fd_suite`].
pub fn loss_fd_suite(points: usize, seed: u64) -> Vec<FdCheck> {
    use crate::episodes::{RngStream, GRADCHECK_STREAM};

    let m = 6;
    let d = 8;
    let n_way = 3;
    let k_shot = 2;
    let n_query = 3;
    let mut rng = RngStream::new(seed, GRADCHECK_STREAM);
    let mut checks = Vec::new();

    let cases: Vec<(String, Variant, GenInputMode)> = vec![
        ("episode_loss[adaptive,comp]".into(), Variant::Adaptive, GenInputMode::Comp),
        ("episode_loss[adaptive,vis]".into(), Variant::Adaptive, GenInputMode::Vis),
        ("episode_loss[adaptive,concat]".into(), Variant::Adaptive, GenInputMode::Concat),
        ("episode_loss[lcp]".into(), Variant::Lcp, GenInputMode::Comp),
        ("episode_loss[vp]".into(), Variant::Vp, GenInputMode::Comp),
        ("episode_loss[concat]".into(), Variant::Concat, GenInputMode::Comp),
    ];

    for (name, variant, mode) in cases {
        let mut worst = 0.0_f64;
        for _ in 0..points {
            let (params, z, feats, targets) =
                random_episode_setup(&mut rng, m, d, n_way, k_shot, n_query, mode, variant);
            let support: Vec<SupportClass<'_>> = (0..n_way)
                .map(|s| SupportClass {
                    class: s as u32,
                    z: &z[s],
                    features: feats[s].iter().take(k_shot).collect(),
                })
                .collect();
            let queries: Vec<(&Vector, usize)> = (0..n_way)
                .flat_map(|s| {
                    let target = targets[s];
                    feats[s][k_shot..].iter().map(move |f| (f, target))
                })
                .collect();
            let batch = EpisodeBatch { support, queries };
            let point = pack_params(&params);
            let err = crate::gradcore::grad_check(
                |x| {
                    episode_loss(&unpack_params(&params, x), variant, &batch).unwrap()
                },
                |x| {
                    let p = unpack_params(&params, x);
                    let (_, grads) = episode_loss_grads(&p, variant, &batch).unwrap();
                    pack_grads(&p, &grads)
                },
                &point,
                FD_STEP,
            );
            worst = worst.max(err);
        }
        checks.push(FdCheck {
            name,
            points,
            max_rel_err: worst,
        });
    }

    let mut worst = 0.0_f64;
    for _ in 0..points {
        let (params, z, feats, _) = random_episode_setup(
            &mut rng,
            m,
            d,
            4,
            1,
            2,
            GenInputMode::Comp,
            Variant::Lcp,
        );
        let features: Vec<&Vector> = feats.iter().flatten().collect();
        let targets: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 3)).collect();
        let class_z: Vec<&Vector> = z.iter().collect();
        let point = pack_params(&params);
        let err = crate::gradcore::grad_check(
            |x| {
                pretrain_batch_loss(&unpack_params(&params, x), &features, &targets, &class_z)
                    .unwrap()
            },
            |x| {
                let p = unpack_params(&params, x);
                let (_, grads) =
                    pretrain_batch_loss_grads(&p, &features, &targets, &class_z).unwrap();
                pack_grads(&p, &grads)
            },
            &point,
            FD_STEP,
        );
        worst = worst.max(err);
    }
    checks.push(FdCheck {
        name: "pretrain_batch_loss".into(),
        points,
        max_rel_err: worst,
    });

    checks
}

/// Random parameters plus a small episode's worth of attribute vectors and
/// features: `feats[s]` holds k_shot support then n_query query features
/// for class position `s`, `targets[s] = s`.
#[allow(clippy::too_many_arguments)]
fn random_episode_setup(
    rng: &mut crate::episodes::RngStream,
    m: usize,
    d: usize,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    mode: GenInputMode,
    variant: Variant,
) -> (CpnParams, Vec<Vector>, Vec<Vec<Vector>>, Vec<usize>) {
    use crate::model::{ComponentPrototypes, ConcatFusionHead, Temperatures, WeightGenerator};

    let r = Matrix::new(m, d, (0..m * d).map(|_| rng.normal()).collect()).unwrap();
    let w = Vector::new(
        (0..mode.input_len(d)).map(|_| rng.normal() * 0.5).collect(),
    )
    .unwrap();
    let gen = WeightGenerator::new(w, rng.normal() * 0.5).unwrap();
    let temps = Temperatures::new(8.0 + rng.unit_f64() * 4.0, 8.0 + rng.unit_f64() * 4.0).unwrap();
    let mut params = CpnParams::new(ComponentPrototypes::new(r), gen, temps, mode).unwrap();
    if variant == Variant::Concat {
        let hw = Matrix::new(d, 2 * d, (0..2 * d * d).map(|_| rng.normal() * 0.3).collect())
            .unwrap();
        let hb = Vector::new((0..d).map(|_| rng.normal() * 0.1).collect()).unwrap();
        params = params
            .with_concat_head(ConcatFusionHead::new(hw, hb).unwrap())
            .unwrap();
    }

    let z: Vec<Vector> = (0..n_way)
        .map(|_| Vector::new((0..m).map(|_| 0.1 + rng.unit_f64()).collect()).unwrap())
        .collect();
    let feats: Vec<Vec<Vector>> = (0..n_way)
        .map(|_| {
            (0..k_shot + n_query)
                .map(|_| Vector::new((0..d).map(|_| rng.normal()).collect()).unwrap())
                .collect()
        })
        .collect();
    let targets: Vec<usize> = (0..n_way).collect();
    (params, z, feats, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::RngStream;
    use crate::model::{ComponentPrototypes, Temperatures, WeightGenerator};

    fn unit_params_2d() -> CpnParams {
        let r = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        CpnParams::new(
            ComponentPrototypes::new(r),
            WeightGenerator::zeros(2),
            Temperatures::new(10.0, 10.0).unwrap(),
            GenInputMode::Comp,
        )
        .unwrap()
    }

    #[test]
    fn episode_loss_two_class_closed_form() {
        // LCP prototypes are the two basis vectors; the single query sits
        // exactly on class 0, so loss = ln(1 + e^-10).
        let params = unit_params_2d();
        let z = [
            Vector::from_slice(&[1.0, 0.0]).unwrap(),
            Vector::from_slice(&[0.0, 1.0]).unwrap(),
        ];
        let s0 = Vector::from_slice(&[1.0, 0.0]).unwrap();
        let s1 = Vector::from_slice(&[0.0, 1.0]).unwrap();
        let q = Vector::from_slice(&[2.0, 0.0]).unwrap();
        let batch = EpisodeBatch {
            support: vec![
                SupportClass {
                    class: 0,
                    z: &z[0],
                    features: vec![&s0],
                },
                SupportClass {
                    class: 1,
                    z: &z[1],
                    features: vec![&s1],
                },
            ],
            queries: vec![(&q, 0)],
        };
        let loss = episode_loss(&params, Variant::Lcp, &batch).unwrap();
        assert!((loss - 4.5398899216870535e-5).abs() < 1e-15, "loss {loss}");
    }

    #[test]
    fn pretrain_loss_uniform_is_ln_classes() {
        // tau1 = 0 makes every class equally likely: loss = ln 3.
        let params = unit_params_2d().with_temps(Temperatures::new(0.0, 10.0).unwrap());
        let z0 = Vector::from_slice(&[1.0, 0.0]).unwrap();
        let z1 = Vector::from_slice(&[0.0, 1.0]).unwrap();
        let z2 = Vector::from_slice(&[1.0, 1.0]).unwrap();
        let f = Vector::from_slice(&[0.3, 0.4]).unwrap();
        let loss = pretrain_batch_loss(&params, &[&f], &[1], &[&z0, &z1, &z2]).unwrap();
        assert!((loss - 1.0986122886681098).abs() < 1e-15);
    }

    #[test]
    fn loss_fd_suite_passes() {
        for check in loss_fd_suite(8, 0xFEED) {
            assert!(
                check.passed(),
                "{} max rel err {:.3e}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn frozen_groups_come_back_as_none() {
        let mut rng = RngStream::new(1, 2);
        let (params, z, feats, _) = random_episode_setup(
            &mut rng,
            4,
            6,
            2,
            1,
            1,
            GenInputMode::Comp,
            Variant::Vp,
        );
        let batch = EpisodeBatch {
            support: vec![
                SupportClass {
                    class: 0,
                    z: &z[0],
                    features: vec![&feats[0][0]],
                },
                SupportClass {
                    class: 1,
                    z: &z[1],
                    features: vec![&feats[1][0]],
                },
            ],
            queries: vec![(&feats[0][1], 0), (&feats[1][1], 1)],
        };
        let (_, g) = episode_loss_grads(&params, Variant::Vp, &batch).unwrap();
        assert!(g.r.is_none() && g.gen_w.is_none() && g.tau1.is_none());
        assert!(g.tau2.is_some());

        let (_, g) = episode_loss_grads(&params, Variant::Lcp, &batch).unwrap();
        assert!(g.r.is_some() && g.gen_w.is_none());

        let (_, g) = episode_loss_grads(&params, Variant::Adaptive, &batch).unwrap();
        assert!(g.r.is_some() && g.gen_w.is_some() && g.gen_b.is_some());
        assert!(g.concat_w.is_none());
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = RngStream::new(3, 4);
        let (params, ..) = random_episode_setup(
            &mut rng,
            3,
            4,
            2,
            1,
            1,
            GenInputMode::Concat,
            Variant::Concat,
        );
        let flat = pack_params(&params);
        let back = unpack_params(&params, &flat);
        assert_eq!(back, params);
    }
}
