//! Dense math primitives paired with hand-derived gradients.
//!
//! Everything the model needs is built from five differentiable operations:
//! L2 normalization, attribute-weighted row sums, cosine similarity, the
//! logistic sigmoid, and softmax cross-entropy. Each op ships with its
//! analytic gradient (vector-Jacobian product for the vector-valued ones),
//! and [`grad_check`] verifies any (value, gradient) pair against central
//! finite differences.
//!
//! All arithmetic is `f64`. Ops are pure functions; nothing here holds
//! state, so everything is safe to call from parallel workers.

use thiserror::Error;

/// Norms at or below this are treated as degenerate rather than divided by.
pub const NORM_EPS: f64 = 1e-12;

/// Default step for central finite differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradient checks pass when the worst relative error stays below this.
pub const FD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("vector norm below {NORM_EPS:e}")]
    NearZeroNorm,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("empty input")]
    Empty,
}

// ---------------------------------------------------------------- vectors

/// Dense real vector. Finite in every component by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Validates that every component is finite.
    pub fn new(data: Vec<f64>) -> Result<Self, GradError> {
        if data.is_empty() {
            return Err(GradError::Empty);
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(GradError::NonFinite(i));
        }
        Ok(Vector(data))
    }

    pub fn from_slice(data: &[f64]) -> Result<Self, GradError> {
        Self::new(data.to_vec())
    }

    /// Skips the finiteness scan. For internal arithmetic whose inputs are
    /// already validated; the invariant still holds because the ops below
    /// never produce non-finite values from finite inputs of sane magnitude.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot on mismatched lengths");
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * factor).collect())
    }

    /// self += factor * other.
    pub(crate) fn axpy(&mut self, factor: f64, other: &Vector) {
        assert_eq!(self.len(), other.len(), "axpy on mismatched lengths");
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += factor * b;
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// --------------------------------------------------------------- matrices

/// Dense row-major matrix. Finite in every entry by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GradError> {
        if rows == 0 || cols == 0 {
            return Err(GradError::Empty);
        }
        if data.len() != rows * cols {
            return Err(GradError::DimMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(GradError::NonFinite(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self, GradError> {
        let first = rows.first().ok_or(GradError::Empty)?;
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(GradError::DimMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row.as_slice());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// W x for x of length `cols`.
    pub(crate) fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec on mismatched lengths");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// W^T y for y of length `rows`.
    pub(crate) fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t on mismatched lengths");
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += yi * w;
            }
        }
        out
    }
}

// -------------------------------------------------------- primitive ops

/// v / ||v||. Errors when ||v|| <= NORM_EPS.
pub fn l2_normalize(v: &Vector) -> Result<Vector, GradError> {
    let n = v.norm();
    if n <= NORM_EPS {
        return Err(GradError::NearZeroNorm);
    }
    // Divide rather than multiply by the reciprocal: one rounding per
    // coordinate keeps exact cases like [3, 4] / 5 exact.
    Ok(Vector::from_raw(v.iter().map(|x| x / n).collect()))
}

/// Pulls `upstream` back through `l2_normalize` at `v`:
/// J^T g = (g - (v_hat . g) v_hat) / ||v||.
pub fn l2_normalize_vjp(v: &Vector, upstream: &Vector) -> Result<Vector, GradError> {
    if upstream.len() != v.len() {
        return Err(GradError::DimMismatch {
            expected: v.len(),
            found: upstream.len(),
        });
    }
    let n = v.norm();
    if n <= NORM_EPS {
        return Err(GradError::NearZeroNorm);
    }
    let vhat = v.scale(1.0 / n);
    let proj = vhat.dot(upstream);
    let mut out = upstream.to_vec();
    for (o, vh) in out.iter_mut().zip(vhat.iter()) {
        *o = (*o - proj * vh) / n;
    }
    Ok(Vector::from_raw(out))
}

/// sum_j weights[j] * rows[j]. `weights.len()` must equal `rows.rows()`.
pub fn weighted_sum(weights: &Vector, rows: &Matrix) -> Result<Vector, GradError> {
    if weights.len() != rows.rows() {
        return Err(GradError::DimMismatch {
            expected: rows.rows(),
            found: weights.len(),
        });
    }
    let mut out = vec![0.0; rows.cols()];
    for (j, w) in weights.iter().enumerate() {
        for (o, r) in out.iter_mut().zip(rows.row(j)) {
            *o += w * r;
        }
    }
    Ok(Vector::from_raw(out))
}

/// Gradients of `upstream . weighted_sum(weights, rows)` with respect to
/// both arguments: d/dw_j = upstream . rows[j], d/drows[j] = w_j * upstream.
pub fn weighted_sum_vjp(
    weights: &Vector,
    rows: &Matrix,
    upstream: &Vector,
) -> Result<(Vector, Matrix), GradError> {
    if weights.len() != rows.rows() {
        return Err(GradError::DimMismatch {
            expected: rows.rows(),
            found: weights.len(),
        });
    }
    if upstream.len() != rows.cols() {
        return Err(GradError::DimMismatch {
            expected: rows.cols(),
            found: upstream.len(),
        });
    }
    let gw: Vec<f64> = (0..rows.rows())
        .map(|j| dot(upstream.as_slice(), rows.row(j)))
        .collect();
    let mut gr = Matrix::zeros(rows.rows(), rows.cols());
    for (j, w) in weights.iter().enumerate() {
        for (g, u) in gr.row_mut(j).iter_mut().zip(upstream.iter()) {
            *g = w * u;
        }
    }
    Ok((Vector::from_raw(gw), gr))
}

/// a . b / (||a|| ||b||). Errors when either norm is degenerate.
pub fn cosine_sim(a: &Vector, b: &Vector) -> Result<f64, GradError> {
    if a.len() != b.len() {
        return Err(GradError::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(GradError::NearZeroNorm);
    }
    Ok(a.dot(b) / (na * nb))
}

/// Cosine similarity together with its gradients:
/// dc/da = b / (||a|| ||b||) - c a / ||a||^2, symmetrically for b.
pub fn cosine_sim_grad(a: &Vector, b: &Vector) -> Result<(f64, Vector, Vector), GradError> {
    if a.len() != b.len() {
        return Err(GradError::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(GradError::NearZeroNorm);
    }
    let c = a.dot(b) / (na * nb);
    let mut ga = b.scale(1.0 / (na * nb));
    ga.axpy(-c / (na * na), a);
    let mut gb = a.scale(1.0 / (na * nb));
    gb.axpy(-c / (nb * nb), b);
    Ok((c, ga, gb))
}

/// Logistic sigmoid, branch-stable for |x| up to the exp underflow edge:
/// the negative branch never exponentiates a positive argument.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d sigmoid / dx = s (1 - s).
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Max-shifted softmax. Output sums to 1 and every entry is finite for any
/// finite logits.
pub fn softmax(logits: &Vector) -> Vector {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from_raw(exps.into_iter().map(|e| e / sum).collect())
}

/// Cross-entropy of softmax(logits) against a one-hot target, with the
/// gradient softmax(logits) - onehot(target). The loss is computed as
/// log(sum exp(l - m)) - (l_t - m), which is nonnegative by construction.
pub fn softmax_xent(logits: &Vector, target: usize) -> Result<(f64, Vector), GradError> {
    if target >= logits.len() {
        return Err(GradError::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| l - m).collect();
    let sum: f64 = shifted.iter().map(|s| s.exp()).sum();
    let loss = sum.ln() - shifted[target];
    let mut grad: Vec<f64> = shifted.iter().map(|s| s.exp() / sum).collect();
    grad[target] -= 1.0;
    Ok((loss.max(0.0), Vector::from_raw(grad)))
}

// -------------------------------------------------- finite differences

/// Central finite-difference check of `gradient` against `value` at `point`.
/// Returns the worst per-coordinate relative error
/// |analytic - fd| / max(1, |fd|).
pub fn grad_check<V, G>(value: V, gradient: G, point: &[f64], step: f64) -> f64
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = gradient(point);
    assert_eq!(
        analytic.len(),
        point.len(),
        "gradient length must match point length"
    );
    let mut worst = 0.0_f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = value(&probe);
        probe[i] = orig - step;
        let down = value(&probe);
        probe[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

/// One named check from a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdCheck {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl FdCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

/// Sweeps every primitive gradient over `points` seeded random inputs and
/// reports the worst relative error per op. Used by the `gradcheck`
/// command; the end-to-end loss sweep lives in [`crate::model::loss`].
pub fn fd_suite(points: usize, seed: u64) -> Vec<FdCheck> {
    use crate::episodes::RngStream;

    let mut rng = RngStream::new(seed, crate::episodes::GRADCHECK_STREAM);
    let mut checks = Vec::new();
    let dim = 8;
    let m = 5;

    let mut worst = 0.0_f64;
    for _ in 0..points {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let u: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if norm(&v) <= 1e-3 {
            continue;
        }
        let uv = Vector::from_raw(u);
        let err = grad_check(
            |x| {
                l2_normalize(&Vector::from_slice(x).unwrap())
                    .unwrap()
                    .dot(&uv)
            },
            |x| {
                l2_normalize_vjp(&Vector::from_slice(x).unwrap(), &uv)
                    .unwrap()
                    .to_vec()
            },
            &v,
            FD_STEP,
        );
        worst = worst.max(err);
    }
    checks.push(FdCheck {
        name: "l2_normalize".into(),
        points,
        max_rel_err: worst,
    });

    let mut worst = 0.0_f64;
    for _ in 0..points {
        // Parameter vector is [weights | rows flattened]; probe the full
        // Jacobian through a random upstream direction.
        let flat: Vec<f64> = (0..m + m * dim).map(|_| rng.normal()).collect();
        let u = Vector::from_raw((0..dim).map(|_| rng.normal()).collect());
        let split = |x: &[f64]| {
            let w = Vector::from_slice(&x[..m]).unwrap();
            let r = Matrix::new(m, dim, x[m..].to_vec()).unwrap();
            (w, r)
        };
        let err = grad_check(
            |x| {
                let (w, r) = split(x);
                weighted_sum(&w, &r).unwrap().dot(&u)
            },
            |x| {
                let (w, r) = split(x);
                let (gw, gr) = weighted_sum_vjp(&w, &r, &u).unwrap();
                let mut g = gw.to_vec();
                g.extend_from_slice(gr.as_slice());
                g
            },
            &flat,
            FD_STEP,
        );
        worst = worst.max(err);
    }
    checks.push(FdCheck {
        name: "weighted_sum".into(),
        points,
        max_rel_err: worst,
    });

    let mut worst = 0.0_f64;
    for _ in 0..points {
        let flat: Vec<f64> = (0..2 * dim).map(|_| rng.normal()).collect();
        if norm(&flat[..dim]) <= 1e-3 || norm(&flat[dim..]) <= 1e-3 {
            continue;
        }
        let err = grad_check(
            |x| {
                cosine_sim(
                    &Vector::from_slice(&x[..dim]).unwrap(),
                    &Vector::from_slice(&x[dim..]).unwrap(),
                )
                .unwrap()
            },
            |x| {
                let (_, ga, gb) = cosine_sim_grad(
                    &Vector::from_slice(&x[..dim]).unwrap(),
                    &Vector::from_slice(&x[dim..]).unwrap(),
                )
                .unwrap();
                let mut g = ga.to_vec();
                g.extend_from_slice(gb.as_slice());
                g
            },
            &flat,
            FD_STEP,
        );
        worst = worst.max(err);
    }
    checks.push(FdCheck {
        name: "cosine_sim".into(),
        points,
        max_rel_err: worst,
    });

    let mut worst = 0.0_f64;
    for _ in 0..points {
        let x = [rng.normal() * 3.0];
        let err = grad_check(|p| sigmoid(p[0]), |p| vec![sigmoid_grad(p[0])], &x, FD_STEP);
        worst = worst.max(err);
    }
    checks.push(FdCheck {
        name: "sigmoid".into(),
        points,
        max_rel_err: worst,
    });

    let mut worst = 0.0_f64;
    let classes = 10;
    for _ in 0..points {
        let logits: Vec<f64> = (0..classes).map(|_| rng.normal() * 2.0).collect();
        let target = rng.below(classes as u64) as usize;
        let err = grad_check(
            |x| {
                softmax_xent(&Vector::from_slice(x).unwrap(), target)
                    .unwrap()
                    .0
            },
            |x| {
                softmax_xent(&Vector::from_slice(x).unwrap(), target)
                    .unwrap()
                    .1
                    .to_vec()
            },
            &logits,
            FD_STEP,
        );
        worst = worst.max(err);
    }
    checks.push(FdCheck {
        name: "softmax_xent".into(),
        points,
        max_rel_err: worst,
    });

    checks
}
