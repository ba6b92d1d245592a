//! Dual InfoNCE objective and its analytic gradients.
//!
//! For a batch of `b` aligned (descriptor, photo) pairs with raw embeddings
//! `x_desc`, `x_obj`, `x_img`, each tower is projected and re-normalized:
//! `u = norm(A_desc x_desc)`, `p = norm(A_obj x_obj)`, `q = norm(A_img x_img)`.
//! With `S_s = U P^T`, `S_v = U Q^T` and `tau = exp(log_tau)`:
//!
//! ```text
//! L = (1/b) sum_i [ CE(S_s[i,:] / tau, i) + lambda * CE(S_v[i,:] / tau, i) ]
//! ```
//!
//! where `CE(z, i) = -log softmax(z)[i]`. The symmetric variant averages the
//! row-wise and column-wise cross-entropies of each term.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};

use super::TrainError;
use crate::adapter::{AdapterParams, Tower};
use crate::corpus::{render_object_list, PhotoCandidate};
use crate::embedding::{EmbeddingVector, Encoder};

/// `-log softmax(sims / tau)[positive]`, computed stably.
///
/// With `m = max(z)` and `a` the first index attaining it, the loss is
/// `(m - z[positive]) + ln(1 + sum_{j != a} exp(z[j] - m))`; both terms are
/// nonnegative, and tiny losses keep full relative precision.
///
/// # Panics
/// If `sims` is empty, `positive` is out of range or `tau` is not positive.
pub fn infonce_loss(sims: &[f64], positive: usize, tau: f64) -> f64 {
    assert!(positive < sims.len(), "positive index {positive} out of range for {} sims", sims.len());
    assert!(tau > 0.0, "temperature must be positive");
    let z: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    cross_entropy(&z, positive)
}

fn cross_entropy(z: &[f64], positive: usize) -> f64 {
    let (arg, m) = z
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, v)| if v > am { (i, v) } else { (ai, am) });
    let rest: f64 = z.iter().enumerate().filter(|&(j, _)| j != arg).map(|(_, &v)| (v - m).exp()).sum();
    (m - z[positive]) + rest.ln_1p()
}

fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Raw (unprojected) embeddings of `b` aligned pairs, one row per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub desc: Array2<f64>,
    pub obj: Array2<f64>,
    pub img: Array2<f64>,
}

impl Batch {
    pub fn new(desc: Array2<f64>, obj: Array2<f64>, img: Array2<f64>) -> Result<Self, TrainError> {
        if desc.dim() != obj.dim() || desc.dim() != img.dim() {
            return Err(TrainError::InvalidConfig(format!(
                "tower shapes differ: {:?}, {:?}, {:?}",
                desc.dim(),
                obj.dim(),
                img.dim()
            )));
        }
        Ok(Self { desc, obj, img })
    }

    /// Encodes (descriptor text, target photo) pairs.
    pub fn encode(pairs: &[(String, PhotoCandidate)], enc: &Encoder) -> Result<Self, TrainError> {
        let texts: Vec<String> = pairs.iter().map(|(t, _)| t.clone()).collect();
        let objs: Vec<String> = pairs.iter().map(|(_, p)| render_object_list(&p.objects)).collect();
        let photos: Vec<PhotoCandidate> = pairs.iter().map(|(_, p)| p.clone()).collect();
        Self::new(
            rows(&enc.encode_texts(&texts)?),
            rows(&enc.encode_texts(&objs)?),
            rows(&enc.encode_photos(&photos)?),
        )
    }

    pub fn len(&self) -> usize {
        self.desc.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.desc.ncols()
    }

    /// Sub-batch of the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            desc: self.desc.select(Axis(0), idx),
            obj: self.obj.select(Axis(0), idx),
            img: self.img.select(Axis(0), idx),
        }
    }

    fn tower(&self, t: Tower) -> &Array2<f64> {
        match t {
            Tower::Desc => &self.desc,
            Tower::Obj => &self.obj,
            Tower::Img => &self.img,
        }
    }
}

pub(crate) fn rows(vectors: &[EmbeddingVector]) -> Array2<f64> {
    let d = vectors.first().map_or(0, EmbeddingVector::dim);
    let flat: Vec<f64> = vectors.iter().flat_map(|v| v.to_f64()).collect();
    Array2::from_shape_vec((vectors.len(), d), flat).expect("encoders return one common dim")
}

/// Gradients of the batch loss, shaped like [`AdapterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub desc: Array2<f64>,
    pub obj: Array2<f64>,
    pub img: Array2<f64>,
    pub log_tau: f64,
}

impl Gradients {
    pub fn matrix(&self, t: Tower) -> &Array2<f64> {
        match t {
            Tower::Desc => &self.desc,
            Tower::Obj => &self.obj,
            Tower::Img => &self.img,
        }
    }
}

/// Projected, normalized rows of one tower plus what backprop needs.
struct Projected {
    /// Unit rows.
    u: Array2<f64>,
    /// Row norms before normalization.
    norms: Array1<f64>,
}

fn project_rows(x: &Array2<f64>, a: &Array2<f64>) -> Result<Projected, TrainError> {
    if a.ncols() != x.ncols() {
        return Err(TrainError::InvalidConfig(format!(
            "adapter is {}x{}, embeddings are {}-dimensional",
            a.nrows(),
            a.ncols(),
            x.ncols()
        )));
    }
    let y = x.dot(&a.t());
    let norms = y.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(TrainError::Adapter(crate::adapter::AdapterError::ZeroVector));
    }
    let u = &y / &norms.view().insert_axis(Axis(1));
    Ok(Projected { u, norms })
}

/// d(normalize(y))/dy applied to upstream gradient `g`, row-wise.
fn normalize_backward(p: &Projected, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    Zip::from(out.rows_mut()).and(p.u.rows()).and(&p.norms).for_each(|mut o, u, &n| {
        let ug = u.dot(&o);
        o.zip_mut_with(&u, |oi, &ui| *oi = (*oi - ui * ug) / n);
    });
    out
}

/// Loss of one logit matrix and `dL/dZ`, each already divided by `b`.
fn term(z: &Array2<f64>, symmetric: bool) -> (f64, Array2<f64>) {
    let b = z.nrows();
    let bf = b as f64;
    let mut loss = 0.0;
    let mut dz = Array2::zeros((b, b));
    for i in 0..b {
        let row = z.row(i);
        loss += cross_entropy(&row.to_vec(), i);
        let mut g = softmax(row);
        g[i] -= 1.0;
        dz.row_mut(i).assign(&g);
    }
    if !symmetric {
        return (loss / bf, dz / bf);
    }
    let mut col_loss = 0.0;
    for j in 0..b {
        let col = z.column(j);
        col_loss += cross_entropy(&col.to_vec(), j);
        let mut g = softmax(col);
        g[j] -= 1.0;
        dz.column_mut(j).zip_mut_with(&g, |d, &v| *d += v);
    }
    (0.5 * (loss + col_loss) / bf, dz * (0.5 / bf))
}

fn check(batch: &Batch, params: &AdapterParams, lambda: f64) -> Result<(), TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(TrainError::InvalidConfig(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    params.validate()?;
    Ok(())
}

/// Mean over the batch of `L_scene + lambda * L_vision`.
pub fn batch_loss(batch: &Batch, params: &AdapterParams, lambda: f64) -> Result<f64, TrainError> {
    batch_loss_with(batch, params, lambda, false)
}

pub fn batch_loss_with(batch: &Batch, params: &AdapterParams, lambda: f64, symmetric: bool) -> Result<f64, TrainError> {
    Ok(forward_backward(batch, params, lambda, symmetric, false)?.0)
}

/// Loss and exact gradients with respect to all adapter parameters.
pub fn gradients(batch: &Batch, params: &AdapterParams, lambda: f64) -> Result<(f64, Gradients), TrainError> {
    gradients_with(batch, params, lambda, false)
}

pub fn gradients_with(
    batch: &Batch,
    params: &AdapterParams,
    lambda: f64,
    symmetric: bool,
) -> Result<(f64, Gradients), TrainError> {
    let (loss, g) = forward_backward(batch, params, lambda, symmetric, true)?;
    Ok((loss, g.expect("requested")))
}

fn forward_backward(
    batch: &Batch,
    params: &AdapterParams,
    lambda: f64,
    symmetric: bool,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>), TrainError> {
    check(batch, params, lambda)?;
    let [pd, po, pi] = Tower::ALL.map(|t| project_rows(batch.tower(t), params.matrix(t)));
    let (pd, po, pi) = (pd?, po?, pi?);
    let inv_tau = (-params.log_tau).exp();
    let zs = pd.u.dot(&po.u.t()) * inv_tau;
    let zv = pd.u.dot(&pi.u.t()) * inv_tau;
    let (ls, dzs) = term(&zs, symmetric);
    let (lv, dzv) = term(&zv, symmetric);
    let loss = ls + lambda * lv;
    if !want_grad {
        return Ok((loss, None));
    }
    let dzv = dzv * lambda;
    // Z = S * exp(-t)  =>  dL/dt = -sum(dZ .* Z),  dL/dS = dZ * exp(-t).
    let d_log_tau = -((&dzs * &zs).sum() + (&dzv * &zv).sum());
    let dss = dzs * inv_tau;
    let dsv = dzv * inv_tau;
    let du = dss.dot(&po.u) + dsv.dot(&pi.u);
    let dp = dss.t().dot(&pd.u);
    let dq = dsv.t().dot(&pd.u);
    let grad = |p: &Projected, g: &Array2<f64>, x: &Array2<f64>| normalize_backward(p, g).t().dot(x);
    Ok((
        loss,
        Some(Gradients {
            desc: grad(&pd, &du, &batch.desc),
            obj: grad(&po, &dp, &batch.obj),
            img: grad(&pi, &dq, &batch.img),
            log_tau: d_log_tau,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(b: usize, d: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || {
            let mut a = Array2::<f64>::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
            for mut r in a.rows_mut() {
                let n = r.dot(&r).sqrt();
                r /= n;
            }
            a
        };
        Batch::new(m(), m(), m()).unwrap()
    }

    #[test]
    fn infonce_examples() {
        for b in [2usize, 4, 56] {
            let l = infonce_loss(&vec![0.3; b], 1, 0.07);
            assert!((l - (b as f64).ln()).abs() < 1e-9);
        }
        assert!((infonce_loss(&[1.0, 0.0], 0, 1.0) - 0.313_261_687_518_222_8).abs() < 1e-12);
        let tiny = infonce_loss(&[1.0, 0.0, 0.0, 0.0], 0, 0.01);
        assert!((0.0..1e-40).contains(&tiny));
    }

    #[test]
    fn loss_is_shift_invariant() {
        let a = infonce_loss(&[0.2, -0.4, 0.9], 2, 0.5);
        let b = infonce_loss(&[1.2, 0.6, 1.9], 2, 0.5);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn too_small_batch() {
        let b = random_batch(1, 4, 1);
        assert!(matches!(
            batch_loss(&b, &AdapterParams::identity(4), 1.0),
            Err(TrainError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn lambda_zero_leaves_image_tower_untouched() {
        let b = random_batch(4, 8, 3);
        let (_, g) = gradients(&b, &AdapterParams::identity(8), 0.0).unwrap();
        assert!(g.img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_matches_finite_differences() {
        let b = random_batch(4, 5, 9);
        let mut p = AdapterParams::identity(5);
        p.obj[[0, 1]] = 0.3;
        let (_, g) = gradients_with(&b, &p, 0.7, true).unwrap();
        let h = 1e-5;
        let mut plus = p.clone();
        plus.obj[[2, 3]] += h;
        let mut minus = p.clone();
        minus.obj[[2, 3]] -= h;
        let fd = (batch_loss_with(&b, &plus, 0.7, true).unwrap() - batch_loss_with(&b, &minus, 0.7, true).unwrap())
            / (2.0 * h);
        assert!((fd - g.obj[[2, 3]]).abs() < 1e-7);
    }
}
