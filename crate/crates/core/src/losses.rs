//! Smoothed softmax, batch-hard triplet and center losses, and their sum
//! `L_F = L_S + L_T + λ·L_C`.
//!
//! Every loss comes with an analytic gradient. [`combined_loss_var`] wraps the
//! three terms as one node on a [`Graph`] so the backbone receives a single
//! backward pass.

use ndarray::{Array1, Array2, ArrayView1, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Label-smoothing `ε`; `None` means `1/N`.
    pub epsilon: Option<f64>,
    /// Triplet margin `α`.
    pub margin: f64,
    /// Center-loss weight `λ`.
    pub lambda: f64,
    pub center_lr: f64,
    /// Divide the smoothed targets by their sum.
    pub normalize_smoothing: bool,
    pub center_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: None,
            margin: 0.3,
            lambda: 0.0005,
            center_lr: 0.5,
            normalize_smoothing: false,
            center_reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn epsilon_for(&self, num_classes: usize) -> f64 {
        self.epsilon.unwrap_or(1.0 / num_classes as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.epsilon {
            check_epsilon(e).map_err(|_| Error::config("loss.epsilon", "must lie in [0, 1)"))?;
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("loss.margin", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be non-negative"));
        }
        if !(self.center_lr >= 0.0 && self.center_lr.is_finite()) {
            return Err(Error::config("loss.center_lr", "must be non-negative"));
        }
        Ok(())
    }
}

/// Per-identity centroids, `N × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Centers(pub Array2<f64>);

impl Centers {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Centers(Array2::zeros((num_classes, dim)))
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// The three terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub softmax: f64,
    pub triplet: f64,
    pub center: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_epsilon(eps: f64) -> Result<()> {
    if (0.0..1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon {eps} outside [0, 1)")))
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn targets(n: usize, label: usize, eps: f64, normalize: bool) -> Array1<f64> {
    let mut q = Array1::from_elem(n, eps);
    q[label] = 1.0 - eps;
    if normalize {
        let s = q.sum();
        q /= s;
    }
    q
}

/// `mean_b −Σ_i q_i log p_i` with `q_target = 1−ε`, `q_other = ε`.
pub fn smoothed_softmax_loss(logits: &Array2<f64>, labels: &[usize], eps: f64, normalize: bool) -> Result<f64> {
    smoothed_softmax_with_grad(logits, labels, eps, normalize).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn smoothed_softmax_with_grad(
    logits: &Array2<f64>,
    labels: &[usize],
    eps: f64,
    normalize: bool,
) -> Result<(f64, Array2<f64>)> {
    check_epsilon(eps)?;
    let (b, n) = logits.dim();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_labels(labels, b, n)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut grad = Array2::zeros((b, n));
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let logp = log_softmax(logits.row(r));
        let q = targets(n, y, eps, normalize);
        total -= q.dot(&logp);
        let qs = q.sum();
        let mut g = grad.row_mut(r);
        for j in 0..n {
            g[j] = (qs * logp[j].exp() - q[j]) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Hardest positive and negative per anchor; `None` for anchors without a positive.
fn mine(emb: &Array2<f64>, labels: &[usize]) -> Vec<Option<(usize, f64, usize, f64)>> {
    let n = emb.nrows();
    (0..n)
        .map(|a| {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist(emb.row(a), emb.row(j));
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            match (pos, neg) {
                (Some((p, dp)), Some((q, dn))) => Some((p, dp, q, dn)),
                _ => None,
            }
        })
        .collect()
}

/// Batch-hard triplet loss with Euclidean distance, averaged over anchors that have a positive.
pub fn batch_hard_triplet_loss(emb: &Array2<f64>, labels: &[usize], alpha: f64) -> Result<f64> {
    batch_hard_triplet_with_grad(emb, labels, alpha).map(|(l, _)| l)
}

pub fn batch_hard_triplet_with_grad(emb: &Array2<f64>, labels: &[usize], alpha: f64) -> Result<(f64, Array2<f64>)> {
    let n = emb.nrows();
    check_labels(labels, n, usize::MAX)?;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument("triplet loss needs at least two identities".into()));
    }
    let mined = mine(emb, labels);
    let anchors = mined.iter().flatten().count();
    if anchors == 0 {
        return Err(Error::InvalidArgument("no identity has two samples; triplet loss has no anchors".into()));
    }
    let mut grad = Array2::zeros(emb.raw_dim());
    let mut total = 0.0;
    let scale = 1.0 / anchors as f64;
    for (a, m) in mined.iter().enumerate() {
        let Some((p, dp, q, dn)) = *m else { continue };
        let h = dp + alpha - dn;
        if h <= 0.0 {
            continue;
        }
        total += h;
        // d‖a−p‖/da = (a−p)/‖a−p‖, taken as zero at coincident points.
        for (j, d, sign) in [(p, dp, 1.0), (q, dn, -1.0)] {
            if d > 0.0 {
                let u = (&emb.row(a) - &emb.row(j)) * (sign * scale / d);
                let mut ga = grad.row_mut(a);
                ga += &u;
                let mut gj = grad.row_mut(j);
                gj -= &u;
            }
        }
    }
    Ok((total * scale, grad))
}

fn check_centers(emb: &Array2<f64>, labels: &[usize], centers: &Centers) -> Result<()> {
    if emb.ncols() != centers.dim() {
        return Err(Error::Shape(format!(
            "embeddings have dim {}, centers {}",
            emb.ncols(),
            centers.dim()
        )));
    }
    check_labels(labels, emb.nrows(), centers.num_classes())
}

/// `0.5·Σ_i ‖x_i − c_{y_i}‖²` (divided by the batch size under [`Reduction::Mean`]).
pub fn center_loss(emb: &Array2<f64>, labels: &[usize], centers: &Centers, reduction: Reduction) -> Result<f64> {
    center_loss_with_grad(emb, labels, centers, reduction).map(|(l, _, _)| l)
}

/// Loss plus gradients with respect to the embeddings and the centers.
pub fn center_loss_with_grad(
    emb: &Array2<f64>,
    labels: &[usize],
    centers: &Centers,
    reduction: Reduction,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_centers(emb, labels, centers)?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / emb.nrows().max(1) as f64,
    };
    let mut g_emb = Array2::zeros(emb.raw_dim());
    let mut g_c = Array2::zeros(centers.0.raw_dim());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let r = &emb.row(i) - &centers.0.row(y);
        total += 0.5 * r.dot(&r);
        g_emb.row_mut(i).assign(&(&r * scale));
        let mut gc = g_c.row_mut(y);
        gc -= &(&r * scale);
    }
    Ok((total * scale, g_emb, g_c))
}

/// `c_y ← c_y − lr · Σ_{i: y_i = y}(c_y − x_i) / (1 + count_y)`.
pub fn update_centers(centers: &Centers, emb: &Array2<f64>, labels: &[usize], center_lr: f64) -> Result<Centers> {
    check_centers(emb, labels, centers)?;
    let mut delta = Array2::<f64>::zeros(centers.0.raw_dim());
    let mut counts = vec![0usize; centers.num_classes()];
    for (i, &y) in labels.iter().enumerate() {
        let mut d = delta.row_mut(y);
        d += &(&centers.0.row(y) - &emb.row(i));
        counts[y] += 1;
    }
    let mut out = centers.0.clone();
    for (y, &c) in counts.iter().enumerate() {
        if c > 0 {
            let step = &delta.row(y) * (center_lr / (1 + c) as f64);
            let mut row = out.row_mut(y);
            row -= &step;
        }
    }
    Ok(Centers(out))
}

/// `L_S` on the post-norm logits, `L_T` and `L_C` on the pre-norm embeddings.
///
/// `centers` may be `None` only when `λ = 0`.
pub fn combined_loss(
    logits: &Array2<f64>,
    emb: &Array2<f64>,
    labels: &[usize],
    centers: Option<&Centers>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    combined_with_grad(logits, emb, labels, centers, cfg).map(|c| c.breakdown)
}

struct Combined {
    breakdown: LossBreakdown,
    g_logits: Array2<f64>,
    g_emb: Array2<f64>,
}

fn combined_with_grad(
    logits: &Array2<f64>,
    emb: &Array2<f64>,
    labels: &[usize],
    centers: Option<&Centers>,
    cfg: &LossConfig,
) -> Result<Combined> {
    cfg.validate()?;
    if logits.nrows() != emb.nrows() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} embedding rows",
            logits.nrows(),
            emb.nrows()
        )));
    }
    let eps = cfg.epsilon_for(logits.ncols());
    let (ls, g_logits) = smoothed_softmax_with_grad(logits, labels, eps, cfg.normalize_smoothing)?;
    let (lt, mut g_emb) = batch_hard_triplet_with_grad(emb, labels, cfg.margin)?;
    let mut lc = 0.0;
    if cfg.lambda > 0.0 {
        let centers = centers.ok_or_else(|| Error::InvalidArgument("center loss enabled but no centers given".into()))?;
        let (l, g, _) = center_loss_with_grad(emb, labels, centers, cfg.center_reduction)?;
        lc = l;
        g_emb.scaled_add(cfg.lambda, &g);
    }
    let total = ls + lt + cfg.lambda * lc;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss L_S={ls} L_T={lt} L_C={lc}")));
    }
    Ok(Combined {
        breakdown: LossBreakdown {
            softmax: ls,
            triplet: lt,
            center: lc,
            lambda: cfg.lambda,
            total,
        },
        g_logits,
        g_emb,
    })
}

fn as_matrix(v: &Var<'_>) -> Result<Array2<f64>> {
    v.value()
        .clone()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("expected a matrix, got {:?}", v.shape())))
}

/// Adds `L_F` as a scalar node whose parents are the logits and the pre-norm embeddings.
pub fn combined_loss_var<'g>(
    logits: &Var<'g>,
    emb: &Var<'g>,
    labels: &[usize],
    centers: Option<&Centers>,
    cfg: &LossConfig,
) -> Result<(Var<'g>, LossBreakdown)> {
    let c = combined_with_grad(&as_matrix(logits)?, &as_matrix(emb)?, labels, centers, cfg)?;
    let (gl, ge) = (c.g_logits.into_dyn(), c.g_emb.into_dyn());
    let value = Tensor::from_elem(ndarray::IxDyn(&[]), c.breakdown.total);
    let var = logits.graph().op(value, &[logits, emb], move |dy| {
        let s = dy.first().copied().unwrap_or(1.0);
        vec![Some(&gl * s), Some(&ge * s)]
    });
    Ok((var, c.breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn closed_forms() {
        let l = smoothed_softmax_loss(&Array2::zeros((1, 4)), &[2], 0.25, false).unwrap();
        assert_abs_diff_eq!(l, 1.5 * 4f64.ln(), epsilon = 1e-12);
        let emb = array![[0.0], [1.0], [1.2]];
        let l = batch_hard_triplet_loss(&emb.slice(ndarray::s![.., ..]).to_owned(), &[0, 0, 1], 0.3).unwrap();
        // anchor 0: 1 + 0.3 − 1.2; anchor 1: 1 + 0.3 − 0.2
        assert_abs_diff_eq!(l, (0.1 + 1.1) / 2.0, epsilon = 1e-12);
        let c = Centers(array![[0.0, 0.0]]);
        assert_eq!(center_loss(&array![[1.0, 0.0]], &[0], &c, Reduction::Sum).unwrap(), 0.5);
    }

    #[test]
    fn midpoint_update() {
        let c = Centers(array![[2.0, 2.0], [5.0, 5.0]]);
        let out = update_centers(&c, &array![[0.0, 4.0]], &[0], 1.0).unwrap();
        assert_eq!(out.0, array![[1.0, 3.0], [5.0, 5.0]]);
    }

    #[test]
    fn argument_errors() {
        assert!(smoothed_softmax_loss(&Array2::zeros((1, 3)), &[0], 1.0, false).is_err());
        assert!(smoothed_softmax_loss(&array![[f64::NAN, 0.0]], &[0], 0.0, false).is_err());
        assert!(batch_hard_triplet_loss(&Array2::zeros((3, 2)), &[1, 1, 1], 0.3).is_err());
        let c = Centers::zeros(2, 2);
        assert!(center_loss(&Array2::zeros((1, 2)), &[2], &c, Reduction::Sum).is_err());
    }
}
