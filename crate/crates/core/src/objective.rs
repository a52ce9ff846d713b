//! Contrastive objectives over a batch of paired views.
//!
//! A batch holds `2N` unit-norm embeddings with the two views of source sample
//! `n` at rows `2n` and `2n + 1`. Every row is an anchor; its partner view is
//! the positive and the remaining `2N - 2` rows are negatives. Losses are the
//! mean over all `2N` anchors.
//!
//! With `s_ij = v_i . v_j` and `dl_i/ds_ij = g_ij`, the embedding gradient is
//! `dL/dV = (G + G^T) V / 2N`, which both losses use.

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, TaseError};
use crate::scalar::Scalar;

/// Tolerance on `|v| - 1` accepted by [`similarity_matrix`].
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Interleaved two-view pairing: rows `2n`, `2n + 1` come from sample `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPairing {
    n_samples: usize,
}

impl BatchPairing {
    pub fn new(n_samples: usize) -> Result<Self> {
        if n_samples == 0 {
            return Err(TaseError::config("a batch needs at least one source sample"));
        }
        Ok(Self { n_samples })
    }

    /// Pairing for a `2N`-row embedding matrix.
    pub fn for_rows(rows: usize) -> Result<Self> {
        if !rows.is_multiple_of(2) {
            return Err(TaseError::shape(format!("{rows} rows cannot be split into view pairs")));
        }
        Self::new(rows / 2)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_rows(&self) -> usize {
        2 * self.n_samples
    }

    pub fn positive(&self, row: usize) -> usize {
        row ^ 1
    }

    /// Index of the source sample that produced `row`.
    pub fn source(&self, row: usize) -> usize {
        row / 2
    }

    /// Negatives of `row` in ascending order.
    pub fn negatives(&self, row: usize) -> impl Iterator<Item = usize> {
        let pos = self.positive(row);
        (0..self.n_rows()).filter(move |&j| j != row && j != pos)
    }
}

/// Pairwise cosine similarities of unit-norm rows. Symmetric by construction.
pub fn similarity_matrix<T: Scalar>(v: ArrayView2<T>) -> Result<Array2<T>> {
    let tol = T::lit(UNIT_NORM_TOL);
    for (r, row) in v.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm.is_nan() || (norm - T::one()).abs() > tol {
            return Err(TaseError::Precondition(format!(
                "embedding row {r} has norm {norm}, expected unit norm"
            )));
        }
    }
    let mut s = v.dot(&v.t());
    let n = s.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            s[[j, i]] = s[[i, j]];
        }
    }
    Ok(s)
}

/// Loss value, per-anchor terms and the gradient with respect to the embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub loss: T,
    pub per_anchor: Vec<T>,
    pub grad: Array2<T>,
    pub mean_positive_sim: T,
    /// Mean over anchors of the most similar negative; `None` without negatives.
    pub mean_hardest_negative_sim: Option<T>,
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero() && tau.is_finite()) {
        return Err(TaseError::config(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

fn check_rows<T: Scalar>(v: &ArrayView2<T>, pairing: &BatchPairing) -> Result<()> {
    if v.nrows() != pairing.n_rows() {
        return Err(TaseError::shape(format!(
            "{} embedding rows for a pairing of {} rows",
            v.nrows(),
            pairing.n_rows()
        )));
    }
    Ok(())
}

fn finish<T: Scalar>(
    v: ArrayView2<T>,
    sims: &Array2<T>,
    pairing: &BatchPairing,
    per_anchor: Vec<T>,
    mut coef: Array2<T>,
) -> LossResult<T> {
    let rows = pairing.n_rows();
    let scale = T::from_count(rows);
    let loss = per_anchor.iter().copied().fold(T::zero(), |a, b| a + b) / scale;
    let sym = &coef + &coef.t();
    coef = sym / scale;
    let grad = coef.dot(&v);

    let mut pos_acc = T::zero();
    let mut hard_acc = T::zero();
    let mut has_neg = false;
    for i in 0..rows {
        pos_acc += sims[[i, pairing.positive(i)]];
        if let Some(h) = pairing.negatives(i).map(|j| sims[[i, j]]).reduce(T::max) {
            hard_acc += h;
            has_neg = true;
        }
    }
    LossResult {
        loss,
        per_anchor,
        grad,
        mean_positive_sim: pos_acc / scale,
        mean_hardest_negative_sim: has_neg.then(|| hard_acc / scale),
    }
}

/// Standard normalized-temperature cross entropy with one shared `tau`.
pub fn nt_xent<T: Scalar>(v: ArrayView2<T>, pairing: &BatchPairing, tau: T) -> Result<LossResult<T>> {
    check_tau(tau)?;
    check_rows(&v, pairing)?;
    let sims = similarity_matrix(v)?;
    let rows = pairing.n_rows();
    let mut per_anchor = Vec::with_capacity(rows);
    let mut coef = Array2::<T>::zeros((rows, rows));
    let mut logits = Vec::with_capacity(rows);
    for i in 0..rows {
        let pos = pairing.positive(i);
        logits.clear();
        logits.extend((0..rows).filter(|&j| j != i).map(|j| sims[[i, j]] / tau));
        let lse = crate::scalar::log_sum_exp(&logits);
        per_anchor.push(lse - sims[[i, pos]] / tau);
        for j in (0..rows).filter(|&j| j != i) {
            let p = (sims[[i, j]] / tau - lse).exp();
            let target = if j == pos { T::one() } else { T::zero() };
            coef[[i, j]] = (p - target) / tau;
        }
    }
    Ok(finish(v, &sims, pairing, per_anchor, coef))
}

/// Per-anchor temperature, re-weighted negatives:
///
/// `l_i = -log( S_ii' / (S_ii' + sum_j w_j S_ij) )`, `S_ij = exp(s_ij / tau_i)`.
///
/// `taus` is indexed by anchor row and `weights` by negative row; the positive
/// term is never weighted.
pub fn tase_loss<T: Scalar>(
    v: ArrayView2<T>,
    pairing: &BatchPairing,
    taus: &[T],
    weights: &[T],
) -> Result<LossResult<T>> {
    check_rows(&v, pairing)?;
    let rows = pairing.n_rows();
    if taus.len() != rows || weights.len() != rows {
        return Err(TaseError::shape(format!(
            "{rows} rows but {} temperatures and {} weights",
            taus.len(),
            weights.len()
        )));
    }
    for &t in taus {
        check_tau(t)?;
    }
    if let Some(w) = weights.iter().find(|&&w| !(w > T::zero() && w <= T::one())) {
        return Err(TaseError::config(format!("negative weight {w} outside (0, 1]")));
    }
    let sims = similarity_matrix(v)?;
    let mut per_anchor = Vec::with_capacity(rows);
    let mut coef = Array2::<T>::zeros((rows, rows));
    let mut terms = vec![T::zero(); rows];
    for i in 0..rows {
        let tau = taus[i];
        let pos = pairing.positive(i);
        let shift = (0..rows)
            .filter(|&j| j != i)
            .map(|j| sims[[i, j]] / tau)
            .fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for j in (0..rows).filter(|&j| j != i) {
            let c = if j == pos { T::one() } else { weights[j] };
            terms[j] = c * (sims[[i, j]] / tau - shift).exp();
            denom += terms[j];
        }
        per_anchor.push(denom.ln() - (sims[[i, pos]] / tau - shift));
        for j in (0..rows).filter(|&j| j != i) {
            let target = if j == pos { T::one() } else { T::zero() };
            coef[[i, j]] = (terms[j] / denom - target) / tau;
        }
    }
    Ok(finish(v, &sims, pairing, per_anchor, coef))
}

/// Share of the negative-side gradient carried by each negative:
/// `r_k = exp(s_k / tau) / sum_j exp(s_j / tau)`.
pub fn grad_ratio<T: Scalar>(neg_sims: &[T], tau: T) -> Result<Vec<T>> {
    check_tau(tau)?;
    if neg_sims.is_empty() {
        return Err(TaseError::Precondition("grad_ratio needs at least one negative".into()));
    }
    let max = neg_sims.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = neg_sims.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let total = e.iter().copied().fold(T::zero(), |a, b| a + b);
    Ok(e.into_iter().map(|x| x / total).collect())
}

/// `dl/ds_k = (1/tau) S_k / (S_pos + sum_j S_j)` for every negative `k`.
pub fn negative_similarity_gradient<T: Scalar>(pos_sim: T, neg_sims: &[T], tau: T) -> Result<Vec<T>> {
    check_tau(tau)?;
    let mut logits = Vec::with_capacity(neg_sims.len() + 1);
    logits.push(pos_sim / tau);
    logits.extend(neg_sims.iter().map(|&s| s / tau));
    let lse = crate::scalar::log_sum_exp(&logits);
    Ok(neg_sims.iter().map(|&s| (s / tau - lse).exp() / tau).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn pairing_is_an_involution() {
        let p = BatchPairing::new(3).unwrap();
        for r in 0..6 {
            assert_eq!(p.positive(p.positive(r)), r);
            let negs: Vec<_> = p.negatives(r).collect();
            assert_eq!(negs.len(), 4);
            assert!(!negs.contains(&r) && !negs.contains(&p.positive(r)));
        }
        assert!(BatchPairing::for_rows(5).is_err());
    }

    #[test]
    fn similarity_basics() {
        let same = array![[0.6f64, 0.8], [0.6, 0.8]];
        assert!((similarity_matrix(same.view()).unwrap()[[0, 1]] - 1.0).abs() < 1e-15);
        let ortho = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(similarity_matrix(ortho.view()).unwrap()[[0, 1]], 0.0);
        let bad = array![[1.0, 1.0], [0.0, 1.0]];
        assert!(similarity_matrix(bad.view()).is_err());
    }

    #[test]
    fn single_pair_has_zero_loss_and_gradient() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let r = nt_xent(v.view(), &BatchPairing::new(1).unwrap(), 0.5).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad.iter().all(|&g| g == 0.0));
        assert_eq!(r.mean_hardest_negative_sim, None);
    }

    #[test]
    fn equal_pos_and_neg_give_ln2() {
        // Every anchor in a 4-row batch has two negatives, so one negative's
        // worth of mass is two negatives at weight 1/2.
        let s = 0.3f64;
        let a = [1.0, 0.0];
        let b = [s, (1.0 - s * s).sqrt()];
        // Rows: anchor, positive, negative-pair. Negative rows mirror the positive.
        let v = array![[a[0], a[1]], [b[0], b[1]], [b[0], b[1]], [b[0], b[1]]];
        let pairing = BatchPairing::new(2).unwrap();
        // Anchor 0: positive row 1, negatives rows 2 and 3 at the same sim.
        // Halving both negative weights leaves one negative's worth of mass.
        let r = tase_loss(v.view(), &pairing, &[1.0; 4], &[1.0, 1.0, 0.5, 0.5]).unwrap();
        assert!((r.per_anchor[0] - 2f64.ln()).abs() < 1e-12);
        // Unweighted, the same anchor sees three equal terms.
        for tau in [0.1, 0.7, 2.0] {
            let r = nt_xent(v.view(), &pairing, tau).unwrap();
            assert!((r.per_anchor[0] - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_is_one_over_sqrt_cluster_size() {
        // One negative of weight 1/sqrt(4) at the positive's similarity, tau = 1:
        // l = -log(e^s / (e^s + 0.5 e^s)) = ln 1.5. Two negative rows each at
        // weight 0.25 give the same mass.
        let v = array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
        let r = tase_loss(v.view(), &BatchPairing::new(2).unwrap(), &[1.0; 4], &[1.0, 1.0, 0.25, 0.25]).unwrap();
        assert!((r.per_anchor[0] - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scalar_oracle_for_nt_xent_term() {
        // Anchor row 0 with pos sim 0.9 and negatives {0.1, -0.2}: build 2-D
        // unit vectors at those angles from the anchor.
        let anchor = [1.0, 0.0];
        let at = |c: f64| [c, (1.0 - c * c).sqrt()];
        let below = |c: f64| [c, -(1.0 - c * c).sqrt()];
        let v = array![
            [anchor[0], anchor[1]],
            [at(0.9)[0], at(0.9)[1]],
            [at(0.1)[0], at(0.1)[1]],
            [below(-0.2)[0], below(-0.2)[1]]
        ];
        let tau = 0.2;
        let r = nt_xent(v.view(), &BatchPairing::new(2).unwrap(), tau).unwrap();
        // Term-by-term evaluation.
        let e = |s: f64| (s / tau).exp();
        let oracle = -(e(0.9) / (e(0.9) + e(0.1) + e(-0.2))).ln();
        assert!((r.per_anchor[0] - oracle).abs() < 1e-12, "{} vs {oracle}", r.per_anchor[0]);
        // 30-digit mpmath value of the same expression.
        assert!((r.per_anchor[0] - 0.022_155_162_157_131_99).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_temperatures_and_weights() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let p = BatchPairing::new(1).unwrap();
        assert!(nt_xent(v.view(), &p, 0.0).is_err());
        assert!(tase_loss(v.view(), &p, &[0.5, -0.1], &[1.0, 1.0]).is_err());
        assert!(tase_loss(v.view(), &p, &[0.5, 0.5], &[1.0, 1.5]).is_err());
        assert!(tase_loss(v.view(), &p, &[0.5], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn grad_ratio_basics() {
        let r = grad_ratio(&[0.3f64; 4], 0.5).unwrap();
        assert!(r.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(grad_ratio(&[0.7f64], 0.1).unwrap(), vec![1.0]);
        assert!(grad_ratio::<f64>(&[], 0.1).is_err());
    }

    #[test]
    fn grad_ratio_hard_negative_share_grows_as_tau_shrinks() {
        // r1 = 1 / (1 + exp(-0.8 / tau)) evaluated directly.
        let mut prev = 0.0;
        for tau in [1.0f64, 0.5, 0.2] {
            let r = grad_ratio(&[0.9, 0.1], tau).unwrap();
            let oracle = (0.9f64 / tau).exp() / ((0.9f64 / tau).exp() + (0.1f64 / tau).exp());
            assert!((r[0] - oracle).abs() < 1e-15);
            assert!(r[0] > prev);
            prev = r[0];
        }
        assert!((grad_ratio(&[0.9, 0.1], 1.0f64).unwrap()[0] - 0.689_974_481_127_612_4).abs() < 1e-15);
        assert!((grad_ratio(&[0.9, 0.1], 0.2f64).unwrap()[0] - 0.982_013_790_037_908_4).abs() < 1e-15);
    }

    #[test]
    fn negative_gradient_matches_loss_gradient_coefficients() {
        let v = array![
            unit(&[1.0, 0.2, 0.0]),
            unit(&[0.9, 0.3, 0.1]),
            unit(&[0.1, 1.0, 0.4]),
            unit(&[-0.3, 0.2, 1.0])
        ];
        let v = Array2::from_shape_vec((4, 3), v.into_iter().flatten().collect()).unwrap();
        let s = similarity_matrix(v.view()).unwrap();
        let g = negative_similarity_gradient(s[[0, 1]], &[s[[0, 2]], s[[0, 3]]], 0.3).unwrap();
        let ratio = grad_ratio(&[s[[0, 2]], s[[0, 3]]], 0.3).unwrap();
        assert!((g[0] / (g[0] + g[1]) - ratio[0]).abs() < 1e-14);
    }

    #[test]
    fn small_tau_does_not_overflow() {
        let v = array![[1.0f32, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        let r = nt_xent(v.view(), &BatchPairing::new(2).unwrap(), 0.01).unwrap();
        assert!(r.loss.is_finite() && r.grad.iter().all(|g| g.is_finite()));
        let r = tase_loss(v.view(), &BatchPairing::new(2).unwrap(), &[0.01; 4], &[0.1; 4]).unwrap();
        assert!(r.loss.is_finite() && r.grad.iter().all(|g| g.is_finite()));
    }
}
