//! Training objectives in closed form.
//!
//! Every loss here returns its value together with hand-derived gradients
//! with respect to its inputs. The training loop seeds the autodiff tape with
//! these gradients instead of differentiating through the loss, so the same
//! code path is exercised by the finite-difference suite and by training.
//!
//! All similarity logits that represent cosine similarities are computed on
//! unit vectors: [`info_nce`] requires pre-normalized inputs, while
//! [`metadata_loss`] normalizes internally. The basis diversity loss uses raw
//! dot products, so the self-logit carries the squared norm. Every
//! log-softmax is evaluated with max-subtraction; at temperatures as sharp as
//! 1e-6 the raw exponentials would overflow any float format.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::Scalar;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("input vector {index} is not unit-normalized (norm {norm:.6})")]
    NotNormalized { index: usize, norm: f64 },
    #[error("covariance needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("InfoNCE needs at least one negative")]
    NoNegatives,
    #[error("target index {target} out of range for codebook size {k}")]
    TargetOutOfRange { target: usize, k: usize },
    #[error("answer index {answer} out of range for {n} scores")]
    AnswerOutOfRange { answer: usize, n: usize },
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
}

/// Weights applied to the auxiliary loss terms when assembling the total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub covariance: f64,
    pub metadata: f64,
    pub respace: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            covariance: 1.0,
            // The metadata logits carry a 1/tau = 1e6 scale; weighting the
            // term by tau keeps its gradients commensurate with the
            // reasoning loss. With weight 1.0 the alignment term drowns the
            // reasoning gradient and answer accuracy stays at chance.
            metadata: 1e-6,
            respace: 1.0,
        }
    }
}

/// Named scalar loss terms plus their weighted total for one step or epoch.
///
/// Terms that are inactive for the current variant are `None` and contribute
/// nothing to the total.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub reasoning: f64,
    pub covariance: Option<f64>,
    pub metadata: Option<f64>,
    pub respace_div: Option<f64>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossReport {
    pub fn assemble(
        reasoning: f64,
        covariance: Option<f64>,
        metadata: Option<f64>,
        respace_div: Option<f64>,
        weights: LossWeights,
    ) -> Self {
        let total = reasoning
            + weights.covariance * covariance.unwrap_or(0.0)
            + weights.metadata * metadata.unwrap_or(0.0)
            + weights.respace * respace_div.unwrap_or(0.0);
        Self {
            reasoning,
            covariance,
            metadata,
            respace_div,
            weights,
            total,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if !self.reasoning.is_finite() {
            return Some("reasoning");
        }
        if self.covariance.is_some_and(|v| !v.is_finite()) {
            return Some("covariance");
        }
        if self.metadata.is_some_and(|v| !v.is_finite()) {
            return Some("metadata");
        }
        if self.respace_div.is_some_and(|v| !v.is_finite()) {
            return Some("respace_div");
        }
        None
    }
}

/// Max-subtracted log-sum-exp plus the softmax of the logits.
fn lse_softmax<A: Scalar>(logits: &[A]) -> (A, Vec<A>) {
    let mut max = logits[0];
    for &l in &logits[1..] {
        if l > max {
            max = l;
        }
    }
    let mut probs: Vec<A> = logits.iter().map(|&l| (l - max).exp()).collect();
    let mut sum = A::zero();
    for &p in &probs {
        sum = sum + p;
    }
    let inv = A::one() / sum;
    for p in &mut probs {
        *p = *p * inv;
    }
    (max + sum.ln(), probs)
}

fn check_unit<A: Scalar>(v: ArrayView1<A>, index: usize) -> Result<(), LossError> {
    let norm = v.dot(&v).as_f64().sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(LossError::NotNormalized { index, norm });
    }
    Ok(())
}

/// Gradients of [`info_nce`] with respect to its three inputs.
#[derive(Debug)]
pub struct InfoNceGrads<A: Scalar> {
    pub d_pos: Array1<A>,
    pub d_pos_tilde: Array1<A>,
    pub d_negatives: Array2<A>,
}

/// `-log softmax` of the positive logit among the positive and negative
/// dot-product logits at temperature `t`.
///
/// All inputs must be unit vectors; the positive logit is
/// `(pos . pos_tilde)/t` and the negative logits are `(pos . neg_m)/t`.
pub fn info_nce<A: Scalar>(
    pos: ArrayView1<A>,
    pos_tilde: ArrayView1<A>,
    negatives: ArrayView2<A>,
    t: f64,
) -> Result<(A, InfoNceGrads<A>), LossError> {
    check_unit(pos, 0)?;
    check_unit(pos_tilde, 1)?;
    for (m, neg) in negatives.rows().into_iter().enumerate() {
        check_unit(neg, 2 + m)?;
    }
    info_nce_unchecked(pos, pos_tilde, negatives, t)
}

/// Same computation as [`info_nce`] without the unit-norm validation. The
/// Bongard pair construction legitimately passes the sub-unit group mean as
/// one of the positives.
pub fn info_nce_unchecked<A: Scalar>(
    pos: ArrayView1<A>,
    pos_tilde: ArrayView1<A>,
    negatives: ArrayView2<A>,
    t: f64,
) -> Result<(A, InfoNceGrads<A>), LossError> {
    let m = negatives.nrows();
    if m == 0 {
        return Err(LossError::NoNegatives);
    }
    let inv_t = A::from_f64(1.0 / t);
    let mut logits = Vec::with_capacity(m + 1);
    logits.push(pos.dot(&pos_tilde) * inv_t);
    for neg in negatives.rows() {
        logits.push(pos.dot(&neg) * inv_t);
    }
    let (lse, probs) = lse_softmax(&logits);
    let loss = lse - logits[0];

    // dL/dlogit_0 = p_0 - 1, dL/dlogit_m = p_m.
    let d = pos.len();
    let mut d_pos = Array1::<A>::zeros(d);
    let w0 = probs[0] - A::one();
    for i in 0..d {
        d_pos[i] = w0 * pos_tilde[i];
    }
    for (idx, neg) in negatives.rows().into_iter().enumerate() {
        let w = probs[idx + 1];
        for i in 0..d {
            d_pos[i] = d_pos[i] + w * neg[i];
        }
    }
    d_pos.mapv_inplace(|x| x * inv_t);

    let mut d_pos_tilde = Array1::<A>::zeros(d);
    for i in 0..d {
        d_pos_tilde[i] = w0 * pos[i] * inv_t;
    }

    let mut d_negatives = Array2::<A>::zeros((m, d));
    for idx in 0..m {
        let w = probs[idx + 1] * inv_t;
        for i in 0..d {
            d_negatives[(idx, i)] = w * pos[i];
        }
    }

    Ok((
        loss,
        InfoNceGrads {
            d_pos,
            d_pos_tilde,
            d_negatives,
        },
    ))
}

/// One element of the Bongard positive-pair pool: a panel representation in
/// rows `0..=6` or the recomputed group mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairElem {
    Panel(usize),
    Mean,
}

/// All ordered pairs of distinct elements from the 8-element pool
/// `{z_1..z_7, mean}`, in a fixed enumeration order.
pub fn bongard_pairs() -> Vec<(PairElem, PairElem)> {
    let elems: Vec<PairElem> = (0..7)
        .map(PairElem::Panel)
        .chain(std::iter::once(PairElem::Mean))
        .collect();
    let mut pairs = Vec::with_capacity(56);
    for &a in &elems {
        for &b in &elems {
            if a != b {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// Materialized InfoNCE terms for one problem's 14 representations: every
/// ordered positive pair together with the 7 negative representations.
pub fn bongard_pair_batch<A: Scalar>(z: ArrayView2<A>) -> Vec<(Array1<A>, Array1<A>, Array2<A>)> {
    assert_eq!(z.nrows(), 14, "one Bongard problem has 14 representations");
    let mean = group_mean(z);
    let negatives = z.slice(ndarray::s![7..14, ..]).to_owned();
    let pick = |e: PairElem| -> Array1<A> {
        match e {
            PairElem::Panel(j) => z.row(j).to_owned(),
            PairElem::Mean => mean.clone(),
        }
    };
    bongard_pairs()
        .into_iter()
        .map(|(a, b)| (pick(a), pick(b), negatives.clone()))
        .collect()
}

fn group_mean<A: Scalar>(z: ArrayView2<A>) -> Array1<A> {
    let mut mean = Array1::<A>::zeros(z.ncols());
    for j in 0..7 {
        mean = mean + &z.row(j);
    }
    mean.mapv_inplace(|x| x / A::from_f64(7.0));
    mean
}

/// Mean InfoNCE over the 56 positive pairs of one problem, with the gradient
/// with respect to all 14 representations. The mean element's gradient is
/// distributed back to rows `0..=6` with weight `1/7`.
pub fn bongard_infonce<A: Scalar>(z: ArrayView2<A>, t: f64) -> Result<(A, Array2<A>), LossError> {
    assert_eq!(z.nrows(), 14);
    let d = z.ncols();
    let mean = group_mean(z);
    let negatives = z.slice(ndarray::s![7..14, ..]);
    let pairs = bongard_pairs();
    let scale = A::from_f64(1.0 / pairs.len() as f64);
    let seventh = A::from_f64(1.0 / 7.0);

    let mut total = A::zero();
    let mut dz = Array2::<A>::zeros((14, d));
    for (a, b) in pairs {
        let va = match a {
            PairElem::Panel(j) => z.row(j).to_owned(),
            PairElem::Mean => mean.clone(),
        };
        let vb = match b {
            PairElem::Panel(j) => z.row(j).to_owned(),
            PairElem::Mean => mean.clone(),
        };
        let (loss, grads) = info_nce_unchecked(va.view(), vb.view(), negatives, t)?;
        total = total + loss;
        let mut route = |e: PairElem, g: &Array1<A>| match e {
            PairElem::Panel(j) => {
                for i in 0..d {
                    dz[(j, i)] = dz[(j, i)] + g[i] * scale;
                }
            }
            PairElem::Mean => {
                for j in 0..7 {
                    for i in 0..d {
                        dz[(j, i)] = dz[(j, i)] + g[i] * scale * seventh;
                    }
                }
            }
        };
        route(a, &grads.d_pos);
        route(b, &grads.d_pos_tilde);
        for (m, gneg) in grads.d_negatives.rows().into_iter().enumerate() {
            for i in 0..d {
                dz[(7 + m, i)] = dz[(7 + m, i)] + gneg[i] * scale;
            }
        }
    }
    Ok((total * scale, dz))
}

/// Sample covariance `(1/(N-1)) Σ (x_i - x̄)(x_i - x̄)ᵀ` of row vectors.
pub fn covariance_matrix<A: Scalar>(batch: ArrayView2<A>) -> Result<Array2<A>, LossError> {
    let n = batch.nrows();
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let mean = batch.sum_axis(Axis(0)) / A::from_f64(n as f64);
    let centered = &batch - &mean;
    let cov = centered.t().dot(&centered) / A::from_f64((n - 1) as f64);
    Ok(cov)
}

/// Off-diagonal energy of the sample covariance,
/// `(1/d) Σ (M² ∘ (1 - I))`, with its gradient w.r.t. the batch.
pub fn decorrelation_loss<A: Scalar>(batch: ArrayView2<A>) -> Result<(A, Array2<A>), LossError> {
    let n = batch.nrows();
    let d = batch.ncols();
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    let mean = batch.sum_axis(Axis(0)) / A::from_f64(n as f64);
    let centered = &batch - &mean;
    let cov = centered.t().dot(&centered) / A::from_f64((n - 1) as f64);

    let mut masked = cov;
    for i in 0..d {
        masked[(i, i)] = A::zero();
    }
    let mut loss = A::zero();
    for v in masked.iter() {
        loss = loss + *v * *v;
    }
    loss = loss / A::from_f64(d as f64);

    // dL/dM = (2/d) M ∘ (1-I); M symmetric, so dL/dXc = 2 Xc (dL/dM)/(N-1),
    // then push through the centering.
    let coef = A::from_f64(4.0 / (d as f64 * (n - 1) as f64));
    let mut dxc = centered.dot(&masked);
    dxc.mapv_inplace(|x| x * coef);
    let colmean = dxc.sum_axis(Axis(0)) / A::from_f64(n as f64);
    let dx = dxc - &colmean;
    Ok((loss, dx))
}

/// Gradients of [`metadata_loss`].
#[derive(Debug)]
pub struct MetadataGrads<A: Scalar> {
    pub d_qbar: Array2<A>,
    pub d_codebook: Array2<A>,
}

/// Sum over the constrained concept slots of the cross-entropy between the
/// cosine-similarity softmax against the codebook and the one-hot target row.
///
/// Inputs are normalized internally, so the logits are cosines divided by
/// `tau`. Only the rows passed in `qbar` are constrained; the caller keeps
/// the free slot out.
pub fn metadata_loss<A: Scalar>(
    qbar: ArrayView2<A>,
    codebook: ArrayView2<A>,
    targets: &[usize],
    tau: f64,
) -> Result<(A, MetadataGrads<A>), LossError> {
    let s = qbar.nrows();
    let k = codebook.nrows();
    let d = qbar.ncols();
    assert_eq!(codebook.ncols(), d, "embedding width mismatch");
    assert_eq!(targets.len(), s, "one target per constrained slot");
    for &t in targets {
        if t >= k {
            return Err(LossError::TargetOutOfRange { target: t, k });
        }
    }
    let eps = A::from_f64(1e-12);
    let norm_rows = |m: ArrayView2<A>| -> (Array2<A>, Vec<A>) {
        let mut out = m.to_owned();
        let mut norms = Vec::with_capacity(m.nrows());
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt();
            norms.push(norm);
            let inv = A::one() / (norm + eps);
            row.mapv_inplace(|x| x * inv);
        }
        (out, norms)
    };
    let (qhat, qnorms) = norm_rows(qbar);
    let (that, tnorms) = norm_rows(codebook);

    let inv_tau = A::from_f64(1.0 / tau);
    let mut loss = A::zero();
    let mut d_qhat = Array2::<A>::zeros((s, d));
    let mut d_that = Array2::<A>::zeros((k, d));
    for alpha in 0..s {
        let logits: Vec<A> = (0..k)
            .map(|kk| qhat.row(alpha).dot(&that.row(kk)) * inv_tau)
            .collect();
        let (lse, probs) = lse_softmax(&logits);
        loss = loss + lse - logits[targets[alpha]];
        for kk in 0..k {
            let mut w = probs[kk];
            if kk == targets[alpha] {
                w = w - A::one();
            }
            let w = w * inv_tau;
            for i in 0..d {
                d_qhat[(alpha, i)] = d_qhat[(alpha, i)] + w * that[(kk, i)];
                d_that[(kk, i)] = d_that[(kk, i)] + w * qhat[(alpha, i)];
            }
        }
    }

    // Chain through the row normalization: dx = g/n - x (x.g)/(n^2 |x|).
    let chain = |raw: ArrayView2<A>, norms: &[A], ghat: &Array2<A>| -> Array2<A> {
        let mut out = Array2::<A>::zeros(raw.raw_dim());
        for (r, norm) in norms.iter().enumerate() {
            if norm.as_f64() == 0.0 {
                continue;
            }
            let x = raw.row(r);
            let g = ghat.row(r);
            let n = *norm + eps;
            let dot = x.dot(&g);
            let coef = dot / (n * n * *norm);
            let inv_n = A::one() / n;
            for i in 0..x.len() {
                out[(r, i)] = g[i] * inv_n - x[i] * coef;
            }
        }
        out
    };
    let d_qbar = chain(qbar, &qnorms, &d_qhat);
    let d_codebook = chain(codebook, &tnorms, &d_that);
    Ok((
        loss,
        MetadataGrads {
            d_qbar,
            d_codebook,
        },
    ))
}

/// Diversity pressure on the re-space basis: per vector, `-log softmax` of
/// the self dot-product logit against all cross dot-product logits.
pub fn respace_diversity_loss<A: Scalar>(basis: ArrayView2<A>, t: f64) -> (A, Array2<A>) {
    let m = basis.nrows();
    let d = basis.ncols();
    let mut loss = A::zero();
    let mut grad = Array2::<A>::zeros((m, d));
    if m <= 1 {
        return (loss, grad);
    }
    let inv_t = A::from_f64(1.0 / t);
    let gram: Array2<A> = basis.dot(&basis.t());
    for h in 0..m {
        let logits: Vec<A> = (0..m).map(|j| gram[(h, j)] * inv_t).collect();
        let (lse, probs) = lse_softmax(&logits);
        loss = loss + lse - logits[h];
        for j in 0..m {
            let mut w = probs[j];
            if j == h {
                w = w - A::one();
            }
            let w = w * inv_t;
            // Logit (h,j) = v_h . v_j / t touches both rows; for j == h the
            // two contributions below add up to the required 2 v_h.
            for i in 0..d {
                grad[(h, i)] = grad[(h, i)] + w * basis[(j, i)];
                grad[(j, i)] = grad[(j, i)] + w * basis[(h, i)];
            }
        }
    }
    (loss, grad)
}

/// Cross-entropy of the option scores against the answer index.
pub fn rpm_reasoning_loss<A: Scalar>(
    scores: ArrayView1<A>,
    answer: usize,
) -> Result<(A, Array1<A>), LossError> {
    let n = scores.len();
    if answer >= n {
        return Err(LossError::AnswerOutOfRange { answer, n });
    }
    for &s in scores.iter() {
        if !s.as_f64().is_finite() {
            return Err(LossError::NonFinite {
                what: "option score",
            });
        }
    }
    let logits: Vec<A> = scores.iter().copied().collect();
    let (lse, probs) = lse_softmax(&logits);
    let loss = lse - logits[answer];
    let mut grad = Array1::from_vec(probs);
    grad[answer] = grad[answer] - A::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use ndarray::array;

    fn unit_rows(stream: &mut Stream, n: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_simple_fn((n, d), || stream.normal());
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        m
    }

    #[test]
    fn info_nce_equal_similarities_is_ln8() {
        // All pairwise similarities equal with M = 7 negatives: uniform
        // softmax over 8 logits.
        let d = 4;
        let v = Array1::from_elem(d, 0.5f64); // unit vector
        let negs = Array2::from_shape_fn((7, d), |_| 0.5);
        let (loss, _) = info_nce(v.view(), v.view(), negs.view(), 1e-3).unwrap();
        assert!((loss - 8.0f64.ln()).abs() / 8.0f64.ln() < 1e-12, "{loss}");
    }

    #[test]
    fn info_nce_dominant_positive_saturates_finite() {
        let pos = array![1.0f64, 0.0];
        let pos_t = array![1.0f64, 0.0];
        let negs = array![[-1.0f64, 0.0]];
        let (loss, _) = info_nce(pos.view(), pos_t.view(), negs.view(), 1e-3).unwrap();
        assert!(loss.is_finite());
        assert!((0.0..=1e-10).contains(&loss), "{loss}");
    }

    #[test]
    fn info_nce_two_term_hand_value() {
        // t = 1, positive sim 1, one negative sim 0: ln(1 + e^{-1}).
        let pos = array![1.0f64, 0.0];
        let pos_t = array![1.0f64, 0.0];
        let negs = array![[0.0f64, 1.0]];
        let (loss, _) = info_nce(pos.view(), pos_t.view(), negs.view(), 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() / expect < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn info_nce_rejects_non_unit_inputs() {
        let pos = array![2.0f64, 0.0];
        let pos_t = array![1.0f64, 0.0];
        let negs = array![[0.0f64, 1.0]];
        let err = info_nce(pos.view(), pos_t.view(), negs.view(), 1.0).unwrap_err();
        assert!(matches!(err, LossError::NotNormalized { index: 0, .. }));
    }

    #[test]
    fn info_nce_monotone_in_positive_similarity() {
        // Strictly decreasing as the positive similarity rises, negatives
        // fixed, checked on a grid at t = 0.1.
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let cos = -0.95 + 0.1 * step as f64;
            let sin = (1.0 - cos * cos).sqrt();
            let pos = array![1.0f64, 0.0];
            let pos_t = array![cos, sin];
            let negs = array![[0.0f64, 1.0], [-0.6f64, 0.8]];
            let (loss, _) = info_nce(pos.view(), pos_t.view(), negs.view(), 0.1).unwrap();
            assert!(loss < last, "not decreasing at step {step}");
            last = loss;
        }
    }

    #[test]
    fn bongard_pair_batch_has_56_terms_with_7_negatives() {
        let mut stream = Stream::seed_from_u64(5);
        let z = unit_rows(&mut stream, 14, 6);
        let terms = bongard_pair_batch(z.view());
        assert_eq!(terms.len(), 56);
        for (_, _, negs) in &terms {
            assert_eq!(negs.nrows(), 7);
        }
    }

    #[test]
    fn bongard_mean_is_arithmetic_mean_of_first_seven() {
        let mut stream = Stream::seed_from_u64(6);
        let z = unit_rows(&mut stream, 14, 6);
        let mean = group_mean(z.view());
        for i in 0..6 {
            let direct: f64 = (0..7).map(|j| z[(j, i)]).sum::<f64>() / 7.0;
            assert!((mean[i] - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn covariance_hand_value_and_shift_invariance() {
        let batch = array![[1.0f64, 1.0], [-1.0, -1.0]];
        let cov = covariance_matrix(batch.view()).unwrap();
        for (i, j, want) in [(0, 0, 2.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 2.0)] {
            assert!((cov[(i, j)] - want).abs() < 1e-12);
        }
        let shifted = &batch + 3.25;
        let cov2 = covariance_matrix(shifted.view()).unwrap();
        for (a, b) in cov.iter().zip(cov2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Identical samples give the zero matrix.
        let same = array![[0.7f64, -0.2], [0.7, -0.2], [0.7, -0.2]];
        let cov3 = covariance_matrix(same.view()).unwrap();
        assert!(cov3.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn decorrelation_hand_values() {
        let batch = array![[1.0f64, 1.0], [-1.0, -1.0]];
        let (loss, _) = decorrelation_loss(batch.view()).unwrap();
        assert!((loss - 4.0).abs() < 1e-12, "{loss}");

        let batch = array![[1.0f64, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let (loss, _) = decorrelation_loss(batch.view()).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");

        assert!(matches!(
            decorrelation_loss(array![[1.0f64, 2.0]].view()),
            Err(LossError::TooFewSamples(1))
        ));
    }

    #[test]
    fn decorrelation_invariant_under_sample_permutation_and_shift() {
        let mut stream = Stream::seed_from_u64(7);
        let batch = Array2::from_shape_simple_fn((6, 4), || stream.normal());
        let (a, _) = decorrelation_loss(batch.view()).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = batch.select(Axis(0), &perm);
        let (b, _) = decorrelation_loss(permuted.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
        let shifted = &batch + 0.83;
        let (c, _) = decorrelation_loss(shifted.view()).unwrap();
        assert!((a - c).abs() < 1e-10);
    }

    #[test]
    fn metadata_uniform_is_ln_k() {
        // One constrained slot equidistant from all 12 entries.
        let d = 6;
        let qbar = Array2::from_elem((1, d), 0.3f64);
        let codebook = Array2::from_elem((12, d), 0.9f64);
        let (loss, _) = metadata_loss(qbar.view(), codebook.view(), &[4], 1e-6).unwrap();
        let expect = 12.0f64.ln();
        assert!((loss - expect).abs() / expect < 1e-9, "{loss}");
    }

    #[test]
    fn metadata_margin_saturation_and_linear_regime() {
        // Correct entry leading by cosine margin 0.1 at tau = 1e-6.
        let qbar = array![[1.0f64, 0.0]];
        let cos_t = 0.9f64;
        let codebook = array![
            [cos_t, (1.0 - cos_t * cos_t).sqrt()],
            [0.8f64, 0.6],
            [0.0f64, 1.0]
        ];
        let (loss, _) = metadata_loss(qbar.view(), codebook.view(), &[0], 1e-6).unwrap();
        assert!((0.0..=1e-10).contains(&loss), "{loss}");

        // Wrong entry leading by margin g: loss ~ g/tau.
        let tau = 1e-3;
        let (loss, _) = metadata_loss(qbar.view(), codebook.view(), &[1], tau).unwrap();
        let margin = cos_t - 0.8;
        assert!(
            (loss - margin / tau).abs() / (margin / tau) < 1e-3,
            "{loss} vs {}",
            margin / tau
        );
    }

    #[test]
    fn metadata_large_tau_approaches_uniformity() {
        let mut stream = Stream::seed_from_u64(8);
        let qbar = Array2::from_shape_simple_fn((2, 5), || stream.normal());
        let codebook = Array2::from_shape_simple_fn((6, 5), || stream.normal());
        let (loss, _) = metadata_loss(qbar.view(), codebook.view(), &[1, 3], 1e6).unwrap();
        let expect = 2.0 * 6.0f64.ln();
        assert!((loss - expect).abs() < 1e-3, "{loss} vs {expect}");
    }

    #[test]
    fn metadata_rejects_bad_target() {
        let qbar = array![[1.0f64, 0.0]];
        let codebook = array![[1.0f64, 0.0], [0.0, 1.0]];
        assert!(matches!(
            metadata_loss(qbar.view(), codebook.view(), &[2], 1.0),
            Err(LossError::TargetOutOfRange { target: 2, k: 2 })
        ));
    }

    #[test]
    fn respace_diversity_limits() {
        // Single vector: no competitors.
        let basis = array![[0.3f64, -0.2, 0.9]];
        let (loss, grad) = respace_diversity_loss(basis.view(), 1e-2);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|v| *v == 0.0));

        // Orthonormal basis at t = 1e-2: bounded by M(M-1) e^{-100}.
        let eye = Array2::<f64>::eye(4);
        let (loss, _) = respace_diversity_loss(eye.view(), 1e-2);
        assert!(loss <= 4.0 * 3.0 * (-100.0f64).exp(), "{loss}");

        // Identical unit vectors: M ln M.
        let m = 5;
        let basis = Array2::from_shape_fn((m, 3), |(_, j)| if j == 0 { 1.0f64 } else { 0.0 });
        let (loss, _) = respace_diversity_loss(basis.view(), 1e-2);
        let expect = m as f64 * (m as f64).ln();
        assert!((loss - expect).abs() / expect < 1e-12, "{loss}");
    }

    #[test]
    fn reasoning_loss_values() {
        let scores = Array1::from_elem(8, 0.37f64);
        let (loss, _) = rpm_reasoning_loss(scores.view(), 3).unwrap();
        assert!((loss - 8.0f64.ln()).abs() < 1e-12);

        let mut scores = Array1::from_elem(8, 0.0f64);
        scores[2] = 20.0;
        let (loss, _) = rpm_reasoning_loss(scores.view(), 2).unwrap();
        assert!(loss < 1e-7, "{loss}");

        // Loss decreases when only the answer's score increases.
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let mut s = Array1::from_elem(8, 0.0f64);
            s[5] = k as f64 * 0.5;
            let (loss, _) = rpm_reasoning_loss(s.view(), 5).unwrap();
            assert!(loss < prev);
            prev = loss;
        }

        assert!(matches!(
            rpm_reasoning_loss(Array1::from_elem(8, 0.0f64).view(), 8),
            Err(LossError::AnswerOutOfRange { answer: 8, n: 8 })
        ));
        let mut bad = Array1::from_elem(8, 0.0f64);
        bad[1] = f64::NAN;
        assert!(matches!(
            rpm_reasoning_loss(bad.view(), 0),
            Err(LossError::NonFinite { .. })
        ));
    }

    #[test]
    fn losses_finite_at_paper_temperatures() {
        let mut stream = Stream::seed_from_u64(9);
        let z = unit_rows(&mut stream, 14, 8);
        let (loss, _) = bongard_infonce(z.view(), 1e-3).unwrap();
        assert!(loss.is_finite());

        let qbar = unit_rows(&mut stream, 2, 8);
        let codebook = unit_rows(&mut stream, 12, 8);
        let (loss, _) = metadata_loss(qbar.view(), codebook.view(), &[0, 7], 1e-6).unwrap();
        assert!(loss.is_finite());

        let basis = unit_rows(&mut stream, 8, 8);
        let (loss, _) = respace_diversity_loss(basis.view(), 1e-2);
        assert!(loss.is_finite());
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let w = LossWeights {
            covariance: 0.5,
            metadata: 2.0,
            respace: 1.0,
        };
        let r = LossReport::assemble(1.0, Some(3.0), Some(0.25), None, w);
        assert!((r.total - (1.0 + 1.5 + 0.5)).abs() < 1e-12);
        assert!(r.non_finite_term().is_none());
        let bad = LossReport::assemble(f64::NAN, None, None, None, w);
        assert_eq!(bad.non_finite_term(), Some("reasoning"));
    }
}
