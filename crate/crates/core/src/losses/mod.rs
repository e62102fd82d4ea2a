//! Loss terms of the three branches, the key queue and the weighted total.

mod frequency;
mod queue;

use candle_core::{Tensor, D};

use crate::config::{BranchToggles, CrossEntropyOrder, LossWeights, QueueDenominator};
use crate::error::{CmidError, Result};

pub use frequency::{frequency_loss, frequency_weights, FOCAL_ALPHA};
pub use queue::MemoryQueue;

/// Tolerance on unit-norm inputs to the contrastive loss.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Floor applied before taking logs of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean absolute error over masked pixels only. `pixel_mask` broadcasts
/// against `B x 1 x H x W`; the element count is masked pixels times
/// channels.
pub fn spatial_loss(x: &Tensor, x_pred: &Tensor, pixel_mask: &Tensor) -> Result<Tensor> {
    if x.dims() != x_pred.dims() {
        return Err(CmidError::Shape(format!(
            "target {:?} and prediction {:?} differ",
            x.dims(),
            x_pred.dims()
        )));
    }
    let (_, c, _, _) = x.dims4()?;
    let mask = pixel_mask.to_dtype(x.dtype())?;
    let diff = (x_pred - x)?.abs()?.broadcast_mul(&mask)?;
    let count = mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * c as f64;
    if count == 0.0 {
        log::warn!("spatial loss over an empty mask is defined as 0");
        return Ok(diff.sum_all()?);
    }
    Ok((diff.sum_all()? / count)?)
}

fn check_unit_rows(name: &str, t: &Tensor) -> Result<()> {
    let norms = t
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    if let Some(n) = norms.iter().find(|n| (*n - 1.0).abs() > UNIT_NORM_TOLERANCE) {
        return Err(CmidError::Contract(format!("{name} row has norm {n}, expected 1")));
    }
    Ok(())
}

/// Contrastive loss of queries `q` against positives `k_plus` and the queue
/// keys (all `* x e`). Keys carry no gradient.
pub fn info_nce(
    q: &Tensor,
    k_plus: &Tensor,
    queue: Option<&Tensor>,
    tau: f64,
    denominator: QueueDenominator,
) -> Result<Tensor> {
    check_unit_rows("query", q)?;
    check_unit_rows("positive key", k_plus)?;
    let k_plus = k_plus.detach();
    let pos = (q * &k_plus)?.sum_keepdim(D::Minus1)?.affine(1.0 / tau, 0.0)?;
    let neg = match queue {
        Some(keys) => Some(q.matmul(&keys.detach().t()?)?.affine(1.0 / tau, 0.0)?),
        None => None,
    };
    let log_denominator = match (denominator, neg) {
        (QueueDenominator::WithPositive, Some(neg)) => {
            Tensor::cat(&[&pos, &neg], 1)?.log_sum_exp(D::Minus1)?
        }
        (QueueDenominator::WithPositive, None) => pos.squeeze(D::Minus1)?,
        (QueueDenominator::QueueOnly, Some(neg)) => neg.log_sum_exp(D::Minus1)?,
        (QueueDenominator::QueueOnly, None) => {
            return Err(CmidError::Contract(
                "queue-only denominator needs a nonempty queue".into(),
            ))
        }
    };
    Ok((log_denominator - pos.squeeze(D::Minus1)?)?.mean_all()?)
}

/// Similarity logits `<x, C> / tau` against the prototype rows.
pub fn prototype_logits(vectors: &Tensor, prototypes: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(vectors.matmul(&prototypes.t()?)?.affine(1.0 / tau, 0.0)?)
}

/// Row-wise softmax of the prototype similarities.
pub fn prototype_distributions(vectors: &Tensor, prototypes: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(
        &prototype_logits(vectors, prototypes, tau)?,
        D::Minus1,
    )?)
}

/// Cross entropy between student rows `p` and teacher rows `q`, averaged
/// over rows. Teacher rows are detached.
pub fn local_loss(p: &Tensor, q: &Tensor, order: CrossEntropyOrder) -> Result<Tensor> {
    if p.dims() != q.dims() {
        return Err(CmidError::Shape(format!(
            "student rows {:?} and teacher rows {:?} differ",
            p.dims(),
            q.dims()
        )));
    }
    let q = q.detach();
    let per_row = match order {
        CrossEntropyOrder::TeacherTarget => {
            (&q * p.clamp(LOG_FLOOR, 1.0)?.log()?)?.sum(D::Minus1)?
        }
        CrossEntropyOrder::Literal => (p * q.clamp(LOG_FLOOR, 1.0)?.log()?)?.sum(D::Minus1)?,
    };
    Ok(per_row.neg()?.mean_all()?)
}

/// Per-step loss values; disabled branches report 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_spat: f64,
    pub l_freq: f64,
    pub l_nce: f64,
    pub l_local: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(l_spat: f64, l_freq: f64, l_nce: f64, l_local: f64, weights: &LossWeights) -> Result<Self> {
        let mut report = Self {
            l_spat,
            l_freq,
            l_nce,
            l_local,
            total: 0.0,
        };
        report.total = total_loss(&report, weights)?;
        Ok(report)
    }

    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("l_spat", self.l_spat),
            ("l_freq", self.l_freq),
            ("l_nce", self.l_nce),
            ("l_local", self.l_local),
            ("total", self.total),
        ]
    }
}

/// Name of the first non-finite component, if any.
pub fn non_finite_term(report: &LossReport) -> Option<&'static str> {
    report.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
}

/// `lambda_mim (L_spat + L_freq) + lambda_global L_nce + lambda_local L_local`.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    if let Some(term) = report.terms()[..4].iter().find(|(_, v)| !v.is_finite()) {
        return Err(CmidError::NonFinite { term: term.0, step: 0 });
    }
    Ok(weights.lambda_mim * (report.l_spat + report.l_freq)
        + weights.lambda_global * report.l_nce
        + weights.lambda_local * report.l_local)
}

/// Tensor form of [`total_loss`] over the enabled branches.
pub fn total_loss_tensor(
    spat: Option<&Tensor>,
    freq: Option<&Tensor>,
    nce: Option<&Tensor>,
    local: Option<&Tensor>,
    weights: &LossWeights,
    toggles: &BranchToggles,
) -> Result<Option<Tensor>> {
    let mut parts = Vec::new();
    if toggles.mim {
        for t in [spat, freq].into_iter().flatten() {
            parts.push(t.affine(weights.lambda_mim, 0.0)?);
        }
    }
    if let (true, Some(t)) = (toggles.global, nce) {
        parts.push(t.affine(weights.lambda_global, 0.0)?);
    }
    if let (true, Some(t)) = (toggles.local, local) {
        parts.push(t.affine(weights.lambda_local, 0.0)?);
    }
    let mut iter = parts.into_iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    Ok(Some(iter.try_fold(first, |acc, t| acc + t)?))
}
