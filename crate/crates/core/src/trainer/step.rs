use rand::Rng;

use super::config::LossWeights;
use super::loss::{term_coefficients, LossBreakdown};
use crate::autograd::Graph;
use crate::dataset::Domain;
use crate::detector::{batch_terms, BatchRequest, DetectorParams, Supervision, TrainPlan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One student batch: labeled images first or interleaved, each with its
/// detection targets and domain.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub images: Tensor,
    pub supervision: Vec<Supervision>,
    /// `true` for labeled slots (supervised term), `false` for unlabeled
    /// slots (masked-consistency term).
    pub labeled: Vec<bool>,
    pub domains: Vec<Domain>,
}

#[derive(Debug)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Gradient of the objective for every parameter, `None` where the
    /// parameter does not influence it.
    pub grads: Vec<Option<Tensor>>,
    pub plan: TrainPlan,
}

/// Evaluates the composite objective of a batch and its parameter gradients.
///
/// With `adapt` off only the supervised and masked terms are built. A stored
/// `plan` replays the sampling decisions of an earlier evaluation.
pub fn composite_step<R: Rng>(
    params: &DetectorParams,
    batch: &PreparedBatch,
    weights: &LossWeights,
    da_rate: f64,
    adapt: bool,
    plan: Option<TrainPlan>,
    rng: &mut R,
) -> Result<StepOutput> {
    let n = batch.labeled.len();
    if batch.supervision.len() != n || batch.domains.len() != n {
        return Err(Error::Shape("batch metadata lengths differ".into()));
    }
    let n_s = batch.labeled.iter().filter(|&&l| l).count();
    let n_t = n - n_s;
    let group: Vec<usize> = batch
        .labeled
        .iter()
        .map(|&l| if l { 0 } else { 1 })
        .collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let req = BatchRequest {
        supervision: &batch.supervision,
        group: &group,
        n_groups: 2,
        domains: adapt.then_some(batch.domains.as_slice()),
        reversal: da_rate,
    };
    let terms = batch_terms(&mut g, &bound, x, &req, plan, rng)?;
    let slots = [
        terms.det_sums[0],
        terms.det_sums[1],
        terms.adv_img,
        terms.adv_ins,
        terms.cons_img,
        terms.cons_ins,
    ];
    let coeffs = term_coefficients(weights, n_s, n_t);
    let parts: Vec<_> = slots
        .iter()
        .zip(coeffs)
        .filter_map(|(v, c)| v.map(|v| (v, c)))
        .collect();
    let value = |v: Option<crate::autograd::Var>| v.map_or(0.0, |v| g.value(v).item());
    let mut breakdown = LossBreakdown {
        sup: value(slots[0]),
        mic: value(slots[1]),
        adv_img: value(slots[2]),
        adv_ins: value(slots[3]),
        cons_img: value(slots[4]),
        cons_ins: value(slots[5]),
        n_s,
        n_t,
        total: 0.0,
    };
    let mut grads: Vec<Option<Tensor>> = vec![None; params.tensors().len()];
    if !parts.is_empty() {
        let total = g.combine(&parts)?;
        breakdown.total = g.value(total).item();
        let mut gr = g.backward(total)?;
        for (slot, &v) in grads.iter_mut().zip(bound.vars()) {
            *slot = gr.take(v);
        }
    }
    if !breakdown.is_finite() {
        return Err(Error::Training("non-finite loss".into()));
    }
    Ok(StepOutput {
        breakdown,
        grads,
        plan: terms.plan,
    })
}
