//! The four model families and their combination rules: independent
//! averaging ensemble, cooperative ensemble, hard-gated mixture-of-experts,
//! and the kWTA ensemble network with a competition-delay parameter.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::nn::{
    self, affine, cross_entropy, cross_entropy_grad, kwta_backward, kwta_forward, mlp_backward_impl,
    mlp_forward, softmax_backward, softmax_row, CombinerParams, ForwardTrace, MlpParams, Param,
    WinnerMask, PROB_CLAMP,
};
use crate::scalar::Scalar;

/// Model family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Members trained on their own losses; outputs averaged at evaluation.
    Independent,
    /// Members trained concurrently against the loss of the averaged output.
    Cooperative,
    /// Gating network hard-selects one expert per sample.
    MoE,
    /// Concatenated member outputs recombined by an affine layer + kWTA.
    #[serde(rename = "kwta")]
    KwtaEnn,
}

impl Family {
    pub fn tag(self) -> &'static str {
        match self {
            Family::Independent => "independent",
            Family::Cooperative => "cooperative",
            Family::MoE => "moe",
            Family::KwtaEnn => "kwta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Family::Independent),
            "cooperative" => Ok(Family::Cooperative),
            "moe" => Ok(Family::MoE),
            "kwta" => Ok(Family::KwtaEnn),
            other => Err(Error::Domain(format!(
                "unknown family '{other}' (expected independent|cooperative|moe|kwta)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// An ensemble of `M` identical-architecture sub-networks plus the
/// family-specific combiner state.
#[derive(Debug, Clone)]
pub struct EnsembleModel<F> {
    family: Family,
    pub subnets: Vec<MlpParams<F>>,
    /// Gating network; present exactly for [`Family::MoE`].
    pub gate: Option<MlpParams<F>>,
    /// Affine combination layer; present exactly for [`Family::KwtaEnn`].
    pub combiner: Option<CombinerParams<F>>,
    k_frac: f64,
    delay_epochs: usize,
}

impl<F: Scalar> EnsembleModel<F> {
    /// Initialize a fresh model. Sub-networks are drawn first in index
    /// order, then the gate or combiner, so a given `rng` state fully
    /// determines the parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        family: Family,
        rng: &mut Rng,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        subnet_count: usize,
        k_frac: f64,
        delay_epochs: usize,
    ) -> Result<Self> {
        if subnet_count == 0 {
            return Err(Error::Domain("ensemble needs at least one sub-network".into()));
        }
        if family == Family::KwtaEnn && !(k_frac > 0.0 && k_frac <= 1.0) {
            return Err(Error::Domain(format!(
                "k_frac must lie in (0, 1], got {k_frac}"
            )));
        }
        let subnets = (0..subnet_count)
            .map(|_| MlpParams::init(rng, in_dim, hidden_dim, out_dim))
            .collect::<Result<Vec<_>>>()?;
        let gate = match family {
            Family::MoE => Some(MlpParams::init(rng, in_dim, hidden_dim, subnet_count)?),
            _ => None,
        };
        let combiner = match family {
            Family::KwtaEnn => Some(CombinerParams::init(rng, subnet_count, out_dim)?),
            _ => None,
        };
        Ok(Self {
            family,
            subnets,
            gate,
            combiner,
            k_frac,
            delay_epochs,
        })
    }

    pub(crate) fn from_parts(
        family: Family,
        subnets: Vec<MlpParams<F>>,
        gate: Option<MlpParams<F>>,
        combiner: Option<CombinerParams<F>>,
        k_frac: f64,
        delay_epochs: usize,
    ) -> Result<Self> {
        if subnets.is_empty() {
            return Err(Error::Domain("ensemble needs at least one sub-network".into()));
        }
        if (family == Family::MoE) != gate.is_some() {
            return Err(Error::Contract("gate present iff family is moe".into()));
        }
        if (family == Family::KwtaEnn) != combiner.is_some() {
            return Err(Error::Contract("combiner present iff family is kwta".into()));
        }
        Ok(Self {
            family,
            subnets,
            gate,
            combiner,
            k_frac,
            delay_epochs,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn subnet_count(&self) -> usize {
        self.subnets.len()
    }

    pub fn k_frac(&self) -> f64 {
        self.k_frac
    }

    pub fn delay_epochs(&self) -> usize {
        self.delay_epochs
    }

    pub fn in_dim(&self) -> usize {
        self.subnets[0].in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.subnets[0].hidden_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.subnets[0].out_dim()
    }

    /// Every trainable parameter, in a fixed order (sub-networks, gate,
    /// combiner); the optimizer steps them together.
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out: Vec<&mut Param<F>> = Vec::new();
        for net in &mut self.subnets {
            out.extend(net.params_mut());
        }
        if let Some(gate) = &mut self.gate {
            out.extend(gate.params_mut());
        }
        if let Some(comb) = &mut self.combiner {
            out.push(&mut comb.wz);
            out.push(&mut comb.bz);
        }
        out
    }

    /// Forward pass for the current `epoch` (0-based). The epoch only
    /// matters for [`Family::KwtaEnn`], whose kWTA activation is bypassed
    /// while `epoch < delay_epochs`.
    pub fn forward(&self, x: &Matrix<F>, epoch: usize) -> Result<ModelOutput<F>> {
        let per_subnet: Vec<(Matrix<F>, ForwardTrace<F>)> = self
            .subnets
            .par_iter()
            .map(|net| mlp_forward(net, x))
            .collect::<Result<Vec<_>>>()?;
        let (subnet_probs, subnet_traces): (Vec<_>, Vec<_>) = per_subnet.into_iter().unzip();

        let mut output = ModelOutput {
            family: self.family,
            final_probs: Matrix::zeros(0, 0),
            subnet_probs,
            gate_probs: None,
            subnet_traces,
            gate_trace: None,
            combiner_input: None,
            winner_mask: None,
        };

        match self.family {
            Family::Independent | Family::Cooperative => {
                output.final_probs = combine_average(&output.subnet_probs)?;
            }
            Family::MoE => {
                let gate = self.gate.as_ref().expect("moe model carries a gate");
                let (gate_probs, gate_trace) = mlp_forward(gate, x)?;
                let mut final_probs = Matrix::zeros(x.rows(), self.out_dim());
                for i in 0..x.rows() {
                    let selected = gate_probs.argmax_row(i);
                    final_probs
                        .row_mut(i)
                        .copy_from_slice(output.subnet_probs[selected].row(i));
                }
                output.final_probs = final_probs;
                output.gate_probs = Some(gate_probs);
                output.gate_trace = Some(gate_trace);
            }
            Family::KwtaEnn => {
                let comb = self.combiner.as_ref().expect("kwta model carries a combiner");
                let refs: Vec<&Matrix<F>> = output.subnet_probs.iter().collect();
                let yhat = Matrix::concat_cols(&refs)?;
                let z = affine(&yhat, &comb.wz.value, &comb.bz.value)?;
                let activated = if epoch < self.delay_epochs {
                    z
                } else {
                    let (a, mask) = kwta_forward(&z, self.k_frac)?;
                    output.winner_mask = Some(mask);
                    a
                };
                output.final_probs = softmax_row(&activated);
                output.combiner_input = Some(yhat);
            }
        }

        debug_assert!(output.rows_are_normalized(1e-9));
        Ok(output)
    }

    /// Backward pass for the family's training loss; populates every
    /// trainable parameter's gradient buffer and returns the scalar loss.
    ///
    /// Cooperative, MoE and kWTA members receive gradients of the shared
    /// objective. Independent members are each trained on their own
    /// cross-entropy; the returned value is then the mean of those
    /// per-member losses.
    pub fn backward(&mut self, output: &ModelOutput<F>, labels: &[usize]) -> Result<F> {
        if output.family != self.family {
            return Err(Error::Contract(format!(
                "backward on a {} model with a {} forward output",
                self.family, output.family
            )));
        }
        if output.subnet_probs.len() != self.subnets.len() {
            return Err(Error::Contract(format!(
                "forward output carries {} sub-network traces, model has {}",
                output.subnet_probs.len(),
                self.subnets.len()
            )));
        }
        if output.final_probs.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} output rows vs {} labels",
                output.final_probs.rows(),
                labels.len()
            )));
        }

        match self.family {
            Family::Cooperative => {
                let loss = cross_entropy(&output.final_probs, labels)?;
                let grad_final = cross_entropy_grad(&output.final_probs, labels)?;
                let share = F::one() / F::c(self.subnets.len() as f64);
                let grad = grad_final.scaled(share);
                self.backward_subnets(output, |_| grad.clone())?;
                Ok(loss)
            }
            Family::Independent => {
                let mut total = F::zero();
                for probs in &output.subnet_probs {
                    total += cross_entropy(probs, labels)?;
                }
                let grads: Vec<Matrix<F>> = output
                    .subnet_probs
                    .iter()
                    .map(|probs| cross_entropy_grad(probs, labels))
                    .collect::<Result<Vec<_>>>()?;
                self.backward_subnets(output, |m| grads[m].clone())?;
                Ok(total / F::c(self.subnets.len() as f64))
            }
            Family::MoE => self.backward_moe(output, labels),
            Family::KwtaEnn => self.backward_kwta(output, labels),
        }
    }

    /// Family training loss of a forward output, computed without touching
    /// any gradient buffer. [`Self::backward`] returns the same value.
    pub fn loss(&self, output: &ModelOutput<F>, labels: &[usize]) -> Result<F> {
        if output.family != self.family {
            return Err(Error::Contract(format!(
                "loss on a {} model with a {} forward output",
                self.family, output.family
            )));
        }
        match self.family {
            Family::Cooperative | Family::KwtaEnn => cross_entropy(&output.final_probs, labels),
            Family::Independent => {
                let mut total = F::zero();
                for probs in &output.subnet_probs {
                    total += cross_entropy(probs, labels)?;
                }
                Ok(total / F::c(self.subnets.len() as f64))
            }
            Family::MoE => {
                let gate_probs = output
                    .gate_probs
                    .as_ref()
                    .ok_or_else(|| Error::Contract("moe loss without gate output".into()))?;
                let clamp = F::c(PROB_CLAMP);
                let mut loss = F::zero();
                for (i, &label) in labels.iter().enumerate() {
                    let selected = gate_probs.argmax_row(i);
                    let g = gate_probs.get(i, selected);
                    let p = output.subnet_probs[selected].get(i, label).max(clamp);
                    loss += g * -p.ln();
                }
                Ok(loss / F::c(labels.len() as f64))
            }
        }
    }

    fn backward_subnets(
        &mut self,
        output: &ModelOutput<F>,
        grad_for: impl Fn(usize) -> Matrix<F> + Sync,
    ) -> Result<()> {
        self.subnets
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(m, net)| {
                let grad = grad_for(m);
                mlp_backward_impl(net, &output.subnet_traces[m], &grad, false).map(|_| ())
            })
    }

    /// Per sample i with hard-selected expert s(i):
    /// loss_i = gate_prob_i(s(i)) * ce(y_i, expert_{s(i)}(x_i)); batch mean.
    /// Gradient flows into the selected expert (scaled by the gate
    /// probability) and into the gate's selected coordinate (scaled by the
    /// sample's cross-entropy value).
    fn backward_moe(&mut self, output: &ModelOutput<F>, labels: &[usize]) -> Result<F> {
        let gate_probs = output
            .gate_probs
            .as_ref()
            .ok_or_else(|| Error::Contract("moe backward without gate output".into()))?;
        let gate_trace = output
            .gate_trace
            .as_ref()
            .ok_or_else(|| Error::Contract("moe backward without gate trace".into()))?;
        let batch_f = F::c(labels.len() as f64);
        let clamp = F::c(PROB_CLAMP);

        let mut expert_grads: Vec<Matrix<F>> = output
            .subnet_probs
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let mut gate_grad = Matrix::zeros(gate_probs.rows(), gate_probs.cols());
        let mut loss = F::zero();

        for (i, &label) in labels.iter().enumerate() {
            let selected = gate_probs.argmax_row(i);
            let g = gate_probs.get(i, selected);
            let p_raw = output.subnet_probs[selected].get(i, label);
            let p = p_raw.max(clamp);
            let ce = -p.ln();
            loss += g * ce;
            if p_raw >= clamp {
                expert_grads[selected].set(i, label, -(g / (batch_f * p)));
            }
            gate_grad.set(i, selected, ce / batch_f);
        }

        self.backward_subnets(output, |m| expert_grads[m].clone())?;
        let gate = self.gate.as_mut().expect("moe model carries a gate");
        mlp_backward_impl(gate, gate_trace, &gate_grad, false)?;
        Ok(loss / batch_f)
    }

    fn backward_kwta(&mut self, output: &ModelOutput<F>, labels: &[usize]) -> Result<F> {
        let yhat = output
            .combiner_input
            .as_ref()
            .ok_or_else(|| Error::Contract("kwta backward without combiner input".into()))?;
        let loss = cross_entropy(&output.final_probs, labels)?;
        let grad_final = cross_entropy_grad(&output.final_probs, labels)?;
        let grad_activated = softmax_backward(&output.final_probs, &grad_final)?;
        let grad_z = match &output.winner_mask {
            Some(mask) => kwta_backward(&grad_activated, mask)?,
            None => grad_activated, // competition delay active: plain affine path
        };

        let comb = self.combiner.as_mut().expect("kwta model carries a combiner");
        comb.wz.grad.add_assign(&grad_z.matmul_tn(yhat)?)?;
        comb.bz.grad.add_assign(&grad_z.col_sums())?;
        let grad_yhat = grad_z.matmul(&comb.wz.value)?;

        let out_dim = self.out_dim();
        let grads: Vec<Matrix<F>> = (0..self.subnets.len())
            .map(|m| grad_yhat.col_slice(m * out_dim, out_dim))
            .collect();
        self.backward_subnets(output, |m| grads[m].clone())?;
        Ok(loss)
    }
}

/// Elementwise mean of equally shaped probability matrices.
pub fn combine_average<F: Scalar>(subnet_probs: &[Matrix<F>]) -> Result<Matrix<F>> {
    let first = subnet_probs
        .first()
        .ok_or_else(|| Error::Domain("combine_average of an empty list".into()))?;
    let mut sum = first.clone();
    for probs in &subnet_probs[1..] {
        sum.add_assign(probs)?;
    }
    sum.scale_in_place(F::one() / F::c(subnet_probs.len() as f64));
    Ok(sum)
}

/// Result of one ensemble forward pass, together with the cached traces the
/// backward pass consumes.
#[derive(Debug, Clone)]
pub struct ModelOutput<F> {
    family: Family,
    /// Combined model output, one probability row per sample.
    pub final_probs: Matrix<F>,
    /// Per-sub-network softmax outputs in sub-network order.
    pub subnet_probs: Vec<Matrix<F>>,
    /// Gating probabilities (MoE only).
    pub gate_probs: Option<Matrix<F>>,
    pub(crate) subnet_traces: Vec<ForwardTrace<F>>,
    pub(crate) gate_trace: Option<ForwardTrace<F>>,
    pub(crate) combiner_input: Option<Matrix<F>>,
    pub(crate) winner_mask: Option<WinnerMask>,
}

impl<F: Scalar> ModelOutput<F> {
    pub fn family(&self) -> Family {
        self.family
    }

    /// Winner mask of the combination layer. `None` when the competition
    /// delay bypassed the kWTA activation (or for other families).
    pub fn winner_mask(&self) -> Option<&WinnerMask> {
        self.winner_mask.as_ref()
    }

    fn rows_are_normalized(&self, tol: f64) -> bool {
        let check = |m: &Matrix<F>| {
            (0..m.rows()).all(|r| {
                let s: F = m.row(r).iter().copied().sum();
                (s - F::one()).abs().to_f64_lossy() < tol
            })
        };
        check(&self.final_probs)
            && self.subnet_probs.iter().all(&check)
            && self.gate_probs.as_ref().is_none_or(check)
    }
}

/// Winner count the combination layer uses for `out_dim` classes.
pub fn combiner_winner_count(out_dim: usize, k_frac: f64) -> usize {
    nn::kwta_winner_count(out_dim, k_frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    type M = Matrix<f64>;
    type Model = EnsembleModel<f64>;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> M {
        Rng::new(seed).uniform(-1.0, 1.0, rows, cols).unwrap()
    }

    fn tiny(family: Family, m: usize, seed: u64) -> Model {
        Model::init(family, &mut Rng::new(seed), 3, 4, 3, m, 0.75, 0).unwrap()
    }

    #[test]
    fn combine_average_single_is_identity() {
        let a = rand_matrix(2, 3, 1);
        assert_eq!(combine_average(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn combine_average_symmetry() {
        let a = M::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = M::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let avg = combine_average(&[a, b]).unwrap();
        assert_eq!(avg.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn combine_average_matches_scalar_loop() {
        let mats: Vec<M> = (0..5).map(|s| rand_matrix(3, 4, 10 + s)).collect();
        let avg = combine_average(&mats).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mut acc = 0.0;
                for m in &mats {
                    acc += m.get(r, c);
                }
                assert_relative_eq!(avg.get(r, c), acc / 5.0, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn combine_average_rejects_empty() {
        assert!(combine_average::<f64>(&[]).is_err());
    }

    #[test]
    fn cooperative_identical_subnets_equal_single_output() {
        let mut model = tiny(Family::Cooperative, 3, 2);
        let reference = model.subnets[0].clone();
        for net in &mut model.subnets {
            *net = reference.clone();
        }
        let x = rand_matrix(4, 3, 3);
        let out = model.forward(&x, 0).unwrap();
        assert!(out.final_probs.max_abs_diff(&out.subnet_probs[0]) < 1e-15);
    }

    #[test]
    fn cooperative_final_rows_sum_to_one() {
        let model = tiny(Family::Cooperative, 4, 4);
        let x = rand_matrix(5, 3, 5);
        let out = model.forward(&x, 0).unwrap();
        for r in 0..out.final_probs.rows() {
            let s: f64 = out.final_probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn moe_final_rows_copy_selected_expert() {
        let model = tiny(Family::MoE, 3, 6);
        let x = rand_matrix(6, 3, 7);
        let out = model.forward(&x, 0).unwrap();
        let gate = out.gate_probs.as_ref().unwrap();
        for i in 0..x.rows() {
            // Independent per-sample argmax-then-copy oracle.
            let row = gate.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            assert_eq!(out.final_probs.row(i), out.subnet_probs[best].row(i));
        }
    }

    #[test]
    fn moe_tied_gate_selects_expert_zero() {
        let mut model = tiny(Family::MoE, 2, 8);
        // Zeroed gate emits a uniform distribution: a tie on every sample.
        for p in model.gate.as_mut().unwrap().params_mut() {
            p.value.fill(0.0);
        }
        let x = rand_matrix(3, 3, 9);
        let out = model.forward(&x, 0).unwrap();
        for i in 0..x.rows() {
            assert_eq!(out.final_probs.row(i), out.subnet_probs[0].row(i));
        }
    }

    #[test]
    fn moe_selection_invariant_under_gate_logit_scaling() {
        let mut model = tiny(Family::MoE, 3, 10);
        let x = rand_matrix(8, 3, 11);
        let before = model.forward(&x, 0).unwrap();
        let selections: Vec<usize> = (0..x.rows())
            .map(|i| before.gate_probs.as_ref().unwrap().argmax_row(i))
            .collect();
        // Scaling every gate output-layer weight and bias by a positive
        // constant sharpens the softmax but preserves each argmax.
        {
            let gate = model.gate.as_mut().unwrap();
            gate.w2.value.scale_in_place(3.0);
            gate.b2.value.scale_in_place(3.0);
        }
        let after = model.forward(&x, 0).unwrap();
        for (i, &s) in selections.iter().enumerate() {
            assert_eq!(after.gate_probs.as_ref().unwrap().argmax_row(i), s);
        }
    }

    #[test]
    fn moe_loss_tied_gate_analytic_value() {
        // Two experts with zero weights emit [1/3,1/3,1/3]; a zero gate
        // ties and selects expert 0 with probability 1/2, so the sample
        // loss is 0.5 * ln 3.
        let mut model = tiny(Family::MoE, 2, 12);
        for net in &mut model.subnets {
            for p in net.params_mut() {
                p.value.fill(0.0);
            }
        }
        for p in model.gate.as_mut().unwrap().params_mut() {
            p.value.fill(0.0);
        }
        let x = rand_matrix(1, 3, 13);
        let out = model.forward(&x, 0).unwrap();
        let loss = model.backward(&out, &[1]).unwrap();
        assert_relative_eq!(loss, 0.5 * 3.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn moe_near_perfect_expert_with_confident_gate_has_near_zero_loss() {
        let mut model = tiny(Family::MoE, 2, 14);
        // Expert 0 strongly predicts class 2 regardless of input.
        {
            let net = &mut model.subnets[0];
            for p in net.params_mut() {
                p.value.fill(0.0);
            }
            net.b2.value.set(0, 2, 50.0);
        }
        // Gate strongly prefers expert 0.
        {
            let gate = model.gate.as_mut().unwrap();
            for p in gate.params_mut() {
                p.value.fill(0.0);
            }
            gate.b2.value.set(0, 0, 50.0);
        }
        let x = rand_matrix(3, 3, 15);
        let out = model.forward(&x, 0).unwrap();
        let loss = model.backward(&out, &[2, 2, 2]).unwrap();
        assert!(loss.abs() < 1e-9, "loss = {loss}");
    }

    #[test]
    fn kwta_forward_matches_scalar_oracle() {
        let model = tiny(Family::KwtaEnn, 2, 16);
        let x = rand_matrix(2, 3, 17);
        let out = model.forward(&x, 0).unwrap();

        // Step-by-step oracle: concat -> affine -> top-2 mask -> softmax.
        let comb = model.combiner.as_ref().unwrap();
        for i in 0..x.rows() {
            let mut yhat = Vec::new();
            for probs in &out.subnet_probs {
                yhat.extend_from_slice(probs.row(i));
            }
            let mut z = [0.0f64; 3];
            for (o, zv) in z.iter_mut().enumerate() {
                let mut acc = comb.bz.value.get(0, o);
                for (j, y) in yhat.iter().enumerate() {
                    acc += comb.wz.value.get(o, j) * y;
                }
                *zv = acc;
            }
            // keep top 2 of 3 (k_frac 0.75 -> floor(2.25) = 2)
            let mut idx = [0usize, 1, 2];
            idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
            let mut kept = [0.0f64; 3];
            for &j in idx.iter().take(2) {
                kept[j] = z[j];
            }
            let max = kept.iter().cloned().fold(f64::MIN, f64::max);
            let denom: f64 = kept.iter().map(|v| (v - max).exp()).sum();
            for (j, m) in kept.iter().enumerate() {
                assert_relative_eq!(
                    out.final_probs.get(i, j),
                    (m - max).exp() / denom,
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn kwta_delay_bypasses_competition() {
        let model =
            Model::init(Family::KwtaEnn, &mut Rng::new(18), 3, 4, 3, 2, 0.75, 5).unwrap();
        let x = rand_matrix(3, 3, 19);
        let delayed = model.forward(&x, 2).unwrap();
        assert!(delayed.winner_mask().is_none());
        let active = model.forward(&x, 5).unwrap();
        assert!(active.winner_mask().is_some());

        // During the delay the output is the softmax of the plain affine
        // combination.
        let comb = model.combiner.as_ref().unwrap();
        let refs: Vec<&M> = delayed.subnet_probs.iter().collect();
        let yhat = M::concat_cols(&refs).unwrap();
        let z = affine(&yhat, &comb.wz.value, &comb.bz.value).unwrap();
        assert!(delayed.final_probs.max_abs_diff(&softmax_row(&z)) < 1e-15);
    }

    #[test]
    fn kwta_full_fraction_equals_delay_path() {
        let mut rng = Rng::new(20);
        let all_winners = Model::init(Family::KwtaEnn, &mut rng, 3, 4, 3, 2, 1.0, 0).unwrap();
        let mut delayed = all_winners.clone();
        delayed.delay_epochs = 10;
        let x = rand_matrix(4, 3, 21);
        let a = all_winners.forward(&x, 0).unwrap();
        let b = delayed.forward(&x, 0).unwrap();
        assert!(a.final_probs.max_abs_diff(&b.final_probs) < 1e-15);
    }

    #[test]
    fn backward_errors_on_family_mismatch() {
        let mut coop = tiny(Family::Cooperative, 2, 22);
        let moe = tiny(Family::MoE, 2, 23);
        let x = rand_matrix(2, 3, 24);
        let out = moe.forward(&x, 0).unwrap();
        assert!(matches!(
            coop.backward(&out, &[0, 1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cooperative_identical_subnets_receive_identical_gradients() {
        let mut model = tiny(Family::Cooperative, 2, 25);
        let reference = model.subnets[0].clone();
        for net in &mut model.subnets {
            *net = reference.clone();
        }
        let x = rand_matrix(4, 3, 26);
        let out = model.forward(&x, 0).unwrap();
        model.backward(&out, &[0, 1, 2, 0]).unwrap();
        let [w1_a, b1_a, w2_a, b2_a] = model.subnets[0].params();
        let [w1_b, b1_b, w2_b, b2_b] = model.subnets[1].params();
        assert!(w1_a.grad.max_abs_diff(&w1_b.grad) < 1e-15);
        assert!(b1_a.grad.max_abs_diff(&b1_b.grad) < 1e-15);
        assert!(w2_a.grad.max_abs_diff(&w2_b.grad) < 1e-15);
        assert!(b2_a.grad.max_abs_diff(&b2_b.grad) < 1e-15);
    }

    #[test]
    fn permuting_cooperative_subnets_permutes_gradients() {
        let model_base = tiny(Family::Cooperative, 3, 27);
        let mut model = model_base.clone();
        let mut permuted = model_base.clone();
        permuted.subnets.swap(0, 2);
        let x = rand_matrix(5, 3, 28);
        let labels = [0usize, 1, 2, 1, 0];

        let out = model.forward(&x, 0).unwrap();
        model.backward(&out, &labels).unwrap();
        let out_p = permuted.forward(&x, 0).unwrap();
        permuted.backward(&out_p, &labels).unwrap();

        for pi in 0..4 {
            assert!(
                model.subnets[0].params()[pi]
                    .grad
                    .max_abs_diff(&permuted.subnets[2].params()[pi].grad)
                    < 1e-15
            );
            assert!(
                model.subnets[2].params()[pi]
                    .grad
                    .max_abs_diff(&permuted.subnets[0].params()[pi].grad)
                    < 1e-15
            );
        }
    }

    #[test]
    fn independent_gradients_have_no_cross_coupling() {
        let mut model = tiny(Family::Independent, 2, 29);
        let x = rand_matrix(4, 3, 30);
        let labels = [0usize, 1, 2, 0];

        let out = model.forward(&x, 0).unwrap();
        model.backward(&out, &labels).unwrap();
        let grads_before: Vec<M> = model.subnets[1]
            .params()
            .iter()
            .map(|p| p.grad.clone())
            .collect();

        // Replace sub-network 0 entirely and rerun: sub-network 1's
        // gradients must be unaffected.
        model.subnets[0] = MlpParams::init(&mut Rng::new(99), 3, 4, 3).unwrap();
        for p in model.params_mut() {
            p.zero_grad();
        }
        let out2 = model.forward(&x, 0).unwrap();
        model.backward(&out2, &labels).unwrap();
        for (pi, before) in grads_before.iter().enumerate() {
            assert!(model.subnets[1].params()[pi].grad.max_abs_diff(before) < 1e-15);
        }
    }

    #[test]
    fn zero_loss_batch_has_negligible_gradients() {
        let mut model = tiny(Family::Cooperative, 2, 31);
        // Saturate both members toward class 0.
        for net in &mut model.subnets {
            for p in net.params_mut() {
                p.value.fill(0.0);
            }
            net.b2.value.set(0, 0, 60.0);
        }
        let x = rand_matrix(3, 3, 32);
        let out = model.forward(&x, 0).unwrap();
        let loss = model.backward(&out, &[0, 0, 0]).unwrap();
        assert!(loss < 1e-12);
        for p in model.params_mut() {
            assert!(p.grad.data().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn backward_returns_the_pure_loss_value() {
        for family in [
            Family::Independent,
            Family::Cooperative,
            Family::MoE,
            Family::KwtaEnn,
        ] {
            let mut model = tiny(family, 3, 40);
            let x = rand_matrix(5, 3, 41);
            let labels = [0usize, 2, 1, 1, 0];
            let out = model.forward(&x, 0).unwrap();
            let pure = model.loss(&out, &labels).unwrap();
            let from_backward = model.backward(&out, &labels).unwrap();
            assert_relative_eq!(pure, from_backward, max_relative = 1e-15);
        }
    }

    #[test]
    fn cooperative_and_kwta_train_every_subnet_each_step() {
        for family in [Family::Cooperative, Family::KwtaEnn] {
            let mut model = tiny(family, 3, 33);
            let x = rand_matrix(6, 3, 34);
            let out = model.forward(&x, 0).unwrap();
            model.backward(&out, &[0, 1, 2, 0, 1, 2]).unwrap();
            for (i, net) in model.subnets.iter().enumerate() {
                let nonzero = net
                    .params()
                    .iter()
                    .any(|p| p.grad.data().iter().any(|v| v.abs() > 0.0));
                assert!(nonzero, "{family} subnet {i} received no gradient");
            }
        }
    }
}
