//! Loss-weight-level balancing baselines: fixed weights, dynamic weight
//! averaging, homoscedastic-uncertainty weighting, and gradient-norm
//! matching. Weights multiply whole task gradients, which by linearity is
//! the same as weighting the task losses.

use std::collections::VecDeque;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::grads::{l2_norm, GradientSet};
use crate::params::ParameterGroup;
use crate::scalar::Scalar;

use super::{BalanceReport, BalanceRow, Balancer, StepContext};

fn scale_all<F: Scalar>(
    set: &mut GradientSet<F>,
    w: F,
    iteration: u64,
    report: &mut BalanceReport<F>,
) -> Result<()> {
    let names: Vec<String> = set.group_names().map(|s| s.to_string()).collect();
    for name in names {
        let pre_norm = set.norm_of(&name).expect("group present");
        if w != F::one() {
            set.scale_group(&name, w)?;
        }
        report.rows.push(BalanceRow {
            iteration,
            group: name.clone(),
            task: set.task().to_string(),
            pre_norm,
            post_norm: set.norm_of(&name).expect("group present"),
            weight: w,
            gated: w != F::one(),
        });
    }
    Ok(())
}

/// Static per-task weights: weight 1 everywhere is plain joint training,
/// zero auxiliary weights train on the target loss alone, and searched
/// weights give the weights-tuning baseline.
#[derive(Clone, Debug)]
pub struct FixedWeights<F> {
    weights: Vec<F>,
}

impl<F: Scalar> FixedWeights<F> {
    /// `weights[0]` applies to the target task, the rest to auxiliaries.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("fixed weights: empty weight list".into()));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config(format!(
                "fixed weights must be non-negative, got {weights:?}"
            )));
        }
        Ok(Self {
            weights: weights.into_iter().map(F::real).collect(),
        })
    }

    /// All-ones weights over `num_tasks` tasks.
    pub fn vanilla(num_tasks: usize) -> Self {
        Self {
            weights: vec![F::one(); num_tasks],
        }
    }

    /// Target weight 1, every auxiliary weight 0.
    pub fn single_loss(num_tasks: usize) -> Self {
        let mut weights = vec![F::zero(); num_tasks];
        weights[0] = F::one();
        Self { weights }
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }
}

impl<F: Scalar> Balancer<F> for FixedWeights<F> {
    fn name(&self) -> &'static str {
        "fixed-weights"
    }

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>> {
        if aux.len() + 1 != self.weights.len() {
            return Err(Error::Contract(format!(
                "fixed weights cover {} tasks but {} were given",
                self.weights.len(),
                aux.len() + 1
            )));
        }
        let mut report = BalanceReport::empty();
        scale_all(target, self.weights[0], ctx.iteration, &mut report)?;
        for (ai, a) in aux.iter_mut().enumerate() {
            scale_all(a, self.weights[ai + 1], ctx.iteration, &mut report)?;
        }
        Ok(report)
    }
}

/// Dynamic weight averaging over windowed loss means. Weights are uniform
/// until two windows have completed; afterwards
/// `w_j = N * exp(p_j / T) / sum_n exp(p_n / T)` with
/// `p_j = mean_loss[latest] / mean_loss[previous]`.
#[derive(Clone, Debug)]
pub struct Dwa<F> {
    temperature: f64,
    window: usize,
    acc: Vec<F>,
    acc_count: usize,
    history: VecDeque<Vec<F>>,
    num_tasks: usize,
}

impl<F: Scalar> Dwa<F> {
    pub fn new(num_tasks: usize, temperature: f64, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("dwa window must be positive".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Config("dwa temperature must be positive".into()));
        }
        Ok(Self {
            temperature,
            window,
            acc: vec![F::zero(); num_tasks],
            acc_count: 0,
            history: VecDeque::new(),
            num_tasks,
        })
    }

    /// Current weights from the two most recent completed windows.
    pub fn weights(&self) -> Vec<F> {
        if self.history.len() < 2 {
            return vec![F::one(); self.num_tasks];
        }
        let older = &self.history[0];
        let newer = &self.history[1];
        let ratios: Vec<f64> = newer
            .iter()
            .zip(older)
            .map(|(&n, &o)| {
                if o.as_f64() == 0.0 {
                    1.0
                } else {
                    n.as_f64() / o.as_f64()
                }
            })
            .collect();
        weights_from_ratios(&ratios, self.temperature, self.num_tasks)
            .into_iter()
            .map(F::real)
            .collect()
    }

    pub fn record_losses(&mut self, losses: &[F]) -> Result<()> {
        if losses.len() != self.num_tasks {
            return Err(Error::Contract(format!(
                "dwa tracks {} tasks but {} losses were given",
                self.num_tasks,
                losses.len()
            )));
        }
        for (a, &l) in self.acc.iter_mut().zip(losses) {
            *a += l;
        }
        self.acc_count += 1;
        if self.acc_count >= self.window {
            let denom = F::real(self.acc_count as f64);
            let mean: Vec<F> = self.acc.iter().map(|&a| a / denom).collect();
            self.history.push_back(mean);
            if self.history.len() > 2 {
                self.history.pop_front();
            }
            self.acc.iter_mut().for_each(|a| *a = F::zero());
            self.acc_count = 0;
        }
        Ok(())
    }
}

/// Softmax-with-temperature weighting scaled to sum to the task count.
pub fn weights_from_ratios(ratios: &[f64], temperature: f64, num_tasks: usize) -> Vec<f64> {
    let exps: Vec<f64> = ratios.iter().map(|&p| (p / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter()
        .map(|e| num_tasks as f64 * e / total)
        .collect()
}

impl<F: Scalar> Balancer<F> for Dwa<F> {
    fn name(&self) -> &'static str {
        "dwa"
    }

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>> {
        if aux.len() + 1 != self.num_tasks {
            return Err(Error::Contract(format!(
                "dwa tracks {} tasks but {} were given",
                self.num_tasks,
                aux.len() + 1
            )));
        }
        let weights = self.weights();
        let mut report = BalanceReport::empty();
        scale_all(target, weights[0], ctx.iteration, &mut report)?;
        for (ai, a) in aux.iter_mut().enumerate() {
            scale_all(a, weights[ai + 1], ctx.iteration, &mut report)?;
        }
        self.record_losses(ctx.losses)?;
        Ok(report)
    }
}

/// Builds `sum_j exp(-s_j) * L_j + s_j / 2` on the tape, where `s` is the
/// `[num_tasks]` log-variance parameter node and `losses[j]` are scalar loss
/// nodes. The `s` entries participate in autodiff through this composition.
pub fn uncertainty_total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    losses: &[NodeId],
    s_param: NodeId,
) -> Result<NodeId> {
    if losses.is_empty() {
        return Err(Error::Contract("uncertainty loss: no task losses".into()));
    }
    let mut total: Option<NodeId> = None;
    for (j, &loss) in losses.iter().enumerate() {
        let sj = tape.index(s_param, j)?;
        let neg = tape.neg(sj)?;
        let coeff = tape.exp(neg)?;
        let weighted = tape.mul(coeff, loss)?;
        let reg = tape.scale(sj, F::real(0.5))?;
        let term = tape.add(weighted, reg)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one task"))
}

/// Homoscedastic-uncertainty weighting with internally trained log-variance
/// parameters. Task `j`'s gradient is scaled by `exp(-s_j)`; each step the
/// parameters take one gradient-descent step on the weighted objective:
/// `ds_j = -exp(-s_j) * L_j + 1/2`.
#[derive(Clone, Debug)]
pub struct Uncertainty<F> {
    s: Vec<F>,
    lr: F,
}

impl<F: Scalar> Uncertainty<F> {
    pub fn new(num_tasks: usize, lr: f64) -> Self {
        Self {
            s: vec![F::zero(); num_tasks],
            lr: F::real(lr),
        }
    }

    pub fn log_variances(&self) -> &[F] {
        &self.s
    }

    /// Coefficient applied to task `j`'s loss.
    pub fn coefficient(&self, j: usize) -> F {
        (-self.s[j]).exp()
    }
}

impl<F: Scalar> Balancer<F> for Uncertainty<F> {
    fn name(&self) -> &'static str {
        "uncertainty"
    }

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>> {
        let num_tasks = aux.len() + 1;
        if self.s.len() != num_tasks || ctx.losses.len() != num_tasks {
            return Err(Error::Contract(format!(
                "uncertainty tracks {} tasks but {} sets / {} losses were given",
                self.s.len(),
                num_tasks,
                ctx.losses.len()
            )));
        }
        let mut report = BalanceReport::empty();
        scale_all(target, self.coefficient(0), ctx.iteration, &mut report)?;
        for (ai, a) in aux.iter_mut().enumerate() {
            scale_all(a, self.coefficient(ai + 1), ctx.iteration, &mut report)?;
        }
        let half = F::real(0.5);
        for (j, s) in self.s.iter_mut().enumerate() {
            let grad = -(-*s).exp() * ctx.losses[j] + half;
            *s = *s - self.lr * grad;
        }
        Ok(report)
    }
}

/// Gradient-norm matching state: per-task weights pulled toward equalized
/// gradient norms on one reference parameter group.
#[derive(Clone, Debug)]
pub struct GradNormState<F> {
    weights: Vec<F>,
    initial_losses: Option<Vec<F>>,
    alpha: f64,
    weight_lr: F,
}

impl<F: Scalar> GradNormState<F> {
    pub fn new(num_tasks: usize, alpha: f64, weight_lr: f64) -> Self {
        Self {
            weights: vec![F::one(); num_tasks],
            initial_losses: None,
            alpha,
            weight_lr: F::real(weight_lr),
        }
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    /// One descent step on `sum_j |w_j * n_j - mean(w * n) * r_j^alpha|`
    /// with the unweighted norms `n_j` treated as constants, followed by
    /// renormalization to `sum w_j = num_tasks`.
    pub fn update(&mut self, unweighted_norms: &[F], losses: &[F]) -> Result<()> {
        let n = self.weights.len();
        if unweighted_norms.len() != n || losses.len() != n {
            return Err(Error::Contract(format!(
                "gradnorm tracks {n} tasks but got {} norms / {} losses",
                unweighted_norms.len(),
                losses.len()
            )));
        }
        if self.initial_losses.is_none() {
            self.initial_losses = Some(losses.to_vec());
        }
        let initial = self.initial_losses.as_ref().expect("captured above");

        let progress: Vec<f64> = losses
            .iter()
            .zip(initial)
            .map(|(&l, &l0)| {
                let l0 = l0.as_f64();
                if l0 <= 0.0 {
                    1.0
                } else {
                    l.as_f64() / l0
                }
            })
            .collect();
        let mean_progress = progress.iter().sum::<f64>() / n as f64;
        let rates: Vec<f64> = progress
            .iter()
            .map(|&p| if mean_progress == 0.0 { 1.0 } else { p / mean_progress })
            .collect();

        let weighted: Vec<F> = self
            .weights
            .iter()
            .zip(unweighted_norms)
            .map(|(&w, &g)| w * g)
            .collect();
        let mean_norm = weighted.iter().copied().sum::<F>() / F::real(n as f64);

        for j in 0..n {
            let target = mean_norm * F::real(rates[j].powf(self.alpha));
            let diff = weighted[j] - target;
            let grad = F::real(diff.as_f64().signum()) * unweighted_norms[j];
            self.weights[j] = self.weights[j] - self.weight_lr * grad;
        }
        // Keep weights nonnegative before renormalizing.
        for w in self.weights.iter_mut() {
            *w = w.max(F::zero());
        }
        let total: F = self.weights.iter().copied().sum();
        if total > F::zero() {
            let scale = F::real(n as f64) / total;
            self.weights.iter_mut().for_each(|w| *w = *w * scale);
        } else {
            self.weights.iter_mut().for_each(|w| *w = F::one());
        }
        Ok(())
    }
}

/// GradNorm as a balancing method; norms are measured on the last
/// shared-scope parameter group.
#[derive(Clone, Debug)]
pub struct GradNorm<F> {
    state: GradNormState<F>,
    norm_group: String,
}

impl<F: Scalar> GradNorm<F> {
    pub fn new(
        groups: &[ParameterGroup<F>],
        num_tasks: usize,
        alpha: f64,
        weight_lr: f64,
    ) -> Result<Self> {
        let norm_group = groups
            .iter()
            .rev()
            .find(|g| g.scope().is_shared())
            .map(|g| g.name().to_string())
            .ok_or_else(|| Error::Config("gradnorm: model has no shared groups".into()))?;
        Ok(Self {
            state: GradNormState::new(num_tasks, alpha, weight_lr),
            norm_group,
        })
    }

    pub fn state(&self) -> &GradNormState<F> {
        &self.state
    }

    pub fn norm_group(&self) -> &str {
        &self.norm_group
    }
}

impl<F: Scalar> Balancer<F> for GradNorm<F> {
    fn name(&self) -> &'static str {
        "gradnorm"
    }

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>> {
        let num_tasks = aux.len() + 1;
        if self.state.weights.len() != num_tasks || ctx.losses.len() != num_tasks {
            return Err(Error::Contract(format!(
                "gradnorm tracks {} tasks but {} sets / {} losses were given",
                self.state.weights.len(),
                num_tasks,
                ctx.losses.len()
            )));
        }
        let mut norms = Vec::with_capacity(num_tasks);
        for set in std::iter::once(&*target).chain(aux.iter().map(|a| &*a)) {
            let g = set.get(&self.norm_group).ok_or_else(|| {
                Error::Contract(format!(
                    "gradient set `{}` lacks the norm group `{}`",
                    set.task(),
                    self.norm_group
                ))
            })?;
            norms.push(l2_norm(g));
        }
        let weights = self.state.weights.clone();
        let mut report = BalanceReport::empty();
        scale_all(target, weights[0], ctx.iteration, &mut report)?;
        for (ai, a) in aux.iter_mut().enumerate() {
            scale_all(a, weights[ai + 1], ctx.iteration, &mut report)?;
        }
        self.state.update(&norms, ctx.losses)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Scope;
    use crate::tensor::Tensor;

    fn set(task: &str, vals: &[(&str, Vec<f64>)]) -> GradientSet<f64> {
        let mut s = GradientSet::new(task);
        for (name, v) in vals {
            s.insert(*name, v.clone());
        }
        s
    }

    #[test]
    fn vanilla_weights_are_the_identity() {
        let mut method = FixedWeights::<f64>::vanilla(2);
        let mut target = set("target", &[("w", vec![1.0, -2.0])]);
        let mut aux = [set("aux1", &[("w", vec![0.5, 0.25])])];
        let ctx = StepContext {
            iteration: 1,
            losses: &[0.0, 0.0],
        };
        method.balance(&mut target, &mut aux, &ctx).unwrap();
        assert_eq!(target.get("w").unwrap(), &[1.0, -2.0]);
        assert_eq!(aux[0].get("w").unwrap(), &[0.5, 0.25]);
    }

    #[test]
    fn single_loss_zeroes_auxiliaries() {
        let mut method = FixedWeights::<f64>::single_loss(3);
        let mut target = set("target", &[("w", vec![1.0])]);
        let mut aux = [
            set("aux1", &[("w", vec![5.0])]),
            set("aux2", &[("w", vec![-3.0])]),
        ];
        let ctx = StepContext {
            iteration: 1,
            losses: &[0.0; 3],
        };
        method.balance(&mut target, &mut aux, &ctx).unwrap();
        assert_eq!(target.get("w").unwrap(), &[1.0]);
        assert_eq!(aux[0].get("w").unwrap(), &[0.0]);
        assert_eq!(aux[1].get("w").unwrap(), &[0.0]);
    }

    #[test]
    fn half_weight_halves_every_entry() {
        let mut method = FixedWeights::<f64>::new(vec![1.0, 0.5]).unwrap();
        let mut target = set("target", &[("w", vec![1.0])]);
        let mut aux = [set("aux1", &[("w", vec![4.0, -6.0])])];
        // Key sets may differ per task only in tests; keep them equal.
        target.insert("w2", vec![0.0]);
        aux[0].insert("w2", vec![2.0]);
        let ctx = StepContext {
            iteration: 1,
            losses: &[0.0, 0.0],
        };
        method.balance(&mut target, &mut aux, &ctx).unwrap();
        assert_eq!(aux[0].get("w").unwrap(), &[2.0, -3.0]);
        assert_eq!(aux[0].get("w2").unwrap(), &[1.0]);
    }

    #[test]
    fn negative_fixed_weights_are_rejected() {
        assert!(FixedWeights::<f64>::new(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn dwa_symmetric_ratios_give_uniform_weights() {
        let w = weights_from_ratios(&[1.0, 1.0], 3.7, 2);
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dwa_hand_softmax_example() {
        // p = [2, 1], T = 1: e^2 and e^1 give [1.462, 0.538].
        let w = weights_from_ratios(&[2.0, 1.0], 1.0, 2);
        assert!((w[0] - 1.462).abs() < 1e-3, "{w:?}");
        assert!((w[1] - 0.538).abs() < 1e-3, "{w:?}");
        let e2 = 2.0_f64.exp();
        let e1 = 1.0_f64.exp();
        assert!((w[0] - 2.0 * e2 / (e2 + e1)).abs() < 1e-12);
    }

    #[test]
    fn dwa_large_temperature_flattens() {
        let w = weights_from_ratios(&[2.0, 1.0], 1e6, 2);
        assert!((w[0] - 1.0).abs() < 1e-3 && (w[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn dwa_weights_sum_to_task_count_and_start_uniform() {
        let mut dwa = Dwa::<f64>::new(3, 2.0, 2).unwrap();
        assert_eq!(dwa.weights(), vec![1.0, 1.0, 1.0]);
        for i in 0..8 {
            let l = 1.0 / (i as f64 + 1.0);
            dwa.record_losses(&[l, 2.0 * l, 0.5]).unwrap();
        }
        let w = dwa.weights();
        let total: f64 = w.iter().sum();
        assert!((total - 3.0).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn dwa_zero_denominator_is_neutral() {
        let mut dwa = Dwa::<f64>::new(2, 1.0, 1).unwrap();
        dwa.record_losses(&[0.0, 1.0]).unwrap();
        dwa.record_losses(&[5.0, 1.0]).unwrap();
        // Task 0's ratio divides by zero and falls back to 1, same as task 1.
        let w = dwa.weights();
        assert!((w[0] - w[1]).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_examples_hold() {
        // s = 0 leaves the plain sum.
        let u = Uncertainty::<f64>::new(3, 0.01);
        for j in 0..3 {
            assert_eq!(u.coefficient(j), 1.0);
        }
        // One task, L = 1, s = 2: e^{-2} * 1 + 2/2 = 1.1353...
        let mut u = Uncertainty::<f64>::new(1, 0.01);
        u.s[0] = 2.0;
        let total = u.coefficient(0) * 1.0 + 2.0 / 2.0;
        assert!((total - 1.1353352832366128).abs() < 1e-12);
        // Monotonicity: larger s, smaller coefficient.
        assert!(Uncertainty::<f64> { s: vec![1.0], lr: 0.0 }.coefficient(0)
            > Uncertainty::<f64> { s: vec![2.0], lr: 0.0 }.coefficient(0));
    }

    #[test]
    fn uncertainty_update_matches_the_analytic_gradient() {
        let mut u = Uncertainty::<f64>::new(2, 0.1);
        let mut target = set("target", &[("w", vec![1.0])]);
        let mut aux = [set("aux1", &[("w", vec![1.0])])];
        let losses = [2.0, 0.25];
        let ctx = StepContext {
            iteration: 1,
            losses: &losses,
        };
        method_step(&mut u, &mut target, &mut aux, &ctx);
        // ds = -e^{-0} * L + 0.5
        let expected0 = 0.0 - 0.1 * (-2.0 + 0.5);
        let expected1 = 0.0 - 0.1 * (-0.25 + 0.5);
        assert!((u.log_variances()[0] - expected0).abs() < 1e-15);
        assert!((u.log_variances()[1] - expected1).abs() < 1e-15);
    }

    fn method_step<B: Balancer<f64>>(
        b: &mut B,
        target: &mut GradientSet<f64>,
        aux: &mut [GradientSet<f64>],
        ctx: &StepContext<'_, f64>,
    ) {
        b.balance(target, aux, ctx).unwrap();
    }

    #[test]
    fn gradnorm_already_matched_norms_leave_weights() {
        let mut st = GradNormState::<f64>::new(2, 0.0, 0.1);
        st.update(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((st.weights()[0] - 1.0).abs() < 1e-12);
        assert!((st.weights()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradnorm_moves_weights_toward_the_mean_norm() {
        // Norms [3, 1], alpha 0: the mean target is 2, so w_0 falls and
        // w_1 rises.
        let mut st = GradNormState::<f64>::new(2, 0.0, 0.05);
        st.update(&[3.0, 1.0], &[1.0, 1.0]).unwrap();
        let w = st.weights();
        assert!(w[0] < 1.0, "{w:?}");
        assert!(w[1] > 1.0, "{w:?}");
    }

    #[test]
    fn gradnorm_weights_renormalize_to_task_count() {
        let mut st = GradNormState::<f64>::new(3, 0.75, 0.2);
        let mut norms = [5.0, 0.5, 1.5];
        let mut losses = [1.0, 0.9, 1.4];
        for i in 0..20 {
            st.update(&norms, &losses).unwrap();
            let total: f64 = st.weights().iter().sum();
            assert!((total - 3.0).abs() < 1e-9);
            norms[i % 3] *= 1.1;
            losses[(i + 1) % 3] *= 0.95;
        }
    }

    #[test]
    fn gradnorm_method_uses_the_last_shared_group() {
        let groups = [
            ParameterGroup::<f64>::new("emb", Tensor::zeros(vec![2]).unwrap(), Scope::Shared),
            ParameterGroup::<f64>::new("mlp", Tensor::zeros(vec![2]).unwrap(), Scope::Shared),
            ParameterGroup::<f64>::new(
                "tower",
                Tensor::zeros(vec![2]).unwrap(),
                Scope::TaskSpecific(0),
            ),
        ];
        let method = GradNorm::<f64>::new(&groups, 2, 0.0, 0.1).unwrap();
        assert_eq!(method.norm_group(), "mlp");
    }
}
