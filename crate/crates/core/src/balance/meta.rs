//! MetaBalance: per-group rescaling of auxiliary gradient magnitudes toward
//! the target task's magnitude, gated by a strategy and softened by a relax
//! factor, with EMA-smoothed magnitude estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grads::{l2_norm, GradientSet};
use crate::params::ParameterGroup;
use crate::scalar::Scalar;

use super::{BalanceReport, BalanceRow, Balancer, StepContext};

/// Gate deciding which auxiliary gradients get rescaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Rescale only auxiliaries whose magnitude exceeds the target's
    /// (reins in dominant tasks).
    A,
    /// Rescale only auxiliaries whose magnitude is below the target's
    /// (amplifies weak tasks).
    B,
    /// Both directions.
    C,
    /// Never rescale; the pipeline degenerates to plain joint training.
    Off,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::A => "A",
            Strategy::B => "B",
            Strategy::C => "C",
            Strategy::Off => "Off",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancerConfig {
    pub strategy: Strategy,
    /// Interpolates an auxiliary gradient's norm between its original value
    /// (0) and the target's magnitude (1).
    pub relax_factor: f64,
    /// Decay of the magnitude moving averages.
    pub beta: f64,
    /// Division guard for vanishing auxiliary magnitudes.
    pub epsilon: f64,
    /// Upper clamp on the applied weight when an auxiliary magnitude
    /// underflows.
    pub max_weight: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::C,
            relax_factor: 0.7,
            beta: 0.9,
            epsilon: 1e-12,
            max_weight: 1e6,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.relax_factor) {
            return Err(Error::Config(format!(
                "relax factor {} must lie in [0, 1]",
                self.relax_factor
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta {} must lie in [0, 1)",
                self.beta
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        if self.max_weight <= 0.0 {
            return Err(Error::Config(format!(
                "max weight {} must be positive",
                self.max_weight
            )));
        }
        Ok(())
    }
}

/// EMA gradient magnitudes per shared parameter group: one target value and
/// one value per auxiliary task, all zero-initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeState<F> {
    groups: Vec<String>,
    target: Vec<F>,
    aux: Vec<Vec<F>>,
    num_aux: usize,
    iteration: u64,
}

impl<F: Scalar> MagnitudeState<F> {
    /// Tracks every shared-scope group of `groups`.
    pub fn new(groups: &[ParameterGroup<F>], num_aux: usize) -> Self {
        let shared: Vec<String> = groups
            .iter()
            .filter(|g| g.scope().is_shared())
            .map(|g| g.name().to_string())
            .collect();
        let n = shared.len();
        Self {
            groups: shared,
            target: vec![F::zero(); n],
            aux: vec![vec![F::zero(); num_aux]; n],
            num_aux,
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn num_aux(&self) -> usize {
        self.num_aux
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|s| s.as_str())
    }

    pub fn target_magnitude(&self, group: &str) -> Option<F> {
        self.groups
            .iter()
            .position(|g| g == group)
            .map(|i| self.target[i])
    }

    pub fn aux_magnitude(&self, group: &str, task: usize) -> Option<F> {
        self.groups
            .iter()
            .position(|g| g == group)
            .and_then(|i| self.aux[i].get(task).copied())
    }

    /// Rough in-memory footprint of the EMA state.
    pub fn approx_bytes(&self) -> usize {
        let scalars = self.target.len() + self.aux.iter().map(Vec::len).sum::<usize>();
        let keys: usize = self.groups.iter().map(|g| g.len() + 24).sum();
        scalars * std::mem::size_of::<F>() + keys + std::mem::size_of::<Self>()
    }
}

/// Weight applied to an auxiliary gradient:
/// `w = (m_tar / max(m_aux, epsilon) - 1) * r + 1`, evaluated in the
/// distributed form `r * ratio + (1 - r)` so a tiny magnitude ratio is not
/// cancelled away against the leading 1.
pub fn compute_weight<F: Scalar>(m_tar: F, m_aux: F, relax_factor: F, epsilon: F) -> F {
    let ratio = m_tar / m_aux.max(epsilon);
    relax_factor * ratio + (F::one() - relax_factor)
}

/// Convex combination `beta * previous + (1 - beta) * current_norm`, without
/// bias correction.
pub fn update_ema<F: Scalar>(previous: F, current_norm: F, beta: F) -> F {
    beta * previous + (F::one() - beta) * current_norm
}

/// Whether an auxiliary gradient with EMA magnitude `m_aux` is rescaled.
pub fn strategy_gate<F: Scalar>(strategy: Strategy, m_tar: F, m_aux: F) -> bool {
    match strategy {
        Strategy::A => m_aux > m_tar,
        Strategy::B => m_aux < m_tar,
        Strategy::C => m_aux != m_tar,
        Strategy::Off => false,
    }
}

/// One balancing iteration. For every shared group the magnitude EMAs are
/// updated first (for every task, unconditionally), then each auxiliary
/// gradient passing the strategy gate is rescaled by the weight computed
/// from the updated EMAs. Task-specific groups and the target gradient are
/// never touched.
pub fn balance_step<F: Scalar>(
    target: &GradientSet<F>,
    aux: &mut [GradientSet<F>],
    state: &mut MagnitudeState<F>,
    config: &BalancerConfig,
) -> Result<BalanceReport<F>> {
    config.validate()?;
    if aux.len() != state.num_aux {
        return Err(Error::Contract(format!(
            "state tracks {} auxiliary tasks but {} were given",
            state.num_aux,
            aux.len()
        )));
    }
    for a in aux.iter() {
        if !target.same_keys(a) {
            return Err(Error::Contract(format!(
                "gradient set `{}` has different group keys than the target",
                a.task()
            )));
        }
    }
    for g in &state.groups {
        if target.get(g).is_none() {
            return Err(Error::Contract(format!(
                "state group `{g}` missing from the gradient sets"
            )));
        }
    }

    state.iteration += 1;
    let beta = F::real(config.beta);
    let relax = F::real(config.relax_factor);
    let epsilon = F::real(config.epsilon);
    let max_weight = F::real(config.max_weight);
    let mut report = BalanceReport::empty();

    for (gi, gname) in state.groups.iter().enumerate() {
        let target_norm = l2_norm(target.get(gname).expect("checked above"));
        if !target_norm.is_finite() {
            return Err(Error::Training(format!(
                "non-finite target gradient norm for group `{gname}`"
            )));
        }
        state.target[gi] = update_ema(state.target[gi], target_norm, beta);
        let m_tar = state.target[gi];

        for (ai, a) in aux.iter_mut().enumerate() {
            let pre_norm = l2_norm(a.get(gname).expect("keys checked"));
            if !pre_norm.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient norm for group `{gname}`, task `{}`",
                    a.task()
                )));
            }
            state.aux[gi][ai] = update_ema(state.aux[gi][ai], pre_norm, beta);
            let m_aux = state.aux[gi][ai];

            let gated = strategy_gate(config.strategy, m_tar, m_aux);
            let mut weight = F::one();
            if gated {
                weight = compute_weight(m_tar, m_aux, relax, epsilon).min(max_weight);
                if weight != F::one() {
                    a.scale_group(gname, weight)?;
                }
            }
            let post_norm = l2_norm(a.get(gname).expect("keys checked"));
            report.rows.push(BalanceRow {
                iteration: state.iteration,
                group: gname.clone(),
                task: a.task().to_string(),
                pre_norm,
                post_norm,
                weight,
                gated,
            });
        }
    }
    Ok(report)
}

/// MetaBalance as a reusable balancing method owning its EMA state.
#[derive(Clone, Debug)]
pub struct MetaBalance<F> {
    config: BalancerConfig,
    state: MagnitudeState<F>,
}

impl<F: Scalar> MetaBalance<F> {
    pub fn new(
        config: BalancerConfig,
        groups: &[ParameterGroup<F>],
        num_aux: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: MagnitudeState::new(groups, num_aux),
        })
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.config
    }

    pub fn state(&self) -> &MagnitudeState<F> {
        &self.state
    }
}

impl<F: Scalar> Balancer<F> for MetaBalance<F> {
    fn name(&self) -> &'static str {
        "metabalance"
    }

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        _ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>> {
        balance_step(target, aux, &mut self.state, &self.config)
    }

    fn state_bytes(&self) -> usize {
        self.state.approx_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Scope;
    use crate::tensor::Tensor;

    fn shared_group(name: &str, len: usize) -> ParameterGroup<f64> {
        ParameterGroup::new(name, Tensor::zeros(vec![len]).unwrap(), Scope::Shared)
    }

    fn tower_group(name: &str, len: usize, task: usize) -> ParameterGroup<f64> {
        ParameterGroup::new(
            name,
            Tensor::zeros(vec![len]).unwrap(),
            Scope::TaskSpecific(task),
        )
    }

    fn set(task: &str, vals: &[(&str, Vec<f64>)]) -> GradientSet<f64> {
        let mut s = GradientSet::new(task);
        for (name, v) in vals {
            s.insert(*name, v.clone());
        }
        s
    }

    fn config(strategy: Strategy, r: f64, beta: f64) -> BalancerConfig {
        BalancerConfig {
            strategy,
            relax_factor: r,
            beta,
            ..BalancerConfig::default()
        }
    }

    #[test]
    fn weight_examples_hold() {
        assert_eq!(compute_weight(5.0_f64, 5.0, 0.7, 1e-12), 1.0);
        assert!((compute_weight(2.0_f64, 5.0, 1.0, 1e-12) - 0.4).abs() < 1e-15);
        // Hand evaluation: (0.4 - 1) * 0.5 + 1 = 0.7
        assert!((compute_weight(2.0_f64, 5.0, 0.5, 1e-12) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn weight_guard_handles_zero_aux_magnitude() {
        let w = compute_weight(1.0_f64, 0.0, 1.0, 1e-12);
        assert!(w.is_finite() && w > 0.0);
    }

    #[test]
    fn ema_examples_hold() {
        assert!((update_ema(0.0_f64, 1.0, 0.9) - 0.1).abs() < 1e-15);
        // Two applications of the recurrence by hand: 0.9*0.1 + 0.1*1.0
        assert!((update_ema(0.1_f64, 1.0, 0.9) - 0.19).abs() < 1e-15);
        for &(x, beta) in &[(0.0_f64, 0.5), (2.5, 0.9), (7.0, 0.0)] {
            assert_eq!(update_ema(x, x, beta), x);
        }
    }

    #[test]
    fn ema_matches_closed_form_for_constant_input() {
        let (g, beta) = (1.75_f64, 0.9_f64);
        let mut m = 0.0;
        for t in 1..=1000 {
            m = update_ema(m, g, beta);
            let expected = g * (1.0 - beta.powi(t));
            assert!(
                (m - expected).abs() <= 1e-12,
                "t={t}: {m} vs {expected}"
            );
        }
    }

    #[test]
    fn gate_examples_hold() {
        assert!(strategy_gate(Strategy::A, 1.0, 2.0));
        assert!(!strategy_gate(Strategy::B, 1.0, 2.0));
        assert!(!strategy_gate(Strategy::C, 1.0, 1.0));
        assert!(!strategy_gate(Strategy::Off, 1.0, 2.0));
    }

    #[test]
    fn exact_match_case_scales_aux_norm_to_target() {
        let groups = [shared_group("w", 2)];
        let mut state = MagnitudeState::new(&groups, 1);
        let target = set("target", &[("w", vec![2.0, 0.0])]);
        let mut aux = [set("aux1", &[("w", vec![0.0, 5.0])])];
        let cfg = config(Strategy::C, 1.0, 0.0);
        let report = balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
        let balanced = aux[0].get("w").unwrap();
        assert!((l2_norm(balanced) - 2.0).abs() < 1e-12);
        // Direction unchanged.
        assert_eq!(balanced[0], 0.0);
        assert!(balanced[1] > 0.0);
        assert!(report.rows[0].gated);
    }

    #[test]
    fn relax_factor_zero_passes_gradients_through_bit_exactly() {
        let groups = [shared_group("w", 3)];
        let mut state = MagnitudeState::new(&groups, 1);
        let target = set("target", &[("w", vec![1.0, 2.0, 3.0])]);
        let original = vec![0.1, -0.7, std::f64::consts::PI];
        let mut aux = [set("aux1", &[("w", original.clone())])];
        let cfg = config(Strategy::C, 0.0, 0.0);
        balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
        for (a, b) in aux[0].get("w").unwrap().iter().zip(&original) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn interpolated_norm_matches_hand_value() {
        // (1 - 0.5) * 5 + 0.5 * 2 = 3.5
        let groups = [shared_group("w", 1)];
        let mut state = MagnitudeState::new(&groups, 1);
        let target = set("target", &[("w", vec![2.0])]);
        let mut aux = [set("aux1", &[("w", vec![5.0])])];
        let cfg = config(Strategy::C, 0.5, 0.0);
        balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
        assert!((aux[0].get("w").unwrap()[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn task_specific_groups_are_never_touched() {
        let groups = [shared_group("w", 2), tower_group("tower", 2, 1)];
        let mut state = MagnitudeState::new(&groups, 1);
        let target = set("target", &[("w", vec![1.0, 0.0]), ("tower", vec![0.0, 0.0])]);
        let mut aux = [set(
            "aux1",
            &[("w", vec![10.0, 0.0]), ("tower", vec![4.0, -3.0])],
        )];
        let cfg = config(Strategy::C, 1.0, 0.0);
        balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
        assert_eq!(aux[0].get("tower").unwrap(), &[4.0, -3.0]);
        assert!((l2_norm(aux[0].get("w").unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_uses_updated_emas_not_previous_ones() {
        // With beta = 0.5 and a zero-norm target step, the pre-update EMA
        // comparison (0 < 0.5) and post-update comparison (5 > 0.25)
        // disagree under strategy A; the scaling must follow the update.
        let groups = [shared_group("w", 1)];
        let mut state = MagnitudeState::new(&groups, 1);
        let cfg = config(Strategy::A, 1.0, 0.5);

        // Warm the state: target norm 1.0, aux norm 0.0.
        let target = set("target", &[("w", vec![1.0])]);
        let mut aux = [set("aux1", &[("w", vec![0.0])])];
        balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
        assert_eq!(state.target_magnitude("w").unwrap(), 0.5);
        assert_eq!(state.aux_magnitude("w", 0).unwrap(), 0.0);

        // Now target norm 0, aux norm 10: updated EMAs are 0.25 and 5.0.
        let target = set("target", &[("w", vec![0.0])]);
        let mut aux = [set("aux1", &[("w", vec![10.0])])];
        let report = balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
        assert!(report.rows[0].gated, "gate must see the updated EMAs");
        let expected_w = compute_weight(0.25, 5.0, 1.0, 1e-12);
        assert!((report.rows[0].weight - expected_w).abs() < 1e-15);
    }

    #[test]
    fn emas_update_even_when_strategy_is_off() {
        let groups = [shared_group("w", 1)];
        let mut state = MagnitudeState::new(&groups, 1);
        let target = set("target", &[("w", vec![1.0])]);
        let mut aux = [set("aux1", &[("w", vec![2.0])])];
        let cfg = config(Strategy::Off, 0.7, 0.9);
        balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
        assert!((state.target_magnitude("w").unwrap() - 0.1).abs() < 1e-15);
        assert!((state.aux_magnitude("w", 0).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(aux[0].get("w").unwrap(), &[2.0]);
    }

    #[test]
    fn equal_relax_factor_does_not_imply_equal_weights() {
        let groups = [shared_group("w", 1)];
        let mut state = MagnitudeState::new(&groups, 2);
        let target = set("target", &[("w", vec![2.0])]);
        let mut aux = [
            set("aux1", &[("w", vec![5.0])]),
            set("aux2", &[("w", vec![0.5])]),
        ];
        let cfg = config(Strategy::C, 0.5, 0.0);
        let report = balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
        assert!((report.rows[0].weight - report.rows[1].weight).abs() > 0.1);
    }

    #[test]
    fn report_rows_satisfy_the_post_equals_weight_times_pre_invariant() {
        let groups = [shared_group("w", 4), shared_group("v", 3)];
        let mut state = MagnitudeState::new(&groups, 2);
        let target = set(
            "target",
            &[("w", vec![0.5, -1.0, 2.0, 0.0]), ("v", vec![1.0, 1.0, 1.0])],
        );
        let mut aux = [
            set("aux1", &[("w", vec![5.0, 1.0, -2.0, 3.0]), ("v", vec![0.1, 0.0, 0.0])]),
            set("aux2", &[("w", vec![0.0, 0.0, 0.0, 0.0]), ("v", vec![9.0, -9.0, 9.0])]),
        ];
        let cfg = config(Strategy::C, 0.7, 0.9);
        for _ in 0..3 {
            let report = balance_step(&target, &mut aux, &mut state, &cfg).unwrap();
            for row in &report.rows {
                let expected = row.weight.abs() * row.pre_norm;
                let scale = expected.abs().max(1e-12);
                assert!(
                    (row.post_norm - expected).abs() / scale < 1e-9,
                    "row {row:?}"
                );
            }
        }
    }

    #[test]
    fn key_mismatch_and_aux_count_are_contract_violations() {
        let groups = [shared_group("w", 1)];
        let mut state = MagnitudeState::new(&groups, 1);
        let target = set("target", &[("w", vec![1.0])]);
        let mut aux = [set("aux1", &[("v", vec![1.0])])];
        let cfg = BalancerConfig::default();
        assert_eq!(
            balance_step(&target, &mut aux, &mut state, &cfg)
                .unwrap_err()
                .category(),
            "contract"
        );
        let mut too_many = [
            set("aux1", &[("w", vec![1.0])]),
            set("aux2", &[("w", vec![1.0])]),
        ];
        assert_eq!(
            balance_step(&target, &mut too_many, &mut state, &cfg)
                .unwrap_err()
                .category(),
            "contract"
        );
    }

    #[test]
    fn non_finite_norm_is_a_training_fault_naming_the_task() {
        let groups = [shared_group("w", 1)];
        let mut state = MagnitudeState::new(&groups, 1);
        let target = set("target", &[("w", vec![1.0])]);
        let mut aux = [set("aux1", &[("w", vec![f64::NAN])])];
        let err = balance_step(&target, &mut aux, &mut state, &BalancerConfig::default())
            .unwrap_err();
        assert_eq!(err.category(), "training");
        assert!(err.to_string().contains("aux1"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = BalancerConfig::default();
        cfg.relax_factor = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = BalancerConfig::default();
        cfg.beta = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = BalancerConfig::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn state_footprint_is_a_handful_of_scalars_per_group() {
        let groups: Vec<_> = (0..32).map(|i| shared_group(&format!("g{i}"), 100)).collect();
        let state = MagnitudeState::<f64>::new(&groups, 3);
        assert!(state.approx_bytes() < 1_000_000);
    }

    #[test]
    fn report_csv_has_one_line_per_row() {
        let groups = [shared_group("w", 1)];
        let mut state = MagnitudeState::new(&groups, 1);
        let target = set("target", &[("w", vec![1.0])]);
        let mut aux = [set("aux1", &[("w", vec![3.0])])];
        let report =
            balance_step(&target, &mut aux, &mut state, &BalancerConfig::default()).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + report.rows.len());
        assert!(text.starts_with("iteration,group,task,"));
    }
}
