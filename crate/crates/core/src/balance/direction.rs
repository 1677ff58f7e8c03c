//! Direction-based auxiliary adapters: similarity masking, projection onto
//! the target's normal plane, and online auxiliary-loss weighting.

use crate::error::{Error, Result};
use crate::grads::{cosine, dot, l2_norm, GradientSet};
use crate::params::ParameterGroup;
use crate::scalar::Scalar;

use super::{BalanceReport, BalanceRow, Balancer, StepContext};

fn check_keys<F: Scalar>(target: &GradientSet<F>, aux: &GradientSet<F>) -> Result<()> {
    if !target.same_keys(aux) {
        return Err(Error::Contract(format!(
            "gradient set `{}` has different group keys than the target",
            aux.task()
        )));
    }
    Ok(())
}

/// Zeroes any auxiliary group gradient whose cosine with the target gradient
/// is negative. Zero-norm pairs count as cosine 0 and are kept.
pub fn grad_similarity_filter<F: Scalar>(
    target: &GradientSet<F>,
    aux: &mut GradientSet<F>,
) -> Result<()> {
    check_keys(target, aux)?;
    for (name, grad) in aux.iter_mut() {
        let tg = target.get(name).expect("keys checked");
        if cosine(tg, grad) < F::zero() {
            grad.iter_mut().for_each(|v| *v = F::zero());
        }
    }
    Ok(())
}

/// Projects each conflicting auxiliary group gradient onto the normal plane
/// of the target gradient: when `dot(aux, target) < 0`,
/// `aux <- aux - (dot / ||target||^2) * target`. A zero-norm target passes
/// the auxiliary through unchanged.
pub fn grad_surgery_project<F: Scalar>(
    target: &GradientSet<F>,
    aux: &mut GradientSet<F>,
) -> Result<()> {
    check_keys(target, aux)?;
    for (name, grad) in aux.iter_mut() {
        let tg = target.get(name).expect("keys checked");
        let d = dot(grad, tg);
        if d >= F::zero() {
            continue;
        }
        let norm_sq = dot(tg, tg);
        if norm_sq == F::zero() {
            continue;
        }
        let coeff = d / norm_sq;
        for (g, &t) in grad.iter_mut().zip(tg) {
            *g = *g - coeff * t;
        }
    }
    Ok(())
}

fn apply_per_task<F: Scalar>(
    target: &GradientSet<F>,
    aux: &mut [GradientSet<F>],
    iteration: u64,
    report: &mut BalanceReport<F>,
    apply: impl Fn(&GradientSet<F>, &mut GradientSet<F>) -> Result<()>,
) -> Result<()> {
    for a in aux.iter_mut() {
        let pre: Vec<(String, F)> = a
            .iter()
            .map(|(name, g)| (name.to_string(), l2_norm(g)))
            .collect();
        apply(target, a)?;
        for (name, pre_norm) in pre {
            let post_norm = a.norm_of(&name).expect("group still present");
            let weight = if pre_norm > F::zero() {
                post_norm / pre_norm
            } else {
                F::one()
            };
            report.rows.push(BalanceRow {
                iteration,
                group: name,
                task: a.task().to_string(),
                pre_norm,
                post_norm,
                weight,
                gated: post_norm != pre_norm,
            });
        }
    }
    Ok(())
}

/// Cosine-gated masking as a balancing method.
#[derive(Clone, Debug, Default)]
pub struct GradSimilarity;

impl<F: Scalar> Balancer<F> for GradSimilarity {
    fn name(&self) -> &'static str {
        "grad-similarity"
    }

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>> {
        let mut report = BalanceReport::empty();
        apply_per_task(target, aux, ctx.iteration, &mut report, grad_similarity_filter)?;
        Ok(report)
    }
}

/// Conflict projection as a balancing method.
#[derive(Clone, Debug, Default)]
pub struct GradSurgery;

impl<F: Scalar> Balancer<F> for GradSurgery {
    fn name(&self) -> &'static str {
        "grad-surgery"
    }

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>> {
        let mut report = BalanceReport::empty();
        apply_per_task(target, aux, ctx.iteration, &mut report, grad_surgery_project)?;
        Ok(report)
    }
}

/// Online auxiliary-loss weighting: each auxiliary task carries a weight
/// adjusted every `window` iterations by the accumulated inner products
/// between the target gradient and that auxiliary gradient over the
/// shared-scope parameters.
#[derive(Clone, Debug)]
pub struct OlAux<F> {
    weights: Vec<F>,
    accumulated: Vec<F>,
    pending: usize,
    weight_lr: F,
    window: usize,
    shared_groups: Vec<String>,
}

impl<F: Scalar> OlAux<F> {
    pub fn new(
        groups: &[ParameterGroup<F>],
        num_aux: usize,
        weight_lr: f64,
        window: usize,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("ol-aux window must be positive".into()));
        }
        Ok(Self {
            weights: vec![F::one(); num_aux],
            accumulated: vec![F::zero(); num_aux],
            pending: 0,
            weight_lr: F::real(weight_lr),
            window,
            shared_groups: groups
                .iter()
                .filter(|g| g.scope().is_shared())
                .map(|g| g.name().to_string())
                .collect(),
        })
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    /// Applies the accumulated window of dot products:
    /// `w_i <- w_i + lr * sum(dots_i)`, then clears the buffer.
    pub fn apply_window(&mut self) {
        for (w, acc) in self.weights.iter_mut().zip(self.accumulated.iter_mut()) {
            *w = *w + self.weight_lr * *acc;
            *acc = F::zero();
        }
        self.pending = 0;
    }

    /// Records one step's dot products (one entry per auxiliary task).
    pub fn record(&mut self, dots: &[F]) -> Result<()> {
        if dots.len() != self.weights.len() {
            return Err(Error::Contract(format!(
                "ol-aux tracks {} tasks but {} dot products were given",
                self.weights.len(),
                dots.len()
            )));
        }
        for (acc, &d) in self.accumulated.iter_mut().zip(dots) {
            *acc += d;
        }
        self.pending += 1;
        Ok(())
    }

    fn shared_dot(&self, target: &GradientSet<F>, aux: &GradientSet<F>) -> F {
        let mut total = F::zero();
        for g in &self.shared_groups {
            if let (Some(t), Some(a)) = (target.get(g), aux.get(g)) {
                total += dot(t, a);
            }
        }
        total
    }
}

impl<F: Scalar> Balancer<F> for OlAux<F> {
    fn name(&self) -> &'static str {
        "ol-aux"
    }

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>> {
        if aux.len() != self.weights.len() {
            return Err(Error::Contract(format!(
                "ol-aux tracks {} tasks but {} were given",
                self.weights.len(),
                aux.len()
            )));
        }
        let mut report = BalanceReport::empty();
        // Dot products are taken on the incoming (unweighted) gradients.
        let dots: Vec<F> = aux.iter().map(|a| self.shared_dot(target, a)).collect();
        for (ai, a) in aux.iter_mut().enumerate() {
            let w = self.weights[ai];
            let names: Vec<String> = a.group_names().map(|s| s.to_string()).collect();
            for name in names {
                let pre_norm = a.norm_of(&name).expect("group present");
                if w != F::one() {
                    a.scale_group(&name, w)?;
                }
                report.rows.push(BalanceRow {
                    iteration: ctx.iteration,
                    group: name.clone(),
                    task: a.task().to_string(),
                    pre_norm,
                    post_norm: a.norm_of(&name).expect("group present"),
                    weight: w,
                    gated: w != F::one(),
                });
            }
        }
        self.record(&dots)?;
        if self.pending >= self.window {
            self.apply_window();
        }
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
    fn similarity_keeps_orthogonal_and_positive_zeroes_antiparallel() {
        let target = set("target", &[("w", vec![1.0, 0.0])]);

        let mut orth = set("aux", &[("w", vec![0.0, 1.0])]);
        grad_similarity_filter(&target, &mut orth).unwrap();
        assert_eq!(orth.get("w").unwrap(), &[0.0, 1.0]);

        let mut anti = set("aux", &[("w", vec![-1.0, 0.0])]);
        grad_similarity_filter(&target, &mut anti).unwrap();
        assert_eq!(anti.get("w").unwrap(), &[0.0, 0.0]);

        let mut pos = set("aux", &[("w", vec![1.0, 5.0])]);
        grad_similarity_filter(&target, &mut pos).unwrap();
        assert_eq!(pos.get("w").unwrap(), &[1.0, 5.0]);
    }

    #[test]
    fn surgery_projects_conflicting_gradient() {
        // dot = -1, ||target||^2 = 1: projection leaves [0, 1].
        let target = set("target", &[("w", vec![1.0, 0.0])]);
        let mut aux = set("aux", &[("w", vec![-1.0, 1.0])]);
        grad_surgery_project(&target, &mut aux).unwrap();
        let g = aux.get("w").unwrap();
        assert!((g[0] - 0.0).abs() < 1e-15);
        assert!((g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn surgery_zeroes_antiparallel_and_keeps_aligned() {
        let target = set("target", &[("w", vec![2.0, -1.0])]);
        let mut anti = set("aux", &[("w", vec![-2.0, 1.0])]);
        grad_surgery_project(&target, &mut anti).unwrap();
        for &v in anti.get("w").unwrap() {
            assert!(v.abs() < 1e-15);
        }

        let mut aligned = set("aux", &[("w", vec![4.0, -2.0])]);
        grad_surgery_project(&target, &mut aligned).unwrap();
        assert_eq!(aligned.get("w").unwrap(), &[4.0, -2.0]);
    }

    #[test]
    fn surgery_passes_through_on_zero_target() {
        let target = set("target", &[("w", vec![0.0, 0.0])]);
        let mut aux = set("aux", &[("w", vec![-1.0, 1.0])]);
        grad_surgery_project(&target, &mut aux).unwrap();
        assert_eq!(aux.get("w").unwrap(), &[-1.0, 1.0]);
    }

    fn shared(name: &str) -> ParameterGroup<f64> {
        ParameterGroup::new(name, Tensor::zeros(vec![2]).unwrap(), Scope::Shared)
    }

    #[test]
    fn olaux_single_step_window_example() {
        // window 1, dot 0.5, lr 0.1: weight moves from 1 to 1.05.
        let groups = [shared("w")];
        let mut method = OlAux::new(&groups, 1, 0.1, 1).unwrap();
        let mut target = set("target", &[("w", vec![1.0, 0.0])]);
        let mut aux = [set("aux1", &[("w", vec![0.5, 0.0])])];
        let ctx = StepContext {
            iteration: 1,
            losses: &[0.0, 0.0],
        };
        method.balance(&mut target, &mut aux, &ctx).unwrap();
        assert!((method.weights()[0] - 1.05).abs() < 1e-15);
        // The step itself used the pre-update weight 1.
        assert_eq!(aux[0].get("w").unwrap(), &[0.5, 0.0]);
    }

    #[test]
    fn olaux_zero_dots_leave_weights_and_negative_dots_reduce() {
        let groups = [shared("w")];
        let mut method = OlAux::new(&groups, 2, 0.1, 1).unwrap();
        let mut target = set("target", &[("w", vec![1.0, 0.0])]);
        let mut aux = [
            set("aux1", &[("w", vec![0.0, 1.0])]),
            set("aux2", &[("w", vec![-2.0, 0.0])]),
        ];
        let ctx = StepContext {
            iteration: 1,
            losses: &[0.0, 0.0, 0.0],
        };
        method.balance(&mut target, &mut aux, &ctx).unwrap();
        assert_eq!(method.weights()[0], 1.0);
        assert!(method.weights()[1] < 1.0);
    }

    #[test]
    fn olaux_accumulates_over_the_window_before_updating() {
        let groups = [shared("w")];
        let mut method = OlAux::new(&groups, 1, 0.1, 3).unwrap();
        let mut target = set("target", &[("w", vec![1.0, 0.0])]);
        let ctx = StepContext {
            iteration: 1,
            losses: &[0.0, 0.0],
        };
        for _ in 0..2 {
            let mut aux = [set("aux1", &[("w", vec![1.0, 0.0])])];
            method.balance(&mut target, &mut aux, &ctx).unwrap();
            assert_eq!(method.weights()[0], 1.0);
        }
        let mut aux = [set("aux1", &[("w", vec![1.0, 0.0])])];
        method.balance(&mut target, &mut aux, &ctx).unwrap();
        assert!((method.weights()[0] - 1.3).abs() < 1e-12);
    }
}
