//! Central finite-difference validation of the backward rules.

use crate::error::{Error, Result};
use crate::params::ParameterGroup;
use crate::scalar::Scalar;

use super::{NodeId, Tape};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum accepted relative error per entry.
    pub tolerance: f64,
    /// Denominator floor: entries where both gradients are below this scale
    /// are compared against the floor instead, so finite-difference noise on
    /// near-zero gradients does not dominate.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: Vec<GradCheckEntry>,
    /// Set when a forward pass produced non-finite values.
    pub non_finite: bool,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.failures.is_empty()
    }
}

/// Compares analytic gradients against central finite differences for every
/// entry of every parameter group. `build` must deterministically construct
/// the same graph (including any dropout masks) from the given parameters
/// and return its scalar loss node.
pub fn grad_check<F, B>(
    build: &B,
    params: &[ParameterGroup<F>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Scalar,
    B: Fn(&mut Tape<F>, &[ParameterGroup<F>]) -> Result<NodeId>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failures: Vec::new(),
        non_finite: false,
        tolerance: opts.tolerance,
    };

    let analytic = {
        let mut tape = Tape::new();
        let loss = match build(&mut tape, params) {
            Ok(l) => l,
            Err(Error::Training(_)) => {
                report.non_finite = true;
                return Ok(report);
            }
            Err(e) => return Err(e),
        };
        if tape.data(loss).len() != 1 {
            return Err(Error::Contract(
                "grad_check: graph must produce a scalar loss".into(),
            ));
        }
        tape.backward(loss, "grad_check")?
    };

    let mut work = params.to_vec();
    for (gi, group) in params.iter().enumerate() {
        let grads = analytic.get(group.name()).ok_or_else(|| {
            Error::Contract(format!(
                "grad_check: group `{}` was not registered by the builder",
                group.name()
            ))
        })?;
        for k in 0..group.len() {
            let base = group.tensor().data()[k].as_f64();
            let probe = |v: f64, work: &mut [ParameterGroup<F>]| -> Result<Option<f64>> {
                work[gi].tensor_mut().data_mut()[k] = F::real(v);
                let mut tape = Tape::new();
                let out = match build(&mut tape, work) {
                    Ok(loss) => {
                        let l = tape.scalar_value(loss)?;
                        if l.is_finite() {
                            Some(l.as_f64())
                        } else {
                            None
                        }
                    }
                    Err(Error::Training(_)) => None,
                    Err(e) => return Err(e),
                };
                work[gi].tensor_mut().data_mut()[k] = F::real(base);
                Ok(out)
            };
            let plus = probe(base + opts.step, &mut work)?;
            let minus = probe(base - opts.step, &mut work)?;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                report.non_finite = true;
                return Ok(report);
            };
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grads[k].as_f64();
            let scale = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / scale;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > opts.tolerance {
                report.failures.push(GradCheckEntry {
                    group: group.name().to_string(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
