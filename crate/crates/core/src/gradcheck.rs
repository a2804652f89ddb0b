//! Central finite-difference oracles for checking tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to audit.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::Session;
use crate::registry::ParameterRegistry;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Denominator floor for relative errors of vanishing gradients.
pub const REL_FLOOR: Scalar = 1e-6;

pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Max relative error between tape gradients and central differences of a
/// scalar function of `inputs`.
pub fn check_tape_fn(
    inputs: &[Tensor],
    h: Scalar,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Scalar> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<Scalar>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| alloc::vec![0.0; t.numel()], <[_]>::to_vec))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<Scalar> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: Scalar = 0.0;
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grads[j], numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Worst relative error per checked parameter, in name order.
    pub per_param: Vec<(String, Scalar)>,
}

impl GradReport {
    pub fn max_error(&self) -> Scalar {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, Scalar::max)
    }

    pub fn worst(&self) -> Option<&(String, Scalar)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(core::cmp::Ordering::Equal))
    }
}

/// Checks every trainable registry entry touched by `f` against central
/// differences. `f` must be deterministic.
pub fn check_registry_fn(
    registry: &ParameterRegistry,
    h: Scalar,
    f: impl Fn(&mut Session) -> Result<Var>,
) -> Result<GradReport> {
    let (analytic, names) = {
        let mut s = Session::new(registry);
        let loss = f(&mut s)?;
        s.backward(loss)?;
        let names: Vec<String> = s
            .bound_names()
            .filter(|n| registry.get(n).map(|p| !p.frozen).unwrap_or(false))
            .map(String::from)
            .collect();
        (s.gradients(), names)
    };
    let eval = |reg: &ParameterRegistry| -> Result<Scalar> {
        let mut s = Session::new(reg);
        let loss = f(&mut s)?;
        Ok(s.value(loss).item())
    };

    let mut probe = registry.clone();
    let mut report = GradReport::default();
    for name in names {
        let grad = analytic
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| alloc::vec![0.0; registry.value(&name).map(Tensor::numel).unwrap_or(0)]);
        let mut worst: Scalar = 0.0;
        for j in 0..grad.len() {
            let orig = registry.value(&name)?.data()[j];
            probe.get_mut(&name)?.value.data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[j] = orig;
            worst = worst.max(relative_error(grad[j], (up - down) / (2.0 * h)));
        }
        report.per_param.push((name, worst));
    }
    Ok(report)
}
