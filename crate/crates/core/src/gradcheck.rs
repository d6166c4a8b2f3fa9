//! Central finite-difference checks of recorded adjoints.

use crate::cross_scan::{ScanDirection, ScanMode};
use crate::discretize::Discretization;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::scan::{CorrectionForm, ScanKind, ScanVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest and largest accepted difference step.
pub const STEP_RANGE: (f64, f64) = (1e-6, 1e-4);

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
type Sample = fn(&mut Rng) -> Vec<Tensor>;

/// A differentiable primitive known to [`vjp_check`].
#[derive(Clone, Copy)]
pub struct Primitive {
    pub name: &'static str,
    build: Build,
    sample: Sample,
}

impl Primitive {
    pub fn sample(&self, rng: &mut Rng) -> Vec<Tensor> {
        (self.sample)(rng)
    }
}

impl std::fmt::Debug for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Primitive").field("name", &self.name).finish()
    }
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

fn scan_operands(rng: &mut Rng, lead: &[usize], n: usize, e: usize) -> Vec<Tensor> {
    let with = |tail: &[usize]| [lead, tail].concat();
    vec![
        normal(rng, &with(&[e])),
        uniform(rng, &with(&[n, e]), 0.2, 0.95),
        normal(rng, &with(&[n, e])),
        normal(rng, &with(&[n])),
        normal(rng, &[e]),
        uniform(rng, &[n, e], 0.0, 1.0),
    ]
}

fn scan_vars(v: &[Var]) -> ScanVars {
    ScanVars { x: v[0], abar: v[1], bbar: v[2], c: v[3], d: Some(v[4]), rs: Some(v[5]) }
}

/// Every primitive with a recorded adjoint, with a small random instance.
pub fn registry() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "affine",
            build: |t, v| t.affine(v[0], v[1], v[2]),
            sample: |r| vec![normal(r, &[2, 3]), normal(r, &[3, 4]), normal(r, &[4])],
        },
        Primitive {
            name: "bmm",
            build: |t, v| t.bmm(v[0], v[1], true, false),
            sample: |r| vec![normal(r, &[2, 4, 3]), normal(r, &[2, 4, 5])],
        },
        Primitive {
            name: "add",
            build: |t, v| t.add(v[0], v[1]),
            sample: |r| vec![normal(r, &[3, 2]), normal(r, &[3, 2])],
        },
        Primitive {
            name: "mul",
            build: |t, v| t.mul(v[0], v[1]),
            sample: |r| vec![normal(r, &[3, 2]), normal(r, &[3, 2])],
        },
        Primitive {
            name: "scale_shift",
            build: |t, v| Ok(t.scale_shift(v[0], -1.5, 0.25)),
            sample: |r| vec![normal(r, &[4])],
        },
        Primitive {
            name: "broadcast_add",
            build: |t, v| t.broadcast_add(v[0], v[1]),
            sample: |r| vec![normal(r, &[2, 3, 4]), normal(r, &[3, 4])],
        },
        Primitive {
            name: "split_channels",
            build: |t, v| t.split_channels(v[0], 1, 2),
            sample: |r| vec![normal(r, &[2, 2, 4])],
        },
        Primitive {
            name: "reshape",
            build: |t, v| t.reshape(v[0], &[3, 4]),
            sample: |r| vec![normal(r, &[2, 6])],
        },
        Primitive {
            name: "layer_norm",
            build: |t, v| t.layer_norm(v[0], v[1], v[2], crate::ops::DEFAULT_LN_EPS),
            sample: |r| vec![normal(r, &[3, 4]), normal(r, &[4]), normal(r, &[4])],
        },
        Primitive { name: "silu", build: |t, v| Ok(t.silu(v[0])), sample: |r| vec![normal(r, &[2, 5])] },
        Primitive { name: "softplus", build: |t, v| Ok(t.softplus(v[0])), sample: |r| vec![normal(r, &[2, 5])] },
        Primitive { name: "neg_exp", build: |t, v| Ok(t.neg_exp(v[0])), sample: |r| vec![normal(r, &[2, 5])] },
        Primitive {
            name: "softmax",
            build: |t, v| t.softmax(v[0], 1),
            sample: |r| vec![normal(r, &[2, 4, 3])],
        },
        Primitive {
            name: "depthwise_conv",
            build: |t, v| t.depthwise_conv(v[0], v[1], v[2]),
            sample: |r| vec![normal(r, &[1, 3, 4, 2]), normal(r, &[3, 3, 2]), normal(r, &[2])],
        },
        Primitive {
            name: "discretize_a",
            build: |t, v| t.discretize_a(v[0], v[1]),
            sample: |r| vec![uniform(r, &[2, 3], -2.0, -0.1), uniform(r, &[1, 4, 3], 0.01, 1.0)],
        },
        Primitive {
            name: "discretize_b_zoh",
            build: |t, v| t.discretize_b(Discretization::Zoh, v[0], v[1], v[2]),
            sample: |r| {
                vec![uniform(r, &[2, 3], -2.0, -0.1), uniform(r, &[1, 4, 3], 0.01, 1.0), normal(r, &[1, 4, 2])]
            },
        },
        Primitive {
            name: "discretize_b_bernoulli",
            build: |t, v| t.discretize_b(Discretization::Bernoulli, v[0], v[1], v[2]),
            sample: |r| {
                vec![uniform(r, &[2, 3], -2.0, -0.1), uniform(r, &[1, 4, 3], 0.01, 1.0), normal(r, &[1, 4, 2])]
            },
        },
        Primitive {
            name: "scan1d",
            build: |t, v| t.scan(ScanKind::Sequence, scan_vars(v), CorrectionForm::Injection),
            sample: |r| scan_operands(r, &[1, 8], 2, 3),
        },
        Primitive {
            name: "scan1d_gated",
            build: |t, v| t.scan(ScanKind::Sequence, scan_vars(v), CorrectionForm::Gated),
            sample: |r| scan_operands(r, &[2, 6], 2, 2),
        },
        Primitive {
            name: "scan2d",
            build: |t, v| t.scan(ScanKind::Grid, scan_vars(v), CorrectionForm::Injection),
            sample: |r| scan_operands(r, &[1, 4, 4], 2, 2),
        },
        Primitive {
            name: "scan2d_gated",
            build: |t, v| t.scan(ScanKind::Grid, scan_vars(v), CorrectionForm::Gated),
            sample: |r| scan_operands(r, &[2, 3, 2], 2, 2),
        },
        Primitive {
            name: "rel_l2",
            build: |t, v| t.rel_l2(v[0], v[1]),
            sample: |r| vec![normal(r, &[2, 3, 4, 1]), normal(r, &[2, 3, 4, 1])],
        },
        Primitive {
            name: "spatial_gradient",
            build: |t, v| t.spatial_gradient(v[0]),
            sample: |r| vec![normal(r, &[2, 3, 4, 2])],
        },
        Primitive {
            name: "darcy_loss",
            build: |t, v| t.darcy_loss(v[0], v[1], 0.1),
            sample: |r| vec![normal(r, &[2, 4, 3, 1]), normal(r, &[2, 4, 3, 1])],
        },
        Primitive {
            name: "traverse",
            build: |t, v| t.traverse(v[0], ScanDirection::D4, ScanMode::Ssm1d),
            sample: |r| vec![normal(r, &[2, 3, 2, 2])],
        },
        Primitive {
            name: "inverse_traverse",
            build: |t, v| t.inverse_traverse(v[0], ScanDirection::D3, ScanMode::Ssm2d, 3, 2),
            sample: |r| vec![normal(r, &[1, 2, 3, 2])],
        },
    ]
}

pub fn lookup(name: &str) -> Result<Primitive> {
    registry()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Contract(format!("no adjoint registered for primitive `{name}`")))
}

/// Gradient check of a registered primitive on a random instance.
pub fn vjp_check(name: &str, h: f64, rng: &mut Rng) -> Result<f64> {
    let prim = lookup(name)?;
    let inputs = prim.sample(rng);
    gradient_error(&inputs, h, rng, prim.build)
}

/// Components smaller than this are below what central differences resolve
/// to a relative error of `1e-5` in 64-bit arithmetic at `h ≤ 1e-4`.
pub const RESOLUTION_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    /// `max |a − n| / (|a| + |n| + 1e-12)` over every component.
    pub max_rel: f64,
    /// The same maximum over components with `max(|a|, |n|) ≥ RESOLUTION_FLOOR`.
    pub max_rel_resolved: f64,
    /// `max |a − n|` over the remaining components.
    pub max_abs_unresolved: f64,
    pub components: usize,
    pub unresolved: usize,
}

impl GradReport {
    /// Resolved components within `tol` relative error and unresolved ones
    /// within `1e-10` absolute error.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_resolved < tol && self.max_abs_unresolved <= 1e-10
    }
}

/// Largest relative error `|a − n| / (|a| + |n| + 1e-12)` between the taped
/// gradient and central differences; see [`gradient_report`].
pub fn gradient_error<F>(inputs: &[Tensor], h: f64, rng: &mut Rng, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_report(inputs, h, rng, f).map(|r| r.max_rel)
}

/// Compares the taped gradient of `⟨w, f(inputs)⟩` for a random cotangent
/// `w` with central differences, over every component of every input.
///
/// The numeric side uses the fourth-order central stencil
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, whose truncation error
/// is negligible at `h = 1e-4`.
pub fn gradient_report<F>(inputs: &[Tensor], h: f64, rng: &mut Rng, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(STEP_RANGE.0..=STEP_RANGE.1).contains(&h) {
        return Err(Error::Contract(format!("difference step {h} outside [1e-6, 1e-4]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = normal(rng, tape.value(out).shape());
    let grads = tape.backward(out, w.clone())?;

    let objective = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).dot(&w)
    };

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[slot].shape()));
        for i in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                probe[slot].data_mut()[i] = orig + offset;
                objective(&probe)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe[slot].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic.data()[i];
            let diff = (a - numeric).abs();
            let rel = diff / (a.abs() + numeric.abs() + 1e-12);
            if std::env::var_os("GRADCHECK_TRACE").is_some() && rel > 1e-6 {
                eprintln!("input {slot} [{i}]: analytic {a:e} numeric {numeric:e} rel {rel:e}");
            }
            report.components += 1;
            report.max_rel = report.max_rel.max(rel);
            if a.abs().max(numeric.abs()) >= RESOLUTION_FLOOR {
                report.max_rel_resolved = report.max_rel_resolved.max(rel);
            } else {
                report.unresolved += 1;
                report.max_abs_unresolved = report.max_abs_unresolved.max(diff);
            }
        }
    }
    Ok(report)
}

/// [`gradient_report`] over every parameter of `store` plus the `extra`
/// inputs, with `f` reading parameters by name.
pub fn parameter_gradient_report<F>(store: &ParamStore, extra: &[Tensor], h: f64, rng: &mut Rng, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    gradient_report(&inputs, h, rng, |tape, vars| {
        let (param_vars, extra_vars) = vars.split_at(names.len());
        let bound = Bound::from_pairs(names.iter().cloned().zip(param_vars.iter().copied()));
        f(tape, &bound, extra_vars)
    })
}

/// Moves a freshly initialized parameter set to a point where every
/// gradient component is of order one: step-size biases give `Δ ∈ [0.3, 1]`
/// decay rates become `A ∈ [−1.5, −0.3]`, and all other biases and shifts
/// become small random values.
///
/// At the default initialization `Δ ≤ 0.1` makes many gradients smaller than
/// the round-off floor of central differences.
pub fn condition_for_check(store: &mut ParamStore, rng: &mut Rng) {
    for (name, value) in store.iter_mut() {
        if name.ends_with("dt_up.bias") {
            for v in value.data_mut() {
                let dt: f64 = rng.uniform(0.3, 1.0);
                *v = dt + (-(-dt).exp_m1()).ln();
            }
        } else if name.ends_with("a_log") {
            for v in value.data_mut() {
                *v = rng.uniform(0.3f64.ln(), 1.5f64.ln());
            }
        } else if name.ends_with(".bias") || name.ends_with(".shift") {
            for v in value.data_mut() {
                *v = rng.uniform(-0.3, 0.3);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_primitive_passes() {
        let mut rng = Rng::new(2024);
        for prim in registry() {
            let err = vjp_check(prim.name, 1e-5, &mut rng).unwrap();
            assert!(err < 1e-6, "{}: {err:e}", prim.name);
        }
    }

    #[test]
    fn unknown_primitive_is_a_contract_error() {
        let err = vjp_check("fft", 1e-5, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        assert!(matches!(vjp_check("affine", 1e-3, &mut Rng::new(0)), Err(Error::Contract(_))));
    }
}
