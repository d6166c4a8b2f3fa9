//! Continuous-to-discrete conversion of selective state-space coefficients.
//!
//! Layouts: `A` is `(N, E)`; step sizes `delta` are `(.., E)`; input
//! projections `B` are `(.., N)`. Discrete coefficients come out as
//! `(.., N, E)` with the channel axis fastest.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Below this `|ΔA|` the Bernoulli rule switches to its `Δ·B` limit.
pub const BERNOULLI_LIMIT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `Ā = exp(ΔA)`, `B̄ = Δ·B`.
    #[default]
    Zoh,
    /// `Ā = exp(ΔA)`, `B̄ = (exp(ΔA) − 1)/A · B`.
    Bernoulli,
}

impl FromStr for Discretization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zoh" => Ok(Self::Zoh),
            "bernoulli" => Ok(Self::Bernoulli),
            other => Err(Error::Config(format!("unknown discretization `{other}` (expected zoh|bernoulli)"))),
        }
    }
}

impl fmt::Display for Discretization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zoh => "zoh",
            Self::Bernoulli => "bernoulli",
        })
    }
}

/// `(positions, N, E)` after validating the three operands.
fn dims(a: &Tensor, delta: &Tensor, b_in: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let [n, e] = a.shape()[..] else {
        return Err(shape_err!("A must be (N, E), got {:?}", a.shape()));
    };
    if delta.channels() != e || delta.rank() < 2 {
        return Err(shape_err!("delta has {} channels, A has {}", delta.channels(), e));
    }
    let positions = delta.rows();
    if let Some(b_in) = b_in {
        if b_in.channels() != n || b_in.rows() != positions || b_in.shape()[..b_in.rank() - 1] != delta.shape()[..delta.rank() - 1] {
            return Err(shape_err!("B {:?} does not match delta {:?} with N = {}", b_in.shape(), delta.shape(), n));
        }
    }
    if !delta.is_finite() {
        return Err(Error::Numeric("non-finite step size delta".into()));
    }
    Ok((positions, n, e))
}

fn out_shape(delta: &Tensor, n: usize) -> Vec<usize> {
    let mut shape = delta.shape().to_vec();
    shape.insert(shape.len() - 1, n);
    shape
}

/// `Ā[.., s, e] = exp(Δ[.., e] · A[s, e])`.
pub fn discretize_a(a: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let (positions, n, e) = dims(a, delta, None)?;
    let mut out = Vec::with_capacity(positions * n * e);
    for drow in delta.data().chunks_exact(e) {
        for arow in a.data().chunks_exact(e) {
            out.extend(drow.iter().zip(arow).map(|(d, a)| (d * a).exp()));
        }
    }
    Tensor::new(&out_shape(delta, n), out)
}

/// Zero-order-hold injection `B̄[.., s, e] = Δ[.., e] · B[.., s]`.
pub fn discretize_b_zoh(delta: &Tensor, b_in: &Tensor) -> Result<Tensor> {
    let n = b_in.channels();
    let e = delta.channels();
    dims(&Tensor::zeros(&[n, e]), delta, Some(b_in))?;
    let mut out = Vec::with_capacity(delta.rows() * n * e);
    for (drow, brow) in delta.data().chunks_exact(e).zip(b_in.data().chunks_exact(n)) {
        for &b in brow {
            out.extend(drow.iter().map(|d| d * b));
        }
    }
    Tensor::new(&out_shape(delta, n), out)
}

fn bernoulli_factor(d: f64, a: f64) -> f64 {
    let x = d * a;
    if x.abs() <= BERNOULLI_LIMIT {
        d
    } else {
        x.exp_m1() / a
    }
}

/// `(∂φ/∂Δ, ∂φ/∂A)` for `φ(Δ, A) = expm1(ΔA)/A`.
fn bernoulli_partials(d: f64, a: f64) -> (f64, f64) {
    let x = d * a;
    if x.abs() <= BERNOULLI_LIMIT {
        (1.0, 0.5 * d * d)
    } else {
        let ex = x.exp();
        (ex, (x * ex - x.exp_m1()) / (a * a))
    }
}

/// Bernoulli-polynomial injection `B̄ = (exp(ΔA) − 1)/A · B`.
pub fn discretize_b_bernoulli(a: &Tensor, delta: &Tensor, b_in: &Tensor) -> Result<Tensor> {
    let (positions, n, e) = dims(a, delta, Some(b_in))?;
    let mut out = Vec::with_capacity(positions * n * e);
    for (drow, brow) in delta.data().chunks_exact(e).zip(b_in.data().chunks_exact(n)) {
        for (arow, &b) in a.data().chunks_exact(e).zip(brow) {
            out.extend(drow.iter().zip(arow).map(|(&d, &a)| bernoulli_factor(d, a) * b));
        }
    }
    Tensor::new(&out_shape(delta, n), out)
}

/// Zero-order-hold discretization, returning `(Ā, B̄)`.
pub fn discretize_zoh(a: &Tensor, delta: &Tensor, b_in: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((discretize_a(a, delta)?, discretize_b_zoh(delta, b_in)?))
}

/// Bernoulli discretization, returning `(Ā, B̄)`.
pub fn discretize_bernoulli(a: &Tensor, delta: &Tensor, b_in: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((discretize_a(a, delta)?, discretize_b_bernoulli(a, delta, b_in)?))
}

pub fn discretize(mode: Discretization, a: &Tensor, delta: &Tensor, b_in: &Tensor) -> Result<(Tensor, Tensor)> {
    match mode {
        Discretization::Zoh => discretize_zoh(a, delta, b_in),
        Discretization::Bernoulli => discretize_bernoulli(a, delta, b_in),
    }
}

struct DiscretizeABack;

impl Backward for DiscretizeABack {
    fn name(&self) -> &'static str {
        "discretize_a"
    }

    // inputs: [A, delta]
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, delta) = (inputs[0], inputs[1]);
        let (n, e) = (a.dim(0), a.dim(1));
        let mut ga = Tensor::zeros(a.shape());
        let mut gd = Tensor::zeros(delta.shape());
        let block = n * e;
        for (p, ((obl, gbl), drow)) in out
            .data()
            .chunks_exact(block)
            .zip(grad.data().chunks_exact(block))
            .zip(delta.data().chunks_exact(e))
            .enumerate()
        {
            let gdrow = &mut gd.data_mut()[p * e..(p + 1) * e];
            for s in 0..n {
                for k in 0..e {
                    let t = gbl[s * e + k] * obl[s * e + k];
                    gdrow[k] += t * a.data()[s * e + k];
                    ga.data_mut()[s * e + k] += t * drow[k];
                }
            }
        }
        vec![Some(ga), Some(gd)]
    }
}

struct DiscretizeBZohBack;

impl Backward for DiscretizeBZohBack {
    fn name(&self) -> &'static str {
        "discretize_b_zoh"
    }

    // inputs: [delta, B]
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (delta, b_in) = (inputs[0], inputs[1]);
        let (n, e) = (b_in.channels(), delta.channels());
        let mut gd = Tensor::zeros(delta.shape());
        let mut gb = Tensor::zeros(b_in.shape());
        for (p, gbl) in grad.data().chunks_exact(n * e).enumerate() {
            let drow = &delta.data()[p * e..(p + 1) * e];
            let brow = &b_in.data()[p * n..(p + 1) * n];
            for s in 0..n {
                let mut acc = 0.0;
                for k in 0..e {
                    let g = gbl[s * e + k];
                    gd.data_mut()[p * e + k] += g * brow[s];
                    acc += g * drow[k];
                }
                gb.data_mut()[p * n + s] += acc;
            }
        }
        vec![Some(gd), Some(gb)]
    }
}

struct DiscretizeBBernoulliBack;

impl Backward for DiscretizeBBernoulliBack {
    fn name(&self) -> &'static str {
        "discretize_b_bernoulli"
    }

    // inputs: [A, delta, B]
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, delta, b_in) = (inputs[0], inputs[1], inputs[2]);
        let (n, e) = (a.dim(0), a.dim(1));
        let mut ga = Tensor::zeros(a.shape());
        let mut gd = Tensor::zeros(delta.shape());
        let mut gb = Tensor::zeros(b_in.shape());
        for (p, gbl) in grad.data().chunks_exact(n * e).enumerate() {
            for s in 0..n {
                let b = b_in.data()[p * n + s];
                let mut acc = 0.0;
                for k in 0..e {
                    let (d, av) = (delta.data()[p * e + k], a.data()[s * e + k]);
                    let g = gbl[s * e + k];
                    let (dd, da) = bernoulli_partials(d, av);
                    gd.data_mut()[p * e + k] += g * b * dd;
                    ga.data_mut()[s * e + k] += g * b * da;
                    acc += g * bernoulli_factor(d, av);
                }
                gb.data_mut()[p * n + s] += acc;
            }
        }
        vec![Some(ga), Some(gd), Some(gb)]
    }
}

impl Tape {
    pub fn discretize_a(&mut self, a: Var, delta: Var) -> Result<Var> {
        let out = discretize_a(self.value(a), self.value(delta))?;
        Ok(self.push(out, &[a, delta], DiscretizeABack))
    }

    pub fn discretize_b(&mut self, mode: Discretization, a: Var, delta: Var, b_in: Var) -> Result<Var> {
        Ok(match mode {
            Discretization::Zoh => {
                let out = discretize_b_zoh(self.value(delta), self.value(b_in))?;
                self.push(out, &[delta, b_in], DiscretizeBZohBack)
            }
            Discretization::Bernoulli => {
                let out = discretize_b_bernoulli(self.value(a), self.value(delta), self.value(b_in))?;
                self.push(out, &[a, delta, b_in], DiscretizeBBernoulliBack)
            }
        })
    }
}
