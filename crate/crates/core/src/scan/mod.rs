//! Selective state-space scans with geometric correction.
//!
//! All scans share one input bundle, [`ScanInputs`]: the sequence or grid `x`
//! with `E` channels, discretized transitions `Ā` and injections `B̄` laid
//! out `(.., N, E)`, read-out weights `C` laid out `(.., N)`, an optional
//! per-channel skip `D` and optional correction coefficients `Rs` of shape
//! `(N, E)`. The hidden state before the first position is zero.
//!
//! Output at each position is
//! `y = Σ_s C_s·h_s − Σ_s Rs_s·B̄_s·x + D·x` in the default
//! [`CorrectionForm::Injection`] form.

mod op;
mod prefix;
mod scan1d;
mod scan2d;
mod tiled;

use std::fmt;
use std::str::FromStr;

pub use op::{ScanKind, ScanVars};
pub use prefix::{combine, inclusive_scan_in_place};
pub use scan1d::{scan1d_corrected, scan1d_naive, scan1d_parallel, scan1d_vjp};
pub use scan2d::{scan2d_naive, scan2d_vjp};
pub use tiled::{tiled_scan2d, tiled_scan2d_with_stats, TilePlan, TileStats};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Where the correction term enters the read-out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CorrectionForm {
    /// `y = Σ_s (C_s h_s − Rs_s B̄_s x)`: the injected term is removed outside
    /// the read-out weights.
    #[default]
    Injection,
    /// `y = Σ_s C_s ∘ (h_s − Rs_s x)`: the correction is gated by `C_s` and
    /// does not involve `B̄`.
    Gated,
}

impl FromStr for CorrectionForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "injection" | "false" => Ok(Self::Injection),
            "gated" | "true" => Ok(Self::Gated),
            other => Err(Error::Config(format!("unknown correction form `{other}`"))),
        }
    }
}

impl fmt::Display for CorrectionForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Injection => "injection",
            Self::Gated => "gated",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    pub x: &'a Tensor,
    pub abar: &'a Tensor,
    pub bbar: &'a Tensor,
    pub c: &'a Tensor,
    pub d: Option<&'a Tensor>,
    pub rs: Option<&'a Tensor>,
    pub form: CorrectionForm,
}

impl<'a> ScanInputs<'a> {
    /// Plain recurrence: no skip, no correction.
    pub fn new(x: &'a Tensor, abar: &'a Tensor, bbar: &'a Tensor, c: &'a Tensor) -> Self {
        Self { x, abar, bbar, c, d: None, rs: None, form: CorrectionForm::Injection }
    }

    pub fn with_skip(mut self, d: &'a Tensor) -> Self {
        self.d = Some(d);
        self
    }

    pub fn with_correction(mut self, rs: &'a Tensor) -> Self {
        self.rs = Some(rs);
        self
    }

    pub fn with_form(mut self, form: CorrectionForm) -> Self {
        self.form = form;
        self
    }

    /// `(batch, positions, N, E)` treating every axis between the first and
    /// the last of `x` as one flattened sequence.
    pub(crate) fn flat_dims(&self) -> Result<Dims> {
        let x = self.x;
        if x.rank() < 3 {
            return Err(shape_err!("scan input must be (B, .., E), got {:?}", x.shape()));
        }
        let e = x.channels();
        let b = x.dim(0);
        let l = x.len() / (b * e).max(1);
        let n = self.c.channels();
        let mut state_shape = x.shape().to_vec();
        state_shape.insert(state_shape.len() - 1, n);
        let mut c_shape = x.shape().to_vec();
        *c_shape.last_mut().unwrap() = n;
        self.abar.expect_shape(&state_shape, "Ā")?;
        self.bbar.expect_shape(&state_shape, "B̄")?;
        self.c.expect_shape(&c_shape, "C")?;
        if let Some(d) = self.d {
            d.expect_shape(&[e], "D")?;
        }
        if let Some(rs) = self.rs {
            rs.expect_shape(&[n, e], "Rs")?;
        }
        Ok(Dims { b, l, n, e })
    }

    /// `(batch, height, width, N, E)` for grid scans.
    pub(crate) fn grid_dims(&self) -> Result<(Dims, usize, usize)> {
        let (_, h, w, _) = self.x.grid_dims()?;
        Ok((self.flat_dims()?, h, w))
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        let all = [Some(self.x), Some(self.abar), Some(self.bbar), Some(self.c), self.d, self.rs];
        if all.iter().flatten().all(|t| t.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite scan input".into()))
        }
    }

    /// Adds the position-local terms (correction and skip) to `y_row`.
    #[inline]
    pub(crate) fn add_local_terms(&self, dims: &Dims, pos: usize, y_row: &mut [f64]) {
        let (n, e) = (dims.n, dims.e);
        let x_row = &self.x.data()[pos * e..(pos + 1) * e];
        if let Some(rs) = self.rs {
            let rs = rs.data();
            match self.form {
                CorrectionForm::Injection => {
                    let bb = &self.bbar.data()[pos * n * e..(pos + 1) * n * e];
                    for s in 0..n {
                        for k in 0..e {
                            y_row[k] -= rs[s * e + k] * bb[s * e + k] * x_row[k];
                        }
                    }
                }
                CorrectionForm::Gated => {
                    let c_row = &self.c.data()[pos * n..(pos + 1) * n];
                    for s in 0..n {
                        for k in 0..e {
                            y_row[k] -= c_row[s] * rs[s * e + k] * x_row[k];
                        }
                    }
                }
            }
        }
        if let Some(d) = self.d {
            for k in 0..e {
                y_row[k] += d.data()[k] * x_row[k];
            }
        }
    }

    /// Adjoint of [`add_local_terms`](Self::add_local_terms) at one position.
    ///
    /// Inputs are read at `pos`, cotangents written at `local` of a lane
    /// buffer from [`ScanGrads::lane`].
    pub(crate) fn local_terms_vjp(&self, dims: &Dims, pos: usize, local: usize, gy: &[f64], grads: &mut ScanGrads) {
        let (n, e) = (dims.n, dims.e);
        let x_row = &self.x.data()[pos * e..(pos + 1) * e];
        if let Some(rs) = self.rs {
            let rs = rs.data();
            let grs = grads.rs.as_mut().expect("rs gradient buffer").data_mut();
            match self.form {
                CorrectionForm::Injection => {
                    let bb = &self.bbar.data()[pos * n * e..(pos + 1) * n * e];
                    let gbb = &mut grads.bbar.data_mut()[local * n * e..(local + 1) * n * e];
                    let gx = &mut grads.x.data_mut()[local * e..(local + 1) * e];
                    for s in 0..n {
                        for k in 0..e {
                            let i = s * e + k;
                            gx[k] -= gy[k] * rs[i] * bb[i];
                            gbb[i] -= gy[k] * rs[i] * x_row[k];
                            grs[i] -= gy[k] * bb[i] * x_row[k];
                        }
                    }
                }
                CorrectionForm::Gated => {
                    let c_row = &self.c.data()[pos * n..(pos + 1) * n];
                    let gc = &mut grads.c.data_mut()[local * n..(local + 1) * n];
                    let gx = &mut grads.x.data_mut()[local * e..(local + 1) * e];
                    for s in 0..n {
                        for k in 0..e {
                            let i = s * e + k;
                            gx[k] -= gy[k] * c_row[s] * rs[i];
                            gc[s] -= gy[k] * rs[i] * x_row[k];
                            grs[i] -= gy[k] * c_row[s] * x_row[k];
                        }
                    }
                }
            }
        }
        if let Some(d) = self.d {
            let gd = grads.d.as_mut().expect("d gradient buffer").data_mut();
            let gx = &mut grads.x.data_mut()[local * e..(local + 1) * e];
            for k in 0..e {
                gx[k] += gy[k] * d.data()[k];
                gd[k] += gy[k] * x_row[k];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub b: usize,
    pub l: usize,
    pub n: usize,
    pub e: usize,
}

/// Cotangents of every scan input.
#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub x: Tensor,
    pub abar: Tensor,
    pub bbar: Tensor,
    pub c: Tensor,
    pub d: Option<Tensor>,
    pub rs: Option<Tensor>,
}

impl ScanGrads {
    /// Zero buffers for `positions` consecutive positions of one batch lane
    /// plus full-size shared parameters.
    pub(crate) fn lane(inputs: &ScanInputs<'_>, positions: usize) -> Self {
        let (n, e) = (inputs.c.channels(), inputs.x.channels());
        Self {
            x: Tensor::zeros(&[positions, e]),
            abar: Tensor::zeros(&[positions, n, e]),
            bbar: Tensor::zeros(&[positions, n, e]),
            c: Tensor::zeros(&[positions, n]),
            d: inputs.d.map(|d| Tensor::zeros(d.shape())),
            rs: inputs.rs.map(|r| Tensor::zeros(r.shape())),
        }
    }

    pub(crate) fn zeros_like(inputs: &ScanInputs<'_>) -> Self {
        Self {
            x: Tensor::zeros(inputs.x.shape()),
            abar: Tensor::zeros(inputs.abar.shape()),
            bbar: Tensor::zeros(inputs.bbar.shape()),
            c: Tensor::zeros(inputs.c.shape()),
            d: inputs.d.map(|d| Tensor::zeros(d.shape())),
            rs: inputs.rs.map(|r| Tensor::zeros(r.shape())),
        }
    }
}

/// Correction coefficients `Rs` filled with one value.
pub fn uniform_correction(n: usize, e: usize, value: f64) -> Tensor {
    Tensor::full(&[n, e], value)
}
