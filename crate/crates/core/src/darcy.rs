//! Darcy-flow benchmark data.
//!
//! Coefficients come from a Gaussian random field with covariance
//! `(−Δ + 9I)^{−2}` under Neumann boundary conditions, pushed through a
//! two-level threshold. Solutions of `−∇·(a∇u) = f₀` with zero Dirichlet
//! boundary are computed by a conservative five-point finite-difference
//! scheme and conjugate gradients.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use crate::container::{self, Entries};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const A_HI: f64 = 12.0;
pub const A_LO: f64 = 3.0;
/// Shift of the operator `−Δ + τ²` defining the field covariance.
pub const TAU_SQ: f64 = 9.0;
pub const CG_TOLERANCE: f64 = 1e-10;

/// Eigenvalue of `−Δ + 9` on the Neumann cosine mode `(k1, k2)` of the unit
/// square.
pub fn grf_eigenvalue(k1: usize, k2: usize) -> f64 {
    PI * PI * ((k1 * k1 + k2 * k2) as f64) + TAU_SQ
}

/// Random coefficients `ξ_k · λ_k^{−1}` of the orthonormal cosine modes,
/// `k1 < height`, `k2 < width`.
pub fn grf_coefficients(height: usize, width: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[height, width], |i| rng.normal() / grf_eigenvalue(i / width, i % width))
}

/// `cos` basis sampled at the nodes `i/(n−1)`, orthonormal on `[0, 1]`.
fn cosine_basis(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let denom = (n - 1).max(1) as f64;
    for i in 0..n {
        let x = i as f64 / denom;
        for k in 0..n {
            let c = if k == 0 { 1.0 } else { 2f64.sqrt() };
            m[i * n + k] = c * (PI * k as f64 * x).cos();
        }
    }
    m
}

/// Field values on the `height × width` node grid for mode coefficients
/// `coeffs[k1, k2]`.
pub fn synthesize(coeffs: &Tensor) -> Result<Tensor> {
    let [height, width] = coeffs.shape()[..] else {
        return Err(crate::error::shape_err!("coefficients must be a matrix, got {:?}", coeffs.shape()));
    };
    let (by, bx) = (cosine_basis(height), cosine_basis(width));
    let mut tmp = vec![0.0; height * width];
    gemm(1.0, MatRef::row_major(&by, height, height), MatRef::row_major(coeffs.data(), height, width), 0.0, &mut tmp);
    let mut field = vec![0.0; height * width];
    gemm(1.0, MatRef::row_major(&tmp, height, width), MatRef::row_major(&bx, width, width).t(), 0.0, &mut field);
    Tensor::new(&[height, width], field)
}

pub fn sample_grf(height: usize, width: usize, rng: &mut Rng) -> Result<Tensor> {
    if height < 4 || width < 4 {
        return Err(Error::Config(format!("random fields need at least 4×4 nodes, got {height}×{width}")));
    }
    synthesize(&grf_coefficients(height, width, rng))
}

/// Map from a Gaussian field to a positive diffusion coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CoefficientMap {
    /// `hi` where the field is non-negative, `lo` elsewhere.
    Threshold { hi: f64, lo: f64 },
    /// `exp(field)`.
    LogNormal,
}

impl Default for CoefficientMap {
    fn default() -> Self {
        Self::Threshold { hi: A_HI, lo: A_LO }
    }
}

impl CoefficientMap {
    pub fn apply(&self, field: &Tensor) -> Tensor {
        match *self {
            Self::Threshold { hi, lo } => field.map(|g| if g >= 0.0 { hi } else { lo }),
            Self::LogNormal => field.map(f64::exp),
        }
    }
}

pub fn threshold_coeff(field: &Tensor) -> Tensor {
    CoefficientMap::default().apply(field)
}

/// Convergence record of one solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖f − A u‖ / ‖f‖` of the returned solution.
    pub relative_residual: f64,
}

/// The five-point operator `A u` on interior nodes with harmonic-mean face
/// coefficients, mesh widths `1/(H−1)` and `1/(W−1)`.
struct Stencil {
    ni: usize,
    nj: usize,
    /// Face coefficient to the east neighbour of interior node `(i, j)`,
    /// defined for `j` in `0..=nj` (west faces of column 0 included).
    east: Vec<f64>,
    south: Vec<f64>,
    diag: Vec<f64>,
    sx: f64,
    sy: f64,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

impl Stencil {
    fn new(a: &Tensor) -> Self {
        let (height, width) = (a.dim(0), a.dim(1));
        let (ni, nj) = (height - 2, width - 2);
        let at = |i: usize, j: usize| a.data()[i * width + j];
        let sy = ((height - 1) as f64).powi(2);
        let sx = ((width - 1) as f64).powi(2);
        // face between node (i+1, j) and (i+1, j+1) of the full grid
        let east = (0..ni)
            .flat_map(|i| (0..=nj).map(move |j| (i, j)))
            .map(|(i, j)| harmonic(at(i + 1, j), at(i + 1, j + 1)))
            .collect::<Vec<_>>();
        let south = (0..=ni)
            .flat_map(|i| (0..nj).map(move |j| (i, j)))
            .map(|(i, j)| harmonic(at(i, j + 1), at(i + 1, j + 1)))
            .collect::<Vec<_>>();
        let mut diag = vec![0.0; ni * nj];
        for i in 0..ni {
            for j in 0..nj {
                diag[i * nj + j] = sx * (east[i * (nj + 1) + j] + east[i * (nj + 1) + j + 1])
                    + sy * (south[i * nj + j] + south[(i + 1) * nj + j]);
            }
        }
        Self { ni, nj, east, south, diag, sx, sy }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let (ni, nj) = (self.ni, self.nj);
        for i in 0..ni {
            for j in 0..nj {
                let p = i * nj + j;
                let mut v = self.diag[p] * u[p];
                if j > 0 {
                    v -= self.sx * self.east[i * (nj + 1) + j] * u[p - 1];
                }
                if j + 1 < nj {
                    v -= self.sx * self.east[i * (nj + 1) + j + 1] * u[p + 1];
                }
                if i > 0 {
                    v -= self.sy * self.south[i * nj + j] * u[p - nj];
                }
                if i + 1 < ni {
                    v -= self.sy * self.south[(i + 1) * nj + j] * u[p + nj];
                }
                out[p] = v;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Interior residual `‖f − A u‖ / ‖f‖` of a full-grid solution `u`.
pub fn relative_residual(a: &Tensor, f: &Tensor, u: &Tensor) -> f64 {
    let stencil = Stencil::new(a);
    let (ni, nj, width) = (stencil.ni, stencil.nj, a.dim(1));
    let interior = |t: &Tensor| -> Vec<f64> {
        (0..ni * nj).map(|p| t.data()[(p / nj + 1) * width + p % nj + 1]).collect()
    };
    let (ui, fi) = (interior(u), interior(f));
    let mut au = vec![0.0; ni * nj];
    stencil.apply(&ui, &mut au);
    let r: f64 = au.iter().zip(&fi).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt();
    r / dot(&fi, &fi).sqrt().max(f64::MIN_POSITIVE)
}

/// Solves `−∇·(a∇u) = f` with `u = 0` on the boundary by Jacobi-preconditioned
/// conjugate gradients. `a` and `f` are `(H, W)` node fields.
pub fn solve_darcy_fd_field(a: &Tensor, f: &Tensor) -> Result<(Tensor, SolveReport)> {
    let [height, width] = a.shape()[..] else {
        return Err(crate::error::shape_err!("coefficient must be (H, W), got {:?}", a.shape()));
    };
    a.expect_same_shape(f)?;
    if height < 4 || width < 4 {
        return Err(Error::Config(format!("solver needs at least 4×4 nodes, got {height}×{width}")));
    }
    if a.data().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Config("diffusion coefficient must be positive and finite".into()));
    }
    let stencil = Stencil::new(a);
    let (ni, nj) = (stencil.ni, stencil.nj);
    let n = ni * nj;
    let rhs: Vec<f64> = (0..n).map(|p| f.data()[(p / nj + 1) * width + p % nj + 1]).collect();
    let rhs_norm = dot(&rhs, &rhs).sqrt();
    let mut u = vec![0.0; n];
    let mut iterations = 0;
    if rhs_norm > 0.0 {
        let mut r = rhs.clone();
        let mut z: Vec<f64> = r.iter().zip(&stencil.diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let max_iter = 10 * height * width;
        loop {
            if dot(&r, &r).sqrt() <= CG_TOLERANCE * rhs_norm {
                break;
            }
            if iterations == max_iter {
                return Err(Error::Solver { iterations, residual: dot(&r, &r).sqrt() / rhs_norm });
            }
            stencil.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for k in 0..n {
                u[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            for k in 0..n {
                z[k] = r[k] / stencil.diag[k];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
            iterations += 1;
        }
    }
    let mut full = Tensor::zeros(&[height, width]);
    for (p, v) in u.iter().enumerate() {
        full.data_mut()[(p / nj + 1) * width + p % nj + 1] = *v;
    }
    let report = SolveReport { iterations, relative_residual: relative_residual(a, f, &full) };
    if !full.is_finite() {
        return Err(Error::Numeric("solver produced non-finite values".into()));
    }
    Ok((full, report))
}

/// [`solve_darcy_fd_field`] with the constant forcing `f0`.
pub fn solve_darcy_fd(a: &Tensor, f0: f64) -> Result<(Tensor, SolveReport)> {
    solve_darcy_fd_field(a, &Tensor::full(a.shape(), f0))
}

/// Series solution of `−Δu = f0` on the unit square with zero boundary.
pub fn poisson_series(x: f64, y: f64, f0: f64, terms: usize) -> f64 {
    let mut acc = 0.0;
    for m in (1..2 * terms).step_by(2) {
        for n in (1..2 * terms).step_by(2) {
            let (mf, nf) = (m as f64, n as f64);
            acc += 16.0 / (PI.powi(4) * mf * nf * (mf * mf + nf * nf))
                * (mf * PI * x).sin()
                * (nf * PI * y).sin();
        }
    }
    f0 * acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct DarcySample {
    /// `(H, W)` coefficient.
    pub a: Tensor,
    pub f0: f64,
    /// `(H, W)` solution.
    pub u: Tensor,
    pub report: SolveReport,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
    pub f0: f64,
    pub map: CoefficientMap,
    /// Solve on the `2·size − 1` grid and keep every other node.
    pub fine: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { n_train: 200, n_test: 50, size: 64, seed: 7, f0: 1.0, map: CoefficientMap::default(), fine: false }
    }
}

/// Sample `index` of a dataset, drawn from its own RNG stream.
pub fn generate_sample(opts: &GenOptions, index: usize) -> Result<DarcySample> {
    let mut rng = Rng::new(opts.seed).split(index as u64);
    let n = if opts.fine { 2 * opts.size - 1 } else { opts.size };
    let a = opts.map.apply(&sample_grf(n, n, &mut rng)?);
    let (u, report) = solve_darcy_fd(&a, opts.f0)?;
    if !opts.fine {
        return Ok(DarcySample { a, f0: opts.f0, u, report });
    }
    let keep = |t: &Tensor| {
        Tensor::from_fn(&[opts.size, opts.size], |p| t.data()[(2 * (p / opts.size)) * n + 2 * (p % opts.size)])
    };
    Ok(DarcySample { a: keep(&a), f0: opts.f0, u: keep(&u), report })
}

/// z-score constants of the coefficient and solution fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub a_mean: f64,
    pub a_std: f64,
    pub u_mean: f64,
    pub u_std: f64,
}

impl NormStats {
    pub fn from_fields(a: &Tensor, u: &Tensor) -> Self {
        let moments = |t: &Tensor| {
            let n = t.len() as f64;
            let mean = t.sum() / n;
            let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(1e-12))
        };
        let (a_mean, a_std) = moments(a);
        let (u_mean, u_std) = moments(u);
        Self { a_mean, a_std, u_mean, u_std }
    }

    pub fn to_tensor(self) -> Tensor {
        Tensor::new(&[4], vec![self.a_mean, self.a_std, self.u_mean, self.u_std]).expect("four values")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        t.expect_shape(&[4], "stats")?;
        let d = t.data();
        Ok(Self { a_mean: d[0], a_std: d[1], u_mean: d[2], u_std: d[3] })
    }
}

/// One split: `a`, `u` as `(n, H, W, 1)`, forcing `f0` as `(n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DarcySet {
    pub a: Tensor,
    pub u: Tensor,
    pub f0: Tensor,
    /// Normalization constants of the training split.
    pub stats: NormStats,
}

impl DarcySet {
    pub fn len(&self) -> usize {
        self.a.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.a.dim(1), self.a.dim(2))
    }

    fn from_samples(samples: &[DarcySample], stats: Option<NormStats>) -> Result<Self> {
        let (h, w) = (samples[0].a.dim(0), samples[0].a.dim(1));
        let stack = |f: &dyn Fn(&DarcySample) -> &Tensor| -> Result<Tensor> {
            let data = samples.iter().flat_map(|s| f(s).data().iter().copied()).collect();
            Tensor::new(&[samples.len(), h, w, 1], data)
        };
        let a = stack(&|s| &s.a)?;
        let u = stack(&|s| &s.u)?;
        let f0 = Tensor::new(&[samples.len()], samples.iter().map(|s| s.f0).collect())?;
        let stats = stats.unwrap_or_else(|| NormStats::from_fields(&a, &u));
        Ok(Self { a, u, f0, stats })
    }

    pub fn to_entries(&self) -> Entries {
        let mut e = Entries::new();
        e.insert("a".into(), self.a.clone());
        e.insert("u".into(), self.u.clone());
        e.insert("f0".into(), self.f0.clone());
        e.insert("stats".into(), self.stats.to_tensor());
        e
    }

    pub fn from_entries(mut e: Entries) -> Result<Self> {
        let mut take = |name: &str| {
            e.shift_remove(name).ok_or_else(|| Error::Format(format!("dataset lacks entry `{name}`")))
        };
        let (a, u, f0, stats) = (take("a")?, take("u")?, take("f0")?, take("stats")?);
        if a.rank() != 4 || a.shape() != u.shape() || f0.shape() != [a.dim(0)] {
            return Err(Error::Format(format!("inconsistent dataset shapes {:?} / {:?}", a.shape(), u.shape())));
        }
        Ok(Self { a, u, f0, stats: NormStats::from_tensor(&stats)? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save(path, &self.to_entries())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(container::load(path)?)
    }

    /// Samples `range` as a new set sharing these statistics.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let (h, w) = self.size();
        let per = h * w;
        let cut = |t: &Tensor| Tensor::new(&[range.len(), h, w, 1], t.data()[range.start * per..range.end * per].to_vec());
        Ok(Self {
            a: cut(&self.a)?,
            u: cut(&self.u)?,
            f0: Tensor::new(&[range.len()], self.f0.data()[range.clone()].to_vec())?,
            stats: self.stats,
        })
    }
}

/// Generated splits with their solver records.
#[derive(Clone, Debug)]
pub struct Generated {
    pub train: DarcySet,
    pub test: DarcySet,
    pub reports: Vec<SolveReport>,
}

/// Training samples use streams `0..n_train`, test samples the following
/// `n_test` streams. Statistics come from the training split.
pub fn gen_dataset(opts: &GenOptions) -> Result<Generated> {
    if opts.n_train == 0 || opts.n_test == 0 {
        return Err(Error::Config("sample counts must be at least 1".into()));
    }
    let samples: Vec<DarcySample> =
        (0..opts.n_train + opts.n_test).into_par_iter().map(|i| generate_sample(opts, i)).collect::<Result<_>>()?;
    let train = DarcySet::from_samples(&samples[..opts.n_train], None)?;
    let test = DarcySet::from_samples(&samples[opts.n_train..], Some(train.stats))?;
    Ok(Generated { train, test, reports: samples.iter().map(|s| s.report).collect() })
}
