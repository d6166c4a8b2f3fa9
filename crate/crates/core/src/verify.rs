//! Randomized oracle suite for the scan implementations.

use crate::error::Result;
use crate::rng::Rng;
use crate::scan::{scan1d_naive, scan1d_parallel, scan2d_naive, tiled_scan2d, ScanInputs};
use crate::tensor::Tensor;

/// Owned operands of one scan problem on a `(B, H, W)` grid.
#[derive(Clone, Debug)]
pub struct ScanWorkload {
    pub x: Tensor,
    pub abar: Tensor,
    pub bbar: Tensor,
    pub c: Tensor,
    pub d: Tensor,
    pub rs: Tensor,
}

impl ScanWorkload {
    /// Bounded random operands with `Ā ∈ [0, 1)`.
    pub fn random(rng: &mut Rng, b: usize, h: usize, w: usize, n: usize, e: usize) -> Self {
        Self {
            x: Tensor::from_fn(&[b, h, w, e], |_| rng.uniform(-1.0, 1.0)),
            abar: Tensor::from_fn(&[b, h, w, n, e], |_| rng.uniform(0.0, 1.0)),
            bbar: Tensor::from_fn(&[b, h, w, n, e], |_| rng.uniform(-1.0, 1.0)),
            c: Tensor::from_fn(&[b, h, w, n], |_| rng.uniform(-1.0, 1.0)),
            d: Tensor::from_fn(&[e], |_| rng.uniform(-1.0, 1.0)),
            rs: Tensor::from_fn(&[n, e], |_| rng.uniform(0.0, 1.0)),
        }
    }

    pub fn inputs(&self) -> ScanInputs<'_> {
        ScanInputs::new(&self.x, &self.abar, &self.bbar, &self.c).with_skip(&self.d).with_correction(&self.rs)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.abar.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }
}

/// Direct evaluation of `h[i,j] = Σ_{i'≤i, j'≤j} Ā^{|i−i'|+|j−j'|} B̄ x`
/// followed by the read-out and local terms. Valid only when `Ā` is uniform
/// over the grid, in which case it is taken from the first cell.
pub fn manhattan_oracle(work: &ScanWorkload) -> Result<Tensor> {
    let (b, h, w, n, e) = work.dims();
    let inputs = work.inputs();
    let dims = inputs.flat_dims()?;
    let mut y = Tensor::zeros(&[b, h, w, e]);
    let (a, bb, x, c) = (work.abar.data(), work.bbar.data(), work.x.data(), work.c.data());
    let ne = n * e;
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let p = (bi * h + i) * w + j;
                for s in 0..n {
                    for k in 0..e {
                        let a0 = a[(bi * h * w) * ne + s * e + k];
                        let mut acc = 0.0;
                        for ip in 0..=i {
                            for jp in 0..=j {
                                let q = (bi * h + ip) * w + jp;
                                acc += a0.powi(((i - ip) + (j - jp)) as i32) * bb[q * ne + s * e + k] * x[q * e + k];
                            }
                        }
                        y.data_mut()[p * e + k] += c[p * n + s] * acc;
                    }
                }
                let row = &mut y.data_mut()[p * e..(p + 1) * e];
                inputs.add_local_terms(&dims, p, row);
            }
        }
    }
    Ok(y)
}

/// Largest deviations found by [`scan_check`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScanCheckReport {
    pub trials: usize,
    /// Chunked parallel 1D scan vs the sequential recurrence.
    pub parallel_vs_naive: f64,
    /// Tiled 2D scan vs the two-pass recurrence.
    pub tiled_vs_naive: f64,
    /// Two-pass recurrence vs the Manhattan-power sum.
    pub scan2d_vs_manhattan: f64,
}

impl ScanCheckReport {
    pub fn max_deviation(&self) -> f64 {
        self.parallel_vs_naive.max(self.tiled_vs_naive).max(self.scan2d_vs_manhattan)
    }
}

pub const CHECK_TILES: [usize; 4] = [1, 3, 8, 16];

/// Runs `trials` random instances with sides in `1..=max_size` and `N ≤ 8`.
/// Each instance checks the parallel 1D scan at chunks `1, 4, 16, L` and the
/// tiled 2D scan at every size in [`CHECK_TILES`]. Every fourth instance
/// also gets uniform `Ā` and a direct Manhattan-power evaluation, on sides
/// capped at 12.
pub fn scan_check(max_size: usize, trials: usize, seed: u64) -> Result<ScanCheckReport> {
    let root = Rng::new(seed);
    let mut report = ScanCheckReport { trials, ..Default::default() };
    let max_size = max_size.max(1);
    for t in 0..trials {
        let mut rng = root.split(t as u64);
        let side = |rng: &mut Rng| 1 + (rng.next_u64() % max_size as u64) as usize;
        let (h, w) = (side(&mut rng), side(&mut rng));
        let n = 1 + (rng.next_u64() % 8) as usize;
        let e = 1 + (rng.next_u64() % 4) as usize;
        let work = ScanWorkload::random(&mut rng, 1, h, w, n, e);
        let inputs = work.inputs();

        let naive1 = scan1d_naive(&inputs)?;
        for chunk in [1, 4, 16, h * w] {
            let par = scan1d_parallel(&inputs, chunk)?;
            report.parallel_vs_naive = report.parallel_vs_naive.max(par.max_abs_diff(&naive1)?);
        }
        let naive2 = scan2d_naive(&inputs)?;
        for tile in CHECK_TILES {
            let tiled = tiled_scan2d(&inputs, tile)?;
            report.tiled_vs_naive = report.tiled_vs_naive.max(tiled.max_abs_diff(&naive2)?);
        }
        if t % 4 == 0 {
            let (h, w) = (h.min(12), w.min(12));
            let mut work = ScanWorkload::random(&mut rng, 1, h, w, n, e);
            let ne = n * e;
            let first: Vec<f64> = work.abar.data()[..ne].to_vec();
            for (k, v) in work.abar.data_mut().iter_mut().enumerate() {
                *v = first[k % ne];
            }
            let direct = manhattan_oracle(&work)?;
            let recur = scan2d_naive(&work.inputs())?;
            report.scan2d_vs_manhattan = report.scan2d_vs_manhattan.max(recur.max_abs_diff(&direct)?);
        }
    }
    Ok(report)
}
