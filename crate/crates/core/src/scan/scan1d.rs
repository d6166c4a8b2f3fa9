//! Sequential and chunk-parallel 1D selective scans.

use rayon::prelude::*;

use super::{uniform_correction, Dims, ScanGrads, ScanInputs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reference recurrence `h[t] = Ā[t]∘h[t−1] + B̄[t]∘x[t]` over the flattened
/// positions of each batch element.
pub fn scan1d_naive(inputs: &ScanInputs<'_>) -> Result<Tensor> {
    let dims = inputs.flat_dims()?;
    inputs.check_finite()?;
    let Dims { b, l, n, e } = dims;
    let mut y = Tensor::zeros(inputs.x.shape());
    y.data_mut().par_chunks_mut(l * e).enumerate().for_each(|(bi, y_b)| {
        let mut h = vec![0.0; n * e];
        for t in 0..l {
            let pos = bi * l + t;
            let y_row = &mut y_b[t * e..(t + 1) * e];
            step(inputs, &dims, pos, &mut h);
            read_out(inputs, &dims, pos, &h, y_row);
            inputs.add_local_terms(&dims, pos, y_row);
        }
    });
    debug_assert_eq!(b * l * e, y.len());
    Ok(y)
}

/// Naive scan with the same correction coefficient `rs` on every
/// `(dstate, channel)` pair, overriding any `Rs` already in `inputs`.
pub fn scan1d_corrected(inputs: &ScanInputs<'_>, rs: f64) -> Result<Tensor> {
    let rs = uniform_correction(inputs.c.channels(), inputs.x.channels(), rs);
    scan1d_naive(&ScanInputs { rs: Some(&rs), ..*inputs })
}

/// Chunked associative scan.
///
/// Each chunk is first reduced to an affine summary `(Π Ā, h_end)`; a
/// sequential pass over summaries yields every chunk's carry-in state, after
/// which chunks are rescanned independently.
pub fn scan1d_parallel(inputs: &ScanInputs<'_>, chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let dims = inputs.flat_dims()?;
    inputs.check_finite()?;
    let Dims { b, l, n, e } = dims;
    let ne = n * e;
    let chunks = l.div_ceil(chunk);

    let summaries: Vec<(Vec<f64>, Vec<f64>)> = (0..b * chunks)
        .into_par_iter()
        .map(|id| {
            let (bi, k) = (id / chunks, id % chunks);
            let mut prod = vec![1.0; ne];
            let mut h = vec![0.0; ne];
            for t in k * chunk..((k + 1) * chunk).min(l) {
                let pos = bi * l + t;
                step(inputs, &dims, pos, &mut h);
                let a = &inputs.abar.data()[pos * ne..(pos + 1) * ne];
                prod.iter_mut().zip(a).for_each(|(p, a)| *p *= a);
            }
            (prod, h)
        })
        .collect();

    let mut carries = vec![vec![0.0; ne]; b * chunks];
    for bi in 0..b {
        for k in 1..chunks {
            let (prod, end) = &summaries[bi * chunks + k - 1];
            let prev = carries[bi * chunks + k - 1].clone();
            let cur = &mut carries[bi * chunks + k];
            for i in 0..ne {
                cur[i] = prod[i] * prev[i] + end[i];
            }
        }
    }

    let mut y = Tensor::zeros(inputs.x.shape());
    let mut pieces: Vec<(usize, &mut [f64])> = Vec::with_capacity(b * chunks);
    for (bi, y_b) in y.data_mut().chunks_mut(l * e).enumerate() {
        for (k, piece) in y_b.chunks_mut(chunk * e).enumerate() {
            pieces.push((bi * chunks + k, piece));
        }
    }
    pieces.into_par_iter().for_each(|(id, piece)| {
        let (bi, k) = (id / chunks, id % chunks);
        let mut h = carries[id].clone();
        for (j, y_row) in piece.chunks_mut(e).enumerate() {
            let pos = bi * l + k * chunk + j;
            step(inputs, &dims, pos, &mut h);
            read_out(inputs, &dims, pos, &h, y_row);
            inputs.add_local_terms(&dims, pos, y_row);
        }
    });
    Ok(y)
}

/// Cotangents of all scan inputs given the output cotangent `gy`.
///
/// Hidden states are checkpointed every `⌈√L⌉` positions and recomputed one
/// chunk at a time during the reverse sweep.
pub fn scan1d_vjp(inputs: &ScanInputs<'_>, gy: &Tensor) -> Result<ScanGrads> {
    let dims = inputs.flat_dims()?;
    inputs.x.expect_same_shape(gy)?;
    let Dims { b, l, n, e } = dims;
    let ne = n * e;
    let chunk = ((l as f64).sqrt().ceil() as usize).max(1);
    let chunks = l.div_ceil(chunk);

    let per_batch: Vec<ScanGrads> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let mut grads = ScanGrads::lane(inputs, l);
            let mut checkpoints = vec![vec![0.0; ne]; chunks];
            let mut h = vec![0.0; ne];
            for t in 0..l {
                if t % chunk == 0 {
                    checkpoints[t / chunk].copy_from_slice(&h);
                }
                step(inputs, &dims, bi * l + t, &mut h);
            }

            let mut states = vec![0.0; (chunk + 1) * ne];
            let mut carry = vec![0.0; ne];
            for k in (0..chunks).rev() {
                let start = k * chunk;
                let end = (start + chunk).min(l);
                states[..ne].copy_from_slice(&checkpoints[k]);
                for t in start..end {
                    let j = t - start;
                    let (prev, next) = states.split_at_mut((j + 1) * ne);
                    next[..ne].copy_from_slice(&prev[j * ne..]);
                    step(inputs, &dims, bi * l + t, &mut next[..ne]);
                }
                for t in (start..end).rev() {
                    let j = t - start;
                    let pos = bi * l + t;
                    let h_prev = &states[j * ne..(j + 1) * ne];
                    let h_cur = &states[(j + 1) * ne..(j + 2) * ne];
                    backward_step(inputs, &dims, pos, t, gy, h_prev, h_cur, &mut carry, &mut grads);
                    let gy_row = &gy.data()[pos * e..(pos + 1) * e];
                    inputs.local_terms_vjp(&dims, pos, t, gy_row, &mut grads);
                }
            }
            grads
        })
        .collect();
    Ok(merge_batches(inputs, per_batch))
}

/// Folds per-batch gradient buffers: position-indexed tensors hold disjoint
/// slices, shared parameters are summed in batch order.
pub(crate) fn merge_batches(inputs: &ScanInputs<'_>, per_batch: Vec<ScanGrads>) -> ScanGrads {
    let mut out = ScanGrads::zeros_like(inputs);
    for (bi, g) in per_batch.into_iter().enumerate() {
        for (dst, src) in [(&mut out.x, &g.x), (&mut out.abar, &g.abar), (&mut out.bbar, &g.bbar), (&mut out.c, &g.c)] {
            let len = src.len();
            dst.data_mut()[bi * len..(bi + 1) * len].copy_from_slice(src.data());
        }
        for (dst, src) in [(&mut out.d, &g.d), (&mut out.rs, &g.rs)] {
            if let (Some(dst), Some(src)) = (dst.as_mut(), src.as_ref()) {
                dst.add_assign(src).expect("matching parameter shapes");
            }
        }
    }
    out
}

#[inline]
fn step(inputs: &ScanInputs<'_>, dims: &Dims, pos: usize, h: &mut [f64]) {
    let (n, e) = (dims.n, dims.e);
    let a = &inputs.abar.data()[pos * n * e..(pos + 1) * n * e];
    let bb = &inputs.bbar.data()[pos * n * e..(pos + 1) * n * e];
    let x = &inputs.x.data()[pos * e..(pos + 1) * e];
    for s in 0..n {
        let o = s * e;
        for k in 0..e {
            h[o + k] = a[o + k] * h[o + k] + bb[o + k] * x[k];
        }
    }
}

/// `y_row[e] = Σ_s C[s]·h[s,e]`, accumulated in dstate order.
#[inline]
pub(crate) fn read_out(inputs: &ScanInputs<'_>, dims: &Dims, pos: usize, h: &[f64], y_row: &mut [f64]) {
    let (n, e) = (dims.n, dims.e);
    let c = &inputs.c.data()[pos * n..(pos + 1) * n];
    for s in 0..n {
        for k in 0..e {
            y_row[k] += c[s] * h[s * e + k];
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn backward_step(
    inputs: &ScanInputs<'_>,
    dims: &Dims,
    pos: usize,
    local: usize,
    gy: &Tensor,
    h_prev: &[f64],
    h_cur: &[f64],
    carry: &mut [f64],
    grads: &mut ScanGrads,
) {
    let (n, e) = (dims.n, dims.e);
    let ne = n * e;
    let a = &inputs.abar.data()[pos * ne..(pos + 1) * ne];
    let bb = &inputs.bbar.data()[pos * ne..(pos + 1) * ne];
    let x = &inputs.x.data()[pos * e..(pos + 1) * e];
    let c = &inputs.c.data()[pos * n..(pos + 1) * n];
    let gy = &gy.data()[pos * e..(pos + 1) * e];
    let ga = &mut grads.abar.data_mut()[local * ne..(local + 1) * ne];
    let gbb = &mut grads.bbar.data_mut()[local * ne..(local + 1) * ne];
    let gc = &mut grads.c.data_mut()[local * n..(local + 1) * n];
    let gx = &mut grads.x.data_mut()[local * e..(local + 1) * e];
    for s in 0..n {
        let o = s * e;
        let mut gc_s = 0.0;
        for k in 0..e {
            let gh = c[s] * gy[k] + carry[o + k];
            ga[o + k] += gh * h_prev[o + k];
            gbb[o + k] += gh * x[k];
            gx[k] += gh * bb[o + k];
            gc_s += gy[k] * h_cur[o + k];
            carry[o + k] = a[o + k] * gh;
        }
        gc[s] += gc_s;
    }
}
