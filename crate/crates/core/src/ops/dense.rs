use crate::error::{shape_err, Result};
use crate::linalg::{gemm, MatRef};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// `out[.., j] = Σ_i x[.., i] · weight[i, j] + bias[j]`.
pub fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_in, d_out) = affine_dims(x, weight, bias)?;
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm(
        1.0,
        MatRef::row_major(x.data(), rows, d_in),
        MatRef::row_major(weight.data(), d_in, d_out),
        1.0,
        &mut out,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(&shape, out)
}

fn affine_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let [d_in, d_out] = weight.shape()[..] else {
        return Err(shape_err!("affine weight must be a matrix, got {:?}", weight.shape()));
    };
    if x.channels() != d_in || x.rank() == 0 {
        return Err(shape_err!("affine input has {} channels, weight expects {}", x.channels(), d_in));
    }
    if bias.shape() != [d_out] {
        return Err(shape_err!("affine bias shape {:?}, expected [{}]", bias.shape(), d_out));
    }
    Ok((d_in, d_out))
}

struct AffineBack;

impl Backward for AffineBack {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (d_in, d_out) = (w.dim(0), w.dim(1));
        let rows = x.rows();
        let g = MatRef::row_major(grad.data(), rows, d_out);

        let mut gx = Tensor::zeros(x.shape());
        gemm(1.0, g, MatRef::row_major(w.data(), d_in, d_out).t(), 0.0, gx.data_mut());

        let mut gw = Tensor::zeros(w.shape());
        gemm(1.0, MatRef::row_major(x.data(), rows, d_in).t(), g, 0.0, gw.data_mut());

        let mut gb = Tensor::zeros(&[d_out]);
        for row in grad.data().chunks_exact(d_out) {
            for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

/// Batched matrix product over the leading axis, with optional transposes of
/// the trailing two axes of either operand.
pub fn bmm(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let dims = BmmDims::new(a, b, trans_a, trans_b)?;
    let mut out = Tensor::zeros(&[dims.batch, dims.m, dims.n]);
    for i in 0..dims.batch {
        let (va, vb) = dims.views(a, b, i);
        gemm(1.0, va, vb, 0.0, &mut out.data_mut()[i * dims.m * dims.n..(i + 1) * dims.m * dims.n]);
    }
    Ok(out)
}

#[derive(Clone, Copy)]
struct BmmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
}

impl BmmDims {
    fn new(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Self> {
        let ([ba, a0, a1], [bb, b0, b1]) = (a.shape(), b.shape()) else {
            return Err(shape_err!("bmm needs rank-3 operands, got {:?} and {:?}", a.shape(), b.shape()));
        };
        let (m, ka) = if trans_a { (*a1, *a0) } else { (*a0, *a1) };
        let (kb, n) = if trans_b { (*b1, *b0) } else { (*b0, *b1) };
        if ba != bb || ka != kb {
            return Err(shape_err!("bmm operands {:?} and {:?} do not conform", a.shape(), b.shape()));
        }
        Ok(Self { batch: *ba, m, k: ka, n, trans_a, trans_b })
    }

    fn views<'a>(&self, a: &'a Tensor, b: &'a Tensor, i: usize) -> (MatRef<'a>, MatRef<'a>) {
        let sa = self.m * self.k;
        let sb = self.k * self.n;
        let da = &a.data()[i * sa..(i + 1) * sa];
        let db = &b.data()[i * sb..(i + 1) * sb];
        let va = if self.trans_a {
            MatRef::row_major(da, self.k, self.m).t()
        } else {
            MatRef::row_major(da, self.m, self.k)
        };
        let vb = if self.trans_b {
            MatRef::row_major(db, self.n, self.k).t()
        } else {
            MatRef::row_major(db, self.k, self.n)
        };
        (va, vb)
    }
}

struct BmmBack {
    dims: BmmDims,
}

impl Backward for BmmBack {
    fn name(&self) -> &'static str {
        "bmm"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = self.dims;
        let (a, b) = (inputs[0], inputs[1]);
        let mut ga = Tensor::zeros(a.shape());
        let mut gb = Tensor::zeros(b.shape());
        let (sa, sb, sg) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            let (va, vb) = d.views(a, b, i);
            let g = MatRef::row_major(&grad.data()[i * sg..(i + 1) * sg], d.m, d.n);
            let ga_i = &mut ga.data_mut()[i * sa..(i + 1) * sa];
            if d.trans_a {
                // stored k × m: G^T-side product op(B) · G^T
                gemm(1.0, vb, g.t(), 0.0, ga_i);
            } else {
                gemm(1.0, g, vb.t(), 0.0, ga_i);
            }
            let gb_i = &mut gb.data_mut()[i * sb..(i + 1) * sb];
            if d.trans_b {
                gemm(1.0, g.t(), va, 0.0, gb_i);
            } else {
                gemm(1.0, va.t(), g, 0.0, gb_i);
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

/// `alpha · x + beta` with constant `alpha`, `beta`.
pub fn scale_shift(x: &Tensor, alpha: f64, beta: f64) -> Tensor {
    x.map(|v| alpha * v + beta)
}

/// Adds `table` to every leading-axis slice of `x`; `table.shape() == x.shape()[1..]`.
pub fn broadcast_add(x: &Tensor, table: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || table.shape() != &x.shape()[1..] {
        return Err(shape_err!("cannot broadcast {:?} over {:?}", table.shape(), x.shape()));
    }
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_exact_mut(table.len()) {
        for (o, t) in chunk.iter_mut().zip(table.data()) {
            *o += t;
        }
    }
    Ok(out)
}

/// Channel slice `[start, start + len)` along the last axis.
pub fn split_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = x.channels();
    if start + len > c {
        return Err(shape_err!("channel slice {}..{} out of range for {} channels", start, start + len, c));
    }
    let mut data = Vec::with_capacity(x.rows() * len);
    for row in x.data().chunks_exact(c) {
        data.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(&shape, data)
}

struct AddBack;
impl Backward for AddBack {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct MulBack;
impl Backward for MulBack {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            Some(grad.zip_map(inputs[1], |g, b| g * b).unwrap()),
            Some(grad.zip_map(inputs[0], |g, a| g * a).unwrap()),
        ]
    }
}

struct ScaleShiftBack(f64);
impl Backward for ScaleShiftBack {
    fn name(&self) -> &'static str {
        "scale_shift"
    }
    fn backward(&self, _i: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.scale(self.0))]
    }
}

struct BroadcastAddBack;
impl Backward for BroadcastAddBack {
    fn name(&self) -> &'static str {
        "broadcast_add"
    }
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut gt = Tensor::zeros(inputs[1].shape());
        for chunk in grad.data().chunks_exact(gt.len()) {
            for (acc, g) in gt.data_mut().iter_mut().zip(chunk) {
                *acc += g;
            }
        }
        vec![Some(grad.clone()), Some(gt)]
    }
}

struct SplitBack {
    start: usize,
}
impl Backward for SplitBack {
    fn name(&self) -> &'static str {
        "split_channels"
    }
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (c, len) = (x.channels(), grad.channels());
        let mut gx = Tensor::zeros(x.shape());
        for (dst, src) in gx.data_mut().chunks_exact_mut(c).zip(grad.data().chunks_exact(len)) {
            dst[self.start..self.start + len].copy_from_slice(src);
        }
        vec![Some(gx)]
    }
}

struct ReshapeBack;
impl Backward for ReshapeBack {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.reshape(inputs[0].shape()).unwrap())]
    }
}

impl Tape {
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = affine(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(out, &[x, weight, bias], AffineBack))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let dims = BmmDims::new(self.value(a), self.value(b), trans_a, trans_b)?;
        let out = bmm(self.value(a), self.value(b), trans_a, trans_b)?;
        Ok(self.push(out, &[a, b], BmmBack { dims }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = add(self.value(a), self.value(b))?;
        Ok(self.push(out, &[a, b], AddBack))
    }

    /// Sum of any number of same-shaped values, accumulated left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| crate::Error::Contract("add_all needs at least one term".into()))?;
        rest.iter().try_fold(*first, |acc, &t| self.add(acc, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = mul(self.value(a), self.value(b))?;
        Ok(self.push(out, &[a, b], MulBack))
    }

    pub fn scale_shift(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let out = scale_shift(self.value(x), alpha, beta);
        self.push(out, &[x], ScaleShiftBack(alpha))
    }

    pub fn broadcast_add(&mut self, x: Var, table: Var) -> Result<Var> {
        let out = broadcast_add(self.value(x), self.value(table))?;
        Ok(self.push(out, &[x, table], BroadcastAddBack))
    }

    pub fn split_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = split_channels(self.value(x), start, len)?;
        Ok(self.push(out, &[x], SplitBack { start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], ReshapeBack))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity() {
        let out = affine(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_bias_shift() {
        let out = affine(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn affine_hand_product() {
        let out = affine(&t(&[1, 2], &[0.5, -1.0]), &t(&[2, 2], &[2.0, 1.0, 0.0, 3.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, -2.5]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let err = affine(&t(&[1, 3], &[1.0, 2.0, 3.0]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(crate::Error::Shape(_))));
        let err = affine(&t(&[1, 2], &[1.0, 2.0]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3]));
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn bmm_transpose_matches_explicit() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.3).sin()); // stored k=3 × m=4
        let b = Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.7).cos());
        let out = bmm(&a, &b, true, false).unwrap();
        assert_eq!(out.shape(), &[2, 4, 5]);
        for bi in 0..2 {
            for m in 0..4 {
                for n in 0..5 {
                    let want: f64 = (0..3).map(|k| a.at(&[bi, k, m]) * b.at(&[bi, k, n])).sum();
                    assert!((out.at(&[bi, m, n]) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn split_takes_channel_range() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(split_channels(&x, 1, 2).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
        assert!(split_channels(&x, 2, 2).is_err());
    }
}
