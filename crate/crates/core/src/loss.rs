//! Relative-L2 metric and the gradient-regularized training loss.

use crate::error::{Error, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Per-sample `‖pred − gt‖ / ‖gt‖` over the leading axis.
pub fn rel_l2_per_sample(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    pred.expect_same_shape(gt)?;
    if pred.rank() == 0 || pred.dim(0) == 0 {
        return Err(crate::error::shape_err!("rel_l2 needs a leading batch axis, got {:?}", pred.shape()));
    }
    let per = pred.len() / pred.dim(0);
    pred.data()
        .chunks_exact(per)
        .zip(gt.data().chunks_exact(per))
        .map(|(p, g)| {
            let den = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(den > 0.0) {
                return Err(Error::Metric("relative error of a zero ground truth".into()));
            }
            let num = p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            Ok(num / den)
        })
        .collect()
}

/// Batch mean of [`rel_l2_per_sample`].
pub fn rel_l2(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let per = rel_l2_per_sample(pred, gt)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Derivative of a `(B, H, W, C)` grid along `axis` (1 for rows, 2 for
/// columns) in index units: central differences inside, one-sided at the
/// edges.
pub fn spatial_diff(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.grid_dims()?;
    let (n, stride) = diff_layout(axis, h, w, c)?;
    let mut out = Tensor::zeros(x.shape());
    for_each_line(b, h, w, c, axis, |base| {
        let src = x.data();
        let dst = out.data_mut();
        for k in 0..n {
            let at = |i: usize| src[base + i * stride];
            dst[base + k * stride] = match k {
                0 => at(1) - at(0),
                k if k == n - 1 => at(k) - at(k - 1),
                k => 0.5 * (at(k + 1) - at(k - 1)),
            };
        }
    });
    Ok(out)
}

fn spatial_diff_transpose(grad: &Tensor, axis: usize) -> Tensor {
    let (b, h, w, c) = grad.grid_dims().expect("checked in forward");
    let (n, stride) = diff_layout(axis, h, w, c).expect("checked in forward");
    let mut out = Tensor::zeros(grad.shape());
    for_each_line(b, h, w, c, axis, |base| {
        let g = grad.data();
        let dst = out.data_mut();
        let mut add = |i: usize, v: f64| dst[base + i * stride] += v;
        for k in 0..n {
            let gk = g[base + k * stride];
            match k {
                0 => {
                    add(1, gk);
                    add(0, -gk);
                }
                k if k == n - 1 => {
                    add(k, gk);
                    add(k - 1, -gk);
                }
                k => {
                    add(k + 1, 0.5 * gk);
                    add(k - 1, -0.5 * gk);
                }
            }
        }
    });
    out
}

fn diff_layout(axis: usize, h: usize, w: usize, c: usize) -> Result<(usize, usize)> {
    let (n, stride) = match axis {
        1 => (h, w * c),
        2 => (w, c),
        _ => return Err(crate::error::shape_err!("spatial axis must be 1 or 2, got {axis}")),
    };
    if n < 2 {
        return Err(crate::error::shape_err!("differencing needs at least 2 nodes along axis {axis}"));
    }
    Ok((n, stride))
}

/// Calls `f` with the flat offset of the first node of every line along
/// `axis`.
fn for_each_line(b: usize, h: usize, w: usize, c: usize, axis: usize, mut f: impl FnMut(usize)) {
    let (lines, line_stride) = if axis == 1 { (w, c) } else { (h, w * c) };
    for bi in 0..b {
        for line in 0..lines {
            for ch in 0..c {
                f(bi * h * w * c + line * line_stride + ch);
            }
        }
    }
}

struct RelL2Back;
impl Backward for RelL2Back {
    fn name(&self) -> &'static str {
        "rel_l2"
    }
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (pred, gt) = (inputs[0], inputs[1]);
        let b = pred.dim(0);
        let per = pred.len() / b;
        let scale = grad.data()[0] / b as f64;
        let mut gp = Tensor::zeros(pred.shape());
        let mut gg = Tensor::zeros(pred.shape());
        let lines = gp.data_mut().chunks_exact_mut(per).zip(gg.data_mut().chunks_exact_mut(per));
        for ((dp, dg), (p, g)) in lines.zip(pred.data().chunks_exact(per).zip(gt.data().chunks_exact(per))) {
            let den = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let num = p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            for k in 0..per {
                let diff = if num > 0.0 { (p[k] - g[k]) / (num * den) } else { 0.0 };
                dp[k] = scale * diff;
                dg[k] = scale * (-diff - num * g[k] / den.powi(3));
            }
        }
        vec![Some(gp), Some(gg)]
    }
}

/// `(B, H, W, C)` to `(B, H, W, 2C)`: row derivatives in the first `C`
/// channels, column derivatives in the last `C`.
pub fn spatial_gradient(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.grid_dims()?;
    let (dy, dx) = (spatial_diff(x, 1)?, spatial_diff(x, 2)?);
    let mut out = Vec::with_capacity(2 * x.len());
    for (ry, rx) in dy.data().chunks_exact(c).zip(dx.data().chunks_exact(c)) {
        out.extend_from_slice(ry);
        out.extend_from_slice(rx);
    }
    Tensor::grid(b, h, w, 2 * c, out)
}

struct GradientBack;
impl Backward for GradientBack {
    fn name(&self) -> &'static str {
        "spatial_gradient"
    }
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = inputs[0].channels();
        let (mut gy, mut gx) = (Tensor::zeros(inputs[0].shape()), Tensor::zeros(inputs[0].shape()));
        let rows = gy.data_mut().chunks_exact_mut(c).zip(gx.data_mut().chunks_exact_mut(c));
        for ((y, x), g) in rows.zip(grad.data().chunks_exact(2 * c)) {
            y.copy_from_slice(&g[..c]);
            x.copy_from_slice(&g[c..]);
        }
        let mut total = spatial_diff_transpose(&gy, 1);
        total.add_assign(&spatial_diff_transpose(&gx, 2)).expect("same shape");
        vec![Some(total)]
    }
}

impl Tape {
    /// Scalar batch-mean relative error; `gt` is usually a constant.
    pub fn rel_l2(&mut self, pred: Var, gt: Var) -> Result<Var> {
        let value = rel_l2(self.value(pred), self.value(gt))?;
        Ok(self.push(Tensor::scalar(value), &[pred, gt], RelL2Back))
    }

    pub fn spatial_gradient(&mut self, x: Var) -> Result<Var> {
        let out = spatial_gradient(self.value(x))?;
        Ok(self.push(out, &[x], GradientBack))
    }

    /// `rel_l2(pred, gt) + λ_g · rel_l2(∇pred, ∇gt)`, the second term over
    /// both derivative directions jointly.
    pub fn darcy_loss(&mut self, pred: Var, gt: Var, lambda_g: f64) -> Result<Var> {
        let base = self.rel_l2(pred, gt)?;
        if lambda_g == 0.0 {
            return Ok(base);
        }
        let dp = self.spatial_gradient(pred)?;
        let dg = self.spatial_gradient(gt)?;
        let r = self.rel_l2(dp, dg)?;
        let r = self.scale_shift(r, lambda_g, 0.0);
        self.add(base, r)
    }
}

/// Value of [`Tape::darcy_loss`] without recording.
pub fn darcy_loss(pred: &Tensor, gt: &Tensor, lambda_g: f64) -> Result<f64> {
    let mut loss = rel_l2(pred, gt)?;
    if lambda_g != 0.0 {
        loss += lambda_g * rel_l2(&spatial_gradient(pred)?, &spatial_gradient(gt)?)?;
    }
    Ok(loss)
}
