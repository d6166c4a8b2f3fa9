use crate::error::{shape_err, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Normalizes every row over the channel axis with population variance, then
/// applies `gain ⊙ x̂ + shift`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(forward(x, gain, shift, eps)?.0)
}

fn forward(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let c = x.channels();
    if c == 0 || gain.shape() != [c] || shift.shape() != [c] {
        return Err(shape_err!(
            "layer_norm over {} channels with gain {:?} and shift {:?}",
            c,
            gain.shape(),
            shift.shape()
        ));
    }
    if !(eps >= 0.0) {
        return Err(crate::Error::Contract(format!("layer_norm eps must be non-negative, got {eps}")));
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(x.len());
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for ((v, g), s) in row.iter().zip(gain.data()).zip(shift.data()) {
            out.push(g * (v - mean) * rstd + s);
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape(), out)?, means, rstds))
}

struct LayerNormBack {
    means: Vec<f64>,
    rstds: Vec<f64>,
}

impl Backward for LayerNormBack {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let c = x.channels();
        let mut gx = Tensor::zeros(x.shape());
        let mut ggain = Tensor::zeros(&[c]);
        let mut gshift = Tensor::zeros(&[c]);
        let mut xhat = vec![0.0; c];
        let mut gxhat = vec![0.0; c];
        for (r, ((row, grow), gxrow)) in x
            .data()
            .chunks_exact(c)
            .zip(grad.data().chunks_exact(c))
            .zip(gx.data_mut().chunks_exact_mut(c))
            .enumerate()
        {
            let (mean, rstd) = (self.means[r], self.rstds[r]);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for k in 0..c {
                xhat[k] = (row[k] - mean) * rstd;
                gxhat[k] = grow[k] * gain.data()[k];
                sum_g += gxhat[k];
                sum_gx += gxhat[k] * xhat[k];
                ggain.data_mut()[k] += grow[k] * xhat[k];
                gshift.data_mut()[k] += grow[k];
            }
            let (mg, mgx) = (sum_g / c as f64, sum_gx / c as f64);
            for k in 0..c {
                gxrow[k] = rstd * (gxhat[k] - mg - xhat[k] * mgx);
            }
        }
        vec![Some(gx), Some(ggain), Some(gshift)]
    }
}

impl Tape {
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (out, means, rstds) = forward(self.value(x), self.value(gain), self.value(shift), eps)?;
        Ok(self.push(out, &[x, gain, shift], LayerNormBack { means, rstds }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ln(x: &[f64], eps: f64) -> Vec<f64> {
        let c = x.len();
        let x = Tensor::new(&[1, c], x.to_vec()).unwrap();
        layer_norm(&x, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c]), eps).unwrap().into_data()
    }

    #[test]
    fn constant_row_maps_to_zero() {
        assert_eq!(ln(&[1.0, 1.0, 1.0, 1.0], DEFAULT_LN_EPS), vec![0.0; 4]);
    }

    #[test]
    fn unit_row_is_fixed_point() {
        let out = ln(&[1.0, -1.0], 1e-14);
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn three_point_example() {
        // (x - 2) / sqrt(8/3)
        let out = ln(&[0.0, 2.0, 4.0], 0.0);
        let s = (8.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(out[0], -2.0 / s, epsilon = 1e-14);
        assert_abs_diff_eq!(out[0], -1.2247, epsilon = 1e-4);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[2], 1.2247, epsilon = 1e-4);
    }
}
