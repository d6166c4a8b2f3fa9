use crate::error::{shape_err, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Depthwise `K×K` convolution with zero padding and stride 1 over a
/// `(b, h, w, c)` grid; `weight` is `(K, K, c)`, `bias` is `(c)`.
pub fn depthwise_conv(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, h, w, c, k) = dims(x, weight, bias)?;
    let pad = k / 2;
    let mut out = Tensor::zeros(x.shape());
    let (xd, wd) = (x.data(), weight.data());
    let od = out.data_mut();
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let o = ((bi * h + i) * w + j) * c;
                od[o..o + c].copy_from_slice(bias.data());
                for di in 0..k {
                    let Some(si) = (i + di).checked_sub(pad).filter(|&v| v < h) else { continue };
                    for dj in 0..k {
                        let Some(sj) = (j + dj).checked_sub(pad).filter(|&v| v < w) else { continue };
                        let s = ((bi * h + si) * w + sj) * c;
                        let wo = (di * k + dj) * c;
                        for e in 0..c {
                            od[o + e] += wd[wo + e] * xd[s + e];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, h, w, c) = x.grid_dims()?;
    let k = weight.dim(0);
    if weight.shape() != [k, k, c] || k.is_multiple_of(2) || bias.shape() != [c] {
        return Err(shape_err!(
            "depthwise conv needs an odd (K, K, {c}) kernel and ({c}) bias, got {:?} and {:?}",
            weight.shape(),
            bias.shape()
        ));
    }
    Ok((b, h, w, c, k))
}

struct ConvBack;

impl Backward for ConvBack {
    fn name(&self) -> &'static str {
        "depthwise_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, weight) = (inputs[0], inputs[1]);
        let (b, h, w, c, k) = dims(x, weight, inputs[2]).unwrap();
        let pad = k / 2;
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(weight.shape());
        let mut gb = Tensor::zeros(&[c]);
        let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let o = ((bi * h + i) * w + j) * c;
                    for e in 0..c {
                        gb.data_mut()[e] += gd[o + e];
                    }
                    for di in 0..k {
                        let Some(si) = (i + di).checked_sub(pad).filter(|&v| v < h) else { continue };
                        for dj in 0..k {
                            let Some(sj) = (j + dj).checked_sub(pad).filter(|&v| v < w) else { continue };
                            let s = ((bi * h + si) * w + sj) * c;
                            let wo = (di * k + dj) * c;
                            for e in 0..c {
                                gx.data_mut()[s + e] += wd[wo + e] * gd[o + e];
                                gw.data_mut()[wo + e] += xd[s + e] * gd[o + e];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

impl Tape {
    pub fn depthwise_conv(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = depthwise_conv(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(out, &[x, weight, bias], ConvBack))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_tap_is_identity() {
        let x = Tensor::from_fn(&[1, 3, 4, 2], |i| i as f64);
        let mut w = Tensor::zeros(&[3, 3, 2]);
        w.set(&[1, 1, 0], 1.0);
        w.set(&[1, 1, 1], 1.0);
        let y = depthwise_conv(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_padding_at_corner() {
        let x = Tensor::full(&[1, 2, 2, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1], 1.0);
        let y = depthwise_conv(&x, &w, &Tensor::zeros(&[1])).unwrap();
        // every pixel of a 2×2 grid sees all four pixels
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }
}
