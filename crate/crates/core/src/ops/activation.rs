use crate::error::{shape_err, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_ABOVE {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `x · logistic(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * logistic(v))
}

/// `ln(1 + exp(x))`, linear above 30.
pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// `-exp(x)`; keeps state decay rates strictly negative.
pub fn neg_exp(x: &Tensor) -> Tensor {
    x.map(|v| -v.exp())
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x, axis)?;
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).map(|k| data[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (data[base + k * inner] - max).exp();
                total += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                data[base + k * inner] = b / total;
            }
        }
    }
    Ok(out)
}

fn axis_split(x: &Tensor, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= x.rank() {
        return Err(shape_err!("softmax axis {} out of range for shape {:?}", axis, x.shape()));
    }
    let outer = x.shape()[..axis].iter().product();
    let inner = x.shape()[axis + 1..].iter().product();
    Ok((outer, x.dim(axis), inner))
}

struct SiluBack;
impl Backward for SiluBack {
    fn name(&self) -> &'static str {
        "silu"
    }
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = inputs[0]
            .zip_map(grad, |x, g| {
                let s = logistic(x);
                g * s * (1.0 + x * (1.0 - s))
            })
            .unwrap();
        vec![Some(g)]
    }
}

struct SoftplusBack;
impl Backward for SoftplusBack {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn backward(&self, inputs: &[&Tensor], _o: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = inputs[0]
            .zip_map(grad, |x, g| if x > SOFTPLUS_LINEAR_ABOVE { g } else { g * logistic(x) })
            .unwrap();
        vec![Some(g)]
    }
}

struct NegExpBack;
impl Backward for NegExpBack {
    fn name(&self) -> &'static str {
        "neg_exp"
    }
    fn backward(&self, _i: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(out.zip_map(grad, |y, g| y * g).unwrap())]
    }
}

struct SoftmaxBack {
    axis: usize,
}
impl Backward for SoftmaxBack {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, _i: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (outer, n, inner) = axis_split(out, self.axis).unwrap();
        let mut gx = Tensor::zeros(out.shape());
        let (y, g, gxd) = (out.data(), grad.data(), gx.data_mut());
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let dot: f64 = (0..n).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                for k in 0..n {
                    let p = base + k * inner;
                    gxd[p] = y[p] * (g[p] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

impl Tape {
    pub fn silu(&mut self, x: Var) -> Var {
        let out = silu(self.value(x));
        self.push(out, &[x], SiluBack)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = softplus(self.value(x));
        self.push(out, &[x], SoftplusBack)
    }

    pub fn neg_exp(&mut self, x: Var) -> Var {
        let out = neg_exp(self.value(x));
        self.push(out, &[x], NegExpBack)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        Ok(self.push(out, &[x], SoftmaxBack { axis }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let y = softplus(&Tensor::scalar(0.0));
        assert!((y.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_overflow_branch() {
        let y = softplus(&Tensor::new(&[2], vec![800.0, -800.0]).unwrap());
        assert_eq!(y.data()[0], 800.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let y = softmax(&Tensor::full(&[1, 3], 7.5), 1).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin() * 3.0);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y.at(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn silu_limits() {
        let y = silu(&Tensor::new(&[2], vec![0.0, 20.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-7);
    }
}
