//! The GeoMamba kernel: input projection, depthwise convolution, four-way
//! corrected selective scan, gated merge and output projection.

use crate::cross_scan::{CorrectionMode, ScanDirection, ScanMode};
use crate::discretize::Discretization;
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::scan::{uniform_correction, CorrectionForm, ScanKind, ScanVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Log-uniform range of the initial step size `Δ`.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 0.1);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    pub embed_dim: usize,
    /// Width of the scanned path.
    pub inner: usize,
    pub n_dstates: usize,
    pub dt_rank: usize,
    pub conv_kernel: usize,
    pub mode: ScanMode,
    pub correction: CorrectionMode,
    pub form: CorrectionForm,
    pub discretization: Discretization,
    pub ln_eps: f64,
}

impl KernelConfig {
    pub fn new(embed_dim: usize, expand: usize, n_dstates: usize) -> Self {
        Self {
            embed_dim,
            inner: expand * embed_dim,
            n_dstates,
            dt_rank: embed_dim.div_ceil(16),
            conv_kernel: 3,
            mode: ScanMode::Ssm2d,
            correction: CorrectionMode::None,
            form: CorrectionForm::Injection,
            discretization: Discretization::Zoh,
            ln_eps: crate::ops::DEFAULT_LN_EPS,
        }
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn init_kernel(store: &mut ParamStore, prefix: &str, cfg: &KernelConfig, rng: &mut Rng) {
    let (d, e, n, k) = (cfg.embed_dim, cfg.inner, cfg.n_dstates, cfg.conv_kernel);
    store.init_affine(&format!("{prefix}.in_proj"), d, 2 * e, rng);
    let bound = 1.0 / k as f64;
    store.insert(format!("{prefix}.conv.weight"), Tensor::from_fn(&[k, k, e], |_| rng.uniform(-bound, bound)));
    store.insert(format!("{prefix}.conv.bias"), Tensor::zeros(&[e]));
    store.init_affine(&format!("{prefix}.dt_down"), e, cfg.dt_rank, rng);
    store.init_affine(&format!("{prefix}.dt_up"), cfg.dt_rank, e, rng);
    let (lo, hi) = (DT_INIT_RANGE.0.ln(), DT_INIT_RANGE.1.ln());
    store.insert(
        format!("{prefix}.dt_up.bias"),
        Tensor::from_fn(&[e], |_| inverse_softplus(rng.uniform(lo, hi).exp())),
    );
    store.init_affine(&format!("{prefix}.b_proj"), e, n, rng);
    store.init_affine(&format!("{prefix}.c_proj"), e, n, rng);
    for dir in ScanDirection::ALL {
        // A = −exp(A_log) = −(s + 1)
        store.insert(format!("{prefix}.{dir}.a_log"), Tensor::from_fn(&[n, e], |i| ((i / e + 1) as f64).ln()));
        store.insert(format!("{prefix}.{dir}.d"), Tensor::full(&[e], 1.0));
        if let CorrectionMode::Learnable(init) = cfg.correction {
            store.insert(format!("{prefix}.{dir}.rs"), Tensor::full(&[n, e], init));
        }
    }
    store.init_norm(&format!("{prefix}.out_norm"), e);
    store.init_affine(&format!("{prefix}.out_proj"), e, d, rng);
}

/// Kernel applied to `z` of shape `(B, H, W, embed_dim)`.
pub fn kernel_forward(tape: &mut Tape, params: &Bound, prefix: &str, cfg: &KernelConfig, z: Var) -> Result<Var> {
    let p = |name: &str| format!("{prefix}.{name}");
    let e = cfg.inner;
    let (height, width) = {
        let (_, h, w, _) = tape.value(z).grid_dims()?;
        (h, w)
    };

    let zp = tape.linear(params, &p("in_proj"), z)?;
    let path = tape.split_channels(zp, 0, e)?;
    let gate = tape.split_channels(zp, e, e)?;
    let conv = tape.depthwise_conv(path, params.get(&p("conv.weight"))?, params.get(&p("conv.bias"))?)?;
    let x = tape.silu(conv);

    let dt_low = tape.linear(params, &p("dt_down"), x)?;
    let dt_raw = tape.linear(params, &p("dt_up"), dt_low)?;
    let delta = tape.softplus(dt_raw);
    let b_in = tape.linear(params, &p("b_proj"), x)?;
    let c_in = tape.linear(params, &p("c_proj"), x)?;

    let kind = match cfg.mode {
        ScanMode::Ssm1d => ScanKind::Sequence,
        ScanMode::Ssm2d => ScanKind::Grid,
    };
    let mut merged = Vec::with_capacity(4);
    for dir in ScanDirection::ALL {
        let a_log = params.get(&p(&format!("{dir}.a_log")))?;
        let a = tape.neg_exp(a_log);
        let xt = tape.traverse(x, dir, cfg.mode)?;
        let dt = tape.traverse(delta, dir, cfg.mode)?;
        let bt = tape.traverse(b_in, dir, cfg.mode)?;
        let ct = tape.traverse(c_in, dir, cfg.mode)?;
        let abar = tape.discretize_a(a, dt)?;
        let bbar = tape.discretize_b(cfg.discretization, a, dt, bt)?;
        let rs = match cfg.correction {
            CorrectionMode::None => None,
            CorrectionMode::Fixed(_) => cfg
                .correction
                .fixed_value(dir)
                .map(|v| tape.constant(uniform_correction(cfg.n_dstates, e, v))),
            CorrectionMode::Learnable(_) => Some(params.get(&p(&format!("{dir}.rs")))?),
        };
        let d = Some(params.get(&p(&format!("{dir}.d")))?);
        let y = tape.scan(kind, ScanVars { x: xt, abar, bbar, c: ct, d, rs }, cfg.form)?;
        merged.push(tape.inverse_traverse(y, dir, cfg.mode, height, width)?);
    }
    let y = tape.add_all(&merged)?;

    let y = tape.norm(params, &p("out_norm"), y, cfg.ln_eps)?;
    let y = tape.silu(y);
    let g = tape.silu(gate);
    let y = tape.mul(y, g)?;
    tape.linear(params, &p("out_proj"), y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{condition_for_check, parameter_gradient_report};

    fn build(cfg: &KernelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_kernel(&mut store, "k", cfg, &mut Rng::new(seed));
        store
    }

    fn run(store: &ParamStore, cfg: &KernelConfig, z: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let z = tape.constant(z.clone());
        let out = kernel_forward(&mut tape, &params, "k", cfg, z).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn initial_step_sizes_in_range() {
        let cfg = KernelConfig::new(8, 2, 2);
        let store = build(&cfg, 1);
        for &b in store.get("k.dt_up.bias").unwrap().data() {
            let dt = crate::ops::softplus(&Tensor::scalar(b)).data()[0];
            assert!((DT_INIT_RANGE.0 * 0.999..=DT_INIT_RANGE.1 * 1.001).contains(&dt));
        }
        let a = crate::ops::neg_exp(store.get("k.d3.a_log").unwrap());
        assert_eq!(a.at(&[1, 0]), -2.0);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = KernelConfig::new(8, 2, 2);
        let y = run(&build(&cfg, 3), &cfg, &Tensor::zeros(&[2, 4, 4, 8]));
        assert_eq!(y.shape(), &[2, 4, 4, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modes_agree_on_single_row() {
        let mut rng = Rng::new(4);
        let z = Tensor::from_fn(&[1, 1, 5, 8], |_| rng.normal());
        let mut cfg = KernelConfig::new(8, 2, 2);
        cfg.correction = CorrectionMode::Fixed("0110".parse().unwrap());
        let store = build(&cfg, 5);
        let y2 = run(&store, &cfg, &z);
        cfg.mode = ScanMode::Ssm1d;
        let y1 = run(&store, &cfg, &z);
        assert!(y1.max_abs_diff(&y2).unwrap() <= 1e-12);
    }

    #[test]
    fn shape_preserved_on_odd_grids() {
        let mut rng = Rng::new(6);
        let cfg = KernelConfig::new(4, 2, 3);
        let store = build(&cfg, 6);
        for (h, w) in [(1, 1), (2, 5), (3, 3)] {
            let z = Tensor::from_fn(&[2, h, w, 4], |_| rng.normal());
            assert_eq!(run(&store, &cfg, &z).shape(), &[2, h, w, 4]);
        }
    }

    #[test]
    fn end_to_end_gradient() {
        for mode in [ScanMode::Ssm1d, ScanMode::Ssm2d] {
            let mut cfg = KernelConfig::new(4, 2, 2);
            cfg.mode = mode;
            cfg.correction = CorrectionMode::Learnable(0.25);
            let mut store = build(&cfg, 7);
            let mut rng = Rng::new(8);
            condition_for_check(&mut store, &mut rng);
            let z = Tensor::from_fn(&[1, 3, 3, 4], |_| rng.normal());
            let err = parameter_gradient_report(&store, &[z], 1e-4, &mut rng, |tape, params, extra| {
                kernel_forward(tape, params, "k", &cfg, extra[0])
            })
            .unwrap();
            assert!(err.passes(1e-5), "{mode}: {err:?}");
        }
    }

}
