//! Encoder, stacked GeoMaNO layers and decoder.
//!
//! The encoder lifts every grid point, assigns it to `L` latent patches by a
//! softmax over patches and pools the lifted features into an `H_p × W_p`
//! patch grid. The decoder reverses the assignment: every grid point
//! receives a convex combination of patch features.

use crate::cross_scan::{CorrectionMode, ScanMode};
use crate::discretize::Discretization;
use crate::error::{Error, Result};
use crate::kernel::{init_kernel, kernel_forward, KernelConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::scan::CorrectionForm;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub n_dstates: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Physical grid.
    pub grid: (usize, usize),
    /// Latent patch grid `H_p × W_p`.
    pub patches: (usize, usize),
    pub positional_encoding: bool,
    pub ssm_mode: ScanMode,
    pub correction: CorrectionMode,
    pub correction_form: CorrectionForm,
    pub discretization: Discretization,
    pub expand: usize,
    pub conv_kernel: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            embed_dim: 32,
            n_dstates: 8,
            in_channels: 3,
            out_channels: 1,
            grid: (64, 64),
            patches: (8, 8),
            positional_encoding: false,
            ssm_mode: ScanMode::Ssm2d,
            correction: CorrectionMode::Fixed(crate::cross_scan::DirectionMask([false, false, true, true])),
            correction_form: CorrectionForm::Injection,
            discretization: Discretization::Zoh,
            expand: 2,
            conv_kernel: 3,
            ln_eps: crate::ops::DEFAULT_LN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth < 1 {
            return fail("depth must be at least 1".into());
        }
        if self.embed_dim < 4 {
            return fail(format!("embed_dim must be at least 4, got {}", self.embed_dim));
        }
        if self.n_dstates < 1 || self.patch_count() < 1 || self.points() < 1 {
            return fail("dstates, patch count and grid size must be positive".into());
        }
        if self.in_channels < 1 || self.out_channels < 1 || self.expand < 1 {
            return fail("channel counts and expansion must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        self.patches.0 * self.patches.1
    }

    pub fn points(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            conv_kernel: self.conv_kernel,
            mode: self.ssm_mode,
            correction: self.correction,
            form: self.correction_form,
            discretization: self.discretization,
            ln_eps: self.ln_eps,
            ..KernelConfig::new(self.embed_dim, self.expand, self.n_dstates)
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeoMaNO {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl GeoMaNO {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self::init_unchecked(config, rng))
    }

    /// Initialization without the `depth ≥ 1` floor, for encoder/decoder
    /// baselines.
    pub fn init_unchecked(config: ModelConfig, rng: &mut Rng) -> Self {
        let d = config.embed_dim;
        let mut p = ParamStore::new();
        p.init_affine("encoder.lift_in", config.in_channels, d, rng);
        p.init_affine("encoder.lift_out", d, d, rng);
        p.init_affine("encoder.slice", d, config.patch_count(), rng);
        p.init_norm("encoder.norm", d);
        if config.positional_encoding {
            let (hp, wp) = config.patches;
            p.insert("encoder.position", Tensor::from_fn(&[hp, wp, d], |_| 0.02 * rng.normal()));
        }
        let kernel = config.kernel();
        for layer in 0..config.depth {
            let prefix = format!("layers.{layer}");
            p.init_norm(&format!("{prefix}.norm1"), d);
            init_kernel(&mut p, &format!("{prefix}.kernel"), &kernel, rng);
            p.init_norm(&format!("{prefix}.norm2"), d);
            p.init_affine(&format!("{prefix}.ffn_in"), d, 2 * d, rng);
            p.init_affine(&format!("{prefix}.ffn_out"), 2 * d, d, rng);
        }
        // No bias: a per-point offset is constant along the softmax axis.
        let bound = 1.0 / (d as f64).sqrt();
        p.insert("decoder.slice.weight", Tensor::from_fn(&[d, config.points()], |_| rng.uniform(-bound, bound)));
        p.init_affine("decoder.mix", d, d, rng);
        p.init_norm("decoder.norm", d);
        p.init_affine("decoder.head", d, config.out_channels, rng);
        Self { config, params: p }
    }

    /// Prediction without gradient bookkeeping beyond one throwaway tape.
    pub fn predict(&self, a: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let a = tape.constant(a.clone());
        let u = forward(&mut tape, &params, &self.config, a)?;
        Ok(tape.value(u).clone())
    }
}

/// `(B, H, W, D_i)` input to the `(B, H_p, W_p, D)` patch grid.
pub fn encode(tape: &mut Tape, params: &Bound, cfg: &ModelConfig, a: Var) -> Result<Var> {
    let (b, h, w, ci) = tape.value(a).grid_dims()?;
    if (h, w) != cfg.grid || ci != cfg.in_channels {
        return Err(crate::error::shape_err!(
            "input {:?} does not match grid {:?} with {} channels",
            tape.value(a).shape(),
            cfg.grid,
            cfg.in_channels
        ));
    }
    let d = cfg.embed_dim;
    let lifted = tape.linear(params, "encoder.lift_in", a)?;
    let lifted = tape.silu(lifted);
    let lifted = tape.linear(params, "encoder.lift_out", lifted)?;
    let y = tape.reshape(lifted, &[b, h * w, d])?;
    let logits = tape.linear(params, "encoder.slice", y)?;
    let assign = tape.softmax(logits, 2)?;
    let pooled = tape.bmm(assign, y, true, false)?;
    let z = tape.norm(params, "encoder.norm", pooled, cfg.ln_eps)?;
    let (hp, wp) = cfg.patches;
    let z = tape.reshape(z, &[b, hp, wp, d])?;
    if cfg.positional_encoding {
        let table = params.get("encoder.position")?;
        return tape.broadcast_add(z, table);
    }
    Ok(z)
}

/// Pre-norm residual layer: `S = Z + K(LN(Z))`, `Z' = S + FFN(LN(S))`.
pub fn geomano_layer(tape: &mut Tape, params: &Bound, cfg: &ModelConfig, layer: usize, z: Var) -> Result<Var> {
    let p = |name: &str| format!("layers.{layer}.{name}");
    let n1 = tape.norm(params, &p("norm1"), z, cfg.ln_eps)?;
    let k = kernel_forward(tape, params, &p("kernel"), &cfg.kernel(), n1)?;
    let s = tape.add(z, k)?;
    let n2 = tape.norm(params, &p("norm2"), s, cfg.ln_eps)?;
    let f = tape.linear(params, &p("ffn_in"), n2)?;
    let f = tape.silu(f);
    let f = tape.linear(params, &p("ffn_out"), f)?;
    tape.add(s, f)
}

/// `(B, H_p, W_p, D)` patch grid to the `(B, H, W, D_o)` output.
pub fn decode(tape: &mut Tape, params: &Bound, cfg: &ModelConfig, z: Var) -> Result<Var> {
    let (b, _, _, d) = tape.value(z).grid_dims()?;
    let z = tape.reshape(z, &[b, cfg.patch_count(), d])?;
    let no_bias = tape.constant(Tensor::zeros(&[cfg.points()]));
    let logits = tape.affine(z, params.get("decoder.slice.weight")?, no_bias)?;
    let assign = tape.softmax(logits, 1)?;
    let y = tape.bmm(assign, z, true, false)?;
    let y = tape.linear(params, "decoder.mix", y)?;
    let y = tape.norm(params, "decoder.norm", y, cfg.ln_eps)?;
    let u = tape.linear(params, "decoder.head", y)?;
    let (h, w) = cfg.grid;
    tape.reshape(u, &[b, h, w, cfg.out_channels])
}

pub fn forward(tape: &mut Tape, params: &Bound, cfg: &ModelConfig, a: Var) -> Result<Var> {
    let mut z = encode(tape, params, cfg, a)?;
    for layer in 0..cfg.depth {
        z = geomano_layer(tape, params, cfg, layer, z)?;
    }
    decode(tape, params, cfg, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{condition_for_check, parameter_gradient_report};

    fn small(depth: usize, grid: (usize, usize), patches: (usize, usize)) -> ModelConfig {
        ModelConfig { depth, embed_dim: 8, n_dstates: 2, grid, patches, ..ModelConfig::default() }
    }

    fn input(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[batch, cfg.grid.0, cfg.grid.1, cfg.in_channels], |_| rng.normal())
    }

    #[test]
    fn config_floor() {
        assert!(ModelConfig { depth: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { embed_dim: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn shapes() {
        let cfg = ModelConfig { embed_dim: 8, n_dstates: 2, grid: (32, 32), in_channels: 2, ..ModelConfig::default() };
        let model = GeoMaNO::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, false);
        let a = tape.constant(input(&cfg, 2, 2));
        let z = encode(&mut tape, &params, &cfg, a).unwrap();
        assert_eq!(tape.value(z).shape(), &[2, 8, 8, 8]);
        let u = decode(&mut tape, &params, &cfg, z).unwrap();
        assert_eq!(tape.value(u).shape(), &[2, 32, 32, 1]);
        assert!(tape.value(u).is_finite());
    }

    #[test]
    fn assignments_are_row_stochastic() {
        let cfg = small(1, (6, 5), (2, 3));
        let model = GeoMaNO::new(cfg.clone(), &mut Rng::new(3)).unwrap();
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, false);
        let a = tape.constant(input(&cfg, 2, 4));
        forward(&mut tape, &params, &cfg, a).unwrap();
        let softmaxes: Vec<Tensor> = (0..tape.len())
            .map(crate::tape::Var::from_index)
            .filter(|v| tape.op_name(*v) == Some("softmax"))
            .map(|v| tape.value(v).clone())
            .collect();
        assert_eq!(softmaxes.len(), 2);
        // encoder sums over the trailing patch axis, decoder over axis 1
        for row in softmaxes[0].data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let dec = &softmaxes[1];
        let (l, p) = (dec.dim(1), dec.dim(2));
        for b in 0..2 {
            for j in 0..p {
                let s: f64 = (0..l).map(|i| dec.data()[(b * l + i) * p + j]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_patch_pools_every_point() {
        let cfg = small(1, (4, 4), (1, 1));
        let model = GeoMaNO::new(cfg.clone(), &mut Rng::new(5)).unwrap();
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, false);
        let z = tape.constant(Tensor::from_fn(&[1, 1, 1, 8], |i| i as f64));
        let u = decode(&mut tape, &params, &cfg, z).unwrap();
        let u = tape.value(u);
        assert!(u.data().iter().all(|&v| (v - u.data()[0]).abs() < 1e-12));
    }

    #[test]
    fn zero_branches_make_layers_identity() {
        let cfg = small(2, (4, 4), (2, 2));
        let mut model = GeoMaNO::new(cfg.clone(), &mut Rng::new(6)).unwrap();
        for (name, value) in model.params.iter_mut() {
            if name.ends_with("out_proj.weight") || name.ends_with("ffn_out.weight") {
                *value = Tensor::zeros(value.shape());
            }
        }
        let mut rng = Rng::new(7);
        let z0 = Tensor::from_fn(&[1, 2, 2, 8], |_| rng.normal());
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, false);
        let z = tape.leaf(z0.clone());
        let out = geomano_layer(&mut tape, &params, &cfg, 1, z).unwrap();
        assert_eq!(tape.value(out), &z0);
        let seed = Tensor::from_fn(z0.shape(), |i| i as f64);
        let grads = tape.backward(out, seed.clone()).unwrap();
        assert_eq!(grads.get(z).unwrap(), &seed);
    }

    #[test]
    fn deterministic() {
        let cfg = small(1, (6, 6), (2, 2));
        let a = input(&cfg, 2, 9);
        let m1 = GeoMaNO::new(cfg.clone(), &mut Rng::new(10)).unwrap();
        let m2 = GeoMaNO::new(cfg, &mut Rng::new(10)).unwrap();
        assert_eq!(m1.predict(&a).unwrap(), m2.predict(&a).unwrap());
    }

    #[test]
    fn encoder_decoder_baseline_without_layers() {
        let cfg = small(0, (4, 4), (2, 2));
        let model = GeoMaNO::init_unchecked(cfg.clone(), &mut Rng::new(11));
        let u = model.predict(&input(&cfg, 1, 12)).unwrap();
        assert_eq!(u.shape(), &[1, 4, 4, 1]);
    }

    #[test]
    fn layer_gradient() {
        let cfg = small(1, (3, 3), (3, 3));
        let mut model = GeoMaNO::new(cfg.clone(), &mut Rng::new(13)).unwrap();
        let mut rng = Rng::new(14);
        condition_for_check(&mut model.params, &mut rng);
        let z = Tensor::from_fn(&[1, 3, 3, 8], |_| rng.normal());
        let err = parameter_gradient_report(&model.params, &[z], 1e-4, &mut rng, |tape, params, extra| {
            geomano_layer(tape, params, &cfg, 0, extra[0])
        })
        .unwrap();
        assert!(err.passes(1e-5), "{err:?}");
    }

    #[test]
    fn full_model_gradient() {
        let cfg = small(1, (8, 8), (2, 2));
        let mut model = GeoMaNO::new(cfg.clone(), &mut Rng::new(15)).unwrap();
        let mut rng = Rng::new(16);
        condition_for_check(&mut model.params, &mut rng);
        let a = input(&cfg, 1, 17);
        let err = parameter_gradient_report(&model.params, &[a], 1e-4, &mut rng, |tape, params, extra| {
            forward(tape, params, &cfg, extra[0])
        })
        .unwrap();
        assert!(err.passes(1e-5), "{err:?}");
    }
}
