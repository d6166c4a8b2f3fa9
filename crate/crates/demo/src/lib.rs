//! Browser bindings for three small interactive views: the reach of a
//! single source under the 1D and 2D scans, the merged four-direction
//! response with a correction mask, and one Darcy coefficient/solution pair.

use wasm_bindgen::prelude::*;

use geomano::cross_scan::{cross_scan, CorrectionMode, ScanMode};
use geomano::darcy::{generate_sample, GenOptions};
use geomano::scan::{scan1d_naive, scan2d_naive, uniform_correction, ScanInputs};
use geomano::Tensor;

const MAX_SIDE: usize = 64;

fn check_grid(height: usize, width: usize) -> Result<(), String> {
    if height == 0 || width == 0 || height > MAX_SIDE || width > MAX_SIDE {
        return Err(format!("grid sides must lie in 1..={MAX_SIDE}"));
    }
    Ok(())
}

fn check_decay(a: f64) -> Result<(), String> {
    if !(0.0..=1.0).contains(&a) {
        return Err("decay must lie in [0, 1]".into());
    }
    Ok(())
}

fn impulse(height: usize, width: usize, row: usize, col: usize) -> Result<Tensor, String> {
    if row >= height || col >= width {
        return Err(format!("source ({row}, {col}) lies outside the {height}×{width} grid"));
    }
    let mut x = Tensor::zeros(&[1, height, width, 1]);
    x.set(&[0, row, col, 0], 1.0);
    Ok(x)
}

/// Hidden state at every cell after a unit input at `(row, col)`, single
/// dstate with constant `Ā = a`, `B̄ = C = 1`. `mode` is `1d` (row-major
/// flattening) or `2d`.
pub fn influence(height: usize, width: usize, a: f64, mode: &str, row: usize, col: usize) -> Result<Vec<f64>, String> {
    check_grid(height, width)?;
    check_decay(a)?;
    let mode: ScanMode = mode.parse().map_err(|e| format!("{e}"))?;
    let x = impulse(height, width, row, col)?;
    let abar = Tensor::full(&[1, height, width, 1, 1], a);
    let bbar = Tensor::full(&[1, height, width, 1, 1], 1.0);
    let c = Tensor::full(&[1, height, width, 1], 1.0);
    let inputs = ScanInputs::new(&x, &abar, &bbar, &c);
    let y = match mode {
        ScanMode::Ssm1d => scan1d_naive(&inputs),
        ScanMode::Ssm2d => scan2d_naive(&inputs),
    }
    .map_err(|e| format!("{e}"))?;
    Ok(y.into_data())
}

/// Merged four-direction output for a unit input at `(row, col)` with the
/// fixed correction `mask` (four 0/1 digits, or `none`).
pub fn merged_response(
    height: usize,
    width: usize,
    a: f64,
    mode: &str,
    mask: &str,
    row: usize,
    col: usize,
) -> Result<Vec<f64>, String> {
    check_grid(height, width)?;
    check_decay(a)?;
    let mode: ScanMode = mode.parse().map_err(|e| format!("{e}"))?;
    let correction = if mask == "none" {
        CorrectionMode::None
    } else {
        CorrectionMode::parse("fixed", Some(mask), 0.0).map_err(|e| format!("{e}"))?
    };
    let x = impulse(height, width, row, col)?;
    let abar = Tensor::full(&[1, height, width, 1, 1], a);
    let bbar = Tensor::full(&[1, height, width, 1, 1], 1.0);
    let c = Tensor::full(&[1, height, width, 1], 1.0);
    let rs = uniform_correction(1, 1, 1.0);
    let per_direction = geomano::cross_scan::ScanDirection::ALL.map(|d| {
        let inputs = ScanInputs::new(&x, &abar, &bbar, &c);
        match correction.fixed_value(d) {
            Some(_) => inputs.with_correction(&rs),
            None => inputs,
        }
    });
    let y = cross_scan(&per_direction, mode).map_err(|e| format!("{e}"))?;
    Ok(y.into_data())
}

/// Coefficient followed by solution, each `size × size` row-major.
pub fn darcy_pair(size: usize, seed: u64) -> Result<Vec<f64>, String> {
    if !(8..=MAX_SIDE).contains(&size) {
        return Err(format!("size must lie in 8..={MAX_SIDE}"));
    }
    let opts = GenOptions { size, seed, ..GenOptions::default() };
    let sample = generate_sample(&opts, 0).map_err(|e| format!("{e}"))?;
    let mut out = sample.a.into_data();
    out.extend(sample.u.into_data());
    Ok(out)
}

#[wasm_bindgen]
pub fn scan_influence(height: usize, width: usize, a: f64, mode: &str, row: usize, col: usize) -> Result<Vec<f64>, JsValue> {
    influence(height, width, a, mode, row, col).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn cross_scan_response(
    height: usize,
    width: usize,
    a: f64,
    mode: &str,
    mask: &str,
    row: usize,
    col: usize,
) -> Result<Vec<f64>, JsValue> {
    merged_response(height, width, a, mode, mask, row, col).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn darcy_sample(size: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    darcy_pair(size, seed).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn influence_matches_closed_forms() {
        let two = influence(3, 3, 0.5, "2d", 0, 0).unwrap();
        // a^(i+j)
        assert!((two[8] - 0.0625).abs() < 1e-15);
        assert!((two[4] - 0.25).abs() < 1e-15);
        let one = influence(3, 3, 0.5, "1d", 0, 0).unwrap();
        assert!((one[8] - 0.5f64.powi(8)).abs() < 1e-15);
        assert!(influence(3, 3, 0.5, "3d", 0, 0).is_err());
        assert!(influence(3, 3, 0.5, "2d", 3, 0).is_err());
        assert!(influence(3, 3, 1.5, "2d", 0, 0).is_err());
    }

    #[test]
    fn correction_dampens_source() {
        let plain = merged_response(3, 3, 0.5, "2d", "none", 1, 1).unwrap();
        assert!((plain[4] - 4.0).abs() < 1e-12);
        let damped = merged_response(3, 3, 0.5, "2d", "0011", 1, 1).unwrap();
        assert!((damped[4] - 2.0).abs() < 1e-12);
        for k in [0, 1, 2, 3, 5, 6, 7, 8] {
            assert_eq!(plain[k], damped[k]);
        }
        assert!(merged_response(3, 3, 0.5, "2d", "01", 1, 1).is_err());
    }

    #[test]
    fn darcy_pair_layout() {
        let v = darcy_pair(16, 4).unwrap();
        assert_eq!(v.len(), 512);
        assert!(v[..256].iter().all(|&a| a == 3.0 || a == 12.0));
        assert!(v[256..].iter().all(|&u| u >= 0.0));
        assert!(darcy_pair(4, 0).is_err());
    }
}
