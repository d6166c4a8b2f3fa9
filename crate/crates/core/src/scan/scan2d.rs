//! Two-pass 2D selective scan: a horizontal recurrence produces `g`, a
//! vertical recurrence over `g` produces `h`, both driven by the same `Ā`.

use rayon::prelude::*;

use super::scan1d::{merge_batches, read_out};
use super::{Dims, ScanGrads, ScanInputs};
use crate::error::Result;
use crate::tensor::Tensor;

/// `g[i,j] = Ā[i,j]∘g[i,j−1] + B̄[i,j]∘x[i,j]`,
/// `h[i,j] = Ā[i,j]∘h[i−1,j] + g[i,j]`, with zero boundary states.
pub fn scan2d_naive(inputs: &ScanInputs<'_>) -> Result<Tensor> {
    let (dims, height, width) = inputs.grid_dims()?;
    inputs.check_finite()?;
    let Dims { n, e, .. } = dims;
    let ne = n * e;
    let mut y = Tensor::zeros(inputs.x.shape());
    y.data_mut().par_chunks_mut(height * width * e).enumerate().for_each(|(bi, y_b)| {
        let mut h = vec![0.0; width * ne];
        let mut g = vec![0.0; ne];
        for i in 0..height {
            g.fill(0.0);
            for j in 0..width {
                let pos = (bi * height + i) * width + j;
                let a = &inputs.abar.data()[pos * ne..(pos + 1) * ne];
                let bb = &inputs.bbar.data()[pos * ne..(pos + 1) * ne];
                let x = &inputs.x.data()[pos * e..(pos + 1) * e];
                let h_col = &mut h[j * ne..(j + 1) * ne];
                for s in 0..n {
                    let o = s * e;
                    for k in 0..e {
                        g[o + k] = a[o + k] * g[o + k] + bb[o + k] * x[k];
                        h_col[o + k] = a[o + k] * h_col[o + k] + g[o + k];
                    }
                }
                let y_row = &mut y_b[(i * width + j) * e..(i * width + j + 1) * e];
                read_out(inputs, &dims, pos, h_col, y_row);
                inputs.add_local_terms(&dims, pos, y_row);
            }
        }
    });
    Ok(y)
}

/// Adjoint of [`scan2d_naive`]. The `g` and `h` fields of one batch element
/// are recomputed before its reverse sweep.
pub fn scan2d_vjp(inputs: &ScanInputs<'_>, gy: &Tensor) -> Result<ScanGrads> {
    let (dims, height, width) = inputs.grid_dims()?;
    inputs.x.expect_same_shape(gy)?;
    let Dims { b, n, e, .. } = dims;
    let ne = n * e;
    let cells = height * width;

    let per_batch: Vec<ScanGrads> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let base = bi * cells;
            let a_all = &inputs.abar.data()[base * ne..(base + cells) * ne];
            let b_all = &inputs.bbar.data()[base * ne..(base + cells) * ne];
            let x_all = &inputs.x.data()[base * e..(base + cells) * e];
            let c_all = &inputs.c.data()[base * n..(base + cells) * n];
            let gy_all = &gy.data()[base * e..(base + cells) * e];

            let mut g = vec![0.0; cells * ne];
            let mut h = vec![0.0; cells * ne];
            for i in 0..height {
                for j in 0..width {
                    let p = i * width + j;
                    for s in 0..n {
                        for k in 0..e {
                            let q = p * ne + s * e + k;
                            let g_left = if j > 0 { g[q - ne] } else { 0.0 };
                            g[q] = a_all[q] * g_left + b_all[q] * x_all[p * e + k];
                            let h_up = if i > 0 { h[q - width * ne] } else { 0.0 };
                            h[q] = a_all[q] * h_up + g[q];
                        }
                    }
                }
            }

            let mut grads = ScanGrads::lane(inputs, cells);
            // a[i+1,j]·gh[i+1,j] for every column, and a[i,j+1]·gg[i,j+1] along the row
            let mut carry_down = vec![0.0; width * ne];
            let mut carry_right = vec![0.0; ne];
            for i in (0..height).rev() {
                carry_right.fill(0.0);
                for j in (0..width).rev() {
                    let p = i * width + j;
                    let pos = base + p;
                    let ga = &mut grads.abar.data_mut()[p * ne..(p + 1) * ne];
                    let gbb = &mut grads.bbar.data_mut()[p * ne..(p + 1) * ne];
                    let gx = &mut grads.x.data_mut()[p * e..(p + 1) * e];
                    let gc = &mut grads.c.data_mut()[p * n..(p + 1) * n];
                    let down = &mut carry_down[j * ne..(j + 1) * ne];
                    for s in 0..n {
                        let mut gc_s = 0.0;
                        for k in 0..e {
                            let o = s * e + k;
                            let q = p * ne + o;
                            let gyk = gy_all[p * e + k];
                            let gh = c_all[p * n + s] * gyk + down[o];
                            let gg = gh + carry_right[o];
                            let h_up = if i > 0 { h[q - width * ne] } else { 0.0 };
                            let g_left = if j > 0 { g[q - ne] } else { 0.0 };
                            ga[o] += gh * h_up + gg * g_left;
                            gbb[o] += gg * x_all[p * e + k];
                            gx[k] += gg * b_all[q];
                            gc_s += gyk * h[q];
                            down[o] = a_all[q] * gh;
                            carry_right[o] = a_all[q] * gg;
                        }
                        gc[s] += gc_s;
                    }
                    inputs.local_terms_vjp(&dims, pos, p, &gy_all[p * e..(p + 1) * e], &mut grads);
                }
            }
            grads
        })
        .collect();
    Ok(merge_batches(inputs, per_batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::scan::scan1d_naive;
    use crate::scan::testutil::Operands;
    use proptest::prelude::*;

    /// Direct evaluation of the closed form
    /// `h[i,j] = Σ_{i'≤i, j'≤j} a^{(i−i')+(j−j')}·b·x[i',j']`.
    fn manhattan_sum(x: &[f64], width: usize, i: usize, j: usize, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        for ip in 0..=i {
            for jp in 0..=j {
                acc += a.powi(((i - ip) + (j - jp)) as i32) * b * x[ip * width + jp];
            }
        }
        acc
    }

    #[test]
    fn three_by_three_closed_form() {
        let x = Tensor::full(&[1, 3, 3, 1], 1.0);
        let a = Tensor::full(&[1, 3, 3, 1, 1], 0.5);
        let b = Tensor::full(&[1, 3, 3, 1, 1], 1.0);
        let c = Tensor::full(&[1, 3, 3, 1], 1.0);
        let inputs = ScanInputs::new(&x, &a, &b, &c);
        let y2 = scan2d_naive(&inputs).unwrap();
        assert!((y2.data()[8] - 3.0625).abs() < 1e-15);
        let y1 = scan1d_naive(&inputs).unwrap();
        assert!((y1.data()[8] - 1.99609375).abs() < 1e-15);
    }

    #[test]
    fn manhattan_powers_up_to_four_by_four() {
        let mut rng = Rng::new(21);
        for (height, width) in [(2, 3), (3, 3), (4, 4), (4, 2)] {
            let x = Tensor::from_fn(&[1, height, width, 1], |_| rng.uniform(-1.0, 1.0));
            let (av, bv) = (0.6, 1.7);
            let a = Tensor::full(&[1, height, width, 1, 1], av);
            let b = Tensor::full(&[1, height, width, 1, 1], bv);
            let c = Tensor::full(&[1, height, width, 1], 1.0);
            let y = scan2d_naive(&ScanInputs::new(&x, &a, &b, &c)).unwrap();
            for i in 0..height {
                for j in 0..width {
                    let expect = manhattan_sum(x.data(), width, i, j, av, bv);
                    assert!((y.data()[i * width + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_cell_adjoint() {
        let mut rng = Rng::new(2);
        let ops = Operands::random(&mut rng, &[1, 1, 1], 2, 3);
        let g = scan2d_vjp(&ops.inputs(), &Tensor::full(&[1, 1, 1, 3], 1.0)).unwrap();
        for k in 0..3 {
            let expect: f64 = (0..2)
                .map(|s| (ops.c.data()[s] - ops.rs.data()[s * 3 + k]) * ops.bbar.data()[s * 3 + k])
                .sum::<f64>()
                + ops.d.data()[k];
            assert!((g.x.data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_support_is_upper_left_cone() {
        let mut rng = Rng::new(8);
        let ops = Operands::random(&mut rng, &[1, 4, 5], 2, 2);
        let (ti, tj) = (2, 3);
        let mut seed = Tensor::zeros(&[1, 4, 5, 2]);
        seed.data_mut()[(ti * 5 + tj) * 2] = 1.0;
        let g = scan2d_vjp(&ops.inputs(), &seed).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let inside = i <= ti && j <= tj;
                let v = g.x.data()[(i * 5 + j) * 2];
                assert_eq!(v != 0.0, inside, "({i},{j})");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn degenerates_to_1d_on_rows_and_columns(seed in any::<u64>(), len in 1usize..12, column in any::<bool>()) {
            let mut rng = Rng::new(seed);
            let lead = if column { [2, len, 1] } else { [2, 1, len] };
            let ops = Operands::random(&mut rng, &lead, 3, 2);
            let y2 = scan2d_naive(&ops.inputs()).unwrap();
            let y1 = scan1d_naive(&ops.inputs()).unwrap();
            prop_assert!(y2.max_abs_diff(&y1).unwrap() <= 1e-12);
        }

        #[test]
        fn output_depends_on_upper_left_cone_only(seed in any::<u64>(), pi in 0usize..4, pj in 0usize..5) {
            let mut rng = Rng::new(seed);
            let ops = Operands::random(&mut rng, &[1, 4, 5], 2, 2);
            let base = scan2d_naive(&ops.inputs()).unwrap();
            let mut x = ops.x.clone();
            x.data_mut()[(pi * 5 + pj) * 2 + 1] += 0.5;
            let moved = scan2d_naive(&ScanInputs { x: &x, ..ops.inputs() }).unwrap();
            for i in 0..4 {
                for j in 0..5 {
                    if i < pi || j < pj {
                        let at = (i * 5 + j) * 2;
                        prop_assert_eq!(&base.data()[at..at + 2], &moved.data()[at..at + 2]);
                    }
                }
            }
        }
    }
}
