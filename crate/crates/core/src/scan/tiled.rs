//! Tile-parallel 2D scan.
//!
//! The grid is cut into `T×T` tiles visited in row-major tile order. Inside a
//! tile, each row runs an associative prefix scan seeded by the carried
//! horizontal prefix `P_hor` (the `g` state just left of the tile), then each
//! column runs one seeded by the carried vertical prefix `P_ver` (the `h`
//! state just above the tile). Only these boundary states outlive a tile.

use rayon::prelude::*;

use super::prefix::inclusive_scan_in_place;
use super::{Dims, ScanInputs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const F64: usize = std::mem::size_of::<f64>();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tile: usize,
    pub height: usize,
    pub width: usize,
}

impl TilePlan {
    pub fn new(height: usize, width: usize, tile: usize) -> Result<Self> {
        if tile == 0 {
            return Err(Error::Config("tile size must be at least 1".into()));
        }
        Ok(Self { tile, height, width })
    }

    pub fn tile_rows(&self) -> usize {
        self.height.div_ceil(self.tile)
    }

    pub fn tile_cols(&self) -> usize {
        self.width.div_ceil(self.tile)
    }

    /// Row and column ranges of every tile in row-major plan order.
    pub fn tiles(&self) -> impl Iterator<Item = (std::ops::Range<usize>, std::ops::Range<usize>)> + '_ {
        let t = self.tile;
        (0..self.tile_rows()).flat_map(move |kh| {
            (0..self.tile_cols()).map(move |kw| {
                (kh * t..((kh + 1) * t).min(self.height), kw * t..((kw + 1) * t).min(self.width))
            })
        })
    }
}

/// Working-set accounting for one [`tiled_scan2d_with_stats`] call.
///
/// Byte counts are per batch lane; `lanes` lanes may run at once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TileStats {
    pub tiles: usize,
    pub lanes: usize,
    /// Carried `P_hor` and `P_ver` states.
    pub prefix_bytes: usize,
    /// Tile-local `g` block and prefix-scan scratch.
    pub tile_buffer_bytes: usize,
    pub output_bytes: usize,
}

pub fn tiled_scan2d(inputs: &ScanInputs<'_>, tile: usize) -> Result<Tensor> {
    tiled_scan2d_with_stats(inputs, tile).map(|(y, _)| y)
}

pub fn tiled_scan2d_with_stats(inputs: &ScanInputs<'_>, tile: usize) -> Result<(Tensor, TileStats)> {
    let (dims, height, width) = inputs.grid_dims()?;
    let plan = TilePlan::new(height, width, tile)?;
    inputs.check_finite()?;
    let Dims { b, n, e, .. } = dims;
    let ne = n * e;
    let t = tile.min(height.max(width));

    let mut y = Tensor::zeros(inputs.x.shape());
    let lane_stats: Vec<TileStats> = y
        .data_mut()
        .par_chunks_mut(height * width * e)
        .enumerate()
        .map(|(bi, y_b)| {
            let mut p_hor = vec![0.0; t * ne];
            let mut p_ver = vec![0.0; width * ne];
            let mut g_tile = vec![0.0; t * t * e];
            let mut pa = vec![0.0; t * e];
            let mut pu = vec![0.0; t * e];
            let mut tiles = 0;
            let at = |i: usize, j: usize| (bi * height + i) * width + j;

            for (rows, cols) in plan.tiles() {
                tiles += 1;
                if cols.start == 0 {
                    p_hor.fill(0.0);
                }
                let (th, tw) = (rows.len(), cols.len());
                for s in 0..n {
                    for r in 0..th {
                        for jj in 0..tw {
                            let pos = at(rows.start + r, cols.start + jj);
                            let q = pos * ne + s * e;
                            let x = &inputs.x.data()[pos * e..(pos + 1) * e];
                            for k in 0..e {
                                pa[jj * e + k] = inputs.abar.data()[q + k];
                                pu[jj * e + k] = inputs.bbar.data()[q + k] * x[k];
                            }
                        }
                        inclusive_scan_in_place(&mut pa, &mut pu, tw, e);
                        let seed = &mut p_hor[(r * n + s) * e..(r * n + s + 1) * e];
                        for jj in 0..tw {
                            for k in 0..e {
                                g_tile[(r * tw + jj) * e + k] = pa[jj * e + k] * seed[k] + pu[jj * e + k];
                            }
                        }
                        seed.copy_from_slice(&g_tile[(r * tw + tw - 1) * e..(r * tw + tw) * e]);
                    }

                    for jj in 0..tw {
                        let j = cols.start + jj;
                        for r in 0..th {
                            let q = at(rows.start + r, j) * ne + s * e;
                            pa[r * e..(r + 1) * e].copy_from_slice(&inputs.abar.data()[q..q + e]);
                            pu[r * e..(r + 1) * e].copy_from_slice(&g_tile[(r * tw + jj) * e..(r * tw + jj + 1) * e]);
                        }
                        inclusive_scan_in_place(&mut pa, &mut pu, th, e);
                        let seed = &mut p_ver[(j * n + s) * e..(j * n + s + 1) * e];
                        for r in 0..th {
                            let pos = at(rows.start + r, j);
                            let c = inputs.c.data()[pos * n + s];
                            let local = (rows.start + r) * width + j;
                            for k in 0..e {
                                let h = pa[r * e + k] * seed[k] + pu[r * e + k];
                                y_b[local * e + k] += c * h;
                                if r + 1 == th {
                                    pu[r * e + k] = h;
                                }
                            }
                        }
                        seed.copy_from_slice(&pu[(th - 1) * e..th * e]);
                    }
                }
                for i in rows.clone() {
                    for j in cols.clone() {
                        let local = i * width + j;
                        inputs.add_local_terms(&dims, at(i, j), &mut y_b[local * e..(local + 1) * e]);
                    }
                }
            }
            TileStats {
                tiles,
                lanes: 1,
                prefix_bytes: (p_hor.len() + p_ver.len()) * F64,
                tile_buffer_bytes: (g_tile.len() + pa.len() + pu.len()) * F64,
                output_bytes: y_b.len() * F64,
            }
        })
        .collect();

    let stats = TileStats {
        tiles: lane_stats.first().map_or(0, |s| s.tiles),
        lanes: b,
        prefix_bytes: lane_stats.first().map_or(0, |s| s.prefix_bytes),
        tile_buffer_bytes: lane_stats.first().map_or(0, |s| s.tile_buffer_bytes),
        output_bytes: y.len() * F64,
    };
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::scan::scan2d_naive;
    use crate::scan::testutil::Operands;
    use proptest::prelude::*;

    #[test]
    fn plan_covers_every_cell_once() {
        for (h, w, t) in [(17, 23, 8), (5, 5, 5), (4, 9, 1), (3, 2, 16)] {
            let plan = TilePlan::new(h, w, t).unwrap();
            let mut seen = vec![0u8; h * w];
            for (rows, cols) in plan.tiles() {
                for i in rows {
                    for j in cols.clone() {
                        seen[i * w + j] += 1;
                    }
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
            assert_eq!(plan.tiles().count(), plan.tile_rows() * plan.tile_cols());
        }
        assert!(TilePlan::new(4, 4, 0).is_err());
    }

    #[test]
    fn non_divisible_grid_matches_naive() {
        let mut rng = Rng::new(17);
        let ops = Operands::random(&mut rng, &[1, 17, 23], 4, 3);
        let naive = scan2d_naive(&ops.inputs()).unwrap();
        for t in [1, 8, 23, 40] {
            let tiled = tiled_scan2d(&ops.inputs(), t).unwrap();
            assert!(tiled.max_abs_diff(&naive).unwrap() <= 1e-12, "T={t}");
        }
    }

    #[test]
    fn working_set_scales_with_perimeter() {
        let mut rng = Rng::new(4);
        let (h, w, n, e) = (40, 56, 3, 2);
        let ops = Operands::random(&mut rng, &[2, h, w], n, e);
        let (_, stats) = tiled_scan2d_with_stats(&ops.inputs(), 8).unwrap();
        assert_eq!(stats.tiles, 5 * 7);
        assert_eq!(stats.lanes, 2);
        assert_eq!(stats.prefix_bytes, (8 + w) * n * e * F64);
        assert!(stats.prefix_bytes <= (h + w) * n * e * F64);
        assert_eq!(stats.tile_buffer_bytes, (8 * 8 * e + 2 * 8 * e) * F64);
        assert_eq!(stats.output_bytes, 2 * h * w * e * F64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn equivalent_to_naive_for_all_tiles(seed in any::<u64>(), h in 1usize..30, w in 1usize..30) {
            let mut rng = Rng::new(seed);
            let ops = Operands::random(&mut rng, &[1, h, w], 2, 2);
            let naive = scan2d_naive(&ops.inputs()).unwrap();
            for t in [1, 2, 3, 5, 8, 16] {
                let tiled = tiled_scan2d(&ops.inputs(), t).unwrap();
                prop_assert!(tiled.max_abs_diff(&naive).unwrap() <= 1e-12);
            }
        }
    }
}
