//! Wall-time and memory benchmark of the scan variants.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scan::{scan1d_naive, scan1d_parallel, scan2d_naive, tiled_scan2d};
use crate::verify::ScanWorkload;

pub const CSV_HEADER: &str = "variant,H,W,N,ED,seconds,points_per_sec,peak_bytes";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Two-pass 2D recurrence.
    Naive,
    /// Chunked parallel scan over the flattened grid, `√L` chunks.
    Parallel,
    Tiled(usize),
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "parallel" => Ok(Self::Parallel),
            "tiled" => Ok(Self::Tiled(16)),
            _ => match s.strip_prefix("tiled").map(str::parse::<usize>) {
                Some(Ok(t)) if t > 0 => Ok(Self::Tiled(t)),
                _ => Err(Error::Config(format!("unknown bench variant `{s}`"))),
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Naive => f.write_str("naive"),
            Self::Parallel => f.write_str("parallel"),
            Self::Tiled(t) => write!(f, "tiled{t}"),
        }
    }
}

/// Benchmark problem `H × W` with `N` dstates and `ED` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSize {
    pub height: usize,
    pub width: usize,
    pub n: usize,
    pub ed: usize,
}

impl FromStr for BenchSize {
    type Err = Error;
    /// `HxWxNxED`, e.g. `256x256x8x16`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad bench size `{s}`"))))
            .collect::<Result<_>>()?;
        match parts[..] {
            [height, width, n, ed] if parts.iter().all(|&v| v > 0) => Ok(Self { height, width, n, ed }),
            _ => Err(Error::Config(format!("bench size must be HxWxNxED with positive entries, got `{s}`"))),
        }
    }
}

/// Source of peak heap usage, supplied by the executable that owns the
/// global allocator.
pub trait MemoryProbe {
    fn reset_peak(&self);
    /// Peak bytes in use since the last reset, if tracked.
    fn peak_bytes(&self) -> Option<usize>;
}

/// Probe for builds without allocation accounting.
pub struct NoProbe;

impl MemoryProbe for NoProbe {
    fn reset_peak(&self) {}
    fn peak_bytes(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub size: BenchSize,
    pub seconds: f64,
    pub points_per_sec: f64,
    pub peak_bytes: Option<usize>,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let s = self.size;
        let peak = self.peak_bytes.map_or_else(String::new, |b| b.to_string());
        format!(
            "{},{},{},{},{},{:.6},{:.1},{}",
            self.variant, s.height, s.width, s.n, s.ed, self.seconds, self.points_per_sec, peak
        )
    }
}

/// Times every variant on every size. Outputs are compared to the naive
/// recurrence of their own family before timing is reported; a deviation
/// above `1e-12` is a numeric error.
pub fn bench_scan(sizes: &[BenchSize], variants: &[Variant], seed: u64, probe: &dyn MemoryProbe) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (k, &size) in sizes.iter().enumerate() {
        let work = ScanWorkload::random(&mut Rng::new(seed).split(k as u64), 1, size.height, size.width, size.n, size.ed);
        let inputs = work.inputs();
        let cells = size.height * size.width;
        let reference2d = scan2d_naive(&inputs)?;
        let reference1d = scan1d_naive(&inputs)?;
        for &variant in variants {
            probe.reset_peak();
            let start = Instant::now();
            let out = match variant {
                Variant::Naive => scan2d_naive(&inputs)?,
                Variant::Parallel => scan1d_parallel(&inputs, (cells as f64).sqrt().ceil() as usize)?,
                Variant::Tiled(t) => tiled_scan2d(&inputs, t)?,
            };
            let seconds = start.elapsed().as_secs_f64();
            let peak_bytes = probe.peak_bytes();
            let reference = if variant == Variant::Parallel { &reference1d } else { &reference2d };
            let dev = out.max_abs_diff(reference)?;
            if dev > 1e-12 {
                return Err(Error::Numeric(format!("{variant} deviates from its oracle by {dev:e}")));
            }
            rows.push(BenchRow { variant, size, seconds, points_per_sec: cells as f64 / seconds.max(1e-12), peak_bytes });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_variants_and_sizes() {
        assert_eq!("tiled8".parse::<Variant>().unwrap(), Variant::Tiled(8));
        assert_eq!("tiled".parse::<Variant>().unwrap(), Variant::Tiled(16));
        assert!("tiled0".parse::<Variant>().is_err());
        assert!("fast".parse::<Variant>().is_err());
        assert_eq!(Variant::Tiled(3).to_string(), "tiled3");
        assert_eq!("4x5x2x3".parse::<BenchSize>().unwrap(), BenchSize { height: 4, width: 5, n: 2, ed: 3 });
        assert!("4x5x2".parse::<BenchSize>().is_err());
        assert!("4x0x2x3".parse::<BenchSize>().is_err());
    }

    #[test]
    fn rows_follow_schema() {
        let sizes = ["9x7x2x3".parse().unwrap()];
        let rows = bench_scan(&sizes, &[Variant::Naive, Variant::Parallel, Variant::Tiled(4)], 1, &NoProbe).unwrap();
        assert_eq!(rows.len(), 3);
        let line = rows[2].csv_line();
        assert!(line.starts_with("tiled4,9,7,2,3,"));
        assert_eq!(line.split(',').count(), CSV_HEADER.split(',').count());
    }
}
