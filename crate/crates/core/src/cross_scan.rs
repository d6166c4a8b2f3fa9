//! Four-way traversal of a patch grid and the merge of directional scans.
//!
//! Every direction is a grid transform after which the scan runs top-left to
//! bottom-right: `D1` identity, `D2` a half-turn, `D3` a transpose and `D4` a
//! transpose followed by a half-turn. Sequence mode flattens the transformed
//! grid row-major, which yields the row-major, reversed row-major,
//! column-major and reversed column-major orders.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::scan::{scan1d_naive, scan2d_naive, ScanInputs};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    D1,
    D2,
    D3,
    D4,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [Self::D1, Self::D2, Self::D3, Self::D4];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the transformed grid is `W×H`.
    pub fn transposes(self) -> bool {
        matches!(self, Self::D3 | Self::D4)
    }

    /// `perm[p]` is the physical cell visited at transformed cell `p`.
    pub fn permutation(self, height: usize, width: usize) -> Vec<usize> {
        let cells = height * width;
        let (th, tw) = if self.transposes() { (width, height) } else { (height, width) };
        (0..cells)
            .map(|p| {
                let p = match self {
                    Self::D1 | Self::D3 => p,
                    Self::D2 | Self::D4 => cells - 1 - p,
                };
                let (r, c) = (p / tw, p % tw);
                debug_assert!(r < th);
                if self.transposes() {
                    c * width + r
                } else {
                    r * width + c
                }
            })
            .collect()
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.index() + 1)
    }
}

/// How traversed grids are scanned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    /// Flattened sequence, one-dimensional recurrence.
    Ssm1d,
    /// Two-pass grid recurrence.
    #[default]
    Ssm2d,
}

impl FromStr for ScanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1d" => Ok(Self::Ssm1d),
            "2d" => Ok(Self::Ssm2d),
            other => Err(Error::Config(format!("unknown ssm mode `{other}` (expected 1d or 2d)"))),
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ssm1d => "1d",
            Self::Ssm2d => "2d",
        })
    }
}

/// One bit per direction, written `d1 d2 d3 d4` from left to right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DirectionMask(pub [bool; 4]);

impl DirectionMask {
    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, d: ScanDirection) -> bool {
        self.0[d.index()]
    }
}

impl FromStr for DirectionMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bits: Vec<char> = s.trim().chars().collect();
        if bits.len() != 4 || bits.iter().any(|c| !matches!(c, '0' | '1')) {
            return Err(Error::Config(format!("direction mask must be four 0/1 digits, got `{s}`")));
        }
        Ok(Self([bits[0] == '1', bits[1] == '1', bits[2] == '1', bits[3] == '1']))
    }
}

impl fmt::Display for DirectionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|&b| f.write_str(if b { "1" } else { "0" }))
    }
}

/// Treatment of the duplicated self-injection term.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum CorrectionMode {
    #[default]
    None,
    /// `Rs = 1` on masked directions and `0` elsewhere.
    Fixed(DirectionMask),
    /// Trainable `Rs` per direction, dstate and channel.
    Learnable(f64),
}

impl CorrectionMode {
    /// Constant coefficient for `d`, or `None` when the direction carries no
    /// fixed correction.
    pub fn fixed_value(&self, d: ScanDirection) -> Option<f64> {
        match self {
            Self::Fixed(mask) if mask.get(d) => Some(1.0),
            _ => None,
        }
    }

    pub fn parse(mode: &str, mask: Option<&str>, init: f64) -> Result<Self> {
        match mode {
            "none" => Ok(Self::None),
            "fixed" => {
                let mask = mask.ok_or_else(|| Error::Config("fixed correction needs a mask".into()))?;
                Ok(Self::Fixed(mask.parse()?))
            }
            "learnable" => Ok(Self::Learnable(init)),
            other => Err(Error::Config(format!("unknown correction mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Fixed(_) => "fixed",
            Self::Learnable(_) => "learnable",
        }
    }
}

fn grid_split(t: &Tensor, height: usize, width: usize) -> Result<(usize, usize)> {
    let b = t.dim(0);
    let cells = height * width;
    if t.rank() < 2 || b == 0 || !t.len().is_multiple_of(b * cells.max(1)) {
        return Err(shape_err!("tensor {:?} does not hold a {height}×{width} grid", t.shape()));
    }
    Ok((b, t.len() / (b * cells.max(1))))
}

fn traversed_shape(t: &Tensor, d: ScanDirection, mode: ScanMode, height: usize, width: usize) -> Vec<usize> {
    let (th, tw) = if d.transposes() { (width, height) } else { (height, width) };
    let rest = &t.shape()[3..];
    let mut shape = vec![t.dim(0)];
    match mode {
        ScanMode::Ssm1d => shape.push(th * tw),
        ScanMode::Ssm2d => shape.extend([th, tw]),
    }
    shape.extend_from_slice(rest);
    shape
}

fn permute_cells(data: &[f64], perm: &[usize], inner: usize, inverse: bool) -> Vec<f64> {
    let cells = perm.len();
    let mut out = vec![0.0; data.len()];
    for b in 0..data.len() / (cells * inner).max(1) {
        let base = b * cells * inner;
        for (p, &src) in perm.iter().enumerate() {
            let (from, to) = if inverse { (p, src) } else { (src, p) };
            out[base + to * inner..base + (to + 1) * inner]
                .copy_from_slice(&data[base + from * inner..base + (from + 1) * inner]);
        }
    }
    out
}

/// Reorders a `(B, H, W, ..)` tensor into direction `d`'s scan order.
pub fn traverse(x: &Tensor, d: ScanDirection, mode: ScanMode) -> Result<Tensor> {
    let (height, width) = (x.dim(1), x.dim(2));
    if x.rank() < 4 {
        return Err(shape_err!("traverse expects (B, H, W, ..), got {:?}", x.shape()));
    }
    let (_, inner) = grid_split(x, height, width)?;
    let perm = d.permutation(height, width);
    Tensor::new(&traversed_shape(x, d, mode, height, width), permute_cells(x.data(), &perm, inner, false))
}

/// Scatters a tensor produced in direction `d`'s order back to the physical
/// `height × width` grid.
pub fn inverse_traverse(y: &Tensor, d: ScanDirection, mode: ScanMode, height: usize, width: usize) -> Result<Tensor> {
    let (b, inner) = grid_split(y, height, width)?;
    let lead = match mode {
        ScanMode::Ssm1d => 2,
        ScanMode::Ssm2d => 3,
    };
    if y.rank() < lead || y.shape()[1..lead].iter().product::<usize>() != height * width {
        return Err(shape_err!("cannot map {:?} back onto a {height}×{width} grid", y.shape()));
    }
    let mut shape = vec![b, height, width];
    shape.extend_from_slice(&y.shape()[lead..]);
    if shape.iter().product::<usize>() != y.len() || b * height * width * inner != y.len() {
        return Err(shape_err!("cannot map {:?} back onto a {height}×{width} grid", y.shape()));
    }
    let perm = d.permutation(height, width);
    Tensor::new(&shape, permute_cells(y.data(), &perm, inner, true))
}

/// Sum of the four directional outputs on the physical grid, accumulated in
/// direction order.
pub fn cross_merge(outputs: &[Tensor; 4], mode: ScanMode, height: usize, width: usize) -> Result<Tensor> {
    let mut merged = inverse_traverse(&outputs[0], ScanDirection::D1, mode, height, width)?;
    for d in &ScanDirection::ALL[1..] {
        let y = inverse_traverse(&outputs[d.index()], *d, mode, height, width)?;
        merged.add_assign(&y)?;
    }
    Ok(merged)
}

/// Runs one scan per direction on physical-layout operands and merges.
///
/// `per_direction[d]` holds `x`, `Ā`, `B̄`, `C` (and optionally `D`, `Rs`) of
/// direction `d` laid out on the physical `(B, H, W, ..)` grid.
pub fn cross_scan(per_direction: &[ScanInputs<'_>; 4], mode: ScanMode) -> Result<Tensor> {
    let (height, width) = (per_direction[0].x.dim(1), per_direction[0].x.dim(2));
    let mut outputs = Vec::with_capacity(4);
    for d in ScanDirection::ALL {
        let inputs = &per_direction[d.index()];
        let x = traverse(inputs.x, d, mode)?;
        let abar = traverse(inputs.abar, d, mode)?;
        let bbar = traverse(inputs.bbar, d, mode)?;
        let c = traverse(inputs.c, d, mode)?;
        let scan = ScanInputs { x: &x, abar: &abar, bbar: &bbar, c: &c, ..*inputs };
        outputs.push(match mode {
            ScanMode::Ssm1d => scan1d_naive(&scan)?,
            ScanMode::Ssm2d => scan2d_naive(&scan)?,
        });
    }
    let outputs: [Tensor; 4] = outputs.try_into().expect("four directions");
    cross_merge(&outputs, mode, height, width)
}

struct TraverseBack {
    direction: ScanDirection,
    height: usize,
    width: usize,
    inverse: bool,
}

impl Backward for TraverseBack {
    fn name(&self) -> &'static str {
        if self.inverse {
            "inverse_traverse"
        } else {
            "traverse"
        }
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (_, inner) = grid_split(grad, self.height, self.width).expect("validated in forward");
        let perm = self.direction.permutation(self.height, self.width);
        let data = permute_cells(grad.data(), &perm, inner, !self.inverse);
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("same length"))]
    }
}

impl Tape {
    pub fn traverse(&mut self, x: Var, d: ScanDirection, mode: ScanMode) -> Result<Var> {
        let value = traverse(self.value(x), d, mode)?;
        let (height, width) = (self.value(x).dim(1), self.value(x).dim(2));
        Ok(self.push(value, &[x], TraverseBack { direction: d, height, width, inverse: false }))
    }

    pub fn inverse_traverse(&mut self, y: Var, d: ScanDirection, mode: ScanMode, height: usize, width: usize) -> Result<Var> {
        let value = inverse_traverse(self.value(y), d, mode, height, width)?;
        Ok(self.push(value, &[y], TraverseBack { direction: d, height, width, inverse: true }))
    }
}
