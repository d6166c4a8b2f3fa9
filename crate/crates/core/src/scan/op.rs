use super::{scan1d_naive, scan1d_vjp, scan2d_naive, scan2d_vjp, CorrectionForm, ScanInputs};
use crate::error::Result;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Recurrence topology of a recorded scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanKind {
    /// Positions between the batch and channel axes form one sequence.
    Sequence,
    /// `(B, H, W, E)` grid with the two-pass recurrence.
    Grid,
}

/// Operands of a recorded scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars {
    pub x: Var,
    pub abar: Var,
    pub bbar: Var,
    pub c: Var,
    pub d: Option<Var>,
    pub rs: Option<Var>,
}

struct ScanBack {
    kind: ScanKind,
    has_d: bool,
    has_rs: bool,
    form: CorrectionForm,
}

impl ScanBack {
    fn unpack<'a>(&self, inputs: &[&'a Tensor]) -> ScanInputs<'a> {
        let mut rest = inputs[4..].iter();
        let d = if self.has_d { rest.next().copied() } else { None };
        let rs = if self.has_rs { rest.next().copied() } else { None };
        ScanInputs { x: inputs[0], abar: inputs[1], bbar: inputs[2], c: inputs[3], d, rs, form: self.form }
    }
}

impl Backward for ScanBack {
    fn name(&self) -> &'static str {
        match self.kind {
            ScanKind::Sequence => "scan1d",
            ScanKind::Grid => "scan2d",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let scan = self.unpack(inputs);
        let g = match self.kind {
            ScanKind::Sequence => scan1d_vjp(&scan, grad),
            ScanKind::Grid => scan2d_vjp(&scan, grad),
        }
        .expect("shapes validated in forward");
        let mut out = vec![Some(g.x), Some(g.abar), Some(g.bbar), Some(g.c)];
        if self.has_d {
            out.push(g.d);
        }
        if self.has_rs {
            out.push(g.rs);
        }
        out
    }
}

impl Tape {
    pub fn scan(&mut self, kind: ScanKind, vars: ScanVars, form: CorrectionForm) -> Result<Var> {
        let back = ScanBack { kind, has_d: vars.d.is_some(), has_rs: vars.rs.is_some(), form };
        let mut ids = vec![vars.x, vars.abar, vars.bbar, vars.c];
        ids.extend(vars.d);
        ids.extend(vars.rs);
        let value = {
            let tensors: Vec<&Tensor> = ids.iter().map(|&v| self.value(v)).collect();
            let scan = back.unpack(&tensors);
            match kind {
                ScanKind::Sequence => scan1d_naive(&scan)?,
                ScanKind::Grid => scan2d_naive(&scan)?,
            }
        };
        Ok(self.push(value, &ids, back))
    }
}
