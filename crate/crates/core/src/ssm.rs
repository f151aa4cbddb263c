//! Spatial slicing: twelve equal slices of the patch sequence are regrouped
//! into left (1,4,7,10), middle (2,5,8,11) and right (3,6,9,12) branches; the
//! four quarters are summed into the fused global-and-local branch. Every
//! branch gets the class token prepended and runs through a shared block.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::frm::FrmGrouping;
use crate::params::Bindings;
use crate::vit::{EncoderBlock, Grid, PatchSequence};

/// How the left/middle/right branches pick their patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlicingMode {
    /// Twelve index-contiguous slices.
    #[default]
    Contiguous,
    /// Image-column thirds of the patch grid.
    Columns,
}

/// Twelve contiguous slices of `N / 12` rows (0-based patch rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmSlices {
    pub n: usize,
    pub slice_len: usize,
}

impl SsmSlices {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_multiple_of(12) {
            return Err(Error::Config(format!("slicing needs a patch count divisible by 12, got {n}")));
        }
        Ok(SsmSlices { n, slice_len: n / 12 })
    }

    /// Rows of slice `g ∈ 0..12`.
    pub fn slice(&self, g: usize) -> Range<usize> {
        g * self.slice_len..(g + 1) * self.slice_len
    }

    pub fn quarters(&self) -> FrmGrouping {
        FrmGrouping { group_len: self.n / 4 }
    }

    /// Patch rows of the left, middle and right branches, in slice order.
    pub fn branch_rows(&self) -> [Vec<usize>; 3] {
        std::array::from_fn(|b| (0..4).flat_map(|i| self.slice(3 * i + b)).collect())
    }
}

pub fn ssm_slice(seq: &PatchSequence) -> Result<SsmSlices> {
    SsmSlices::new(seq.len())
}

/// Branch patch rows for the given mode.
pub fn branch_rows(mode: SlicingMode, grid: Grid) -> Result<[Vec<usize>; 3]> {
    match mode {
        SlicingMode::Contiguous => Ok(SsmSlices::new(grid.count)?.branch_rows()),
        SlicingMode::Columns => {
            if !grid.cols.is_multiple_of(3) {
                return Err(Error::Config(format!(
                    "column slicing needs a grid width divisible by 3, got {}",
                    grid.cols
                )));
            }
            let third = grid.cols / 3;
            Ok(std::array::from_fn(|b| {
                (0..grid.count).filter(|k| (k % grid.cols) / third == b).collect()
            }))
        }
    }
}

fn select_rows(seq: &PatchSequence, rows: &[usize]) -> Result<PatchSequence> {
    let d = seq.dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(seq.tokens.row(r));
    }
    PatchSequence::new(Tensor::new(&[rows.len(), d], data)?, None)
}

/// Left, middle and right patch sequences (no class token).
pub fn ssm_group(seq: &PatchSequence, slices: &SsmSlices) -> Result<(PatchSequence, PatchSequence, PatchSequence)> {
    if seq.len() != slices.n {
        return Err(Error::invalid("ssm_group", format!("sequence has {} rows, slices expect {}", seq.len(), slices.n)));
    }
    let [l, m, r] = slices.branch_rows();
    Ok((select_rows(seq, &l)?, select_rows(seq, &m)?, select_rows(seq, &r)?))
}

/// `[class, Q₁+Q₂+Q₃+Q₄]`.
pub fn ssm_fuse(quarters: [&Tensor; 4], class_token: &Tensor) -> Result<PatchSequence> {
    let shape = quarters[0].shape();
    if let Some(q) = quarters.iter().find(|q| q.shape() != shape) {
        return Err(Error::Shape { op: "ssm_fuse", lhs: shape.to_vec(), rhs: q.shape().to_vec() });
    }
    let mut sum = quarters[0].data().to_vec();
    for q in &quarters[1..] {
        sum.iter_mut().zip(q.data()).for_each(|(a, b)| *a += b);
    }
    PatchSequence::new(Tensor::new(shape, sum)?, Some(class_token.clone()))
}

/// Builds the four class-prefixed branch inputs from `z[B, N+1, D]`:
/// left, middle, right (`[B, N/3+1, D]`) and the fused branch (`[B, N/4+1, D]`).
pub fn ssm_branches(tape: &mut Tape, z: Var, rows: &[Vec<usize>; 3]) -> Result<[Var; 4]> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("ssm", format!("expected [B, N+1, D], got {shape:?}")));
    }
    let n = shape[1] - 1;
    let slices = SsmSlices::new(n)?;
    let mut branch = |rows: &[usize]| -> Result<Var> {
        let idx: Vec<usize> = std::iter::once(0).chain(rows.iter().map(|r| r + 1)).collect();
        tape.select(z, 1, &idx)
    };
    let left = branch(&rows[0])?;
    let middle = branch(&rows[1])?;
    let right = branch(&rows[2])?;

    let quarters = slices.quarters();
    let class = tape.slice(z, 1, 0, 1)?;
    let mut fused: Option<Var> = None;
    for r in quarters.ranges() {
        let q = tape.slice(z, 1, 1 + r.start, 1 + r.end)?;
        fused = Some(match fused {
            None => q,
            Some(acc) => tape.add(acc, q)?,
        });
    }
    let glf = tape.concat(&[class, fused.expect("four quarters")], 1)?;
    Ok([left, middle, right, glf])
}

/// Per-branch outputs of the shared block.
#[derive(Clone, Debug)]
pub struct SsmOutput {
    /// Full sequences after the block: left, middle, right, fused.
    pub sequences: [Var; 4],
    /// Class-token rows `[B, D]` of each sequence, same order.
    pub class_features: [Var; 4],
}

/// Runs the four branches through `block`. The three equal-length branches go
/// through as one stacked batch; every image is still processed independently.
pub fn ssm_apply(tape: &mut Tape, bind: &Bindings, z: Var, rows: &[Vec<usize>; 3], block: &EncoderBlock) -> Result<SsmOutput> {
    let [left, middle, right, glf] = ssm_branches(tape, z, rows)?;
    let b = tape.shape(z)[0];
    let stacked = tape.concat(&[left, middle, right], 0)?;
    let stacked = block.forward(tape, bind, stacked)?.out;
    let mut sequences = Vec::with_capacity(4);
    for i in 0..3 {
        sequences.push(tape.slice(stacked, 0, i * b, (i + 1) * b)?);
    }
    sequences.push(block.forward(tape, bind, glf)?.out);
    let sequences: [Var; 4] = sequences.try_into().expect("four branches");
    let mut class_features = Vec::with_capacity(4);
    for &s in &sequences {
        class_features.push(class_feature(tape, s)?);
    }
    Ok(SsmOutput { sequences, class_features: class_features.try_into().expect("four branches") })
}

/// Row 0 of a `[B, T, D]` sequence as `[B, D]`.
pub fn class_feature(tape: &mut Tape, seq: Var) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    let c = tape.slice(seq, 1, 0, 1)?;
    tape.reshape(c, &[shape[0], shape[2]])
}
