//! Fusion and reconstruction: the patch part of `[Class; z₁…z_N]` is cut into
//! four equal quarters F₁…F₄, and the sequence is rebuilt as
//! `[Class, F₁+F₂, F₂, F₃, F₃+F₄]`, keeping its length.

use std::ops::Range;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vit::PatchSequence;

/// Four contiguous, equal quarters of an `N`-row patch sequence (0-based
/// patch rows, class token excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrmGrouping {
    pub group_len: usize,
}

impl FrmGrouping {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_multiple_of(4) {
            return Err(Error::Config(format!("fusion needs a patch count divisible by 4, got {n}")));
        }
        Ok(FrmGrouping { group_len: n / 4 })
    }

    pub fn range(&self, quarter: usize) -> Range<usize> {
        quarter * self.group_len..(quarter + 1) * self.group_len
    }

    pub fn ranges(&self) -> [Range<usize>; 4] {
        [self.range(0), self.range(1), self.range(2), self.range(3)]
    }
}

/// `z`: `[B, N+1, D]` with the class token at row 0.
pub fn frm_forward(tape: &mut Tape, z: Var) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 || shape[1] < 2 {
        return Err(Error::invalid("frm", format!("expected [B, N+1, D], got {shape:?}")));
    }
    let grouping = FrmGrouping::new(shape[1] - 1)?;
    let class = tape.slice(z, 1, 0, 1)?;
    let mut quarters = Vec::with_capacity(4);
    for r in grouping.ranges() {
        quarters.push(tape.slice(z, 1, 1 + r.start, 1 + r.end)?);
    }
    let head = tape.add(quarters[0], quarters[1])?;
    let tail = tape.add(quarters[2], quarters[3])?;
    tape.concat(&[class, head, quarters[1], quarters[2], tail], 1)
}

pub fn frm_apply(z_in: &PatchSequence) -> Result<PatchSequence> {
    if z_in.class_token.is_none() {
        return Err(Error::invalid("frm", "sequence has no class token"));
    }
    let mut tape = Tape::new();
    let z = tape.constant(z_in.to_batch());
    let out = frm_forward(&mut tape, z)?;
    PatchSequence::from_batch(tape.value(out), true)
}

/// Pairwise cosine similarity of the patch rows (class token ignored).
/// Norms are floored at `1e-12`.
pub fn patch_cosine_similarity(seq: &PatchSequence) -> Tensor {
    let n = seq.len();
    let norms: Vec<f64> = (0..n)
        .map(|i| seq.tokens.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = seq.tokens.row(i).iter().zip(seq.tokens.row(j)).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[i * n + j] = c;
            out[j * n + i] = c;
        }
    }
    Tensor::new(&[n, n], out).expect("square similarity matrix")
}
