//! Patch full-dimension enhancement: a learnable `N×D` tensor multiplied
//! elementwise into the patch sequence before the class token is attached.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vit::{PatchConfig, PatchSequence};

/// How the enhancement tensor is initialized. Only `Constant` (every entry
/// equal to `beta`) is meant for real runs; the random variants exist to
/// reproduce the comparison against distribution-based starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpdeInit {
    #[default]
    Constant,
    Gaussian,
    Uniform,
    Laplace,
    Exponential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpdeTensor {
    pub values: Tensor,
    pub beta: f64,
}

/// All-`beta` `N×D` tensor, marked learnable.
pub fn init_lpde(cfg: &PatchConfig, beta: f64) -> Result<LpdeTensor> {
    init_lpde_with(cfg, beta, LpdeInit::Constant, 0)
}

/// Random inits draw from N(0,1), U(0,1), Laplace(0,1) or Exp(1).
pub fn init_lpde_with(cfg: &PatchConfig, beta: f64, init: LpdeInit, seed: u64) -> Result<LpdeTensor> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Config(format!("beta must be finite and positive, got {beta}")));
    }
    let n = cfg.raw_grid()?.count;
    let shape = [n, cfg.dim];
    let count = n * cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1bde_5eed);
    let values = match init {
        LpdeInit::Constant => Tensor::full(&shape, beta),
        LpdeInit::Gaussian => {
            let d = Normal::new(0.0, 1.0).expect("unit normal");
            Tensor::new(&shape, (0..count).map(|_| d.sample(&mut rng)).collect())?
        }
        LpdeInit::Uniform => Tensor::new(&shape, (0..count).map(|_| rng.random_range(0.0..1.0)).collect())?,
        LpdeInit::Laplace => Tensor::new(
            &shape,
            (0..count)
                .map(|_| {
                    let u: f64 = rng.random_range(-0.5..0.5);
                    -u.signum() * (1.0 - 2.0 * u.abs()).ln()
                })
                .collect(),
        )?,
        LpdeInit::Exponential => {
            let d = Exp::new(1.0).expect("unit rate");
            Tensor::new(&shape, (0..count).map(|_| d.sample(&mut rng)).collect())?
        }
    };
    Ok(LpdeTensor { values: values.with_requires_grad(true), beta })
}

/// `tokens[B, N, D] ⊙ lpde[N, D]` on the tape.
pub fn pfde_forward(tape: &mut Tape, tokens: Var, lpde: Var) -> Result<Var> {
    let ts = tape.shape(tokens);
    if ts.len() != 3 || ts[1..] != *tape.shape(lpde) {
        return Err(Error::Shape { op: "apply_pfde", lhs: ts.to_vec(), rhs: tape.shape(lpde).to_vec() });
    }
    tape.mul_broadcast(tokens, lpde)
}

/// Row-wise Hadamard product `[f₁⊙p₁; …; f_N⊙p_N]`.
pub fn apply_pfde(f_in: &PatchSequence, lpde: &LpdeTensor) -> Result<PatchSequence> {
    if f_in.class_token.is_some() {
        return Err(Error::invalid("apply_pfde", "expects a sequence without class token"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f_in.to_batch());
    let p = tape.constant(lpde.values.clone());
    let y = pfde_forward(&mut tape, x, p)?;
    PatchSequence::from_batch(tape.value(y), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn seq(rows: &[Vec<f64>]) -> PatchSequence {
        PatchSequence::new(Tensor::from_rows(rows).unwrap(), None).unwrap()
    }

    #[test]
    fn init_examples() {
        let cfg = PatchConfig::default();
        let l = init_lpde(&cfg, 1.0).unwrap();
        assert_eq!(l.values.shape(), &[72, 64]);
        assert!(l.values.data().iter().all(|&v| v == 1.0));
        assert!(l.values.requires_grad());
        let l = init_lpde(&cfg, 1.05).unwrap();
        assert!(l.values.data().iter().all(|&v| v == 1.05));
        assert!(init_lpde(&cfg, 0.0).is_err());
        assert!(init_lpde(&cfg, -1.0).is_err());
        assert!(init_lpde(&cfg, f64::NAN).is_err());
    }

    #[test]
    fn random_inits_are_seeded() {
        let cfg = PatchConfig::default();
        for init in [LpdeInit::Gaussian, LpdeInit::Uniform, LpdeInit::Laplace, LpdeInit::Exponential] {
            let a = init_lpde_with(&cfg, 1.0, init, 3).unwrap();
            let b = init_lpde_with(&cfg, 1.0, init, 3).unwrap();
            assert_eq!(a, b);
            assert!(a.values.is_finite());
        }
        let e = init_lpde_with(&cfg, 1.0, LpdeInit::Exponential, 1).unwrap();
        assert!(e.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn apply_examples() {
        let f = seq(&[vec![2.0, 3.0]]);
        let l = LpdeTensor { values: Tensor::from_rows(&[vec![0.5, 2.0]]).unwrap(), beta: 1.0 };
        assert_eq!(apply_pfde(&f, &l).unwrap().tokens.data(), &[1.0, 6.0]);

        let f = seq(&[vec![0.1, -7.25, 3.0], vec![1e-300, 5.5, -0.0]]);
        let ones = LpdeTensor { values: Tensor::full(&[2, 3], 1.0), beta: 1.0 };
        assert!(apply_pfde(&f, &ones).unwrap().tokens.bitwise_eq(&f.tokens));

        let wrong = LpdeTensor { values: Tensor::full(&[3, 2], 1.0), beta: 1.0 };
        assert!(apply_pfde(&f, &wrong).is_err());
    }

    #[test]
    fn bilinear_in_the_sequence() {
        let f = seq(&[vec![0.3, -1.5], vec![2.0, 0.25]]);
        let l = LpdeTensor { values: Tensor::from_rows(&[vec![1.1, 0.9], vec![-0.5, 2.0]]).unwrap(), beta: 1.0 };
        let base = apply_pfde(&f, &l).unwrap();
        let scaled = seq(&[vec![0.75, -3.75], vec![5.0, 0.625]]);
        let out = apply_pfde(&scaled, &l).unwrap();
        for (a, b) in out.tokens.data().iter().zip(base.tokens.data()) {
            assert!((a - 2.5 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_wrt_lpde_is_the_input() {
        let input = Tensor::new(&[1, 3, 2], vec![0.5, -1.0, 2.0, 0.25, -3.0, 1.5]).unwrap();
        let lpde = Tensor::full(&[3, 2], 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let p = tape.param(lpde.clone());
        let y = pfde_forward(&mut tape, x, p).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), input.data());

        let err = grad_check(
            |t, p| {
                let x = t.constant(input.clone());
                let y = pfde_forward(t, x, p)?;
                t.sum(y)
            },
            &lpde,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
