use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random fixed weights so a vector-valued op becomes a scalar objective with
/// a non-trivial upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let w = tape.constant(random(tape.shape(y), seed ^ 0xdead));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: std::ops::Range<u64> = 0..10;

#[test]
fn hadamard_example() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[2.0, 3.0]));
    let b = tape.constant(t(&[2], &[0.5, 2.0]));
    let c = tape.mul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 6.0]);
}

#[test]
fn add_zeros_is_bitwise_identity() {
    let x = random(&[3, 4], 1);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let z = tape.constant(Tensor::zeros(&[3, 4]));
    let y = tape.add(a, z).unwrap();
    assert!(tape.value(y).bitwise_eq(&x));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    assert!(tape.matmul(a, a).is_err());
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let r = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(r).shape(), &[2, 1]);
    assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in SEEDS {
        let b = random(&[4, 2], seed + 100);
        let err = grad_check(
            |tape, a| {
                let bv = tape.constant(b.clone());
                let c = tape.matmul(a, bv)?;
                weighted_sum(tape, c, seed)
            },
            &random(&[3, 4], seed),
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: dA err {err}");

        let a = random(&[3, 4], seed);
        let err = grad_check(
            |tape, bv| {
                let av = tape.constant(a.clone());
                let c = tape.matmul(av, bv)?;
                weighted_sum(tape, c, seed)
            },
            &b,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: dB err {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn softmax_sum_has_zero_gradient() {
    for seed in SEEDS {
        let mut tape = Tape::new();
        let x = tape.param(random(&[2, 5], seed));
        let y = tape.softmax(x, 1).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn batch_norm_columns_are_standardized() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[6, 4], 3));
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let y = tape.batch_norm(x, g, 0.0).unwrap();
    let v = tape.value(y);
    for j in 0..4 {
        let col: Vec<f64> = (0..6).map(|i| v.data()[i * 4 + j]).collect();
        let mean = col.iter().sum::<f64>() / 6.0;
        let var = col.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
    assert!(tape.batch_norm(x, g, 0.0).is_ok());
    let wrong = tape.constant(Tensor::full(&[3], 1.0));
    assert!(tape.batch_norm(x, wrong, 0.0).is_err());
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[5, 16], 3));
    let gain = tape.constant(Tensor::full(&[16], 1.0));
    let bias = tape.constant(Tensor::zeros(&[16]));
    let y = tape.layer_norm(x, gain, bias, 0.0).unwrap();
    let v = tape.value(y);
    for r in 0..5 {
        let row = v.row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12, "{mean}");
        assert!((var - 1.0).abs() < 1e-12, "{var}");
    }
}

#[test]
fn slice_concat_partition_is_bitwise() {
    let x = random(&[7, 3], 9);
    for k in 1..7 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let a = tape.slice(v, 0, 0, k).unwrap();
        let b = tape.slice(v, 0, k, 7).unwrap();
        let c = tape.concat(&[a, b], 0).unwrap();
        assert!(tape.value(c).bitwise_eq(&x));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x);
    assert!(tape.slice(v, 0, 3, 3).is_err());
    assert!(tape.slice(v, 2, 0, 1).is_err());
    assert!(tape.reshape(v, &[4, 5]).is_err());
}

#[test]
fn every_op_passes_grad_check() {
    type Case = (&'static str, Vec<usize>, fn(&mut Tape, Var, u64) -> crate::Result<Var>);
    let cases: Vec<Case> = vec![
        ("add", vec![3, 4], |t, x, s| {
            let c = t.constant(random(&[3, 4], s + 1));
            let y = t.add(x, c)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("sub", vec![3, 4], |t, x, s| {
            let c = t.constant(random(&[3, 4], s + 1));
            let y = t.sub(c, x)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("mul", vec![3, 4], |t, x, s| {
            let c = t.constant(random(&[3, 4], s + 1));
            let y = t.mul(x, c)?;
            let y = t.mul(y, x)?;
            weighted_sum(t, y, s)
        }),
        ("add_broadcast rhs", vec![4], |t, x, s| {
            let c = t.constant(random(&[2, 3, 4], s + 1));
            let y = t.add_broadcast(c, x)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("mul_broadcast both", vec![3, 4], |t, x, s| {
            let c = t.constant(random(&[2, 3, 4], s + 1));
            let y = t.mul_broadcast(c, x)?;
            let y = t.mul_broadcast(y, x)?;
            weighted_sum(t, y, s)
        }),
        ("scale", vec![5], |t, x, s| {
            let y = t.scale(x, -2.5)?;
            let y = t.mul(y, x)?;
            weighted_sum(t, y, s)
        }),
        ("matmul rank3", vec![2, 3, 4], |t, x, s| {
            let w = t.constant(random(&[4, 5], s + 1));
            let y = t.matmul(x, w)?;
            weighted_sum(t, y, s)
        }),
        ("transpose", vec![3, 5], |t, x, s| {
            let y = t.transpose(x)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("softmax last", vec![3, 6], |t, x, s| {
            let y = t.softmax(x, 1)?;
            weighted_sum(t, y, s)
        }),
        ("softmax middle", vec![2, 4, 3], |t, x, s| {
            let y = t.softmax(x, 1)?;
            weighted_sum(t, y, s)
        }),
        ("layer_norm input", vec![4, 8], |t, x, s| {
            let g = t.constant(random(&[8], s + 1));
            let b = t.constant(random(&[8], s + 2));
            let y = t.layer_norm(x, g, b, 1e-6)?;
            weighted_sum(t, y, s)
        }),
        ("layer_norm gain", vec![8], |t, x, s| {
            let inp = t.constant(random(&[4, 8], s + 1));
            let b = t.constant(random(&[8], s + 2));
            let y = t.layer_norm(inp, x, b, 1e-6)?;
            weighted_sum(t, y, s)
        }),
        ("layer_norm bias", vec![8], |t, x, s| {
            let inp = t.constant(random(&[4, 8], s + 1));
            let g = t.constant(random(&[8], s + 2));
            let y = t.layer_norm(inp, g, x, 1e-6)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("batch_norm input", vec![5, 3], |t, x, s| {
            let g = t.constant(random(&[3], s + 1));
            let y = t.batch_norm(x, g, 1e-5)?;
            weighted_sum(t, y, s)
        }),
        ("batch_norm gain", vec![3], |t, x, s| {
            let inp = t.constant(random(&[5, 3], s + 1));
            let y = t.batch_norm(inp, x, 1e-5)?;
            weighted_sum(t, y, s)
        }),
        ("gelu", vec![4, 5], |t, x, s| {
            let y = t.scale(x, 3.0)?;
            let y = t.gelu(y)?;
            weighted_sum(t, y, s)
        }),
        ("slice", vec![3, 6, 2], |t, x, s| {
            let y = t.slice(x, 1, 2, 5)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("concat", vec![2, 3], |t, x, s| {
            let c = t.constant(random(&[2, 2], s + 1));
            let sq = t.mul(x, x)?;
            let y = t.concat(&[x, c, sq], 1)?;
            weighted_sum(t, y, s)
        }),
        ("select", vec![2, 5, 3], |t, x, s| {
            let y = t.select(x, 1, &[4, 0, 4, 2])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("reshape", vec![2, 6], |t, x, s| {
            let y = t.reshape(x, &[3, 4])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("expand", vec![2, 3], |t, x, s| {
            let y = t.expand(x, 4)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, s)
        }),
        ("mean", vec![3, 3], |t, x, _| {
            let y = t.mul(x, x)?;
            t.mean(y)
        }),
        ("self_attention", vec![2, 5, 12], |t, x, s| {
            let y = t.self_attention(x, 2)?;
            weighted_sum(t, y, s)
        }),
        ("cross_entropy", vec![4, 5], |t, x, _| t.cross_entropy(x, &[0, 3, 4, 1])),
        ("batch_hard_triplet", vec![6, 3], |t, x, _| {
            // wide margin keeps every hinge active, away from the kink
            t.batch_hard_triplet(x, &[0, 0, 1, 1, 2, 2], 5.0)
        }),
    ];
    for (name, shape, f) in cases {
        for seed in SEEDS {
            let x = random(&shape, seed);
            let err = grad_check(|t, v| f(t, v, seed), &x, EPS).unwrap();
            assert!(err < TOL, "{name} seed {seed}: max rel err {err}");
        }
    }
}

/// Attention through separate slice / matmul / softmax nodes, per image and head.
fn composed_attention(tape: &mut Tape, qkv: Var, heads: usize) -> crate::Result<Var> {
    let [b, tlen, d3] = tape.shape(qkv).to_vec()[..] else { unreachable!() };
    let d = d3 / 3;
    let dh = d / heads;
    let mut images = Vec::new();
    for bi in 0..b {
        let img = tape.slice(qkv, 0, bi, bi + 1)?;
        let img = tape.reshape(img, &[tlen, d3])?;
        let mut outs = Vec::new();
        for h in 0..heads {
            let q = tape.slice(img, 1, h * dh, (h + 1) * dh)?;
            let k = tape.slice(img, 1, d + h * dh, d + (h + 1) * dh)?;
            let v = tape.slice(img, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let p = tape.softmax(s, 1)?;
            outs.push(tape.matmul(p, v)?);
        }
        let o = tape.concat(&outs, 1)?;
        images.push(tape.reshape(o, &[1, tlen, d])?);
    }
    tape.concat(&images, 0)
}

#[test]
fn fused_attention_matches_composed_reference() {
    for seed in 0..3 {
        let x = random(&[2, 6, 24], seed);
        let mut tape = Tape::new();
        let v = tape.param(x);
        let fused = tape.self_attention(v, 4).unwrap();
        let reference = composed_attention(&mut tape, v, 4).unwrap();
        let (a, b) = (tape.value(fused).data(), tape.value(reference).data());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-14);
        }

        let lf = weighted_sum(&mut tape, fused, 7).unwrap();
        let gf = tape.backward(lf).unwrap().get(v).unwrap().to_vec();
        let lr = weighted_sum(&mut tape, reference, 7).unwrap();
        let gr = tape.backward(lr).unwrap().get(v).unwrap().to_vec();
        for (x, y) in gf.iter().zip(&gr) {
            assert!((x - y).abs() < 1e-12);
        }

        let probs = tape.attention_probs(fused).unwrap();
        assert_eq!(probs.shape(), &[2, 4, 6, 6]);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[3, 8]));
    let l = tape.cross_entropy(uniform, &[0, 5, 7]).unwrap();
    assert!((tape.value(l).data()[0] - 8f64.ln()).abs() < 1e-12);

    let one = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let l = tape.cross_entropy(one, &[0]).unwrap();
    // -ln(e / (e + 1))
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
    assert!((expected - 0.3133).abs() < 1e-4);

    let confident = tape.constant(t(&[1, 2], &[60.0, 0.0]));
    let l = tape.cross_entropy(confident, &[0]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-25);

    let err = tape.cross_entropy(one, &[2]).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { .. }));
}

/// Exhaustive oracle: per anchor, the max hinge over every (positive, negative)
/// pair, averaged over anchors that have a positive.
fn triplet_oracle(x: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().max(1e-12).sqrt()
    };
    let mut total = 0.0;
    let mut count = 0;
    for a in 0..x.len() {
        let mut best: Option<f64> = None;
        for p in 0..x.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..x.len() {
                if labels[n] == labels[a] {
                    continue;
                }
                let h = (dist(&x[a], &x[p]) - dist(&x[a], &x[n]) + margin).max(0.0);
                best = Some(best.map_or(h, |b: f64| b.max(h)));
            }
        }
        if let Some(b) = best {
            total += b;
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn triplet_examples() {
    let mut tape = Tape::new();
    let same = tape.constant(Tensor::full(&[4, 3], 0.25));
    let l = tape.batch_hard_triplet(same, &[0, 0, 1, 1], 0.3).unwrap();
    assert!((tape.value(l).data()[0] - 0.3).abs() < 1e-5);

    let separated = tape.constant(t(&[4, 1], &[0.0, 0.0, 5.0, 5.0]));
    let l = tape.batch_hard_triplet(separated, &[0, 0, 1, 1], 0.3).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);

    // hand layout: a square with labels on a diagonal
    let pts = vec![vec![0.0, 0.0], vec![1.0, 0.2], vec![0.1, 1.0], vec![1.2, 1.1]];
    let labels = [0, 1, 1, 0];
    let x = tape.constant(Tensor::from_rows(&pts).unwrap());
    let l = tape.batch_hard_triplet(x, &labels, 0.3).unwrap();
    let oracle = triplet_oracle(&pts, &labels, 0.3);
    assert!((tape.value(l).data()[0] - oracle).abs() < 1e-14);

    let one_id = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.batch_hard_triplet(one_id, &[1, 1, 1], 0.3).is_err());
    let singles = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.batch_hard_triplet(singles, &[0, 1, 2], 0.3).is_err());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for r in 0..3 {
            let row = v.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_round_trips_are_bitwise(
        vals in prop::collection::vec(-1e3f64..1e3, 24),
        split in 1usize..4,
        axis in 0usize..3,
    ) {
        let x = Tensor::new(&[2, 4, 3], vals).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let len = x.shape()[axis];
        let k = split.min(len - 1).max(1);
        let a = tape.slice(v, axis, 0, k).unwrap();
        let b = tape.slice(v, axis, k, len).unwrap();
        let c = tape.concat(&[a, b], axis).unwrap();
        prop_assert!(tape.value(c).bitwise_eq(&x));
        let r = tape.reshape(v, &[6, 4]).unwrap();
        let back = tape.reshape(r, &[2, 4, 3]).unwrap();
        prop_assert!(tape.value(back).bitwise_eq(&x));
    }

    #[test]
    fn triplet_matches_exhaustive_oracle(
        vals in prop::collection::vec(-2.0f64..2.0, 16),
        margin in 0.0f64..1.0,
    ) {
        let rows: Vec<Vec<f64>> = vals.chunks(2).map(<[f64]>::to_vec).collect();
        let labels = [0, 0, 1, 1, 2, 2, 0, 1];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let l = tape.batch_hard_triplet(x, &labels, margin).unwrap();
        let oracle = triplet_oracle(&rows, &labels, margin);
        prop_assert!((tape.value(l).data()[0] - oracle).abs() < 1e-12);
    }
}
