use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use l2l::layers::{init_params, layer_backward, layer_forward, LayerSpec, LossHead, ModelSpec};
use l2l::tensor::{Precision, Tensor};

const STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(vec![rows, cols], Precision::Fp64, data).unwrap()
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Largest relative error between `layer_backward` and central differences
/// of `sum(y * r)` with respect to every parameter and input element.
fn worst_error(spec: LayerSpec, seed: u64, rows: usize) -> f64 {
    let model = ModelSpec {
        layers: vec![spec],
        hidden: spec.input_width(),
        seed,
        head: LossHead,
    };
    let params = init_params(&model, Precision::Fp64).remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = random(&mut rng, rows, spec.input_width());
    let r = random(&mut rng, rows, spec.output_width());

    let objective = |p: &l2l::layers::LayerParams, x: &Tensor| -> f64 {
        let (y, _) = layer_forward(&spec, p, x).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let (_, res) = layer_forward(&spec, &params, &x).unwrap();
    let (dx, dp) = layer_backward(&spec, &params, &x, &res, &r).unwrap();

    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for t in 0..p.tensors.len() {
        for i in 0..p.tensors[t].len() {
            let orig = params.tensors[t].data()[i];
            p.tensors[t].set(i, orig + STEP);
            let plus = objective(&p, &x);
            p.tensors[t].set(i, orig - STEP);
            let minus = objective(&p, &x);
            p.tensors[t].set(i, orig);
            worst = worst.max(rel(dp.tensors[t].data()[i], (plus - minus) / (2.0 * STEP)));
        }
    }
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.set(i, orig + STEP);
        let plus = objective(&params, &xp);
        xp.set(i, orig - STEP);
        let minus = objective(&params, &xp);
        xp.set(i, orig);
        worst = worst.max(rel(dx.data()[i], (plus - minus) / (2.0 * STEP)));
    }
    worst
}

#[test]
fn encoder_block_matches_finite_differences() {
    for seed in 1..=24 {
        let e = worst_error(
            LayerSpec::EncoderBlock {
                hidden: 4,
                intermediate: 8,
            },
            seed,
            3,
        );
        assert!(e <= 1e-6, "seed {seed}: {e:e}");
    }
}

#[test]
fn affine_matches_finite_differences() {
    for seed in 1..=24 {
        let e = worst_error(
            LayerSpec::Affine {
                input: 5,
                output: 3,
            },
            seed,
            4,
        );
        assert!(e <= 1e-6, "seed {seed}: {e:e}");
    }
}

#[test]
fn wide_block_single_row() {
    let spec = LayerSpec::EncoderBlock {
        hidden: 6,
        intermediate: 24,
    };
    for seed in [101, 202, 303] {
        let e = worst_error(spec, seed, 1);
        assert!(e <= 1e-6, "seed {seed}: {e:e}");
    }
}
