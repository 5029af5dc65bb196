use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skyalign_tensor::ops::{self, KeyPools};
use skyalign_tensor::{GradCheck, Tensor};

const TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_check(name: &str, seed: u64, inputs: &[Tensor], f: impl Fn(&mut skyalign_tensor::Tape, &[skyalign_tensor::Var]) -> skyalign_tensor::Result<skyalign_tensor::Var>) {
    let res = GradCheck::default().run(inputs, f).unwrap();
    for (i, e) in res.rel_error.iter().enumerate() {
        assert!(*e < TOL, "{name} seed {seed} input {i}: rel error {e:e}");
    }
}

/// Weighted sum so every output element carries a distinct gradient.
fn weighted_sum(tape: &mut skyalign_tensor::Tape, y: skyalign_tensor::Var) -> skyalign_tensor::Var {
    let n = tape.value(y).len();
    let shape = tape.value(y).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let p = ops::mul(tape, y, w).unwrap();
    ops::sum(tape, p)
}

#[test]
fn linear_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [rand_tensor(&mut rng, &[5, 4]), rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3])];
        assert_check("linear", seed, &inputs, |t, v| {
            let y = ops::linear(t, v[0], v[1], Some(v[2]))?;
            Ok(weighted_sum(t, y))
        });
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])];
        assert_check("layer_norm", seed, &inputs, |t, v| {
            let y = ops::layer_norm(t, v[0], Some((v[1], v[2])))?;
            Ok(weighted_sum(t, y))
        });
    }
}

#[test]
fn softmax_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [rand_tensor(&mut rng, &[3, 7])];
        assert_check("softmax", seed, &inputs, |t, v| {
            let y = ops::softmax(t, v[0])?;
            Ok(weighted_sum(t, y))
        });
    }
}

#[test]
fn conv2d_gradients() {
    for seed in SEEDS {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [rand_tensor(&mut rng, &[3, 8, 8]), rand_tensor(&mut rng, &[2, 3, 3, 3]), rand_tensor(&mut rng, &[2])];
            assert_check("conv2d", seed, &inputs, move |t, v| {
                let y = ops::conv2d(t, v[0], v[1], v[2], stride, pad)?;
                Ok(weighted_sum(t, y))
            });
        }
    }
}

#[test]
fn spatial_helpers_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[1, 3, 4])];
        assert_check("upsample/concat/crop/pool/tokens", seed, &inputs, |t, v| {
            let c = ops::concat_channels(t, &[v[0], v[1]])?;
            let u = ops::upsample2x(t, c)?;
            let k = ops::crop(t, u, 1, 2, 4, 5)?;
            let tok = ops::to_tokens(t, k)?;
            let back = ops::from_tokens(t, tok, 4, 5)?;
            let p = ops::global_avg_pool(t, back)?;
            let s = ops::tanh(t, p);
            Ok(weighted_sum(t, s))
        });
    }
}

#[test]
fn elementwise_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[10]);
        let b = rand_tensor(&mut rng, &[10]).map(|x| x + 2.5);
        assert_check("elementwise", seed, &[a, b], |t, v| {
            let m = ops::mul(t, v[0], v[1])?;
            let d = ops::div(t, m, v[1])?;
            let s = ops::sub(t, d, v[0])?;
            let e = ops::exp(t, v[0]);
            let g = ops::sigmoid(t, v[1]);
            let x = ops::add(t, e, g)?;
            let x = ops::add(t, x, s)?;
            let x = ops::scale(t, x, 0.7);
            let r = ops::relu(t, v[0]);
            let x = ops::add(t, x, r)?;
            Ok(weighted_sum(t, x))
        });
    }
}

#[test]
fn attention_gradients_full_and_pooled() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [rand_tensor(&mut rng, &[5, 4]), rand_tensor(&mut rng, &[7, 4]), rand_tensor(&mut rng, &[7, 4])];
        assert_check("attention full", seed, &inputs, |t, v| {
            let y = ops::attention(t, v[0], v[1], v[2], 2, KeyPools::Full)?;
            Ok(weighted_sum(t, y))
        });
        let pools = KeyPools::lists(vec![vec![0, 1, 2], vec![], vec![6], vec![3, 4, 5, 6], vec![0, 6]]);
        assert_check("attention pooled", seed, &inputs, move |t, v| {
            let y = ops::attention(t, v[0], v[1], v[2], 2, pools.clone())?;
            Ok(weighted_sum(t, y))
        });
    }
}

#[test]
fn composite_mha_linear_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            rand_tensor(&mut rng, &[5, 6]),
            rand_tensor(&mut rng, &[7, 3]),
            rand_tensor(&mut rng, &[6, 4]),
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
        ];
        assert_check("mha+linear", seed, &inputs, |t, v| {
            let q = ops::matmul(t, v[0], v[2])?;
            let k = ops::matmul(t, v[1], v[3])?;
            let val = ops::matmul(t, v[1], v[4])?;
            let a = ops::attention(t, q, k, val, 2, KeyPools::Full)?;
            let o = ops::matmul(t, a, v[5])?;
            let o = ops::layer_norm(t, o, None)?;
            Ok(weighted_sum(t, o))
        });
    }
}
