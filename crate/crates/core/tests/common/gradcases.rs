//! Finite-difference cases for every differentiable op. Each case draws
//! random shapes and values from its seed and reduces the op output to a
//! scalar through a random weighting so that every output entry matters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speakerlab::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};
use speakerlab::eend::{pit_bce_loss, pit_bce_with_logits};
use speakerlab::embedder::{aam_softmax_loss, similarity_loss};
use speakerlab::Result;

pub type Build = Box<dyn Fn(&mut Graph<'_>) -> Result<NodeId>>;

pub struct GradCase {
    pub store: ParamStore,
    pub build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values kept away from zero so ReLU-style kinks are not straddled by the
/// finite-difference step.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values (spacing ≥ 0.01) so max/min pooling has unique winners.
fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.013).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R` of the output's shape.
fn weighted_sum(g: &mut Graph<'_>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let rn = g.input(r);
    let p = g.mul(out, rn)?;
    Ok(g.sum(p))
}

fn unary(seed: u64, shape: Vec<usize>, init: fn(&mut ChaCha8Rng, &[usize]) -> Tensor, f: fn(&mut Graph<'_>, NodeId) -> Result<NodeId>) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", init(&mut rng, &shape));
    GradCase {
        store,
        build: Box::new(move |g| {
            let xn = g.param(x);
            let y = f(g, xn)?;
            weighted_sum(g, y, seed)
        }),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, -1.0, 1.0)
}

fn dims(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
    (rng.gen_range(2..7), rng.gen_range(2..6))
}

fn two(seed: u64, sa: Vec<usize>, sb: Vec<usize>) -> (ParamStore, ParamId, ParamId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", uniform(&mut rng, &sa));
    let b = store.add("b", uniform(&mut rng, &sb));
    (store, a, b)
}

fn binary(seed: u64, sa: Vec<usize>, sb: Vec<usize>, f: fn(&mut Graph<'_>, NodeId, NodeId) -> Result<NodeId>) -> GradCase {
    let (store, a, b) = two(seed, sa, sb);
    GradCase {
        store,
        build: Box::new(move |g| {
            let (an, bn) = (g.param(a), g.param(b));
            let y = f(g, an, bn)?;
            weighted_sum(g, y, seed)
        }),
    }
}

pub fn op_cases() -> Vec<(&'static str, fn(u64) -> GradCase)> {
    vec![
        ("add", |s| {
            let (r, c) = dims(s);
            binary(s, vec![r, c], vec![r, c], |g, a, b| g.add(a, b))
        }),
        ("sub", |s| {
            let (r, c) = dims(s);
            binary(s, vec![r, c], vec![r, c], |g, a, b| g.sub(a, b))
        }),
        ("mul", |s| {
            let (r, c) = dims(s);
            binary(s, vec![r, c], vec![r, c], |g, a, b| g.mul(a, b))
        }),
        ("scale", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| Ok(g.scale(x, -1.7)))
        }),
        ("add_scalar", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| Ok(g.add_scalar(x, 0.3)))
        }),
        ("add_bias", |s| {
            let (r, c) = dims(s);
            binary(s, vec![r, c], vec![c], |g, a, b| g.add_bias(a, b))
        }),
        ("mul_cols", |s| {
            let (r, c) = dims(s);
            binary(s, vec![r, c], vec![c], |g, a, b| g.mul_cols(a, b))
        }),
        ("matmul", |s| {
            let (r, c) = dims(s);
            binary(s, vec![r, c], vec![c, r + 1], |g, a, b| g.matmul(a, b))
        }),
        ("matmul_t", |s| {
            let (r, c) = dims(s);
            binary(s, vec![r, c], vec![r + 2, c], |g, a, b| g.matmul_t(a, b))
        }),
        ("transpose", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| g.transpose(x))
        }),
        ("reshape", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| {
                let n = g.value(x).len();
                g.reshape(x, &[1, n])
            })
        }),
        ("relu", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], rand_away_from_zero, |g, x| Ok(g.relu(x)))
        }),
        ("sigmoid", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| Ok(g.sigmoid(x)))
        }),
        ("softmax", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| g.softmax_rows(x))
        }),
        ("log_softmax", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| g.log_softmax_rows(x))
        }),
        ("layer_norm", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c + 1], uniform, |g, x| g.layer_norm_rows(x, 1e-5))
        }),
        ("instance_norm", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r + 1, c], uniform, |g, x| g.instance_norm(x, 1e-5))
        }),
        ("l2_normalize", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| g.l2_normalize_rows(x, 1e-12))
        }),
        ("mean_rows", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| g.mean_rows(x))
        }),
        ("sliding_mean", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r + 6, c], uniform, |g, x| g.sliding_mean(x, 5))
        }),
        ("group_mean", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r + 5, c], uniform, |g, x| g.group_mean(x, 3))
        }),
        ("max_pool", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r + 3, c], rand_distinct, |g, x| g.sliding_extreme(x, 3, false))
        }),
        ("min_pool", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r + 3, c], rand_distinct, |g, x| g.sliding_extreme(x, 5, true))
        }),
        ("conv1d", |s| {
            let (r, c) = dims(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let stride = 1 + (s as usize % 2);
            let x = store.add("x", uniform(&mut rng, &[r + 4, c]));
            let w = store.add("w", uniform(&mut rng, &[3, c, 3]));
            let b = store.add("b", uniform(&mut rng, &[3]));
            GradCase {
                store,
                build: Box::new(move |g| {
                    let (xn, wn, bn) = (g.param(x), g.param(w), g.param(b));
                    let y = g.conv1d(xn, wn, Some(bn), stride, 1)?;
                    weighted_sum(g, y, s)
                }),
            }
        }),
        ("conv2d", |s| {
            let (r, c) = dims(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let stride = (1, 1 + (s as usize % 2));
            let x = store.add("x", uniform(&mut rng, &[r + 2, c + 3, 2]));
            let w = store.add("w", uniform(&mut rng, &[3, 3, 2, 3]));
            let b = store.add("b", uniform(&mut rng, &[3]));
            GradCase {
                store,
                build: Box::new(move |g| {
                    let (xn, wn, bn) = (g.param(x), g.param(w), g.param(b));
                    let y = g.conv2d(xn, wn, Some(bn), stride, (1, 1))?;
                    weighted_sum(g, y, s)
                }),
            }
        }),
        ("attention", |s| {
            let (r, _) = dims(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let heads = 1 + (s as usize % 2);
            let shape = [r + 1, 2 * heads];
            let q = store.add("q", uniform(&mut rng, &shape));
            let k = store.add("k", uniform(&mut rng, &shape));
            let v = store.add("v", uniform(&mut rng, &shape));
            GradCase {
                store,
                build: Box::new(move |g| {
                    let (qn, kn, vn) = (g.param(q), g.param(k), g.param(v));
                    let y = g.attention(qn, kn, vn, heads)?;
                    weighted_sum(g, y, s)
                }),
            }
        }),
        ("slice_concat", |s| {
            let (r, c) = dims(s);
            binary(s, vec![r, c + 2], vec![r, c], |g, a, b| {
                let sl = g.slice_cols(a, 1, 2)?;
                g.concat_cols(&[b, sl, a])
            })
        }),
        ("mean", |s| {
            let (r, c) = dims(s);
            unary(s, vec![r, c], uniform, |g, x| Ok(g.mean(x)))
        }),
        ("bce", |s| {
            let (r, c) = dims(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&mut rng, &[r, c], 0.05, 0.95));
            let target = rand_tensor(&mut rng, &[r, c], 0.0, 1.0).map(f64::round);
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    g.bce(xn, &target)
                }),
            }
        }),
        ("bce_with_logits", |s| {
            let (r, c) = dims(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&mut rng, &[r, c], -3.0, 3.0));
            let target = rand_tensor(&mut rng, &[r, c], 0.0, 1.0).map(f64::round);
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    g.bce_with_logits(xn, &target)
                }),
            }
        }),
        ("mse", |s| {
            let (r, c) = dims(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(&mut rng, &[r, c]));
            let target = uniform(&mut rng, &[r, c]);
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    g.mse(xn, &target)
                }),
            }
        }),
        ("cross_entropy", |s| {
            let (r, c) = dims(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    g.cross_entropy(xn, &labels)
                }),
            }
        }),
        ("angular_margin", |s| {
            let (r, c) = dims(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&mut rng, &[r, c], -0.9, 0.9));
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    let y = g.angular_margin(xn, &labels, 0.2, 30.0)?;
                    weighted_sum(g, y, s)
                }),
            }
        }),
    ]
}

fn binary_target(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Tensor {
    Tensor::matrix(t, k, (0..t * k).map(|_| rng.gen_bool(0.4) as u8 as f64).collect())
}

/// The three training objectives end to end.
pub fn loss_cases() -> Vec<(&'static str, fn(u64) -> GradCase)> {
    vec![
        ("aam_softmax", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (b, c, e) = (rng.gen_range(2..6), rng.gen_range(2..5), rng.gen_range(3..7));
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(&mut rng, &[b, e]));
            let w = store.add("w", uniform(&mut rng, &[c, e]));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    let d = g.l2_normalize_rows(xn, 1e-12)?;
                    let wn = g.param(w);
                    aam_softmax_loss(g, d, &labels, wn, 0.2, 30.0)
                }),
            }
        }),
        ("similarity", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (t, e) = (rng.gen_range(2..9), rng.gen_range(2..6));
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(&mut rng, &[t, e]));
            let target: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    similarity_loss(g, xn, &target)
                }),
            }
        }),
        ("pit_bce", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (t, k) = (rng.gen_range(3..10), rng.gen_range(2..5));
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&mut rng, &[t, k], -2.0, 2.0));
            let reference = binary_target(&mut rng, t, k);
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    let p = g.sigmoid(xn);
                    Ok(pit_bce_loss(g, p, &reference)?.0)
                }),
            }
        }),
        ("pit_bce_logits", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (t, k) = (rng.gen_range(3..10), rng.gen_range(2..5));
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&mut rng, &[t, k], -2.0, 2.0));
            let reference = binary_target(&mut rng, t, k);
            GradCase {
                store,
                build: Box::new(move |g| {
                    let xn = g.param(x);
                    Ok(pit_bce_with_logits(g, xn, &reference)?.0)
                }),
            }
        }),
    ]
}
