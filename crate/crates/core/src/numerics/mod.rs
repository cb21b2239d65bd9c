//! Small reverse-mode differentiation engine and dense kernels shared by
//! every trainable model in the crate.
//!
//! The [`Graph`] is a tape: ops evaluate eagerly when recorded, and
//! [`Graph::backward`] replays them in reverse. Parameters live in a
//! [`ParamStore`] that the graph only borrows, so one store can back any
//! number of independent graphs.

pub mod assignment;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod linalg;
pub mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{bce_logit, bce_prob, margin_cos, sigmoid, Graph, NodeId, COS_CLAMP, PROB_CLAMP};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a generator from a base seed and a stream label.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_identity_and_identity_matrix() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let mut g = Graph::new(&store);
        let x = g.named_input("x", Tensor::matrix(1, 2, vec![1.5, -2.0]), Some(&[1, 2])).unwrap();
        let wn = g.param(w);
        let y = g.matmul(x, wn).unwrap();
        g.set_output("y", y);
        assert_eq!(g.value(g.output("y").unwrap()).data(), &[1.5, -2.0]);
        let id = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(g.value(id).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn named_input_shape_is_checked() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let err = g.named_input("x", Tensor::vector(vec![1.0]), Some(&[2])).unwrap_err();
        assert!(err.to_string().contains("input 'x'"));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.input(Tensor::matrix(2, 3, vec![0.0; 6]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul#2"), "{err}");
    }

    #[test]
    fn gradient_of_sum_and_square() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = store.add("s", Tensor::vector(vec![3.0]));
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let l = g.sum(xn);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new(&store);
        let sn = g.param(s);
        let sq = g.mul(sn, sn).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        assert!(g.backward(xn).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        use rand::SeedableRng;
        let mut rng = Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add_he_uniform("w", &[3, 4, 5], 12, &mut rng);
        let run = || {
            let mut g = Graph::inference(&store);
            let x = g.input(Tensor::matrix(6, 4, (0..24).map(|i| (i as f64).sin()).collect()));
            let wn = g.param(w);
            let y = g.conv1d(x, wn, None, 1, 1).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        use rand::{Rng as _, SeedableRng};
        let mut rng = Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::matrix(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let target = Tensor::matrix(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = finite_diff_check(
            &store,
            |g| {
                let xn = g.param(x);
                g.mse(xn, &target)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradcheck_skips_frozen_and_flags_corrupted_rules() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.3, -0.7]));
        let b = store.add("frozen", Tensor::vector(vec![0.5, 0.1]));
        store.set_trainable(b, false);
        let good = finite_diff_check(
            &store,
            |g| {
                let (an, bn) = (g.param(a), g.param(b));
                let t = g.custom_unary(an, f64::tanh, |x| 1.0 - x.tanh().powi(2));
                let p = g.mul(t, bn)?;
                Ok(g.sum(p))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(good.passed());
        assert_eq!(good.params.len(), 1);
        assert_eq!(good.params[0].name, "a");

        let bad = finite_diff_check(
            &store,
            |g| {
                let an = g.param(a);
                // derivative deliberately off by a factor of two
                let t = g.custom_unary(an, f64::tanh, |x| 2.0 * (1.0 - x.tanh().powi(2)));
                Ok(g.sum(t))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!bad.passed());
    }
}
