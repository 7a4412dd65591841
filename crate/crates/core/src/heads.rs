//! Regression and pseudo-class heads over per-node features `[z_i, γ]`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::data::TargetStats;
use crate::encoder::Bound;
use crate::params::{glorot, ParameterStore};
use crate::tape::{Mat, Tape, Var};

pub fn init_heads(
    hidden: usize,
    n_prototypes: usize,
    horizon: usize,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
    store: &mut ParameterStore,
) {
    let width = hidden + n_prototypes;
    store.insert("reg.w1", glorot(rng, width, hidden));
    store.insert("reg.b1", Mat::zeros((1, hidden)));
    store.insert("reg.w2", glorot(rng, hidden, horizon));
    store.insert("reg.b2", Mat::zeros((1, horizon)));
    store.insert("cls.w1", glorot(rng, width, hidden));
    store.insert("cls.b1", Mat::zeros((1, hidden)));
    store.insert("cls.w2", glorot(rng, hidden, n_classes));
    store.insert("cls.b2", Mat::zeros((1, n_classes)));
}

/// Concatenates each node's embedding with the shared similarity row.
pub fn build_features(tape: &Tape, z: Var, gamma: Var) -> Var {
    let n = tape.shape(z).0;
    tape.concat_cols(z, tape.broadcast_rows(gamma, n))
}

fn two_layer(tape: &Tape, params: &Bound, prefix: &str, features: Var) -> Var {
    let hidden = tape.relu(tape.add_row(
        tape.matmul(features, params.var(&format!("{prefix}.w1"))),
        params.var(&format!("{prefix}.b1")),
    ));
    tape.add_row(
        tape.matmul(hidden, params.var(&format!("{prefix}.w2"))),
        params.var(&format!("{prefix}.b2")),
    )
}

/// `N × T'` forecast in target units.
pub fn regression_head(tape: &Tape, params: &Bound, features: Var, target: TargetStats) -> Var {
    let raw = two_layer(tape, params, "reg", features);
    tape.add_scalar(tape.scale(raw, target.std), target.mean)
}

/// `N × K` pseudo-class logits.
pub fn classification_head(tape: &Tape, params: &Bound, features: Var) -> Var {
    two_layer(tape, params, "cls", features)
}

/// Mean squared error over all entries.
pub fn regression_loss(tape: &Tape, y_hat: Var, y_true: Var) -> Var {
    tape.mean(tape.square(tape.sub(y_hat, y_true)))
}

/// Mean per-node softmax cross-entropy in nats.
pub fn classification_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Var {
    tape.cross_entropy(logits, Rc::new(labels.to_vec()))
}

/// Row-wise softmax.
pub fn softmax(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
        row.mapv_inplace(|e| (e - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{finite_difference, max_relative_error};
    use rand::{Rng, SeedableRng};

    fn store(seed: u64) -> ParameterStore {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_heads(4, 3, 2, 2, &mut rng, &mut s);
        for (name, m) in s.iter_mut() {
            if name.ends_with(".b1") {
                m.mapv_inplace(|_| rng.random_range(-0.2..0.2));
            }
        }
        s
    }

    #[test]
    fn feature_width_and_zero_similarity() {
        let tape = Tape::new();
        let z = tape.leaf(Mat::from_shape_fn((3, 2), |(i, j)| (i + j) as f64));
        let f = build_features(&tape, z, tape.leaf(Mat::zeros((1, 3))));
        let fv = tape.value(f);
        assert_eq!(fv.dim(), (3, 5));
        assert!(fv.slice(ndarray::s![.., 2..]).iter().all(|v| *v == 0.0));
        assert_eq!(fv.slice(ndarray::s![.., ..2]), tape.value(z));
    }

    #[test]
    fn zero_final_layer_gives_bias() {
        let mut s = store(1);
        s.get_mut("reg.w2").unwrap().fill(0.0);
        *s.get_mut("reg.b2").unwrap() = Mat::from_shape_vec((1, 2), vec![0.5, -1.0]).unwrap();
        let tape = Tape::new();
        let bound = Bound::new(&tape, &s);
        let f = tape.leaf(Mat::from_shape_fn((4, 7), |(i, j)| (i * j) as f64));
        let y = tape.value(regression_head(&tape, &bound, f, TargetStats { mean: 10.0, std: 2.0 }));
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![11.0, 8.0]);
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut s = store(2);
        for name in ["cls.w1", "cls.b1", "cls.w2", "cls.b2"] {
            s.get_mut(name).unwrap().fill(0.0);
        }
        let tape = Tape::new();
        let bound = Bound::new(&tape, &s);
        let f = tape.leaf(Mat::ones((3, 7)));
        let probs = softmax(&tape.value(classification_head(&tape, &bound, f)));
        assert!(probs.iter().all(|p| (*p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = Mat::from_shape_vec((2, 3), vec![0.1, 2.0, -1.0, 3.0, 3.0, 0.0]).unwrap();
        let shifted = &l + 7.5;
        for (a, b) in softmax(&l).iter().zip(softmax(&shifted).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_loss_examples() {
        let tape = Tape::new();
        let y = tape.leaf(Mat::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap());
        let yh = tape.leaf(Mat::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap());
        assert_eq!(tape.scalar_value(regression_loss(&tape, yh, y)), 12.5);
        assert_eq!(tape.scalar_value(regression_loss(&tape, y, y)), 0.0);
        let plus = tape.add_scalar(y, 1.0);
        assert_eq!(tape.scalar_value(regression_loss(&tape, plus, y)), 1.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let uniform = tape.leaf(Mat::zeros((4, 2)));
        let l = classification_loss(&tape, uniform, &[0, 1, 1, 0]);
        assert!((tape.scalar_value(l) - 2f64.ln()).abs() < 1e-12);
        let confident = tape.leaf(Mat::from_shape_vec((1, 2), vec![50.0, 0.0]).unwrap());
        assert!(tape.scalar_value(classification_loss(&tape, confident, &[0])) < 1e-20);
        assert!(tape.scalar_value(classification_loss(&tape, confident, &[1])) > 2f64.ln());
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let logits = Mat::from_shape_fn((5, 3), |_| rng.random_range(-4.0..4.0));
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let brute: f64 = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    let denom: f64 = (0..3).map(|c| logits[[i, c]].exp()).sum();
                    -(logits[[i, y]].exp() / denom).ln()
                })
                .sum::<f64>()
                / 5.0;
            let tape = Tape::new();
            let l = classification_loss(&tape, tape.leaf(logits), &labels);
            assert!((tape.scalar_value(l) - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let s = store(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Mat::from_shape_fn((5, 7), |_| rng.random_range(-1.0..1.0));
        let y = Mat::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let labels = vec![0, 1, 1, 0, 1];
        let target = TargetStats { mean: 1.0, std: 3.0 };
        let eval = |s: &ParameterStore, f: &Mat, which: usize| {
            let t = Tape::new();
            let b = Bound::new(&t, s);
            let fv = t.leaf(f.clone());
            let l = if which == 0 {
                regression_loss(&t, regression_head(&t, &b, fv, target), t.leaf(y.clone()))
            } else {
                classification_loss(&t, classification_head(&t, &b, fv), &labels)
            };
            t.scalar_value(l)
        };
        for which in 0..2 {
            let tape = Tape::new();
            let bound = Bound::new(&tape, &s);
            let fv = tape.leaf(f.clone());
            let l = if which == 0 {
                regression_loss(&tape, regression_head(&tape, &bound, fv, target), tape.leaf(y.clone()))
            } else {
                classification_loss(&tape, classification_head(&tape, &bound, fv), &labels)
            };
            let g = tape.backward(l);
            let nf = finite_difference(&f, 1e-5, |x| eval(&s, x, which));
            assert!(max_relative_error(g.get(fv).unwrap(), &nf, 1e-6) < 1e-4);
            let prefix = if which == 0 { "reg" } else { "cls" };
            for name in s.names().into_iter().filter(|n| n.starts_with(prefix)) {
                let w = s.get(&name).unwrap().clone();
                let nw = finite_difference(&w, 1e-5, |x| {
                    let mut s2 = s.clone();
                    *s2.get_mut(&name).unwrap() = x.clone();
                    eval(&s2, &f, which)
                });
                let err = max_relative_error(&g.get_or_zeros(bound.var(&name), w.dim()), &nw, 1e-6);
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    #[test]
    fn regression_loss_is_node_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Mat::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let b = Mat::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let perm = [2, 0, 3, 1];
        let ap = Mat::from_shape_fn((4, 3), |(i, j)| a[[perm[i], j]]);
        let bp = Mat::from_shape_fn((4, 3), |(i, j)| b[[perm[i], j]]);
        let tape = Tape::new();
        let l1 = tape.scalar_value(regression_loss(&tape, tape.leaf(a), tape.leaf(b)));
        let l2 = tape.scalar_value(regression_loss(&tape, tape.leaf(ap), tape.leaf(bp)));
        assert!((l1 - l2).abs() < 1e-12);
    }
}
