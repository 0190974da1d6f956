//! Differentiable losses on the tape.

use crate::autodiff::{Tape, Tensor, Var};

/// Weighted mean soft Dice loss of `(pixels, classes)` probabilities against
/// class indices. With `weights` the mean is `sum w L / sum w`.
pub fn dice_tape(tape: &mut Tape, probs: Var, labels: &[usize], weights: Option<&[f64]>, eps: f64) -> Var {
    let shape = tape.shape(probs).to_vec();
    let classes = *shape.last().expect("probabilities need a class axis");
    let pixels = labels.len();
    let mut onehot = vec![0.0; pixels * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }
    let y = tape.constant(Tensor::new(shape, onehot));
    let py = tape.mul(probs, y);
    let inter = tape.sum_last(py);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let p2 = tape.square(probs);
    let p2 = tape.sum_last(p2);
    // every label row sums to one
    let den = tape.add_scalar(p2, 1.0 + eps);
    let ratio = tape.div(num, den);
    let loss = tape.scale(ratio, -1.0);
    let loss = tape.add_scalar(loss, 1.0);
    match weights {
        None => tape.mean_all(loss),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let wv = tape.constant(Tensor::new(tape.shape(loss).to_vec(), w.to_vec()));
            let weighted = tape.mul(loss, wv);
            let s = tape.sum_all(weighted);
            tape.scale(s, 1.0 / total)
        }
    }
}

/// Coefficient of variation of `usage / n_tok` (population standard deviation).
pub fn equity_tape(tape: &mut Tape, usage: Var, n_tok: usize, eps: f64) -> Var {
    let n = tape.value(usage).len();
    let f = tape.scale(usage, 1.0 / n_tok as f64);
    let mean = tape.mean_all(f);
    let mean_b = tape.broadcast(mean, vec![n]);
    let dev = tape.sub(f, mean_b);
    let sq = tape.square(dev);
    let var = tape.mean_all(sq);
    let std = tape.sqrt(var);
    let den = tape.add_scalar(mean, eps);
    tape.div(std, den)
}

/// Mean routing entropy of `(N_tok, N)` distributions.
pub fn decisiveness_tape(tape: &mut Tape, probs: Var, eps: f64) -> Var {
    let n_tok = tape.value(probs).len() / tape.value(probs).last_dim();
    let shifted = tape.add_scalar(probs, eps);
    let logs = tape.ln(shifted);
    let terms = tape.mul(probs, logs);
    let s = tape.sum_all(terms);
    tape.scale(s, -1.0 / n_tok as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::super::{decisiveness_loss, dice_loss_mean, equity_from_usage};
    use super::*;
    use crate::engine::fd::{fd_check, FdMode};

    fn logits(seed: u64, rows: usize, cols: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn softmax_then<F>(z: &[f64], rows: usize, cols: usize, f: F) -> (f64, Vec<f64>, Vec<f64>)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let zv = tape.input(Tensor::new(vec![rows, cols], z.to_vec()));
        let p = tape.softmax_last(zv);
        let l = f(&mut tape, p);
        let g = tape.backward(l);
        (tape.value(l).item(), tape.value(p).data().to_vec(), g.get(zv).unwrap().to_vec())
    }

    #[test]
    fn dice_matches_scalar_version_and_fd() {
        let labels = [0, 4, 2, 2, 1, 3];
        let weights = [1.0, 2.5, 1.0, 0.5, 3.0, 1.0];
        let z = logits(1, 6, 5);
        let f = |t: &mut Tape, p: Var| dice_tape(t, p, &labels, Some(&weights), 1e-6);
        let (v, p, g) = softmax_then(&z, 6, 5, f);
        let want = dice_loss_mean(&p, &labels, 5, Some(&weights), 1e-6).unwrap();
        assert!((v - want).abs() < 1e-14);
        let r = fd_check(|x| softmax_then(x, 6, 5, f).0, &z, &g, 1e-5, FdMode::Central);
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn entropy_matches_scalar_version_and_fd() {
        let z = logits(2, 7, 4);
        let f = |t: &mut Tape, p: Var| decisiveness_tape(t, p, 1e-6);
        let (v, p, g) = softmax_then(&z, 7, 4, f);
        assert!((v - decisiveness_loss(&p, 4, 1e-6).unwrap()).abs() < 1e-14);
        let r = fd_check(|x| softmax_then(x, 7, 4, f).0, &z, &g, 1e-5, FdMode::Central);
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn equity_matches_scalar_version_and_fd() {
        let u = [3.0, 0.5, 7.25, 2.0, 1.0];
        let eval = |u: &[f64]| {
            let mut tape = Tape::new();
            let uv = tape.input(Tensor::new(vec![5], u.to_vec()));
            let l = equity_tape(&mut tape, uv, 9, 1e-6);
            let g = tape.backward(l);
            (tape.value(l).item(), g.get(uv).unwrap().to_vec())
        };
        let (v, g) = eval(&u);
        assert!((v - equity_from_usage(&u, 9, 1e-6).unwrap()).abs() < 1e-14);
        let r = fd_check(|x| eval(x).0, &u, &g, 1e-5, FdMode::Central);
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn uniform_usage_has_zero_gradient() {
        let mut tape = Tape::new();
        let uv = tape.input(Tensor::full(vec![4], 2.0));
        let l = equity_tape(&mut tape, uv, 2, 1e-6);
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l);
        assert!(g.get(uv).unwrap().iter().all(|v| v.is_finite()));
    }
}
