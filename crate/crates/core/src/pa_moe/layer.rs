//! The mixture-of-experts layer on the tape.

use std::rc::Rc;

use rand::Rng;

use super::top_k;
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::dacla::stage::{init_linear, linear};
use crate::error::{Error, Result};

/// Registers the router and `n` experts of width `d -> d_ff -> d` under `prefix`.
pub fn init_moe<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, n: usize, rng: &mut R) {
    store.insert_normal(format!("{prefix}.router.w"), vec![n, d], 1.0 / (d as f64).sqrt(), rng);
    store.insert(format!("{prefix}.router.b"), Tensor::zeros(vec![n]));
    for e in 0..n {
        init_linear(store, &format!("{prefix}.expert{e}.w1"), d, d_ff, rng);
        init_linear(store, &format!("{prefix}.expert{e}.w2"), d_ff, d, rng);
    }
}

pub struct MoeOutput {
    /// `(N_tok, d)` blended expert outputs.
    pub out: Var,
    /// `(N_tok, N)` router distributions.
    pub probs: Var,
    /// Selected experts per token, best first.
    pub selections: Vec<Vec<usize>>,
}

/// Routes the rows of `x` (`(N_tok, d)`) with per-token budgets.
///
/// With `frozen` the given selections are used instead of recomputing TopK, so
/// the layer is a smooth function of its inputs around a fixed routing.
pub fn moe_layer(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    budgets: &[usize],
    n_experts: usize,
    frozen: Option<&[Vec<usize>]>,
) -> Result<MoeOutput> {
    let [n_tok, _d] = *tape.shape(x) else {
        return Err(Error::config(format!("MoE input must be (N_tok, d), got {:?}", tape.shape(x))));
    };
    if budgets.len() != n_tok {
        return Err(Error::config(format!("{} budgets for {n_tok} tokens", budgets.len())));
    }
    let w_r = tape.param(store, &format!("{prefix}.router.w"));
    let b_r = tape.param(store, &format!("{prefix}.router.b"));
    let logits = tape.matmul(x, w_r, true);
    let logits = tape.bias_add(logits, b_r);
    let probs = tape.softmax_last(logits);

    let selections: Vec<Vec<usize>> = match frozen {
        Some(sel) => {
            if sel.len() != n_tok {
                return Err(Error::config("frozen selections do not match the token count"));
            }
            sel.to_vec()
        }
        None => {
            let p = tape.value(probs).data();
            budgets
                .iter()
                .enumerate()
                .map(|(j, &k)| Ok(top_k(&p[j * n_experts..(j + 1) * n_experts], k)?.1))
                .collect::<Result<_>>()?
        }
    };
    let mut mask = vec![0.0; n_tok * n_experts];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    for (j, sel) in selections.iter().enumerate() {
        for &e in sel {
            mask[j * n_experts + e] = 1.0;
            members[e].push(j);
        }
    }
    let gates = tape.masked_renorm(probs, Rc::new(mask));

    let mut out: Option<Var> = None;
    for (e, rows) in members.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let rows = Rc::new(rows);
        let xe = tape.gather_rows(x, Rc::clone(&rows));
        let h = linear(tape, store, &format!("{prefix}.expert{e}.w1"), xe);
        let h = tape.relu(h);
        let y = linear(tape, store, &format!("{prefix}.expert{e}.w2"), h);
        let g = tape.select_column(gates, Rc::clone(&rows), e);
        let y = tape.row_scale(y, g);
        let y = tape.scatter_add_rows(y, rows, n_tok);
        out = Some(match out {
            Some(acc) => tape.add(acc, y),
            None => y,
        });
    }
    let out = out.ok_or_else(|| Error::config("MoE layer received no tokens"))?;
    Ok(MoeOutput { out, probs, selections })
}

/// Differentiable usage `U_e = sum_j k_j pi_{j,e}`, shape `(N,)`.
///
/// It agrees with the selection counts in expectation over sharp routing and
/// conserves `sum_e U_e = sum_j k_j`.
pub fn soft_usage(tape: &mut Tape, probs: Var, budgets: &[usize]) -> Var {
    let k = Tensor::new(vec![budgets.len()], budgets.iter().map(|&b| b as f64).collect());
    let k = tape.constant(k);
    let weighted = tape.row_scale(probs, k);
    let by_expert = tape.permute(weighted, &[1, 0]);
    tape.sum_last(by_expert)
}
