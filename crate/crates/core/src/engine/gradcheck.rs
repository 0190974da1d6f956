//! End-to-end finite-difference check of the full training loss.

use super::data::Batch;
use super::fd::{fd_check, FdMode};
use super::model::PaNet;
use super::train::{loss_graph, pixel_weights};
use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::objectives::LossConfig;
use crate::pa_moe::selection_margin;

/// Tokens whose k-th and (k+1)-th gates are closer than this count as ties.
pub const TIE_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst: Option<String>,
    pub coordinates: usize,
    /// Tokens within [`TIE_MARGIN`] of a selection change, whose expert sets
    /// are held fixed while differencing.
    pub near_ties: usize,
    pub min_margin: f64,
}

/// Analytic gradients of the total loss against central differences over
/// every parameter coordinate, using the five-point stencil.
///
/// Expert selections and ReLU activation patterns are taken at the
/// unperturbed point and held fixed, so differencing never crosses a TopK
/// boundary or a kink.
pub fn check_model_gradients(
    model: &PaNet,
    batch: &Batch,
    loss: &LossConfig,
    epoch: usize,
    total_epochs: usize,
    step: f64,
) -> Result<GradCheck> {
    let routing = model.routing_map(batch, false)?;
    let weights = pixel_weights(batch, epoch, total_epochs, loss)?;

    let mut tape = Tape::new();
    tape.record_relu_masks();
    let pass = model.forward(&mut tape, batch, &routing, None)?;
    let masks = tape.take_relu_masks();
    let frozen: Vec<Vec<Vec<usize>>> = pass.layers.iter().map(|l| l.selections.clone()).collect();
    let n = model.config.n_experts;
    let mut near_ties = 0;
    let mut min_margin = f64::INFINITY;
    for layer in &pass.layers {
        for (pi, &k) in tape.value(layer.probs).data().chunks(n).zip(&routing.budgets) {
            let m = selection_margin(pi, k);
            min_margin = min_margin.min(m);
            near_ties += usize::from(m < TIE_MARGIN);
        }
    }
    let vars = loss_graph(&mut tape, &pass, batch, Some(&weights), loss);
    let analytic: Vec<f64> = tape
        .backward(vars.total)
        .for_params(&model.params)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();

    let shapes: Vec<(String, Vec<usize>)> =
        model.params.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect();
    let x0: Vec<f64> = model.params.values().flat_map(|t| t.data().to_vec()).collect();
    let mut probe = model.clone();
    let f = |x: &[f64]| {
        let mut off = 0;
        for (i, (_, shape)) in shapes.iter().enumerate() {
            let len: usize = shape.iter().product();
            *probe.params.value_at_mut(i) = Tensor::new(shape.clone(), x[off..off + len].to_vec());
            off += len;
        }
        let mut t = Tape::inference();
        t.replay_relu_masks(masks.clone());
        let pass = probe
            .forward(&mut t, batch, &routing, Some(&frozen))
            .expect("shapes were validated at the base point");
        let v = loss_graph(&mut t, &pass, batch, Some(&weights), loss);
        t.value(v.total).item()
    };
    let report = fd_check(f, &x0, &analytic, step, FdMode::FivePoint);
    let worst = report.worst.map(|mut c| {
        for (name, shape) in &shapes {
            let len: usize = shape.iter().product();
            if c < len {
                return format!("{name}[{c}]");
            }
            c -= len;
        }
        unreachable!()
    });
    Ok(GradCheck { max_rel_error: report.max_rel_error, worst, coordinates: x0.len(), near_ties, min_margin })
}
