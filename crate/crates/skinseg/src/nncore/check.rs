//! Finite-difference gradient checking.
//!
//! Central differences with `h = 1e-5 * (1 + |theta|)` in double precision,
//! compared coordinate-by-coordinate against reverse-mode gradients. Both
//! parameter and input coordinates are sampled.

use rand::Rng;

use super::{Graph, NodeId, ParamStore, SlotId, Tensor};
use crate::nncore::NnError;
use crate::rng;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Coordinates sampled across parameters and inputs.
    pub coords: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Base step; scaled by `1 + |theta|` per coordinate.
    pub step: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { coords: 100, tolerance: 1e-6, seed: 0, step: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Location of the worst coordinate, e.g. `param enc0.c1.w[12]`.
    pub worst: String,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Param(usize, usize),
    Input(usize, usize),
}

fn loss_value(
    graph: &mut Graph<f64>,
    params: &ParamStore<f64>,
    inputs: &[(NodeId, Tensor<f64>)],
) -> Result<f64, NnError> {
    let bound: Vec<(NodeId, &Tensor<f64>)> = inputs.iter().map(|(id, t)| (*id, t)).collect();
    graph.forward(params, &bound)?;
    let sink = graph.last_node().ok_or_else(|| NnError::GraphState("empty graph".into()))?;
    Ok(graph.activation(sink).expect("forward cached").item())
}

/// Central difference of the sink w.r.t. one parameter coordinate.
pub fn central_difference(
    graph: &mut Graph<f64>,
    params: &mut ParamStore<f64>,
    inputs: &[(NodeId, Tensor<f64>)],
    slot: SlotId,
    index: usize,
    step: f64,
) -> Result<f64, NnError> {
    let original = params.slot(slot).data[index];
    let h = step * (1.0 + original.abs());
    params.slot_mut(slot).data[index] = original + h;
    let plus = loss_value(graph, params, inputs)?;
    params.slot_mut(slot).data[index] = original - h;
    let minus = loss_value(graph, params, inputs)?;
    params.slot_mut(slot).data[index] = original;
    Ok((plus - minus) / (2.0 * h))
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-10)
}

/// Compares externally supplied gradients against central differences on
/// sampled coordinates. This is the core the public checker and the
/// negative-control tests share.
pub fn compare_against_fd(
    graph: &mut Graph<f64>,
    params: &mut ParamStore<f64>,
    inputs: &mut Vec<(NodeId, Tensor<f64>)>,
    param_grads: &ParamStore<f64>,
    input_grads: &[(NodeId, Tensor<f64>)],
    opts: &CheckOptions,
) -> Result<GradCheckReport, NnError> {
    let mut coords: Vec<Coord> = Vec::new();
    for (si, slot) in params.slots().iter().enumerate() {
        for i in 0..slot.data.len() {
            coords.push(Coord::Param(si, i));
        }
    }
    for (ii, (_, t)) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            coords.push(Coord::Input(ii, i));
        }
    }
    if coords.is_empty() {
        return Err(NnError::InvalidOp("no coordinates to check".into()));
    }

    let mut rng = rng::stream(opts.seed, "grad-check", 0);
    let n = opts.coords.min(coords.len());
    // sample without replacement when feasible
    let picks: Vec<Coord> = if n == coords.len() {
        coords.clone()
    } else {
        let mut chosen = std::collections::HashSet::new();
        let mut picks = Vec::with_capacity(n);
        while picks.len() < n {
            let i = rng.gen_range(0..coords.len());
            if chosen.insert(i) {
                picks.push(coords[i]);
            }
        }
        picks
    };

    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    for &coord in &picks {
        let (fd, analytic, label) = match coord {
            Coord::Param(si, i) => {
                let slot_id = SlotId(si);
                let fd = central_difference(graph, params, inputs, slot_id, i, opts.step)?;
                let analytic = param_grads.slots()[si].data[i];
                (fd, analytic, format!("param {}[{i}]", params.slots()[si].name))
            }
            Coord::Input(ii, i) => {
                let original = inputs[ii].1.data()[i];
                let h = opts.step * (1.0 + original.abs());
                inputs[ii].1.data_mut()[i] = original + h;
                let plus = loss_value(graph, params, inputs)?;
                inputs[ii].1.data_mut()[i] = original - h;
                let minus = loss_value(graph, params, inputs)?;
                inputs[ii].1.data_mut()[i] = original;
                let fd = (plus - minus) / (2.0 * h);
                let node = inputs[ii].0;
                let analytic = input_grads
                    .iter()
                    .find(|(id, _)| *id == node)
                    .map(|(_, t)| t.data()[i])
                    .unwrap_or(0.0);
                (fd, analytic, format!("input {}[{i}]", ii))
            }
        };
        let err = rel_error(fd, analytic);
        if err > max_rel {
            max_rel = err;
            worst = format!("{label}: fd {fd:.6e} vs analytic {analytic:.6e}");
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: picks.len(),
        worst,
        tolerance: opts.tolerance,
        pass: max_rel < opts.tolerance,
    })
}

/// Runs forward + backward, then verifies the reverse-mode gradients against
/// central differences on randomly sampled coordinates.
pub fn grad_check(
    graph: &mut Graph<f64>,
    params: &mut ParamStore<f64>,
    inputs: &mut Vec<(NodeId, Tensor<f64>)>,
    opts: &CheckOptions,
) -> Result<GradCheckReport, NnError> {
    loss_value(graph, params, inputs)?;
    let grads = graph.backward(params)?;
    let input_grads: Vec<(NodeId, Tensor<f64>)> = inputs
        .iter()
        .map(|(id, t)| {
            let g = grads
                .input_grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.channels(), t.height(), t.width()));
            (*id, g)
        })
        .collect();
    compare_against_fd(graph, params, inputs, &grads.params, &input_grads, opts)
}
