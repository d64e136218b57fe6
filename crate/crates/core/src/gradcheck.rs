//! Central finite-difference gradient checking.
//!
//! Only the forward values of the graph are used to build the numeric
//! estimate, so the check is independent of every backward rule it audits.

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, with 0 when both are (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Worst relative error over all `inputs` between the analytic gradient of
/// the scalar built by `f` and a central-difference estimate.
pub fn check_gradients(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map_or_else(|| vec![0.0; t.len()], |t| t.data().to_vec());
        let mut numeric = vec![0.0; t.len()];
        let mut perturbed = inputs.to_vec();
        for j in 0..t.len() {
            let orig = t.data()[j];
            perturbed[i].data_mut()[j] = orig + DEFAULT_STEP;
            let hi = eval(&perturbed, &f);
            perturbed[i].data_mut()[j] = orig - DEFAULT_STEP;
            let lo = eval(&perturbed, &f);
            perturbed[i].data_mut()[j] = orig;
            numeric[j] = (hi - lo) / (2.0 * DEFAULT_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Same check, but over named parameters of a store. `f` must bind parameters
/// through [`Graph::param`]. At most `max_coords` coordinates per parameter are
/// probed (evenly strided) to keep large models tractable.
pub fn check_param_gradients(
    store: &ParamStore,
    ids: &[ParamId],
    max_coords: usize,
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out).for_store(&g, store);
    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for &id in ids {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&j| grads[id.0].as_ref().map_or(0.0, |t| t.data()[j]))
            .collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + DEFAULT_STEP;
            let mut gh = Graph::new();
            let o = f(&mut gh, &work);
            let hi = gh.value(o).item();
            work.get_mut(id).data_mut()[j] = orig - DEFAULT_STEP;
            let mut gl = Graph::new();
            let o = f(&mut gl, &work);
            let lo = gl.value(o).item();
            work.get_mut(id).data_mut()[j] = orig;
            numeric.push((hi - lo) / (2.0 * DEFAULT_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
