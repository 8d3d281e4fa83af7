//! Central finite-difference gradient checking in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator so
/// that gradients that are zero up to rounding do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Where the largest error occurred, e.g. `"param conv.weight[3]"`.
    pub worst: Option<String>,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the analytic gradients of `f` against central differences.
///
/// `f` maps the given inputs (registered as grad-requiring leaves) to an output
/// tensor; it is reduced to a scalar by a fixed random projection. Every
/// non-frozen parameter entry and every input entry is perturbed by `±eps`.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |params: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };

    // Analytic pass.
    let (proj, analytic_params, analytic_inputs) = {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.input_with_grad(t.clone()))
            .collect();
        let out = f(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.value(out).shape().to_vec();
        let proj = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
        let grads = tape.backward(out, proj.clone())?;
        let mut store_grads = params.clone();
        store_grads.zero_grad();
        grads.accumulate_into(&mut store_grads);
        let pg: Vec<Tensor<f64>> = store_grads.iter().map(|(_, p)| p.grad.clone()).collect();
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (proj, pg, ig)
    };
    let objective = |y: &Tensor<f64>| -> f64 {
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let note = |report: &mut GradCheckReport, err: f64, label: String| {
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(label);
        }
    };

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if params.get(id).frozen {
            continue;
        }
        for k in 0..params.get(id).value.len() {
            let orig = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = objective(&eval(params, inputs)?);
            params.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = objective(&eval(params, inputs)?);
            params.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic_params[pi].data()[k], numeric);
            note(&mut report, err, format!("param {}[{k}]", params.get(id).name));
        }
    }
    let mut perturbed = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            perturbed[ii].data_mut()[k] = orig + eps;
            let plus = objective(&eval(params, &perturbed)?);
            perturbed[ii].data_mut()[k] = orig - eps;
            let minus = objective(&eval(params, &perturbed)?);
            perturbed[ii].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic_inputs[ii].data()[k], numeric);
            note(&mut report, err, format!("input {ii}[{k}]"));
        }
    }
    Ok(report)
}
