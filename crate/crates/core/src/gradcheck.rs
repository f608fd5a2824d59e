//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor so coordinates with near-zero gradient are compared
/// absolutely rather than amplifying round-off. Central differences with
/// h = 1e-5 on O(1) losses carry ~1e-10 of cancellation noise.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error: (input or parameter index,
    /// flat coordinate, analytic, numeric).
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, tensor: usize, coord: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((tensor, coord, analytic, numeric));
        }
        self.checked += 1;
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar(f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares autodiff gradients of the scalar `f(inputs)` with central
/// differences of step `h` on every input coordinate.
pub fn check_inputs(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.record(i, j, analytic.data()[j], numeric);
        }
    }
    Ok(report)
}

/// Same check against parameters of a store, probing `per_param` randomly
/// chosen coordinates of each listed parameter (all of them when the
/// parameter is smaller).
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    h: f64,
    seed: u64,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Option<Vec<f64>>> = alloc::vec![None; store.len()];
    for (p, g) in grads.params() {
        analytic[p.0] = g.map(|g| g.to_vec());
    }
    drop(tape);
    let mut rng = Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let value_at = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, s)?;
        Ok(t.value(o).item())
    };
    for &id in ids {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= per_param { (0..n).collect() } else { (0..per_param).map(|_| rng.below(n)).collect() };
        for j in coords {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = value_at(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = value_at(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[j]);
            report.record(id.0, j, a, numeric);
        }
    }
    Ok(report)
}
