//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many coordinates per input (chosen at random);
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Largest discrepancy found and where.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, at: (usize, usize)) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some(at);
        }
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn finite(v: f64, input: usize, coord: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            location: format!("{what} at input {input}, coordinate {coord}"),
            value: v,
        })
    }
}

/// Reduce a (possibly non-scalar) output to a scalar via a fixed random
/// projection, so every output coordinate influences the check.
struct Projection {
    weights: Option<Tensor<f64>>,
}

impl Projection {
    fn new(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let len: usize = shape.iter().product();
        if len == 1 {
            return Projection { weights: None };
        }
        Projection {
            weights: Some(Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))),
        }
    }

    fn apply(&self, tape: &mut Tape<f64>, out: Var) -> Result<Var> {
        match &self.weights {
            None => Ok(out),
            Some(w) => {
                let r = tape.input(w.clone());
                let prod = tape.mul(out, r)?;
                Ok(tape.sum(prod))
            }
        }
    }
}

fn coords(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Compare the analytic gradient of `f` with respect to each of `inputs`
/// against central differences. Inputs are not mutated.
pub fn finite_difference_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval = |vals: &[Tensor<f64>], proj: Option<&Projection>| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input_with_grad(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let out = match proj {
            Some(p) => p.apply(&mut tape, out)?,
            None => out,
        };
        Ok((tape, vars, out))
    };

    let (probe, _, out) = eval(inputs, None)?;
    let projection = Projection::new(probe.shape(out), &mut rng);
    let (tape, vars, out) = eval(inputs, Some(&projection))?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        for c in coords(inputs[i].len(), config.max_coords, &mut rng) {
            let original = inputs[i].data()[c];
            work[i].data_mut()[c] = original + config.eps;
            let (t, _, o) = eval(&work, Some(&projection))?;
            let plus = finite(t.value(o).item(), i, c, "f(x + eps)")?;
            work[i].data_mut()[c] = original - config.eps;
            let (t, _, o) = eval(&work, Some(&projection))?;
            let minus = finite(t.value(o).item(), i, c, "f(x - eps)")?;
            work[i].data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * config.eps);
            let a = finite(analytic.data()[c], i, c, "analytic gradient")?;
            report.record(a, numeric, (i, c));
        }
    }
    Ok(report)
}

/// Spot-check `samples` randomly chosen scalar parameters of a model whose
/// scalar loss is computed by `loss`.
pub fn param_spot_check<F>(
    store: &ParamStore<f64>,
    loss: F,
    samples: usize,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let pg = tape.param_grads(&grads, store);

    let total = store.scalar_count();
    let mut offsets = Vec::with_capacity(store.len());
    let mut acc = 0;
    for t in store.tensors() {
        offsets.push(acc);
        acc += t.len();
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = store.clone();
    for flat in coords(total, Some(samples), &mut rng) {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let id = ParamId(p);
        let c = flat - offsets[p];
        let original = store.get(id).data()[c];
        let mut value_at = |x: f64| -> Result<f64> {
            work.get_mut(id).data_mut()[c] = x;
            let mut t = Tape::new();
            let o = loss(&mut t, &work)?;
            finite(t.value(o).item(), p, c, "perturbed loss")
        };
        let plus = value_at(original + config.eps)?;
        let minus = value_at(original - config.eps)?;
        work.get_mut(id).data_mut()[c] = original;
        let numeric = (plus - minus) / (2.0 * config.eps);
        let analytic = finite(pg.get(id).data()[c], p, c, "analytic gradient")?;
        report.record(analytic, numeric, (p, c));
    }
    Ok(report)
}
