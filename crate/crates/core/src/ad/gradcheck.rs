//! Central finite-difference gradient checking with Ridders' extrapolation.
//!
//! The numeric side only ever calls the forward function; it never looks at
//! the tape's backward rules.

use super::error::AdError;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Below this magnitude gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input or parameter index, element index) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub worst_pair: (f64, f64),
}

impl GradCheck {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((input, elem));
            self.worst_pair = (analytic, numeric);
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_pair = other.worst_pair;
        }
    }
}

/// Ridders' extrapolation of central differences started at step `h`: the
/// step shrinks geometrically and the tableau entry with the smallest error
/// estimate wins.
fn extrapolated<E>(h: f64, mut at: impl FnMut(f64) -> Result<f64, E>) -> Result<f64, E> {
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 10;
    let mut central = |h: f64| -> Result<f64, E> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
    let shrink2 = SHRINK * SHRINK;
    let mut table = [[0.0f64; ROWS]; ROWS];
    let mut step = h;
    table[0][0] = central(step)?;
    let (mut best, mut err) = (table[0][0], f64::INFINITY);
    for i in 1..ROWS {
        step /= SHRINK;
        table[0][i] = central(step)?;
        let mut factor = shrink2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * factor - table[j - 1][i - 1]) / (factor - 1.0);
            factor *= shrink2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reduces a non-scalar output to a scalar with fixed, distinct weights so
/// that constant-sum outputs (softmax, say) still get a nontrivial gradient.
fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var, AdError> {
    if tape.value(y).numel() == 1 {
        return Ok(y);
    }
    let shape = tape.shape(y).to_vec();
    let n = tape.value(y).numel();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.7).sin() + 0.1)
        .collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

/// Checks the gradient of `f` with respect to every element of every input.
pub fn check_op<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck, AdError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AdError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let loss = probe(&mut tape, y)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&mut tape, &vars)?;
    let loss = probe(&mut tape, y)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (e, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[e];
            let numeric = extrapolated(h, |d| {
                work[i].data_mut()[e] = orig + d;
                eval(&work)
            })?;
            work[i].data_mut()[e] = orig;
            report.record(i, e, a, numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every trainable
/// parameter in `store`. `f` must build the loss on the given tape from the
/// given store and be deterministic.
pub fn check_params<F, E>(store: &mut ParamStore<f64>, h: f64, mut f: F) -> Result<GradCheck, E>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var, E>,
    E: From<AdError>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, g) in grads.params() {
        let slot = analytic[id.index()].get_or_insert_with(|| vec![0.0; g.numel()]);
        slot.iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b);
    }

    let mut report = GradCheck::default();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        for e in 0..n {
            let orig = store.get(id).data()[e];
            let numeric = extrapolated(h, |d| -> Result<f64, E> {
                store.get_mut(id).data_mut()[e] = orig + d;
                let mut t = Tape::new();
                let l = f(store, &mut t)?;
                Ok(t.value(l).data()[0])
            })?;
            store.get_mut(id).data_mut()[e] = orig;
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[e]);
            report.record(id.index(), e, a, numeric);
        }
    }
    Ok(report)
}
