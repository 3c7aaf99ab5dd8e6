use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `f` against central differences at the given
/// parameter coordinates.
///
/// `f` must be a pure function of the parameter values: any noise has to be
/// fixed by the caller. A second unperturbed evaluation that does not
/// reproduce the first loss bit-for-bit yields [`Error::NonDeterministic`].
pub fn grad_check<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).item();
    tape.backward(loss)?;

    let mut probe = Tape::inference();
    let again = f(&mut probe, store)?;
    if probe.value(again).item().to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut entries = Vec::with_capacity(coords.len());
    for &(id, idx) in coords {
        let analytic = tape
            .param_var(id)
            .and_then(|v| tape.grad(v))
            .map_or(0.0, |g| g[idx]);
        let orig = store.value(id).data()[idx];
        store.get_mut(id).value.data_mut()[idx] = orig + eps;
        let plus = eval(&mut f, store)?;
        store.get_mut(id).value.data_mut()[idx] = orig - eps;
        let minus = eval(&mut f, store)?;
        store.get_mut(id).value.data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        entries.push(GradCheckEntry {
            param: store.get(id).name.clone(),
            index: idx,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        entries,
    })
}

fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut t = Tape::inference();
    let v = f(&mut t, store)?;
    Ok(t.value(v).item())
}
