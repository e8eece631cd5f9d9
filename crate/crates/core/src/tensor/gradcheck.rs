//! Central finite-difference check of analytic gradients.
//!
//! Only the forward pass is used to form the numeric estimate, so the check
//! is independent of every backward rule on the tape.

use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// with step `h` for every trainable scalar. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    h: f64,
    floor: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).iter().next().copied().unwrap_or(0.0))
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, e)| (id, e.name.clone(), e.value.len()))
        .collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (id, name, len) in ids {
        for k in 0..len {
            let orig = store.value(id).as_slice_memory_order().unwrap()[k];
            store.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic
                .get(id)
                .map(|t| t.as_slice_memory_order().unwrap()[k])
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{k}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
