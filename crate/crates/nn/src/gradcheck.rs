//! Central finite-difference verification of analytic gradients.

use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_component: usize,
    pub checked: usize,
}

/// Compare `analytic` against central differences of `loss_fn` over every
/// component of every trainable parameter.
///
/// Relative error uses `|a - fd| / max(|a|, |fd|, floor)`; the floor keeps
/// dead components (both sides ~0) from dividing by zero.
pub fn check_all<F>(
    store: &ParamStore,
    analytic: &Grads,
    mut loss_fn: F,
    h: f64,
    floor: f64,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_component: 0,
        checked: 0,
    };
    let mut probe = store.clone();
    for slot in 0..store.len() {
        if !store.get(slot).trainable {
            continue;
        }
        let n = store.value(slot).len();
        for c in 0..n {
            let orig = store.value(slot).data()[c];
            probe.get_mut(slot).value.data_mut()[c] = orig + h;
            let up = loss_fn(&probe);
            probe.get_mut(slot).value.data_mut()[c] = orig - h;
            let down = loss_fn(&probe);
            probe.get_mut(slot).value.data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic
                .get(slot)
                .map(|t| t.data()[c])
                .unwrap_or(0.0);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.get(slot).name.clone();
                report.worst_component = c;
            }
            report.checked += 1;
        }
    }
    report
}

/// Convenience wrapper with the project-standard step and floor.
pub fn check<F>(store: &ParamStore, analytic: &Grads, loss_fn: F) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    check_all(store, analytic, loss_fn, 1e-4, 1e-6)
}
