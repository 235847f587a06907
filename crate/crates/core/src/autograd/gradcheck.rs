//! Central finite-difference checks of tape gradients.

use super::{Bound, ParamStore, Tape, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that gradients that are
/// zero on both sides do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every trainable entry of `store` (or every `stride`-th entry of
/// each parameter when `stride > 1`) against central differences of `loss`.
pub fn check_gradients(
    store: &ParamStore,
    step: f64,
    stride: usize,
    loss: impl for<'t> Fn(&Bound<'t>) -> Var<'t>,
) -> GradCheck {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = loss(&bound);
    let grads = bound.gradients(&tape.backward(out));

    let eval = |s: &ParamStore| {
        let t = Tape::new();
        let b = s.bind_with(&t, |_| false);
        loss(&b).item()
    };
    let mut probe = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, g) in &grads {
        let g = g.as_standard_layout();
        let len = g.len();
        for idx in (0..len).step_by(stride.max(1)) {
            let orig = probe.expect(name).as_slice().expect("standard layout")[idx];
            let set = |p: &mut ParamStore, v: f64| {
                p.get_mut(name).unwrap().as_slice_mut().expect("standard layout")[idx] = v;
            };
            set(&mut probe, orig + step);
            let up = eval(&probe);
            set(&mut probe, orig - step);
            let down = eval(&probe);
            set(&mut probe, orig);
            let numeric = (up - down) / (2.0 * step);
            let analytic = g.as_slice().expect("standard layout")[idx];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = format!("{name}[{idx}] analytic {analytic:.3e} numeric {numeric:.3e}");
            }
        }
    }
    report
}
