use super::{Graph, NumericsError, ParamStore, Var};

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub checked: usize,
    /// Entries left out because every tried step crossed a ReLU kink.
    pub skipped_kinks: usize,
}

/// Relative error with a 1e-6 floor on the denominator, so entries whose
/// true gradient is ~0 are judged on absolute error instead.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every scalar of every parameter in `store`. See
/// [`grad_check_sampled`] for large stores.
pub fn grad_check<L>(store: &mut ParamStore<f64>, eps: f64, loss: L) -> Result<GradCheckReport, NumericsError>
where
    L: Fn(&mut Graph<'_, f64>) -> Result<Var, NumericsError>,
{
    grad_check_sampled(store, eps, usize::MAX, |_| true, loss)
}

/// Smallest step tried before an entry is declared to sit on a ReLU kink;
/// below it roundoff swamps the difference quotient.
const MIN_STEP: f64 = 1e-5;

/// Compares the tape gradient of `loss` against the fourth-order central
/// difference with step `eps`, for at most `per_param` evenly spaced entries
/// of each parameter selected by `include`.
///
/// The stencil is only valid where the loss is smooth: when any ReLU input
/// changes sign between the stencil points the step is halved, and
/// if that persists down to `MIN_STEP` the entry is counted in
/// `skipped_kinks` instead of being compared.
pub fn grad_check_sampled<L>(
    store: &mut ParamStore<f64>,
    eps: f64,
    per_param: usize,
    include: impl Fn(&str) -> bool,
    loss: L,
) -> Result<GradCheckReport, NumericsError>
where
    L: Fn(&mut Graph<'_, f64>) -> Result<Var, NumericsError>,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<(f64, Vec<bool>), NumericsError> {
        let mut g = Graph::inference(store);
        let l = loss(&mut g)?;
        let v = g.value(l).data()[0];
        if v.is_finite() {
            Ok((v, g.relu_pattern()))
        } else {
            Err(NumericsError::NonFinite(format!("loss = {v}")))
        }
    };
    let (_, pattern) = eval(store)?;
    let mut report = GradCheckReport::default();
    for id in 0..store.len() {
        if !include(store.name(id)) {
            continue;
        }
        let analytic = grads.dense(store, id);
        let n = analytic.numel();
        let stride = n.div_ceil(per_param.min(n).max(1));
        for k in (0..n).step_by(stride.max(1)) {
            let orig = store.value(id).data()[k];
            let mut numeric = None;
            let mut h = eps;
            while h >= MIN_STEP {
                let mut smooth = true;
                let mut f = [0.0; 4];
                for (slot, off) in f.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
                    store.value_mut(id).data_mut()[k] = orig + off;
                    let r = eval(store);
                    store.value_mut(id).data_mut()[k] = orig;
                    let (v, p) = r?;
                    smooth &= p == pattern;
                    *slot = v;
                }
                if smooth {
                    numeric = Some((8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h));
                    break;
                }
                h /= 2.0;
            }
            let Some(numeric) = numeric else {
                report.skipped_kinks += 1;
                continue;
            };
            let err = rel_error(analytic.data()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(format!("{}[{k}]", store.name(id)));
            }
        }
    }
    Ok(report)
}
