//! Central finite-difference gradient checking.

use super::param::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Step for `(f(x + h) - f(x - h)) / 2h`.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor, so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided); 0 = all.
    pub max_per_param: usize,
    /// Set aside entries whose `[x - h, x + h]` window holds a kink (e.g. a
    /// relu input crossing zero) instead of counting them as errors. See
    /// [`GradCheckReport::kinks`].
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_per_param: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// `(parameter, flat index)` of entries out of tolerance whose one-sided
    /// differences disagree by at least the central-difference error, so the
    /// discrepancy comes from a slope jump inside the window. Only filled
    /// with `skip_kinks`; these entries do not count towards `max_rel_error`.
    pub kinks: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.checked > 0 && self.max_rel_error < cfg.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic parameter gradients with central differences.
///
/// `loss_fn` must evaluate the loss for the current parameter values and,
/// when `backprop` is true, accumulate gradients into the store.
pub fn check_gradients<F>(
    params: &mut ParamStore<f64>,
    cfg: &GradCheckConfig,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    params.zero_grad();
    let base = loss_fn(params, true)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();
    let mut report = GradCheckReport::default();
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let stride = match cfg.max_per_param {
            0 => 1,
            m => n.div_ceil(m).max(1),
        };
        for idx in (0..n).step_by(stride) {
            let id = super::param::ParamId(pi);
            let orig = params.get(id).value.data()[idx];
            params.get_mut(id).value.data_mut()[idx] = orig + cfg.h;
            let plus = loss_fn(params, false)?;
            params.get_mut(id).value.data_mut()[idx] = orig - cfg.h;
            let minus = loss_fn(params, false)?;
            params.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let err = relative_error(grads[idx], numeric, cfg.floor);
            report.checked += 1;
            let slope_jump = ((plus - base) - (base - minus)).abs() / cfg.h;
            if cfg.skip_kinks && err >= cfg.tolerance && slope_jump >= (grads[idx] - numeric).abs()
            {
                report.kinks.push((params.get(id).name.clone(), idx));
                continue;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((params.get(id).name.clone(), idx, grads[idx], numeric));
                }
            }
        }
    }
    params.zero_grad();
    Ok(report)
}
