/// Result of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor so that near-zero gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Central finite differences of `loss` around `params` with step `h`,
/// compared coordinate-wise against `analytic`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradient<F>(loss: F, params: &[f64], analytic: &[f64], h: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || rel.is_nan() {
            report = GradCheckReport {
                max_rel_error: if rel.is_nan() { f64::INFINITY } else { rel },
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    report
}
