//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation size for central differences.
    pub step: f64,
    /// Number of coordinates to probe; `None` probes all of them.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// A coordinate whose one-sided slopes disagree by more than this fraction
    /// of their magnitude straddles a kink (max-pool tie, |x| at 0) and is
    /// skipped.
    pub kink_ratio: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            samples: None,
            seed: 0,
            floor: 1e-6,
            kink_ratio: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, if any was checked.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (the reverse-mode gradient of `f` at `theta`) with
/// central differences of `f` on a seeded subset of coordinates.
pub fn grad_check<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "gradient length");
    let coords: Vec<usize> = match cfg.samples {
        Some(k) if k < theta.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, theta.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..theta.len()).collect(),
    };
    grad_check_at(&mut f, theta, analytic, &coords, cfg)
}

/// As [`grad_check`], probing exactly `coords`.
pub fn grad_check_at<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check_branches(|x| (f(x), Vec::new()), theta, analytic, coords, cfg)
}

/// As [`grad_check_at`] for a function that also reports its discrete branch
/// choices (see [`crate::Tape::branch_signature`]). A coordinate whose
/// perturbation changes the branch signature is skipped as a kink.
pub fn grad_check_branches<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<i64>),
{
    let h = cfg.step;
    let (f0, sig0) = f(theta);
    let mut point = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    for &i in coords {
        let orig = point[i];
        point[i] = orig + h;
        let (fp, sig_p) = f(&point);
        point[i] = orig - h;
        let (fm, sig_m) = f(&point);
        point[i] = orig;

        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        let spread = (forward - backward).abs();
        let crossed = sig_p != sig0 || sig_m != sig0;
        if crossed || spread > cfg.kink_ratio * forward.abs().max(backward.abs()).max(cfg.floor) {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric, cfg.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst_index = Some(i);
            }
        }
    }
    report
}
