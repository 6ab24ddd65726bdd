/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Central-difference gradient checker.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`;
/// `floor` keeps gradients that are zero up to round-off from being judged
/// on noise alone.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, floor: 1e-6 }
    }
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        Self { step, tol, ..Self::default() }
    }

    /// Checks every coordinate of `point`.
    pub fn run<F>(&self, f: F, point: &[f64], analytic: &[f64]) -> GradCheckReport
    where
        F: FnMut(&[f64]) -> f64,
    {
        let coords: Vec<usize> = (0..point.len()).collect();
        self.run_at(f, point, analytic, &coords)
    }

    /// Whether `f` looks differentiable across `[x_i − step, x_i + step]`:
    /// the forward and backward one-sided slopes must agree within `tol`
    /// relative. A kink (e.g. a ReLU switching) inside the interval breaks
    /// the central difference, so such coordinates are not checkable.
    pub fn is_smooth_at<F>(&self, mut f: F, point: &[f64], i: usize) -> bool
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut x = point.to_vec();
        let mid = f(&x);
        x[i] = point[i] + self.step;
        let up = f(&x);
        x[i] = point[i] - self.step;
        let down = f(&x);
        let (fwd, bwd) = ((up - mid) / self.step, (mid - down) / self.step);
        (fwd - bwd).abs() <= self.tol * fwd.abs().max(bwd.abs()).max(self.floor)
    }

    /// Checks only the listed coordinates.
    pub fn run_at<F>(&self, mut f: F, point: &[f64], analytic: &[f64], coords: &[usize]) -> GradCheckReport
    where
        F: FnMut(&[f64]) -> f64,
    {
        assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
        let mut x = point.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_index: coords.first().copied().unwrap_or(0),
            analytic: Vec::with_capacity(coords.len()),
            numeric: Vec::with_capacity(coords.len()),
            passed: true,
        };
        for &i in coords {
            let orig = x[i];
            x[i] = orig + self.step;
            let up = f(&x);
            x[i] = orig - self.step;
            let down = f(&x);
            x[i] = orig;
            let numeric = (up - down) / (2.0 * self.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_index = i;
            }
            report.analytic.push(a);
            report.numeric.push(numeric);
        }
        report.passed = report.max_rel_error <= self.tol;
        report
    }
}

/// [`GradCheck::run`] with an explicit step and tolerance.
pub fn grad_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    GradCheck::new(step, tol).run(f, point, analytic)
}
