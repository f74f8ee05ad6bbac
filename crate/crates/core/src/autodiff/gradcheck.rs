use super::{AutodiffError, Tape, Tensor, Var};

/// Central-difference step, tolerances, and optional coordinate sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub rel_tol: f64,
    /// Differences at or below this pass regardless of relative error.
    pub abs_tol: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_abs_err: f64,
    /// Largest relative error among coordinates outside the absolute floor.
    pub max_rel_err: f64,
    pub failures: usize,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(ParamCheck::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| AutodiffError::NonScalarLoss(tape.value(out).shape().to_vec()))
}

/// Compares tape gradients of `f` against `(f(p + h) - f(p - h)) / 2h`
/// for every coordinate of every parameter.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        let n = params[pi].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            index: pi,
            coords_checked: coords.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            failures: 0,
        };
        for c in coords {
            let original = work[pi].data()[c];
            work[pi].data_mut()[c] = original + cfg.h;
            let up = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = original - cfg.h;
            let down = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = original;

            let numeric = (up - down) / (2.0 * cfg.h);
            let g = analytic.data()[c];
            let abs_err = (g - numeric).abs();
            check.max_abs_err = check.max_abs_err.max(abs_err);
            if abs_err > cfg.abs_tol {
                let rel = abs_err / g.abs().max(numeric.abs());
                check.max_rel_err = check.max_rel_err.max(rel);
                if rel > cfg.rel_tol {
                    check.failures += 1;
                }
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}
