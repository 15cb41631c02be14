//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::exec::Exec;

use super::matrix::Matrix;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that coordinates with vanishing gradient are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

/// One loss evaluation plus a discrete signature of every routing choice
/// made while computing it.
#[derive(Debug, Clone)]
pub struct Probe<S> {
    pub loss: f64,
    pub signature: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation changed a top-k selection.
    pub skipped: usize,
    /// (block, element) of the worst checked coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn skip_rate(&self) -> f64 {
        let total = self.checked + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

enum Outcome {
    Checked(f64),
    Skipped,
}

/// Compares `analytic` against central differences of `loss_fn` over every
/// coordinate of `params`.
pub fn grad_check<S, F>(
    loss_fn: F,
    params: &[Matrix],
    analytic: &[Matrix],
    h: f64,
    exec: Exec,
) -> Result<GradCheckReport>
where
    S: PartialEq + Send + Sync,
    F: Fn(&[Matrix]) -> Result<Probe<S>> + Sync + Send,
{
    if params.len() != analytic.len() {
        return Err(Error::invalid(format!(
            "{} parameter blocks but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(Error::shape("grad_check", p.shape_str(), g.shape_str()));
        }
    }
    let base = loss_fn(params)?;
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(b, p)| (0..p.len()).map(move |e| (b, e)))
        .collect();

    let outcomes = exec.map(coords.len(), |i| -> Result<Outcome> {
        let (b, e) = coords[i];
        let mut shifted = params.to_vec();
        let orig = params[b].data()[e];
        shifted[b].data_mut()[e] = orig + h;
        let plus = loss_fn(&shifted)?;
        shifted[b].data_mut()[e] = orig - h;
        let minus = loss_fn(&shifted)?;
        if plus.signature != base.signature || minus.signature != base.signature {
            return Ok(Outcome::Skipped);
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * h);
        Ok(Outcome::Checked(relative_error(analytic[b].data()[e], numeric)))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome? {
            Outcome::Skipped => report.skipped += 1,
            Outcome::Checked(err) => {
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some(coords[i]);
                }
            }
        }
    }
    Ok(report)
}
