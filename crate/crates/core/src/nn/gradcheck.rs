use crate::error::{invalid, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Denominator floor of the relative error, so that gradients that are
/// zero up to finite-difference noise do not register as failures.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Step reductions tried when a probe straddles a non-smooth point.
pub const KINK_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst probe.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Probes whose interval crossed a kink at the default step and were
    /// re-measured with a smaller one.
    pub refined: usize,
    /// Probes that still crossed a kink at the smallest step; excluded.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` builds the scalar on a fresh graph from leaves holding `inputs`.
/// `probes` lists `(input, element)` pairs to check; `None` checks every
/// element of every input.
pub fn finite_diff_check<S: Scalar>(
    inputs: &[Tensor<S>],
    probes: Option<&[(usize, usize)]>,
    step: f64,
    mut f: impl FnMut(&mut Graph<S>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k))).collect();
            &all
        }
    };
    if probes.is_empty() {
        return Err(invalid!("no probes to check"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut eval = |perturbed: &[Tensor<S>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = f(&mut g, &vars)?;
        Ok((g.value(l).item()?.to_f64_lossy(), g.branch_fingerprint()))
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: probes[0],
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        refined: 0,
        skipped: 0,
    };
    for &(i, k) in probes {
        if i >= inputs.len() || k >= inputs[i].numel() {
            return Err(invalid!("probe ({i}, {k}) out of range"));
        }
        let analytic = grads.get(vars[i]).map_or(0.0, |gr| gr[k].to_f64_lossy());
        let orig = work[i].data()[k];
        let mut numeric = None;
        let mut h = step;
        for attempt in 0..=KINK_RETRIES {
            work[i].data_mut()[k] = orig + S::lit(h);
            let (up, up_branch) = eval(&work)?;
            work[i].data_mut()[k] = orig - S::lit(h);
            let (down, down_branch) = eval(&work)?;
            work[i].data_mut()[k] = orig;
            if up_branch == down_branch {
                numeric = Some((up - down) / (2.0 * h));
                report.refined += (attempt > 0) as usize;
                break;
            }
            h /= 10.0;
        }
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        let err = relative_error(analytic, numeric);
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (i, k);
            report.analytic = analytic;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
