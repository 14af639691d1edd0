//! Psychometric-function fitting and PSE extraction.
//!
//! The fitted curve is a four-parameter cumulative Gaussian
//! `P(x) = gamma + (1 - gamma - lam) * Phi((x - mu) / sigma)` with guess rate
//! `gamma` and lapse rate `lam`. The point of subjective equality is the `x`
//! at which `P(x) = 0.5`; fits whose curve never crosses 0.5 inside the
//! plausible window `[-0.5, 1.5]` are flagged degenerate and carry no PSE.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::function::erf;
use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

/// Parameter bounds for the fit.
pub const MU_BOUNDS: (f64, f64) = (-0.5, 1.5);
pub const SIGMA_BOUNDS: (f64, f64) = (1e-3, 2.0);
pub const ASYMPTOTE_BOUNDS: (f64, f64) = (0.0, 0.5);
/// Crossings outside this window count as the published "large bias" discards.
pub const PSE_WINDOW: (f64, f64) = (-0.5, 1.5);

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    0.5 * erf::erfc(-z / SQRT_2)
}

/// Standard normal quantile, polished with two Newton steps so that
/// `phi(probit(p))` matches `p` to ~1e-15.
pub fn probit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probit domain is (0,1), got {p}");
    let mut x = SQRT_2 * erf::erf_inv(2.0 * p - 1.0);
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        if pdf <= f64::MIN_POSITIVE {
            break;
        }
        x -= (phi(x) - p) / pdf;
    }
    x
}

/// Fitted psychometric curve plus derived PSE and degeneracy flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsychometricFit {
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub lam: f64,
    pub pse: Option<f64>,
    pub degenerate: bool,
    pub sse: f64,
}

impl PsychometricFit {
    /// Curve value at `x`.
    pub fn value(&self, x: f64) -> f64 {
        curve(x, self.mu, self.sigma, self.gamma, self.lam)
    }
}

pub fn curve(x: f64, mu: f64, sigma: f64, gamma: f64, lam: f64) -> f64 {
    gamma + (1.0 - gamma - lam) * phi((x - mu) / sigma)
}

fn check_asymptotes(gamma: f64, lam: f64) -> Result<()> {
    for (name, v) in [("gamma", gamma), ("lam", lam)] {
        if !(ASYMPTOTE_BOUNDS.0..=ASYMPTOTE_BOUNDS.1).contains(&v) {
            return Err(Error::Fit(format!(
                "{name} = {v} outside [{}, {}]",
                ASYMPTOTE_BOUNDS.0, ASYMPTOTE_BOUNDS.1
            )));
        }
    }
    Ok(())
}

/// PSE of a curve with the given parameters: the solution of `P(x) = 0.5`
/// when `0.5` lies strictly between the asymptotes and the crossing falls
/// inside [`PSE_WINDOW`]; `None` (degenerate) otherwise. Asymptotes outside
/// their bounds are rejected.
pub fn pse_from_params(mu: f64, sigma: f64, gamma: f64, lam: f64) -> Result<Option<f64>> {
    check_asymptotes(gamma, lam)?;
    if sigma <= 0.0 {
        return Err(Error::Fit(format!("sigma must be positive, got {sigma}")));
    }
    let upper = 1.0 - lam;
    if !(gamma < 0.5 && 0.5 < upper) {
        return Ok(None);
    }
    let q = (0.5 - gamma) / (1.0 - gamma - lam);
    let pse = mu + sigma * probit(q);
    if (PSE_WINDOW.0..=PSE_WINDOW.1).contains(&pse) {
        Ok(Some(pse))
    } else {
        Ok(None)
    }
}

/// PSE of a fit. Returns the stored value, which [`fit_psychometric`] derives
/// from [`pse_from_params`] plus the flat-curve identifiability guard.
pub fn pse_of(fit: &PsychometricFit) -> Option<f64> {
    fit.pse
}

/// Minimum variation of the fitted curve across the observed levels for its
/// 0.5-crossing to count. A curve that is effectively constant over the data
/// never pins down where it would cross, so the fit is degenerate.
pub const FLAT_CURVE_GUARD: f64 = 0.05;

fn sse_for(points: &[(f64, f64)], p: [f64; 4]) -> f64 {
    let [mu, sigma, gamma, lam] = p;
    points
        .iter()
        .map(|&(x, y)| {
            let d = curve(x, mu, sigma, gamma, lam) - y;
            d * d
        })
        .sum()
}

const BOUNDS: [(f64, f64); 4] = [MU_BOUNDS, SIGMA_BOUNDS, ASYMPTOTE_BOUNDS, ASYMPTOTE_BOUNDS];

fn to_unbounded(p: [f64; 4]) -> [f64; 4] {
    let mut u = [0.0; 4];
    for i in 0..4 {
        let (lo, hi) = BOUNDS[i];
        let margin = 1e-9 * (hi - lo);
        let t = ((p[i] - lo) / (hi - lo)).clamp(margin, 1.0 - margin);
        u[i] = (t / (1.0 - t)).ln();
    }
    u
}

fn to_bounded(u: [f64; 4]) -> [f64; 4] {
    let mut p = [0.0; 4];
    for i in 0..4 {
        let (lo, hi) = BOUNDS[i];
        let s = 1.0 / (1.0 + (-u[i]).exp());
        p[i] = lo + (hi - lo) * s;
    }
    p
}

/// Nelder-Mead on R^4. Deterministic; returns the best vertex and its value.
fn nelder_mead(f: &dyn Fn(&[f64; 4]) -> f64, start: [f64; 4], max_eval: usize) -> ([f64; 4], f64) {
    const ALPHA: f64 = 1.0;
    const GAMMA_E: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIG: f64 = 0.5;
    let n = 4usize;
    let mut simplex: Vec<[f64; 4]> = vec![start; n + 1];
    for (i, v) in simplex.iter_mut().enumerate().skip(1) {
        v[i - 1] += 0.75;
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = n + 1;
    while evals < max_eval {
        // Order ascending by value.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite SSE"));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];
        if (values[worst] - values[best]).abs() <= 1e-15 + 1e-12 * values[best].abs() {
            break;
        }
        // Centroid of all but the worst.
        let mut centroid = [0.0; 4];
        for &i in order.iter().take(n) {
            for d in 0..4 {
                centroid[d] += simplex[i][d] / n as f64;
            }
        }
        let lerp = |a: &[f64; 4], b: &[f64; 4], t: f64| {
            let mut r = [0.0; 4];
            for d in 0..4 {
                r[d] = a[d] + t * (b[d] - a[d]);
            }
            r
        };
        let reflected = lerp(&centroid, &simplex[worst], -ALPHA);
        let fr = f(&reflected);
        evals += 1;
        if fr < values[best] {
            let expanded = lerp(&centroid, &simplex[worst], -ALPHA * GAMMA_E);
            let fe = f(&expanded);
            evals += 1;
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            let contracted = lerp(&centroid, &simplex[worst], RHO);
            let fc = f(&contracted);
            evals += 1;
            if fc < values[worst] {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                // Shrink toward the best vertex.
                let anchor = simplex[best];
                for i in 0..=n {
                    if i != best {
                        simplex[i] = lerp(&anchor, &simplex[i], SIG);
                        values[i] = f(&simplex[i]);
                        evals += 1;
                    }
                }
            }
        }
    }
    let mut best_i = 0;
    for i in 1..=n {
        if values[i] < values[best_i] {
            best_i = i;
        }
    }
    (simplex[best_i], values[best_i])
}

/// Least-squares fit over the bounded parameter space with a fixed,
/// deterministic 3x3x2x2 grid of starting points and Nelder-Mead refinement.
/// Among near-tied minima (SSE within `1e-9 * (1 + best)`), the candidate from
/// the earliest grid start wins.
pub fn fit_psychometric(points: &[(f64, f64)]) -> Result<PsychometricFit> {
    for &(x, y) in points {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Fit(format!("non-finite input point ({x}, {y})")));
        }
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::Fit(format!("proportion {y} outside [0, 1]")));
        }
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    distinct.dedup_by(|a, b| a == b);
    if distinct.len() < 4 {
        return Err(Error::Fit(format!(
            "need at least 4 distinct stimulus levels, got {}",
            distinct.len()
        )));
    }
    let xmin = *distinct.first().expect("nonempty");
    let xmax = *distinct.last().expect("nonempty");

    let mu_starts = [
        xmin.clamp(MU_BOUNDS.0, MU_BOUNDS.1),
        (0.5 * (xmin + xmax)).clamp(MU_BOUNDS.0, MU_BOUNDS.1),
        xmax.clamp(MU_BOUNDS.0, MU_BOUNDS.1),
    ];
    let sigma_starts = [0.05, 0.2, 0.8];
    // Descending asymptote starts: when the data are flat the asymptotes are
    // not identified, the optimizer stays near its start, and the tie-break
    // below must then land on a start that reports the flat fit as degenerate.
    let asym_starts = [0.3, 0.02];

    let objective = |u: &[f64; 4]| sse_for(points, to_bounded(*u));
    let mut candidates: Vec<(usize, [f64; 4], f64)> = Vec::new();
    let mut grid_index = 0usize;
    for mu0 in mu_starts {
        for sigma0 in sigma_starts {
            for gamma0 in asym_starts {
                for lam0 in asym_starts {
                    let start = to_unbounded([mu0, sigma0, gamma0, lam0]);
                    let (mut u, mut val) = nelder_mead(&objective, start, 1600);
                    // Restart from the found vertex until converged.
                    for _ in 0..3 {
                        let (u2, v2) = nelder_mead(&objective, u, 1600);
                        if val - v2 <= 1e-16 {
                            u = u2;
                            val = v2.min(val);
                            break;
                        }
                        u = u2;
                        val = v2;
                    }
                    candidates.push((grid_index, to_bounded(u), val));
                    grid_index += 1;
                }
            }
        }
    }
    let best_sse =
        candidates.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let tie = 1e-9 * (1.0 + best_sse);
    let winner = candidates
        .iter()
        .filter(|c| c.2 <= best_sse + tie)
        .min_by_key(|c| c.0)
        .expect("at least one candidate");
    let [mu, sigma, gamma, lam] = winner.1;
    let span = curve(xmax, mu, sigma, gamma, lam) - curve(xmin, mu, sigma, gamma, lam);
    let pse = if span < FLAT_CURVE_GUARD {
        None
    } else {
        pse_from_params(mu, sigma, gamma, lam)?
    };
    Ok(PsychometricFit { mu, sigma, gamma, lam, pse, degenerate: pse.is_none(), sse: winner.2 })
}

/// One 2AFC trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub participant: String,
    pub level: f64,
    pub response: Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Happy,
    Sad,
}

/// Aggregate of per-participant PSEs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumanBaseline {
    pub pses: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub sem: f64,
}

impl HumanBaseline {
    pub fn from_pses(pses: Vec<f64>) -> Result<Self> {
        let n = pses.len();
        if n < 2 {
            return Err(Error::Fit(format!("baseline needs >= 2 participants, got {n}")));
        }
        let mean = pses.iter().sum::<f64>() / n as f64;
        let var = pses.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        Ok(Self { pses, n, mean, sd, sem: sd / (n as f64).sqrt() })
    }

    /// Baseline from published summary statistics (no raw PSEs).
    pub fn from_summary(mean: f64, sem: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Fit(format!("baseline needs n >= 2, got {n}")));
        }
        if sem < 0.0 {
            return Err(Error::Fit(format!("sem must be nonnegative, got {sem}")));
        }
        Ok(Self { pses: Vec::new(), n, mean, sd: sem * (n as f64).sqrt(), sem })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantFit {
    pub participant: String,
    pub fit: PsychometricFit,
}

/// Per-participant fits plus the aggregate baseline over the non-degenerate
/// ones; degenerate participants are listed in `excluded`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantSummary {
    pub baseline: HumanBaseline,
    pub fits: Vec<ParticipantFit>,
    pub excluded: Vec<String>,
}

/// Fits every participant's proportion-happy curve and aggregates PSEs.
pub fn fit_participants(trials: &[TrialRecord]) -> Result<ParticipantSummary> {
    if trials.is_empty() {
        return Err(Error::EmptyInput("no trials".into()));
    }
    let mut by_participant: BTreeMap<&str, Vec<&TrialRecord>> = BTreeMap::new();
    for t in trials {
        by_participant.entry(t.participant.as_str()).or_default().push(t);
    }
    if by_participant.len() < 2 {
        return Err(Error::Fit(format!(
            "need >= 2 participants, got {}",
            by_participant.len()
        )));
    }
    let mut fits = Vec::new();
    let mut excluded = Vec::new();
    let mut pses = Vec::new();
    for (id, records) in by_participant {
        let mut by_level: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
        for r in records {
            let key = r.level.to_bits();
            let entry = by_level.entry(key).or_insert((r.level, 0, 0));
            entry.2 += 1;
            if r.response == Response::Happy {
                entry.1 += 1;
            }
        }
        if by_level.len() < 4 {
            return Err(Error::Fit(format!(
                "participant {id} has {} distinct levels (need >= 4)",
                by_level.len()
            )));
        }
        let points: Vec<(f64, f64)> = by_level
            .values()
            .map(|&(level, happy, total)| (level, happy as f64 / total as f64))
            .collect();
        let fit = fit_psychometric(&points)?;
        match fit.pse {
            Some(p) => pses.push(p),
            None => excluded.push(id.to_string()),
        }
        fits.push(ParticipantFit { participant: id.to_string(), fit });
    }
    if pses.is_empty() {
        return Err(Error::Fit("every participant's fit is degenerate".into()));
    }
    if pses.len() < 2 {
        return Err(Error::Fit("fewer than 2 usable participants after exclusion".into()));
    }
    Ok(ParticipantSummary { baseline: HumanBaseline::from_pses(pses)?, fits, excluded })
}

/// Sweeps a continuum with a model and fits the resulting response curve.
pub fn model_curve(
    model: &crate::zoo::Model<f32>,
    continuum: &crate::stimuli::MorphContinuum,
) -> Result<PsychometricFit> {
    let points = crate::zoo::classify_continuum(model, continuum)?;
    fit_psychometric(&points)
}

/// Reads a trials CSV with header `participant,level,response`
/// (response = happy|sad).
pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expect = ["participant", "level", "response"];
    let ok = headers.len() == 3 && headers.iter().zip(expect).all(|(h, e)| h.trim() == e);
    if !ok {
        return Err(Error::Validation(format!(
            "trials CSV must have header `participant,level,response`, got {:?}",
            headers
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let level: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad level `{}` in trials CSV", &record[1])))?;
        let response = match record[2].trim().to_ascii_lowercase().as_str() {
            "happy" => Response::Happy,
            "sad" => Response::Sad,
            other => {
                return Err(Error::Validation(format!(
                    "bad response `{other}` (expected happy|sad)"
                )))
            }
        };
        out.push(TrialRecord { participant: record[0].trim().to_string(), level, response });
    }
    Ok(out)
}

pub fn write_trials_csv(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["participant", "level", "response"])?;
    for t in trials {
        let response = match t.response {
            Response::Happy => "happy",
            Response::Sad => "sad",
        };
        w.write_record([t.participant.as_str(), &format!("{}", t.level), response])?;
    }
    w.flush()?;
    Ok(())
}

/// Simulates 2AFC participants from a generating psychometric curve; each
/// participant's location parameter is drawn from
/// `Normal(mu_mean, mu_spread)`. Useful for desk-scale baselines and tests.
pub fn simulate_participants(
    seed: u64,
    n_participants: usize,
    levels: &[f64],
    reps: usize,
    mu_mean: f64,
    mu_spread: f64,
    sigma: f64,
    gamma: f64,
    lam: f64,
) -> Vec<TrialRecord> {
    use rand::{Rng, SeedableRng};
    let mut trials = Vec::with_capacity(n_participants * levels.len() * reps);
    for p in 0..n_participants {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(
            seed ^ (p as u64).wrapping_mul(0xA076_1D64_78BD_642F),
        );
        let mu_p = mu_mean + mu_spread * standard_normal(&mut rng);
        let id = format!("p{:03}", p + 1);
        for &level in levels {
            let prob = curve(level, mu_p, sigma, gamma, lam);
            for _ in 0..reps {
                let response =
                    if rng.gen::<f64>() < prob { Response::Happy } else { Response::Sad };
                trials.push(TrialRecord { participant: id.clone(), level, response });
            }
        }
    }
    trials
}

fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_points(mu: f64, sigma: f64, gamma: f64, lam: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let x = i as f64 / (n - 1) as f64;
                (x, curve(x, mu, sigma, gamma, lam))
            })
            .collect()
    }

    #[test]
    fn probit_round_trips_phi() {
        for &p in &[1e-6, 0.01, 1.0 / 3.0, 0.5, 0.75, 0.999999] {
            assert!((phi(probit(p)) - p).abs() < 1e-12, "p = {p}");
        }
        assert_eq!(probit(0.5), 0.0);
    }

    #[test]
    fn noiseless_recovery_within_tolerance() {
        let points = noiseless_points(0.5, 0.15, 0.0, 0.0, 21);
        let fit = fit_psychometric(&points).unwrap();
        assert!((fit.mu - 0.5).abs() < 1e-3, "mu = {}", fit.mu);
        let pse = fit.pse.expect("non-degenerate");
        assert!((pse - 0.5).abs() < 1e-3, "pse = {pse}");
        assert!(!fit.degenerate);
    }

    #[test]
    fn flat_high_curve_is_degenerate() {
        let points: Vec<(f64, f64)> =
            (0..21).map(|i| (i as f64 / 20.0, 0.9)).collect();
        let fit = fit_psychometric(&points).unwrap();
        assert!(fit.degenerate, "flat data must be degenerate: {fit:?}");
        assert!(fit.pse.is_none());
        assert!(fit.sse < 1e-6, "flat data is perfectly fittable, sse = {}", fit.sse);
    }

    #[test]
    fn flat_low_curve_is_degenerate() {
        let points: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 / 9.0, 0.12)).collect();
        let fit = fit_psychometric(&points).unwrap();
        assert!(fit.degenerate, "{fit:?}");
    }

    #[test]
    fn pse_formula_matches_quantile() {
        // gamma = lam = 0 -> pse = mu.
        assert_eq!(pse_from_params(0.42, 0.2, 0.0, 0.0).unwrap(), Some(0.42));
        // gamma = 0.4, lam = 0.3 -> argument 1/3, pse = mu - 0.4307 sigma.
        let pse = pse_from_params(0.5, 0.1, 0.4, 0.3).unwrap().unwrap();
        let expected = 0.5 + 0.1 * probit(1.0 / 3.0);
        assert!((pse - expected).abs() < 1e-12);
        assert!((probit(1.0 / 3.0) + 0.4307).abs() < 1e-3);
    }

    #[test]
    fn pse_rejects_out_of_bound_asymptotes() {
        assert!(pse_from_params(0.5, 0.1, 0.6, 0.0).is_err());
        assert!(pse_from_params(0.5, 0.1, 0.0, -0.1).is_err());
    }

    #[test]
    fn pse_respects_plausibility_window() {
        // Curve crossing far outside the window: mu at the right bound with a
        // large positive quantile offset.
        assert_eq!(pse_from_params(1.5, 2.0, 0.0, 0.45).unwrap(), None);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        assert!(fit_psychometric(&[(0.0, 0.1), (0.5, 0.4), (1.0, 0.9)]).is_err(), "3 levels");
        assert!(fit_psychometric(&[(0.0, 0.1), (0.2, 1.2), (0.5, 0.4), (1.0, 0.9)]).is_err());
        assert!(
            fit_psychometric(&[(f64::NAN, 0.1), (0.2, 0.3), (0.5, 0.4), (1.0, 0.9)]).is_err()
        );
        // Repeated levels collapse to fewer than 4 distinct ones.
        assert!(fit_psychometric(&[(0.1, 0.1), (0.1, 0.2), (0.5, 0.4), (0.5, 0.5)]).is_err());
    }

    #[test]
    fn level_shift_equivariance() {
        let base = noiseless_points(0.45, 0.12, 0.03, 0.04, 21);
        let delta = 0.2;
        let shifted: Vec<(f64, f64)> = base.iter().map(|&(x, y)| (x + delta, y)).collect();
        let f0 = fit_psychometric(&base).unwrap();
        let f1 = fit_psychometric(&shifted).unwrap();
        assert!((f1.mu - f0.mu - delta).abs() < 1e-6, "mu shift {}", f1.mu - f0.mu);
        assert!((f1.sigma - f0.sigma).abs() < 1e-6);
        assert!((f1.gamma - f0.gamma).abs() < 1e-6);
        assert!((f1.lam - f0.lam).abs() < 1e-6);
        let (p0, p1) = (f0.pse.unwrap(), f1.pse.unwrap());
        assert!((p1 - p0 - delta).abs() < 1e-6);
    }

    #[test]
    fn fitted_curve_value_at_pse_is_half() {
        let points = noiseless_points(0.53, 0.12, 0.02, 0.02, 21);
        let fit = fit_psychometric(&points).unwrap();
        let pse = fit.pse.unwrap();
        assert!((fit.value(pse) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn beats_brute_force_grid() {
        let datasets = [
            noiseless_points(0.3, 0.2, 0.05, 0.1, 9),
            noiseless_points(0.7, 0.08, 0.0, 0.0, 9),
            vec![(0.0, 0.05), (0.25, 0.2), (0.5, 0.65), (0.75, 0.8), (1.0, 0.97)],
        ];
        for points in &datasets {
            let fit = fit_psychometric(points).unwrap();
            let mut grid_best = f64::INFINITY;
            for mi in 0..9 {
                let mu = -0.5 + 2.0 * mi as f64 / 8.0;
                for si in 0..7 {
                    let sigma = 1e-3 + (2.0 - 1e-3) * si as f64 / 6.0;
                    for gi in 0..5 {
                        let gamma = 0.5 * gi as f64 / 4.0;
                        for li in 0..5 {
                            let lam = 0.5 * li as f64 / 4.0;
                            grid_best =
                                grid_best.min(sse_for(points, [mu, sigma, gamma, lam]));
                        }
                    }
                }
            }
            assert!(
                fit.sse <= grid_best + 1e-12,
                "fit sse {} worse than coarse grid {}",
                fit.sse,
                grid_best
            );
        }
    }

    #[test]
    fn monotone_curve_for_all_bounded_params() {
        for &(mu, sigma, gamma, lam) in
            &[(0.5, 0.1, 0.0, 0.0), (-0.5, 2.0, 0.5, 0.5), (1.5, 1e-3, 0.3, 0.1)]
        {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..200 {
                let x = -0.6 + 2.2 * i as f64 / 199.0;
                let v = curve(x, mu, sigma, gamma, lam);
                assert!(v >= prev - 1e-12, "non-monotone at x = {x}");
                prev = v;
            }
        }
    }

    #[test]
    fn participants_pipeline_aggregates_and_excludes() {
        let levels = [0.0, 0.2, 0.3, 0.5, 0.7, 0.8, 1.0];
        let mut trials =
            simulate_participants(99, 8, &levels, 30, 0.53, 0.02, 0.12, 0.02, 0.02);
        // One participant who always answers happy: a flat curve, excluded.
        for &level in &levels {
            for _ in 0..30 {
                trials.push(TrialRecord {
                    participant: "p_flat".into(),
                    level,
                    response: Response::Happy,
                });
            }
        }
        let summary = fit_participants(&trials).unwrap();
        assert_eq!(summary.excluded, vec!["p_flat".to_string()]);
        assert_eq!(summary.baseline.n, 8);
        assert!((summary.baseline.mean - 0.53).abs() < 0.05, "{}", summary.baseline.mean);
        let expected_sem = summary.baseline.sd / (summary.baseline.n as f64).sqrt();
        assert!((summary.baseline.sem - expected_sem).abs() < 1e-12);
    }

    #[test]
    fn identical_participants_have_zero_spread() {
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut trials = Vec::new();
        for id in ["a", "b"] {
            for &level in &levels {
                // Deterministic step responses around 0.5.
                let response = if level >= 0.5 { Response::Happy } else { Response::Sad };
                for _ in 0..10 {
                    trials.push(TrialRecord {
                        participant: id.to_string(),
                        level,
                        response,
                    });
                }
            }
        }
        let summary = fit_participants(&trials).unwrap();
        assert_eq!(summary.baseline.n, 2);
        assert_eq!(summary.baseline.sd, 0.0);
        assert_eq!(summary.baseline.sem, 0.0);
    }

    #[test]
    fn trials_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        let trials = vec![
            TrialRecord { participant: "p1".into(), level: 0.2, response: Response::Happy },
            TrialRecord { participant: "p1".into(), level: 0.8, response: Response::Sad },
        ];
        write_trials_csv(&path, &trials).unwrap();
        let loaded = read_trials_csv(&path).unwrap();
        assert_eq!(loaded, trials);
    }

    #[test]
    fn monte_carlo_recovery_is_unbiased_enough() {
        // Smaller version of the acceptance run: binomial data at the
        // published 7 levels, 30 reps.
        let levels = [0.0, 0.2, 0.3, 0.5, 0.7, 0.8, 1.0];
        let mut errors = Vec::new();
        for seed in 0..20u64 {
            let trials = simulate_participants(seed, 1, &levels, 30, 0.53, 0.0, 0.12, 0.02, 0.02);
            let mut by_level: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
            for t in &trials {
                let e = by_level.entry(t.level.to_bits()).or_insert((t.level, 0, 0));
                e.2 += 1;
                if t.response == Response::Happy {
                    e.1 += 1;
                }
            }
            let points: Vec<(f64, f64)> =
                by_level.values().map(|&(l, h, n)| (l, h as f64 / n as f64)).collect();
            let fit = fit_psychometric(&points).unwrap();
            if let Some(pse) = fit.pse {
                errors.push((pse - 0.53).abs());
            }
        }
        assert!(errors.len() >= 19, "almost all fits should be usable");
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errors[errors.len() / 2];
        assert!(median <= 0.03, "median PSE error {median}");
    }
}
