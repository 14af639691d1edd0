//! One-sample t-tests of model PSEs against a human baseline, Bonferroni
//! correction, and rendering of grouped comparison tables (JSON and aligned
//! text with the "▲" marker for degenerate rows).

use crate::error::{Error, Result};
use crate::psychometrics::HumanBaseline;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use std::fmt::Write as _;

pub const DEGENERATE_MARKER: &str = "▲";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// Set when a zero-spread baseline forces an infinite statistic.
    pub extreme: bool,
}

/// Two-tailed survival probability of Student's t via the regularized
/// incomplete beta function: `P(|T| >= t) = I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn student_t_two_tailed(t: f64, df: usize) -> f64 {
    if df == 0 {
        return f64::NAN;
    }
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let v = df as f64;
    beta_reg(v / 2.0, 0.5, v / (v + t * t))
}

/// One-sample t-test of a model PSE against the participant baseline:
/// `t = (pse - mean) / sem`, `df = n - 1`.
pub fn one_sample_t(baseline: &HumanBaseline, model_pse: f64) -> Result<TTest> {
    if baseline.n < 2 {
        return Err(Error::Validation(format!("baseline n must be >= 2, got {}", baseline.n)));
    }
    if !model_pse.is_finite() {
        return Err(Error::Validation(format!("model PSE must be finite, got {model_pse}")));
    }
    let df = baseline.n - 1;
    if baseline.sem == 0.0 {
        return Ok(if model_pse == baseline.mean {
            TTest { t: 0.0, df, p: 1.0, extreme: false }
        } else {
            let t = if model_pse > baseline.mean { f64::INFINITY } else { f64::NEG_INFINITY };
            TTest { t, df, p: 0.0, extreme: true }
        });
    }
    let t = (model_pse - baseline.mean) / baseline.sem;
    Ok(TTest { t, df, p: student_t_two_tailed(t, df), extreme: false })
}

/// Bonferroni correction: `min(1, m * p)`.
pub fn bonferroni(p: f64, m: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("p must be in [0, 1], got {p}")));
    }
    if m < 1 {
        return Err(Error::Validation("family size m must be >= 1".into()));
    }
    Ok((m as f64 * p).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ObjectBased,
    FaceBased,
    /// Desk-scale runs with randomly initialized backbones.
    RandomInit,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::ObjectBased => "object_based",
            Strategy::FaceBased => "face_based",
            Strategy::RandomInit => "random_init",
        })
    }
}

impl From<crate::zoo::Provenance> for Strategy {
    fn from(p: crate::zoo::Provenance) -> Self {
        match p {
            crate::zoo::Provenance::ObjectPretrained => Strategy::ObjectBased,
            crate::zoo::Provenance::FacePretrained => Strategy::FaceBased,
            crate::zoo::Provenance::RandomlyInitialized => Strategy::RandomInit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Unmasked,
    Eyes,
    Nose,
    Mouth,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::Unmasked => "unmasked",
            Condition::Eyes => "eyes",
            Condition::Nose => "nose",
            Condition::Mouth => "mouth",
        })
    }
}

impl From<crate::stimuli::Region> for Condition {
    fn from(r: crate::stimuli::Region) -> Self {
        match r {
            crate::stimuli::Region::Eyes => Condition::Eyes,
            crate::stimuli::Region::Nose => Condition::Nose,
            crate::stimuli::Region::Mouth => Condition::Mouth,
        }
    }
}

/// One table line. `degenerate` holds exactly when all of `pse`, `t`, `p`
/// are absent; `df = n_participants - 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub condition: Condition,
    pub model: String,
    pub pse: Option<f64>,
    pub t: Option<f64>,
    pub df: usize,
    pub p_uncorrected: Option<f64>,
    pub p_corrected: Option<f64>,
    #[serde(default)]
    pub extreme: bool,
    pub degenerate: bool,
}

impl ComparisonRow {
    /// Builds a row from a (possibly degenerate) PSE; correction is applied
    /// later by [`build_table`].
    pub fn new(
        strategy: Strategy,
        condition: Condition,
        model: impl Into<String>,
        pse: Option<f64>,
        baseline: &HumanBaseline,
    ) -> Result<Self> {
        let df = baseline.n.saturating_sub(1);
        match pse {
            None => Ok(Self {
                strategy,
                condition,
                model: model.into(),
                pse: None,
                t: None,
                df,
                p_uncorrected: None,
                p_corrected: None,
                extreme: false,
                degenerate: true,
            }),
            Some(p) => {
                let tt = one_sample_t(baseline, p)?;
                Ok(Self {
                    strategy,
                    condition,
                    model: model.into(),
                    pse: Some(p),
                    t: Some(tt.t),
                    df: tt.df,
                    p_uncorrected: Some(tt.p),
                    p_corrected: None,
                    extreme: tt.extreme,
                    degenerate: false,
                })
            }
        }
    }
}

/// A rendered comparison table: rows with corrected p-values, the family size
/// used, and the aligned text form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub m: usize,
    pub df: usize,
    pub rows: Vec<ComparisonRow>,
    #[serde(skip)]
    pub text: String,
}

/// Applies Bonferroni correction (family size `m`, defaulting to the count of
/// non-degenerate rows) and renders the table. Degenerate rows render as "▲";
/// p-values below 0.001 render as "<.001".
pub fn build_table(rows: &[ComparisonRow], m: Option<usize>) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("no comparison rows".into()));
    }
    let non_degenerate = rows.iter().filter(|r| !r.degenerate).count();
    let m_eff = m.unwrap_or(non_degenerate).max(1);
    let df = rows.iter().map(|r| r.df).max().unwrap_or(0);
    let mut corrected = rows.to_vec();
    for row in &mut corrected {
        row.p_corrected = match row.p_uncorrected {
            Some(p) => Some(bonferroni(p, m_eff)?),
            None => None,
        };
    }
    let text = render_text(&corrected, df);
    Ok(Report { m: m_eff, df, rows: corrected, text })
}

fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

fn format_t(t: f64) -> String {
    if t.is_infinite() {
        if t > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{t:.3}")
    }
}

/// Group label: strategy for unmasked rows (the transfer-comparison table),
/// masking condition otherwise (the reverse-correlation tables).
fn group_label(row: &ComparisonRow) -> String {
    match row.condition {
        Condition::Unmasked => row.strategy.to_string(),
        c => c.to_string(),
    }
}

fn render_text(rows: &[ComparisonRow], df: usize) -> String {
    let group_width = rows
        .iter()
        .map(|r| group_label(r).len())
        .chain(std::iter::once(12))
        .max()
        .expect("nonempty");
    let model_width = rows
        .iter()
        .map(|r| r.model.len())
        .chain(std::iter::once(10))
        .max()
        .expect("nonempty");
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<group_width$}  {:<model_width$}  {:>8}  {:>8}  {:>8}",
        "",
        "",
        "PSE",
        format!("t({df})"),
        "p"
    );
    let sep_len = group_width + model_width + 2 * 3 + 8 * 3 + 2;
    let _ = writeln!(out, "{}", "-".repeat(sep_len));
    let mut last_group: Option<String> = None;
    for row in rows {
        let group = group_label(row);
        let shown = if last_group.as_deref() == Some(group.as_str()) {
            String::new()
        } else {
            group.clone()
        };
        let (pse, t, p) = if row.degenerate {
            (
                DEGENERATE_MARKER.to_string(),
                DEGENERATE_MARKER.to_string(),
                DEGENERATE_MARKER.to_string(),
            )
        } else {
            (
                format!("{:.3}", row.pse.expect("non-degenerate")),
                format_t(row.t.expect("non-degenerate")),
                format_p(row.p_corrected.or(row.p_uncorrected).expect("non-degenerate")),
            )
        };
        let _ = writeln!(
            out,
            "{shown:<group_width$}  {:<model_width$}  {pse:>8}  {t:>8}  {p:>8}",
            row.model
        );
        last_group = Some(group);
    }
    out
}

/// Writes `report.json` (full precision) and `report.txt` (aligned table).
pub fn write_report(report: &Report, dir: &std::path::Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    std::fs::write(dir.join(format!("{stem}.txt")), &report.text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn published_baseline() -> HumanBaseline {
        HumanBaseline::from_summary(0.532, 0.018, 50).unwrap()
    }

    #[test]
    fn t_statistic_matches_published_rows() {
        let b = published_baseline();
        // (pse, published t) pairs; the small drift comes from rounding of
        // the published mean/SEM.
        let rows = [
            (0.701, 9.320),
            (0.494, -2.116),
            (0.703, 9.436),
            (0.501, -1.691),
            (0.670, 7.630),
            (0.714, 10.072),
            (0.715, 10.116),
            (0.622, 4.989),
            (0.663, 7.232),
        ];
        for (pse, t_published) in rows {
            let tt = one_sample_t(&b, pse).unwrap();
            assert_eq!(tt.df, 49);
            assert!(
                (tt.t - t_published).abs() <= 0.15,
                "pse {pse}: got t {} vs published {t_published}",
                tt.t
            );
        }
    }

    #[test]
    fn centered_pse_gives_t_zero_p_one() {
        let b = published_baseline();
        let tt = one_sample_t(&b, 0.532).unwrap();
        assert_eq!(tt.t, 0.0);
        assert_eq!(tt.p, 1.0);
    }

    #[test]
    fn zero_spread_baseline_flags_extreme() {
        let b = HumanBaseline::from_summary(0.5, 0.0, 10).unwrap();
        let tt = one_sample_t(&b, 0.6).unwrap();
        assert!(tt.extreme);
        assert!(tt.t.is_infinite() && tt.t > 0.0);
        assert_eq!(tt.p, 0.0);
        let tt2 = one_sample_t(&b, 0.4).unwrap();
        assert!(tt2.t.is_infinite() && tt2.t < 0.0);
        let tt3 = one_sample_t(&b, 0.5).unwrap();
        assert!(!tt3.extreme);
        assert_eq!(tt3.p, 1.0);
    }

    #[test]
    fn antisymmetry_about_the_mean() {
        let b = published_baseline();
        for delta in [0.01, 0.1, 0.25] {
            let plus = one_sample_t(&b, b.mean + delta).unwrap();
            let minus = one_sample_t(&b, b.mean - delta).unwrap();
            assert!((plus.t + minus.t).abs() < 1e-12);
            assert!((plus.p - minus.p).abs() < 1e-12);
        }
    }

    #[test]
    fn p_decreases_as_t_grows() {
        let mut prev = 1.0;
        for i in 1..60 {
            let t = i as f64 * 0.25;
            let p = student_t_two_tailed(t, 49);
            assert!(p < prev, "p not decreasing at t = {t}");
            prev = p;
        }
    }

    #[test]
    fn df1_matches_arctan_closed_form() {
        for &t in &[0.1, 0.5, 1.0, 2.0, 7.5, 42.0] {
            let p = student_t_two_tailed(t, 1);
            let closed = 1.0 - (2.0 / std::f64::consts::PI) * t.abs().atan();
            assert!((p - closed).abs() < 1e-9, "t = {t}: {p} vs {closed}");
        }
    }

    #[test]
    fn bonferroni_clamps_and_scales() {
        assert_eq!(bonferroni(0.01, 5).unwrap(), 0.05);
        assert_eq!(bonferroni(0.4, 10).unwrap(), 1.0);
        assert_eq!(bonferroni(0.0, 123).unwrap(), 0.0);
        assert!(bonferroni(1.5, 2).is_err());
        assert!(bonferroni(0.5, 0).is_err());
    }

    #[test]
    fn correction_never_decreases_p() {
        for i in 0..50 {
            let p = i as f64 / 49.0;
            for m in [1usize, 2, 7] {
                let c = bonferroni(p, m).unwrap();
                assert!(c >= p - 1e-15);
                if m == 1 || p == 0.0 {
                    assert_eq!(c, p);
                }
            }
        }
    }

    #[test]
    fn table_defaults_m_to_non_degenerate_count() {
        let b = published_baseline();
        let rows = vec![
            ComparisonRow::new(Strategy::ObjectBased, Condition::Unmasked, "alexnet", None, &b)
                .unwrap(),
            ComparisonRow::new(
                Strategy::ObjectBased,
                Condition::Unmasked,
                "vgg11",
                Some(0.701),
                &b,
            )
            .unwrap(),
            ComparisonRow::new(
                Strategy::FaceBased,
                Condition::Unmasked,
                "vgg11",
                Some(0.714),
                &b,
            )
            .unwrap(),
        ];
        let report = build_table(&rows, None).unwrap();
        assert_eq!(report.m, 2);
        assert!(report.rows[0].degenerate);
        assert!(report.rows[0].p_corrected.is_none());
        let p1 = report.rows[1].p_uncorrected.unwrap();
        assert!((report.rows[1].p_corrected.unwrap() - (2.0 * p1).min(1.0)).abs() < 1e-15);
        // Single non-degenerate row: m defaults to 1, corrected == raw.
        let single = build_table(&rows[1..2], None).unwrap();
        assert_eq!(single.m, 1);
        assert_eq!(
            single.rows[0].p_corrected.unwrap(),
            single.rows[0].p_uncorrected.unwrap()
        );
    }

    #[test]
    fn degenerate_rows_render_markers() {
        let b = published_baseline();
        let rows = vec![ComparisonRow::new(
            Strategy::ObjectBased,
            Condition::Unmasked,
            "alexnet",
            None,
            &b,
        )
        .unwrap()];
        let report = build_table(&rows, None).unwrap();
        let marker_count = report.text.matches(DEGENERATE_MARKER).count();
        assert_eq!(marker_count, 3, "PSE, t and p cells all carry the marker");
    }

    #[test]
    fn small_p_renders_below_threshold() {
        let b = published_baseline();
        let rows = vec![ComparisonRow::new(
            Strategy::ObjectBased,
            Condition::Unmasked,
            "vgg16",
            Some(0.703),
            &b,
        )
        .unwrap()];
        let report = build_table(&rows, None).unwrap();
        assert!(report.text.contains("<.001"), "{}", report.text);
    }
}
