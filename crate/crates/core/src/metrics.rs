//! Percentile-space evaluation metrics and run-level aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::schema::TraitVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("no reports to aggregate")]
    EmptyInput,
    #[error("every sample was omitted; nothing to score")]
    NoScoredSamples,
}

fn abs_diffs(p: &TraitVector, t: &TraitVector) -> [f64; 5] {
    let (p, t) = (p.as_array(), t.as_array());
    std::array::from_fn(|k| (p[k] - t[k]).abs())
}

/// Mean absolute error over the five traits, in percentile points.
pub fn mae5(p: &TraitVector, t: &TraitVector) -> f64 {
    abs_diffs(p, t).iter().sum::<f64>() / 5.0
}

/// Root mean squared error over the five traits, in percentile points.
pub fn rmse5(p: &TraitVector, t: &TraitVector) -> f64 {
    (abs_diffs(p, t).iter().map(|d| d * d).sum::<f64>() / 5.0).sqrt()
}

/// Cosine similarity on unconstrained 5-vectors.
pub fn cosine_raw(p: &[f64; 5], t: &[f64; 5]) -> Result<f64, MetricsError> {
    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    Ok((dot / (np * nt)).clamp(-1.0, 1.0))
}

pub fn cosine(p: &TraitVector, t: &TraitVector) -> Result<f64, MetricsError> {
    cosine_raw(p.as_array(), t.as_array())
}

/// Headline accuracy: `100 - MAE5`.
pub fn profile_acc(p: &TraitVector, t: &TraitVector) -> f64 {
    100.0 - mae5(p, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaConvention {
    /// variant minus baseline; positive means better.
    ImprovementVsBaseline,
    /// full minus variant; positive means a larger drop.
    DropVsFull,
}

pub fn delta_profile_acc(variant: f64, reference: f64, convention: DeltaConvention) -> f64 {
    match convention {
        DeltaConvention::ImprovementVsBaseline => variant - reference,
        DeltaConvention::DropVsFull => reference - variant,
    }
}

/// Per-run metrics, averaged over scored samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae5: f64,
    pub rmse5: f64,
    pub profile_acc: f64,
    /// Mean over samples where cosine is defined; `None` if there were none.
    pub cosine: Option<f64>,
    pub n_scored: usize,
    pub n_omitted: usize,
    /// Scored samples left out of the cosine mean because a vector was zero.
    pub n_cosine_undefined: usize,
}

/// Streaming accumulator behind [`MetricReport`]; mergeable for parallel folds.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sum_mae: f64,
    sum_rmse: f64,
    sum_cos: f64,
    n_scored: usize,
    n_cos: usize,
    n_omitted: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, p: &TraitVector, t: &TraitVector) {
        self.sum_mae += mae5(p, t);
        self.sum_rmse += rmse5(p, t);
        if let Ok(c) = cosine(p, t) {
            self.sum_cos += c;
            self.n_cos += 1;
        }
        self.n_scored += 1;
    }

    /// Records a sample dropped from every metric (unparsable prediction).
    pub fn omit(&mut self) {
        self.n_omitted += 1;
    }

    /// `None` means the prediction could not be parsed.
    pub fn push(&mut self, p: Option<&TraitVector>, t: &TraitVector) {
        match p {
            Some(p) => self.add(p, t),
            None => self.omit(),
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.sum_mae += other.sum_mae;
        self.sum_rmse += other.sum_rmse;
        self.sum_cos += other.sum_cos;
        self.n_scored += other.n_scored;
        self.n_cos += other.n_cos;
        self.n_omitted += other.n_omitted;
    }

    pub fn finish(&self) -> Result<MetricReport, MetricsError> {
        if self.n_scored == 0 {
            return Err(MetricsError::NoScoredSamples);
        }
        let n = self.n_scored as f64;
        let mae = self.sum_mae / n;
        Ok(MetricReport {
            mae5: mae,
            rmse5: self.sum_rmse / n,
            profile_acc: 100.0 - mae,
            cosine: (self.n_cos > 0).then(|| self.sum_cos / self.n_cos as f64),
            n_scored: self.n_scored,
            n_omitted: self.n_omitted,
            n_cosine_undefined: self.n_scored - self.n_cos,
        })
    }
}

/// Scores (prediction, target) pairs; `None` predictions count as omitted.
pub fn evaluate<'a, I>(pairs: I) -> Result<MetricReport, MetricsError>
where
    I: IntoIterator<Item = (Option<&'a TraitVector>, &'a TraitVector)>,
{
    let mut acc = MetricAccumulator::new();
    for (p, t) in pairs {
        acc.push(p, t);
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdFlavor {
    Population,
    /// n-1 denominator; zero for a single run.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mae5: MeanStd,
    pub rmse5: MeanStd,
    pub profile_acc: MeanStd,
    pub cosine: Option<MeanStd>,
    pub runs: usize,
    pub n_scored: usize,
    pub n_omitted: usize,
    pub std_flavor: StdFlavor,
}

fn mean_std(xs: &[f64], flavor: StdFlavor) -> MeanStd {
    // Sorting makes the summary independent of input order bit-for-bit.
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let denom = match flavor {
        StdFlavor::Population => n,
        StdFlavor::Sample => n - 1.0,
    };
    let std = if denom > 0.0 { (ss / denom).sqrt() } else { 0.0 };
    MeanStd { mean, std }
}

/// Mean and sample standard deviation across runs.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<RunSummary, MetricsError> {
    aggregate_runs_with(reports, StdFlavor::Sample)
}

pub fn aggregate_runs_with(
    reports: &[MetricReport],
    flavor: StdFlavor,
) -> Result<RunSummary, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let col = |f: fn(&MetricReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let cos: Vec<f64> = reports.iter().filter_map(|r| r.cosine).collect();
    Ok(RunSummary {
        mae5: mean_std(&col(|r| r.mae5), flavor),
        rmse5: mean_std(&col(|r| r.rmse5), flavor),
        profile_acc: mean_std(&col(|r| r.profile_acc), flavor),
        cosine: (!cos.is_empty()).then(|| mean_std(&cos, flavor)),
        runs: reports.len(),
        n_scored: reports.iter().map(|r| r.n_scored).sum(),
        n_omitted: reports.iter().map(|r| r.n_omitted).sum(),
        std_flavor: flavor,
    })
}

/// Two-decimal display with a fixed `.` separator.
pub fn fmt2(x: f64) -> String {
    let s = format!("{:.2}", x);
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

const COLUMNS: [&str; 4] = ["RMSE5", "MAE5", "ProfileAcc", "cos(p,t)"];

fn render(rows: &[(String, [String; 4])]) -> String {
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "Label");
    for c in COLUMNS {
        let _ = write!(out, "  {:>14}", c);
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{:<label_w$}", label);
        for c in cells {
            let _ = write!(out, "  {:>14}", c);
        }
        out.push('\n');
    }
    out
}

/// Aligned table in the column order RMSE5, MAE5, ProfileAcc, cosine.
pub fn render_reports(rows: &[(&str, &MetricReport)]) -> String {
    let rows: Vec<_> = rows
        .iter()
        .map(|(l, r)| {
            (
                l.to_string(),
                [
                    fmt2(r.rmse5),
                    fmt2(r.mae5),
                    fmt2(r.profile_acc),
                    r.cosine.map(fmt2).unwrap_or_else(|| "-".into()),
                ],
            )
        })
        .collect();
    render(&rows)
}

pub fn render_summaries(rows: &[(&str, &RunSummary)]) -> String {
    let pm = |m: &MeanStd| format!("{} ± {}", fmt2(m.mean), fmt2(m.std));
    let rows: Vec<_> = rows
        .iter()
        .map(|(l, s)| {
            (
                l.to_string(),
                [
                    pm(&s.rmse5),
                    pm(&s.mae5),
                    pm(&s.profile_acc),
                    s.cosine.as_ref().map(pm).unwrap_or_else(|| "-".into()),
                ],
            )
        })
        .collect();
    render(&rows)
}
