//! Paired-cost statistics over a batch of experiments.

use serde::{Deserialize, Serialize};

use crate::error::{HpiError, Result};
use crate::hpi::StepDiagnostics;

/// Realized costs of one experiment under both controllers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedCost {
    pub proposal: f64,
    pub hpi: f64,
}

impl PairedCost {
    /// `(J_prop − J_hpi) / J_prop`.
    pub fn improvement(&self) -> f64 {
        (self.proposal - self.hpi) / self.proposal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailStats {
    pub fraction: f64,
    pub count: usize,
    pub proposal_mean: f64,
    pub hpi_mean: f64,
    /// Relative improvement of the means, in percent.
    pub improvement_pct: f64,
}

fn check_pairs(pairs: &[PairedCost]) -> Result<()> {
    if pairs.is_empty() {
        return Err(HpiError::Statistics("no completed experiments".into()));
    }
    if pairs.iter().any(|p| !p.proposal.is_finite() || !p.hpi.is_finite()) {
        return Err(HpiError::Statistics("non-finite cost in batch".into()));
    }
    Ok(())
}

/// Indices sorted by proposal cost, highest first; ties keep input order.
fn by_proposal_desc(pairs: &[PairedCost]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by(|&a, &b| pairs[b].proposal.total_cmp(&pairs[a].proposal).then(a.cmp(&b)));
    idx
}

/// Number of experiments in the top `fraction` of proposal costs, at least one.
pub fn tail_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Means over the `fraction` of experiments with the highest proposal cost.
pub fn tail_stats(pairs: &[PairedCost], fraction: f64) -> Result<TailStats> {
    check_pairs(pairs)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HpiError::Statistics(format!("tail fraction {fraction} outside (0, 1]")));
    }
    let count = tail_count(pairs.len(), fraction);
    let chosen = &by_proposal_desc(pairs)[..count];
    let proposal_mean = chosen.iter().map(|&i| pairs[i].proposal).sum::<f64>() / count as f64;
    let hpi_mean = chosen.iter().map(|&i| pairs[i].hpi).sum::<f64>() / count as f64;
    Ok(TailStats {
        fraction,
        count,
        proposal_mean,
        hpi_mean,
        improvement_pct: 100.0 * (proposal_mean - hpi_mean) / proposal_mean,
    })
}

/// Mean per-experiment improvement over experiments whose proposal cost is at
/// least the `level` quantile of proposal costs.
///
/// The quantile is the `⌈level·n⌉`-th smallest proposal cost (the smallest
/// cost when that rank is zero).
pub fn cvar(pairs: &[PairedCost], level: f64) -> Result<f64> {
    check_pairs(pairs)?;
    if !(0.0..1.0).contains(&level) {
        return Err(HpiError::Statistics(format!("CVaR level {level} outside [0, 1)")));
    }
    let mut costs: Vec<f64> = pairs.iter().map(|p| p.proposal).collect();
    costs.sort_by(f64::total_cmp);
    let rank = ((level * costs.len() as f64).ceil() as usize).max(1);
    let q = costs[rank - 1];
    let tail: Vec<f64> = pairs.iter().filter(|p| p.proposal >= q).map(PairedCost::improvement).collect();
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// One-sided sign test that the H-PI cost is lower than the proposal cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub improved: usize,
    pub worsened: usize,
    pub ties: usize,
    /// `P(X ≥ improved)` for `X ~ Binomial(improved + worsened, ½)`.
    pub p_value: f64,
}

pub fn sign_test(pairs: &[PairedCost]) -> SignTest {
    let improved = pairs.iter().filter(|p| p.hpi < p.proposal).count();
    let worsened = pairs.iter().filter(|p| p.hpi > p.proposal).count();
    let ties = pairs.len() - improved - worsened;
    let n = improved + worsened;
    let mut p_value = 0.0;
    let mut coeff = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            coeff *= (n - k + 1) as f64 / k as f64;
        }
        if k >= improved {
            p_value += coeff;
        }
    }
    SignTest {
        improved,
        worsened,
        ties,
        p_value: (p_value * 0.5f64.powi(n as i32)).min(1.0),
    }
}

/// Sign test restricted to the `fraction` of experiments with the highest proposal cost.
pub fn tail_sign_test(pairs: &[PairedCost], fraction: f64) -> Result<SignTest> {
    check_pairs(pairs)?;
    let count = tail_count(pairs.len(), fraction);
    let chosen: Vec<PairedCost> = by_proposal_desc(pairs)[..count].iter().map(|&i| pairs[i]).collect();
    Ok(sign_test(&chosen))
}

/// Averages of one diagnostic over a run and its two segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub overall: f64,
    pub before: f64,
    pub after: f64,
    /// `(after − before) / before`.
    pub influence: f64,
}

impl SegmentRow {
    fn new(overall: f64, before: f64, after: f64) -> Self {
        Self {
            overall,
            before,
            after,
            influence: (after - before) / before,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    /// Grid step containing the boundary jump; steps up to and including it
    /// form the first segment.
    pub boundary_step: Option<usize>,
    pub var_alpha: SegmentRow,
    pub lambda: SegmentRow,
}

fn finite_mean<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (sum, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Splits a diagnostics series at `boundary_step`. Fallback steps (`NaN`
/// entries) are skipped. Without a boundary the second segment is empty and
/// its averages are `NaN`.
pub fn segment_stats(diagnostics: &[StepDiagnostics], boundary_step: Option<usize>) -> SegmentStats {
    let split = boundary_step.map_or(diagnostics.len(), |b| diagnostics.partition_point(|d| d.step <= b));
    let (before, after) = diagnostics.split_at(split);
    let row = |f: fn(&StepDiagnostics) -> &f64| {
        SegmentRow::new(
            finite_mean(diagnostics.iter().map(f)),
            finite_mean(before.iter().map(f)),
            finite_mean(after.iter().map(f)),
        )
    };
    SegmentStats {
        boundary_step,
        var_alpha: row(|d| &d.var_alpha),
        lambda: row(|d| &d.lambda),
    }
}

/// Averages per-run segment tables, skipping non-finite entries column by column.
pub fn mean_segment_stats(runs: &[SegmentStats]) -> SegmentStats {
    let avg = |f: fn(&SegmentStats) -> SegmentRow| {
        let rows: Vec<SegmentRow> = runs.iter().map(f).collect();
        SegmentRow::new(
            finite_mean(rows.iter().map(|r| &r.overall)),
            finite_mean(rows.iter().map(|r| &r.before)),
            finite_mean(rows.iter().map(|r| &r.after)),
        )
    };
    SegmentStats {
        boundary_step: None,
        var_alpha: avg(|s| s.var_alpha),
        lambda: avg(|s| s.lambda),
    }
}
