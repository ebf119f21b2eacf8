//! Run metrics and suite summaries.

pub use tca_core::metaloop::{episodes_to_threshold, RunMetrics};

use crate::methods::MethodRun;

/// One (method, seed) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub method: String,
    pub seed: u64,
    pub episodes_to_threshold: Option<usize>,
    pub episodes_ran: usize,
    pub wall_clock_secs: f64,
}

/// Suite outcome: per-run rows, per-method medians, and the raw runs (in the
/// same order as `rows`) for export.
pub struct SuiteSummary {
    pub rows: Vec<SuiteRow>,
    pub medians: Vec<(String, usize)>,
    pub runs: Vec<MethodRun>,
}

/// Median episodes-to-threshold over seeds; runs that never crossed are
/// censored at the episode budget.
pub fn median_episodes(values: &[Option<usize>], budget: usize) -> usize {
    let mut xs: Vec<usize> = values.iter().map(|v| v.unwrap_or(budget)).collect();
    xs.sort_unstable();
    xs[xs.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_censors_unfinished_runs() {
        let vals = [Some(10), None, Some(30)];
        assert_eq!(median_episodes(&vals, 100), 30);
        let vals = [Some(10), None, None];
        assert_eq!(median_episodes(&vals, 100), 100);
    }
}
