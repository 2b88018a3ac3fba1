//! Accuracy–FLOPs report rows and their CSV form.

use std::fmt::Write as _;

use dyninfer_core::data::Split;

use crate::error::{Error, Result};

/// One evaluated policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub budget: f64,
    pub q: f64,
    /// Sum of metered FLOPs over all evaluated videos.
    pub total_flops: u128,
    pub correct: usize,
    /// Videos exiting at each checkpoint.
    pub histogram: Vec<usize>,
}

impl ReportRow {
    pub fn videos(&self) -> usize {
        self.histogram.iter().sum()
    }

    pub fn avg_flops(&self) -> f64 {
        self.total_flops as f64 / self.videos().max(1) as f64
    }

    pub fn top1(&self) -> f64 {
        self.correct as f64 / self.videos().max(1) as f64
    }

    /// Checks the histogram against the FLOPs total: `Σ_k n_k G_k` must
    /// equal the streamed sum exactly.
    pub fn check(&self, costs: &[u64]) -> Result<()> {
        if self.histogram.len() != costs.len() {
            return Err(Error::Invalid(format!("{} histogram bins for {} checkpoints", self.histogram.len(), costs.len())));
        }
        let from_hist: u128 = self.histogram.iter().zip(costs).map(|(&n, &g)| n as u128 * g as u128).sum();
        if from_hist != self.total_flops {
            return Err(Error::Invalid(format!("metered FLOPs {} differ from histogram total {from_hist}", self.total_flops)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub costs: Vec<u64>,
    pub grid_hash: String,
    pub dataset_seed: u64,
    pub calibrate_split: Split,
    pub eval_split: Split,
    /// Accuracy of running every video to the final checkpoint.
    pub full_top1: f64,
    /// Index into `rows` of the selected `Q*`.
    pub selected: Option<usize>,
}

impl EvaluationReport {
    /// The row with the lowest average FLOPs whose accuracy is at most
    /// `epsilon` (a fraction, 0.005 = half a point) below full inference.
    pub fn select(&mut self, epsilon: f64) -> Option<usize> {
        self.selected = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.top1() >= self.full_top1 - epsilon - 1e-12)
            .min_by(|(_, a), (_, b)| a.avg_flops().total_cmp(&b.avg_flops()).then(a.budget.total_cmp(&b.budget)))
            .map(|(i, _)| i);
        self.selected
    }

    pub fn check(&self) -> Result<()> {
        self.rows.iter().try_for_each(|r| r.check(&self.costs))
    }

    pub fn header(k: usize) -> String {
        let mut h = String::from("Q,q,avg_flops,top1");
        for i in 0..k {
            let _ = write!(h, ",exit_{i}");
        }
        h
    }

    fn row_line(first: &str, r: &ReportRow) -> String {
        let mut s = format!("{first},{:?},{:?},{:?}", r.q, r.avg_flops(), r.top1());
        for n in &r.histogram {
            let _ = write!(s, ",{n}");
        }
        s
    }

    /// Header, one row per budget, a `Q*=` marker row repeating the selected
    /// row, then `#` metadata lines.
    pub fn to_csv(&self) -> String {
        let mut s = Self::header(self.costs.len());
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::row_line(&format!("{:?}", r.budget), r));
            s.push('\n');
        }
        if let Some(i) = self.selected {
            let r = &self.rows[i];
            s.push_str(&Self::row_line(&format!("Q*={:?}", r.budget), r));
            s.push('\n');
        }
        let costs: Vec<String> = self.costs.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "# grid_hash={}", self.grid_hash);
        let _ = writeln!(s, "# dataset_seed={}", self.dataset_seed);
        let _ = writeln!(s, "# calibrate_split={}", self.calibrate_split.name());
        let _ = writeln!(s, "# eval_split={}", self.eval_split.name());
        let _ = writeln!(s, "# full_top1={:?}", self.full_top1);
        let _ = writeln!(s, "# G={}", costs.join(";"));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(budget: f64, hist: Vec<usize>, correct: usize, costs: &[u64]) -> ReportRow {
        let total_flops = hist.iter().zip(costs).map(|(&n, &g)| n as u128 * g as u128).sum();
        ReportRow { budget, q: 0.5, total_flops, correct, histogram: hist }
    }

    fn report() -> EvaluationReport {
        let costs = vec![10, 30, 100];
        EvaluationReport {
            rows: vec![
                row(20.0, vec![8, 2, 0], 7, &costs),
                row(50.0, vec![5, 3, 2], 9, &costs),
                row(90.0, vec![1, 1, 8], 10, &costs),
            ],
            costs,
            grid_hash: "ab".into(),
            dataset_seed: 3,
            calibrate_split: Split::Val,
            eval_split: Split::Test,
            full_top1: 1.0,
            selected: None,
        }
    }

    #[test]
    fn arithmetic_invariants() {
        let mut r = report();
        r.check().unwrap();
        assert_eq!(r.rows[1].avg_flops(), (50 + 90 + 200) as f64 / 10.0);
        r.rows[0].total_flops += 1;
        assert!(r.check().is_err());
    }

    #[test]
    fn selection_respects_epsilon() {
        let mut r = report();
        assert_eq!(r.select(0.005), Some(2));
        assert_eq!(r.select(0.1), Some(1));
        assert_eq!(r.select(0.5), Some(0));
        r.full_top1 = 1.5;
        assert_eq!(r.select(0.005), None);
    }

    #[test]
    fn csv_layout() {
        let mut r = report();
        r.select(0.1);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Q,q,avg_flops,top1,exit_0,exit_1,exit_2");
        assert_eq!(lines[2], "50.0,0.5,34.0,0.9,5,3,2");
        assert_eq!(lines[4], "Q*=50.0,0.5,34.0,0.9,5,3,2");
        assert!(lines[5..].iter().all(|l| l.starts_with('#')));
    }
}
