//! Evaluation tools: probability-bucket tracking across epochs, Dolan-Moré
//! performance profiles, win/rank summaries and the Friedman rank test.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Error, Result};

/// Misclassified samples with true-class probability at or below this are
/// counted as confidently wrong.
pub const DEFAULT_THRESHOLD: f64 = 0.2;

/// Marker written in accuracy-table cells whose run failed.
pub const FAILED_CELL: &str = "failed";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub correct: bool,
    pub p_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSnapshot {
    epoch: usize,
    records: Vec<SampleRecord>,
    threshold: f64,
}

impl BucketSnapshot {
    pub fn new(epoch: usize, records: Vec<SampleRecord>) -> Result<Self> {
        Self::with_threshold(epoch, records, DEFAULT_THRESHOLD)
    }

    pub fn with_threshold(epoch: usize, records: Vec<SampleRecord>, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(invalid(format!("threshold must be in [0, 1], got {threshold}")));
        }
        let mut seen = BTreeSet::new();
        for r in &records {
            if !(0.0..=1.0).contains(&r.p_y) {
                return Err(invalid(format!("sample {}: p_y = {} outside [0, 1]", r.id, r.p_y)));
            }
            if !seen.insert(r.id) {
                return Err(invalid(format!("duplicate sample id {}", r.id)));
            }
        }
        Ok(Self {
            epoch,
            records,
            threshold,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn ids(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.id).collect()
    }
}

/// Sample ids split three ways; each list is sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketPartition {
    pub correct: Vec<usize>,
    /// Misclassified with `p_y > threshold`.
    pub wrong_high: Vec<usize>,
    /// Misclassified with `p_y <= threshold`.
    pub wrong_low: Vec<usize>,
}

impl BucketPartition {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.correct.len(), self.wrong_high.len(), self.wrong_low.len())
    }

    fn buckets(&self) -> [&[usize]; 3] {
        [&self.correct, &self.wrong_high, &self.wrong_low]
    }
}

pub fn bucket_partition(snap: &BucketSnapshot) -> BucketPartition {
    let mut out = BucketPartition::default();
    for r in &snap.records {
        if r.correct {
            out.correct.push(r.id);
        } else if r.p_y > snap.threshold {
            out.wrong_high.push(r.id);
        } else {
            out.wrong_low.push(r.id);
        }
    }
    out.correct.sort_unstable();
    out.wrong_high.sort_unstable();
    out.wrong_low.sort_unstable();
    out
}

/// Rows are the early buckets (correct, wrong-high, wrong-low); columns are
/// (correct, incorrect) at the late epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketTransition {
    pub counts: [[usize; 2]; 3],
    /// Row-wise percentages rounded to two decimals; empty rows are zero.
    pub rates: [[f64; 2]; 3],
}

pub const BUCKET_NAMES: [&str; 3] = ["correct", "wrong_high", "wrong_low"];

/// Percentage rounded to two decimals: `88 / 2623 -> 3.35`.
pub fn percent(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        return 0.0;
    }
    (10_000.0 * numerator as f64 / denominator as f64).round() / 100.0
}

pub fn format_percent(numerator: usize, denominator: usize) -> String {
    format!("{:.2}%", percent(numerator, denominator))
}

pub fn bucket_transition(early: &BucketSnapshot, late: &BucketSnapshot) -> Result<BucketTransition> {
    if early.ids() != late.ids() {
        return Err(invalid("snapshots cover different sample ids"));
    }
    let late_correct: HashMap<usize, bool> = late.records.iter().map(|r| (r.id, r.correct)).collect();
    let mut counts = [[0usize; 2]; 3];
    for (row, ids) in bucket_partition(early).buckets().iter().enumerate() {
        for id in ids.iter() {
            let col = if late_correct[id] { 0 } else { 1 };
            counts[row][col] += 1;
        }
    }
    let mut rates = [[0.0; 2]; 3];
    for (row, c) in counts.iter().enumerate() {
        let total = c[0] + c[1];
        rates[row] = [percent(c[0], total), percent(c[1], total)];
    }
    Ok(BucketTransition { counts, rates })
}

/// Final accuracies; `values[m][e]` is method `m` on experiment `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    methods: Vec<String>,
    experiments: Vec<String>,
    values: Vec<Vec<f64>>,
    failed: Vec<Vec<bool>>,
}

impl AccuracyTable {
    pub fn new(methods: Vec<String>, experiments: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let failed = values.iter().map(|row| vec![false; row.len()]).collect();
        Self::with_failures(methods, experiments, values, failed)
    }

    /// Failed cells must hold 0.
    pub fn with_failures(
        methods: Vec<String>,
        experiments: Vec<String>,
        values: Vec<Vec<f64>>,
        failed: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if methods.is_empty() || experiments.is_empty() {
            return Err(Error::Empty("accuracy table"));
        }
        if values.len() != methods.len() || failed.len() != methods.len() {
            return Err(Error::DimensionMismatch {
                context: "accuracy table rows",
                expected: methods.len(),
                found: values.len().min(failed.len()),
            });
        }
        for (row, flags) in values.iter().zip(&failed) {
            if row.len() != experiments.len() || flags.len() != experiments.len() {
                return Err(Error::DimensionMismatch {
                    context: "accuracy table columns",
                    expected: experiments.len(),
                    found: row.len(),
                });
            }
            for (&v, &f) in row.iter().zip(flags) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(invalid(format!("accuracy {v} outside [0, 1]")));
                }
                if f && v != 0.0 {
                    return Err(invalid("failed cells must hold 0"));
                }
            }
        }
        let unique: BTreeSet<&String> = methods.iter().collect();
        if unique.len() != methods.len() {
            return Err(invalid("duplicate method names"));
        }
        Ok(Self {
            methods,
            experiments,
            values,
            failed,
        })
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn experiments(&self) -> &[String] {
        &self.experiments
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn failed(&self) -> &[Vec<bool>] {
        &self.failed
    }

    pub fn get(&self, method: usize, experiment: usize) -> f64 {
        self.values[method][experiment]
    }

    pub fn method_index(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == name)
    }

    fn column(&self, e: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[e]).collect()
    }

    /// Header `experiment,<method...>`, then one row per experiment.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["experiment".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header)?;
        for (e, name) in self.experiments.iter().enumerate() {
            let mut row = vec![name.clone()];
            for m in 0..self.methods.len() {
                row.push(if self.failed[m][e] {
                    FAILED_CELL.to_string()
                } else {
                    self.values[m][e].to_string()
                });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 2 {
            return Err(invalid(
                "accuracy table needs an experiment column and at least one method",
            ));
        }
        let methods: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut experiments = Vec::new();
        let mut values = vec![Vec::new(); methods.len()];
        let mut failed = vec![Vec::new(); methods.len()];
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(invalid(format!("row {}: expected {} fields", line + 2, header.len())));
            }
            experiments.push(rec[0].to_string());
            for m in 0..methods.len() {
                let cell = &rec[m + 1];
                if cell == FAILED_CELL {
                    values[m].push(0.0);
                    failed[m].push(true);
                } else {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| invalid(format!("row {}: bad accuracy {cell:?}", line + 2)))?;
                    values[m].push(v);
                    failed[m].push(false);
                }
            }
        }
        Self::with_failures(methods, experiments, values, failed)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Average ranks, 1 for the highest value; tied values share the mean of
/// the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// `rho[m][t]`: fraction of experiments where method `m` reaches at least
/// `taus[t]` times the best accuracy on that experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceProfile {
    pub methods: Vec<String>,
    pub taus: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
}

impl PerformanceProfile {
    /// Header `tau,<method...>`, one row per tau.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["tau".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header)?;
        for (t, tau) in self.taus.iter().enumerate() {
            let mut row = vec![tau.to_string()];
            row.extend(self.rho.iter().map(|r| r[t].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evenly spaced taus from `lo` to 1 inclusive.
pub fn tau_grid(lo: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && lo <= 1.0) || points == 0 {
        return Err(invalid("tau grid needs 0 < lo <= 1 and at least one point"));
    }
    if points == 1 {
        return Ok(vec![1.0]);
    }
    Ok((0..points)
        .map(|i| lo + (1.0 - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

pub fn dolan_more_profile(tab: &AccuracyTable, taus: &[f64]) -> Result<PerformanceProfile> {
    if taus.is_empty() {
        return Err(Error::Empty("tau grid"));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(invalid(format!("tau must be in (0, 1], got {t}")));
    }
    let n = tab.experiments.len();
    let best: Vec<f64> = (0..n)
        .map(|e| tab.column(e).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    if let Some(e) = best.iter().position(|&b| b <= 0.0) {
        return Err(invalid(format!(
            "experiment {:?} has no positive accuracy",
            tab.experiments[e]
        )));
    }
    let rho = tab
        .values
        .iter()
        .map(|row| {
            taus.iter()
                .map(|&tau| {
                    // relative slack absorbs rounding in tau * best
                    let hits = row
                        .iter()
                        .zip(&best)
                        .filter(|(&acc, &b)| acc >= tau * b - 1e-12 * b)
                        .count();
                    hits as f64 / n as f64
                })
                .collect()
        })
        .collect();
    Ok(PerformanceProfile {
        methods: tab.methods.clone(),
        taus: taus.to_vec(),
        rho,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Experiments where the method ties or beats every other method.
    pub wins: usize,
    /// Mean of `acc - baseline_acc`, as a fraction.
    pub delta_acc: f64,
    /// Mean average-rank; 1 is best.
    pub mean_rank: f64,
}

pub fn summary_stats(tab: &AccuracyTable, baseline: &str) -> Result<Vec<MethodSummary>> {
    let b = tab
        .method_index(baseline)
        .ok_or_else(|| Error::UnknownMethod(baseline.to_string()))?;
    let k = tab.methods.len();
    let n = tab.experiments.len();
    let mut wins = vec![0usize; k];
    let mut rank_sum = vec![0.0; k];
    for e in 0..n {
        let col = tab.column(e);
        let best = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (m, (&v, r)) in col.iter().zip(average_ranks(&col)).enumerate() {
            if v == best {
                wins[m] += 1;
            }
            rank_sum[m] += r;
        }
    }
    Ok((0..k)
        .map(|m| MethodSummary {
            method: tab.methods[m].clone(),
            wins: wins[m],
            delta_acc: tab.values[m]
                .iter()
                .zip(&tab.values[b])
                .map(|(a, base)| a - base)
                .sum::<f64>()
                / n as f64,
            mean_rank: rank_sum[m] / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    /// `12N / (k(k+1)) * sum_j (Rbar_j - (k+1)/2)^2` over average ranks.
    pub statistic: f64,
    /// The statistic divided by `1 - sum(t^3 - t) / (N k (k^2 - 1))`, summing
    /// over tie groups within each experiment. Zero when every block is fully tied.
    pub tie_corrected: f64,
    pub df: usize,
    /// Upper-tail chi-square probability of the tie-corrected statistic.
    pub p_value: f64,
}

pub fn friedman_statistic(tab: &AccuracyTable) -> Result<FriedmanResult> {
    let k = tab.methods.len();
    let n = tab.experiments.len();
    if k < 2 || n < 2 {
        return Err(invalid("Friedman test needs at least 2 methods and 2 experiments"));
    }
    let mut rank_sum = vec![0.0; k];
    let mut ties = 0.0;
    for e in 0..n {
        let col = tab.column(e);
        for (s, r) in rank_sum.iter_mut().zip(average_ranks(&col)) {
            *s += r;
        }
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        for group in sorted.chunk_by(|a, b| a == b) {
            let t = group.len() as f64;
            ties += t * t * t - t;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    let centre = (kf + 1.0) / 2.0;
    let statistic = 12.0 * nf / (kf * (kf + 1.0)) * rank_sum.iter().map(|s| (s / nf - centre).powi(2)).sum::<f64>();
    let correction = 1.0 - ties / (nf * kf * (kf * kf - 1.0));
    let tie_corrected = if correction > 1e-12 {
        statistic / correction
    } else {
        0.0
    };
    let df = k - 1;
    let chi = ChiSquared::new(df as f64).map_err(|e| invalid(e.to_string()))?;
    Ok(FriedmanResult {
        statistic,
        tie_corrected,
        df,
        p_value: chi.sf(tie_corrected),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, correct: bool, p_y: f64) -> SampleRecord {
        SampleRecord { id, correct, p_y }
    }

    fn table(values: Vec<Vec<f64>>) -> AccuracyTable {
        let methods = (0..values.len()).map(|i| format!("m{i}")).collect();
        let experiments = (0..values[0].len()).map(|i| format!("e{i}")).collect();
        AccuracyTable::new(methods, experiments, values).unwrap()
    }

    #[test]
    fn partition_examples() {
        let s = BucketSnapshot::new(
            0,
            vec![
                rec(0, true, 0.9),
                rec(1, false, 0.5),
                rec(2, false, 0.2),
                rec(3, false, 0.1),
            ],
        )
        .unwrap();
        assert_eq!(bucket_partition(&s).sizes(), (1, 1, 2));

        let all = BucketSnapshot::new(0, vec![rec(0, true, 0.1), rec(1, true, 0.9)]).unwrap();
        assert_eq!(bucket_partition(&all).sizes(), (2, 0, 0));

        let top = BucketSnapshot::with_threshold(0, vec![rec(0, false, 1.0), rec(1, false, 0.3)], 1.0).unwrap();
        assert_eq!(bucket_partition(&top).wrong_high.len(), 0);
    }

    #[test]
    fn snapshot_validation() {
        assert!(BucketSnapshot::new(0, vec![rec(0, true, 1.2)]).is_err());
        assert!(BucketSnapshot::new(0, vec![rec(0, true, 0.2), rec(0, false, 0.1)]).is_err());
        assert!(BucketSnapshot::with_threshold(0, vec![], 1.5).is_err());
    }

    #[test]
    fn transition_counts() {
        let early = BucketSnapshot::new(
            10,
            vec![
                rec(0, true, 0.9),
                rec(1, true, 0.8),
                rec(2, false, 0.4),
                rec(3, false, 0.3),
                rec(4, false, 0.1),
                rec(5, false, 0.05),
            ],
        )
        .unwrap();
        let late = BucketSnapshot::new(
            90,
            vec![
                rec(0, true, 0.95),
                rec(1, false, 0.3),
                rec(2, true, 0.6),
                rec(3, true, 0.7),
                rec(4, false, 0.02),
                rec(5, true, 0.5),
            ],
        )
        .unwrap();
        let t = bucket_transition(&early, &late).unwrap();
        assert_eq!(t.counts, [[1, 1], [2, 0], [1, 1]]);
        assert_eq!(t.rates[0], [50.0, 50.0]);
        assert_eq!(t.rates[1], [100.0, 0.0]);

        let same = bucket_transition(&early, &early).unwrap();
        assert_eq!(same.rates[0][0], 100.0);

        let other = BucketSnapshot::new(90, vec![rec(7, true, 0.5)]).unwrap();
        assert!(bucket_transition(&early, &other).is_err());
    }

    #[test]
    fn rate_rounding() {
        assert_eq!(percent(88, 2623), 3.35);
        assert_eq!(format_percent(88, 2623), "3.35%");
        assert_eq!(percent(1, 0), 0.0);
    }

    #[test]
    fn profile_examples() {
        let tab = table(vec![vec![0.9, 0.8], vec![0.7, 0.7]]);
        let p = dolan_more_profile(&tab, &[0.875, 1.0]).unwrap();
        assert_eq!(p.rho[0], vec![1.0, 1.0]);
        assert_eq!(p.rho[1], vec![0.5, 0.0]);

        let single = table(vec![vec![0.3, 0.5, 0.9]]);
        let p = dolan_more_profile(&single, &tau_grid(0.1, 10).unwrap()).unwrap();
        assert!(p.rho[0].iter().all(|&r| r == 1.0));

        let p = dolan_more_profile(&tab, &[1e-9]).unwrap();
        assert!(p.rho.iter().all(|r| r[0] == 1.0));

        assert!(dolan_more_profile(&tab, &[0.0]).is_err());
        assert!(dolan_more_profile(&tab, &[]).is_err());
        assert!(dolan_more_profile(&table(vec![vec![0.0, 0.5]]), &[1.0]).is_err());
    }

    #[test]
    fn profile_csv() {
        let tab = table(vec![vec![0.9, 0.8], vec![0.7, 0.7]]);
        let p = dolan_more_profile(&tab, &[0.5, 1.0]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tau,m0,m1\n0.5,1,1\n1,1,0\n");
    }

    #[test]
    fn ranks_and_wins() {
        assert_eq!(average_ranks(&[0.9, 0.7, 0.9]), vec![1.5, 3.0, 1.5]);
        // e0: a=.9 b=.8 c=.8 ; e1: a=.5 b=.7 c=.6
        let tab = AccuracyTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["e0".into(), "e1".into()],
            vec![vec![0.9, 0.5], vec![0.8, 0.7], vec![0.8, 0.6]],
        )
        .unwrap();
        let s = summary_stats(&tab, "a").unwrap();
        assert_eq!(s.iter().map(|m| m.wins).collect::<Vec<_>>(), vec![1, 1, 0]);
        assert_eq!(s.iter().map(|m| m.mean_rank).collect::<Vec<_>>(), vec![2.0, 1.75, 2.25]);
        assert_eq!(s[0].delta_acc, 0.0);
        assert!((s[1].delta_acc - 0.05).abs() < 1e-12);
        assert!(matches!(summary_stats(&tab, "zz"), Err(Error::UnknownMethod(_))));

        let tied = table(vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]);
        for m in summary_stats(&tied, "m0").unwrap() {
            assert_eq!(m.wins, 2);
            assert_eq!(m.mean_rank, 2.0);
        }
    }

    #[test]
    fn friedman_examples() {
        // identical rankings in every block
        let tab = table(vec![vec![0.9; 5], vec![0.8; 5], vec![0.7; 5], vec![0.6; 5]]);
        let f = friedman_statistic(&tab).unwrap();
        let (n, k) = (5.0, 4.0);
        assert!((f.statistic - n * (k - 1.0)).abs() < 1e-12);
        assert_eq!(f.statistic, f.tie_corrected);
        assert_eq!(f.df, 3);

        let flat = table(vec![vec![0.5; 3]; 3]);
        let f = friedman_statistic(&flat).unwrap();
        assert_eq!((f.statistic, f.tie_corrected), (0.0, 0.0));
        assert_eq!(f.p_value, 1.0);

        // 3 methods x 4 blocks, rank sums 6, 8, 10:
        // 12*4/(3*4) * ((1.5-2)^2 + 0 + (2.5-2)^2) = 2
        let tab = table(vec![
            vec![0.9, 0.8, 0.7, 0.9],
            vec![0.8, 0.9, 0.6, 0.8],
            vec![0.7, 0.7, 0.8, 0.7],
        ]);
        let f = friedman_statistic(&tab).unwrap();
        assert!((f.statistic - 2.0).abs() < 1e-12);
        assert!((f.p_value - (-1.0f64).exp()).abs() < 1e-12);

        assert!(friedman_statistic(&table(vec![vec![0.5, 0.6]])).is_err());
    }

    #[test]
    fn table_csv_round_trip() {
        let tab = AccuracyTable::with_failures(
            vec!["ce".into(), "f0..05".into()],
            vec!["blobs-0".into(), "blobs-1".into()],
            vec![vec![0.75, 0.0], vec![0.5, 1.0]],
            vec![vec![false, true], vec![false, false]],
        )
        .unwrap();
        let mut buf = Vec::new();
        tab.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "experiment,ce,f0..05\nblobs-0,0.75,0.5\nblobs-1,failed,1\n");
        assert_eq!(AccuracyTable::read_csv(&buf[..]).unwrap(), tab);
        assert!(AccuracyTable::new(vec!["a".into()], vec!["e".into()], vec![vec![1.5]]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tables() -> impl Strategy<Value = AccuracyTable> {
            (1usize..5, 1usize..6).prop_flat_map(|(k, n)| {
                proptest::collection::vec(proptest::collection::vec(0u8..=20, n), k).prop_map(move |rows| {
                    let values = rows
                        .into_iter()
                        .map(|r| r.into_iter().map(|v| v as f64 / 20.0).collect())
                        .collect();
                    table(values)
                })
            })
        }

        proptest! {
            #[test]
            fn partition_is_exhaustive(ps in proptest::collection::vec((any::<bool>(), 0.0f64..=1.0), 0..40), theta in 0.0f64..=1.0) {
                let records = ps.iter().enumerate().map(|(i, &(c, p))| rec(i, c, p)).collect();
                let snap = BucketSnapshot::with_threshold(0, records, theta).unwrap();
                let part = bucket_partition(&snap);
                let mut all: Vec<usize> = part.buckets().iter().flat_map(|b| b.iter().copied()).collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..ps.len()).collect::<Vec<_>>());
            }

            #[test]
            fn profiles_monotone(tab in tables()) {
                prop_assume!((0..tab.experiments().len()).all(|e| tab.column(e).iter().any(|&v| v > 0.0)));
                let taus = tau_grid(0.05, 20).unwrap();
                let p = dolan_more_profile(&tab, &taus).unwrap();
                for curve in &p.rho {
                    for w in curve.windows(2) {
                        prop_assert!(w[0] >= w[1]);
                    }
                    prop_assert!(curve.iter().all(|r| (0.0..=1.0).contains(r)));
                }
                let top = p.rho.iter().map(|r| *r.last().unwrap()).fold(0.0, f64::max);
                prop_assert!(top >= 1.0 / tab.experiments().len() as f64);
            }

            #[test]
            fn mean_ranks_average_to_centre(tab in tables()) {
                let s = summary_stats(&tab, "m0").unwrap();
                let k = s.len() as f64;
                let mean = s.iter().map(|m| m.mean_rank).sum::<f64>() / k;
                prop_assert!((mean - (k + 1.0) / 2.0).abs() <= 1e-12);
            }

            #[test]
            fn friedman_rank_invariant(tab in tables()) {
                prop_assume!(tab.methods().len() >= 2 && tab.experiments().len() >= 2);
                let f = friedman_statistic(&tab).unwrap();
                let squashed: Vec<Vec<f64>> = tab.values().iter()
                    .map(|r| r.iter().map(|v| v.powi(3) * 0.5).collect())
                    .collect();
                let g = friedman_statistic(&AccuracyTable::new(
                    tab.methods().to_vec(), tab.experiments().to_vec(), squashed).unwrap()).unwrap();
                prop_assert_eq!(f.statistic, g.statistic);
                prop_assert_eq!(f.tie_corrected, g.tie_corrected);
            }
        }
    }
}
