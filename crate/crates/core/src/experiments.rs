//! Evaluation studies over a set of client valuations: CCI skewness,
//! retraining without zero contributors, client-removal curves, removal under
//! partial participation, and training-run cost. Each study renders to a CSV
//! table and an SVG chart.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use plotters::prelude::*;
use rayon::prelude::*;
use serde::Serialize;

use crate::aam::{contribution_values, full_size_vector, rank_descending};
use crate::datasets::{ClientPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::fl::{train_federated, FlConfig, Schedule};
use crate::rng::{derive_seed, RngStream};
use crate::simulator::{sample_proportions, scale_sizes};

/// CCI vector of one valuation method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodCci {
    pub method: String,
    pub cci: Vec<f64>,
}

/// Gini coefficient, `sum_ij |c_i - c_j| / (2 n sum c)`; zero for an all-zero vector.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let total: f64 = values.iter().sum();
    if values.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let mut diff = 0.0;
    for a in values {
        for b in values {
            diff += (a - b).abs();
        }
    }
    diff / (2.0 * n * total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkewnessRow {
    pub method: String,
    pub min: f64,
    pub max: f64,
    pub gini: f64,
    pub zero_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkewnessReport {
    pub entries: Vec<MethodCci>,
    pub rows: Vec<SkewnessRow>,
}

#[derive(Serialize)]
struct CciRow<'a> {
    method: &'a str,
    client_id: usize,
    cci: f64,
}

pub fn skewness_report(entries: Vec<MethodCci>) -> Result<SkewnessReport> {
    let n = entries.first().map_or(0, |e| e.cci.len());
    if let Some(bad) = entries.iter().find(|e| e.cci.len() != n) {
        return Err(Error::Shape(format!(
            "{} has {} CCI entries, expected {n}",
            bad.method,
            bad.cci.len()
        )));
    }
    let rows = entries
        .iter()
        .map(|e| SkewnessRow {
            method: e.method.clone(),
            min: e.cci.iter().copied().fold(f64::INFINITY, f64::min),
            max: e.cci.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            gini: gini(&e.cci),
            zero_count: e.cci.iter().filter(|&&c| c == 0.0).count(),
        })
        .collect();
    Ok(SkewnessReport { entries, rows })
}

impl SkewnessReport {
    /// `method,client_id,cci`
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            for (client_id, &cci) in e.cci.iter().enumerate() {
                w.serialize(CciRow {
                    method: &e.method,
                    client_id,
                    cci,
                })
                .expect("in-memory csv");
            }
        }
        finish(w)
    }

    /// `method,min,max,gini,zero_count`
    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv");
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
}

/// FL config for one retrain: the Base seed, or a fresh seed derived from `tag`.
fn retrain_config(cfg: &FlConfig, reuse_base_seed: bool, tag: u64) -> FlConfig {
    let mut c = cfg.clone();
    if !reuse_base_seed {
        c.seed = derive_seed(cfg.seed, tag);
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionRow {
    pub method: String,
    pub excluded: Vec<usize>,
    /// `None` when every client had zero CCI.
    pub accuracy: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionReport {
    pub base: f64,
    pub rows: Vec<ExclusionRow>,
}

#[derive(Serialize)]
struct ExclusionCsvRow<'a> {
    method: &'a str,
    excluded: String,
    accuracy: String,
    degenerate: bool,
}

impl ExclusionReport {
    /// `method,excluded,accuracy,degenerate`, with a leading `base` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(ExclusionCsvRow {
            method: "base",
            excluded: String::new(),
            accuracy: self.base.to_string(),
            degenerate: false,
        })
        .expect("in-memory csv");
        for row in &self.rows {
            w.serialize(ExclusionCsvRow {
                method: &row.method,
                excluded: row.excluded.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                accuracy: row.accuracy.map_or(String::new(), |a| a.to_string()),
                degenerate: row.degenerate,
            })
            .expect("in-memory csv");
        }
        finish(w)
    }
}

/// Retrains without each method's zero-CCI clients, next to the Base run.
pub fn zero_exclusion_retrain(
    entries: &[MethodCci],
    partitions: &[ClientPartition],
    test: &LabeledDataset,
    cfg: &FlConfig,
) -> Result<ExclusionReport> {
    let n = partitions.len();
    let base = train_federated(partitions, &Schedule::Full, test, cfg)?.final_accuracy();
    let rows = entries
        .par_iter()
        .map(|e| {
            if e.cci.len() != n {
                return Err(Error::Shape(format!("{} has {} CCI entries for {n} clients", e.method, e.cci.len())));
            }
            let excluded: Vec<usize> = (0..n).filter(|&i| e.cci[i] == 0.0).collect();
            if excluded.len() == n {
                return Ok(ExclusionRow {
                    method: e.method.clone(),
                    excluded,
                    accuracy: None,
                    degenerate: true,
                });
            }
            let keep: Vec<usize> = (0..n).filter(|&i| e.cci[i] != 0.0).collect();
            let acc = train_federated(partitions, &Schedule::from_members(n, &keep), test, cfg)?.final_accuracy();
            Ok(ExclusionRow {
                method: e.method.clone(),
                excluded,
                accuracy: Some(acc),
                degenerate: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExclusionReport { base, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    LeastFirst,
    MostFirst,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::LeastFirst => "least_first",
            Direction::MostFirst => "most_first",
        }
    }

    /// The `k` clients this direction removes from a descending rank.
    pub fn removed(self, rank: &[usize], k: usize) -> Vec<usize> {
        match self {
            Direction::LeastFirst => rank[rank.len() - k..].to_vec(),
            Direction::MostFirst => rank[..k].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalCurve {
    pub direction: Direction,
    /// `(fraction, final accuracy)`, one per configured fraction.
    pub points: Vec<(f64, f64)>,
}

impl RemovalCurve {
    pub fn accuracy_at(&self, fraction: f64) -> Option<f64> {
        self.points.iter().find(|p| p.0 == fraction).map(|p| p.1)
    }

    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }
}

/// Number of clients a fraction removes, `floor(f * n)`.
pub fn removal_count(fraction: f64, n: usize) -> usize {
    // guard against 0.3 * 10 = 2.9999999999999996
    (fraction * n as f64 + 1e-9).floor() as usize
}

fn check_fractions(fractions: &[f64], n: usize) -> Result<()> {
    for &f in fractions {
        if f.is_finite() && f >= 0.0 && removal_count(f, n) >= n {
            return Err(Error::Capacity(format!("fraction {f} would remove all {n} clients")));
        }
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Precondition(format!("removal fraction {f} outside [0, 1)")));
        }
    }
    if fractions.first() != Some(&0.0) || fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("removal fractions must start at 0 and increase".into()));
    }
    Ok(())
}

/// Retrains from scratch without the `floor(f * n)` clients at each end of `rank`.
pub fn client_removal_curves(
    rank: &[usize],
    partitions: &[ClientPartition],
    test: &LabeledDataset,
    cfg: &FlConfig,
    fractions: &[f64],
    reuse_base_seed: bool,
) -> Result<[RemovalCurve; 2]> {
    let n = partitions.len();
    if rank.len() != n {
        return Err(Error::Shape(format!("rank has {} entries for {n} clients", rank.len())));
    }
    check_fractions(fractions, n)?;
    let directions = [Direction::LeastFirst, Direction::MostFirst];
    // equal counts give equal runs; train each removal set once
    let mut jobs: Vec<(Direction, usize)> = Vec::new();
    for &dir in &directions {
        for &f in fractions {
            let k = removal_count(f, n);
            if !jobs.contains(&(dir, k)) {
                jobs.push((dir, k));
            }
        }
    }
    let results: HashMap<(Direction, usize), f64> = jobs
        .par_iter()
        .map(|&(dir, k)| {
            let removed = dir.removed(rank, k);
            let keep: Vec<usize> = (0..n).filter(|i| !removed.contains(i)).collect();
            let tag = if k == 0 { 0 } else { 1 + (dir as u64) * n as u64 + k as u64 };
            let c = retrain_config(cfg, reuse_base_seed, tag);
            let acc = train_federated(partitions, &Schedule::from_members(n, &keep), test, &c)?.final_accuracy();
            Ok(((dir, k), acc))
        })
        .collect::<Result<_>>()?;
    Ok(directions.map(|dir| RemovalCurve {
        direction: dir,
        points: fractions
            .iter()
            .map(|&f| (f, results[&(dir, removal_count(f, n))]))
            .collect(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Participation {
    /// Every client trains on all of its data; ranks are static.
    Full,
    /// Per-round uniform sizes; ranks recomputed every round.
    Partial,
}

impl Participation {
    pub fn name(self) -> &'static str {
        match self {
            Participation::Full => "full",
            Participation::Partial => "partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationCurve {
    pub mode: Participation,
    pub curve: RemovalCurve,
}

/// Per-round sizes with the `k` top or bottom contributors of each round zeroed.
fn filtered_schedule(rounds: &[(Vec<usize>, Vec<f64>)], omega: &[f64], dir: Direction, k: usize) -> Result<Schedule> {
    rounds
        .iter()
        .map(|(d, x)| {
            let v = contribution_values(omega, x)?;
            let rank = rank_descending(&v);
            let mut d = d.clone();
            for i in dir.removed(&rank, k) {
                d[i] = 0;
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()
        .map(Schedule::PerRound)
}

/// Removal curves with full data (static ranks) and with per-round sampled
/// sizes (per-round ranks from `v = x_r * omega`).
pub fn partial_participation_curves(
    omega: &[f64],
    partitions: &[ClientPartition],
    test: &LabeledDataset,
    cfg: &FlConfig,
    fractions: &[f64],
    seed: u64,
    reuse_base_seed: bool,
) -> Result<Vec<ParticipationCurve>> {
    let n = partitions.len();
    if omega.len() != n {
        return Err(Error::Shape(format!("omega has {} entries for {n} clients", omega.len())));
    }
    check_fractions(fractions, n)?;
    let sizes: Vec<usize> = partitions.iter().map(ClientPartition::len).collect();

    let full_v = contribution_values(omega, &full_size_vector(&sizes))?;
    let [full_least, full_most] =
        client_removal_curves(&rank_descending(&full_v), partitions, test, cfg, fractions, reuse_base_seed)?;

    let mut rng = RngStream::new(seed);
    let rounds: Vec<(Vec<usize>, Vec<f64>)> = (0..cfg.rounds)
        .map(|_| {
            let s = scale_sizes(&sizes, &sample_proportions(n, &mut rng))?;
            Ok((s.d, s.x))
        })
        .collect::<Result<_>>()?;
    let mut jobs: Vec<(Direction, usize)> = Vec::new();
    for dir in [Direction::LeastFirst, Direction::MostFirst] {
        for &f in fractions {
            let k = removal_count(f, n);
            if !jobs.contains(&(dir, k)) {
                jobs.push((dir, k));
            }
        }
    }
    let results: HashMap<(Direction, usize), f64> = jobs
        .par_iter()
        .map(|&(dir, k)| {
            let schedule = filtered_schedule(&rounds, omega, dir, k)?;
            let tag = if k == 0 { 0 } else { 1 + (dir as u64) * n as u64 + k as u64 };
            let c = retrain_config(cfg, reuse_base_seed, tag);
            Ok(((dir, k), train_federated(partitions, &schedule, test, &c)?.final_accuracy()))
        })
        .collect::<Result<_>>()?;
    let partial = |dir: Direction| RemovalCurve {
        direction: dir,
        points: fractions
            .iter()
            .map(|&f| (f, results[&(dir, removal_count(f, n))]))
            .collect(),
    };
    Ok(vec![
        ParticipationCurve {
            mode: Participation::Full,
            curve: full_least,
        },
        ParticipationCurve {
            mode: Participation::Full,
            curve: full_most,
        },
        ParticipationCurve {
            mode: Participation::Partial,
            curve: partial(Direction::LeastFirst),
        },
        ParticipationCurve {
            mode: Participation::Partial,
            curve: partial(Direction::MostFirst),
        },
    ])
}

#[derive(Serialize)]
struct RemovalRow<'a> {
    method: &'a str,
    direction: &'a str,
    fraction: f64,
    seed: u64,
    accuracy: f64,
}

/// `method,direction,fraction,seed,accuracy`
pub fn removal_csv(curves: &[(String, RemovalCurve)], seed: u64) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (method, curve) in curves {
        for &(fraction, accuracy) in &curve.points {
            w.serialize(RemovalRow {
                method,
                direction: curve.direction.name(),
                fraction,
                seed,
                accuracy,
            })
            .expect("in-memory csv");
        }
    }
    finish(w)
}

#[derive(Serialize)]
struct PartialRow {
    mode: &'static str,
    direction: &'static str,
    fraction: f64,
    seed: u64,
    accuracy: f64,
}

/// `mode,direction,fraction,seed,accuracy`
pub fn partial_csv(curves: &[ParticipationCurve], seed: u64) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in curves {
        for &(fraction, accuracy) in &c.curve.points {
            w.serialize(PartialRow {
                mode: c.mode.name(),
                direction: c.curve.direction.name(),
                fraction,
                seed,
                accuracy,
            })
            .expect("in-memory csv");
        }
    }
    finish(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub method: String,
    pub n: usize,
    pub fl_runs: usize,
}

/// `method,n,fl_runs`
pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("in-memory csv");
    }
    finish(w)
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn chart_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Line chart of named `(x, y)` series; series whose name ends in `most_first` are dashed.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let xs = series.iter().flat_map(|s| s.1.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.1.iter().map(|p| p.1));
    let (x0, x1) = bounds(xs);
    let (y0, y1) = bounds(ys);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| chart_err(path, e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| chart_err(path, e))?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(|e| chart_err(path, e))?;
        for (i, (name, points)) in series.iter().enumerate() {
            let color = PALETTE[i / 2 % PALETTE.len()];
            let style = color.stroke_width(2);
            let drawn = if name.ends_with("most_first") {
                chart.draw_series(DashedLineSeries::new(points.iter().copied(), 6, 4, style))
            } else {
                chart.draw_series(LineSeries::new(points.iter().copied(), style))
            };
            drawn
                .map_err(|e| chart_err(path, e))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| chart_err(path, e))?;
        root.present().map_err(|e| chart_err(path, e))?;
    }
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Grouped bar chart (one group per category, one bar per series) with an
/// optional dashed horizontal reference line.
pub fn bar_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    labels: &[String],
    series: &[(String, Vec<f64>)],
    reference: Option<f64>,
) -> Result<()> {
    let categories = labels.len();
    let top = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .chain(reference)
        .fold(0.0_f64, f64::max)
        .max(1e-9)
        * 1.1;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| chart_err(path, e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(-0.5..categories as f64 - 0.5, 0.0..top)
            .map_err(|e| chart_err(path, e))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(categories)
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 {
                    labels.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc(y_label)
            .draw()
            .map_err(|e| chart_err(path, e))?;
        let width = 0.8 / series.len().max(1) as f64;
        for (s, (name, values)) in series.iter().enumerate() {
            let color = PALETTE[s % PALETTE.len()];
            chart
                .draw_series(values.iter().enumerate().map(|(i, &v)| {
                    let left = i as f64 - 0.4 + s as f64 * width;
                    Rectangle::new([(left, 0.0), (left + width, v)], color.filled())
                }))
                .map_err(|e| chart_err(path, e))?
                .label(name.as_str())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        if let Some(r) = reference {
            let span = [(-0.5, r), (categories as f64 - 0.5, r)];
            chart
                .draw_series(DashedLineSeries::new(span, 6, 4, BLACK.stroke_width(1)))
                .map_err(|e| chart_err(path, e))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| chart_err(path, e))?;
        root.present().map_err(|e| chart_err(path, e))?;
    }
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, partition, ClassesPerClient, PartitionSpec};
    use crate::nn::MlpSpec;

    fn fixture(n: usize) -> (Vec<ClientPartition>, LabeledDataset, FlConfig) {
        let data = generate_synthetic(3, 80, 4, 0.1, 5).unwrap();
        let (train, test) = data.split_at(180);
        let parts = partition(
            &train,
            &PartitionSpec {
                n_clients: n,
                classes_per_client: ClassesPerClient::All,
                samples_per_client: 30,
                seed: 1,
            },
        )
        .unwrap();
        let cfg = FlConfig {
            n_clients: n,
            rounds: 2,
            local_epochs: 1,
            batch_size: 10,
            lr: 0.1,
            model: MlpSpec::new(vec![4, 6, 3]).unwrap(),
            seed: 9,
        };
        (parts, test, cfg)
    }

    #[test]
    fn gini_reference_values() {
        assert_eq!(gini(&[0.25; 4]), 0.0);
        for n in [2usize, 5, 8] {
            let mut one_hot = vec![0.0; n];
            one_hot[n - 1] = 1.0;
            assert!((gini(&one_hot) - (n as f64 - 1.0) / n as f64).abs() < 1e-12);
        }
        assert_eq!(gini(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn skewness_counts_zeros() {
        let report = skewness_report(vec![
            MethodCci {
                method: "a".into(),
                cci: vec![0.25; 4],
            },
            MethodCci {
                method: "b".into(),
                cci: vec![0.0, 0.5, 0.5, 0.0],
            },
        ])
        .unwrap();
        assert_eq!(report.rows[0].zero_count, 0);
        assert_eq!(report.rows[0].gini, 0.0);
        assert_eq!(report.rows[1].zero_count, 2);
        assert_eq!((report.rows[1].min, report.rows[1].max), (0.0, 0.5));
        let csv = report.to_csv();
        assert!(csv.starts_with("method,client_id,cci\n"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn removal_count_floors() {
        assert_eq!(removal_count(0.0, 8), 0);
        assert_eq!(removal_count(0.1, 8), 0);
        assert_eq!(removal_count(0.125, 8), 1);
        assert_eq!(removal_count(0.3, 10), 3);
        assert_eq!(removal_count(0.7, 10), 7);
    }

    #[test]
    fn removal_curves_start_at_base() {
        let (parts, test, cfg) = fixture(4);
        let base = train_federated(&parts, &Schedule::Full, &test, &cfg).unwrap().final_accuracy();
        let fractions = [0.0, 0.1, 0.25, 0.5];
        let [least, most] = client_removal_curves(&[2, 0, 3, 1], &parts, &test, &cfg, &fractions, true).unwrap();
        assert_eq!(least.points.len(), 4);
        assert_eq!(least.accuracy_at(0.0), Some(base));
        assert_eq!(most.accuracy_at(0.0), Some(base));
        // 0.1 * 4 floors to zero removals
        assert_eq!(least.accuracy_at(0.1), Some(base));
        let only = train_federated(&parts, &Schedule::from_members(4, &[2, 0, 3]), &test, &cfg).unwrap();
        assert_eq!(least.accuracy_at(0.25), Some(only.final_accuracy()));
    }

    #[test]
    fn removing_everyone_is_a_capacity_error() {
        let (parts, test, cfg) = fixture(2);
        let err = client_removal_curves(&[0, 1], &parts, &test, &cfg, &[0.0, 1.0], true).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        let err = client_removal_curves(&[0, 1], &parts, &test, &cfg, &[0.5], true).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn exclusion_without_zeros_equals_base() {
        let (parts, test, cfg) = fixture(3);
        let entries = vec![
            MethodCci {
                method: "even".into(),
                cci: vec![0.3, 0.3, 0.4],
            },
            MethodCci {
                method: "none".into(),
                cci: vec![0.0; 3],
            },
            MethodCci {
                method: "one".into(),
                cci: vec![0.0, 0.0, 1.0],
            },
        ];
        let report = zero_exclusion_retrain(&entries, &parts, &test, &cfg).unwrap();
        assert_eq!(report.rows[0].accuracy, Some(report.base));
        assert!(report.rows[1].degenerate);
        assert_eq!(report.rows[1].accuracy, None);
        let single = train_federated(&parts, &Schedule::from_members(3, &[2]), &test, &cfg).unwrap();
        assert_eq!(report.rows[2].accuracy, Some(single.final_accuracy()));
        assert!(report.to_csv().starts_with("method,excluded,accuracy,degenerate\nbase,"));
    }

    #[test]
    fn partial_curves_shape() {
        let (parts, test, cfg) = fixture(4);
        let omega = [0.1, 0.4, 0.2, 0.3];
        let fractions = [0.0, 0.25];
        let curves = partial_participation_curves(&omega, &parts, &test, &cfg, &fractions, 3, true).unwrap();
        assert_eq!(curves.len(), 4);
        // fraction 0 in partial mode is the unfiltered sampled run
        let mut rng = RngStream::new(3);
        let sizes = vec![30; 4];
        let schedule: Vec<Vec<usize>> = (0..cfg.rounds)
            .map(|_| scale_sizes(&sizes, &sample_proportions(4, &mut rng)).unwrap().d)
            .collect();
        let plain = train_federated(&parts, &Schedule::PerRound(schedule), &test, &cfg).unwrap();
        for c in curves.iter().filter(|c| c.mode == Participation::Partial) {
            assert_eq!(c.curve.accuracy_at(0.0), Some(plain.final_accuracy()));
        }
        // full mode ranks by omega at full size: most-first drops client 1
        let full_most = &curves[1].curve;
        let without = train_federated(&parts, &Schedule::from_members(4, &[0, 2, 3]), &test, &cfg).unwrap();
        assert_eq!(full_most.accuracy_at(0.25), Some(without.final_accuracy()));
    }

    #[test]
    fn charts_render() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("line.svg");
        let series = vec![
            ("fedccea least_first".to_string(), vec![(0.0, 0.8), (0.5, 0.7)]),
            ("fedccea most_first".to_string(), vec![(0.0, 0.8), (0.5, 0.5)]),
        ];
        line_chart(&line, "removal", "fraction", "accuracy", &series).unwrap();
        let bars = dir.path().join("bars.svg");
        let labels: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        bar_chart(&bars, "cci", "cci", &labels, &[("a".into(), vec![0.2, 0.3, 0.5])], Some(1.0 / 3.0)).unwrap();
        for p in [line, bars] {
            let text = fs::read_to_string(p).unwrap();
            assert!(text.starts_with("<svg"));
        }
    }
}
