//! Series ingestion, chronological splits and sliding windows.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Rng;
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-8;

/// A multivariate series, row-major `[T, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    /// Seconds since the epoch for date columns, the raw value otherwise.
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
    pub names: Vec<String>,
}

impl SeriesFrame {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.n_vars();
        &self.values[t * c..(t + 1) * c]
    }

    /// Column `c` as a vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.n_vars()).copied().collect()
    }

    /// FNV-1a over the values, for run manifests.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.timestamps.iter().chain(&self.values) {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

const DATE_FORMATS: [&str; 5] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M", "%Y/%m/%d %H:%M:%S"];

fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    for f in DATE_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Some(dt.and_utc().timestamp() as f64);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp() as f64);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parse a CSV with a header row, a timestamp in the first column and
/// numeric values in the rest. Rows are numbered from 1 after the header;
/// columns from 1.
pub fn read_csv<R: Read>(reader: R) -> Result<SeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Parse { row: 0, col: header.len(), msg: "need a timestamp column and at least one value column".into() });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let c = names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != c + 1 {
            return Err(Error::Parse { row, col: rec.len(), msg: format!("expected {} fields, found {}", c + 1, rec.len()) });
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::Parse { row, col: 1, msg: format!("unrecognized timestamp `{}`", &rec[0]) })?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::Order { row, msg: format!("timestamp `{}` does not increase", &rec[0]) });
            }
        }
        timestamps.push(ts);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                col: j + 1,
                msg: if cell.is_empty() { "missing value".into() } else { format!("not a number: `{cell}`") },
            })?;
            values.push(v);
        }
    }
    Ok(SeriesFrame { timestamps, values, names })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesFrame> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(std::io::BufReader::new(file))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRows {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitRows {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Window counts for a look-back `t` with no horizon, val and test
    /// borrowing `t` rows of context from the split before them. This is
    /// the usual convention for benchmark split sizes.
    pub fn context_counts(&self, t: usize) -> (usize, usize, usize) {
        (self.train + 1 - t, self.val + 1, self.test + 1)
    }

    pub fn from_fractions(total: usize, train: f64, test: f64) -> Self {
        let tr = (total as f64 * train) as usize;
        let te = (total as f64 * test) as usize;
        Self { train: tr, val: total - tr - te, test: te }
    }
}

/// Conventional chronological splits of the public benchmarks, keyed by
/// lower-cased dataset name. ETT files use fixed month counts, PEMS a
/// 6:2:2 ratio and the rest 7:1:2.
pub fn named_split(name: &str, total: usize) -> Option<SplitRows> {
    let n = name.to_ascii_lowercase();
    let hour = 30 * 24;
    match n.as_str() {
        "etth1" | "etth2" => Some(SplitRows { train: 12 * hour, val: 4 * hour, test: 4 * hour }),
        "ettm1" | "ettm2" => Some(SplitRows { train: 48 * hour, val: 16 * hour, test: 16 * hour }),
        "electricity" | "ecl" | "traffic" | "weather" | "exchange" | "exchange_rate" | "solar" | "solar_al" => {
            Some(SplitRows::from_fractions(total, 0.7, 0.2))
        }
        "pems03" | "pems04" | "pems07" | "pems08" => Some(SplitRows::from_fractions(total, 0.6, 0.2)),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    Named(String),
    /// Train and test fractions; validation takes the rest.
    Fractions { train: f64, test: f64 },
    Rows(SplitRows),
}

impl SplitSpec {
    pub fn resolve(&self, total: usize) -> Result<SplitRows> {
        let rows = match self {
            SplitSpec::Named(name) => named_split(name, total)
                .ok_or_else(|| Error::Config(format!("no split table for dataset `{name}`; give fractions or rows")))?,
            SplitSpec::Fractions { train, test } => {
                if !(*train > 0.0 && *test >= 0.0 && train + test <= 1.0) {
                    return Err(Error::Config(format!("bad split fractions train={train} test={test}")));
                }
                SplitRows::from_fractions(total, *train, *test)
            }
            SplitSpec::Rows(r) => *r,
        };
        if rows.total() > total {
            return Err(Error::Config(format!("split needs {} rows, series has {}", rows.total(), total)));
        }
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`; expected train, val or test"))),
        }
    }
}

/// Per-variable z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fit on rows `rows` of a row-major `[T, C]` buffer.
    pub fn fit(values: &[f64], c: usize, rows: Range<usize>) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for t in rows.clone() {
            for (m, v) in mean.iter_mut().zip(&values[t * c..(t + 1) * c]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for t in rows {
            for j in 0..c {
                let d = values[t * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    /// `(x - mean) / std` along the variable axis of `[.., C, ..]` given
    /// the stride of that axis.
    fn apply(&self, x: &mut [f64], var_of: impl Fn(usize) -> usize, inverse: bool) {
        for (i, v) in x.iter_mut().enumerate() {
            let j = var_of(i);
            *v = if inverse { *v * self.std[j] + self.mean[j] } else { (*v - self.mean[j]) / self.std[j] };
        }
    }

    /// Normalize a `[B, C, S]` tensor.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.transform(x, false)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.transform(x, true)
    }

    fn transform(&self, x: &Tensor, inverse: bool) -> Tensor {
        let mut out = x.clone();
        let (c, s) = (x.shape()[1], x.shape()[2]);
        self.apply(out.data_mut(), |i| (i / s) % c, inverse);
        out
    }
}

/// Normalized series with window ranges for each split.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    /// Normalized `[T, C]` rows covering the three splits.
    pub data: Vec<f64>,
    pub n_vars: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub rows: SplitRows,
    pub normalizer: Normalizer,
}

impl WindowedDataset {
    pub fn new(frame: &SeriesFrame, split: &SplitSpec, lookback: usize, horizon: usize) -> Result<Self> {
        let rows = split.resolve(frame.len())?;
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        if lookback + horizon > rows.train {
            return Err(Error::Config(format!(
                "lookback {} + horizon {} exceeds {} training rows",
                lookback, horizon, rows.train
            )));
        }
        let c = frame.n_vars();
        let normalizer = Normalizer::fit(&frame.values, c, 0..rows.train);
        let mut data = frame.values[..rows.total() * c].to_vec();
        normalizer.apply(&mut data, |i| i % c, false);
        Ok(Self { data, n_vars: c, lookback, horizon, rows, normalizer })
    }

    /// Rows a split's windows may touch, including borrowed look-back.
    pub fn border(&self, split: Split) -> Range<usize> {
        let r = self.rows;
        let t = self.lookback;
        match split {
            Split::Train => 0..r.train,
            Split::Val => r.train - t..r.train + r.val,
            Split::Test => r.train + r.val - t..r.total(),
        }
    }

    /// Start rows of every window of a split.
    pub fn window_starts(&self, split: Split) -> Range<usize> {
        let b = self.border(split);
        let span = self.lookback + self.horizon;
        if b.len() < span {
            return b.start..b.start;
        }
        b.start..b.end - span + 1
    }

    pub fn n_windows(&self, split: Split) -> usize {
        self.window_starts(split).len()
    }

    /// `(x: [B, C, lookback], y: [B, C, horizon])` for windows starting at
    /// `starts`.
    pub fn batch(&self, starts: &[usize]) -> (Tensor, Tensor) {
        let (c, t, h) = (self.n_vars, self.lookback, self.horizon);
        let mut x = Vec::with_capacity(starts.len() * c * t);
        let mut y = Vec::with_capacity(starts.len() * c * h);
        for &s in starts {
            for j in 0..c {
                x.extend((s..s + t).map(|r| self.data[r * c + j]));
            }
            for j in 0..c {
                y.extend((s + t..s + t + h).map(|r| self.data[r * c + j]));
            }
        }
        let b = starts.len();
        (
            Tensor::new(&[b, c, t], x).expect("window shape"),
            Tensor::new(&[b, c, h], y).expect("window shape"),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineComponent {
    pub amplitude: f64,
    /// Cycles per step.
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_vars: usize,
    pub length: usize,
    pub components: Vec<SineComponent>,
    /// Added to every component's phase for variable `c`, times `c`.
    pub phase_step: f64,
    pub slope: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_vars: 3,
            length: 4000,
            components: vec![
                SineComponent { amplitude: 1.0, frequency: 1.0 / 24.0, phase: 0.0 },
                SineComponent { amplitude: 0.5, frequency: 1.0 / 60.0, phase: 0.5 },
            ],
            phase_step: 0.7,
            slope: 0.0005,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Noise-free value of variable `c` at step `i`.
    pub fn signal(&self, c: usize, i: usize) -> f64 {
        let t = i as f64;
        let shift = self.phase_step * c as f64;
        let periodic: f64 = self
            .components
            .iter()
            .map(|s| s.amplitude * (2.0 * std::f64::consts::PI * s.frequency * t + s.phase + shift).sin())
            .sum();
        periodic + self.slope * t
    }
}

pub fn synth_series(spec: &SynthSpec) -> Result<SeriesFrame> {
    if spec.length == 0 || spec.n_vars == 0 {
        return Err(Error::Config("synthetic series needs positive length and n_vars".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let mut values = Vec::with_capacity(spec.length * spec.n_vars);
    for i in 0..spec.length {
        for c in 0..spec.n_vars {
            let noise = if spec.noise_std > 0.0 { spec.noise_std * rng.normal() } else { 0.0 };
            values.push(spec.signal(c, i) + noise);
        }
    }
    Ok(SeriesFrame {
        timestamps: (0..spec.length).map(|i| i as f64).collect(),
        values,
        names: (0..spec.n_vars).map(|c| format!("x{c}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_csv() {
        let text = "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6\n";
        let f = read_csv(text.as_bytes()).unwrap();
        assert_eq!((f.len(), f.n_vars()), (3, 2));
        assert_eq!(f.row(1), &[3.0, 4.0]);
        assert_eq!(f.timestamps[1] - f.timestamps[0], 3600.0);
    }

    #[test]
    fn duplicate_timestamp_is_order_error() {
        let text = "date,a\n1,1\n2,2\n2,3\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Order { row: 3, .. })));
    }

    #[test]
    fn bad_cell_reports_position() {
        let text = "date,a,b\n1,1,2\n2,3,oops\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 3)),
            other => panic!("{other:?}"),
        }
        let text = "date,a\n1,\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Parse { row: 1, col: 2, .. })));
    }

    #[test]
    fn toy_window_count() {
        let frame = SeriesFrame {
            timestamps: (0..20).map(f64::from).collect(),
            values: (0..20).map(f64::from).collect(),
            names: vec!["v".into()],
        };
        let ds = WindowedDataset::new(&frame, &SplitSpec::Rows(SplitRows { train: 14, val: 3, test: 3 }), 4, 2).unwrap();
        assert_eq!(ds.n_windows(Split::Train), 9);
        assert_eq!(ds.n_windows(Split::Val), 2);
        assert_eq!(ds.n_windows(Split::Test), 2);
    }

    #[test]
    fn unknown_name_needs_fractions() {
        assert!(matches!(SplitSpec::Named("mystery".into()).resolve(100), Err(Error::Config(_))));
    }

    #[test]
    fn table_matches_benchmark_counts() {
        let cases = [
            ("ETTh1", 14400, (8545, 2881, 2881)),
            ("ETTm1", 57600, (34465, 11521, 11521)),
            ("Electricity", 26304, (18317, 2633, 5261)),
            ("Traffic", 17544, (12185, 1757, 3509)),
            ("Weather", 52696, (36792, 5271, 10540)),
        ];
        for (name, total, expected) in cases {
            let rows = named_split(name, total).unwrap();
            assert_eq!(rows.total(), total, "{name}");
            assert_eq!(rows.context_counts(96), expected, "{name}");
        }
    }

    #[test]
    fn periodic_without_noise() {
        let spec = SynthSpec {
            n_vars: 1,
            length: 200,
            components: vec![SineComponent { amplitude: 2.0, frequency: 0.05, phase: 0.3 }],
            slope: 0.0,
            noise_std: 0.0,
            ..Default::default()
        };
        let f = synth_series(&spec).unwrap();
        for i in 0..180 {
            assert!((f.values[i] - f.values[i + 20]).abs() < 1e-12);
        }
    }
}
