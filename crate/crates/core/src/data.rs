//! Triplet/label file I/O, the synthetic generator and dataset splits.
//!
//! Triplet files are UTF-8 CSV with the header `series_id,time,variable,value`;
//! label files use `series_id,label`. Static descriptors are expected as
//! observations at time 0.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::{Series, TimeSeriesBatch};

pub const TRIPLET_HEADER: [&str; 4] = ["series_id", "time", "variable", "value"];
pub const LABEL_HEADER: [&str; 2] = ["series_id", "label"];
pub const DEFAULT_MAX_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    /// Allowed variable names, in column order. Inferred (sorted) when `None`.
    pub vocabulary: Option<Vec<String>>,
    /// Steps kept per series; later observations are dropped.
    pub max_steps: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            vocabulary: None,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

struct Row {
    time: f64,
    var: usize,
    value: f64,
}

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, csv::Position::line)
}

fn parse_field<T: FromStr>(record: &csv::StringRecord, idx: usize, what: &str) -> Result<T> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Parse {
        line: line_of(record),
        message: format!("invalid {what} `{raw}`"),
    })
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

/// Parses triplets into unlabeled series (all labels 0), in order of first
/// appearance. Rows sharing a timestamp are merged into one step; a repeated
/// variable at the same time keeps the last value.
pub fn read_triplets<R: Read>(input: R, options: &LoadOptions) -> Result<TimeSeriesBatch> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &TRIPLET_HEADER)?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    let mut var_index: HashMap<String, usize> = HashMap::new();
    let mut raw: Vec<(String, f64, String, f64)> = Vec::new();
    if let Some(vocab) = &options.vocabulary {
        for (i, v) in vocab.iter().enumerate() {
            var_index.insert(v.clone(), i);
        }
    }
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let id = record[0].to_string();
        let time: f64 = parse_field(&record, 1, "time")?;
        if !(time >= 0.0 && time.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("time must be finite and non-negative, found {time}"),
            });
        }
        let var = record[2].to_string();
        let value: f64 = parse_field(&record, 3, "value")?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("non-finite value `{}`", &record[3]),
            });
        }
        if options.vocabulary.is_some() && !var_index.contains_key(&var) {
            return Err(Error::UnknownVariable { name: var, line });
        }
        raw.push((id, time, var, value));
    }
    if options.vocabulary.is_none() {
        let mut names: Vec<&String> = raw.iter().map(|r| &r.2).collect();
        names.sort();
        names.dedup();
        var_index = names.into_iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
    }
    let mut variables = vec![String::new(); var_index.len()];
    for (name, &i) in &var_index {
        variables[i] = name.clone();
    }
    for (id, time, var, value) in raw {
        let var = var_index[&var];
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(Row { time, var, value });
    }
    let dim = variables.len();
    let mut series = Vec::with_capacity(order.len());
    for id in order {
        let mut rs = rows.remove(&id).expect("id recorded on insert");
        rs.sort_by(|a, b| a.time.total_cmp(&b.time));
        let (mut times, mut values, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        for r in rs {
            if times.last() != Some(&r.time) {
                if times.len() == options.max_steps {
                    break;
                }
                times.push(r.time);
                values.extend(std::iter::repeat_n(0.0, dim));
                mask.extend(std::iter::repeat_n(0.0, dim));
            }
            let k = (times.len() - 1) * dim + r.var;
            values[k] = r.value;
            mask[k] = 1.0;
        }
        series.push(Series::new(id, dim, times, values, mask, 0)?);
    }
    TimeSeriesBatch::new(variables, series)
}

pub fn load_triplets(path: &Path, options: &LoadOptions) -> Result<TimeSeriesBatch> {
    read_triplets(File::open(path)?, options)
}

pub fn read_labels<R: Read>(input: R) -> Result<HashMap<String, u8>> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &LABEL_HEADER)?;
    let mut out = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let label: u8 = parse_field(&record, 1, "label")?;
        if label > 1 {
            return Err(Error::Parse {
                line: line_of(&record),
                message: format!("label must be 0 or 1, found {label}"),
            });
        }
        out.insert(record[0].to_string(), label);
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<HashMap<String, u8>> {
    read_labels(File::open(path)?)
}

/// Sets each series' label; every series must have one.
pub fn attach_labels(batch: &mut TimeSeriesBatch, labels: &HashMap<String, u8>) -> Result<()> {
    for s in &mut batch.series {
        s.label = *labels
            .get(&s.id)
            .ok_or_else(|| Error::Validation(format!("no label for series `{}`", s.id)))?;
    }
    Ok(())
}

/// Writes every observed entry as one triplet row.
pub fn write_triplets<W: Write>(out: W, batch: &TimeSeriesBatch) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIPLET_HEADER)?;
    for s in &batch.series {
        for t in 0..s.len() {
            for (d, name) in batch.variables.iter().enumerate() {
                if s.mask_row(t)[d] == 1.0 {
                    let time = s.times[t].to_string();
                    let value = s.value_row(t)[d].to_string();
                    w.write_record([s.id.as_str(), &time, name, &value])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels<W: Write>(out: W, batch: &TimeSeriesBatch) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LABEL_HEADER)?;
    for s in &batch.series {
        w.write_record([s.id.as_str(), &s.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// How observations are removed from the complete synthetic grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Missingness {
    /// Class-dependent drop probability, so the mask predicts the label.
    Informative { negative: f64, positive: f64 },
    /// One drop probability for both classes.
    Random { rate: f64 },
}

impl Missingness {
    fn rate(&self, label: u8) -> f64 {
        match *self {
            Missingness::Informative { negative, positive } => {
                if label == 1 {
                    positive
                } else {
                    negative
                }
            }
            Missingness::Random { rate } => rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_series: usize,
    pub dim: usize,
    pub mean_length: usize,
    /// Gaps are `1 ± jitter`, uniformly.
    pub jitter: f64,
    /// Class-dependent drift over a series of mean length.
    pub amplitude: f64,
    pub noise: f64,
    pub positive_fraction: f64,
    pub missingness: Missingness,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_series: 500,
            dim: 4,
            mean_length: 12,
            jitter: 0.4,
            amplitude: 0.3,
            noise: 0.5,
            positive_fraction: 0.5,
            missingness: Missingness::Informative {
                negative: 0.2,
                positive: 0.7,
            },
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Named presets: `default`, `informative` (2000 series), `random`
    /// (uninformative mask) and `separable` (strong signal, nothing missing).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "default" => base,
            "informative" => Self { n_series: 2000, ..base },
            "random" => Self {
                missingness: Missingness::Random { rate: 0.45 },
                ..base
            },
            "separable" => Self {
                amplitude: 3.0,
                noise: 0.2,
                missingness: Missingness::Random { rate: 0.0 },
                ..base
            },
            _ => return Err(Error::Validation(format!("unknown synthetic preset `{name}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_series < 2 {
            return bad("synthetic data needs at least two series".into());
        }
        if self.dim == 0 || self.mean_length == 0 {
            return bad("dimension and mean length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad("positive fraction must lie in (0, 1)".into());
        }
        if !(self.noise >= 0.0 && self.amplitude.is_finite()) {
            return bad("noise must be non-negative and amplitude finite".into());
        }
        for label in [0, 1] {
            calibrated_drop_probability(self.missingness.rate(label), self.dim)?;
        }
        Ok(())
    }
}

/// Per-entry drop probability `q` such that, among steps keeping at least one
/// of `dim` variables, the expected missing share is `rate`:
/// `(q − q^D) / (1 − q^D) = rate`.
pub fn calibrated_drop_probability(rate: f64, dim: usize) -> Result<f64> {
    let ceiling = (dim as f64 - 1.0) / dim as f64;
    if rate == 0.0 {
        return Ok(0.0);
    }
    if !(rate > 0.0 && rate < ceiling) {
        return Err(Error::Validation(format!(
            "missing rate {rate} is not attainable with {dim} variable(s); it must lie in [0, {ceiling})"
        )));
    }
    let share = |q: f64| {
        let qd = q.powi(dim as i32);
        (q - qd) / (1.0 - qd)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if share(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Draws a labelled dataset from two latent sinusoid-plus-drift processes.
///
/// Each variable follows `sin(ω t + φ) + level ± amplitude·t/L + noise` on a
/// jittered unit grid, the drift sign set by the class. Grid entries are
/// dropped independently; grid points where nothing survives are not
/// recorded, and the grid is extended until the series has its drawn length.
/// Drop probabilities are calibrated so the missing share of recorded entries
/// matches the class's rate.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TimeSeriesBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d) = (spec.n_series, spec.dim);
    let positives = ((n as f64 * spec.positive_fraction).round() as usize).clamp(1, n - 1);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    labels.shuffle(&mut rng);
    let drop = [
        calibrated_drop_probability(spec.missingness.rate(0), d)?,
        calibrated_drop_probability(spec.missingness.rate(1), d)?,
    ];

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let freqs: Vec<f64> = (0..d).map(|k| 0.3 + 0.2 * k as f64).collect();
    let lo = spec.mean_length.div_ceil(2).max(1);
    let hi = (spec.mean_length * 3 / 2).max(lo);
    let scale = spec.mean_length as f64;

    let series = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let len = rng.random_range(lo..=hi);
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let q = drop[usize::from(label)];
            let mut t = rng.random_range(0.0..=spec.jitter);
            let phase: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let level: Vec<f64> = (0..d).map(|_| 0.5 * unit.sample(&mut rng)).collect();
            let mut times = Vec::with_capacity(len);
            let mut values = Vec::with_capacity(len * d);
            let mut mask = Vec::with_capacity(len * d);
            let mut row_v = vec![0.0; d];
            let mut row_m = vec![0.0; d];
            while times.len() < len {
                for k in 0..d {
                    let v = (freqs[k] * t + phase[k]).sin()
                        + level[k]
                        + sign * spec.amplitude * t / scale
                        + spec.noise * unit.sample(&mut rng);
                    let observed = !rng.random_bool(q);
                    row_v[k] = if observed { v } else { 0.0 };
                    row_m[k] = if observed { 1.0 } else { 0.0 };
                }
                if row_m.contains(&1.0) {
                    times.push(t);
                    values.extend_from_slice(&row_v);
                    mask.extend_from_slice(&row_m);
                }
                t += 1.0 + rng.random_range(-spec.jitter..=spec.jitter);
            }
            Series::new(format!("s{i:05}"), d, times, values, mask, label)
        })
        .collect::<Result<Vec<_>>>()?;
    let variables = (0..d).map(|k| format!("v{k}")).collect();
    TimeSeriesBatch::new(variables, series)
}

/// Share of the series in each of train, validation and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

pub struct Split {
    pub train: TimeSeriesBatch,
    pub validation: TimeSeriesBatch,
    pub test: TimeSeriesBatch,
}

fn allocate(indices: &mut [usize], f: &SplitFractions, rng: &mut ChaCha8Rng, parts: &mut [Vec<usize>; 3]) {
    indices.shuffle(rng);
    let n = indices.len() as f64;
    let n_val = (n * f.validation).round() as usize;
    let n_test = ((n * f.test).round() as usize).min(indices.len() - n_val.min(indices.len()));
    let n_val = n_val.min(indices.len());
    parts[1].extend_from_slice(&indices[..n_val]);
    parts[2].extend_from_slice(&indices[n_val..n_val + n_test]);
    parts[0].extend_from_slice(&indices[n_val + n_test..]);
}

/// Disjoint, exhaustive train/validation/test split.
///
/// With `stratified`, each class is divided separately and every split with a
/// positive fraction must receive both classes.
pub fn split(batch: &TimeSeriesBatch, fractions: SplitFractions, seed: u64, stratified: bool) -> Result<Split> {
    let f = fractions;
    if [f.train, f.validation, f.test]
        .iter()
        .any(|&x| !(0.0..=1.0).contains(&x))
        || (f.train + f.validation + f.test - 1.0).abs() > 1e-9
    {
        return Err(Error::Validation(format!(
            "split fractions ({}, {}, {}) must be in [0, 1] and sum to 1",
            f.train, f.validation, f.test
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    if stratified {
        for class in [0u8, 1] {
            let mut idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.series[i].label == class).collect();
            allocate(&mut idx, &f, &mut rng, &mut parts);
        }
        let names = ["train", "validation", "test"];
        for (k, share) in [f.train, f.validation, f.test].into_iter().enumerate() {
            if share > 0.0 {
                for class in [0u8, 1] {
                    if !parts[k].iter().any(|&i| batch.series[i].label == class) {
                        return Err(Error::Validation(format!(
                            "{} split has no series of class {class}",
                            names[k]
                        )));
                    }
                }
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..batch.len()).collect();
        allocate(&mut idx, &f, &mut rng, &mut parts);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(Split {
        train: batch.subset(&parts[0]),
        validation: batch.subset(&parts[1]),
        test: batch.subset(&parts[2]),
    })
}

/// Median positive gap between consecutive timestamps, 1 if there is none.
pub fn median_gap(batch: &TimeSeriesBatch) -> f64 {
    let mut gaps: Vec<f64> = batch
        .series
        .iter()
        .flat_map(|s| s.times.windows(2).map(|w| w[1] - w[0]))
        .filter(|&g| g > 0.0)
        .collect();
    if gaps.is_empty() {
        return 1.0;
    }
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len() / 2;
    if gaps.len().is_multiple_of(2) {
        (gaps[m - 1] + gaps[m]) / 2.0
    } else {
        gaps[m]
    }
}
