//! Dataset loading, normalization, cropping, forecast windowing, and the
//! synthetic generators used by tests and the `synth` subcommand.
//!
//! Two on-disk formats are understood:
//! * labeled sets: one series per line, label first, tab- or comma-delimited,
//!   rectangular, with trailing NaN cells marking shorter series;
//! * forecast series: a headered CSV, one timestamp per row, one column per
//!   channel (a leading date/time column is skipped automatically).

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use ndgrad::{Scalar, Tensor};
use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::rngutil::{gaussian, rand_below, uniform};

/// A set of (possibly variable-length) multichannel series, padded with
/// zeros to `max_len`. Values are stored [n, channels, max_len].
#[derive(Debug, Clone)]
pub struct SeriesSet {
    pub name: String,
    pub channels: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub values: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    /// Original label text per class id, in mapping order.
    pub label_names: Option<Vec<String>>,
    pub channel_names: Option<Vec<String>>,
}

impl SeriesSet {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.as_ref().map_or(0, |l| l.len())
    }

    #[inline]
    pub fn value(&self, i: usize, c: usize, t: usize) -> f64 {
        self.values[(i * self.channels + c) * self.max_len + t]
    }

    #[inline]
    pub fn value_mut(&mut self, i: usize, c: usize, t: usize) -> &mut f64 {
        &mut self.values[(i * self.channels + c) * self.max_len + t]
    }
}

/// Per-channel normalization statistics, always computed on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose training variance was (numerically) zero; they are
    /// centered and left at zero rather than divided by noise.
    pub constant: Vec<bool>,
}

// ── loaders ─────────────────────────────────────────────────────────────────

fn detect_delimiter(line: &str) -> char {
    let tabs = line.matches('\t').count();
    let commas = line.matches(',').count();
    if commas > tabs {
        ','
    } else {
        '\t'
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Loads a labeled set: label first, values after, one series per line.
/// Trailing NaNs shorten a series; interior NaNs and ragged rows are errors.
/// Labels are remapped to contiguous ids ordered by numeric value.
pub fn load_labeled_tsv(path: impl AsRef<Path>) -> Result<SeriesSet> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<(f64, Vec<f64>, usize)> = Vec::new(); // (label, values, valid_len)
    let mut delim = None;
    let mut width = None;

    for (lineno, line) in raw.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let d = *delim.get_or_insert_with(|| detect_delimiter(line));
        let fields: Vec<&str> = line.split(d).collect();
        if fields.len() < 2 {
            return Err(parse_err(path, lineno, "expected a label and at least one value"));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("ragged row: {} fields where the first row had {w}", fields.len()),
                ))
            }
            _ => {}
        }
        let label: f64 = fields[0].trim().parse().map_err(|_| {
            parse_err(path, lineno, format!("label {:?} is not numeric", fields[0]))
        })?;
        if label.is_nan() {
            return Err(parse_err(path, lineno, "label may not be NaN"));
        }
        let mut values = Vec::with_capacity(fields.len() - 1);
        let mut valid_len = None;
        for (col, f) in fields[1..].iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                parse_err(
                    path,
                    lineno,
                    format!("value {:?} in column {} is not numeric", f, col + 2),
                )
            })?;
            if v.is_nan() {
                valid_len.get_or_insert(col);
            } else if valid_len.is_some() {
                return Err(parse_err(
                    path,
                    lineno,
                    format!(
                        "non-NaN value in column {} after NaN padding began; \
                         only trailing NaNs mark variable length",
                        col + 2
                    ),
                ));
            }
            values.push(v);
        }
        let valid_len = valid_len.unwrap_or(values.len());
        if valid_len == 0 {
            return Err(parse_err(path, lineno, "series has no valid values"));
        }
        rows.push((label, values, valid_len));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "file holds no series"));
    }

    // contiguous class ids, ordered by numeric label value
    let mut distinct: Vec<f64> = rows.iter().map(|r| r.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let class_of = |l: f64| distinct.iter().position(|d| *d == l).unwrap();

    let max_len = rows.iter().map(|r| r.2).max().unwrap();
    let n = rows.len();
    let mut values = vec![0.0; n * max_len];
    let mut lengths = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, (label, row, valid_len)) in rows.into_iter().enumerate() {
        values[i * max_len..i * max_len + valid_len].copy_from_slice(&row[..valid_len]);
        lengths.push(valid_len);
        labels.push(class_of(label));
    }
    Ok(SeriesSet {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        channels: 1,
        max_len,
        lengths,
        values,
        labels: Some(labels),
        label_names: Some(distinct.iter().map(|d| format_float(*d)).collect()),
        channel_names: None,
    })
}

/// Loads a headered forecast CSV as one long multichannel series.
/// `columns`, when given, selects channels by header name; otherwise every
/// column except a leading date/time-like one is used.
pub fn load_forecast_csv(path: impl AsRef<Path>, columns: Option<&[String]>) -> Result<SeriesSet> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 0, "file is empty"))?;
    let delim = detect_delimiter(header);
    let names: Vec<String> = header.split(delim).map(|s| s.trim().to_string()).collect();

    let is_datelike = |n: &str| {
        let n = n.to_ascii_lowercase();
        n == "date" || n == "time" || n == "timestamp" || n == "datetime"
    };
    let chosen: Vec<usize> = match columns {
        Some(cols) => {
            let mut idx = Vec::with_capacity(cols.len());
            for c in cols {
                let i = names.iter().position(|n| n == c).ok_or_else(|| {
                    parse_err(path, 1, format!("column {c:?} not present in header"))
                })?;
                idx.push(i);
            }
            idx
        }
        None => (0..names.len()).filter(|i| !is_datelike(&names[*i])).collect(),
    };
    if chosen.is_empty() {
        return Err(parse_err(path, 1, "no usable channel columns"));
    }

    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); chosen.len()];
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split(delim).collect();
        if fields.len() != names.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("row has {} fields, header has {}", fields.len(), names.len()),
            ));
        }
        for (slot, &col) in chosen.iter().enumerate() {
            let f = fields[col].trim();
            let v: f64 = f.parse().map_err(|_| {
                parse_err(
                    path,
                    lineno,
                    format!("cell {:?} in column {:?} is not numeric", f, names[col]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("non-finite value in column {:?}", names[col]),
                ));
            }
            per_channel[slot].push(v);
        }
    }
    let t = per_channel[0].len();
    if t == 0 {
        return Err(parse_err(path, 1, "no data rows after the header"));
    }
    let c = chosen.len();
    let mut values = vec![0.0; c * t];
    for (slot, ch) in per_channel.into_iter().enumerate() {
        values[slot * t..(slot + 1) * t].copy_from_slice(&ch);
    }
    Ok(SeriesSet {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        channels: c,
        max_len: t,
        lengths: vec![t],
        values,
        labels: None,
        label_names: None,
        channel_names: Some(chosen.iter().map(|&i| names[i].clone()).collect()),
    })
}

// ── writers (synth output, round-trip tests) ───────────────────────────────

fn format_float(v: f64) -> String {
    // shortest representation that round-trips
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

pub fn write_labeled_tsv(set: &SeriesSet, path: impl AsRef<Path>) -> Result<()> {
    let labels = set
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("cannot write an unlabeled set in labeled format".into()))?;
    if set.channels != 1 {
        return Err(Error::Data(
            "labeled format stores single-channel series only".into(),
        ));
    }
    let names = set.label_names.as_ref();
    let mut out = String::new();
    for i in 0..set.len() {
        let label_txt = match names {
            Some(n) => n[labels[i]].clone(),
            None => labels[i].to_string(),
        };
        out.push_str(&label_txt);
        for t in 0..set.max_len {
            out.push('\t');
            if t < set.lengths[i] {
                out.push_str(&format_float(set.value(i, 0, t)));
            } else {
                out.push_str("NaN");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_forecast_csv(set: &SeriesSet, path: impl AsRef<Path>) -> Result<()> {
    if set.len() != 1 {
        return Err(Error::Data("forecast format stores exactly one series".into()));
    }
    let names: Vec<String> = match &set.channel_names {
        Some(n) => n.clone(),
        None => (0..set.channels).map(|c| format!("c{c}")).collect(),
    };
    let mut out = names.join(",");
    out.push('\n');
    for t in 0..set.lengths[0] {
        for c in 0..set.channels {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format_float(set.value(0, c, t)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── normalization ───────────────────────────────────────────────────────────

/// Z-normalizes in place. With `stats` absent they are computed from this
/// set (the training split); pass the returned stats to normalize other
/// splits with the same transform. Constant channels are flagged and pinned
/// to zero instead of being divided by numerical noise.
pub fn z_normalize(set: &mut SeriesSet, stats: Option<&NormStats>) -> Result<NormStats> {
    let c_n = set.channels;
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != c_n {
                return Err(Error::Data(format!(
                    "normalization stats carry {} channels, set has {c_n}",
                    s.mean.len()
                )));
            }
            s.clone()
        }
        None => {
            let mut mean = vec![0.0; c_n];
            let mut std = vec![0.0; c_n];
            let mut constant = vec![false; c_n];
            let total: usize = set.lengths.iter().sum();
            if total == 0 {
                return Err(Error::Data("cannot normalize an empty set".into()));
            }
            for c in 0..c_n {
                let mut s = 0.0;
                for i in 0..set.len() {
                    for t in 0..set.lengths[i] {
                        s += set.value(i, c, t);
                    }
                }
                mean[c] = s / total as f64;
                let mut sq = 0.0;
                for i in 0..set.len() {
                    for t in 0..set.lengths[i] {
                        let d = set.value(i, c, t) - mean[c];
                        sq += d * d;
                    }
                }
                let var = sq / total as f64;
                if var.sqrt() < 1e-12 {
                    constant[c] = true;
                    std[c] = 1.0;
                } else {
                    std[c] = var.sqrt();
                }
            }
            NormStats { mean, std, constant }
        }
    };
    for i in 0..set.len() {
        for c in 0..c_n {
            for t in 0..set.lengths[i] {
                let v = set.value(i, c, t);
                *set.value_mut(i, c, t) = (v - stats.mean[c]) / stats.std[c];
            }
        }
    }
    Ok(stats)
}

// ── batches and crops ───────────────────────────────────────────────────────

/// A dense training batch [B, C, T] with optional per-(series, timestep)
/// validity (None means everything is real data).
#[derive(Debug, Clone)]
pub struct Batch {
    pub b: usize,
    pub c: usize,
    pub t: usize,
    pub data: Vec<f64>,
    pub lengths: Vec<usize>,
    pub valid: Option<Rc<Vec<bool>>>,
}

impl Batch {
    pub fn to_tensor<E: Scalar>(&self) -> Tensor<E> {
        let data: Vec<E> = self.data.iter().map(|v| E::from_f64(*v)).collect();
        Tensor::from_vec(&[self.b, self.c, self.t], data).expect("batch buffer matches shape")
    }
}

/// Random temporal crops: series longer than `window` contribute a uniformly
/// placed window, shorter ones enter whole (padded up to the batch length).
pub fn random_crop(
    set: &SeriesSet,
    indices: &[usize],
    window: usize,
    rng: &mut impl RngCore,
) -> Result<Batch> {
    if window == 0 {
        return Err(Error::Data("crop window must be >= 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Data("cannot build an empty batch".into()));
    }
    for &i in indices {
        if i >= set.len() {
            return Err(Error::Data(format!(
                "series index {i} out of range for a set of {}",
                set.len()
            )));
        }
    }
    let b = indices.len();
    let c = set.channels;
    let t_b = indices
        .iter()
        .map(|&i| set.lengths[i].min(window))
        .max()
        .unwrap();
    let mut data = vec![0.0; b * c * t_b];
    let mut lengths = Vec::with_capacity(b);
    let mut any_padding = false;
    for (row, &i) in indices.iter().enumerate() {
        let len = set.lengths[i];
        let (start, take) = if len > window {
            (rand_below(rng, len - window + 1), window)
        } else {
            (0, len)
        };
        if take < t_b {
            any_padding = true;
        }
        for ch in 0..c {
            let src = (i * c + ch) * set.max_len + start;
            let dst = (row * c + ch) * t_b;
            data[dst..dst + take].copy_from_slice(&set.values[src..src + take]);
        }
        lengths.push(take);
    }
    let valid = if any_padding {
        let mut v = vec![false; b * t_b];
        for (row, &len) in lengths.iter().enumerate() {
            for t in 0..len {
                v[row * t_b + t] = true;
            }
        }
        Some(Rc::new(v))
    } else {
        None
    };
    Ok(Batch {
        b,
        c,
        t: t_b,
        data,
        lengths,
        valid,
    })
}

/// Whole-set batch without cropping (probe feature extraction).
pub fn full_batch(set: &SeriesSet, indices: &[usize]) -> Result<Batch> {
    random_crop(set, indices, usize::MAX, &mut NullRng)
}

/// rand source for paths that must not consume randomness
struct NullRng;
impl RngCore for NullRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("full_batch never samples")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("full_batch never samples")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!()
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand_core::Error> {
        unreachable!()
    }
}

// ── forecast windows ────────────────────────────────────────────────────────

/// Sliding context/target windows over one long series, stride 1, each
/// window confined to a single contiguous time split (train/val/test) so no
/// target ever leaks across a boundary.
#[derive(Debug, Clone)]
pub struct ForecastWindows {
    pub context_len: usize,
    pub horizons: Vec<usize>,
    /// [split][horizon] -> context start offsets
    pub starts: [Vec<Vec<usize>>; 3],
    pub split_bounds: [(usize, usize); 3],
    pub warnings: Vec<String>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

pub fn make_forecast_windows(
    set: &SeriesSet,
    context_len: usize,
    horizons: &[usize],
    fractions: (f64, f64),
) -> Result<ForecastWindows> {
    if set.len() != 1 {
        return Err(Error::Data(format!(
            "forecast windowing expects one long series, set has {}",
            set.len()
        )));
    }
    if context_len == 0 {
        return Err(Error::Data("context length must be >= 1".into()));
    }
    if horizons.is_empty() || horizons.iter().any(|&h| h == 0) {
        return Err(Error::Data("horizons must be non-empty and >= 1".into()));
    }
    let t = set.lengths[0];
    let (f1, f2) = fractions;
    if !(f1 > 0.0 && f2 > 0.0 && f1 + f2 < 1.0) {
        return Err(Error::Data(format!(
            "split fractions ({f1}, {f2}) must be positive and sum below 1"
        )));
    }
    let b1 = (t as f64 * f1).floor() as usize;
    let b2 = (t as f64 * (f1 + f2)).floor() as usize;
    let bounds = [(0, b1), (b1, b2), (b2, t)];

    let mut starts: [Vec<Vec<usize>>; 3] = Default::default();
    let mut warnings = Vec::new();
    for (si, &(a, b)) in bounds.iter().enumerate() {
        for &h in horizons {
            let need = context_len + h;
            let list: Vec<usize> = if b >= a + need {
                (a..=(b - need)).collect()
            } else {
                Vec::new()
            };
            if list.is_empty() {
                warnings.push(format!(
                    "split {} holds no windows for horizon {} (span {}, need {})",
                    SPLIT_NAMES[si],
                    h,
                    b - a,
                    need
                ));
            }
            starts[si].push(list);
        }
    }
    Ok(ForecastWindows {
        context_len,
        horizons: horizons.to_vec(),
        starts,
        split_bounds: bounds,
        warnings,
    })
}

/// Builds the [n_windows, H * C] target matrix for a window list, channels
/// fastest (row = [t+1 ch0, t+1 ch1, ..., t+H chC]).
pub fn forecast_targets(set: &SeriesSet, starts: &[usize], context_len: usize, h: usize) -> Vec<f64> {
    let c = set.channels;
    let mut out = vec![0.0; starts.len() * h * c];
    for (row, &s) in starts.iter().enumerate() {
        for step in 0..h {
            for ch in 0..c {
                out[row * h * c + step * c + ch] = set.value(0, ch, s + context_len + step);
            }
        }
    }
    out
}

// ── synthetic data ──────────────────────────────────────────────────────────

/// Balanced sinusoid classification set: class c oscillates at frequency
/// (c+1) * 4 cycles over the nominal length, with a random phase per sample
/// and additive Gaussian noise.
pub fn synth_classification(
    num_classes: usize,
    n: usize,
    t: usize,
    noise: f64,
    rng: &mut impl RngCore,
) -> Result<SeriesSet> {
    if num_classes == 0 || n == 0 || t == 0 {
        return Err(Error::Data("synth_classification needs classes, n, t >= 1".into()));
    }
    if noise < 0.0 {
        return Err(Error::Data("noise must be non-negative".into()));
    }
    let mut values = vec![0.0; n * t];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes; // balanced up to remainder
        let phase = uniform(rng, 0.0, std::f64::consts::TAU);
        let freq = std::f64::consts::TAU * 4.0 * (class + 1) as f64 / t as f64;
        for step in 0..t {
            let mut v = (freq * step as f64 + phase).sin();
            if noise > 0.0 {
                v += noise * gaussian(rng);
            }
            values[i * t + step] = v;
        }
        labels.push(class);
    }
    Ok(SeriesSet {
        name: "synth-cls".into(),
        channels: 1,
        max_len: t,
        lengths: vec![t; n],
        values,
        labels: Some(labels),
        label_names: Some((0..num_classes).map(|c| c.to_string()).collect()),
        channel_names: None,
    })
}

/// One long noisy sine for forecasting probes.
pub fn synth_sine_forecast(
    t: usize,
    period: f64,
    noise: f64,
    rng: &mut impl RngCore,
) -> Result<SeriesSet> {
    if t == 0 || period <= 0.0 {
        return Err(Error::Data("synth_sine_forecast needs t >= 1 and period > 0".into()));
    }
    if noise < 0.0 {
        return Err(Error::Data("noise must be non-negative".into()));
    }
    let mut values = vec![0.0; t];
    for (step, slot) in values.iter_mut().enumerate() {
        let mut v = (std::f64::consts::TAU * step as f64 / period).sin();
        if noise > 0.0 {
            v += noise * gaussian(rng);
        }
        *slot = v;
    }
    Ok(SeriesSet {
        name: "synth-sine".into(),
        channels: 1,
        max_len: t,
        lengths: vec![t],
        values,
        labels: None,
        label_names: None,
        channel_names: Some(vec!["value".into()]),
    })
}
