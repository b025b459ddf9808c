//! End-to-end commands behind the CLI binary: pretraining with metrics,
//! periodic probes and checkpoints; frozen-encoder probing; forecast
//! reports; feature export; synthetic dataset generation. Every command is
//! deterministic under a fixed seed, config, and build.

use std::path::{Path, PathBuf};

use ndgrad::{Mode, Tape};
use rand_core::RngCore;

use crate::checkpoint::{fnv1a64, load_checkpoint, restore_state, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    full_batch, load_forecast_csv, load_labeled_tsv, make_forecast_windows, random_crop,
    synth_classification, synth_sine_forecast, write_forecast_csv, write_labeled_tsv,
    forecast_targets, z_normalize, Batch, ForecastWindows, SeriesSet,
};
use crate::distill::TrainState;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::heads::{
    fit_logistic, fit_ridge, last_step_features, max_pool_features, mae, mse, probe_rng,
    BestTracker,
};
use crate::metrics::MetricsWriter;

/// Train/val/test fractions for forecast series, contiguous in time.
pub const FORECAST_SPLIT: (f64, f64) = (0.6, 0.2);

// ── data plumbing ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Label-first delimited rows, one series per line.
    Labeled,
    /// Headered CSV holding one long multichannel series.
    Forecast,
}

/// File extension decides the reader; keeps the CLI surface to one flag less.
pub fn detect_kind(path: &Path) -> Result<DataKind> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("ts") | Some("txt") => Ok(DataKind::Labeled),
        Some("csv") => Ok(DataKind::Forecast),
        other => Err(Error::Data(format!(
            "cannot infer dataset layout from extension {other:?} of {}; use .tsv/.ts/.txt for labeled rows or .csv for a forecast series",
            path.display()
        ))),
    }
}

/// `Foo_TRAIN.tsv` -> `Foo_TEST.tsv` when that file exists on disk.
pub fn sibling_test_path(train: &Path) -> Option<PathBuf> {
    let name = train.file_name()?.to_str()?;
    if !name.contains("_TRAIN") {
        return None;
    }
    let candidate = train.with_file_name(name.replace("_TRAIN", "_TEST"));
    candidate.is_file().then_some(candidate)
}

/// A copy whose usable region stops at the train-split boundary. Pretraining
/// and normalization statistics must not see validation or test timesteps.
fn train_split_view(set: &SeriesSet) -> SeriesSet {
    let mut view = set.clone();
    for len in &mut view.lengths {
        *len = ((*len as f64) * FORECAST_SPLIT.0).floor() as usize;
    }
    view
}

// ── feature extraction ──────────────────────────────────────────────────────

/// Max-pooled per-series features from the last encoder layer, batched in
/// `chunk`-sized eval forwards. Row i corresponds to `indices[i]`.
pub fn pooled_features(
    enc: &Encoder<f32>,
    set: &SeriesSet,
    indices: &[usize],
    chunk: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len() * enc.cfg.width);
    for group in indices.chunks(chunk.max(1)) {
        let batch = full_batch(set, group)?;
        let stack = encode_batch(enc, &batch, rng)?;
        let valid = batch.valid.as_ref().map(|v| v.as_slice());
        out.extend(max_pool_features(stack.last(), valid)?);
    }
    Ok(out)
}

/// Last-timestep features for forecast context windows starting at `starts`.
pub fn window_features(
    enc: &Encoder<f32>,
    set: &SeriesSet,
    starts: &[usize],
    context_len: usize,
    chunk: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let c = set.channels;
    let mut out = Vec::with_capacity(starts.len() * enc.cfg.width);
    for group in starts.chunks(chunk.max(1)) {
        let mut data = vec![0.0; group.len() * c * context_len];
        for (row, &s) in group.iter().enumerate() {
            for ch in 0..c {
                for t in 0..context_len {
                    data[(row * c + ch) * context_len + t] = set.value(0, ch, s + t);
                }
            }
        }
        let batch = Batch {
            b: group.len(),
            c,
            t: context_len,
            data,
            lengths: vec![context_len; group.len()],
            valid: None,
        };
        let stack = encode_batch(enc, &batch, rng)?;
        out.extend(last_step_features(stack.last(), &batch.lengths)?);
    }
    Ok(out)
}

fn encode_batch(
    enc: &Encoder<f32>,
    batch: &Batch,
    rng: &mut dyn RngCore,
) -> Result<crate::encoder::HiddenStack<f32>> {
    let input = batch.to_tensor::<f32>();
    let mut tape = Tape::no_grad();
    enc.encode(&mut tape, &input, batch.valid.as_ref(), Mode::Eval, None, rng)
}

// ── probes ──────────────────────────────────────────────────────────────────

enum ProbeSetup {
    Cls {
        train: SeriesSet,
        /// held-out set; falls back to scoring on train when absent
        test: Option<SeriesSet>,
    },
    Fc {
        series: SeriesSet,
        windows: ForecastWindows,
        horizon: usize,
        context: usize,
    },
}

/// One probe pass on a frozen encoder. Classification returns held-out
/// accuracy (higher better); forecasting returns validation MSE (lower
/// better). `quality` converts either into a maximization score.
fn run_probe(
    enc: &Encoder<f32>,
    setup: &ProbeSetup,
    batch_size: usize,
    rng: &mut impl RngCore,
) -> Result<f64> {
    match setup {
        ProbeSetup::Cls { train, test } => {
            let d = enc.cfg.width;
            let idx: Vec<usize> = (0..train.len()).collect();
            let x = pooled_features(enc, train, &idx, batch_size, rng)?;
            let y = train
                .labels
                .as_ref()
                .ok_or_else(|| Error::Data("classification probe needs labels".into()))?;
            let classes = train.num_classes();
            let model = fit_logistic(&x, train.len(), d, y, classes, rng)?;
            match test {
                Some(ts) => {
                    let tidx: Vec<usize> = (0..ts.len()).collect();
                    let tx = pooled_features(enc, ts, &tidx, batch_size, rng)?;
                    let ty = ts
                        .labels
                        .as_ref()
                        .ok_or_else(|| Error::Data("test split lacks labels".into()))?;
                    Ok(model.accuracy(&tx, ts.len(), ty))
                }
                None => Ok(model.accuracy(&x, train.len(), y)),
            }
        }
        ProbeSetup::Fc { series, windows, horizon, context } => {
            let hi = windows
                .horizons
                .iter()
                .position(|h| h == horizon)
                .ok_or_else(|| Error::Data(format!("no windows built for horizon {horizon}")))?;
            let train_starts = &windows.starts[0][hi];
            let val_starts = &windows.starts[1][hi];
            if train_starts.is_empty() || val_starts.is_empty() {
                return Err(Error::Data(
                    "series too short for probe windows in both train and val splits".into(),
                ));
            }
            let d = enc.cfg.width;
            let x = window_features(enc, series, train_starts, *context, batch_size, rng)?;
            let y = forecast_targets(series, train_starts, *context, *horizon);
            let k = horizon * series.channels;
            let model = fit_ridge(&x, train_starts.len(), d, &y, k, rng)?;
            let vx = window_features(enc, series, val_starts, *context, batch_size, rng)?;
            let vy = forecast_targets(series, val_starts, *context, *horizon);
            let pred = model.predict(&vx, val_starts.len());
            Ok(mse(&pred, &vy))
        }
    }
}

fn quality(setup: &ProbeSetup, score: f64) -> f64 {
    match setup {
        ProbeSetup::Cls { .. } => score,
        ProbeSetup::Fc { .. } => -score,
    }
}

// ── pretrain ────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct PretrainReport {
    pub steps: u64,
    pub final_ckpt: PathBuf,
    pub metrics_path: PathBuf,
    pub digest: u64,
    pub best_probe: Option<(u64, f64)>,
}

pub fn cmd_pretrain(
    cfg: RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<PretrainReport> {
    // a resumed run continues under the exact config frozen in the checkpoint
    let (resume_ckpt, cfg) = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            println!(
                "resuming from {} at step {} (config taken from the checkpoint)",
                p.display(),
                ckpt.step
            );
            let snap = ckpt.config.clone();
            (Some(ckpt), snap)
        }
        None => (None, cfg),
    };
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let kind = detect_kind(data)?;

    // pretraining corpus + probe material, normalized on train statistics only
    let (pretrain_set, setup, series_len) = match kind {
        DataKind::Labeled => {
            let mut train = load_labeled_tsv(data)?;
            let series_len = train.max_len;
            let stats = if cfg.normalize { Some(z_normalize(&mut train, None)?) } else { None };
            let test = match sibling_test_path(data) {
                Some(p) => {
                    let mut ts = load_labeled_tsv(&p)?;
                    if let Some(st) = &stats {
                        z_normalize(&mut ts, Some(st))?;
                    }
                    Some(ts)
                }
                None => None,
            };
            let setup = ProbeSetup::Cls { train: train.clone(), test };
            (train, setup, series_len)
        }
        DataKind::Forecast => {
            let full = load_forecast_csv(data, None)?;
            let series_len = full.max_len;
            let mut train_view = train_split_view(&full);
            let mut probe_series = full;
            if cfg.normalize {
                let stats = z_normalize(&mut train_view, None)?;
                z_normalize(&mut probe_series, Some(&stats))?;
            }
            let windows = make_forecast_windows(
                &probe_series,
                cfg.forecast_context,
                &[cfg.probe_horizon],
                FORECAST_SPLIT,
            )?;
            for w in &windows.warnings {
                println!("warning: {w}");
            }
            let setup = ProbeSetup::Fc {
                series: probe_series,
                windows,
                horizon: cfg.probe_horizon,
                context: cfg.forecast_context,
            };
            (train_view, setup, series_len)
        }
    };
    if pretrain_set.is_empty() || pretrain_set.lengths.iter().all(|&l| l == 0) {
        return Err(Error::Data("no usable timesteps in the training split".into()));
    }

    let total_steps = cfg.resolve_total_steps(series_len);
    let probe_every = cfg.resolve_probe_every(total_steps);
    let seed = cfg.seed;

    let (mut state, appending) = match &resume_ckpt {
        Some(ckpt) => {
            if ckpt.in_channels != pretrain_set.channels {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained on {} channels, data has {}",
                    ckpt.in_channels, pretrain_set.channels
                )));
            }
            (restore_state(ckpt)?, true)
        }
        None => (
            TrainState::new(cfg.encoder_config(pretrain_set.channels), cfg.distill_config(total_steps), seed)?,
            false,
        ),
    };
    if state.cfg.total_steps != total_steps {
        return Err(Error::Config(format!(
            "resumed step budget {} disagrees with this dataset/config ({total_steps})",
            state.cfg.total_steps
        )));
    }

    let metrics_path = out.join("metrics.csv");
    let mut writer = if appending && metrics_path.is_file() {
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path, cfg.normalize)?
    };

    let mut best = BestTracker::new();
    let mut best_at: Option<(u64, f64)> = None;
    let mut collapse_streak: u32 = 0;

    while state.step < total_steps {
        let t0 = std::time::Instant::now();
        let indices = state.sample_indices(pretrain_set.len(), cfg.batch_size);
        let batch = random_crop(&pretrain_set, &indices, cfg.crop_window, &mut state.rng)?;
        let m = state.train_step(&batch)?;

        if let Some(c) = m.collapse {
            collapse_streak = if c < cfg.collapse_threshold { collapse_streak + 1 } else { 0 };
        }
        if collapse_streak >= cfg.collapse_patience {
            writer.write_row(&m, None, t0.elapsed().as_millis())?;
            let p = out.join("collapsed.ckpt");
            save_checkpoint(&p, &state, &cfg, pretrain_set.channels, seed)?;
            println!("representation collapse at step {}; state saved to {}", m.step, p.display());
            return Err(Error::Collapse { step: m.step });
        }

        let mut probe_score = None;
        if crate::heads::is_probe_step(m.step, total_steps, probe_every) {
            let mut prng = probe_rng(seed, m.step);
            let score = run_probe(&state.teacher, &setup, cfg.batch_size, &mut prng)?;
            if best.observe(quality(&setup, score)) {
                best_at = Some((m.step + 1, score));
            }
            probe_score = Some(score);
            println!("probe step={} score={score}", m.step + 1);
            if m.step + 1 < total_steps {
                let p = out.join(format!("step-{}.ckpt", m.step + 1));
                save_checkpoint(&p, &state, &cfg, pretrain_set.channels, seed)?;
                println!("checkpoint {}", p.display());
            }
        }
        writer.write_row(&m, probe_score, t0.elapsed().as_millis())?;
    }

    let final_ckpt = out.join("final.ckpt");
    save_checkpoint(&final_ckpt, &state, &cfg, pretrain_set.channels, seed)?;
    let digest = fnv1a64(&std::fs::read(&final_ckpt)?);
    println!("pretrained {total_steps} steps on {}", pretrain_set.name);
    println!("final checkpoint {} fnv1a64={digest:016x}", final_ckpt.display());
    if let Some((s, v)) = best_at {
        println!("best probe score={v} at step={s}");
    }
    Ok(PretrainReport {
        steps: total_steps,
        final_ckpt,
        metrics_path,
        digest,
        best_probe: best_at,
    })
}

// ── probe command ───────────────────────────────────────────────────────────

pub fn cmd_probe(ckpt: &Path, data: &Path, task: &str, use_student: bool) -> Result<f64> {
    let loaded = load_checkpoint(ckpt)?;
    let state = restore_state(&loaded)?;
    let enc = if use_student { &state.student } else { &state.teacher };
    let cfg = &loaded.config;
    let mut rng = probe_rng(loaded.seed, loaded.step);

    match task {
        "cls" => {
            let mut train = load_labeled_tsv(data)?;
            let stats = if cfg.normalize { Some(z_normalize(&mut train, None)?) } else { None };
            let test = match sibling_test_path(data) {
                Some(p) => {
                    let mut ts = load_labeled_tsv(&p)?;
                    if let Some(st) = &stats {
                        z_normalize(&mut ts, Some(st))?;
                    }
                    Some(ts)
                }
                None => None,
            };
            let on_test = test.is_some();
            let setup = ProbeSetup::Cls { train, test };
            let acc = run_probe(enc, &setup, cfg.batch_size, &mut rng)?;
            let split = if on_test { "test" } else { "train (no _TEST sibling found)" };
            println!("classification accuracy={acc} on {split}");
            Ok(acc)
        }
        "fc" => {
            let (series, windows) = forecast_probe_material(data, cfg)?;
            let setup = ProbeSetup::Fc {
                series,
                windows,
                horizon: cfg.probe_horizon,
                context: cfg.forecast_context,
            };
            let val_mse = run_probe(enc, &setup, cfg.batch_size, &mut rng)?;
            println!(
                "forecast val mse={val_mse} (context={}, horizon={})",
                cfg.forecast_context, cfg.probe_horizon
            );
            Ok(val_mse)
        }
        other => Err(Error::Usage(format!("unknown probe task {other:?}; expected cls or fc"))),
    }
}

fn forecast_probe_material(data: &Path, cfg: &RunConfig) -> Result<(SeriesSet, ForecastWindows)> {
    let full = load_forecast_csv(data, None)?;
    let mut train_view = train_split_view(&full);
    let mut series = full;
    if cfg.normalize {
        let stats = z_normalize(&mut train_view, None)?;
        z_normalize(&mut series, Some(&stats))?;
    }
    let windows = make_forecast_windows(
        &series,
        cfg.forecast_context,
        &[cfg.probe_horizon],
        FORECAST_SPLIT,
    )?;
    for w in &windows.warnings {
        println!("warning: {w}");
    }
    Ok((series, windows))
}

// ── forecast report ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub baseline_mse: f64,
}

/// Per-horizon test metrics plus their arithmetic mean; the baseline column
/// repeats the last context value across the horizon.
pub fn cmd_forecast(ckpt: &Path, data: &Path, horizons: &[usize]) -> Result<Vec<ForecastRow>> {
    if horizons.is_empty() {
        return Err(Error::Usage("need at least one horizon".into()));
    }
    let loaded = load_checkpoint(ckpt)?;
    let state = restore_state(&loaded)?;
    let cfg = &loaded.config;
    let mut rng = probe_rng(loaded.seed, loaded.step);

    let full = load_forecast_csv(data, None)?;
    let mut train_view = train_split_view(&full);
    let mut series = full;
    if cfg.normalize {
        let stats = z_normalize(&mut train_view, None)?;
        z_normalize(&mut series, Some(&stats))?;
    }
    let ctx = cfg.forecast_context;
    let windows = make_forecast_windows(&series, ctx, horizons, FORECAST_SPLIT)?;
    for w in &windows.warnings {
        println!("warning: {w}");
    }

    let mut rows = Vec::with_capacity(horizons.len());
    println!("horizon    mse         mae         baseline_mse");
    for (hi, &h) in horizons.iter().enumerate() {
        let train_starts = &windows.starts[0][hi];
        let test_starts = &windows.starts[2][hi];
        if train_starts.is_empty() || test_starts.is_empty() {
            return Err(Error::Data(format!(
                "series too short to evaluate horizon {h} (train {} windows, test {})",
                train_starts.len(),
                test_starts.len()
            )));
        }
        let d = state.teacher.cfg.width;
        let x = window_features(&state.teacher, &series, train_starts, ctx, cfg.batch_size, &mut rng)?;
        let y = forecast_targets(&series, train_starts, ctx, h);
        let model = fit_ridge(&x, train_starts.len(), d, &y, h * series.channels, &mut rng)?;
        let tx = window_features(&state.teacher, &series, test_starts, ctx, cfg.batch_size, &mut rng)?;
        let ty = forecast_targets(&series, test_starts, ctx, h);
        let pred = model.predict(&tx, test_starts.len());

        let base = carry_forward_prediction(&series, test_starts, ctx, h);
        let row = ForecastRow {
            horizon: h,
            mse: mse(&pred, &ty),
            mae: mae(&pred, &ty),
            baseline_mse: mse(&base, &ty),
        };
        println!("{:<10} {:<11.6} {:<11.6} {:<11.6}", row.horizon, row.mse, row.mae, row.baseline_mse);
        rows.push(row);
    }
    let n = rows.len() as f64;
    let avg = ForecastRow {
        horizon: 0,
        mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        baseline_mse: rows.iter().map(|r| r.baseline_mse).sum::<f64>() / n,
    };
    println!("{:<10} {:<11.6} {:<11.6} {:<11.6}", "avg", avg.mse, avg.mae, avg.baseline_mse);
    rows.push(avg);
    Ok(rows)
}

/// Last-value-carry-forward: every future step repeats the final context
/// observation, channel by channel.
pub fn carry_forward_prediction(
    series: &SeriesSet,
    starts: &[usize],
    context_len: usize,
    h: usize,
) -> Vec<f64> {
    let c = series.channels;
    let mut out = vec![0.0; starts.len() * h * c];
    for (row, &s) in starts.iter().enumerate() {
        for step in 0..h {
            for ch in 0..c {
                out[row * h * c + step * c + ch] = series.value(0, ch, s + context_len - 1);
            }
        }
    }
    out
}

// ── export ──────────────────────────────────────────────────────────────────

/// Writes max-pooled per-series features as headered CSV (id, f0..f{W-1}).
/// Normalization uses this file's own training statistics, mirroring what a
/// probe on the same file would see.
pub fn cmd_export(ckpt: &Path, data: &Path, out: &Path) -> Result<usize> {
    let loaded = load_checkpoint(ckpt)?;
    let state = restore_state(&loaded)?;
    let cfg = &loaded.config;
    let mut rng = probe_rng(loaded.seed, loaded.step);

    let mut set = match detect_kind(data)? {
        DataKind::Labeled => load_labeled_tsv(data)?,
        DataKind::Forecast => load_forecast_csv(data, None)?,
    };
    if cfg.normalize {
        z_normalize(&mut set, None)?;
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let feats = pooled_features(&state.teacher, &set, &idx, cfg.batch_size, &mut rng)?;
    let w = state.teacher.cfg.width;

    let mut text = String::from("id");
    for j in 0..w {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    for (i, row) in feats.chunks(w).enumerate() {
        text.push_str(&i.to_string());
        for v in row {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    std::fs::write(out, text)?;
    println!("exported {} rows x {w} features to {}", set.len(), out.display());
    Ok(set.len())
}

// ── synthetic data ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub classes: usize,
    pub per_split: usize,
    pub length: usize,
    pub noise: f64,
    pub period: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { classes: 3, per_split: 150, length: 256, noise: 0.3, period: 50.0, seed: 42 }
    }
}

/// `cls` writes `<out>_TRAIN.tsv` and `<out>_TEST.tsv` from two derived
/// seeds; `sine` writes one forecast CSV at `out`.
pub fn cmd_synth(kind: &str, out: &Path, p: &SynthParams) -> Result<Vec<PathBuf>> {
    use rand::SeedableRng as _;
    match kind {
        "cls" => {
            let stem = out.to_string_lossy();
            let stem = stem.strip_suffix(".tsv").unwrap_or(&stem);
            let mut written = Vec::new();
            for (tag, salt) in [("TRAIN", 0u64), ("TEST", 1u64)] {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(salt));
                let set = synth_classification(p.classes, p.per_split, p.length, p.noise, &mut rng)?;
                let path = PathBuf::from(format!("{stem}_{tag}.tsv"));
                write_labeled_tsv(&set, &path)?;
                println!("wrote {}", path.display());
                written.push(path);
            }
            Ok(written)
        }
        "sine" => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(p.seed);
            let set = synth_sine_forecast(p.length, p.period, p.noise, &mut rng)?;
            write_forecast_csv(&set, out)?;
            println!("wrote {}", out.display());
            Ok(vec![out.to_path_buf()])
        }
        other => Err(Error::Usage(format!("unknown synth kind {other:?}; expected cls or sine"))),
    }
}

