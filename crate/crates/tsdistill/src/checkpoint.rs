//! Checkpoints: a human-readable header (versioned magic line, counters,
//! the rng cursor, a full config snapshot, an array directory) followed by
//! raw little-endian f32 data. Saving and loading are bitwise inverses, and
//! a restored state replays the exact training trajectory because the rng
//! word position is part of the file.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use ndgrad::{AdamState, Tensor};
use rand_core::SeedableRng;

use crate::config::RunConfig;
use crate::distill::{TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::error::{Error, Result};

const MAGIC: &str = "tsdistill-ckpt v1";

/// Everything a checkpoint file holds, decoded but not yet wired into a
/// training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub adam_t: u64,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub rng_stream: u64,
    pub in_channels: usize,
    pub total_steps: u64,
    pub config: RunConfig,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

// ── array collection ────────────────────────────────────────────────────────

fn tensor_entry(name: &str, t: &Tensor<f32>) -> (String, Vec<usize>, Vec<f32>) {
    (name.to_string(), t.shape().to_vec(), t.data().clone())
}

fn collect_arrays(state: &TrainState<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut arrays = Vec::new();
    for (name, t) in state.student.named_parameters() {
        arrays.push(tensor_entry(&format!("student.{name}"), &t));
    }
    arrays.push(tensor_entry("student.mask_embedding", &state.mask_emb));
    for (name, bn) in state.student.named_bn() {
        let r = bn.running.borrow();
        arrays.push((format!("student.{name}.running_mean"), vec![r.mean.len()], r.mean.clone()));
        arrays.push((format!("student.{name}.running_var"), vec![r.var.len()], r.var.clone()));
    }
    for (name, t) in state.teacher.named_parameters() {
        arrays.push(tensor_entry(&format!("teacher.{name}"), &t));
    }
    for (name, bn) in state.teacher.named_bn() {
        let r = bn.running.borrow();
        arrays.push((format!("teacher.{name}.running_mean"), vec![r.mean.len()], r.mean.clone()));
        arrays.push((format!("teacher.{name}.running_var"), vec![r.var.len()], r.var.clone()));
    }
    for (i, m) in state.adam.m().iter().enumerate() {
        arrays.push((format!("adam.m.{i}"), vec![m.len()], m.clone()));
    }
    for (i, v) in state.adam.v().iter().enumerate() {
        arrays.push((format!("adam.v.{i}"), vec![v.len()], v.clone()));
    }
    arrays
}

// ── save ────────────────────────────────────────────────────────────────────

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    state: &TrainState<f32>,
    cfg: &RunConfig,
    in_channels: usize,
    seed: u64,
) -> Result<()> {
    let arrays = collect_arrays(state);
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("step = {}\n", state.step));
    header.push_str(&format!("adam_t = {}\n", state.adam.t()));
    header.push_str(&format!("seed = {seed}\n"));
    header.push_str(&format!("rng_word_pos = {}\n", state.rng.get_word_pos()));
    header.push_str(&format!("rng_stream = {}\n", state.rng.get_stream()));
    header.push_str(&format!("in_channels = {in_channels}\n"));
    header.push_str(&format!("total_steps = {}\n", state.cfg.total_steps));
    header.push_str("config_begin\n");
    header.push_str(&cfg.emit());
    header.push_str("config_end\n");
    header.push_str(&format!("arrays = {}\n", arrays.len()));
    for (name, shape, _) in &arrays {
        header.push_str(name);
        header.push_str(&format!(" {}", shape.len()));
        for d in shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push_str("end_header\n");

    let mut out = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(&mut out);
    w.write_all(header.as_bytes())?;
    for (_, _, data) in &arrays {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

// ── load ────────────────────────────────────────────────────────────────────

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.as_ref().display())))?;
    let marker = b"end_header\n";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| ckpt_err("no header terminator; not a checkpoint or truncated"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| ckpt_err("header is not valid utf-8"))?;
    let mut data = &bytes[header_end + marker.len()..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(ckpt_err(format!(
            "bad magic {magic:?}; this reader understands {MAGIC:?}"
        )));
    }

    fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
        let line = line.ok_or_else(|| ckpt_err(format!("missing field {key}")))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ckpt_err(format!("malformed field line {line:?}")))?;
        if k.trim() != key {
            return Err(ckpt_err(format!("expected field {key}, found {}", k.trim())));
        }
        Ok(v.trim())
    }
    fn num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
        v.parse()
            .map_err(|_| ckpt_err(format!("field {key} holds unreadable value {v:?}")))
    }

    let step: u64 = num(field(lines.next(), "step")?, "step")?;
    let adam_t: u64 = num(field(lines.next(), "adam_t")?, "adam_t")?;
    let seed: u64 = num(field(lines.next(), "seed")?, "seed")?;
    let rng_word_pos: u128 = num(field(lines.next(), "rng_word_pos")?, "rng_word_pos")?;
    let rng_stream: u64 = num(field(lines.next(), "rng_stream")?, "rng_stream")?;
    let in_channels: usize = num(field(lines.next(), "in_channels")?, "in_channels")?;
    let total_steps: u64 = num(field(lines.next(), "total_steps")?, "total_steps")?;

    if lines.next() != Some("config_begin") {
        return Err(ckpt_err("missing config block"));
    }
    let mut config_text = String::new();
    loop {
        match lines.next() {
            Some("config_end") => break,
            Some(l) => {
                config_text.push_str(l);
                config_text.push('\n');
            }
            None => return Err(ckpt_err("config block never ends")),
        }
    }
    let config = RunConfig::parse(&config_text)?;

    let count: usize = num(field(lines.next(), "arrays")?, "arrays")?;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| ckpt_err("array directory truncated"))?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| ckpt_err("array entry missing a name"))?
            .to_string();
        let ndim: usize = num(parts.next().unwrap_or(""), "array ndim")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(num::<usize>(parts.next().unwrap_or(""), "array dim")?);
        }
        let numel: usize = shape.iter().product();
        if data.len() < numel * 4 {
            return Err(ckpt_err(format!(
                "array {name} wants {} bytes, file has {}",
                numel * 4,
                data.len()
            )));
        }
        let (chunk, rest) = data.split_at(numel * 4);
        data = rest;
        let values: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push((name, shape, values));
    }
    if !data.is_empty() {
        return Err(ckpt_err(format!("{} trailing bytes after the last array", data.len())));
    }

    Ok(Checkpoint {
        step,
        adam_t,
        seed,
        rng_word_pos,
        rng_stream,
        in_channels,
        total_steps,
        config,
        arrays,
    })
}

// ── state reconstruction ────────────────────────────────────────────────────

/// Rebuilds a training state that continues exactly where the saved one
/// stopped: parameters, teacher, optimizer moments, step counter, and the
/// rng cursor all restored.
pub fn restore_state(ckpt: &Checkpoint) -> Result<TrainState<f32>> {
    ckpt.config.validate()?;
    let enc_cfg = ckpt.config.encoder_config(ckpt.in_channels);
    let dis_cfg = ckpt.config.distill_config(ckpt.total_steps);
    let mut state = TrainState::new(enc_cfg, dis_cfg, ckpt.seed)?;

    let mut by_name: HashMap<&str, (&[usize], &[f32])> = HashMap::new();
    for (name, shape, data) in &ckpt.arrays {
        if by_name.insert(name.as_str(), (shape, data)).is_some() {
            return Err(ckpt_err(format!("array {name} appears twice")));
        }
    }
    let mut used = 0usize;

    let mut fill_tensor = |name: String, t: &Tensor<f32>| -> Result<()> {
        let (shape, data) = by_name
            .get(name.as_str())
            .ok_or_else(|| ckpt_err(format!("checkpoint lacks array {name}")))?;
        if *shape != t.shape() {
            return Err(ckpt_err(format!(
                "array {name} has shape {shape:?}, model wants {:?}",
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(data);
        used += 1;
        Ok(())
    };
    for (name, t) in state.student.named_parameters() {
        fill_tensor(format!("student.{name}"), &t)?;
    }
    fill_tensor("student.mask_embedding".into(), &state.mask_emb)?;
    for (name, t) in state.teacher.named_parameters() {
        fill_tensor(format!("teacher.{name}"), &t)?;
    }

    let mut fill_buffer = |name: String, buf: &mut Vec<f32>| -> Result<()> {
        let (shape, data) = by_name
            .get(name.as_str())
            .ok_or_else(|| ckpt_err(format!("checkpoint lacks array {name}")))?;
        if shape.len() != 1 || shape[0] != buf.len() {
            return Err(ckpt_err(format!(
                "array {name} has shape {shape:?}, model wants [{}]",
                buf.len()
            )));
        }
        buf.copy_from_slice(data);
        used += 1;
        Ok(())
    };
    for (name, bn) in state.student.named_bn() {
        let mut r = bn.running.borrow_mut();
        fill_buffer(format!("student.{name}.running_mean"), &mut r.mean)?;
        fill_buffer(format!("student.{name}.running_var"), &mut r.var)?;
    }
    for (name, bn) in state.teacher.named_bn() {
        let mut r = bn.running.borrow_mut();
        fill_buffer(format!("teacher.{name}.running_mean"), &mut r.mean)?;
        fill_buffer(format!("teacher.{name}.running_var"), &mut r.var)?;
    }

    let n_trainable = state.trainable().len();
    let mut grab_moments = |prefix: &str| -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(n_trainable);
        for i in 0..n_trainable {
            let name = format!("adam.{prefix}.{i}");
            let (_, data) = by_name
                .get(name.as_str())
                .ok_or_else(|| ckpt_err(format!("checkpoint lacks array {name}")))?;
            out.push(data.to_vec());
            used += 1;
        }
        Ok(out)
    };
    let m = grab_moments("m")?;
    let v = grab_moments("v")?;
    state.adam = AdamState::from_parts(ckpt.adam_t, m, v, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;

    if used != ckpt.arrays.len() {
        return Err(ckpt_err(format!(
            "checkpoint carries {} arrays, model consumed {used}",
            ckpt.arrays.len()
        )));
    }

    state.step = ckpt.step;
    state.rng = rand_chacha::ChaCha8Rng::seed_from_u64(ckpt.seed);
    state.rng.set_stream(ckpt.rng_stream);
    state.rng.set_word_pos(ckpt.rng_word_pos);
    Ok(state)
}

/// FNV-1a 64-bit digest, printed after runs so two checkpoints can be
/// compared at a glance.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_crop;
    use crate::data::synth_classification;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.width = 8;
        c.num_blocks = 2;
        c.target_layers = 2;
        c.total_steps = 50;
        c.batch_size = 4;
        c.crop_window = 32;
        c
    }

    fn fresh_state(cfg: &RunConfig) -> TrainState<f32> {
        TrainState::new(
            cfg.encoder_config(1),
            cfg.distill_config(cfg.total_steps),
            cfg.seed,
        )
        .unwrap()
    }

    fn run_steps(state: &mut TrainState<f32>, set: &crate::data::SeriesSet, n: usize) {
        for _ in 0..n {
            let idx = state.sample_indices(set.len(), 4);
            let batch = random_crop(set, &idx, 32, &mut state.rng).unwrap();
            state.train_step(&batch).unwrap();
        }
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let mut data_rng = ChaCha8Rng::seed_from_u64(1);
        let set = synth_classification(2, 8, 48, 0.2, &mut data_rng).unwrap();
        let mut state = fresh_state(&cfg);
        run_steps(&mut state, &set, 3);

        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &state, &cfg, 1, cfg.seed).unwrap();
        let ckpt = load_checkpoint(&p).unwrap();
        assert_eq!(ckpt.step, 3);
        assert_eq!(ckpt.adam_t, state.adam.t());
        assert_eq!(ckpt.rng_word_pos, state.rng.get_word_pos());
        assert_eq!(ckpt.config, cfg, "config snapshot survives");

        let restored = restore_state(&ckpt).unwrap();
        for ((_, a), (_, b)) in state
            .student
            .named_parameters()
            .iter()
            .zip(restored.student.named_parameters())
        {
            assert_eq!(*a.data(), *b.data(), "student params bitwise");
        }
        assert_eq!(*state.mask_emb.data(), *restored.mask_emb.data());
        assert_eq!(state.adam.m(), restored.adam.m(), "first moments bitwise");
        assert_eq!(state.adam.v(), restored.adam.v(), "second moments bitwise");
        assert_eq!(state.rng.get_word_pos(), restored.rng.get_word_pos());

        // and the file itself reproduces byte for byte
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p2, &restored, &cfg, 1, cfg.seed).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(&p2).unwrap(),
            "save(load(x)) == x"
        );
    }

    #[test]
    fn resumed_training_matches_an_unbroken_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let mut data_rng = ChaCha8Rng::seed_from_u64(2);
        let set = synth_classification(2, 8, 48, 0.2, &mut data_rng).unwrap();

        let mut straight = fresh_state(&cfg);
        run_steps(&mut straight, &set, 6);

        let mut broken = fresh_state(&cfg);
        run_steps(&mut broken, &set, 3);
        let p = dir.path().join("mid.ckpt");
        save_checkpoint(&p, &broken, &cfg, 1, cfg.seed).unwrap();
        let mut resumed = restore_state(&load_checkpoint(&p).unwrap()).unwrap();
        run_steps(&mut resumed, &set, 3);

        for ((_, a), (_, b)) in straight
            .student
            .named_parameters()
            .iter()
            .zip(resumed.student.named_parameters())
        {
            assert_eq!(*a.data(), *b.data(), "resume replays the same trajectory");
        }
        for ((_, ta), (_, tb)) in straight.teacher.named_bn().iter().zip(resumed.teacher.named_bn())
        {
            assert_eq!(ta.running.borrow().mean, tb.running.borrow().mean);
            assert_eq!(ta.running.borrow().var, tb.running.borrow().var);
        }
        assert_eq!(straight.step, resumed.step);
        assert_eq!(
            straight.rng.get_word_pos(),
            resumed.rng.get_word_pos(),
            "rng cursors agree after the same total work"
        );
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"not-a-checkpoint v9\nend_header\n").unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let mut data_rng = ChaCha8Rng::seed_from_u64(3);
        let set = synth_classification(2, 8, 48, 0.2, &mut data_rng).unwrap();
        let mut state = fresh_state(&cfg);
        run_steps(&mut state, &set, 1);
        let p = dir.path().join("full.ckpt");
        save_checkpoint(&p, &state, &cfg, 1, cfg.seed).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
        assert!(load_checkpoint(&cut).is_err(), "missing tail bytes detected");
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325, "offset basis");
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c, "known vector");
        assert_ne!(fnv1a64(b"ab"), fnv1a64(b"ba"), "order matters");
    }
}
