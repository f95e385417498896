//! Checkpoint container: a versioned key -> f64-array file.
//!
//! Layout (all integers little-endian):
//!   magic  b"VDCK"
//!   version u32 (currently 1)
//!   entry count u32
//!   entries: name_len u32, name bytes, rank u32, dims u32 each, f64 data
//!
//! Naming scheme inside a model checkpoint:
//!   model.<param>            denoiser weights; cross-attention key/value
//!                            tensors end in ".w_k"/".w_v" so the trainer
//!                            can select them by name
//!   text.base.<idx>.<word>   frozen vocabulary rows, index-ordered
//!   text.token.<idx>.<name>  learnable token rows, registration-ordered
//!   meta.config              denoiser hyperparameters
//!   meta.schedule            forward-process alphas

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserConfig, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::text::TextEncoder;

const MAGIC: &[u8; 4] = b"VDCK";
const VERSION: u32 = 1;

pub fn write_container(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::format(format!("{}: not a checkpoint file", path.display())));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    r.read_exact(&mut u32buf).map_err(io)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(io)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("non-utf8 entry name"))?;
        r.read_exact(&mut u32buf).map_err(io)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(io)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut f64buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut f64buf).map_err(io)?;
            *v = f64::from_le_bytes(f64buf);
        }
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Model-level save/load
// ---------------------------------------------------------------------------

fn config_tensor(c: &DenoiserConfig) -> Tensor {
    Tensor::from_vec(
        &[12],
        vec![
            c.level_channel_counts[0] as f64,
            c.level_channel_counts[1] as f64,
            c.level_channel_counts[2] as f64,
            c.level_channel_counts[3] as f64,
            c.attention_head_count as f64,
            c.text_embedding_width as f64,
            if c.temporal_layers_enabled { 1.0 } else { 0.0 },
            c.base_channels as f64,
            c.time_embedding_width as f64,
            c.attn_logit_gain,
            c.value_gain,
            0.0, // reserved
        ],
    )
    .unwrap()
}

fn config_from_tensor(t: &Tensor) -> Result<DenoiserConfig> {
    if t.numel() != 12 {
        return Err(Error::format("bad meta.config entry"));
    }
    let d = t.data();
    Ok(DenoiserConfig {
        level_channel_counts: [d[0] as usize, d[1] as usize, d[2] as usize, d[3] as usize],
        attention_head_count: d[4] as usize,
        text_embedding_width: d[5] as usize,
        temporal_layers_enabled: d[6] != 0.0,
        base_channels: d[7] as usize,
        time_embedding_width: d[8] as usize,
        attn_logit_gain: d[9],
        value_gain: d[10],
    })
}

pub fn save_checkpoint(
    path: &Path,
    denoiser: &Denoiser,
    text: &TextEncoder,
    schedule: &NoiseSchedule,
) -> Result<()> {
    let mut entries = Vec::new();
    entries.push(("meta.config".to_string(), config_tensor(&denoiser.config)));
    entries.push((
        "meta.schedule".to_string(),
        Tensor::from_vec(&[schedule.timesteps()], schedule.alphas().to_vec())?,
    ));
    for (name, t) in denoiser.params.iter() {
        entries.push((format!("model.{name}"), t.clone()));
    }
    for (idx, word) in text.base_words().iter().enumerate() {
        entries.push((
            format!("text.base.{idx:04}.{word}"),
            text.base_row(idx).clone(),
        ));
    }
    for (idx, name) in text.learnable_names().iter().enumerate() {
        entries.push((
            format!("text.token.{idx:02}.{name}"),
            text.learnable_row(name).expect("registered token").clone(),
        ));
    }
    write_container(path, &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, TextEncoder, NoiseSchedule)> {
    let entries = read_container(path)?;
    let mut config = None;
    let mut schedule = None;
    let mut params = ParamStore::new();
    let mut base: Vec<(usize, String, Tensor)> = Vec::new();
    let mut tokens: Vec<(usize, String, Tensor)> = Vec::new();
    for (name, t) in entries {
        if name == "meta.config" {
            config = Some(config_from_tensor(&t)?);
        } else if name == "meta.schedule" {
            schedule = Some(NoiseSchedule::from_alphas(t.into_data())?);
        } else if let Some(rest) = name.strip_prefix("model.") {
            params.insert(rest, t);
        } else if let Some(rest) = name.strip_prefix("text.base.") {
            let (idx, word) = split_indexed(rest)?;
            base.push((idx, word, t));
        } else if let Some(rest) = name.strip_prefix("text.token.") {
            let (idx, word) = split_indexed(rest)?;
            tokens.push((idx, word, t));
        } else {
            return Err(Error::format(format!("unknown checkpoint entry '{name}'")));
        }
    }
    let config = config.ok_or_else(|| Error::format("checkpoint missing meta.config"))?;
    let schedule = schedule.ok_or_else(|| Error::format("checkpoint missing meta.schedule"))?;
    base.sort_by_key(|(i, _, _)| *i);
    tokens.sort_by_key(|(i, _, _)| *i);
    let text = TextEncoder::from_parts(
        config.text_embedding_width,
        base.into_iter().map(|(_, w, t)| (w, t)).collect(),
        tokens.into_iter().map(|(_, w, t)| (w, t)).collect(),
    )?;
    let denoiser = Denoiser { config, params };
    // Guard against truncated checkpoints: rebuild-from-scratch must agree
    // on the parameter name set.
    let fresh = Denoiser::new(denoiser.config.clone(), 0)?;
    if fresh.params.names() != denoiser.params.names() {
        return Err(Error::format("checkpoint parameter set does not match its config"));
    }
    Ok((denoiser, text, schedule))
}

fn split_indexed(rest: &str) -> Result<(usize, String)> {
    let (idx, word) = rest
        .split_once('.')
        .ok_or_else(|| Error::format(format!("bad indexed entry '{rest}'")))?;
    let idx = idx
        .parse::<usize>()
        .map_err(|_| Error::format(format!("bad index in '{rest}'")))?;
    Ok((idx, word.to_string()))
}
