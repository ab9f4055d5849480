//! Low-rank adapter lifecycle: creation, the additive delta path, merging
//! into base weights and back out, and a fixed binary checkpoint format.
//!
//! An adapter adds s * B * A to a frozen base projection W, where
//! B is d_out x r, A is r x d_in and s is either alpha (raw) or alpha / r.
//! B starts at zero so a fresh adapter changes nothing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DecoderModel;
use crate::rng::Rng;
use crate::tensor::{matmul, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLRA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// s = alpha, the update rule read literally.
    RawAlpha,
    /// s = alpha / r, the conventional scaling.
    AlphaOverRank,
}

impl ScalingMode {
    fn to_byte(self) -> u8 {
        match self {
            ScalingMode::RawAlpha => 0,
            ScalingMode::AlphaOverRank => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ScalingMode::RawAlpha),
            1 => Ok(ScalingMode::AlphaOverRank),
            _ => Err(Error::Format(format!("unknown scaling mode byte {b}"))),
        }
    }
}

/// One low-rank adapter attached to a named projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub b: Tensor,
    pub a: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub scaling_mode: ScalingMode,
}

impl LoraAdapter {
    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn effective_scale(&self) -> f64 {
        match self.scaling_mode {
            ScalingMode::RawAlpha => self.alpha,
            ScalingMode::AlphaOverRank => self.alpha / self.rank as f64,
        }
    }

    /// Trainable parameters: r * (d_in + d_out).
    pub fn num_params(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }
}

/// Gradients for one adapter's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub d_b: Tensor,
    pub d_a: Tensor,
}

/// All adapters of a run, keyed by target path ("layer.{i}.{name}").
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoraSet {
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub merged: bool,
}

impl LoraSet {
    pub fn num_trainable_params(&self) -> usize {
        self.adapters.values().map(LoraAdapter::num_params).sum()
    }
}

/// Named sets of projection targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPreset {
    AttentionMlp,
    MlpOnly,
    AttentionOnly,
}

impl TargetPreset {
    pub fn projection_names(self) -> &'static [&'static str] {
        match self {
            TargetPreset::AttentionMlp => &["q_proj", "v_proj", "down_proj", "up_proj"],
            TargetPreset::MlpOnly => &["gate_proj", "up_proj", "down_proj"],
            TargetPreset::AttentionOnly => &["q_proj", "k_proj", "v_proj", "o_proj"],
        }
    }
}

/// One adapter per targeted projection per layer: A gaussian(0, 0.02), B zero.
pub fn init_adapters(
    model: &DecoderModel,
    preset: TargetPreset,
    rank: usize,
    alpha: f64,
    dropout_p: f64,
    scaling_mode: ScalingMode,
    rng: &mut Rng,
) -> Result<LoraSet> {
    if rank == 0 {
        return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
    }
    let mut adapters = BTreeMap::new();
    for layer in 0..model.config.n_layers {
        for name in preset.projection_names() {
            let target = format!("layer.{layer}.{name}");
            let (d_out, d_in) = model.projection_dims(&target)?;
            if rank > d_out.min(d_in) {
                return Err(Error::InvalidArgument(format!(
                    "rank {rank} exceeds min dimension of {target} ({d_out}x{d_in})"
                )));
            }
            let adapter = LoraAdapter {
                target: target.clone(),
                b: Tensor::zeros(&[d_out, rank]),
                a: Tensor::randn(&[rank, d_in], 0.02, rng),
                rank,
                alpha,
                dropout_p,
                scaling_mode,
            };
            adapters.insert(target, adapter);
        }
    }
    Ok(LoraSet {
        adapters,
        merged: false,
    })
}

/// Cached intermediates of one delta forward, enough for an exact backward.
#[derive(Debug, Clone)]
pub struct DeltaCache {
    /// Input after dropout (identity outside training).
    pub x_dropped: Tensor,
    /// A applied to the dropped input: rows x r.
    pub ax: Tensor,
    /// Per-entry dropout scale (1/(1-p) kept, 0.0 dropped); None when inactive.
    pub mask: Option<Tensor>,
}

/// s * B * (A * dropout(x)); x has one position per row.
pub fn delta_forward(
    adapter: &LoraAdapter,
    x: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    Ok(delta_forward_cached(adapter, x, training, rng)?.0)
}

pub fn delta_forward_cached(
    adapter: &LoraAdapter,
    x: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<(Tensor, DeltaCache)> {
    if x.cols() != adapter.d_in() {
        return Err(Error::ShapeMismatch {
            context: "delta_forward",
            lhs: x.shape().to_vec(),
            rhs: adapter.a.shape().to_vec(),
        });
    }
    let (x_dropped, mask) = if training && adapter.dropout_p > 0.0 {
        // Inverted dropout: kept entries scale by 1/(1-p).
        let keep = 1.0 - adapter.dropout_p;
        let mut mask = Tensor::zeros(x.shape());
        for m in mask.data_mut() {
            if rng.next_f64() >= adapter.dropout_p {
                *m = 1.0 / keep;
            }
        }
        let mut xd = x.clone();
        for (v, m) in xd.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        (xd, Some(mask))
    } else {
        (x.clone(), None)
    };
    let ax = matmul(&x_dropped, &adapter.a.transpose())?;
    let mut out = matmul(&ax, &adapter.b.transpose())?;
    out.scale(adapter.effective_scale());
    Ok((
        out,
        DeltaCache {
            x_dropped,
            ax,
            mask,
        },
    ))
}

/// Backward through the delta path. Returns (dx contribution, factor grads).
pub fn delta_backward(
    adapter: &LoraAdapter,
    cache: &DeltaCache,
    dy: &Tensor,
) -> Result<(Tensor, AdapterGrads)> {
    let s = adapter.effective_scale();
    // d(ax) = s * dy * B
    let mut dax = matmul(dy, &adapter.b)?;
    dax.scale(s);
    // dB = s * dy^T * ax
    let mut d_b = matmul(&dy.transpose(), &cache.ax)?;
    d_b.scale(s);
    // dA = dax^T * x_dropped
    let d_a = matmul(&dax.transpose(), &cache.x_dropped)?;
    // dx = (dax * A) through the dropout mask
    let mut dx = matmul(&dax, &adapter.a)?;
    if let Some(mask) = &cache.mask {
        for (v, m) in dx.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
    }
    Ok((dx, AdapterGrads { d_b, d_a }))
}

/// Fold every adapter's delta into the base weights: W <- W + s * B * A.
pub fn merge(model: &mut DecoderModel, lora_set: &mut LoraSet) -> Result<()> {
    if lora_set.merged {
        return Err(Error::State("adapters are already merged".into()));
    }
    apply_deltas(model, lora_set, 1.0)?;
    lora_set.merged = true;
    Ok(())
}

/// Subtract the identical deltas, restoring the base weights.
pub fn unmerge(model: &mut DecoderModel, lora_set: &mut LoraSet) -> Result<()> {
    if !lora_set.merged {
        return Err(Error::State("adapters are not merged".into()));
    }
    apply_deltas(model, lora_set, -1.0)?;
    lora_set.merged = false;
    Ok(())
}

fn apply_deltas(model: &mut DecoderModel, lora_set: &LoraSet, sign: f64) -> Result<()> {
    for adapter in lora_set.adapters.values() {
        let delta = matmul(&adapter.b, &adapter.a)?;
        let w = model.projection_mut(&adapter.target)?;
        w.add_scaled(&delta, sign * adapter.effective_scale())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
// magic "SLRA", u32 version, u32 adapter count; per adapter:
// u32 path length + UTF-8 path, u32 r, f64 alpha, f64 dropout_p,
// u8 scaling_mode, u32 d_out, u32 d_in, then B then A as little-endian f64
// row-major.
// ---------------------------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    for &v in t.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f64(r)?);
    }
    Ok(Tensor::from_vec(shape, data).expect("shape/len consistent by construction"))
}

pub fn save_checkpoint(lora_set: &LoraSet, path: &Path) -> Result<()> {
    if lora_set.merged {
        return Err(Error::State(
            "refusing to checkpoint a merged adapter set".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u32(&mut w, lora_set.adapters.len() as u32)?;
    for adapter in lora_set.adapters.values() {
        let path_bytes = adapter.target.as_bytes();
        write_u32(&mut w, path_bytes.len() as u32)?;
        w.write_all(path_bytes)?;
        write_u32(&mut w, adapter.rank as u32)?;
        write_f64(&mut w, adapter.alpha)?;
        write_f64(&mut w, adapter.dropout_p)?;
        w.write_all(&[adapter.scaling_mode.to_byte()])?;
        write_u32(&mut w, adapter.d_out() as u32)?;
        write_u32(&mut w, adapter.d_in() as u32)?;
        write_tensor(&mut w, &adapter.b)?;
        write_tensor(&mut w, &adapter.a)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoraSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut adapters = BTreeMap::new();
    for _ in 0..count {
        let path_len = read_u32(&mut r)? as usize;
        let mut path_bytes = vec![0u8; path_len];
        read_exact(&mut r, &mut path_bytes)?;
        let target = String::from_utf8(path_bytes)
            .map_err(|e| Error::Format(format!("non-UTF-8 target path: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let alpha = read_f64(&mut r)?;
        let dropout_p = read_f64(&mut r)?;
        let mut mode = [0u8; 1];
        read_exact(&mut r, &mut mode)?;
        let scaling_mode = ScalingMode::from_byte(mode[0])?;
        let d_out = read_u32(&mut r)? as usize;
        let d_in = read_u32(&mut r)? as usize;
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::Format(format!(
                "adapter {target}: rank {rank} inconsistent with {d_out}x{d_in}"
            )));
        }
        let b = read_tensor(&mut r, &[d_out, rank])?;
        let a = read_tensor(&mut r, &[rank, d_in])?;
        if adapters
            .insert(
                target.clone(),
                LoraAdapter {
                    target: target.clone(),
                    b,
                    a,
                    rank,
                    alpha,
                    dropout_p,
                    scaling_mode,
                },
            )
            .is_some()
        {
            return Err(Error::Format(format!("duplicate target path {target}")));
        }
    }
    // Anything left over means the writer and reader disagree on the layout.
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last adapter".into()));
    }
    Ok(LoraSet {
        adapters,
        merged: false,
    })
}
