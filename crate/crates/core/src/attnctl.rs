//! Guidance masks and attention-map supervision.
//!
//! Cross-attention maps captured during training are pulled toward 1 inside
//! each subject's region and toward a small non-positive value eta outside
//! it. The squared-norm convention here is the spatial MEAN of squared
//! differences (not the sum), so loss magnitudes are resolution-independent
//! and the attention weight transfers across level choices; sum-mode would
//! be a one-flag ablation in `attn_loss_terms`.

use crate::compose::Mask;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Resolution tier of a cross-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    L1,
    L2,
    L3,
    L4,
}

pub const ALL_LEVELS: [Level; 4] = [Level::L1, Level::L2, Level::L3, Level::L4];

impl Level {
    /// 1-based index.
    pub fn index(self) -> usize {
        match self {
            Level::L1 => 1,
            Level::L2 => 2,
            Level::L3 => 3,
            Level::L4 => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        match s.trim() {
            "l1" | "L1" => Ok(Level::L1),
            "l2" | "L2" => Ok(Level::L2),
            "l3" | "L3" => Ok(Level::L3),
            "l4" | "L4" => Ok(Level::L4),
            other => Err(Error::invalid(format!("unknown level '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::L1 => "l1",
            Level::L2 => "l2",
            Level::L3 => "l3",
            Level::L4 => "l4",
        }
    }
}

/// Attention-map size for a full-resolution video of the given size:
/// input / 2^(level + 2), i.e. 1/8, 1/16, 1/32, 1/64 — the factor-8 latent
/// encoding followed by one halving per level. For 576x320 this yields
/// 72x40, 36x20, 18x10, 9x5.
pub fn level_size(input_h: usize, input_w: usize, level: Level) -> Result<(usize, usize)> {
    let div = 1usize << (level.index() + 2);
    if input_h % div != 0 || input_w % div != 0 {
        return Err(Error::invalid(format!(
            "input {input_h}x{input_w} not divisible by {div} at {}",
            level.name()
        )));
    }
    Ok((input_h / div, input_w / div))
}

/// Area-average pooling of a binary mask to an exact target size, then
/// binarization at threshold 0.5. The pooling ratio must be integral.
pub fn pool_mask_to(mask: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if target_h == 0 || target_w == 0 || h % target_h != 0 || w % target_w != 0 {
        return Err(Error::invalid(format!(
            "cannot pool {h}x{w} mask to {target_h}x{target_w}"
        )));
    }
    let (fy, fx) = (h / target_h, w / target_w);
    let norm = (fy * fx) as f64;
    let mut out = vec![0.0; target_h * target_w];
    for ty in 0..target_h {
        for tx in 0..target_w {
            let mut acc = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    acc += mask.data()[(ty * fy + dy) * w + (tx * fx + dx)];
                }
            }
            out[ty * target_w + tx] = if acc / norm > 0.5 { 1.0 } else { 0.0 };
        }
    }
    Tensor::from_vec(&[target_h, target_w], out)
}

/// Downsample a ground-truth mask to a level's map size, where the mask is
/// at the full video resolution `input` (paper scale: 576x320 -> 18x10 at
/// level 3).
pub fn downsample_mask(mask: &Tensor, level: Level, input: (usize, usize)) -> Result<Tensor> {
    if mask.shape() != [input.0, input.1] {
        return Err(Error::invalid(format!(
            "mask shape {:?} does not match stated input {}x{}",
            mask.shape(),
            input.0,
            input.1
        )));
    }
    let (th, tw) = level_size(input.0, input.1, level)?;
    pool_mask_to(mask, th, tw)
}

// ---------------------------------------------------------------------------
// Guidance masks
// ---------------------------------------------------------------------------

/// Supervision target for one subject's attention map: `positive` is the
/// 0/1 subject-region mask; `combined` keeps 1 inside and eta outside.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMask {
    pub positive: Tensor,
    pub combined: Tensor,
    pub eta: f64,
}

pub const DEFAULT_ETA: f64 = -1e-8;

/// Build the positive/combined pair from a binary mask.
pub fn build_guidance_mask(subject_mask: &Tensor, eta: f64) -> Result<GuidanceMask> {
    if subject_mask.shape().len() != 2 {
        return Err(Error::invalid("guidance mask must be 2-D"));
    }
    if subject_mask.data().iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("empty subject mask"));
    }
    if !(eta <= 0.0) {
        return Err(Error::invalid(format!("eta must be <= 0, got {eta}")));
    }
    if eta.abs() >= 1.0 {
        return Err(Error::invalid(format!("|eta| must be << 1, got {eta}")));
    }
    let positive = subject_mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let combined = positive.map(|v| if v == 1.0 { 1.0 } else { eta });
    Ok(GuidanceMask { positive, combined, eta })
}

impl GuidanceMask {
    /// Pool to a smaller spatial size, preserving eta semantics.
    pub fn pooled_to(&self, h: usize, w: usize) -> Result<GuidanceMask> {
        let pos = pool_mask_to(&self.positive, h, w)?;
        build_guidance_mask(&pos, self.eta)
    }

    pub fn from_binary(mask: &Mask, eta: f64) -> Result<GuidanceMask> {
        build_guidance_mask(&mask.to_tensor(), eta)
    }
}

// ---------------------------------------------------------------------------
// Attention maps and losses
// ---------------------------------------------------------------------------

/// Per-token attention maps captured at one level, head- and frame-averaged,
/// in subject order.
#[derive(Debug, Clone)]
pub struct AttentionMapSet {
    pub level: Level,
    pub per_token_maps: Vec<Tensor>,
}

fn check_pair(map: &Tensor, target: &Tensor) -> Result<()> {
    if map.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "attention map shape {:?} vs mask shape {:?}",
            map.shape(),
            target.shape()
        )));
    }
    Ok(())
}

fn batched_map_loss(
    maps: &[AttentionMapSet],
    masks: &[Vec<GuidanceMask>],
    target: impl Fn(&GuidanceMask) -> Tensor,
) -> Result<f64> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(Error::invalid("batch sizes differ or are zero"));
    }
    let b = maps.len() as f64;
    let mut total = 0.0;
    for (set, mask_set) in maps.iter().zip(masks) {
        if set.per_token_maps.len() != mask_set.len() || mask_set.is_empty() {
            return Err(Error::invalid("subject counts differ or are zero"));
        }
        let n = mask_set.len() as f64;
        let mut per_sample = 0.0;
        for (map, gm) in set.per_token_maps.iter().zip(mask_set) {
            let t = target(gm);
            check_pair(map, &t)?;
            per_sample += map.mse(&t);
        }
        total += per_sample / n;
    }
    Ok(total / b)
}

/// Positive attention loss: (1/B) sum_i (1/N) sum_j mean((A_ij - Mp_ij)^2),
/// with the plain 0/1 mask as target.
pub fn attn_loss_pos(maps: &[AttentionMapSet], masks: &[Vec<GuidanceMask>]) -> Result<f64> {
    batched_map_loss(maps, masks, |gm| gm.positive.clone())
}

/// Positive + negative attention loss: the target keeps 1 inside the
/// subject and eta outside it.
pub fn attn_loss_pos_neg(maps: &[AttentionMapSet], masks: &[Vec<GuidanceMask>]) -> Result<f64> {
    batched_map_loss(maps, masks, |gm| gm.combined.clone())
}

/// Which attention supervision terms are active; the two ablation rows
/// drop one side each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionLossMode {
    /// Full target: 1 inside, eta outside.
    PosNeg,
    /// "w/o neg. attn.": 0/1 mask target.
    PosOnly,
    /// "w/o pos. attn.": only outside-region residuals toward eta count.
    NegOnly,
    /// Attention supervision disabled.
    Off,
}

impl AttentionLossMode {
    /// Target tensor and optional 0/1 residual weight for one mask.
    pub fn target_and_weight(self, gm: &GuidanceMask) -> Option<(Tensor, Option<Tensor>)> {
        match self {
            AttentionLossMode::PosNeg => Some((gm.combined.clone(), None)),
            AttentionLossMode::PosOnly => Some((gm.positive.clone(), None)),
            AttentionLossMode::NegOnly => {
                let outside = gm.positive.map(|v| 1.0 - v);
                Some((gm.combined.clone(), Some(outside)))
            }
            AttentionLossMode::Off => None,
        }
    }
}

/// Differentiable batched attention loss on the tape. `maps` holds one Var
/// per (sample, subject) at the supervised level, in subject order. Returns
/// None when the mode is Off.
pub fn attn_loss_on_tape(
    tape: &mut Tape,
    maps: &[Vec<Var>],
    masks: &[Vec<GuidanceMask>],
    mode: AttentionLossMode,
) -> Result<Option<Var>> {
    if mode == AttentionLossMode::Off {
        return Ok(None);
    }
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(Error::invalid("batch sizes differ or are zero"));
    }
    let b = maps.len();
    let mut acc: Option<Var> = None;
    for (map_vars, mask_set) in maps.iter().zip(masks) {
        if map_vars.len() != mask_set.len() || mask_set.is_empty() {
            return Err(Error::invalid("subject counts differ or are zero"));
        }
        let n = mask_set.len();
        for (&map, gm) in map_vars.iter().zip(mask_set) {
            let (target, weight) = mode.target_and_weight(gm).expect("mode checked above");
            check_pair(tape.val(map), &target)?;
            let tv = tape.value(target);
            let mut diff = tape.sub(map, tv);
            if let Some(wt) = weight {
                let wv = tape.value(wt);
                diff = tape.mul(diff, wv);
            }
            let sq = tape.mul(diff, diff);
            let mean = tape.mean_all(sq);
            let scaled = tape.scale(mean, 1.0 / (b as f64 * n as f64));
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled),
                None => scaled,
            });
        }
    }
    Ok(acc)
}
