//! Fine-tuning loop: composed objective (reconstruction + weighted
//! attention supervision + weighted prior preservation), restriction of
//! updates to cross-attention key/value weights and learnable token rows,
//! and decoupled-weight-decay Adam.

use std::collections::BTreeMap;

use crate::attnctl::{attn_loss_on_tape, AttentionLossMode, GuidanceMask, Level};
use crate::compose::{
    augment, extend_to_video, AugmentSpec, ClassPriorSample, CompositeSample, WHITE,
};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::model::{AttentionTap, Denoiser, ParamVars};
use crate::rng::Rng;
use crate::schedule::{add_noise, NoiseSchedule, ScheduleKind};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, TokenId};



// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Ablation switches matching the component-analysis rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Train on single-subject samples only ("w/o concat").
    pub no_concat: bool,
    /// Alternate single-subject and composite batches
    /// ("both single and concat").
    pub mixed_single_concat: bool,
    /// Drop the inside-region target-1 term ("w/o pos. attn.").
    pub no_pos_attn: bool,
    /// Drop the outside-region eta term ("w/o neg. attn.").
    pub no_neg_attn: bool,
    /// Keep subject backgrounds ("w/o remove bg"); consumed at dataset
    /// build time.
    pub no_background_removal: bool,
}

impl AblationFlags {
    pub fn attention_mode(&self) -> AttentionLossMode {
        match (self.no_pos_attn, self.no_neg_attn) {
            (false, false) => AttentionLossMode::PosNeg,
            (false, true) => AttentionLossMode::PosOnly,
            (true, false) => AttentionLossMode::NegOnly,
            (true, true) => AttentionLossMode::Off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Attention-loss weight.
    pub alpha: f64,
    /// Prior-preservation weight.
    pub beta: f64,
    /// Outside-subject attention target.
    pub eta: f64,
    /// Levels whose maps are supervised.
    pub levels: Vec<Level>,
    pub prior_image_count: usize,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub augment: bool,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 2,
            learning_rate: 4e-5,
            weight_decay: 1e-2,
            alpha: 0.2,
            beta: 1.0,
            eta: -1e-8,
            levels: vec![Level::L3],
            prior_image_count: 200,
            timesteps: 1000,
            schedule: ScheduleKind::LinearBeta,
            augment: true,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.prior_image_count == 0 {
            return Err(Error::invalid("steps, batch_size and prior_image_count must be positive"));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning_rate must be positive, weight_decay non-negative"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if self.eta > 0.0 {
            return Err(Error::invalid(format!("eta must be <= 0, got {}", self.eta)));
        }
        if self.levels.is_empty() {
            return Err(Error::invalid("at least one supervision level required"));
        }
        if self.timesteps < 2 {
            return Err(Error::invalid("timesteps must be >= 2"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared error between true and predicted noise.
pub fn recon_loss(eps: &LatentVideo, eps_pred: &LatentVideo) -> Result<f64> {
    if !eps.same_shape(eps_pred) {
        return Err(Error::invalid(format!(
            "eps shape {:?} != prediction shape {:?}",
            eps.tensor().shape(),
            eps_pred.tensor().shape()
        )));
    }
    Ok(eps.tensor().mse(eps_pred.tensor()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub attn: f64,
    pub prior: f64,
    pub total: f64,
}

/// Combine the three terms: total = recon + alpha * attn + beta * prior.
pub fn total_loss(
    recon: f64,
    attn: f64,
    prior: f64,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [("recon", recon), ("attn", attn), ("prior", prior)] {
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite {name} loss: {v}")));
        }
    }
    let total = recon + alpha * attn + beta * prior;
    Ok(LossBreakdown { recon, attn, prior, total })
}

impl LossBreakdown {
    /// The composition invariant, up to float round-off.
    pub fn is_consistent(&self, alpha: f64, beta: f64) -> bool {
        let expect = self.recon + alpha * self.attn + beta * self.prior;
        (self.total - expect).abs() <= 1e-6 * expect.abs().max(1.0)
    }
}

/// Reconstruction loss on a class-prior sample with its own noise draw;
/// contributes no attention term. The prompt must be token-free.
pub fn prior_loss(
    denoiser: &Denoiser,
    text: &TextEncoder,
    sched: &NoiseSchedule,
    sample: &ClassPriorSample,
    t: usize,
    eps: &LatentVideo,
) -> Result<f64> {
    ensure_prior_prompt(text, &sample.prompt)?;
    let (z0, _) = extend_to_video(
        &CompositeSample {
            image: sample.image.clone(),
            masks: vec![],
            prompt: sample.prompt.clone(),
            subjects: vec![],
            token_positions: vec![],
        },
        1,
    );
    let zt = add_noise(&z0, eps, t, sched)?;
    let (emb, _) = text.encode_prompt(&sample.prompt)?;
    let (eps_pred, _) = denoiser.predict_noise(&zt, &[emb], t, sched.timesteps(), &[])?;
    recon_loss(eps, &eps_pred)
}

fn ensure_prior_prompt(text: &TextEncoder, prompt: &str) -> Result<()> {
    let has_learnable =
        text.tokenize(prompt).iter().any(|id| matches!(id, TokenId::Learnable(_)));
    if has_learnable {
        return Err(Error::invalid(format!(
            "prior prompt '{prompt}' contains a learnable token"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Trainable parameter selection
// ---------------------------------------------------------------------------

/// Names of everything the optimizer may touch: cross-attention key/value
/// weights in the denoiser plus the learnable token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParamSet {
    pub weight_names: Vec<String>,
    pub token_names: Vec<String>,
}

pub fn select_trainable(denoiser: &Denoiser, text: &TextEncoder) -> TrainableParamSet {
    TrainableParamSet {
        weight_names: denoiser.cross_attention_kv_names(),
        token_names: text.learnable_names(),
    }
}

impl TrainableParamSet {
    pub fn len(&self) -> usize {
        self.weight_names.len() + self.token_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_weight(&self, name: &str) -> bool {
        self.weight_names.iter().any(|n| n == name)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay; one shared step counter, per-tensor
/// first/second moment state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> AdamW {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimizer step,
    /// before the `update` calls of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "grad shape mismatch for {name}");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.numel() {
            let g = grad.data()[i];
            let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let p = param.data()[i];
            param.data_mut()[i] =
                p - self.learning_rate * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
        }
    }
}

// ---------------------------------------------------------------------------
// Step preparation and loss graph
// ---------------------------------------------------------------------------

/// A composite sample with its noise draw and level-pooled guidance masks,
/// ready for the loss graph.
#[derive(Debug, Clone)]
pub struct PreparedComposite {
    pub zt_frames: Tensor,
    pub eps_frames: Tensor,
    pub t: usize,
    pub prompt: String,
    pub token_names: Vec<String>,
    pub guidance: BTreeMap<Level, Vec<GuidanceMask>>,
}

#[derive(Debug, Clone)]
pub struct PreparedPrior {
    pub zt_frames: Tensor,
    pub eps_frames: Tensor,
    pub t: usize,
    pub prompt: String,
}

pub fn prepare_composite(
    sample: &CompositeSample,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<PreparedComposite> {
    let (h, w) = (sample.image.height(), sample.image.width());
    denoiser.config.check_input_size(h, w)?;
    let (z0, masks) = extend_to_video(sample, 1);
    let t = rng.below(sched.timesteps()) + 1;
    let eps = LatentVideo::randn(1, z0.frames(), h, w, 3, rng);
    let zt = add_noise(&z0, &eps, t, sched)?;
    let mut guidance = BTreeMap::new();
    for &level in &cfg.levels {
        let (mh, mw) = denoiser.config.level_map_size(h, w, level);
        let gms: Vec<GuidanceMask> = masks
            .iter()
            .map(|m| GuidanceMask::from_binary(m, cfg.eta).and_then(|g| g.pooled_to(mh, mw)))
            .collect::<Result<_>>()?;
        guidance.insert(level, gms);
    }
    Ok(PreparedComposite {
        zt_frames: zt.model_frames(0),
        eps_frames: eps.model_frames(0),
        t,
        prompt: sample.prompt.clone(),
        token_names: sample.subjects.iter().map(|(_, tok)| tok.clone()).collect(),
        guidance,
    })
}

pub fn prepare_prior(
    sample: &ClassPriorSample,
    denoiser: &Denoiser,
    text: &TextEncoder,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<PreparedPrior> {
    ensure_prior_prompt(text, &sample.prompt)?;
    let (h, w) = (sample.image.height(), sample.image.width());
    denoiser.config.check_input_size(h, w)?;
    let tmp = CompositeSample {
        image: sample.image.clone(),
        masks: vec![],
        prompt: sample.prompt.clone(),
        subjects: vec![],
        token_positions: vec![],
    };
    let (z0, _) = extend_to_video(&tmp, 1);
    let t = rng.below(sched.timesteps()) + 1;
    let eps = LatentVideo::randn(1, 1, h, w, 3, rng);
    let zt = add_noise(&z0, &eps, t, sched)?;
    Ok(PreparedPrior {
        zt_frames: zt.model_frames(0),
        eps_frames: eps.model_frames(0),
        t,
        prompt: sample.prompt.clone(),
    })
}

/// Materialized per-level maps of the first composite in a step, for
/// heatmap dumps and diagnostics.
pub type StepMaps = Vec<(Level, Vec<Tensor>)>;

pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub maps: StepMaps,
}

/// Build the full objective for one step on the given tape. Trainable
/// leaves are the cross-attention key/value weights and the token rows in
/// `token_vars`.
pub fn build_loss_graph(
    tape: &mut Tape,
    denoiser: &Denoiser,
    text: &TextEncoder,
    vars: &ParamVars,
    token_vars: &BTreeMap<String, Var>,
    composites: &[PreparedComposite],
    priors: &[PreparedPrior],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<LossGraph> {
    if composites.is_empty() {
        return Err(Error::invalid("need at least one composite sample"));
    }
    let mode = cfg.ablation.attention_mode();
    let b = composites.len();
    let mut recon_acc: Option<Var> = None;
    let mut level_maps: BTreeMap<Level, Vec<Vec<Var>>> = BTreeMap::new();
    let mut level_masks: BTreeMap<Level, Vec<Vec<GuidanceMask>>> = BTreeMap::new();
    let mut first_maps: StepMaps = Vec::new();

    for (ci, comp) in composites.iter().enumerate() {
        let frames = tape.value(comp.zt_frames.clone());
        let (emb, positions) = text.encode_on_tape(tape, &comp.prompt, token_vars)?;
        // Pair each subject's mask with its own token position.
        let ids = text.tokenize(&comp.prompt);
        let mut subject_positions = Vec::with_capacity(comp.token_names.len());
        for name in &comp.token_names {
            let pos = ids
                .iter()
                .enumerate()
                .find(|(_, id)| {
                    matches!(id, TokenId::Learnable(_))
                        && text.learnable_names()
                            [match id { TokenId::Learnable(i) => *i, _ => unreachable!() }]
                            == crate::text::TextEncoder::canonical(name)
                })
                .map(|(p, _)| p)
                .ok_or_else(|| {
                    Error::invalid(format!("token '{name}' missing from prompt '{}'", comp.prompt))
                })?;
            subject_positions.push(pos);
        }
        debug_assert_eq!(
            {
                let mut sp = subject_positions.clone();
                sp.sort_unstable();
                sp
            },
            positions,
            "subject tokens must cover the prompt's learnable positions"
        );

        let supervise = mode != AttentionLossMode::Off && !comp.guidance.is_empty();
        let taps: Vec<AttentionTap> = if supervise {
            cfg.levels
                .iter()
                .map(|&level| AttentionTap { level, token_indices: subject_positions.clone() })
                .collect()
        } else {
            Vec::new()
        };
        let (eps_pred, tap_vars) = denoiser.forward_on_tape(
            tape,
            vars,
            frames,
            emb,
            comp.t,
            sched.timesteps(),
            &taps,
        )?;
        let eps_true = tape.value(comp.eps_frames.clone());
        let r = tape.mse(eps_pred, eps_true);
        let r = tape.scale(r, 1.0 / b as f64);
        recon_acc = Some(match recon_acc {
            Some(acc) => tape.add(acc, r),
            None => r,
        });

        for (tap, map_vars) in taps.iter().zip(tap_vars) {
            let (mh, mw) = denoiser.config.level_map_size(
                tape.val(frames).shape()[2],
                tape.val(frames).shape()[3],
                tap.level,
            );
            let shaped: Vec<Var> =
                map_vars.iter().map(|&v| tape.reshape(v, &[mh, mw])).collect();
            if ci == 0 {
                first_maps.push((
                    tap.level,
                    shaped.iter().map(|&v| tape.val(v).clone()).collect(),
                ));
            }
            level_maps.entry(tap.level).or_default().push(shaped);
            level_masks
                .entry(tap.level)
                .or_default()
                .push(comp.guidance[&tap.level].clone());
        }
    }
    let recon_var = recon_acc.expect("at least one composite");

    // Attention loss, averaged over supervised levels.
    let mut attn_var: Option<Var> = None;
    if mode != AttentionLossMode::Off {
        let n_levels = level_maps.len().max(1);
        for (level, maps) in &level_maps {
            if let Some(l) = attn_loss_on_tape(tape, maps, &level_masks[level], mode)? {
                let l = tape.scale(l, 1.0 / n_levels as f64);
                attn_var = Some(match attn_var {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
            }
        }
    }

    // Prior preservation: reconstruction only, no taps, no attention term.
    let mut prior_var: Option<Var> = None;
    if !priors.is_empty() {
        let pb = priors.len() as f64;
        for prior in priors {
            let frames = tape.value(prior.zt_frames.clone());
            let (emb, _) = text.encode_on_tape(tape, &prior.prompt, token_vars)?;
            let (eps_pred, _) = denoiser.forward_on_tape(
                tape,
                vars,
                frames,
                emb,
                prior.t,
                sched.timesteps(),
                &[],
            )?;
            let eps_true = tape.value(prior.eps_frames.clone());
            let r = tape.mse(eps_pred, eps_true);
            let r = tape.scale(r, 1.0 / pb);
            prior_var = Some(match prior_var {
                Some(acc) => tape.add(acc, r),
                None => r,
            });
        }
    }

    let mut total = recon_var;
    if let Some(a) = attn_var {
        let scaled = tape.scale(a, cfg.alpha);
        total = tape.add(total, scaled);
    }
    if let Some(p) = prior_var {
        let scaled = tape.scale(p, cfg.beta);
        total = tape.add(total, scaled);
    }

    let recon = tape.val(recon_var).item();
    let attn = attn_var.map(|v| tape.val(v).item()).unwrap_or(0.0);
    let prior = prior_var.map(|v| tape.val(v).item()).unwrap_or(0.0);
    let breakdown = total_loss(recon, attn, prior, cfg.alpha, cfg.beta)?;
    debug_assert!((breakdown.total - tape.val(total).item()).abs() < 1e-9);
    Ok(LossGraph { total, breakdown, maps: first_maps })
}

// ---------------------------------------------------------------------------
// Train step and loop
// ---------------------------------------------------------------------------

fn apply_updates(
    denoiser: &mut Denoiser,
    text: &mut TextEncoder,
    selection: &TrainableParamSet,
    weight_vars: &BTreeMap<String, Var>,
    token_vars: &BTreeMap<String, Var>,
    grads: &Grads,
    opt: &mut AdamW,
) {
    opt.begin_step();
    for name in &selection.weight_names {
        if let Some(g) = grads.get(weight_vars[name]) {
            opt.update(name, denoiser.params.get_mut(name), g);
        }
    }
    for name in &selection.token_names {
        if let Some(g) = grads.get(token_vars[name]) {
            let key = format!("text.token.{name}");
            let row = text.learnable_row_mut(name).expect("registered token");
            opt.update(&key, row, g);
        }
    }
}

/// One optimizer step over a prepared batch. Returns the loss breakdown and
/// the first composite's supervised maps.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    denoiser: &mut Denoiser,
    text: &mut TextEncoder,
    sched: &NoiseSchedule,
    composites: &[PreparedComposite],
    priors: &[PreparedPrior],
    cfg: &TrainConfig,
    opt: &mut AdamW,
) -> Result<(LossBreakdown, StepMaps)> {
    let selection = select_trainable(denoiser, text);
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, &denoiser.params, |n| selection.has_weight(n));
    let mut weight_vars = BTreeMap::new();
    for name in &selection.weight_names {
        weight_vars.insert(name.clone(), vars.get(name));
    }
    let mut token_vars = BTreeMap::new();
    for name in &selection.token_names {
        let row = text.learnable_row(name).expect("registered token").clone();
        token_vars.insert(name.clone(), tape.param(row));
    }
    let graph = build_loss_graph(
        &mut tape, denoiser, text, &vars, &token_vars, composites, priors, cfg, sched,
    )?;
    let grads = tape.backward(graph.total);
    apply_updates(denoiser, text, &selection, &weight_vars, &token_vars, &grads, opt);
    Ok((graph.breakdown, graph.maps))
}

/// Everything a run needs: the composite(s), per-subject singles for the
/// ablation paths, and the prior pool.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub composites: Vec<CompositeSample>,
    pub singles: Vec<CompositeSample>,
    pub priors: Vec<ClassPriorSample>,
}

impl TrainDataset {
    pub fn validate(&self, cfg: &TrainConfig) -> Result<()> {
        if self.composites.is_empty() {
            return Err(Error::invalid("dataset has no composite samples"));
        }
        if (cfg.ablation.no_concat || cfg.ablation.mixed_single_concat)
            && self.singles.is_empty()
        {
            return Err(Error::invalid("single-subject ablation needs single samples"));
        }
        if self.priors.is_empty() {
            return Err(Error::invalid("dataset has no prior samples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<LossBreakdown>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,recon,attn,prior,total\n");
        for (i, l) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.10},{:.10e},{:.10},{:.10}\n",
                i + 1,
                l.recon,
                l.attn,
                l.prior,
                l.total
            ));
        }
        out
    }
}

/// Run the fine-tuning loop for `cfg.steps` optimizer steps. The observer
/// sees every step's losses plus the supervised maps of the step's first
/// composite (for heatmap dumps).
pub fn run_training(
    denoiser: &mut Denoiser,
    text: &mut TextEncoder,
    sched: &NoiseSchedule,
    dataset: &TrainDataset,
    cfg: &TrainConfig,
    mut observer: Option<&mut dyn FnMut(usize, &LossBreakdown, &StepMaps)>,
) -> Result<TrainLog> {
    cfg.validate()?;
    dataset.validate(cfg)?;
    let mut rng = Rng::new(cfg.seed);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let n_comp = (cfg.batch_size / 2).max(1);
    let n_prior = (cfg.batch_size - n_comp).max(1);
    let mut log = TrainLog::default();

    for step in 1..=cfg.steps {
        let use_singles = cfg.ablation.no_concat
            || (cfg.ablation.mixed_single_concat && step % 2 == 0);
        let pool: &[CompositeSample] =
            if use_singles { &dataset.singles } else { &dataset.composites };

        let mut composites = Vec::with_capacity(n_comp);
        for _ in 0..n_comp {
            let sample = &pool[rng.below(pool.len())];
            let sample = if cfg.augment {
                let spec =
                    AugmentSpec::sample(&mut rng, sample.image.width(), sample.image.height());
                augment(sample, spec, WHITE)?
            } else {
                sample.clone()
            };
            composites.push(prepare_composite(&sample, denoiser, sched, cfg, &mut rng)?);
        }
        let mut priors = Vec::with_capacity(n_prior);
        for _ in 0..n_prior {
            let p = &dataset.priors[rng.below(dataset.priors.len())];
            priors.push(prepare_prior(p, denoiser, text, sched, &mut rng)?);
        }

        let (losses, maps) =
            train_step(denoiser, text, sched, &composites, &priors, cfg, &mut opt)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(step, &losses, &maps);
        }
        log.steps.push(losses);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::{compose_concat, fit_to_canvas, ComposeOptions, Layout, SubjectAsset};
    use crate::model::DenoiserConfig;
    use crate::schedule::make_schedule;
    use crate::text::TokenInit;

    fn tiny_denoiser(seed: u64) -> Denoiser {
        Denoiser::new(
            DenoiserConfig {
                level_channel_counts: [4, 4, 8, 8],
                attention_head_count: 2,
                text_embedding_width: 8,
                temporal_layers_enabled: true,
                base_channels: 4,
                time_embedding_width: 8,
                attn_logit_gain: 2.0,
                value_gain: 4.0,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_world(seed: u64) -> (Denoiser, TextEncoder, NoiseSchedule, TrainDataset, TrainConfig) {
        let denoiser = tiny_denoiser(seed);
        let mut text = TextEncoder::with_default_vocabulary(8, seed + 1);
        text.register_learnable_token("<new1>", TokenInit::ClassWordCopy, "cat").unwrap();
        text.register_learnable_token("<new2>", TokenInit::ClassWordCopy, "dog").unwrap();
        let sched = make_schedule(20, ScheduleKind::LinearBeta).unwrap();
        let mut rng = Rng::new(seed + 2);
        let opts = ComposeOptions { tile_height: 32, gutter: 2, ..Default::default() };
        let assets = vec![
            SubjectAsset::synthetic("cat", "<new1>", 32, true, &mut rng).unwrap(),
            SubjectAsset::synthetic("dog", "<new2>", 32, true, &mut rng).unwrap(),
        ];
        let composite = fit_to_canvas(
            &compose_concat(&assets, Layout::Horizontal, opts).unwrap(),
            32,
            64,
            WHITE,
        );
        let singles: Vec<CompositeSample> = assets
            .iter()
            .map(|a| {
                fit_to_canvas(&crate::compose::single_subject_sample(a, opts), 32, 64, WHITE)
            })
            .collect();
        let priors = crate::compose::synth_class_prior(
            &["cat".into(), "dog".into()],
            4,
            opts,
            &mut rng,
        )
        .unwrap()
        .into_iter()
        .map(|p| {
            let tmp = CompositeSample {
                image: p.image,
                masks: vec![],
                prompt: p.prompt.clone(),
                subjects: vec![],
                token_positions: vec![],
            };
            let fitted = fit_to_canvas(&tmp, 32, 64, WHITE);
            ClassPriorSample { image: fitted.image, prompt: p.prompt }
        })
        .collect();
        let dataset =
            TrainDataset { composites: vec![composite], singles, priors };
        let cfg = TrainConfig {
            steps: 3,
            timesteps: 20,
            augment: false,
            seed: 11,
            learning_rate: 1e-2,
            ..Default::default()
        };
        (denoiser, text, sched, dataset, cfg)
    }

    #[test]
    fn recon_loss_cases() {
        let mut rng = Rng::new(1);
        let a = LatentVideo::randn(1, 1, 4, 4, 3, &mut rng);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);

        let zeros = LatentVideo::zeros(1, 1, 2, 2, 3);
        let ones = LatentVideo::new(Tensor::full(&[1, 1, 2, 2, 3], 1.0)).unwrap();
        assert!((recon_loss(&zeros, &ones).unwrap() - 1.0).abs() < 1e-15);

        let b = LatentVideo::randn(1, 1, 4, 4, 3, &mut rng);
        // Brute-force oracle with bare loops.
        let mut acc = 0.0;
        for i in 0..a.tensor().numel() {
            let d = a.tensor().data()[i] - b.tensor().data()[i];
            acc += d * d;
        }
        let expect = acc / a.tensor().numel() as f64;
        assert!((recon_loss(&a, &b).unwrap() - expect).abs() < 1e-7);

        let c = LatentVideo::zeros(1, 1, 2, 4, 3);
        assert!(recon_loss(&a, &c).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let l = total_loss(1.0, 1.0, 1.0, 0.2, 1.0).unwrap();
        assert!((l.total - 2.2).abs() < 1e-12);
        assert!(l.is_consistent(0.2, 1.0));

        let l0 = total_loss(0.7, 5.0, 3.0, 0.0, 0.0).unwrap();
        assert_eq!(l0.total, 0.7);

        // Linearity: doubling attn adds exactly alpha * attn.
        let la = total_loss(0.7, 1.5, 0.3, 0.2, 1.0).unwrap();
        let lb = total_loss(0.7, 3.0, 0.3, 0.2, 1.0).unwrap();
        assert!((lb.total - la.total - 0.2 * 1.5).abs() < 1e-12);

        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.2, 1.0).is_err());
    }

    #[test]
    fn selection_contents() {
        let (denoiser, text, ..) = tiny_world(3);
        let sel = select_trainable(&denoiser, &text);
        assert!(!sel.is_empty());
        assert_eq!(sel.token_names.len(), 2);
        assert_eq!(sel.weight_names.len(), 16);
        for name in &sel.weight_names {
            assert!(!name.contains(".tself."), "temporal self-attention must stay frozen");
            assert!(!name.contains("conv"));
            assert!(!name.ends_with(".w_q"));
            assert!(!name.ends_with(".w_o"));
        }
    }

    #[test]
    fn adamw_matches_hand_simulated_scalar() {
        // One-parameter model, two steps, against the closed-form update.
        let mut opt = AdamW::new(0.1, 0.01);
        let mut p = Tensor::scalar(1.0);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expect = 1.0f64;
        for (step, g) in [0.5f64, -0.25].iter().enumerate() {
            opt.begin_step();
            opt.update("p", &mut p, &Tensor::scalar(*g));
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (step + 1) as i32;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            expect -= 0.1 * (mhat / (vhat.sqrt() + eps) + 0.01 * expect);
            assert!(
                (p.item() - expect).abs() < 1e-14,
                "step {}: {} vs {}",
                step + 1,
                p.item(),
                expect
            );
        }
    }

    #[test]
    fn prior_loss_perfect_prediction_and_cross_path() {
        let (denoiser, text, sched, dataset, _) = tiny_world(5);
        let prior = &dataset.priors[0];
        let mut rng = Rng::new(9);
        let t = 7;
        let eps = LatentVideo::randn(1, 1, 32, 64, 3, &mut rng);
        let via_prior = prior_loss(&denoiser, &text, &sched, prior, t, &eps).unwrap();

        // Cross-path: run the same (z', eps', t') through the plain
        // reconstruction path.
        let tmp = CompositeSample {
            image: prior.image.clone(),
            masks: vec![],
            prompt: prior.prompt.clone(),
            subjects: vec![],
            token_positions: vec![],
        };
        let (z0, _) = extend_to_video(&tmp, 1);
        let zt = add_noise(&z0, &eps, t, &sched).unwrap();
        let (emb, _) = text.encode_prompt(&prior.prompt).unwrap();
        let (pred, _) = denoiser.predict_noise(&zt, &[emb], t, sched.timesteps(), &[]).unwrap();
        let via_recon = recon_loss(&eps, &pred).unwrap();
        assert_eq!(via_prior.to_bits(), via_recon.to_bits());
    }

    #[test]
    fn prior_loss_rejects_learnable_tokens() {
        let (denoiser, text, sched, dataset, _) = tiny_world(6);
        let mut bad = dataset.priors[0].clone();
        bad.prompt = "a <new1> cat and a dog".into();
        let eps = LatentVideo::zeros(1, 1, 32, 64, 3);
        assert!(prior_loss(&denoiser, &text, &sched, &bad, 3, &eps).is_err());
    }

    #[test]
    fn train_step_deterministic_and_consistent() {
        let (mut denoiser, mut text, sched, dataset, cfg) = tiny_world(7);
        let mut rng = Rng::new(cfg.seed);
        let comp = prepare_composite(&dataset.composites[0], &denoiser, &sched, &cfg, &mut rng)
            .unwrap();
        let prior = prepare_prior(&dataset.priors[0], &denoiser, &text, &sched, &mut rng).unwrap();

        let mut d2 = denoiser.clone();
        let mut t2 = text.clone();
        let mut opt1 = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        let mut opt2 = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        let (l1, _) = train_step(
            &mut denoiser, &mut text, &sched,
            std::slice::from_ref(&comp), std::slice::from_ref(&prior), &cfg, &mut opt1,
        )
        .unwrap();
        let (l2, _) = train_step(
            &mut d2, &mut t2, &sched,
            std::slice::from_ref(&comp), std::slice::from_ref(&prior), &cfg, &mut opt2,
        )
        .unwrap();
        assert_eq!(l1, l2);
        assert!(l1.is_consistent(cfg.alpha, cfg.beta));
        assert!(l1.attn > 0.0, "attention term should be active");
        // Both replicas end in the same state.
        assert_eq!(
            denoiser.params.checksum(|_| true),
            d2.params.checksum(|_| true)
        );
    }

    #[test]
    fn only_selected_parameters_move() {
        let (mut denoiser, mut text, sched, dataset, cfg) = tiny_world(8);
        let sel = select_trainable(&denoiser, &text);
        let frozen_before = denoiser.params.checksum(|n| !sel.has_weight(n));
        let base_row_before = text.base_row(3).clone();
        let token_before = text.learnable_row("<new1>").unwrap().clone();

        let mut rng = Rng::new(1);
        let comp = prepare_composite(&dataset.composites[0], &denoiser, &sched, &cfg, &mut rng)
            .unwrap();
        let prior = prepare_prior(&dataset.priors[0], &denoiser, &text, &sched, &mut rng).unwrap();
        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        train_step(
            &mut denoiser, &mut text, &sched,
            std::slice::from_ref(&comp), std::slice::from_ref(&prior), &cfg, &mut opt,
        )
        .unwrap();

        assert_eq!(
            denoiser.params.checksum(|n| !sel.has_weight(n)),
            frozen_before,
            "non-selected parameters must be bit-identical"
        );
        assert_eq!(text.base_row(3), &base_row_before, "base embedding rows are frozen");
        assert_ne!(text.learnable_row("<new1>").unwrap(), &token_before, "token row should move");
        // At least one selected weight moved.
        let moved = sel
            .weight_names
            .iter()
            .any(|n| denoiser.params.get(n).data().iter().any(|&v| v != 0.0));
        assert!(moved);
    }

    #[test]
    fn reencoding_changes_only_trained_token_row() {
        let (mut denoiser, mut text, sched, dataset, cfg) = tiny_world(9);
        let prompt = "a <new1> cat and a <new2> dog";
        let (before, _) = text.encode_prompt(prompt).unwrap();

        // Isolate <new1>: a single-subject step that only mentions it.
        let single = &dataset.singles[0];
        assert!(single.prompt.contains("<new1>"));
        let mut rng = Rng::new(2);
        let comp = prepare_composite(single, &denoiser, &sched, &cfg, &mut rng).unwrap();
        let prior = prepare_prior(&dataset.priors[0], &denoiser, &text, &sched, &mut rng).unwrap();
        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        train_step(
            &mut denoiser, &mut text, &sched,
            std::slice::from_ref(&comp), std::slice::from_ref(&prior), &cfg, &mut opt,
        )
        .unwrap();

        let (after, _) = text.encode_prompt(prompt).unwrap();
        let width = text.width();
        let ids = text.tokenize(prompt);
        for (pos, id) in ids.iter().enumerate() {
            let row_changed = (0..width)
                .any(|c| before.data()[pos * width + c] != after.data()[pos * width + c]);
            match id {
                TokenId::Learnable(0) => assert!(row_changed, "<new1> row should change"),
                _ => assert!(!row_changed, "row {pos} should be untouched"),
            }
        }
    }

    #[test]
    fn end_to_end_gradient_check_on_micro_model() {
        let (denoiser, text, sched, dataset, cfg) = tiny_world(10);
        let mut rng = Rng::new(3);
        let comp = prepare_composite(&dataset.composites[0], &denoiser, &sched, &cfg, &mut rng)
            .unwrap();
        let prior = prepare_prior(&dataset.priors[0], &denoiser, &text, &sched, &mut rng).unwrap();
        let sel = select_trainable(&denoiser, &text);

        let loss_for = |d: &Denoiser, t: &TextEncoder| -> f64 {
            let mut tape = Tape::new();
            let vars = ParamVars::bind(&mut tape, &d.params, |n| sel.has_weight(n));
            let mut token_vars = BTreeMap::new();
            for name in &sel.token_names {
                let row = t.learnable_row(name).unwrap().clone();
                token_vars.insert(name.clone(), tape.param(row));
            }
            let graph = build_loss_graph(
                &mut tape, d, t, &vars, &token_vars,
                std::slice::from_ref(&comp), std::slice::from_ref(&prior), &cfg, &sched,
            )
            .unwrap();
            graph.breakdown.total
        };

        // Analytic gradients once.
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &denoiser.params, |n| sel.has_weight(n));
        let mut token_vars = BTreeMap::new();
        for name in &sel.token_names {
            let row = text.learnable_row(name).unwrap().clone();
            token_vars.insert(name.clone(), tape.param(row));
        }
        let graph = build_loss_graph(
            &mut tape, &denoiser, &text, &vars, &token_vars,
            std::slice::from_ref(&comp), std::slice::from_ref(&prior), &cfg, &sched,
        )
        .unwrap();
        let grads = tape.backward(graph.total);

        // Sampled trainable weights: one spatial w_k, one temporal w_v, and
        // one token row, a few entries each, against central differences.
        let mut rng = Rng::new(4);
        for name in ["enc1.sattn.w_k", "enc3.txattn.w_v"] {
            let analytic = grads.get(vars.get(name)).expect("gradient present").clone();
            let base = denoiser.params.get(name).clone();
            for _ in 0..3 {
                let i = rng.below(base.numel());
                let h = 1e-4;
                let mut dp = denoiser.clone();
                dp.params.get_mut(name).data_mut()[i] += h;
                let mut dm = denoiser.clone();
                dm.params.get_mut(name).data_mut()[i] -= h;
                let numeric = (loss_for(&dp, &text) - loss_for(&dm, &text)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-3, "{name}[{i}]: analytic {a} vs numeric {numeric} rel {rel}");
            }
        }
        let tok_grad = grads.get(token_vars["<new1>"]).expect("token gradient").clone();
        let base = text.learnable_row("<new1>").unwrap().clone();
        for _ in 0..3 {
            let i = rng.below(base.numel());
            let h = 1e-4;
            let mut tp = text.clone();
            let mut row = base.clone();
            row.data_mut()[i] += h;
            tp.set_learnable_row("<new1>", row).unwrap();
            let mut tm = text.clone();
            let mut row = base.clone();
            row.data_mut()[i] -= h;
            tm.set_learnable_row("<new1>", row).unwrap();
            let numeric = (loss_for(&denoiser, &tp) - loss_for(&denoiser, &tm)) / (2.0 * h);
            let a = tok_grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-3, "<new1>[{i}]: analytic {a} vs numeric {numeric} rel {rel}");
        }
    }

    #[test]
    fn run_training_executes_exactly_requested_steps() {
        let (mut denoiser, mut text, sched, dataset, mut cfg) = tiny_world(11);
        cfg.steps = 5;
        let mut seen = 0;
        let log = run_training(
            &mut denoiser,
            &mut text,
            &sched,
            &dataset,
            &cfg,
            Some(&mut |step, losses, _maps| {
                seen = step;
                assert!(losses.is_consistent(cfg.alpha, cfg.beta));
            }),
        )
        .unwrap();
        assert_eq!(log.steps.len(), 5);
        assert_eq!(seen, 5);
        let csv = log.to_csv();
        assert!(csv.starts_with("step,recon,attn,prior,total\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn alpha_zero_trajectory_identical_with_taps_disabled() {
        // With alpha = 0 the attention term cannot influence updates; a run
        // with supervision disabled entirely must be bit-identical.
        let (mut d1, mut t1, sched, dataset, mut cfg) = tiny_world(12);
        cfg.steps = 3;
        cfg.alpha = 0.0;
        let mut d2 = d1.clone();
        let mut t2 = t1.clone();
        let mut cfg2 = cfg.clone();
        cfg2.ablation.no_pos_attn = true;
        cfg2.ablation.no_neg_attn = true; // attention mode Off: no taps at all

        run_training(&mut d1, &mut t1, &sched, &dataset, &cfg, None).unwrap();
        run_training(&mut d2, &mut t2, &sched, &dataset, &cfg2, None).unwrap();
        assert_eq!(
            d1.params.checksum(|_| true),
            d2.params.checksum(|_| true),
            "alpha = 0 must match taps-off run bit for bit"
        );
        for name in t1.learnable_names() {
            assert_eq!(t1.learnable_row(&name), t2.learnable_row(&name));
        }
    }

    #[test]
    fn no_concat_ablation_trains_on_singles() {
        let (mut denoiser, mut text, sched, dataset, mut cfg) = tiny_world(13);
        cfg.steps = 2;
        cfg.ablation.no_concat = true;
        let log =
            run_training(&mut denoiser, &mut text, &sched, &dataset, &cfg, None).unwrap();
        assert_eq!(log.steps.len(), 2);
    }
}
