//! Mask-free video sampling from a trained model with classifier-free
//! guidance. Nothing on this path reads guidance masks; a prompt with the
//! learned word tokens is the only conditioning.

use std::path::Path;

use crate::compose::Image;
use crate::error::{Error, Result};
use crate::imgio::save_image_png;
use crate::latent::LatentVideo;
use crate::model::Denoiser;
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::text::TextEncoder;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Denoising steps (uniform-stride subset of the training schedule).
    pub steps: usize,
    pub guidance_scale: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Frame-rate metadata recorded in the output manifest.
    pub fps: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            guidance_scale: 7.5,
            frames: 8,
            height: 32,
            width: 64,
            seed: 0,
            fps: 8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("sampler needs at least 1 step"));
        }
        if self.guidance_scale < 1.0 {
            return Err(Error::invalid(format!(
                "guidance scale must be >= 1, got {}",
                self.guidance_scale
            )));
        }
        if self.frames < 1 {
            return Err(Error::invalid("need at least 1 frame"));
        }
        Ok(())
    }
}

/// Classifier-free guided noise prediction:
/// uncond + scale * (cond - uncond). At scale 1 this is exactly the
/// conditional prediction.
pub fn cfg_predict(
    denoiser: &Denoiser,
    zt: &LatentVideo,
    t: usize,
    total_t: usize,
    cond: &Tensor,
    uncond: &Tensor,
    scale: f64,
) -> Result<LatentVideo> {
    if scale < 0.0 {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {scale}")));
    }
    let (eps_cond, _) = denoiser.predict_noise(zt, std::slice::from_ref(cond), t, total_t, &[])?;
    if scale == 1.0 {
        return Ok(eps_cond);
    }
    let (eps_uncond, _) =
        denoiser.predict_noise(zt, std::slice::from_ref(uncond), t, total_t, &[])?;
    let guided = eps_uncond
        .tensor()
        .zip_map(eps_cond.tensor(), |u, c| u + scale * (c - u));
    LatentVideo::new(guided)
}

/// The scalar combination rule by itself, for callers that already hold
/// both predictions.
pub fn combine_guidance(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if scale < 0.0 {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    Ok(uncond.zip_map(cond, |u, c| u + scale * (c - u)))
}

/// Uniform-stride timestep subset from T down, always ending near the
/// clean end of the schedule.
pub fn sampling_timesteps(total_t: usize, steps: usize) -> Vec<usize> {
    let steps = steps.min(total_t).max(1);
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| total_t - (i * total_t) / steps)
        .collect();
    ts.dedup();
    ts
}

/// Deterministic DDIM-style denoising from pure noise to `frames` frames.
/// Requires every angle-bracket token in the prompt to be registered.
pub fn sample_video(
    denoiser: &Denoiser,
    text: &TextEncoder,
    sched: &NoiseSchedule,
    prompt: &str,
    cfg: &SamplerConfig,
) -> Result<Vec<Image>> {
    cfg.validate()?;
    denoiser.config.check_input_size(cfg.height, cfg.width)?;
    for word in prompt.split_whitespace() {
        let w = TextEncoder::canonical(word);
        if w.starts_with('<') && w.ends_with('>') && !text.has_learnable(&w) {
            return Err(Error::invalid(format!("unknown learnable token '{w}'")));
        }
    }
    let (cond, _) = text.encode_prompt(prompt)?;
    let uncond = text.encode_unconditional();
    let total_t = sched.timesteps();

    let mut rng = Rng::new(cfg.seed);
    let mut z = LatentVideo::randn(1, cfg.frames, cfg.height, cfg.width, 3, &mut rng);
    let ts = sampling_timesteps(total_t, cfg.steps);
    let mut z0_pred = z.tensor().clone();
    for (i, &t) in ts.iter().enumerate() {
        let eps = cfg_predict(denoiser, &z, t, total_t, &cond, &uncond, cfg.guidance_scale)?;
        let alpha_t = sched.alpha(t);
        let sig_t = (1.0 - alpha_t * alpha_t).max(0.0).sqrt();
        z0_pred = z
            .tensor()
            .zip_map(eps.tensor(), |zv, ev| (zv - sig_t * ev) / alpha_t);
        let alpha_prev = match ts.get(i + 1) {
            Some(&tp) => sched.alpha(tp),
            None => 1.0,
        };
        let sig_prev = (1.0 - alpha_prev * alpha_prev).max(0.0).sqrt();
        let next = z0_pred
            .zip_map(eps.tensor(), |z0, ev| alpha_prev * z0 + sig_prev * ev);
        z = LatentVideo::new(next)?;
    }

    // Final frames are the last clean prediction, clamped to the training
    // data range.
    let clean = LatentVideo::new(z0_pred.map(|v| v.clamp(0.0, 1.0)))?;
    let mut frames = Vec::with_capacity(cfg.frames);
    for li in 0..cfg.frames {
        let ft = clean.model_frames(0);
        let (h, w) = (cfg.height, cfg.width);
        let mut img = Image::new_fill(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let r = ft.data()[((li * 3) * h + y) * w + x];
                let g = ft.data()[((li * 3 + 1) * h + y) * w + x];
                let b = ft.data()[((li * 3 + 2) * h + y) * w + x];
                img.set(y, x, [r, g, b]);
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Output writing
// ---------------------------------------------------------------------------

/// Sidecar metadata for a generated clip.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationManifest {
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
}

impl GenerationManifest {
    pub fn from_config(prompt: &str, cfg: &SamplerConfig) -> GenerationManifest {
        GenerationManifest {
            prompt: prompt.to_string(),
            seed: cfg.seed,
            steps: cfg.steps,
            guidance_scale: cfg.guidance_scale,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            fps: cfg.fps,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "prompt = {}\nseed = {}\nsteps = {}\nguidance_scale = {}\nframes = {}\nheight = {}\nwidth = {}\nfps = {}\n",
            self.prompt,
            self.seed,
            self.steps,
            self.guidance_scale,
            self.frames,
            self.height,
            self.width,
            self.fps
        )
    }
}

/// Write frames as frame_000.png ... plus manifest.txt.
pub fn save_video_output(
    dir: &Path,
    frames: &[Image],
    manifest: &GenerationManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_image_png(f, &dir.join(format!("frame_{i:03}.png")))?;
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::text::TokenInit;

    fn world() -> (Denoiser, TextEncoder, NoiseSchedule) {
        let cfg = DenoiserConfig {
            level_channel_counts: [4, 4, 8, 8],
            attention_head_count: 2,
            text_embedding_width: 8,
            temporal_layers_enabled: true,
            base_channels: 4,
            time_embedding_width: 8,
            attn_logit_gain: 2.0,
            value_gain: 4.0,
        };
        let denoiser = Denoiser::new(cfg, 31).unwrap();
        let mut text = TextEncoder::with_default_vocabulary(8, 32);
        text.register_learnable_token("<new1>", TokenInit::ClassWordCopy, "cat").unwrap();
        let sched = make_schedule(20, ScheduleKind::LinearBeta).unwrap();
        (denoiser, text, sched)
    }

    fn sampler() -> SamplerConfig {
        SamplerConfig { steps: 4, frames: 2, height: 16, width: 16, seed: 5, ..Default::default() }
    }

    #[test]
    fn guidance_degenerates_at_scale_one() {
        let (denoiser, text, _sched) = world();
        let mut rng = Rng::new(1);
        let zt = LatentVideo::randn(1, 1, 16, 16, 3, &mut rng);
        let (cond, _) = text.encode_prompt("a <new1> cat").unwrap();
        let uncond = text.encode_unconditional();
        let guided = cfg_predict(&denoiser, &zt, 3, 20, &cond, &uncond, 1.0).unwrap();
        let (plain, _) = denoiser.predict_noise(&zt, &[cond], 3, 20, &[]).unwrap();
        assert_eq!(guided, plain);
    }

    #[test]
    fn guidance_with_equal_embeddings_is_identity_for_any_scale() {
        let (denoiser, text, sched) = world();
        let _ = sched;
        let mut rng = Rng::new(2);
        let zt = LatentVideo::randn(1, 1, 16, 16, 3, &mut rng);
        let (cond, _) = text.encode_prompt("a cat").unwrap();
        for scale in [1.0, 3.5, 7.5] {
            let guided = cfg_predict(&denoiser, &zt, 2, 20, &cond, &cond, scale).unwrap();
            let (plain, _) =
                denoiser.predict_noise(&zt, &[cond.clone()], 2, 20, &[]).unwrap();
            assert_eq!(guided, plain);
        }
    }

    #[test]
    fn guidance_scalar_case() {
        let uncond = Tensor::zeros(&[4]);
        let cond = Tensor::full(&[4], 1.0);
        let out = combine_guidance(&cond, &uncond, 7.5).unwrap();
        for &v in out.data() {
            assert!((v - 7.5).abs() < 1e-15);
        }
        assert!(combine_guidance(&cond, &uncond, -0.5).is_err());
    }

    #[test]
    fn fixed_seed_gives_bit_identical_frames() {
        let (denoiser, text, sched) = world();
        let cfg = sampler();
        let a = sample_video(&denoiser, &text, &sched, "a <new1> cat", &cfg).unwrap();
        let b = sample_video(&denoiser, &text, &sched, "a <new1> cat", &cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 6;
        let c = sample_video(&denoiser, &text, &sched, "a <new1> cat", &cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_frame_degenerate_video() {
        let (denoiser, text, sched) = world();
        let mut cfg = sampler();
        cfg.frames = 1;
        let frames = sample_video(&denoiser, &text, &sched, "a <new1> cat", &cfg).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].height(), 16);
        assert_eq!(frames[0].width(), 16);
    }

    #[test]
    fn output_range_is_clamped_to_unit_interval() {
        let (denoiser, text, sched) = world();
        let cfg = sampler();
        let frames = sample_video(&denoiser, &text, &sched, "a <new1> cat", &cfg).unwrap();
        for f in &frames {
            for &v in f.data() {
                assert!((0.0..=1.0).contains(&v), "value {v} out of range");
            }
        }
    }

    #[test]
    fn unknown_learnable_token_rejected() {
        let (denoiser, text, sched) = world();
        let cfg = sampler();
        assert!(matches!(
            sample_video(&denoiser, &text, &sched, "a <new9> cat", &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn frame_count_and_size_match_config() {
        let (denoiser, text, sched) = world();
        let cfg = SamplerConfig {
            steps: 2,
            frames: 3,
            height: 16,
            width: 32,
            seed: 9,
            ..Default::default()
        };
        let frames = sample_video(&denoiser, &text, &sched, "a <new1> cat", &cfg).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| f.height() == 16 && f.width() == 32));
    }

    #[test]
    fn timestep_subsets_are_uniform_and_descending() {
        let ts = sampling_timesteps(1000, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        for w in ts.windows(2) {
            assert_eq!(w[0] - w[1], 20);
        }
        let short = sampling_timesteps(10, 50);
        assert_eq!(short.len(), 10);
        assert!(short.windows(2).all(|w| w[0] > w[1]));
        assert!(*short.last().unwrap() >= 1);
    }

    #[test]
    fn manifest_text_roundtrips_values() {
        let cfg = sampler();
        let m = GenerationManifest::from_config("a <new1> cat", &cfg);
        let text = m.to_text();
        assert!(text.contains("prompt = a <new1> cat"));
        assert!(text.contains("fps = 8"));
        assert!(text.contains("seed = 5"));
    }
}
