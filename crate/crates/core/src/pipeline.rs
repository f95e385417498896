//! Wiring: build subject assets, the model trio (denoiser / text encoder /
//! schedule) and the training dataset from an experiment config. Shared by
//! the command-line tool and the verification suites.

use std::path::{Path, PathBuf};

use crate::compose::{
    self, compose_concat, fit_to_canvas, single_subject_sample, ClassPriorSample,
    ComposeOptions, CompositeSample, Layout, ManifestEntry, SubjectAsset, WHITE,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::SubjectSignature;
use crate::imgio;
use crate::model::Denoiser;
use crate::rng::Rng;
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::text::{TextEncoder, TokenInit};
use crate::train::TrainDataset;

/// Load assets listed in a manifest, removing backgrounds unless the
/// ablation keeps them.
pub fn load_assets(entries: &[ManifestEntry], strip_background: bool) -> Result<Vec<SubjectAsset>> {
    entries
        .iter()
        .map(|e| {
            let image = imgio::load_image_png(&e.image_path)?;
            let mask = imgio::load_mask_png(&e.mask_path)?;
            SubjectAsset::new(image, mask, &e.class_name, &e.token_name, WHITE, strip_background)
        })
        .collect()
}

/// Generate synthetic reference assets on disk (PNG image + mask per
/// subject) plus a manifest, and return the manifest path.
pub fn write_synthetic_assets(
    dir: &Path,
    subjects: &[(String, String)],
    side: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = Rng::new(seed);
    let mut manifest = String::new();
    for (class, token) in subjects {
        let (img, mask) =
            compose::synth_subject(class, side, compose::DrawParams::default(), &mut rng)?;
        let img_name = format!("{class}.png");
        let mask_name = format!("{class}_mask.png");
        imgio::save_image_png(&img, &dir.join(&img_name))?;
        imgio::save_mask_png(&mask, &dir.join(&mask_name))?;
        manifest.push_str(&format!("{img_name}|{mask_name}|{class}|{token}\n"));
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

/// Denoiser + text encoder (tokens registered per asset) + schedule.
pub fn init_world(
    cfg: &ExperimentConfig,
    assets: &[SubjectAsset],
) -> Result<(Denoiser, TextEncoder, NoiseSchedule)> {
    let denoiser = Denoiser::new(cfg.model.clone(), cfg.model_seed)?;
    let mut text =
        TextEncoder::with_default_vocabulary(cfg.model.text_embedding_width, cfg.model_seed ^ 0x9e37);
    for asset in assets {
        text.register_learnable_token(
            &asset.token_name,
            TokenInit::ClassWordCopy,
            &asset.class_name,
        )?;
    }
    let sched = make_schedule(cfg.train.timesteps, cfg.train.schedule)?;
    Ok((denoiser, text, sched))
}

fn fit_prior(p: ClassPriorSample, h: usize, w: usize) -> ClassPriorSample {
    let tmp = CompositeSample {
        image: p.image,
        masks: vec![],
        prompt: p.prompt.clone(),
        subjects: vec![],
        token_positions: vec![],
    };
    let fitted = fit_to_canvas(&tmp, h, w, WHITE);
    ClassPriorSample { image: fitted.image, prompt: p.prompt }
}

/// Composite + singles + prior pool, all on the training canvas.
pub fn build_dataset(cfg: &ExperimentConfig, assets: &[SubjectAsset]) -> Result<TrainDataset> {
    if assets.is_empty() {
        return Err(Error::invalid("no subject assets"));
    }
    let (h, w) = (cfg.canvas_height, cfg.canvas_width);
    let opts = ComposeOptions::default();
    let composites = if assets.len() >= 2 {
        vec![fit_to_canvas(
            &compose_concat(assets, Layout::Horizontal, opts)?,
            h,
            w,
            WHITE,
        )]
    } else {
        vec![fit_to_canvas(&single_subject_sample(&assets[0], opts), h, w, WHITE)]
    };
    let singles = assets
        .iter()
        .map(|a| fit_to_canvas(&single_subject_sample(a, opts), h, w, WHITE))
        .collect();
    let classes: Vec<String> = assets.iter().map(|a| a.class_name.clone()).collect();
    let mut rng = Rng::new(cfg.seed ^ 0x5eed);
    let priors = compose::synth_class_prior(&classes, cfg.train.prior_image_count, opts, &mut rng)?
        .into_iter()
        .map(|p| fit_prior(p, h, w))
        .collect();
    Ok(TrainDataset { composites, singles, priors })
}

/// Blob signatures for the oracle metrics, one per asset class.
pub fn subject_signatures(assets: &[SubjectAsset]) -> Result<Vec<SubjectSignature>> {
    assets.iter().map(|a| SubjectSignature::for_class(&a.class_name)).collect()
}
