//! Exploratory probe for training dynamics; run with --ignored.

use vidlab_core::attnctl::Level;
use vidlab_core::config::ExperimentConfig;
use vidlab_core::eval::{cooccurrence_oracle, mean_attention_iou, per_subject_presence};
use vidlab_core::model::AttentionTap;
use vidlab_core::pipeline::{build_dataset, init_world, subject_signatures, write_synthetic_assets, load_assets};
use vidlab_core::compose::parse_manifest;
use vidlab_core::sample::{sample_video, SamplerConfig};
use vidlab_core::schedule::add_noise;
use vidlab_core::latent::LatentVideo;
use vidlab_core::compose::extend_to_video;
use vidlab_core::attnctl::GuidanceMask;
use vidlab_core::rng::Rng;
use vidlab_core::train::run_training;

fn measure_iou(
    denoiser: &vidlab_core::model::Denoiser,
    text: &vidlab_core::text::TextEncoder,
    sched: &vidlab_core::schedule::NoiseSchedule,
    dataset: &vidlab_core::train::TrainDataset,
    eta: f64,
) -> f64 {
    let comp = &dataset.composites[0];
    let (z0, masks) = extend_to_video(comp, 1);
    let mut rng = Rng::new(999);
    let mut total = 0.0;
    let mut count = 0;
    for t in [sched.timesteps() / 4, sched.timesteps() / 2, 3 * sched.timesteps() / 4] {
        let eps = LatentVideo::randn(1, 1, comp.image.height(), comp.image.width(), 3, &mut rng);
        let zt = add_noise(&z0, &eps, t, sched).unwrap();
        let (emb, positions) = text.encode_prompt(&comp.prompt).unwrap();
        let taps = [AttentionTap { level: Level::L3, token_indices: positions }];
        let (_, maps) = denoiser.predict_noise(&zt, &[emb], t, sched.timesteps(), &taps).unwrap();
        let (mh, mw) = denoiser.config.level_map_size(comp.image.height(), comp.image.width(), Level::L3);
        let gms: Vec<GuidanceMask> = masks
            .iter()
            .map(|m| GuidanceMask::from_binary(m, eta).unwrap().pooled_to(mh, mw).unwrap())
            .collect();
        total += mean_attention_iou(&maps[0][0], &gms, 0.5).unwrap();
        count += 1;
    }
    total / count as f64
}

#[test]
#[ignore]
fn probe_training_dynamics() {
    let dir = std::env::temp_dir().join("vidlab_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let mpath = write_synthetic_assets(
        &dir,
        &[("cat".into(), "<new1>".into()), ("dog".into(), "<new2>".into())],
        32,
        7,
    )
    .unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.train.prior_image_count = 20;
    cfg.train.augment = false;

    let text_data = std::fs::read_to_string(&mpath).unwrap();
    let entries = parse_manifest(&text_data, &dir).unwrap();
    let assets = load_assets(&entries, true).unwrap();
    let dataset = build_dataset(&cfg, &assets).unwrap();
    let sigs = subject_signatures(&assets).unwrap();

    let (mut denoiser, mut text, sched) = init_world(&cfg, &assets).unwrap();
    let iou0 = measure_iou(&denoiser, &text, &sched, &dataset, cfg.train.eta);
    eprintln!("init IoU: {iou0:.4}");

    let comp0 = &dataset.composites[0];
    let (mh, mw) = denoiser.config.level_map_size(comp0.image.height(), comp0.image.width(), Level::L3);
    let gms0: Vec<GuidanceMask> = comp0
        .masks
        .iter()
        .map(|m| GuidanceMask::from_binary(m, cfg.train.eta).unwrap().pooled_to(mh, mw).unwrap())
        .collect();

    let t0 = std::time::Instant::now();
    let mut last = None;
    let log = run_training(
        &mut denoiser,
        &mut text,
        &sched,
        &dataset,
        &cfg.train,
        Some(&mut |step, losses, maps| {
            if step % 50 == 0 || step == 1 {
                let iou = maps
                    .iter()
                    .find(|(l, _)| *l == Level::L3)
                    .map(|(_, ms)| {
                        let set = vidlab_core::attnctl::AttentionMapSet {
                            level: Level::L3,
                            per_token_maps: ms.clone(),
                        };
                        mean_attention_iou(&set, &gms0, 0.5).unwrap_or(-1.0)
                    })
                    .unwrap_or(-1.0);
                let peak = maps
                    .iter()
                    .find(|(l, _)| *l == Level::L3)
                    .map(|(_, ms)| ms.iter().map(|m| m.max()).fold(0.0, f64::max))
                    .unwrap_or(0.0);
                eprintln!(
                    "step {step:4}  recon {:.4}  attn {:.5}  prior {:.4}  iou {iou:.3} peak {peak:.3}",
                    losses.recon, losses.attn, losses.prior
                );
            }
            last = Some(*losses);
        }),
    )
    .unwrap();
    eprintln!("trained {} steps in {:.1?}", log.steps.len(), t0.elapsed());
    let iou1 = measure_iou(&denoiser, &text, &sched, &dataset, cfg.train.eta);
    eprintln!("trained IoU: {iou1:.4}");

    // One-shot denoising probe: can the model pull a noised composite back?
    let dump = dir.join("dump");
    std::fs::create_dir_all(&dump).unwrap();
    vidlab_core::imgio::save_image_png(&comp0.image, &dump.join("composite.png")).unwrap();
    let (z0, _) = extend_to_video(comp0, 1);
    let mut rng2 = Rng::new(4242);
    for t in [200usize, 500, 800, 950] {
        let eps = LatentVideo::randn(1, 1, 32, 64, 3, &mut rng2);
        let zt = add_noise(&z0, &eps, t, &sched).unwrap();
        let (emb, _) = text.encode_prompt(&comp0.prompt).unwrap();
        let (eps_pred, _) = denoiser.predict_noise(&zt, &[emb], t, sched.timesteps(), &[]).unwrap();
        let a = sched.alpha(t);
        let s = (1.0 - a * a).sqrt();
        let z0_pred = zt.tensor().zip_map(eps_pred.tensor(), |zv, ev| ((zv - s * ev) / a).clamp(0.0, 1.0));
        let v = LatentVideo::new(z0_pred).unwrap();
        let frames_t = v.model_frames(0);
        let mut img = vidlab_core::compose::Image::new_fill(32, 64, [0.0; 3]);
        for y in 0..32 {
            for x in 0..64 {
                img.set(y, x, [
                    frames_t.data()[(0 * 32 + y) * 64 + x],
                    frames_t.data()[(1 * 32 + y) * 64 + x],
                    frames_t.data()[(2 * 32 + y) * 64 + x],
                ]);
            }
        }
        vidlab_core::imgio::save_image_png(&img, &dump.join(format!("oneshot_t{t}.png"))).unwrap();
        let mse = img.data().iter().zip(comp0.image.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.data().len() as f64;
        eprintln!("one-shot t={t}: z0_pred mse vs composite {mse:.4}");
    }

    // Sampling probe.
    let t1 = std::time::Instant::now();
    let prompt = &dataset.composites[0].prompt;
    for scale in [1.0, 7.5] {
        let mut frames_all = Vec::new();
        for seed in 0..5u64 {
            let scfg = SamplerConfig {
                steps: 30,
                guidance_scale: scale,
                frames: 2,
                height: 32,
                width: 64,
                seed,
                fps: 8,
            };
            let frames = sample_video(&denoiser, &text, &sched, prompt, &scfg).unwrap();
            if seed == 0 {
                vidlab_core::imgio::save_image_png(
                    &frames[0],
                    &dump.join(format!("sample_scale{scale}_seed{seed}.png")),
                )
                .unwrap();
            }
            frames_all.extend(frames);
        }
        let rate = cooccurrence_oracle(&frames_all, &sigs);
        let presence = per_subject_presence(&frames_all, &sigs);
        eprintln!(
            "scale {scale}: cooccurrence {rate:.2}, presence {:?} ({} frames, {:.1?})",
            presence,
            frames_all.len(),
            t1.elapsed()
        );
    }
}
