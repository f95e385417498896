//! Evaluation: the four cosine metrics behind a pluggable feature
//! extractor, plus desk-scale oracles (subject co-occurrence, per-subject
//! identity presence, attention IoU) that measure the mechanism's claims
//! on procedural subjects without any pretrained encoder.

use std::fmt::Write as _;

use crate::attnctl::{AttentionMapSet, GuidanceMask};
use crate::compose::{class_spec, Image, Rgb};
use crate::error::{Error, Result};
use crate::rng::Rng;

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Image/text -> fixed-width feature vector. Implementations must be
/// deterministic.
pub trait FeatureExtractor {
    fn image_feature(&self, image: &Image) -> Vec<f64>;
    fn text_feature(&self, prompt: &str) -> Vec<f64>;
    fn name(&self) -> &str;
}

/// Default desk-scale extractor: grid-pooled colors through a fixed random
/// projection; words hashed to fixed random rows and summed. Seedable and
/// deterministic; stands in where a real encoder would plug into the same
/// trait.
pub struct HashProjectionExtractor {
    name: String,
    seed: u64,
    grid: usize,
    width: usize,
    projection: Vec<f64>, // [grid*grid*3, width]
}

impl HashProjectionExtractor {
    pub fn new(name: &str, seed: u64) -> HashProjectionExtractor {
        let (grid, width) = (8, 64);
        let mut rng = Rng::new(seed);
        let n_in = grid * grid * 3;
        let projection = (0..n_in * width).map(|_| rng.normal()).collect();
        HashProjectionExtractor { name: name.to_string(), seed, grid, width, projection }
    }
}

impl FeatureExtractor for HashProjectionExtractor {
    fn image_feature(&self, image: &Image) -> Vec<f64> {
        let g = self.grid;
        let mut pooled = vec![0.0; g * g * 3];
        let (h, w) = (image.height(), image.width());
        let mut counts = vec![0usize; g * g];
        for y in 0..h {
            let gy = (y * g) / h;
            for x in 0..w {
                let gx = (x * g) / w;
                let px = image.get(y, x);
                let cell = gy * g + gx;
                for c in 0..3 {
                    pooled[cell * 3 + c] += px[c];
                }
                counts[cell] += 1;
            }
        }
        for cell in 0..g * g {
            if counts[cell] > 0 {
                for c in 0..3 {
                    pooled[cell * 3 + c] /= counts[cell] as f64;
                }
            }
        }
        let mut out = vec![0.0; self.width];
        for (i, &v) in pooled.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &self.projection[i * self.width..(i + 1) * self.width];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += v * p;
            }
        }
        out
    }

    fn text_feature(&self, prompt: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for word in prompt.split_whitespace() {
            let word = word.to_lowercase();
            // FNV-1a word hash seeds a per-word row.
            let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
            for b in word.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            let mut wrng = Rng::new(h);
            for o in out.iter_mut() {
                *o += wrng.normal();
            }
        }
        out
    }

    fn name(&self) -> &str {
        &self.name
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("feature widths differ"));
    }
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero-norm feature"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

// ---------------------------------------------------------------------------
// Cosine metrics
// ---------------------------------------------------------------------------

/// Mean over frames of cosine(frame feature, prompt feature).
pub fn textual_alignment(
    frames: &[Image],
    prompt: &str,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::invalid("need at least one frame"));
    }
    let pf = extractor.text_feature(prompt);
    let mut acc = 0.0;
    for f in frames {
        acc += cosine(&extractor.image_feature(f), &pf)?;
    }
    Ok(acc / frames.len() as f64)
}

/// Mean over all frame x reference pairs of feature cosine.
pub fn image_alignment(
    frames: &[Image],
    references: &[Image],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if frames.is_empty() || references.is_empty() {
        return Err(Error::invalid("need at least one frame and one reference"));
    }
    let rf: Vec<Vec<f64>> = references.iter().map(|r| extractor.image_feature(r)).collect();
    let mut acc = 0.0;
    for f in frames {
        let ff = extractor.image_feature(f);
        for r in &rf {
            acc += cosine(&ff, r)?;
        }
    }
    Ok(acc / (frames.len() * references.len()) as f64)
}

/// Mean cosine over consecutive frame pairs.
pub fn temporal_consistency(frames: &[Image], extractor: &dyn FeatureExtractor) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::invalid("temporal consistency needs at least 2 frames"));
    }
    let feats: Vec<Vec<f64>> = frames.iter().map(|f| extractor.image_feature(f)).collect();
    let mut acc = 0.0;
    for pair in feats.windows(2) {
        acc += cosine(&pair[0], &pair[1])?;
    }
    Ok(acc / (frames.len() - 1) as f64)
}

// ---------------------------------------------------------------------------
// Co-occurrence / identity oracle
// ---------------------------------------------------------------------------

/// Color-blob signature of one synthetic subject.
#[derive(Debug, Clone)]
pub struct SubjectSignature {
    pub name: String,
    pub color: Rgb,
    /// Euclidean RGB distance below which a pixel counts as this subject.
    pub color_tolerance: f64,
    /// Minimum connected-blob area in pixels.
    pub min_area: usize,
}

impl SubjectSignature {
    pub fn for_class(class: &str) -> Result<SubjectSignature> {
        let spec = class_spec(class)?;
        Ok(SubjectSignature {
            name: class.to_string(),
            color: spec.color,
            color_tolerance: 0.35,
            min_area: 12,
        })
    }
}

/// Largest 4-connected component of pixels within color tolerance.
pub fn largest_blob_area(frame: &Image, sig: &SubjectSignature) -> usize {
    let (h, w) = (frame.height(), frame.width());
    let mut member = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = frame.get(y, x);
            let d2: f64 = (0..3).map(|c| (p[c] - sig.color[c]) * (p[c] - sig.color[c])).sum();
            member[y * w + x] = d2.sqrt() <= sig.color_tolerance;
        }
    }
    let mut seen = vec![false; h * w];
    let mut best = 0usize;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !member[start] || seen[start] {
            continue;
        }
        let mut area = 0usize;
        stack.push(start);
        seen[start] = true;
        while let Some(i) = stack.pop() {
            area += 1;
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if member[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        best = best.max(area);
    }
    best
}

pub fn subject_present(frame: &Image, sig: &SubjectSignature) -> bool {
    largest_blob_area(frame, sig) >= sig.min_area
}

/// Fraction of frames in which every subject's blob is detected.
pub fn cooccurrence_oracle(frames: &[Image], sigs: &[SubjectSignature]) -> f64 {
    if frames.is_empty() || sigs.is_empty() {
        return 0.0;
    }
    let hits = frames
        .iter()
        .filter(|f| sigs.iter().all(|s| subject_present(f, s)))
        .count();
    hits as f64 / frames.len() as f64
}

/// Per-subject detection rate across frames, signature order.
pub fn per_subject_presence(frames: &[Image], sigs: &[SubjectSignature]) -> Vec<f64> {
    sigs.iter()
        .map(|s| {
            if frames.is_empty() {
                0.0
            } else {
                frames.iter().filter(|f| subject_present(f, s)).count() as f64
                    / frames.len() as f64
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Attention IoU
// ---------------------------------------------------------------------------

/// IoU between each thresholded token map and its positive mask.
pub fn attention_iou(
    maps: &AttentionMapSet,
    masks: &[GuidanceMask],
    threshold: f64,
) -> Result<Vec<f64>> {
    if maps.per_token_maps.len() != masks.len() {
        return Err(Error::invalid("token/mask counts differ"));
    }
    let mut out = Vec::with_capacity(masks.len());
    for (map, gm) in maps.per_token_maps.iter().zip(masks) {
        if map.shape() != gm.positive.shape() {
            return Err(Error::invalid(format!(
                "map shape {:?} vs mask shape {:?}",
                map.shape(),
                gm.positive.shape()
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (m, p) in map.data().iter().zip(gm.positive.data()) {
            let pred = *m >= threshold;
            let truth = *p == 1.0;
            if pred && truth {
                inter += 1;
            }
            if pred || truth {
                union += 1;
            }
        }
        out.push(if union == 0 { 0.0 } else { inter as f64 / union as f64 });
    }
    Ok(out)
}

/// Mean IoU across tokens, convenience for trend comparisons.
pub fn mean_attention_iou(
    maps: &AttentionMapSet,
    masks: &[GuidanceMask],
    threshold: f64,
) -> Result<f64> {
    let per = attention_iou(maps, masks, threshold)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One evaluation row: the four cosine metrics plus oracle columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino_i: f64,
    pub temporal_consistency: f64,
    pub cooccurrence: f64,
    pub identity: Vec<(String, f64)>,
    pub attention_iou: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let cos = [self.clip_t, self.clip_i, self.dino_i, self.temporal_consistency];
        for v in cos {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("cosine metric {v} outside [-1, 1]")));
            }
        }
        if !self.cooccurrence.is_finite() {
            return Err(Error::invalid("non-finite oracle metric"));
        }
        Ok(())
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("CLIP-T,CLIP-I,DINO-I,T. Cons.,Co-occur");
        for (name, _) in &self.identity {
            let _ = write!(h, ",Id[{name}]");
        }
        for (name, _) in &self.attention_iou {
            let _ = write!(h, ",IoU[{name}]");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.clip_t, self.clip_i, self.dino_i, self.temporal_consistency, self.cooccurrence
        );
        for (_, v) in &self.identity {
            let _ = write!(r, ",{v:.4}");
        }
        for (_, v) in &self.attention_iou {
            let _ = write!(r, ",{v:.4}");
        }
        r
    }

    pub fn pretty_table(&self) -> String {
        let header = self.csv_header();
        let row = self.csv_row();
        let cols: Vec<&str> = header.split(',').collect();
        let vals: Vec<&str> = row.split(',').collect();
        let widths: Vec<usize> =
            cols.iter().zip(&vals).map(|(c, v)| c.len().max(v.len())).collect();
        let mut out = String::new();
        for ((c, _), w) in cols.iter().zip(&vals).zip(&widths) {
            let _ = write!(out, "| {c:>w$} ", w = w);
        }
        out.push_str("|\n");
        for w in &widths {
            let _ = write!(out, "|{:-<w$}", "", w = w + 2);
        }
        out.push_str("|\n");
        for ((_, v), w) in cols.iter().zip(&vals).zip(&widths) {
            let _ = write!(out, "| {v:>w$} ", w = w);
        }
        out.push_str("|\n");
        out
    }
}

/// Compute the full report for one generated clip.
pub fn evaluate_clip(
    frames: &[Image],
    prompt: &str,
    references: &[Image],
    sigs: &[SubjectSignature],
    clip_like: &dyn FeatureExtractor,
    dino_like: &dyn FeatureExtractor,
) -> Result<MetricReport> {
    let clip_t = textual_alignment(frames, prompt, clip_like)?;
    let clip_i = image_alignment(frames, references, clip_like)?;
    let dino_i = image_alignment(frames, references, dino_like)?;
    let t_cons = if frames.len() >= 2 {
        temporal_consistency(frames, clip_like)?
    } else {
        1.0
    };
    let cooc = cooccurrence_oracle(frames, sigs);
    let presence = per_subject_presence(frames, sigs);
    let identity =
        sigs.iter().zip(presence).map(|(s, p)| (s.name.clone(), p)).collect();
    let report = MetricReport {
        clip_t,
        clip_i,
        dino_i,
        temporal_consistency: t_cons,
        cooccurrence: cooc,
        identity,
        attention_iou: Vec::new(),
    };
    report.validate()?;
    Ok(report)
}
