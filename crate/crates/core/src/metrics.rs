//! SSIM, perceptual distance and the paired evaluation protocol.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Result, UstError};
use crate::losses::FeatureExtractor;
use crate::model::{ImageBatch, MaskBatch, UstModel};
use crate::synth::roi::extract_roi_tensor;
use crate::synth::{DatasetManifest, LoadedSplit, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window_size: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_size: 11,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size % 2 == 0 || self.window_size == 0 {
            return Err(UstError::Config(format!("SSIM window must be odd, got {}", self.window_size)));
        }
        if !(self.gaussian_sigma > 0.0) || !(self.data_range > 0.0) {
            return Err(UstError::Config("SSIM sigma and data range must be positive".into()));
        }
        Ok(())
    }

    /// Normalised 1-D Gaussian taps.
    pub fn window(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let w: Vec<f64> = (0..self.window_size)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.gaussian_sigma.powi(2))).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" Gaussian filtering of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, wt) in win.iter().enumerate() {
                acc += wt * x[i * w + j + t];
            }
            rows[i * ow + j] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, wt) in win.iter().enumerate() {
                acc += wt * rows[(i + t) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// Mean SSIM of two single-channel planes.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig, win: &[f64]) -> f64 {
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, win);
    let my = filter_valid(y, h, w, win);
    let exx = filter_valid(&xx, h, w, win);
    let eyy = filter_valid(&yy, h, w, win);
    let exy = filter_valid(&xy, h, w, win);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = exx[i] - ux * ux;
        let vy = eyy[i] - uy * uy;
        let cxy = exy[i] - ux * uy;
        let num = (2.0 * ux * uy + c1) * (2.0 * cxy + c2);
        let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
        total += num / den;
    }
    total / mx.len() as f64
}

/// Mean local SSIM over a Gaussian window, averaged over channels (and
/// samples). Inputs are `[n, c, h, w]` or `[c, h, w]`.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    if x.shape() != y.shape() {
        return Err(UstError::shape("ssim", x.shape(), y.shape()));
    }
    let s = x.shape();
    if s.len() < 2 {
        return Err(UstError::Contract(format!("ssim needs spatial arrays, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < cfg.window_size || w < cfg.window_size {
        return Err(UstError::Contract(format!(
            "SSIM window {} is larger than the {h}x{w} image",
            cfg.window_size
        )));
    }
    let win = cfg.window();
    let planes = x.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let r = p * h * w..(p + 1) * h * w;
        total += ssim_plane(&x.data()[r.clone()], &y.data()[r], h, w, cfg, &win);
    }
    Ok(total / planes as f64)
}

/// `(x + 1) / 2`: images in `[-1, 1]` to `[0, 1]` for SSIM.
pub fn to_unit_range(t: &Tensor) -> Tensor {
    t.map(|v| (v + 1.0) * 0.5)
}

/// Feature maps normalised to unit length along channels at every
/// position.
fn unit_normalize(f: &Tensor) -> Tensor {
    let (n, c, h, w) = f.dims4();
    let mut out = f.clone();
    let p = h * w;
    let d = out.data_mut();
    for s in 0..n {
        for q in 0..p {
            let idx = |ch: usize| s * c * p + ch * p + q;
            let norm = (0..c).map(|ch| d[idx(ch)].powi(2)).sum::<f64>().sqrt();
            for ch in 0..c {
                d[idx(ch)] /= norm + 1e-10;
            }
        }
    }
    out
}

/// Per layer: unit-normalise channels, take the mean squared difference;
/// then average over layers.
pub fn perceptual_distance(x: &Tensor, y: &Tensor, phi: &dyn FeatureExtractor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(UstError::shape("perceptual_distance", x.shape(), y.shape()));
    }
    let fx = phi.features(x)?;
    let fy = phi.features(y)?;
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(UstError::Contract("feature extractor returned inconsistent layers".into()));
    }
    let mut total = 0.0;
    for (a, b) in fx.iter().zip(&fy) {
        let (na, nb) = (unit_normalize(a), unit_normalize(b));
        let msd = na.data().iter().zip(nb.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / na.numel() as f64;
        total += msd;
    }
    Ok(total / fx.len() as f64)
}

/// Mean scores over the test pairs, scaled to [0, 100]. Try-on columns
/// are `None` when the model has no context path (no Fit-in module).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub try_on_ssim: Option<f64>,
    pub try_on_perceptual: Option<f64>,
    pub take_off_ssim: f64,
    pub take_off_perceptual: f64,
    pub n_try_on: usize,
    pub n_take_off: usize,
    pub checkpoint_digest: String,
    pub extractor: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "try_on_ssim,try_on_perceptual,take_off_ssim,take_off_perceptual,n_try_on,n_take_off,checkpoint_digest,extractor";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
        format!(
            "{},{},{:.4},{:.4},{},{},{},\"{}\"",
            opt(self.try_on_ssim),
            opt(self.try_on_perceptual),
            self.take_off_ssim,
            self.take_off_perceptual,
            self.n_try_on,
            self.n_take_off,
            self.checkpoint_digest,
            self.extractor.replace('"', "'")
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Raw (unscaled) scores of one test sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub try_on_ssim: Option<f64>,
    pub try_on_perceptual: Option<f64>,
    pub take_off_ssim: f64,
    pub take_off_perceptual: f64,
}

/// The two translations the protocol needs.
pub trait Translator {
    fn take_off(&self, x_a: &ImageBatch, m_a: &MaskBatch) -> Result<ImageBatch>;
    /// `None` when the translator cannot place objects into a context.
    fn try_on(&self, x_b: &ImageBatch, m_a: &MaskBatch, context: &ImageBatch) -> Result<Option<ImageBatch>>;
}

impl Translator for UstModel {
    fn take_off(&self, x_a: &ImageBatch, m_a: &MaskBatch) -> Result<ImageBatch> {
        UstModel::take_off(self, x_a, m_a)
    }

    fn try_on(&self, x_b: &ImageBatch, m_a: &MaskBatch, context: &ImageBatch) -> Result<Option<ImageBatch>> {
        if !self.config().use_fit_in {
            return Ok(None);
        }
        UstModel::try_on(self, x_b, m_a, context).map(Some)
    }
}

/// Score every domain-A test sample against its paired catalog image.
///
/// Take-off compares `x_ab` with the paired `x_b`. Try-on renders the
/// paired `x_b` into the sample's own mask and masked-out context, then
/// compares the RoI of the real image with the RoI of the rendering (both
/// cropped with the real mask). SSIM runs on images mapped to `[0, 1]`.
pub fn score_samples(
    t: &dyn Translator,
    split: &LoadedSplit,
    phi: &dyn FeatureExtractor,
    cfg: &SsimConfig,
) -> Result<Vec<SampleScores>> {
    let b_by_pair: HashMap<&str, usize> = split.b.iter().enumerate().map(|(i, s)| (s.pair_id.as_str(), i)).collect();
    let mut out = Vec::with_capacity(split.a.len());
    for (i, a) in split.a.iter().enumerate() {
        let bi = *b_by_pair
            .get(a.pair_id.as_str())
            .ok_or_else(|| UstError::Dataset(format!("sample `{}` has no paired catalog image", a.id)))?;
        let (x_a, m_a) = split.a_batch(&[i])?;
        let x_b = split.b_batch(&[bi])?;
        let x_ab = t.take_off(&x_a, &m_a)?;
        let take_off_ssim = ssim(&to_unit_range(x_ab.tensor()), &to_unit_range(x_b.tensor()), cfg)?;
        let take_off_perceptual = perceptual_distance(x_ab.tensor(), x_b.tensor(), phi)?;
        let context = crate::model::masked_context(&x_a, &m_a)?;
        let (mut try_on_ssim, mut try_on_perceptual) = (None, None);
        if let Some(x_ba) = t.try_on(&x_b, &m_a, &context)? {
            let size = x_a.hw().0;
            let roi_real = extract_roi_tensor(x_a.tensor(), &m_a, size)?;
            let roi_fake = extract_roi_tensor(x_ba.tensor(), &m_a, size)?;
            try_on_ssim = Some(ssim(&to_unit_range(&roi_fake), &to_unit_range(&roi_real), cfg)?);
            try_on_perceptual = Some(perceptual_distance(&roi_fake, &roi_real, phi)?);
        }
        out.push(SampleScores {
            try_on_ssim,
            try_on_perceptual,
            take_off_ssim,
            take_off_perceptual,
        });
    }
    Ok(out)
}

/// Average per-sample scores into a report.
pub fn summarize(scores: &[SampleScores], checkpoint_digest: String, extractor: String) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(UstError::Dataset("no test pairs to evaluate".into()));
    }
    let n = scores.len() as f64;
    let mean = |f: &dyn Fn(&SampleScores) -> f64| 100.0 * scores.iter().map(f).sum::<f64>() / n;
    let try_on: Vec<(f64, f64)> = scores
        .iter()
        .filter_map(|s| s.try_on_ssim.zip(s.try_on_perceptual))
        .collect();
    let (try_on_ssim, try_on_perceptual) = if try_on.is_empty() {
        (None, None)
    } else {
        let k = try_on.len() as f64;
        (
            Some(100.0 * try_on.iter().map(|p| p.0).sum::<f64>() / k),
            Some(100.0 * try_on.iter().map(|p| p.1).sum::<f64>() / k),
        )
    };
    Ok(EvalReport {
        try_on_ssim,
        try_on_perceptual,
        take_off_ssim: mean(&|s| s.take_off_ssim),
        take_off_perceptual: mean(&|s| s.take_off_perceptual),
        n_try_on: try_on.len(),
        n_take_off: scores.len(),
        checkpoint_digest,
        extractor,
    })
}

pub fn evaluate_model(
    model: &UstModel,
    test: &LoadedSplit,
    phi: &dyn FeatureExtractor,
    cfg: &SsimConfig,
    checkpoint_digest: String,
) -> Result<EvalReport> {
    let scores = score_samples(model, test, phi, cfg)?;
    summarize(&scores, checkpoint_digest, phi.descriptor())
}

/// Evaluate a stored model on the manifest's test split.
pub fn evaluate(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    phi: &dyn FeatureExtractor,
    cfg: &SsimConfig,
) -> Result<EvalReport> {
    let container = Container::read(checkpoint)?;
    let model = UstModel::from_container(&container)?;
    let test = LoadedSplit::load(manifest, Some(Split::Test))?;
    let size = test.a[0].image.shape()[2];
    if size != model.config().image_size {
        return Err(UstError::Checkpoint(format!(
            "model expects {}px images, dataset has {size}px",
            model.config().image_size
        )));
    }
    evaluate_model(&model, &test, phi, cfg, container.digest()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::IdentityExtractor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let x = rand_img(3, &[2, 3, 16, 16]);
        assert_eq!(ssim(&x, &x, &SsimConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn window_larger_than_image_is_rejected() {
        let x = rand_img(3, &[1, 1, 8, 8]);
        assert!(ssim(&x, &x, &SsimConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(seed in 0u64..1000) {
            let x = rand_img(seed, &[1, 1, 16, 16]);
            let y = rand_img(seed + 7919, &[1, 1, 16, 16]);
            let c = SsimConfig::default();
            let a = ssim(&x, &y, &c).unwrap();
            let b = ssim(&y, &x, &c).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn noise_degrades_monotonically() {
        let x = rand_img(1, &[1, 1, 24, 24]);
        let noise = Tensor::randn(&[1, 1, 24, 24], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let c = SsimConfig::default();
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let t = k as f64 * 0.05;
            let y = x.zip_map(&noise, |a, n| a + t * n).unwrap();
            let s = ssim(&x, &y, &c).unwrap();
            assert!(s <= prev + 1e-12, "t={t}: {s} > {prev}");
            prev = s;
        }
    }

    #[test]
    fn perceptual_distance_basics() {
        let x = rand_img(1, &[1, 3, 8, 8]);
        let y = rand_img(2, &[1, 3, 8, 8]);
        let phi = IdentityExtractor;
        assert_eq!(perceptual_distance(&x, &x, &phi).unwrap(), 0.0);
        assert_eq!(
            perceptual_distance(&x, &y, &phi).unwrap(),
            perceptual_distance(&y, &x, &phi).unwrap()
        );
    }
}
