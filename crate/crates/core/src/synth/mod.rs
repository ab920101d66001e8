//! Two-domain datasets: a procedural generator, the on-disk manifest, and
//! unpaired sampling for training.
//!
//! Directory layout:
//!
//! ```text
//! <root>/manifest.txt
//! <root>/items.json          per-item generator parameters (synthetic only)
//! <root>/domainA/*.png       contextualised images
//! <root>/domainA_masks/*.png {0, 255} object masks
//! <root>/domainB/*.png       catalog images
//! ```
//!
//! `manifest.txt` is tab-separated with `#` comment lines before a header
//! row `id  domain  image  mask  pair_id  split`. Paths are relative to the
//! manifest's directory; `mask` is `-` for domain-B rows.

pub mod render;
pub mod roi;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::hex_digest;
use crate::error::{Result, UstError};
use crate::exec;
use crate::imageio;
use crate::model::{Domain, ImageBatch, MaskBatch};
use crate::tensor::Tensor;

pub use render::{ItemParams, TextureFamily};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ITEMS_FILE: &str = "items.json";
const MANIFEST_MAGIC: &str = "# ust-manifest v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_items: usize,
    pub views_per_item: usize,
    pub texture_families: Vec<TextureFamily>,
    /// Size range of the garment's frame in context views, relative to
    /// the image.
    pub scale_range: (f64, f64),
    pub max_rotation_deg: f64,
    /// Largest garment-centre offset as a fraction of the image size.
    pub max_shift: f64,
    /// Texture period range in canonical garment units.
    pub period_range: (f64, f64),
    /// Fraction of items held out as the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            n_items: 200,
            views_per_item: 3,
            texture_families: TextureFamily::ALL.to_vec(),
            scale_range: (0.7, 0.85),
            max_rotation_deg: 5.0,
            max_shift: 0.03,
            period_range: (0.3, 0.5),
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UstError::Config(m));
        if self.n_items < 2 {
            return bad(format!("n_items must be at least 2, got {}", self.n_items));
        }
        if self.views_per_item == 0 {
            return bad("views_per_item must be at least 1".into());
        }
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return bad(format!("image_size must be even and >= 8, got {}", self.image_size));
        }
        if self.texture_families.is_empty() {
            return bad("at least one texture family is required".into());
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("invalid scale range ({lo}, {hi})"));
        }
        let (plo, phi) = self.period_range;
        if !(plo > 0.0 && plo <= phi) {
            return bad(format!("invalid period range ({plo}, {phi})"));
        }
        if !(0.0..=90.0).contains(&self.max_rotation_deg) || self.max_shift < 0.0 {
            return bad("rotation must be within [0, 90] degrees and shift non-negative".into());
        }
        // the rotated garment frame plus the largest offset must stay in frame
        let t = self.max_rotation_deg.to_radians();
        let reach = hi * (t.cos() + t.sin()) / 2.0 + self.max_shift;
        if reach > 0.5 {
            return bad(format!(
                "scale {hi} with shift {} can push the object out of the frame",
                self.max_shift
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub pair_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory holding the manifest; sample paths are relative to it.
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub spec_digest: String,
}

impl DatasetManifest {
    pub fn count(&self, domain: Domain, split: Split) -> usize {
        self.samples
            .iter()
            .filter(|s| s.domain == domain && s.split == split)
            .count()
    }

    pub fn select(&self, domain: Domain, split: Option<Split>) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.domain == domain && split.is_none_or(|sp| s.split == sp))
            .collect()
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut buf = Vec::new();
        writeln!(buf, "{MANIFEST_MAGIC}").unwrap();
        writeln!(buf, "# spec_digest={}", self.spec_digest).unwrap();
        for d in [Domain::A, Domain::B] {
            for s in [Split::Train, Split::Test] {
                writeln!(buf, "# count {d} {} {}", s.name(), self.count(d, s)).unwrap();
            }
        }
        {
            let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(&mut buf);
            w.write_record(["id", "domain", "image", "mask", "pair_id", "split"])?;
            for s in &self.samples {
                let mask = s.mask.as_ref().map_or("-".to_string(), |m| m.display().to_string());
                w.write_record([
                    s.id.as_str(),
                    &s.domain.to_string(),
                    &s.image.display().to_string(),
                    &mask,
                    &s.pair_id,
                    s.split.name(),
                ])?;
            }
            w.flush().map_err(|e| UstError::io(&path, e))?;
        }
        fs::write(&path, buf).map_err(|e| UstError::io(&path, e))
    }
}

/// Read and validate a manifest: unique ids, existing files, a mask for
/// every domain-A row and exactly one domain-B partner for every pair id
/// used in domain A.
pub fn load(manifest_path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            UstError::MissingFile(manifest_path.to_path_buf())
        } else {
            UstError::io(manifest_path, e)
        }
    })?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut spec_digest = String::new();
    let mut body = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| UstError::io(manifest_path, e))?;
        if let Some(c) = line.strip_prefix('#') {
            if let Some(d) = c.trim().strip_prefix("spec_digest=") {
                spec_digest = d.to_string();
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        body.push_str(&line);
        body.push('\n');
    }
    let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(body.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["id", "domain", "image", "mask", "pair_id", "split"] {
        return Err(UstError::Dataset(format!("unexpected manifest header {header:?}")));
    }
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| UstError::Dataset(format!("manifest row {}: {m}", row + 1));
        let domain: Domain = rec[1].parse().map_err(|_| bad(format!("bad domain `{}`", &rec[1])))?;
        let split = match &rec[5] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("bad split `{other}`"))),
        };
        let mask = match (&rec[3], domain) {
            ("-" | "", Domain::A) => return Err(bad(format!("domain-A sample `{}` has no mask", &rec[0]))),
            ("-" | "", Domain::B) => None,
            (m, _) => Some(PathBuf::from(m)),
        };
        if !ids.insert(rec[0].to_string()) {
            return Err(bad(format!("duplicate id `{}`", &rec[0])));
        }
        let s = Sample {
            id: rec[0].to_string(),
            domain,
            image: PathBuf::from(&rec[2]),
            mask,
            pair_id: rec[4].to_string(),
            split,
        };
        for p in std::iter::once(&s.image).chain(s.mask.as_ref()) {
            if !root.join(p).is_file() {
                return Err(UstError::MissingFile(root.join(p)));
            }
        }
        samples.push(s);
    }
    let mut b_pairs: HashMap<&str, usize> = HashMap::new();
    for s in samples.iter().filter(|s| s.domain == Domain::B) {
        *b_pairs.entry(&s.pair_id).or_default() += 1;
    }
    for s in samples.iter().filter(|s| s.domain == Domain::A) {
        match b_pairs.get(s.pair_id.as_str()) {
            Some(1) => {}
            Some(n) => return Err(UstError::Dataset(format!("pair id `{}` has {n} catalog images", s.pair_id))),
            None => {
                return Err(UstError::Dataset(format!(
                    "sample `{}`: pair id `{}` has no catalog image",
                    s.id, s.pair_id
                )))
            }
        }
    }
    Ok(DatasetManifest {
        root,
        samples,
        spec_digest,
    })
}

/// Seeded generator for item `i`, independent of every other item.
fn item_rng(seed: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item as u64 + 1);
    rng
}

/// Deterministic per-item parameters of a spec.
pub fn item_params(spec: &SynthSpec) -> Vec<ItemParams> {
    let ranges = render::SampleRanges {
        families: &spec.texture_families,
        scale: spec.scale_range,
        max_rotation_deg: spec.max_rotation_deg,
        max_shift: spec.max_shift,
        period: spec.period_range,
        views: spec.views_per_item,
    };
    (0..spec.n_items)
        .map(|i| render::sample_item(i, &ranges, &mut item_rng(spec.seed, i)))
        .collect()
}

/// Test items: a seeded choice of `round(test_fraction * n)` items.
fn test_items(spec: &SynthSpec) -> HashSet<usize> {
    let n_test = (spec.test_fraction * spec.n_items as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_items).collect();
    let mut rng = item_rng(spec.seed, usize::MAX - 1);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.into_iter().take(n_test).collect()
}

pub fn item_id(i: usize) -> String {
    format!("item{i:04}")
}

/// Render a whole dataset into `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for d in ["domainA", "domainA_masks", "domainB"] {
        let p = out_dir.join(d);
        fs::create_dir_all(&p).map_err(|e| UstError::io(&p, e))?;
    }
    let items = item_params(spec);
    let test = test_items(spec);
    let size = spec.image_size;
    let written: Vec<Result<Vec<Sample>>> = exec::map_indices(items.len(), |i| {
        let p = &items[i];
        let split = if test.contains(&i) { Split::Test } else { Split::Train };
        let pair_id = item_id(i);
        let mut out = Vec::with_capacity(1 + p.views.len());
        let b_rel = PathBuf::from(format!("domainB/{pair_id}.png"));
        imageio::write_rgb_bytes(&out_dir.join(&b_rel), size, size, &render::render_catalog(p, size))?;
        out.push(Sample {
            id: format!("{pair_id}_b"),
            domain: Domain::B,
            image: b_rel,
            mask: None,
            pair_id: pair_id.clone(),
            split,
        });
        for k in 0..p.views.len() {
            let (rgb, mask) = render::render_context(p, k, size);
            let a_rel = PathBuf::from(format!("domainA/{pair_id}_v{k}.png"));
            let m_rel = PathBuf::from(format!("domainA_masks/{pair_id}_v{k}.png"));
            imageio::write_rgb_bytes(&out_dir.join(&a_rel), size, size, &rgb)?;
            imageio::write_mask_bytes(&out_dir.join(&m_rel), size, size, &mask)?;
            out.push(Sample {
                id: format!("{pair_id}_a{k}"),
                domain: Domain::A,
                image: a_rel,
                mask: Some(m_rel),
                pair_id: pair_id.clone(),
                split,
            });
        }
        Ok(out)
    });
    let mut samples = Vec::new();
    for w in written {
        samples.extend(w?);
    }
    let items_path = out_dir.join(ITEMS_FILE);
    let log = serde_json::json!({ "spec": spec, "items": items });
    fs::write(&items_path, serde_json::to_vec_pretty(&log)?).map_err(|e| UstError::io(&items_path, e))?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        samples,
        spec_digest: spec.digest(),
    };
    manifest.write()?;
    Ok(manifest)
}

/// Read the per-item parameter log written by [`generate`].
pub fn read_item_log(root: &Path) -> Result<(SynthSpec, Vec<ItemParams>)> {
    #[derive(Deserialize)]
    struct Log {
        spec: SynthSpec,
        items: Vec<ItemParams>,
    }
    let p = root.join(ITEMS_FILE);
    let bytes = fs::read(&p).map_err(|e| UstError::io(&p, e))?;
    let log: Log = serde_json::from_slice(&bytes)?;
    Ok((log.spec, log.items))
}

// ---- loaded data and unpaired sampling -------------------------------------

/// One decoded image (and mask for domain A).
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub pair_id: String,
    /// `[1, 3, h, w]` in `[-1, 1]`.
    pub image: Tensor,
    /// `[1, 1, h, w]` binary.
    pub mask: Option<Tensor>,
}

/// Decoded images of one split, grouped by domain.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub a: Vec<LoadedSample>,
    pub b: Vec<LoadedSample>,
}

impl LoadedSplit {
    pub fn load(manifest: &DatasetManifest, split: Option<Split>) -> Result<Self> {
        let read = |s: &&Sample| -> Result<LoadedSample> {
            let image = imageio::read_rgb(&manifest.path(&s.image))?;
            let mask = match &s.mask {
                Some(m) => {
                    let t = imageio::read_mask(&manifest.path(m))?;
                    if t.shape()[2..] != image.shape()[2..] {
                        return Err(UstError::Dataset(format!("mask of `{}` does not match its image size", s.id)));
                    }
                    if t.sum() == 0.0 {
                        return Err(UstError::EmptyMask(format!("mask of `{}`", s.id)));
                    }
                    Some(t)
                }
                None => None,
            };
            Ok(LoadedSample {
                id: s.id.clone(),
                pair_id: s.pair_id.clone(),
                image,
                mask,
            })
        };
        let a_rows = manifest.select(Domain::A, split);
        let b_rows = manifest.select(Domain::B, split);
        let a = exec::map_indices(a_rows.len(), |i| read(&a_rows[i])).into_iter().collect::<Result<Vec<_>>>()?;
        let b = exec::map_indices(b_rows.len(), |i| read(&b_rows[i])).into_iter().collect::<Result<Vec<_>>>()?;
        if a.is_empty() || b.is_empty() {
            return Err(UstError::Dataset("split needs samples from both domains".into()));
        }
        let size = a[0].image.shape().to_vec();
        if a.iter().chain(&b).any(|s| s.image.shape() != size) {
            return Err(UstError::Dataset("all images must share one size".into()));
        }
        Ok(LoadedSplit { a, b })
    }

    /// Batch of the given domain-A rows.
    pub fn a_batch(&self, rows: &[usize]) -> Result<(ImageBatch, MaskBatch)> {
        let imgs: Vec<Tensor> = rows.iter().map(|&i| self.a[i].image.clone()).collect();
        let masks: Vec<Tensor> = rows
            .iter()
            .map(|&i| self.a[i].mask.clone().expect("domain-A samples carry masks"))
            .collect();
        Ok((ImageBatch::new(Tensor::stack(&imgs)?)?, MaskBatch::new(Tensor::stack(&masks)?)?))
    }

    pub fn b_batch(&self, rows: &[usize]) -> Result<ImageBatch> {
        let imgs: Vec<Tensor> = rows.iter().map(|&i| self.b[i].image.clone()).collect();
        ImageBatch::new(Tensor::stack(&imgs)?)
    }
}

/// Row indices of an unpaired draw: domain-A rows and domain-B rows drawn
/// independently and uniformly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnpairedDraw {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

pub fn draw_unpaired<R: Rng>(n_a: usize, n_b: usize, batch: usize, rng: &mut R) -> UnpairedDraw {
    let a = (0..batch).map(|_| rng.random_range(0..n_a)).collect();
    let b = (0..batch).map(|_| rng.random_range(0..n_b)).collect();
    UnpairedDraw { a, b }
}

/// Training input. Carries no pairing information.
#[derive(Debug, Clone)]
pub struct UnpairedBatch {
    pub x_a: ImageBatch,
    pub m_a: MaskBatch,
    pub x_b: ImageBatch,
}

impl LoadedSplit {
    pub fn unpaired_batch<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<UnpairedBatch> {
        let d = draw_unpaired(self.a.len(), self.b.len(), batch, rng);
        let (x_a, m_a) = self.a_batch(&d.a)?;
        let x_b = self.b_batch(&d.b)?;
        Ok(UnpairedBatch { x_a, m_a, x_b })
    }
}

/// Independent uniform draws of `batch` A images (with masks) and `batch`
/// B images from the training split, reproducible under `seed`.
pub fn sample_unpaired(manifest: &DatasetManifest, batch: usize, seed: u64) -> Result<UnpairedBatch> {
    let split = LoadedSplit::load(manifest, Some(Split::Train))?;
    split.unpaired_batch(batch, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests;
