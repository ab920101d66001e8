//! Fixed feature extractors used by the perceptual loss and the perceptual
//! distance metric.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{hex_digest, Container};
use crate::error::{Result, UstError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const EXTRACTOR_KIND: &str = "ust-extractor";

/// Image to an ordered list of feature maps. Implementations are fixed:
/// the trainer never updates them.
pub trait FeatureExtractor: Send + Sync {
    /// Names the implementation and identifies its weights.
    fn descriptor(&self) -> String;

    fn num_layers(&self) -> usize;

    /// Feature maps `[n, c_l, h_l, w_l]` of `x`, built into `g`.
    fn features_g(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let f = self.features_g(&mut g, v)?;
        Ok(f.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// Raw pixels as a single feature layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn descriptor(&self) -> String {
        "identity".into()
    }

    fn num_layers(&self) -> usize {
        1
    }

    fn features_g(&self, _g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

/// Five-stage convolutional stack. Each stage is a 3x3 convolution and a
/// ReLU whose output is one feature layer; stages are separated by 2x2
/// average pooling (skipped once the map is down to a single pixel).
#[derive(Debug, Clone)]
pub struct ConvExtractor {
    widths: Vec<usize>,
    params: ParamStore,
    origin: String,
}

impl ConvExtractor {
    pub const DEFAULT_WIDTHS: [usize; 5] = [8, 16, 32, 32, 32];

    /// Untrained weights drawn from a seeded generator.
    pub fn random(in_channels: usize, seed: u64) -> Self {
        Self::random_with_widths(in_channels, &Self::DEFAULT_WIDTHS, seed)
    }

    pub fn random_with_widths(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut c_in = in_channels;
        for (i, &c) in widths.iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            params
                .insert(format!("phi.conv{i}.w"), Tensor::randn(&[c, c_in, 3, 3], std, &mut rng))
                .expect("fresh names");
            params
                .insert(format!("phi.conv{i}.b"), Tensor::zeros(&[c]))
                .expect("fresh names");
            c_in = c;
        }
        ConvExtractor {
            widths: widths.to_vec(),
            params,
            origin: format!("random-conv(seed={seed})"),
        }
    }

    /// Weights from a container holding `phi.conv{i}.w` / `phi.conv{i}.b`.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != EXTRACTOR_KIND {
            return Err(UstError::Checkpoint(format!(
                "{} holds a `{}` container, expected `{EXTRACTOR_KIND}`",
                path.display(),
                c.kind
            )));
        }
        let mut params = ParamStore::default();
        let mut widths = Vec::new();
        let mut prev = None;
        for i in 0.. {
            let (Some(w), Some(b)) = (c.get(&format!("phi.conv{i}.w")), c.get(&format!("phi.conv{i}.b"))) else {
                break;
            };
            let s = w.shape();
            if s.len() != 4 || s[2] != 3 || s[3] != 3 || b.shape() != [s[0]] || prev.is_some_and(|p| p != s[1]) {
                return Err(UstError::Checkpoint(format!("extractor layer {i} has inconsistent shapes")));
            }
            prev = Some(s[0]);
            widths.push(s[0]);
            params.insert(format!("phi.conv{i}.w"), w.clone())?;
            params.insert(format!("phi.conv{i}.b"), b.clone())?;
        }
        if widths.is_empty() {
            return Err(UstError::Checkpoint(format!("{} contains no extractor layers", path.display())));
        }
        Ok(ConvExtractor {
            widths,
            params,
            origin: format!("file({})", path.display()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(EXTRACTOR_KIND, serde_json::json!({ "origin": self.origin }));
        for (n, t) in self.params.iter() {
            c.push(n, t.clone());
        }
        c.write(path)
    }

    /// SHA-256 over the weights in name order.
    pub fn weights_digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.params.num_values() * 8);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hex_digest(&bytes)
    }
}

impl FeatureExtractor for ConvExtractor {
    fn descriptor(&self) -> String {
        format!("{} sha256={}", self.origin, &self.weights_digest()[..16])
    }

    fn num_layers(&self) -> usize {
        self.widths.len()
    }

    fn features_g(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.widths.len());
        for i in 0..self.widths.len() {
            if i > 0 {
                let (_, _, hh, ww) = g.value(h).dims4();
                if hh >= 2 && ww >= 2 && hh % 2 == 0 && ww % 2 == 0 {
                    h = g.avgpool2(h)?;
                }
            }
            let w = g.param(&self.params, &format!("phi.conv{i}.w"))?;
            let b = g.param(&self.params, &format!("phi.conv{i}.b"))?;
            h = g.conv2d(h, w, Some(b), 1, 1)?;
            h = g.relu(h);
            out.push(h);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_layers_and_deterministic() {
        let phi = ConvExtractor::random(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
        let a = phi.features(&x).unwrap();
        let b = ConvExtractor::random(3, 7).features(&x).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        let sizes: Vec<usize> = a.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1, 1]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phi.ckpt");
        let phi = ConvExtractor::random(3, 11);
        phi.save(&p).unwrap();
        let back = ConvExtractor::load(&p).unwrap();
        assert_eq!(back.weights_digest(), phi.weights_digest());
        assert_eq!(back.num_layers(), 5);
    }
}
