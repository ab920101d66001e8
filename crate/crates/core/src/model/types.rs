use std::fmt;
use std::str::FromStr;

use crate::error::{Result, UstError};
use crate::tensor::Tensor;

/// Slack allowed on the `[-1, 1]` image range.
pub const RANGE_TOLERANCE: f64 = 1e-6;

/// `[batch, channel, height, width]` images with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 4 || t.shape()[0] == 0 {
            return Err(UstError::Contract(format!(
                "image batch must be [batch, channel, height, width], got {:?}",
                t.shape()
            )));
        }
        for &v in t.data() {
            if !v.is_finite() {
                return Err(UstError::NonFinite("image batch".into()));
            }
            if v.abs() > 1.0 + RANGE_TOLERANCE {
                return Err(UstError::OutOfRange {
                    context: "image batch".into(),
                    value: v,
                });
            }
        }
        Ok(ImageBatch(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.0.shape()[2], self.0.shape()[3])
    }
}

/// `[batch, 1, height, width]` binary foreground masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch(Tensor);

impl MaskBatch {
    /// Validate binarity and require at least one foreground pixel per mask.
    pub fn new(t: Tensor) -> Result<Self> {
        let m = Self::new_allow_empty(t)?;
        for i in 0..m.batch() {
            if !m.0.sample_data(i).iter().any(|&v| v == 1.0) {
                return Err(UstError::EmptyMask(format!("mask {i} of the batch has no foreground")));
            }
        }
        Ok(m)
    }

    /// Validate binarity only; empty masks are explicitly permitted.
    pub fn new_allow_empty(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 || s[0] == 0 {
            return Err(UstError::Contract(format!("mask batch must be [batch, 1, h, w], got {s:?}")));
        }
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(UstError::Contract("mask values must be 0 or 1".into()));
        }
        Ok(MaskBatch(t))
    }

    pub fn ones(batch: usize, h: usize, w: usize) -> Self {
        MaskBatch(Tensor::full(&[batch, 1, h, w], 1.0))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.0.shape()[2], self.0.shape()[3])
    }

    pub fn is_empty_at(&self, i: usize) -> bool {
        !self.0.sample_data(i).iter().any(|&v| v == 1.0)
    }

    /// `1 - m`.
    pub fn complement(&self) -> Tensor {
        self.0.map(|v| 1.0 - v)
    }

    /// Nearest-neighbour resize; stays binary.
    pub fn resize_nearest(&self, h: usize, w: usize) -> MaskBatch {
        MaskBatch(resize_nearest(&self.0, h, w))
    }
}

/// Nearest-neighbour resize of an NCHW tensor.
pub fn resize_nearest(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, ih, iw) = t.dims4();
    if (ih, iw) == (h, w) {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        for ch in 0..c {
            for i in 0..h {
                let si = ((i as f64 + 0.5) * ih as f64 / h as f64).floor() as usize;
                for j in 0..w {
                    let sj = ((j as f64 + 0.5) * iw as f64 / w as f64).floor() as usize;
                    out.set4(s, ch, i, j, t.at4(s, ch, si.min(ih - 1), sj.min(iw - 1)));
                }
            }
        }
    }
    out
}

/// Spatial content code `[batch, C_c, h, w]` in the space shared by both
/// domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCode(pub Tensor);

/// Style vectors `[batch, style_dim]` in the shared style space.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode(pub Tensor);

impl StyleCode {
    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Image domain: `A` is the contextualised domain (objects in a scene),
/// `B` the object-centric catalog domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Domain {
    A,
    B,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl FromStr for Domain {
    type Err = UstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(UstError::Contract(format!("unknown domain `{other}`"))),
        }
    }
}

/// Which decoder a set of AdaIN parameters drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecoderId {
    /// `G_A`: renders into the contextualised domain (try-on).
    TryOn,
    /// `G_B`: renders the canonical catalog view (take-off).
    TakeOff,
}

impl DecoderId {
    pub fn prefix(self) -> &'static str {
        match self {
            DecoderId::TryOn => "gen_a",
            DecoderId::TakeOff => "gen_b",
        }
    }
}

impl fmt::Display for DecoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderId::TryOn => "G_A",
            DecoderId::TakeOff => "G_B",
        })
    }
}

impl FromStr for DecoderId {
    type Err = UstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "G_A" | "gen_a" | "try-on" => Ok(DecoderId::TryOn),
            "G_B" | "gen_b" | "take-off" => Ok(DecoderId::TakeOff),
            other => Err(UstError::UnknownDecoder(other.to_string())),
        }
    }
}

/// Per-layer `(gamma, beta)` for one decoder, stored as `[batch, budget]`
/// with each layer laid out as its gammas followed by its betas.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaINParams {
    pub target: DecoderId,
    pub layout: Vec<usize>,
    pub values: Tensor,
}

impl AdaINParams {
    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn total_len(&self) -> usize {
        2 * self.layout.iter().sum::<usize>()
    }

    fn offset(&self, layer: usize) -> usize {
        2 * self.layout[..layer].iter().sum::<usize>()
    }

    pub fn gamma(&self, sample: usize, layer: usize) -> &[f64] {
        let off = self.offset(layer);
        &self.values.sample_data(sample)[off..off + self.layout[layer]]
    }

    pub fn beta(&self, sample: usize, layer: usize) -> &[f64] {
        let off = self.offset(layer) + self.layout[layer];
        &self.values.sample_data(sample)[off..off + self.layout[layer]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_batch_enforces_range_and_finiteness() {
        assert!(ImageBatch::new(Tensor::full(&[1, 3, 2, 2], 1.0 + 1e-7)).is_ok());
        assert!(matches!(
            ImageBatch::new(Tensor::full(&[1, 3, 2, 2], 1.01)),
            Err(UstError::OutOfRange { .. })
        ));
        assert!(matches!(
            ImageBatch::new(Tensor::full(&[1, 3, 2, 2], f64::NAN)),
            Err(UstError::NonFinite(_))
        ));
    }

    #[test]
    fn mask_batch_rules() {
        assert!(MaskBatch::new(Tensor::full(&[1, 1, 2, 2], 0.5)).is_err());
        assert!(matches!(MaskBatch::new(Tensor::zeros(&[1, 1, 2, 2])), Err(UstError::EmptyMask(_))));
        assert!(MaskBatch::new_allow_empty(Tensor::zeros(&[1, 1, 2, 2])).is_ok());
        let m = MaskBatch::new(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let r = m.resize_nearest(4, 4);
        assert!(r.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(r.tensor().sum(), 4.0);
    }

    #[test]
    fn decoder_ids_parse() {
        assert_eq!("G_A".parse::<DecoderId>().unwrap(), DecoderId::TryOn);
        assert_eq!("take-off".parse::<DecoderId>().unwrap(), DecoderId::TakeOff);
        assert!(matches!("G_C".parse::<DecoderId>(), Err(UstError::UnknownDecoder(_))));
    }
}
