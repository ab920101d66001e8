use serde::{Deserialize, Serialize};

use crate::error::{Result, UstError};

/// Architecture of the two-stream model. Every width and depth is a
/// configuration value so that tiny variants exist for gradient checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side length of the (square) images of both domains.
    pub image_size: usize,
    /// Image channels (3 for RGB).
    pub channels: usize,
    /// Width of the first content-encoder convolution block.
    pub base_channels: usize,
    pub n_downsample: usize,
    pub n_res_blocks: usize,
    /// Kernel size of the first encoder block and the last decoder block.
    pub outer_kernel: usize,
    /// Kernel size of the decoder up-sampling convolutions.
    pub up_kernel: usize,
    pub style_dim: usize,
    pub style_channels: usize,
    pub style_downsamples: usize,
    pub mlp_hidden: usize,
    pub mlp_hidden_layers: usize,
    pub disc_channels: usize,
    pub disc_downsamples: usize,
    pub use_mask_attention: bool,
    pub use_fit_in: bool,
    pub use_shared_style_encoder: bool,
    /// Domain-A images are multiplied by their mask before style encoding.
    pub mask_style_input: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    /// One convolution block, two down-sampling layers and four residual
    /// blocks per content encoder; mirrored decoders; four stride-2 style
    /// convolutions; a two-hidden-layer MLP.
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            channels: 3,
            base_channels: 64,
            n_downsample: 2,
            n_res_blocks: 4,
            outer_kernel: 7,
            up_kernel: 5,
            style_dim: 8,
            style_channels: 64,
            style_downsamples: 4,
            mlp_hidden: 256,
            mlp_hidden_layers: 2,
            disc_channels: 64,
            disc_downsamples: 3,
            use_mask_attention: true,
            use_fit_in: true,
            use_shared_style_encoder: true,
            mask_style_input: true,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Narrow 64x64 model that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            base_channels: 8,
            n_res_blocks: 2,
            outer_kernel: 5,
            up_kernel: 3,
            style_channels: 8,
            mlp_hidden: 32,
            disc_channels: 16,
            disc_downsamples: 2,
            ..Self::default()
        }
    }

    /// 8x8 images, 4-channel blocks: small enough for exhaustive
    /// finite-difference checks.
    pub fn reduced() -> Self {
        ModelConfig {
            image_size: 8,
            base_channels: 4,
            n_downsample: 1,
            n_res_blocks: 1,
            outer_kernel: 3,
            up_kernel: 3,
            style_dim: 8,
            style_channels: 4,
            style_downsamples: 2,
            mlp_hidden: 8,
            disc_channels: 4,
            disc_downsamples: 1,
            ..Self::default()
        }
    }

    pub fn content_channels(&self) -> usize {
        self.base_channels << self.n_downsample
    }

    pub fn content_size(&self) -> usize {
        self.image_size >> self.n_downsample
    }

    /// Channel count of every AdaIN-normalised layer of a decoder, in
    /// evaluation order: two per residual block, then one per up-sampling
    /// layer.
    pub fn adain_layout(&self) -> Vec<usize> {
        let cc = self.content_channels();
        let mut layout = vec![cc; 2 * self.n_res_blocks];
        for i in 0..self.n_downsample {
            layout.push(cc >> (i + 1));
        }
        layout
    }

    /// Length of the MLP output: one (gamma, beta) pair per AdaIN channel.
    pub fn adain_budget(&self) -> usize {
        2 * self.adain_layout().iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UstError::Config(m));
        if self.channels == 0 || self.base_channels == 0 || self.style_dim == 0 {
            return bad("channel counts and style_dim must be positive".into());
        }
        if self.image_size % (1 << self.n_downsample) != 0 || self.content_size() == 0 {
            return bad(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size, self.n_downsample
            ));
        }
        if self.image_size % (1 << self.disc_downsamples) != 0 {
            return bad("image_size must be divisible by 2^disc_downsamples".into());
        }
        if self.image_size >> self.style_downsamples == 0 {
            return bad(format!(
                "{} stride-2 style convolutions do not fit a {} pixel image",
                self.style_downsamples, self.image_size
            ));
        }
        if self.image_size % 2 != 0 {
            return bad("image_size must be even (symmetry loss pairs columns)".into());
        }
        for k in [self.outer_kernel, self.up_kernel] {
            if k % 2 == 0 {
                return bad(format!("kernel size {k} must be odd"));
            }
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::default(), ModelConfig::desk(), ModelConfig::reduced()] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn adain_budget_counts_residual_and_upsampling_layers() {
        let c = ModelConfig::default();
        // 4 res blocks x 2 layers x 256 channels + up layers of 128 and 64
        assert_eq!(c.adain_budget(), 2 * (8 * 256 + 128 + 64));
    }

    #[test]
    fn rejects_even_kernels_and_bad_sizes() {
        let mut c = ModelConfig::desk();
        c.up_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.image_size = 66;
        assert!(c.validate().is_err());
    }
}
