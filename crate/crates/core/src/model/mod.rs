//! Network components of the two-stream model.
//!
//! Parameter names are grouped by sub-network:
//! `enc_content_a`, `enc_content_b`, `enc_style` (or `enc_style_a` /
//! `enc_style_b` when the style encoder is not shared), `mlp`, `gen_a`,
//! `gen_b`, `dis_a`, `dis_b`.
//!
//! Every forward operation exists twice: a graph-building form (suffix
//! `_g`) used for training, and a tensor-level form that validates its
//! inputs and runs an inference graph.

mod config;
mod types;

pub use config::ModelConfig;
pub use types::{
    resize_nearest, AdaINParams, ContentCode, DecoderId, Domain, ImageBatch, MaskBatch, StyleCode,
    RANGE_TOLERANCE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::error::{Result, UstError};
use crate::graph::{Graph, Var};
use crate::kernels::{self, PixelBox};
use crate::params::ParamStore;
use crate::synth::roi::batch_bboxes;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "ust-model";

const LEAK: f64 = 0.2;

/// AdaIN parameters living in a graph, tagged with their decoder.
#[derive(Debug, Clone, Copy)]
pub struct AdaInVar {
    pub target: DecoderId,
    pub var: Var,
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    He { fan_in: usize },
    Zeros,
    /// Output bias of the style MLP: gammas start at one, betas at zero.
    AdaInBias,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_spec(out: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![c_out, c_in, k, k],
        init: Init::He { fan_in: c_in * k * k },
    });
    if bias {
        out.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![c_out],
            init: Init::Zeros,
        });
    }
}

fn linear_spec(out: &mut Vec<ParamSpec>, name: &str, fin: usize, fout: usize, bias_init: Init) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![fout, fin],
        init: Init::He { fan_in: fin },
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![fout],
        init: bias_init,
    });
}

/// Stable per-parameter seed so that a parameter's initial value depends
/// only on (model seed, parameter name).
fn param_seed(seed: u64, name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap()) ^ seed
}

/// Channel width of style convolution `i`.
fn style_width(cfg: &ModelConfig, i: usize) -> usize {
    cfg.style_channels << i.min(2)
}

fn style_prefixes(cfg: &ModelConfig) -> Vec<&'static str> {
    if cfg.use_shared_style_encoder {
        vec!["enc_style"]
    } else {
        vec!["enc_style_a", "enc_style_b"]
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let cc = cfg.content_channels();
    for p in ["enc_content_a", "enc_content_b"] {
        conv_spec(&mut s, &format!("{p}.conv0"), cfg.channels, cfg.base_channels, cfg.outer_kernel, false);
        let mut c = cfg.base_channels;
        for i in 0..cfg.n_downsample {
            conv_spec(&mut s, &format!("{p}.down{i}"), c, 2 * c, 4, false);
            c *= 2;
        }
        for i in 0..cfg.n_res_blocks {
            conv_spec(&mut s, &format!("{p}.res{i}.conv1"), cc, cc, 3, false);
            conv_spec(&mut s, &format!("{p}.res{i}.conv2"), cc, cc, 3, false);
        }
    }
    for p in style_prefixes(cfg) {
        let mut c_in = cfg.channels;
        for i in 0..cfg.style_downsamples {
            let c_out = style_width(cfg, i);
            conv_spec(&mut s, &format!("{p}.conv{i}"), c_in, c_out, 4, true);
            c_in = c_out;
        }
        linear_spec(&mut s, &format!("{p}.fc"), c_in, cfg.style_dim, Init::Zeros);
    }
    let mut fin = cfg.style_dim;
    for j in 0..cfg.mlp_hidden_layers {
        linear_spec(&mut s, &format!("mlp.fc{j}"), fin, cfg.mlp_hidden, Init::Zeros);
        fin = cfg.mlp_hidden;
    }
    linear_spec(&mut s, "mlp.out", fin, cfg.adain_budget(), Init::AdaInBias);
    for d in [DecoderId::TryOn, DecoderId::TakeOff] {
        let p = d.prefix();
        if d == DecoderId::TryOn && cfg.use_mask_attention {
            conv_spec(&mut s, &format!("{p}.attn"), cc + 1, cc, 3, true);
        }
        for i in 0..cfg.n_res_blocks {
            conv_spec(&mut s, &format!("{p}.res{i}.conv1"), cc, cc, 3, false);
            conv_spec(&mut s, &format!("{p}.res{i}.conv2"), cc, cc, 3, false);
        }
        let mut c = cc;
        for i in 0..cfg.n_downsample {
            conv_spec(&mut s, &format!("{p}.up{i}"), c, c / 2, cfg.up_kernel, false);
            c /= 2;
        }
        if d == DecoderId::TryOn && cfg.use_fit_in {
            conv_spec(&mut s, &format!("{p}.fit"), c + cfg.channels, c, 3, true);
        }
        conv_spec(&mut s, &format!("{p}.out"), c, cfg.channels, cfg.outer_kernel, true);
    }
    for (p, extra) in [("dis_a", usize::from(cfg.use_mask_attention)), ("dis_b", 0)] {
        let mut c_in = cfg.channels + extra;
        for i in 0..cfg.disc_downsamples {
            let c_out = cfg.disc_channels << i;
            conv_spec(&mut s, &format!("{p}.conv{i}"), c_in, c_out, 4, true);
            c_in = c_out;
        }
        conv_spec(&mut s, &format!("{p}.out"), c_in, 1, 3, true);
    }
    s
}

/// The full set of networks: content encoders, style encoder(s), style MLP,
/// both decoders and both discriminators.
#[derive(Debug, Clone, PartialEq)]
pub struct UstModel {
    config: ModelConfig,
    params: ParamStore,
}

impl UstModel {
    /// Freshly initialised networks. Deterministic in `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let budget_layout = config.adain_layout();
        let mut params = ParamStore::default();
        for spec in param_specs(&config) {
            let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &spec.name));
            let t = match spec.init {
                Init::He { fan_in } => Tensor::randn(&spec.shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::AdaInBias => {
                    let mut v = Vec::with_capacity(spec.shape[0]);
                    for &c in &budget_layout {
                        v.extend(std::iter::repeat_n(1.0, c));
                        v.extend(std::iter::repeat_n(0.0, c));
                    }
                    Tensor::new(&spec.shape, v)?
                }
            };
            params.insert(spec.name, t)?;
        }
        Ok(UstModel { config, params })
    }

    /// Assemble from stored parameters, checking names and shapes against
    /// the configuration.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(UstError::Checkpoint(format!(
                "configuration expects {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| UstError::Checkpoint(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(UstError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, configuration expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(UstModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::json!({ "model_config": self.config }));
        for (name, t) in self.params.iter() {
            c.push(name, t.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            c.metadata
                .get("model_config")
                .cloned()
                .ok_or_else(|| UstError::Checkpoint("container has no model_config".into()))?,
        )?;
        let mut params = ParamStore::default();
        for (name, t) in &c.tensors {
            if name.starts_with("adam/") {
                continue;
            }
            params.insert(name.strip_prefix("param/").unwrap_or(name), t.clone())?;
        }
        Self::from_parts(config, params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    // ---- graph building blocks ------------------------------------------

    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}.w"))?;
        let bname = format!("{name}.b");
        let b = if self.params.contains(&bname) {
            Some(g.param(&self.params, &bname)?)
        } else {
            None
        };
        let k = g.shape(w)[2];
        let pad = if stride == 2 { 1 } else { k / 2 };
        g.conv2d(x, w, b, stride, pad)
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}.w"))?;
        let b = g.param(&self.params, &format!("{name}.b"))?;
        g.linear(x, w, Some(b))
    }

    fn conv_in_relu(&self, g: &mut Graph, x: Var, name: &str, stride: usize) -> Result<Var> {
        let h = self.conv(g, x, name, stride)?;
        let h = g.instance_norm(h, self.config.norm_eps);
        Ok(g.relu(h))
    }

    fn content_tail(&self, g: &mut Graph, mut h: Var, p: &str) -> Result<Var> {
        for i in 0..self.config.n_downsample {
            h = self.conv_in_relu(g, h, &format!("{p}.down{i}"), 2)?;
        }
        for i in 0..self.config.n_res_blocks {
            let r = self.conv_in_relu(g, h, &format!("{p}.res{i}.conv1"), 1)?;
            let r = self.conv(g, r, &format!("{p}.res{i}.conv2"), 1)?;
            let r = g.instance_norm(r, self.config.norm_eps);
            h = g.add(h, r)?;
        }
        Ok(h)
    }

    /// Take-off content encoder. The input is masked, passed through the
    /// first convolution block, and the block's activations are masked again
    /// before down-sampling, so nothing outside the mask reaches the code.
    pub fn encode_content_a_g(&self, g: &mut Graph, x: Var, mask: &MaskBatch) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4();
        let m = mask.resize_nearest(h, w);
        let xm = g.mul_mask(x, m.tensor())?;
        let f = self.conv_in_relu(g, xm, "enc_content_a.conv0", 1)?;
        let (_, _, fh, fw) = g.value(f).dims4();
        let mf = mask.resize_nearest(fh, fw);
        let f = g.mul_mask(f, mf.tensor())?;
        self.content_tail(g, f, "enc_content_a")
    }

    pub fn encode_content_b_g(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = self.conv_in_relu(g, x, "enc_content_b.conv0", 1)?;
        self.content_tail(g, f, "enc_content_b")
    }

    /// Style encoder for an image of `domain`. Domain-A inputs are masked
    /// first when `mask_style_input` is set and a mask is given.
    pub fn encode_style_g(&self, g: &mut Graph, x: Var, domain: Domain, mask: Option<&MaskBatch>) -> Result<Var> {
        let p = match (self.config.use_shared_style_encoder, domain) {
            (true, _) => "enc_style",
            (false, Domain::A) => "enc_style_a",
            (false, Domain::B) => "enc_style_b",
        };
        let mut h = x;
        if domain == Domain::A && self.config.mask_style_input {
            if let Some(m) = mask {
                h = g.mul_mask(h, m.tensor())?;
            }
        }
        for i in 0..self.config.style_downsamples {
            h = self.conv(g, h, &format!("{p}.conv{i}"), 2)?;
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h);
        self.linear(g, pooled, &format!("{p}.fc"))
    }

    /// Style MLP: style code to the AdaIN parameters of `target`.
    pub fn adain_params_g(&self, g: &mut Graph, s: Var, target: DecoderId) -> Result<AdaInVar> {
        let mut h = s;
        for j in 0..self.config.mlp_hidden_layers {
            h = self.linear(g, h, &format!("mlp.fc{j}"))?;
            h = g.relu(h);
        }
        let var = self.linear(g, h, "mlp.out")?;
        Ok(AdaInVar { target, var })
    }

    fn adain_layer(&self, g: &mut Graph, h: Var, a: &AdaInVar, offset: usize, channels: usize) -> Result<Var> {
        let gamma = g.slice_cols(a.var, offset, channels)?;
        let beta = g.slice_cols(a.var, offset + channels, channels)?;
        let norm = g.instance_norm(h, self.config.norm_eps);
        g.channel_affine(norm, gamma, beta)
    }

    fn check_adain(&self, g: &Graph, a: &AdaInVar, expected: DecoderId) -> Result<()> {
        if a.target != expected {
            return Err(UstError::WrongDecoder {
                expected: expected.to_string(),
                got: a.target.to_string(),
            });
        }
        let budget = self.config.adain_budget();
        let s = g.shape(a.var);
        if s.len() != 2 || s[1] != budget {
            return Err(UstError::shape("AdaIN parameters", &[s[0], budget], s));
        }
        Ok(())
    }

    /// Shared decoder trunk: AdaIN residual blocks then AdaIN up-sampling.
    fn decoder_trunk(&self, g: &mut Graph, mut h: Var, a: &AdaInVar, p: &str) -> Result<Var> {
        let layout = self.config.adain_layout();
        let mut layer = 0;
        let mut offset = 0;
        let next = |layer: &mut usize, offset: &mut usize| {
            let c = layout[*layer];
            let o = *offset;
            *layer += 1;
            *offset += 2 * c;
            (o, c)
        };
        for i in 0..self.config.n_res_blocks {
            let r = self.conv(g, h, &format!("{p}.res{i}.conv1"), 1)?;
            let (o, c) = next(&mut layer, &mut offset);
            let r = self.adain_layer(g, r, a, o, c)?;
            let r = g.relu(r);
            let r = self.conv(g, r, &format!("{p}.res{i}.conv2"), 1)?;
            let (o, c) = next(&mut layer, &mut offset);
            let r = self.adain_layer(g, r, a, o, c)?;
            h = g.add(h, r)?;
        }
        for i in 0..self.config.n_downsample {
            h = g.upsample2(h);
            h = self.conv(g, h, &format!("{p}.up{i}"), 1)?;
            let (o, c) = next(&mut layer, &mut offset);
            h = self.adain_layer(g, h, a, o, c)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    /// Resize each sample's features into its mask bounding box on a zero
    /// canvas the size of the context image.
    pub fn fit_in_canvas_g(&self, g: &mut Graph, features: Var, mask: &MaskBatch) -> Result<Var> {
        let (n, _, fh, fw) = g.value(features).dims4();
        let (h, w) = mask.hw();
        if mask.batch() != n {
            return Err(UstError::shape("fit-in mask batch", &[n, 1, h, w], mask.tensor().shape()));
        }
        let boxes = batch_bboxes(mask)?;
        let src = vec![PixelBox::full(fh, fw); n];
        g.resample(features, &src, &boxes, h, w)
    }

    /// Fit-in module: place features into the mask box, concatenate the
    /// context image and fuse with a convolution block.
    pub fn fit_in_g(&self, g: &mut Graph, features: Var, mask: &MaskBatch, context: Var) -> Result<Var> {
        let canvas = self.fit_in_canvas_g(g, features, mask)?;
        if g.shape(context)[2..] != g.shape(canvas)[2..] {
            return Err(UstError::shape("fit-in context", g.shape(canvas), g.shape(context)));
        }
        let cat = g.concat(&[canvas, context])?;
        let h = self.conv(g, cat, "gen_a.fit", 1)?;
        Ok(g.relu(h))
    }

    /// Try-on decoder `G_A`: `[c || m]`, AdaIN trunk, Fit-in, output block.
    pub fn decode_try_on_g(
        &self,
        g: &mut Graph,
        c: Var,
        mask: &MaskBatch,
        context: Var,
        a: &AdaInVar,
    ) -> Result<Var> {
        self.check_adain(g, a, DecoderId::TryOn)?;
        let mut h = c;
        if self.config.use_mask_attention {
            let (_, _, ch, cw) = g.value(c).dims4();
            let small = mask.resize_nearest(ch, cw);
            let mv = g.constant(small.tensor().clone());
            let cat = g.concat(&[c, mv])?;
            h = self.conv(g, cat, "gen_a.attn", 1)?;
        }
        h = self.decoder_trunk(g, h, a, "gen_a")?;
        if self.config.use_fit_in {
            h = self.fit_in_g(g, h, mask, context)?;
        }
        let out = self.conv(g, h, "gen_a.out", 1)?;
        Ok(g.tanh(out))
    }

    /// Take-off decoder `G_B`: AdaIN trunk and output block, no Fit-in and
    /// no mask attention.
    pub fn decode_take_off_g(&self, g: &mut Graph, c: Var, a: &AdaInVar) -> Result<Var> {
        self.check_adain(g, a, DecoderId::TakeOff)?;
        let h = self.decoder_trunk(g, c, a, "gen_b")?;
        let out = self.conv(g, h, "gen_b.out", 1)?;
        Ok(g.tanh(out))
    }

    fn discriminator(&self, g: &mut Graph, x: Var, p: &str) -> Result<Var> {
        let mut h = x;
        for i in 0..self.config.disc_downsamples {
            h = self.conv(g, h, &format!("{p}.conv{i}"), 2)?;
            h = g.leaky_relu(h, LEAK);
        }
        let logits = self.conv(g, h, &format!("{p}.out"), 1)?;
        Ok(g.sigmoid(logits))
    }

    /// Patch realism map of `D_A` on `[x || m]` (or `x` alone without mask
    /// attention). Values are probabilities.
    pub fn discriminate_a_g(&self, g: &mut Graph, x: Var, mask: &MaskBatch) -> Result<Var> {
        let input = if self.config.use_mask_attention {
            let (_, _, h, w) = g.value(x).dims4();
            if mask.hw() != (h, w) {
                return Err(UstError::shape("D_A mask", &[mask.batch(), 1, h, w], mask.tensor().shape()));
            }
            let m = g.constant(mask.tensor().clone());
            g.concat(&[x, m])?
        } else {
            x
        };
        self.discriminator(g, input, "dis_a")
    }

    pub fn discriminate_b_g(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.discriminator(g, x, "dis_b")
    }

    // ---- tensor-level operations -----------------------------------------

    fn check_image(&self, x: &ImageBatch) -> Result<()> {
        let s = self.config.image_size;
        let expect = [x.batch(), self.config.channels, s, s];
        if x.tensor().shape() != expect {
            return Err(UstError::shape("image batch", &expect, x.tensor().shape()));
        }
        Ok(())
    }

    fn check_mask(&self, x: &ImageBatch, m: &MaskBatch) -> Result<()> {
        let (h, w) = x.hw();
        if m.batch() != x.batch() || m.hw() != (h, w) {
            return Err(UstError::shape("mask batch", &[x.batch(), 1, h, w], m.tensor().shape()));
        }
        for i in 0..m.batch() {
            if m.is_empty_at(i) {
                return Err(UstError::EmptyMask(format!("mask {i} has no foreground")));
            }
        }
        Ok(())
    }

    pub fn encode_content_a(&self, x: &ImageBatch, m: &MaskBatch) -> Result<ContentCode> {
        self.check_image(x)?;
        self.check_mask(x, m)?;
        let mut g = Graph::inference();
        let xv = g.constant(x.tensor().clone());
        let c = self.encode_content_a_g(&mut g, xv, m)?;
        Ok(ContentCode(g.value(c).clone()))
    }

    pub fn encode_content_b(&self, x: &ImageBatch) -> Result<ContentCode> {
        self.check_image(x)?;
        let mut g = Graph::inference();
        let xv = g.constant(x.tensor().clone());
        let c = self.encode_content_b_g(&mut g, xv)?;
        Ok(ContentCode(g.value(c).clone()))
    }

    /// Shared style encoder on an unmasked image.
    pub fn encode_style(&self, x: &ImageBatch) -> Result<StyleCode> {
        self.encode_style_for(x, Domain::B, None)
    }

    /// Style code of an image of `domain`; domain-A images are masked when
    /// the model was configured to read masked style inputs.
    pub fn encode_style_for(&self, x: &ImageBatch, domain: Domain, m: Option<&MaskBatch>) -> Result<StyleCode> {
        self.check_image(x)?;
        if let Some(m) = m {
            self.check_mask(x, m)?;
        }
        let mut g = Graph::inference();
        let xv = g.constant(x.tensor().clone());
        let s = self.encode_style_g(&mut g, xv, domain, m)?;
        Ok(StyleCode(g.value(s).clone()))
    }

    pub fn style_to_adain_params(&self, s: &StyleCode, target: DecoderId) -> Result<AdaINParams> {
        if s.0.shape().len() != 2 || s.dim() != self.config.style_dim {
            return Err(UstError::shape("style code", &[0, self.config.style_dim], s.0.shape()));
        }
        if !s.0.all_finite() {
            return Err(UstError::NonFinite("style code".into()));
        }
        let mut g = Graph::inference();
        let sv = g.constant(s.0.clone());
        let a = self.adain_params_g(&mut g, sv, target)?;
        Ok(AdaINParams {
            target,
            layout: self.config.adain_layout(),
            values: g.value(a.var).clone(),
        })
    }

    fn adain_var(&self, g: &mut Graph, a: &AdaINParams) -> AdaInVar {
        AdaInVar {
            target: a.target,
            var: g.constant(a.values.clone()),
        }
    }

    fn check_content(&self, c: &ContentCode) -> Result<()> {
        let cs = self.config.content_size();
        let expect = [c.0.shape()[0], self.config.content_channels(), cs, cs];
        if c.0.shape() != expect {
            return Err(UstError::shape("content code", &expect, c.0.shape()));
        }
        if !c.0.all_finite() {
            return Err(UstError::NonFinite("content code".into()));
        }
        Ok(())
    }

    pub fn decode_try_on(
        &self,
        c: &ContentCode,
        m: &MaskBatch,
        context: &ImageBatch,
        a: &AdaINParams,
    ) -> Result<ImageBatch> {
        self.check_content(c)?;
        self.check_image(context)?;
        self.check_mask(context, m)?;
        let mut g = Graph::inference();
        let cv = g.constant(c.0.clone());
        let ctx = g.constant(context.tensor().clone());
        let av = self.adain_var(&mut g, a);
        let out = self.decode_try_on_g(&mut g, cv, m, ctx, &av)?;
        ImageBatch::new(g.value(out).clone())
    }

    pub fn decode_take_off(&self, c: &ContentCode, a: &AdaINParams) -> Result<ImageBatch> {
        self.check_content(c)?;
        let mut g = Graph::inference();
        let cv = g.constant(c.0.clone());
        let av = self.adain_var(&mut g, a);
        let out = self.decode_take_off_g(&mut g, cv, &av)?;
        ImageBatch::new(g.value(out).clone())
    }

    /// Fit-in module on plain tensors (`features` at image resolution).
    pub fn fit_in(&self, features: &Tensor, m: &MaskBatch, context: &ImageBatch) -> Result<Tensor> {
        if !self.config.use_fit_in {
            return Err(UstError::Config("model was built without the Fit-in module".into()));
        }
        let mut g = Graph::inference();
        let f = g.constant(features.clone());
        let ctx = g.constant(context.tensor().clone());
        let out = self.fit_in_g(&mut g, f, m, ctx)?;
        Ok(g.value(out).clone())
    }

    /// The zero canvas with features placed in the mask box, before the
    /// context is concatenated.
    pub fn fit_in_canvas(&self, features: &Tensor, m: &MaskBatch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let f = g.constant(features.clone());
        let out = self.fit_in_canvas_g(&mut g, f, m)?;
        Ok(g.value(out).clone())
    }

    pub fn discriminate_a(&self, x: &ImageBatch, m: &MaskBatch) -> Result<Tensor> {
        self.check_image(x)?;
        self.check_mask(x, m)?;
        let mut g = Graph::inference();
        let xv = g.constant(x.tensor().clone());
        let d = self.discriminate_a_g(&mut g, xv, m)?;
        Ok(g.value(d).clone())
    }

    pub fn discriminate_b(&self, x: &ImageBatch) -> Result<Tensor> {
        self.check_image(x)?;
        let mut g = Graph::inference();
        let xv = g.constant(x.tensor().clone());
        let d = self.discriminate_b_g(&mut g, xv)?;
        Ok(g.value(d).clone())
    }

    /// Take-off translation `x_AB` of masked domain-A images.
    pub fn take_off(&self, x: &ImageBatch, m: &MaskBatch) -> Result<ImageBatch> {
        self.take_off_styled(x, m, None)
    }

    /// Take-off with an optional external style source (a catalog image).
    pub fn take_off_styled(&self, x: &ImageBatch, m: &MaskBatch, style_from: Option<&ImageBatch>) -> Result<ImageBatch> {
        let c = self.encode_content_a(x, m)?;
        let s = match style_from {
            Some(sx) => self.encode_style_for(sx, Domain::B, None)?,
            None => self.encode_style_for(x, Domain::A, Some(m))?,
        };
        let a = self.style_to_adain_params(&s, DecoderId::TakeOff)?;
        self.decode_take_off(&c, &a)
    }

    /// Try-on translation `x_BA`: render the catalog item `x_b` into the
    /// masked region of `context`.
    pub fn try_on(&self, x_b: &ImageBatch, m: &MaskBatch, context: &ImageBatch) -> Result<ImageBatch> {
        self.try_on_styled(x_b, m, context, None)
    }

    pub fn try_on_styled(
        &self,
        x_b: &ImageBatch,
        m: &MaskBatch,
        context: &ImageBatch,
        style_from: Option<&ImageBatch>,
    ) -> Result<ImageBatch> {
        let c = self.encode_content_b(x_b)?;
        let s = self.encode_style_for(style_from.unwrap_or(x_b), Domain::B, None)?;
        let a = self.style_to_adain_params(&s, DecoderId::TryOn)?;
        self.decode_try_on(&c, m, context, &a)
    }

    /// Self-reconstruction `x_aa` of domain-A images through their own
    /// codes, mask and masked-out context.
    pub fn reconstruct_a(&self, x: &ImageBatch, m: &MaskBatch) -> Result<ImageBatch> {
        let c = self.encode_content_a(x, m)?;
        let s = self.encode_style_for(x, Domain::A, Some(m))?;
        let a = self.style_to_adain_params(&s, DecoderId::TryOn)?;
        self.decode_try_on(&c, m, &masked_context(x, m)?, &a)
    }

    /// Self-reconstruction `x_bb` of catalog images.
    pub fn reconstruct_b(&self, x: &ImageBatch) -> Result<ImageBatch> {
        let c = self.encode_content_b(x)?;
        let s = self.encode_style_for(x, Domain::B, None)?;
        let a = self.style_to_adain_params(&s, DecoderId::TakeOff)?;
        self.decode_take_off(&c, &a)
    }
}

/// `x * (1 - m)`: the image with the object region removed.
pub fn masked_context(x: &ImageBatch, m: &MaskBatch) -> Result<ImageBatch> {
    let (n, c, h, w) = x.tensor().dims4();
    if m.batch() != n || m.hw() != (h, w) {
        return Err(UstError::shape("context mask", &[n, 1, h, w], m.tensor().shape()));
    }
    let mut out = x.tensor().clone();
    for s in 0..n {
        let ms = m.tensor().sample_data(s);
        let xs = &mut out.data_mut()[s * c * h * w..(s + 1) * c * h * w];
        for plane in xs.chunks_mut(h * w) {
            for (v, mv) in plane.iter_mut().zip(ms) {
                *v *= 1.0 - mv;
            }
        }
    }
    ImageBatch::new(out)
}

/// Adaptive instance normalisation of `[n, c, h, w]` features with one
/// `(gamma, beta)` per channel: `gamma * (z - mean) / std + beta`, where
/// mean and std are spatial, per sample and channel, and the population
/// variance carries `eps` inside the square root.
pub fn adain(z: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    if z.shape().len() != 4 {
        return Err(UstError::Contract(format!("adain expects [n, c, h, w], got {:?}", z.shape())));
    }
    let (n, c, h, w) = z.dims4();
    if gamma.len() != c || beta.len() != c {
        return Err(UstError::shape("adain gamma/beta", &[c], &[gamma.len(), beta.len()]));
    }
    let (mut out, _) = kernels::instance_norm_forward(z.data(), n * c, h * w, eps);
    for (i, plane) in out.chunks_mut(h * w).enumerate() {
        let ch = i % c;
        for v in plane.iter_mut() {
            *v = gamma[ch] * *v + beta[ch];
        }
    }
    Tensor::new(z.shape(), out)
}

#[cfg(test)]
mod tests;
