//! Alternating discriminator / generator optimisation of the full
//! objective, with checkpoints, loss logs, image grids and the ablation
//! matrix.

mod adam;

pub use adam::{AdamConfig, AdamSlot, AdamState};

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Result, UstError};
use crate::graph::{Graph, ParamFilter, Var};
use crate::imageio;
use crate::losses::{
    adversarial_d_g, total_loss_g, ConvExtractor, FeatureExtractor, LossReport, LossWeights, ObjectiveVars, Streams,
};
use crate::metrics::{self, EvalReport, SsimConfig};
use crate::model::{AdaInVar, DecoderId, Domain, ModelConfig, UstModel};
use crate::synth::roi::extract_roi_tensor;
use crate::synth::{DatasetManifest, LoadedSplit, Split, UnpairedBatch};
use crate::tensor::Tensor;

pub const STATE_KIND: &str = "ust-train-state";

/// Parameter-name prefixes updated by the generator step.
pub const GENERATOR_PREFIXES: [&str; 6] = ["enc_content_a", "enc_content_b", "enc_style", "mlp", "gen_a", "gen_b"];
/// Parameter-name prefixes updated by the discriminator step.
pub const DISCRIMINATOR_PREFIXES: [&str; 2] = ["dis_a", "dis_b"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub use_mask_attention: bool,
    pub use_fit_in: bool,
    pub use_shared_style_encoder: bool,
    pub use_perceptual_loss: bool,
    /// Write a checkpoint every this many steps (and at the last step).
    pub checkpoint_every: u64,
    /// Write a loss-log row and an image grid every this many steps.
    pub log_every: u64,
    /// Seed of the default perceptual feature extractor.
    pub extractor_seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 2e-6,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            total_steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            use_mask_attention: true,
            use_fit_in: true,
            use_shared_style_encoder: true,
            use_perceptual_loss: true,
            checkpoint_every: 500,
            log_every: 50,
            extractor_seed: 1234,
        }
    }
}

impl TrainerConfig {
    /// Short-run profile: a learning rate that makes progress within a few
    /// thousand steps.
    pub fn desk() -> Self {
        TrainerConfig {
            learning_rate: 3e-4,
            total_steps: 5000,
            checkpoint_every: 1000,
            log_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UstError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be at least 1");
        }
        self.weights.validate()
    }

    /// The model configuration with this run's ablation flags applied.
    pub fn apply_flags(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_mask_attention: self.use_mask_attention,
            use_fit_in: self.use_fit_in,
            use_shared_style_encoder: self.use_shared_style_encoder,
            ..base.clone()
        }
    }

    /// Loss weights in effect: the perceptual weight is zeroed when the
    /// perceptual loss is disabled.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.use_perceptual_loss {
            w.lambda_p = 0.0;
        }
        w
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Number of checkpoint files a run of `total_steps` writes.
    pub fn expected_checkpoints(&self) -> u64 {
        self.total_steps.div_ceil(self.checkpoint_every)
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub model: UstModel,
    pub optimizer: AdamState,
    /// Root seed of the per-step data streams.
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: UstModel, seed: u64) -> Self {
        TrainState {
            step: 0,
            model,
            optimizer: AdamState::default(),
            seed,
        }
    }

    /// Generator of the batch draw for the next step.
    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step + 1);
        rng
    }

    pub fn to_container(&self, config: &TrainerConfig) -> Container {
        let counts: std::collections::BTreeMap<&str, u64> =
            self.optimizer.slots.iter().map(|(n, s)| (n.as_str(), s.t)).collect();
        let mut c = Container::new(
            STATE_KIND,
            serde_json::json!({
                "model_config": self.model.config(),
                "trainer_config": config,
                "step": self.step,
                "seed": self.seed,
                "adam_t": counts,
            }),
        );
        for (n, t) in self.model.params().iter() {
            c.push(format!("param/{n}"), t.clone());
        }
        for (n, s) in &self.optimizer.slots {
            let shape = self.model.params().get(n).map(|t| t.shape().to_vec()).unwrap_or(vec![s.m.len()]);
            c.push(format!("adam/m/{n}"), Tensor::new(&shape, s.m.clone()).expect("moment shape"));
            c.push(format!("adam/v/{n}"), Tensor::new(&shape, s.v.clone()).expect("moment shape"));
        }
        c
    }

    pub fn save(&self, config: &TrainerConfig, path: &Path) -> Result<()> {
        self.to_container(config).write(path)
    }

    pub fn from_container(c: &Container) -> Result<(Self, TrainerConfig)> {
        if c.kind != STATE_KIND {
            return Err(UstError::Checkpoint(format!("expected a `{STATE_KIND}` container, found `{}`", c.kind)));
        }
        let meta = |k: &str| {
            c.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| UstError::Checkpoint(format!("train state lacks `{k}`")))
        };
        let config: TrainerConfig = serde_json::from_value(meta("trainer_config")?)?;
        let step: u64 = serde_json::from_value(meta("step")?)?;
        let seed: u64 = serde_json::from_value(meta("seed")?)?;
        let counts: std::collections::BTreeMap<String, u64> = serde_json::from_value(meta("adam_t")?)?;
        let model = UstModel::from_container(c)?;
        let mut optimizer = AdamState::default();
        for (n, t) in counts {
            let get = |k: &str| {
                c.get(&format!("adam/{k}/{n}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| UstError::Checkpoint(format!("missing optimizer moment `{k}` of `{n}`")))
            };
            optimizer.slots.insert(
                n.clone(),
                AdamSlot {
                    m: get("m")?,
                    v: get("v")?,
                    t,
                },
            );
        }
        Ok((
            TrainState {
                step,
                model,
                optimizer,
                seed,
            },
            config,
        ))
    }

    pub fn load(path: &Path) -> Result<(Self, TrainerConfig)> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Generator-side outputs of one forward pass.
struct GenOut {
    x_a: Var,
    x_b: Var,
    x_a_roi: Var,
    x_aa: Var,
    x_bb: Var,
    x_ab: Var,
    x_ba: Var,
    c_a: Var,
    s_a: Var,
    c_b: Var,
    s_b: Var,
    recon: Option<[Var; 4]>,
    cycles: Option<[Var; 2]>,
}

fn tag(a: AdaInVar, target: DecoderId) -> AdaInVar {
    AdaInVar { target, var: a.var }
}

/// Both streams, self-reconstructions, re-encodings and cycles.
fn generator_forward(g: &mut Graph, model: &UstModel, batch: &UnpairedBatch, w: &LossWeights) -> Result<GenOut> {
    let m = &batch.m_a;
    let x_a = g.constant(batch.x_a.tensor().clone());
    let x_b = g.constant(batch.x_b.tensor().clone());
    let ctx = g.constant(masked_context(batch)?);
    let (_, _, h, wd) = batch.x_b.tensor().dims4();
    let roi = extract_roi_tensor(batch.x_a.tensor(), m, h.max(wd))?;
    let x_a_roi = g.constant(roi);

    let c_a = model.encode_content_a_g(g, x_a, m)?;
    let s_a = model.encode_style_g(g, x_a, Domain::A, Some(m))?;
    let c_b = model.encode_content_b_g(g, x_b)?;
    let s_b = model.encode_style_g(g, x_b, Domain::B, None)?;
    let p_a = model.adain_params_g(g, s_a, DecoderId::TryOn)?;
    let p_b = model.adain_params_g(g, s_b, DecoderId::TakeOff)?;

    let x_aa = model.decode_try_on_g(g, c_a, m, ctx, &p_a)?;
    let x_ab = model.decode_take_off_g(g, c_a, &tag(p_a, DecoderId::TakeOff))?;
    let x_bb = model.decode_take_off_g(g, c_b, &p_b)?;
    let x_ba = model.decode_try_on_g(g, c_b, m, ctx, &tag(p_b, DecoderId::TryOn))?;

    let mut recon = None;
    let mut cycles = None;
    if w.lambda_lr != 0.0 || w.lambda_cc != 0.0 {
        let c_ab = model.encode_content_b_g(g, x_ab)?;
        let s_ab = model.encode_style_g(g, x_ab, Domain::B, None)?;
        let c_ba = model.encode_content_a_g(g, x_ba, m)?;
        let s_ba = model.encode_style_g(g, x_ba, Domain::A, Some(m))?;
        recon = Some([c_ab, s_ab, c_ba, s_ba]);
        if w.lambda_cc != 0.0 {
            let p_ab = model.adain_params_g(g, s_ab, DecoderId::TryOn)?;
            let x_aba = model.decode_try_on_g(g, c_ab, m, ctx, &p_ab)?;
            let p_ba = model.adain_params_g(g, s_ba, DecoderId::TakeOff)?;
            let x_bab = model.decode_take_off_g(g, c_ba, &p_ba)?;
            cycles = Some([x_aba, x_bab]);
        }
    }
    Ok(GenOut {
        x_a,
        x_b,
        x_a_roi,
        x_aa,
        x_bb,
        x_ab,
        x_ba,
        c_a,
        s_a,
        c_b,
        s_b,
        recon,
        cycles,
    })
}

/// `x_a * (1 - m_a)` of a training batch.
pub fn masked_context(batch: &UnpairedBatch) -> Result<Tensor> {
    Ok(crate::model::masked_context(&batch.x_a, &batch.m_a)?.into_tensor())
}

fn apply_grads(
    state: &mut TrainState,
    cfg: &AdamConfig,
    grads: &crate::graph::Grads,
) -> Result<()> {
    let named: Vec<(String, Tensor)> = grads
        .params()
        .filter_map(|(n, g)| g.map(|g| (n.to_string(), g.clone())))
        .collect();
    for (n, g) in named {
        state.optimizer.update(cfg, state.model.params_mut(), &n, &g)?;
    }
    Ok(())
}

fn check_finite(r: &LossReport, step: u64) -> Result<()> {
    match r.first_non_finite() {
        Some(term) => Err(UstError::NonFiniteLoss {
            term: term.to_string(),
            step,
        }),
        None => Ok(()),
    }
}

/// Discriminator objectives `[obj_a, obj_b]` (to be maximised) on the
/// batch's real images and detached translations `x_ab`, `x_ba`.
pub fn discriminator_objective_g(
    g: &mut Graph,
    model: &UstModel,
    batch: &UnpairedBatch,
    fake_ab: Tensor,
    fake_ba: Tensor,
) -> Result<[Var; 2]> {
    let real_b = g.constant(batch.x_b.tensor().clone());
    let fake_ab = g.constant(fake_ab);
    let real_a = g.constant(batch.x_a.tensor().clone());
    let fake_ba = g.constant(fake_ba);
    let d_real_b = model.discriminate_b_g(g, real_b)?;
    let d_fake_b = model.discriminate_b_g(g, fake_ab)?;
    let d_real_a = model.discriminate_a_g(g, real_a, &batch.m_a)?;
    let d_fake_a = model.discriminate_a_g(g, fake_ba, &batch.m_a)?;
    Ok([
        adversarial_d_g(g, d_real_b, d_fake_b)?,
        adversarial_d_g(g, d_real_a, d_fake_a)?,
    ])
}

/// The generator objective of one batch, built on `g`.
pub fn generator_objective_g(
    g: &mut Graph,
    model: &UstModel,
    batch: &UnpairedBatch,
    weights: &LossWeights,
    phi: Option<&dyn FeatureExtractor>,
) -> Result<ObjectiveVars> {
    let out = generator_forward(g, model, batch, weights)?;
    generator_objective_from(g, model, batch, &out, weights, phi)
}

fn generator_objective_from(
    g: &mut Graph,
    model: &UstModel,
    batch: &UnpairedBatch,
    out: &GenOut,
    weights: &LossWeights,
    phi: Option<&dyn FeatureExtractor>,
) -> Result<ObjectiveVars> {
    let d_fake_ab = model.discriminate_b_g(g, out.x_ab)?;
    let d_fake_ba = model.discriminate_a_g(g, out.x_ba, &batch.m_a)?;
    let streams = Streams {
        x_a: out.x_a,
        x_b: out.x_b,
        x_a_roi: out.x_a_roi,
        x_aa: out.x_aa,
        x_bb: out.x_bb,
        x_ab: out.x_ab,
        x_ba: out.x_ba,
        c_a: Some(out.c_a),
        s_a: Some(out.s_a),
        c_b: Some(out.c_b),
        s_b: Some(out.s_b),
        c_ab: out.recon.map(|r| r[0]),
        s_ab: out.recon.map(|r| r[1]),
        c_ba: out.recon.map(|r| r[2]),
        s_ba: out.recon.map(|r| r[3]),
        x_aba: out.cycles.map(|c| c[0]),
        x_bab: out.cycles.map(|c| c[1]),
        d_fake_ab,
        d_fake_ba,
    };
    total_loss_g(g, &streams, &batch.m_a, weights, phi)
}

/// One discriminator update followed by one generator update on `batch`.
/// Returns the loss values computed during the step.
pub fn train_step(
    state: &mut TrainState,
    batch: &UnpairedBatch,
    config: &TrainerConfig,
    phi: &dyn FeatureExtractor,
) -> Result<LossReport> {
    let step = state.step + 1;
    let weights = config.effective_weights();
    let adam = config.adam();
    let gen_filter = ParamFilter::Prefixes(GENERATOR_PREFIXES.iter().map(|s| s.to_string()).collect());
    let dis_filter = ParamFilter::Prefixes(DISCRIMINATOR_PREFIXES.iter().map(|s| s.to_string()).collect());

    // Generator forward; its outputs enter the discriminator step detached.
    let mut g = Graph::new(gen_filter);
    let out = generator_forward(&mut g, &state.model, batch, &weights)?;

    let mut gd = Graph::new(dis_filter);
    let d = discriminator_objective_g(
        &mut gd,
        &state.model,
        batch,
        g.value(out.x_ab).clone(),
        g.value(out.x_ba).clone(),
    )?;
    let obj = gd.add(d[0], d[1])?;
    let d_loss = gd.scale(obj, -1.0);
    let gan_d_a = gd.value(d[0]).data()[0];
    let gan_d_b = gd.value(d[1]).data()[0];
    for (term, v) in [("gan_d_a", gan_d_a), ("gan_d_b", gan_d_b)] {
        if !v.is_finite() {
            return Err(UstError::NonFiniteLoss {
                term: term.into(),
                step,
            });
        }
    }
    let d_grads = gd.backward(d_loss)?;
    apply_grads(state, &adam, &d_grads)?;
    drop(gd);

    // Generator objective against the updated, frozen discriminators.
    let phi_opt = (weights.lambda_p != 0.0).then_some(phi);
    let objective = generator_objective_from(&mut g, &state.model, batch, &out, &weights, phi_opt)?;
    let mut report = objective.report(&g);
    report.gan_d_a = gan_d_a;
    report.gan_d_b = gan_d_b;
    check_finite(&report, step)?;
    let g_grads = g.backward(objective.total)?;
    apply_grads(state, &adam, &g_grads)?;
    state.step = step;
    Ok(report)
}

/// The default perceptual extractor of a configuration.
pub fn default_extractor(config: &TrainerConfig) -> ConvExtractor {
    ConvExtractor::random(3, config.extractor_seed)
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Loss report of every step run by this call.
    pub losses: Vec<(u64, LossReport)>,
    pub checkpoints: Vec<PathBuf>,
    pub model_path: PathBuf,
    pub log_path: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.ust")
}

/// Appends loss rows to a CSV file with a header row.
struct LossLog {
    writer: csv::Writer<fs::File>,
}

impl LossLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.is_file();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(exists)
            .write(true)
            .truncate(!exists)
            .open(path)
            .map_err(|e| UstError::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if !exists {
            let mut header = vec!["step"];
            header.extend(LossReport::FIELDS);
            writer.write_record(header)?;
        }
        Ok(LossLog { writer })
    }

    fn row(&mut self, step: u64, r: &LossReport) -> Result<()> {
        let mut rec = vec![step.to_string()];
        rec.extend(r.values().iter().map(|v| format!("{v:.9e}")));
        self.writer.write_record(rec)?;
        self.writer.flush().map_err(|e| UstError::io("loss log", e))
    }
}

/// Translate a fixed preview pair and tile it: inputs row (x_a, x_b), then
/// outputs row (x_ab, x_ba, cycle of x_a, cycle of x_b).
fn write_preview(path: &Path, model: &UstModel, split: &LoadedSplit) -> Result<()> {
    let (x_a, m_a) = split.a_batch(&[0])?;
    let x_b = split.b_batch(&[0])?;
    let batch = UnpairedBatch { x_a, m_a, x_b };
    let ctx = crate::model::masked_context(&batch.x_a, &batch.m_a)?;
    let x_ab = model.take_off(&batch.x_a, &batch.m_a)?;
    let x_ba = model.try_on(&batch.x_b, &batch.m_a, &ctx)?;
    let x_aba = model.try_on(&x_ab, &batch.m_a, &ctx)?;
    let x_bab = model.take_off(&x_ba, &batch.m_a)?;
    let (_, _, h, w) = batch.x_a.tensor().dims4();
    let rows = vec![
        vec![batch.x_a.tensor().sample_data(0), batch.x_b.tensor().sample_data(0)],
        vec![
            x_ab.tensor().sample_data(0),
            x_ba.tensor().sample_data(0),
            x_aba.tensor().sample_data(0),
            x_bab.tensor().sample_data(0),
        ],
    ];
    imageio::write_grid(path, &rows, h, w)
}

/// Run (or continue) training until `config.total_steps`.
///
/// Writes into `out_dir`: `losses.csv`, `ckpt_XXXXXX.ust` every
/// `checkpoint_every` steps and at the last step, `grids/step_XXXXXX.png`
/// every `log_every` steps, and `model.ust` at the end.
pub fn train(
    config: &TrainerConfig,
    model_config: &ModelConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let phi = default_extractor(config);
    let split = LoadedSplit::load(manifest, Some(Split::Train))?;
    train_loaded(config, model_config, &split, &phi, out_dir, resume)
}

/// [`train`] on already decoded data with an explicit extractor.
pub fn train_loaded(
    config: &TrainerConfig,
    model_config: &ModelConfig,
    split: &LoadedSplit,
    phi: &dyn FeatureExtractor,
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let grids = out_dir.join("grids");
    fs::create_dir_all(&grids).map_err(|e| UstError::io(&grids, e))?;
    let resumed = resume.is_some();
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(UstModel::new(config.apply_flags(model_config), config.seed)?, config.seed),
    };
    let log_path = out_dir.join("losses.csv");
    let mut log = LossLog::open(&log_path, resumed)?;
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    while state.step < config.total_steps {
        let batch = split.unpaired_batch(config.batch_size, &mut state.step_rng())?;
        let report = train_step(&mut state, &batch, config, phi)?;
        let step = state.step;
        losses.push((step, report));
        if step % config.log_every == 0 {
            log.row(step, &report)?;
            write_preview(&grids.join(format!("step_{step:06}.png")), &state.model, split)?;
            info!("step {step}: total {:.4} sr {:.4}/{:.4}", report.total, report.sr_a, report.sr_b);
        }
        if step % config.checkpoint_every == 0 || step == config.total_steps {
            let p = out_dir.join(checkpoint_name(step));
            state.save(config, &p)?;
            checkpoints.push(p);
        }
    }
    let model_path = out_dir.join("model.ust");
    state.model.save(&model_path)?;
    Ok(TrainOutcome {
        state,
        losses,
        checkpoints,
        model_path,
        log_path,
    })
}

// ---- ablation matrix --------------------------------------------------------

/// The five unsupervised variants, in table order.
pub const VARIANTS: [&str; 5] = [
    "W/O P. Loss",
    "W/O shared S.E.",
    "W/O mask attention",
    "W/O Fit-in module",
    "Full model",
];

pub fn variant_config(base: &TrainerConfig, name: &str) -> Result<TrainerConfig> {
    let mut c = base.clone();
    c.use_perceptual_loss = true;
    c.use_shared_style_encoder = true;
    c.use_mask_attention = true;
    c.use_fit_in = true;
    match name {
        "W/O P. Loss" => c.use_perceptual_loss = false,
        "W/O shared S.E." => c.use_shared_style_encoder = false,
        "W/O mask attention" => c.use_mask_attention = false,
        "W/O Fit-in module" => c.use_fit_in = false,
        "Full model" => {}
        other => return Err(UstError::Config(format!("unknown ablation variant `{other}`"))),
    }
    Ok(c)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two metric columns, each `SSIM / perceptual`, scaled to [0, 100].
    pub fn render(&self) -> String {
        let cell = |s: Option<f64>, p: Option<f64>| match (s, p) {
            (Some(s), Some(p)) => format!("{s:.2} / {p:.2}"),
            _ => "N/A / N/A".to_string(),
        };
        let mut out = String::from("Method\tTry-on ROI (SSIM/perceptual)\tTake off (SSIM/perceptual)\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                r.variant,
                cell(r.report.try_on_ssim, r.report.try_on_perceptual),
                cell(Some(r.report.take_off_ssim), Some(r.report.take_off_perceptual))
            ));
        }
        out
    }
}

/// Train every variant with identical seeds and evaluate each on the test
/// split. Variant outputs go to `out_dir/<index>`.
pub fn ablation_matrix(
    config: &TrainerConfig,
    model_config: &ModelConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<AblationTable> {
    let phi = default_extractor(config);
    let train_split = LoadedSplit::load(manifest, Some(Split::Train))?;
    let test_split = LoadedSplit::load(manifest, Some(Split::Test))?;
    let mut rows = Vec::new();
    for (i, name) in VARIANTS.iter().enumerate() {
        let vc = variant_config(config, name)?;
        let dir = out_dir.join(format!("variant{i}"));
        info!("training ablation variant `{name}`");
        let outcome = train_loaded(&vc, model_config, &train_split, &phi, &dir, None)?;
        let digest = outcome.state.model.to_container()?.digest()?;
        let report = metrics::evaluate_model(&outcome.state.model, &test_split, &phi, &SsimConfig::default(), digest)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            report,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests;
