use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ust_core::checkpoint::{Container, FORMAT_VERSION};
use ust_core::config_file::ConfigFile;
use ust_core::losses::{ConvExtractor, FeatureExtractor};
use ust_core::metrics::{self, SsimConfig};
use ust_core::model::masked_context;
use ust_core::retrieval::{self, PerceptualFine, RecallReport, Ranking, RetrievalIndex};
use ust_core::synth::{self, LoadedSplit, Split, SynthSpec, MANIFEST_FILE};
use ust_core::trainer::{self, TrainState, TrainerConfig};
use ust_core::{imageio, ImageBatch, MaskBatch, ModelConfig, UstError, UstModel};

use crate::{
    AblateArgs, Cli, Command, Direction, EvaluateArgs, ExtractorArgs, Profile, QuerySplit, RerankArgs, RetrieveArgs,
    SynthArgs, TrainArgs, TrainFlags, TranslateArgs,
};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Op(UstError),
}

impl From<UstError> for Failure {
    fn from(e: UstError) -> Self {
        Failure::Op(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

struct Globals {
    config: ConfigFile,
    seed: Option<u64>,
    data_root: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Globals {
    fn out(&self) -> Outcome<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Failure::Usage("this command needs --out".into()))
    }

    fn data_root(&self) -> Outcome<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Failure::Usage("this command needs --data-root".into()))
    }

    fn manifest(&self) -> Outcome<synth::DatasetManifest> {
        Ok(synth::load(&self.data_root()?.join(MANIFEST_FILE))?)
    }

    fn trainer(&self, flags: &TrainFlags) -> Outcome<(TrainerConfig, ModelConfig)> {
        let (t, m) = match flags.profile {
            Profile::Desk => (TrainerConfig::desk(), ModelConfig::desk()),
            Profile::Reference => (TrainerConfig::default(), ModelConfig::default()),
        };
        let mut t = self.config.trainer(&t)?;
        let m = self.config.model(&m)?;
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(s) = flags.steps {
            t.total_steps = s;
        }
        if let Some(lr) = flags.lr {
            t.learning_rate = lr;
        }
        if let Some(b) = flags.batch_size {
            t.batch_size = b;
        }
        t.validate()?;
        t.apply_flags(&m).validate()?;
        Ok((t, m))
    }
}

fn mkdir(p: &Path) -> Outcome<()> {
    fs::create_dir_all(p).map_err(|e| {
        Failure::Op(UstError::Io {
            path: p.to_path_buf(),
            source: e,
        })
    })
}

fn write(p: &Path, text: &str) -> Outcome<()> {
    fs::write(p, text).map_err(|e| {
        Failure::Op(UstError::Io {
            path: p.to_path_buf(),
            source: e,
        })
    })
}

fn require_file(p: &Path) -> Outcome<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Op(UstError::MissingFile(p.to_path_buf())))
    }
}

pub fn run(cli: Cli) -> Outcome<()> {
    if cli.version {
        println!("ust {} (checkpoint format version {FORMAT_VERSION})", env!("CARGO_PKG_VERSION"));
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| Failure::Usage("no command given; see `ust --help`".into()))?;
    let config = match &cli.config {
        Some(p) => {
            let f = ConfigFile::read(p)?;
            f.check()?;
            f
        }
        None => ConfigFile::default(),
    };
    let g = Globals {
        config,
        seed: cli.seed,
        data_root: cli.data_root,
        out: cli.out,
    };
    match command {
        Command::SynthData(a) => synth_data(&g, &a),
        Command::Train(a) => train(&g, &a),
        Command::Translate(a) => translate(&g, &a),
        Command::Evaluate(a) => evaluate(&g, &a),
        Command::Retrieve(a) => retrieve(&g, &a),
        Command::Rerank(a) => rerank(&g, &a),
        Command::Ablate(a) => ablate(&g, &a),
    }
}

fn synth_data(g: &Globals, a: &SynthArgs) -> Outcome<()> {
    let out = g.out()?;
    let mut spec = g.config.data(&SynthSpec::default())?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_items {
        spec.n_items = n;
    }
    if let Some(v) = a.views {
        spec.views_per_item = v;
    }
    if let Some(s) = a.image_size {
        spec.image_size = s;
    }
    if let Some(f) = a.test_fraction {
        spec.test_fraction = f;
    }
    spec.validate()?;
    let m = synth::generate(&spec, out)?;
    println!("wrote {} samples to {}", m.samples.len(), out.display());
    Ok(())
}

fn train(g: &Globals, a: &TrainArgs) -> Outcome<()> {
    let (mut t, m) = g.trainer(&a.flags)?;
    t.use_perceptual_loss &= !a.no_perceptual_loss;
    t.use_shared_style_encoder &= !a.no_shared_style_encoder;
    t.use_mask_attention &= !a.no_mask_attention;
    t.use_fit_in &= !a.no_fit_in;
    let out = g.out()?;
    let manifest = g.manifest()?;
    let resume = match &a.resume {
        Some(p) => {
            require_file(p)?;
            let (state, saved) = TrainState::load(p)?;
            if saved.seed != t.seed {
                info!("resuming with the checkpoint's seed {}", saved.seed);
            }
            t.seed = saved.seed;
            Some(state)
        }
        None => None,
    };
    let size = manifest_image_size(&manifest)?;
    if size != m.image_size {
        return Err(Failure::Op(UstError::Config(format!(
            "model.image_size is {} but the dataset has {size}px images",
            m.image_size
        ))));
    }
    mkdir(out)?;
    let outcome = trainer::train(&t, &m, &manifest, out, resume)?;
    println!(
        "trained to step {}; model at {}, losses at {}",
        outcome.state.step,
        outcome.model_path.display(),
        outcome.log_path.display()
    );
    Ok(())
}

fn manifest_image_size(m: &synth::DatasetManifest) -> Outcome<usize> {
    let first = m
        .samples
        .first()
        .ok_or_else(|| Failure::Op(UstError::Dataset("empty manifest".into())))?;
    Ok(imageio::read_rgb(&m.path(&first.image))?.shape()[2])
}

fn load_model(p: &Path) -> Outcome<(UstModel, String)> {
    require_file(p)?;
    let c = Container::read(p)?;
    Ok((UstModel::from_container(&c)?, c.digest()?))
}

fn translate(g: &Globals, a: &TranslateArgs) -> Outcome<()> {
    let out = g.out()?;
    if a.direction == Direction::TryOn && a.context.is_none() {
        return Err(Failure::Usage("try-on needs --context".into()));
    }
    for p in [Some(&a.input), Some(&a.mask), a.context.as_ref(), a.style_from.as_ref()].into_iter().flatten() {
        require_file(p)?;
    }
    let (model, _) = load_model(&a.checkpoint)?;
    let input = ImageBatch::new(imageio::read_rgb(&a.input)?)?;
    let mask = MaskBatch::new(imageio::read_mask(&a.mask)?)?;
    let style = match &a.style_from {
        Some(p) => Some(ImageBatch::new(imageio::read_rgb(p)?)?),
        None => None,
    };
    let (result, name) = match a.direction {
        Direction::TakeOff => (model.take_off_styled(&input, &mask, style.as_ref())?, "take_off.png"),
        Direction::TryOn => {
            let person = ImageBatch::new(imageio::read_rgb(a.context.as_ref().expect("checked above"))?)?;
            let ctx = masked_context(&person, &mask)?;
            (model.try_on_styled(&input, &mask, &ctx, style.as_ref())?, "try_on.png")
        }
    };
    mkdir(out)?;
    let path = out.join(name);
    imageio::write_rgb(&path, result.tensor(), 0)?;
    println!("{}", path.display());
    Ok(())
}

fn extractor(a: &ExtractorArgs) -> Outcome<ConvExtractor> {
    Ok(match &a.extractor {
        Some(p) => {
            require_file(p)?;
            ConvExtractor::load(p)?
        }
        None => ConvExtractor::random(3, a.extractor_seed),
    })
}

fn evaluate(g: &Globals, a: &EvaluateArgs) -> Outcome<()> {
    let out = g.out()?;
    let manifest = g.manifest()?;
    let phi = extractor(&a.extractor)?;
    let (model, digest) = load_model(&a.checkpoint)?;
    let test = LoadedSplit::load(&manifest, Some(Split::Test))?;
    let cfg = SsimConfig::default();
    let scores = metrics::score_samples(&model, &test, &phi, &cfg)?;
    let report = metrics::summarize(&scores, digest, phi.descriptor())?;
    mkdir(out)?;
    let mut per_sample = String::from("sample,take_off_ssim,take_off_perceptual,try_on_ssim,try_on_perceptual\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_else(|| "NA".into());
    for (s, sc) in test.a.iter().zip(&scores) {
        per_sample.push_str(&format!(
            "{},{:.9},{:.9},{},{}\n",
            s.id,
            sc.take_off_ssim,
            sc.take_off_perceptual,
            opt(sc.try_on_ssim),
            opt(sc.try_on_perceptual)
        ));
    }
    write(&out.join("scores.csv"), &per_sample)?;
    write(&out.join("eval.csv"), &format!("{}\n{}\n", metrics::EvalReport::CSV_HEADER, report.csv_row()))?;
    write(&out.join("eval.json"), &report.to_json()?)?;
    println!("{}", report.to_json()?);
    Ok(())
}

struct Queries {
    ids: Vec<String>,
    codes: Vec<Vec<f64>>,
    masked: Vec<ust_core::Tensor>,
    truth: Vec<Option<String>>,
}

fn retrieval_setup(g: &Globals, a: &RetrieveArgs) -> Outcome<(RetrievalIndex, Queries, LoadedSplit)> {
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(Failure::Usage("--ks needs positive cut-offs".into()));
    }
    g.out()?;
    let manifest = g.manifest()?;
    let (model, _) = load_model(&a.checkpoint)?;
    let database = LoadedSplit::load(&manifest, None)?;
    let split = match a.queries {
        QuerySplit::Train => Some(Split::Train),
        QuerySplit::Test => Some(Split::Test),
        QuerySplit::All => None,
    };
    let queries = LoadedSplit::load(&manifest, split)?;
    let index = retrieval::build_index(&model, &database)?;
    let mut q = Queries {
        ids: Vec::new(),
        codes: Vec::new(),
        masked: Vec::new(),
        truth: Vec::new(),
    };
    for (i, s) in queries.a.iter().enumerate() {
        let (x, m) = queries.a_batch(&[i])?;
        q.codes.push(retrieval::query_code(&model, &x, &m)?);
        q.masked.push(retrieval::mask_query(&x, &m)?.into_tensor());
        q.ids.push(s.id.clone());
        q.truth.push(Some(s.pair_id.clone()));
    }
    Ok((index, q, database))
}

fn write_retrieval(out: &Path, index: &RetrievalIndex, q: &Queries, report: &RecallReport, rankings: &[Ranking], depth: usize) -> Outcome<()> {
    mkdir(out)?;
    index.save(&out.join("index.ust"))?;
    let mut r = String::from("query,rank,item,distance\n");
    for (qid, rk) in q.ids.iter().zip(rankings) {
        for (j, (id, d)) in rk.ids.iter().zip(&rk.distances).take(depth).enumerate() {
            r.push_str(&format!("{qid},{},{id},{d:.9}\n", j + 1));
        }
    }
    write(&out.join("rankings.csv"), &r)?;
    write(&out.join("recall.csv"), &report.csv())?;
    let json = report.to_json()?;
    write(&out.join("recall.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn retrieve(g: &Globals, a: &RetrieveArgs) -> Outcome<()> {
    let (index, q, _) = retrieval_setup(g, a)?;
    let (report, rankings) = retrieval::flat_recall(&index, &q.codes, &q.truth, &a.ks)?;
    let depth = a.ks.iter().copied().max().unwrap_or(1);
    write_retrieval(g.out()?, &index, &q, &report, &rankings, depth)
}

fn rerank(g: &Globals, a: &RerankArgs) -> Outcome<()> {
    if a.k == 0 {
        return Err(Failure::Usage("--k must be positive".into()));
    }
    let phi = extractor(&a.extractor)?;
    let (index, q, database) = retrieval_setup(g, &a.retrieve)?;
    let db: Vec<(String, ust_core::Tensor)> = database.b.iter().map(|s| (s.pair_id.clone(), s.image.clone())).collect();
    let fine = PerceptualFine::new(q.masked.clone(), db, &phi)?;
    let (report, rankings) = retrieval::coarse_to_fine(&index, &fine, &q.codes, &q.truth, a.k, &a.retrieve.ks)?;
    let depth = a.retrieve.ks.iter().copied().max().unwrap_or(1).max(a.k);
    write_retrieval(g.out()?, &index, &q, &report, &rankings, depth)
}

fn ablate(g: &Globals, a: &AblateArgs) -> Outcome<()> {
    let (mut t, m) = g.trainer(&a.flags)?;
    t.extractor_seed = a.extractor.extractor_seed;
    let out = g.out()?;
    let manifest = g.manifest()?;
    if a.extractor.extractor.is_some() {
        return Err(Failure::Usage("ablate uses the seeded random extractor; pass --extractor-seed".into()));
    }
    mkdir(out)?;
    let table = trainer::ablation_matrix(&t, &m, &manifest, out)?;
    write(&out.join("table.tsv"), &table.render())?;
    let json = table.to_json()?;
    write(&out.join("ablation.json"), &json)?;
    print!("{}", table.render());
    Ok(())
}
