use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cair::config::{NetKind, RunConfig};
use cair::data::{self, Split};
use cair::gradcheck::{self, SUITE_TOLERANCE};
use cair::inference::{self, EnsembleNet, ModelView};
use cair::metrics;
use cair::model::count_params;
use cair::train::{LogLine, Trainer};
use cair::weights;
use cair::{CairNet, ParamStore, Tensor, Variant};

const WEIGHTS_FILE: &str = "weights.bin";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const DIAG_FILE: &str = "diverged.bin";
const ENSEMBLE_FILE: &str = "ensemble.bin";
const CONFIG_FILE: &str = "config.txt";
const LOG_FILE: &str = "train.log";

#[derive(Parser)]
#[command(
    name = "cair",
    version,
    about = "Photo filter removal: train, restore and evaluate"
)]
struct Cli {
    /// Seed overriding the configured one; fixes every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a restorer from a run configuration.
    Train(TrainArgs),
    /// Write freshly initialized weights for a configuration.
    Init(InitArgs),
    /// Restore one image or every image of a directory.
    Infer(InferArgs),
    /// Score restorations against the originals of a corpus split.
    Eval(EvalArgs),
    /// Train the fusion network on top of two frozen restorers.
    EnsembleTrain(EnsembleTrainArgs),
    /// Compare analytic and finite-difference gradients in 64-bit mode.
    Gradcheck(GradcheckArgs),
    /// Render a filtered corpus with its index.
    GenData(GenDataArgs),
    /// Print the learnable parameter count of a network.
    Params(ParamsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for weights, checkpoint, log and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Zero the final convolution so the network returns its input.
    #[arg(long)]
    identity: bool,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Restorer weights; give twice (S then M) together with --ensemble.
    #[arg(long)]
    weights: Vec<PathBuf>,
    /// Architecture config for every --weights file; defaults to the
    /// config.txt stored next to each file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the architecture variant (plain, s, m).
    #[arg(long)]
    variant: Option<Variant>,
    /// Fusion network weights; enables the ensemble pipeline.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Average over the eight flips and rotations.
    #[arg(long)]
    tta: bool,
    /// Local pooling window for channel attention.
    #[arg(long)]
    tlsc: Option<usize>,
    /// Return the input unchanged (baseline).
    #[arg(long, conflicts_with_all = ["weights", "ensemble"])]
    identity: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for `<stem>_restored.png`.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory receiving metrics.txt and summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleTrainArgs {
    #[arg(long = "weights-s")]
    weights_s: PathBuf,
    #[arg(long = "weights-m")]
    weights_m: PathBuf,
    /// Run configuration supplying the [train] and [data] sections.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = SUITE_TOLERANCE)]
    tol: f64,
    /// Skip the full network check.
    #[arg(long)]
    ops_only: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory of source photos (PNG or PPM).
    #[arg(long, conflicts_with = "synthetic")]
    sources: Option<PathBuf>,
    /// Number of procedural sources when no directory is given.
    #[arg(long, default_value_t = 32)]
    synthetic: usize,
    /// Side length of procedural sources.
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    net: Option<NetKind>,
    #[arg(long)]
    variant: Option<Variant>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = setup_threads().and_then(|()| run(cli)) {
        let kind = e
            .chain()
            .find_map(|c| c.downcast_ref::<cair::Error>())
            .map_or("failed", cair::Error::kind);
        let msg = format!("{e:#}").replace('"', "'");
        eprintln!("error: kind={kind} msg=\"{msg}\"");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn setup_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CAIR_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow!("CAIR_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a, seed),
        Cmd::Init(a) => cmd_init(a, seed),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::EnsembleTrain(a) => cmd_ensemble_train(a, seed),
        Cmd::Gradcheck(a) => cmd_gradcheck(a, seed.unwrap_or(0)),
        Cmd::GenData(a) => cmd_gen_data(a, seed.unwrap_or(0)),
        Cmd::Params(a) => cmd_params(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn train_pairs(cfg: &RunConfig) -> Result<Vec<cair::train::Pair<f32>>> {
    let index = cfg
        .data
        .index
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [data] index"))?;
    let idx = data::DatasetIndex::read(index)?;
    let pairs = idx.load_pairs(cfg.data.train_split)?;
    if pairs.is_empty() {
        bail!(
            "split `{}` of {} is empty",
            cfg.data.train_split,
            index.display()
        );
    }
    Ok(pairs)
}

fn log_sink(path: &Path, append: bool) -> Result<impl FnMut(&LogLine)> {
    use std::io::Write;
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = std::io::LineWriter::new(file);
    Ok(move |line: &LogLine| {
        println!("{line}");
        let _ = writeln!(w, "{line}");
    })
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    if cfg.model.net != NetKind::Cair {
        bail!("`train` builds restorers; use `ensemble-train` for the fusion network");
    }
    let pairs = train_pairs(&cfg)?;
    create_dir(&a.out)?;
    let (net, store) = CairNet::init::<f32>(&cfg.model.cair, cfg.train.seed)?;
    let mut tr = Trainer::new(&net, store, cfg.train.clone())?;
    tr.diag_path = Some(a.out.join(DIAG_FILE));
    let ckpt = a.out.join(CHECKPOINT_FILE);
    if a.resume {
        tr.load_checkpoint(&ckpt)?;
    }
    fs::write(a.out.join(CONFIG_FILE), cfg.serialize())?;
    let log = log_sink(&a.out.join(LOG_FILE), a.resume)?;
    tr.run(&pairs, Some(&ckpt), log)?;
    weights::save_store(&a.out.join(WEIGHTS_FILE), &tr.store)?;
    println!("wrote {}", a.out.join(WEIGHTS_FILE).display());
    Ok(())
}

fn cmd_init(a: InitArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p, seed)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    create_dir(&a.out)?;
    let (net, mut store) = CairNet::init::<f32>(&cfg.model.cair, cfg.train.seed)?;
    if a.identity {
        let ending = &net.ending;
        for id in std::iter::once(ending.weight).chain(ending.bias) {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape))?;
        }
    }
    fs::write(a.out.join(CONFIG_FILE), cfg.serialize())?;
    weights::save_store(&a.out.join(WEIGHTS_FILE), &store)?;
    println!("wrote {}", a.out.join(WEIGHTS_FILE).display());
    Ok(())
}

struct LoadedCair {
    net: CairNet,
    store: ParamStore<f32>,
}

fn load_cair(
    weights_path: &Path,
    config: Option<&Path>,
    variant: Option<Variant>,
) -> Result<LoadedCair> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => weights_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(CONFIG_FILE),
    };
    let cfg = load_config(&cfg_path, None)?;
    let mut arch = cfg.model.cair;
    if let Some(v) = variant {
        arch = arch.with_variant(v);
    }
    let (net, mut store) = CairNet::init::<f32>(&arch, 0)?;
    weights::load_store(weights_path, &mut store)
        .with_context(|| format!("loading {}", weights_path.display()))?;
    Ok(LoadedCair { net, store })
}

fn load_ensemble(path: &Path) -> Result<(EnsembleNet, ParamStore<f32>)> {
    let entries = weights::read_file(path)?;
    let inputs = entries
        .iter()
        .find(|(n, _)| n == "conv_in.weight")
        .map(|(_, t)| t.shape()[1] / 3)
        .ok_or_else(|| cair::Error::MissingParam("conv_in.weight".into()))?;
    let (net, mut store) = EnsembleNet::init::<f32>(inputs, 0);
    weights::load_into(&mut store, &entries)
        .with_context(|| format!("loading {}", path.display()))?;
    Ok((net, store))
}

enum Restorer {
    Identity,
    Single(Box<LoadedCair>),
    Star {
        members: Vec<LoadedCair>,
        fusion: Box<(EnsembleNet, ParamStore<f32>)>,
    },
}

struct Restoration {
    restorer: Restorer,
    tta: bool,
    tlsc: Option<usize>,
}

impl Restoration {
    fn from_args(a: &ModelArgs) -> Result<Self> {
        let restorer = if a.identity {
            Restorer::Identity
        } else {
            let members = a
                .weights
                .iter()
                .map(|w| load_cair(w, a.config.as_deref(), a.variant))
                .collect::<Result<Vec<_>>>()?;
            match &a.ensemble {
                Some(e) => {
                    let fusion = load_ensemble(e)?;
                    if fusion.0.inputs != members.len() {
                        bail!(
                            "fusion network expects {} restorers, got {}",
                            fusion.0.inputs,
                            members.len()
                        );
                    }
                    Restorer::Star {
                        members,
                        fusion: Box::new(fusion),
                    }
                }
                None => match <[LoadedCair; 1]>::try_from(members) {
                    Ok([m]) => Restorer::Single(Box::new(m)),
                    Err(v) => bail!("expected one --weights without --ensemble, got {}", v.len()),
                },
            }
        };
        Ok(Self {
            restorer,
            tta: a.tta,
            tlsc: a.tlsc,
        })
    }

    fn view<'a>(&self, m: &'a LoadedCair) -> ModelView<'a, CairNet, f32> {
        let v = ModelView::new(&m.net, &m.store);
        match self.tlsc {
            Some(w) => inference::tlsc_apply(v, w),
            None => v,
        }
    }

    fn restore(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(match &self.restorer {
            Restorer::Identity => img.clone(),
            Restorer::Single(m) => self.view(m).restore(img, self.tta)?.clamp(0.0, 1.0),
            Restorer::Star { members, fusion } => {
                let views: Vec<_> = members
                    .iter()
                    .map(|m| ModelView::new(&m.net, &m.store))
                    .collect();
                inference::cair_star_pipeline(
                    img,
                    &views,
                    (&fusion.0, &fusion.1),
                    self.tta,
                    self.tlsc,
                )?
            }
        })
    }
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).with_context(|| format!("reading {}", input.display()))? {
        let p = entry?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pnm")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no images in {}", input.display());
    }
    Ok(files)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let r = Restoration::from_args(&a.model)?;
    create_dir(&a.output)?;
    for path in image_files(&a.input)? {
        let img = data::load_image::<f32>(&path)?;
        let out = r.restore(&img)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("bad file name {}", path.display()))?;
        let dst = a.output.join(format!("{stem}_restored.png"));
        data::save_image(&dst, &out)?;
        println!("{}", dst.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let r = Restoration::from_args(&a.model)?;
    let idx = data::DatasetIndex::read(&a.index)?;
    let entries: Vec<_> = idx.split(a.split).cloned().collect();
    let pairs = idx.load_pairs::<f32>(a.split)?;
    if pairs.is_empty() {
        bail!("split `{}` is empty", a.split);
    }
    create_dir(&a.out)?;
    let mut text = String::new();
    let mut outputs = Vec::with_capacity(pairs.len());
    let mut baseline = 0.0;
    for (e, p) in entries.iter().zip(&pairs) {
        let out = r.restore(&p.input)?;
        let psnr = metrics::psnr(&out, &p.target)?;
        let psnr_u8 = metrics::psnr_u8(&out, &p.target)?;
        let ssim = metrics::ssim(&out, &p.target)?;
        baseline += metrics::psnr(&p.input, &p.target)?;
        writeln!(
            text,
            "{}\tfilter={}\tpsnr={psnr:.4}\tpsnr_u8={psnr_u8:.4}\tssim={ssim:.6}",
            e.filtered.display(),
            e.filter
        )?;
        outputs.push(out);
    }
    let report = metrics::evaluate(outputs.iter().zip(pairs.iter().map(|p| &p.target)))?;
    baseline /= pairs.len() as f64;
    writeln!(
        text,
        "summary\tn={}\tpsnr={:.4}\tpsnr_u8={:.4}\tssim={:.6}\tinput_psnr={baseline:.4}",
        report.n_images, report.psnr_db, report.psnr_u8_db, report.ssim
    )?;
    fs::write(a.out.join("metrics.txt"), &text)?;
    let summary = serde_json::json!({
        "split": a.split.to_string(),
        "n_images": report.n_images,
        "psnr_db": report.psnr_db,
        "psnr_u8_db": report.psnr_u8_db,
        "ssim": report.ssim,
        "input_psnr_db": baseline,
        "tta": a.model.tta,
        "tlsc_window": a.model.tlsc,
    });
    fs::write(
        a.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "n={} psnr={:.4} ssim={:.6} input_psnr={baseline:.4}",
        report.n_images, report.psnr_db, report.ssim
    );
    Ok(())
}

fn cmd_ensemble_train(a: EnsembleTrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&a.config, seed)?;
    let pairs = train_pairs(&cfg)?;
    let members = [
        load_cair(&a.weights_s, None, None)?,
        load_cair(&a.weights_m, None, None)?,
    ];
    let views: Vec<_> = members
        .iter()
        .map(|m| ModelView::new(&m.net, &m.store))
        .collect();
    create_dir(&a.out)?;
    cfg.model.net = NetKind::Ensemble;
    cfg.model.ensemble_inputs = views.len();
    fs::write(a.out.join(CONFIG_FILE), cfg.serialize())?;
    let log = log_sink(&a.out.join(LOG_FILE), false)?;
    let (_, store) =
        inference::ensemble_train(&views, &pairs, cfg.train.clone(), cfg.train.seed, log)?;
    weights::save_store(&a.out.join(ENSEMBLE_FILE), &store)?;
    println!("wrote {}", a.out.join(ENSEMBLE_FILE).display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64) -> Result<()> {
    let mut failed = Vec::new();
    let mut report = |name: &str, r: &gradcheck::GradCheckReport| {
        let ok = r.passed(a.tol);
        println!(
            "{name:<20} worst={:.3e} checked={} {}",
            r.worst(),
            r.checked,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(name.to_string());
        }
    };
    for (name, r) in gradcheck::op_suite(seed)? {
        report(name, &r);
    }
    if !a.ops_only {
        report("cair_m_tiny", &gradcheck::tiny_model_check(seed)?);
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    let sources = match &a.sources {
        Some(dir) => data::load_sources(dir)?,
        None => data::synthetic_sources(a.synthetic, a.size, seed),
    };
    if sources.is_empty() {
        bail!("no source images");
    }
    let filters = data::builtin_filters();
    let idx = data::generate_corpus(&sources, &filters, &a.out, seed)?;
    let count = |s| idx.split(s).count();
    println!(
        "wrote {} pairs ({} train, {} val, {} test) to {}",
        idx.entries.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        a.out.join(data::INDEX_FILE).display()
    );
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p, None)?,
        None => RunConfig::default(),
    };
    if let Some(n) = a.net {
        cfg.model.net = n;
    }
    if let Some(v) = a.variant {
        cfg.model.cair = cfg.model.cair.with_variant(v);
    }
    let count = match cfg.model.net {
        NetKind::Cair => count_params(&CairNet::init::<f32>(&cfg.model.cair, 0)?.1),
        NetKind::Ensemble => {
            count_params(&EnsembleNet::init::<f32>(cfg.model.ensemble_inputs, 0).1)
        }
    };
    println!("{count}");
    Ok(())
}
