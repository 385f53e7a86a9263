use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use neural_template::checkpoint;
use neural_template::dataset::{Dataset, DatasetConfig, Split};
use neural_template::encoder::Observation;
use neural_template::latentops::{self, CodeKind, Generation, GenerationRequest};
use neural_template::metrics::{self, EvalRow};
use neural_template::model::{Model, ModelConfig};
use neural_template::par::Execution;
use neural_template::training::{self, TrainConfig, TrainOutput, TrainerState};
use neural_template::Error;

#[derive(Parser, Debug)]
#[command(
    name = "ntemplate",
    version,
    about = "Neural template shape reconstruction and editing"
)]
struct Cli {
    /// TOML file with [dataset], [model], [train], [eval] and [paths] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint to load.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural corpus.
    Dataset,
    /// Train both stages; resumes when --checkpoint is given.
    Train,
    /// Reconstruct shapes: template and deformed mesh per input.
    Reconstruct(Inputs),
    /// Topology code of the first input, shape code of the second.
    Remix(Inputs),
    /// Interpolate one code between two inputs.
    Interp(InterpArgs),
    /// base + plus - minus on one code.
    Arith(CodeArgs),
    /// Score reconstructions of the test split.
    Eval(EvalArgs),
    /// Run a JSON list of generation requests.
    Batch(BatchArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    /// Dataset shape id; repeat for several inputs.
    #[arg(long = "input-id", required = true)]
    input_id: Vec<usize>,
}

#[derive(Args, Debug)]
struct CodeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value = "topology")]
    code: CodeKind,
}

#[derive(Args, Debug)]
struct InterpArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value = "shape")]
    code: CodeKind,
    /// Single interpolation parameter in [0, 1].
    #[arg(long, conflicts_with = "steps")]
    t: Option<f64>,
    /// Evenly spaced parameters from 0 to 1.
    #[arg(long, default_value_t = 5)]
    steps: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Score the ground-truth meshes against themselves.
    #[arg(long)]
    reference: bool,
    /// Also score the training-set medoid baseline.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug)]
struct BatchArgs {
    /// JSON array of requests.
    #[arg(long)]
    requests: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    dataset: DatasetConfig,
    model: ModelConfig,
    train: TrainConfig,
    eval: EvalConfig,
    paths: PathsConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PathsConfig {
    dataset: PathBuf,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            out: "out".into(),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    fn load(cli: &Cli) -> anyhow::Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.dataset.seed = seed;
            cfg.train.seed = seed;
            cfg.eval.seed = seed;
        }
        if let Some(p) = &cli.out {
            cfg.paths.out = p.clone();
        }
        if let Some(p) = &cli.dataset {
            cfg.paths.dataset = p.clone();
        }
        if let Some(p) = &cli.checkpoint {
            cfg.paths.checkpoint = Some(p.clone());
        }
        cfg.dataset.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> anyhow::Result<&Path> {
        match &self.paths.checkpoint {
            Some(p) if p.is_file() => Ok(p),
            Some(p) => bail!("checkpoint {} not found", p.display()),
            None => bail!("no checkpoint given (--checkpoint or paths.checkpoint)"),
        }
    }

    /// Creates the output directory and records the effective configuration.
    fn prepare_out(&self) -> anyhow::Result<&Path> {
        let out = &self.paths.out;
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let text = toml::to_string_pretty(self).context("serializing configuration")?;
        let path = out.join("config.toml");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(out)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Corrupt(_)) => 3,
        Some(Error::NonFiniteLoss { .. } | Error::NonFiniteFlow { .. }) => 4,
        _ => 2,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli)?;
    let exec = Execution::default();
    match &cli.command {
        Command::Dataset => {
            let out = cfg.prepare_out()?;
            let ds = Dataset::generate(&cfg.dataset, exec)?;
            ds.write(out)?;
            log::info!(
                "wrote {} shapes ({} train, {} test) to {}",
                ds.manifest.shapes.len(),
                ds.indices(Split::Train).len(),
                ds.indices(Split::Test).len(),
                out.display()
            );
        }
        Command::Train => train(&cfg, exec)?,
        Command::Reconstruct(args) => {
            let (model, ds) = load_model_and_data(&cfg)?;
            let out = cfg.prepare_out()?;
            for &id in &args.input_id {
                let g = latentops::reconstruct(&model, &observation(&model, &ds, id)?)?;
                write_generation(out, &format!("reconstruct_{id}"), &model, &g, true)?;
            }
        }
        Command::Remix(args) => {
            let [a, b] = ids::<2>(&args.input_id)?;
            let (model, ds) = load_model_and_data(&cfg)?;
            let out = cfg.prepare_out()?;
            let g = latentops::remix(&model, &observation(&model, &ds, a)?, &observation(&model, &ds, b)?)?;
            write_generation(out, &format!("remix_{a}_{b}"), &model, &g, true)?;
        }
        Command::Interp(args) => {
            let [a, b] = ids::<2>(&args.inputs.input_id)?;
            let ts: Vec<f64> = match args.t {
                Some(t) => vec![t],
                None if args.steps < 2 => bail!("--steps must be at least 2"),
                None => (0..args.steps).map(|k| k as f64 / (args.steps - 1) as f64).collect(),
            };
            let (model, ds) = load_model_and_data(&cfg)?;
            let out = cfg.prepare_out()?;
            let (oa, ob) = (observation(&model, &ds, a)?, observation(&model, &ds, b)?);
            for (k, &t) in ts.iter().enumerate() {
                let g = latentops::interpolate(&model, &oa, &ob, args.code, t)?;
                write_generation(out, &format!("interp_{a}_{b}_{k:02}"), &model, &g, false)?;
            }
        }
        Command::Arith(args) => {
            let [base, plus, minus] = ids::<3>(&args.inputs.input_id)?;
            let (model, ds) = load_model_and_data(&cfg)?;
            let out = cfg.prepare_out()?;
            let obs = |id| observation(&model, &ds, id);
            let g = latentops::arithmetic(&model, &obs(base)?, &obs(plus)?, &obs(minus)?, args.code)?;
            write_generation(out, &format!("arith_{base}_{plus}_{minus}"), &model, &g, true)?;
        }
        Command::Eval(args) => eval(&cfg, args, exec)?,
        Command::Batch(args) => {
            let text = std::fs::read_to_string(&args.requests)
                .with_context(|| format!("reading {}", args.requests.display()))?;
            let requests: Vec<GenerationRequest> =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", args.requests.display())))?;
            for r in &requests {
                r.validate()?;
            }
            let (model, ds) = load_model_and_data(&cfg)?;
            let out = cfg.prepare_out()?;
            let mut summary = String::from("request\tconvexes\tvertices\ttriangles\n");
            for r in &requests {
                let g = r.run(&model, |id| {
                    observation(&model, &ds, id).map_err(|e| Error::Config(e.to_string()))
                })?;
                let label = r.label();
                write_generation(out, &label, &model, &g, true)?;
                summary.push_str(&format!(
                    "{label}\t{}\t{}\t{}\n",
                    g.template.convexes.len(),
                    g.mesh.vertices.len(),
                    g.mesh.triangles.len()
                ));
            }
            let path = out.join("summary.tsv");
            std::fs::write(&path, summary).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn ids<const N: usize>(given: &[usize]) -> anyhow::Result<[usize; N]> {
    given
        .try_into()
        .map_err(|_| anyhow::anyhow!("expected {N} --input-id values, got {}", given.len()))
}

fn read_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let dir = &cfg.paths.dataset;
    if !dir.join("manifest.json").is_file() {
        bail!("no dataset at {}", dir.display());
    }
    Ok(Dataset::read(dir)?)
}

fn load_model_and_data(cfg: &RunConfig) -> anyhow::Result<(Model, Dataset)> {
    let (model, _) = checkpoint::load(cfg.checkpoint()?)?;
    let ds = read_dataset(cfg)?;
    Ok((model, ds))
}

fn observation(model: &Model, ds: &Dataset, id: usize) -> anyhow::Result<Observation> {
    let i = ds
        .position(id)
        .with_context(|| format!("shape id {id} not in dataset"))?;
    let obs = ds.observation(i, model.config.input);
    if obs.resolution() != model.config.resolution {
        return Err(Error::InputResolution {
            expected: model.config.resolution.to_string(),
            actual: obs.resolution().to_string(),
        }
        .into());
    }
    Ok(obs)
}

fn write_generation(out: &Path, stem: &str, model: &Model, g: &Generation, with_template: bool) -> anyhow::Result<()> {
    if g.is_empty() {
        log::warn!("{stem}: template is empty");
    }
    let write = |name: String, text: String| {
        let path = out.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    if with_template {
        write(format!("{stem}_template.obj"), g.template.to_obj())?;
        let template = model.form_template(&g.codes.zt)?;
        write(format!("{stem}_planes.txt"), template.planes_sidecar())?;
    }
    write(format!("{stem}.obj"), g.mesh.to_obj("convex_"))
}

fn train(cfg: &RunConfig, exec: Execution) -> anyhow::Result<()> {
    let ds = read_dataset(cfg)?;
    let (mut model, mut state) = match &cfg.paths.checkpoint {
        Some(_) => checkpoint::load(cfg.checkpoint()?)?,
        None => (
            Model::new(cfg.model.clone(), cfg.train.seed)?,
            TrainerState::new(cfg.train.seed),
        ),
    };
    let out = cfg.prepare_out()?;
    let data = ds.examples(Split::Train, model.config.input);
    if let Some(e) = data.first() {
        model.encoder.check(&e.obs)?;
    }
    let output = TrainOutput { dir: out.to_path_buf() };
    let total = cfg.train.total_iters();
    training::train(&mut model, &data, &cfg.train, &mut state, Some(&output), exec, |r| {
        if r.step % 50 == 0 || r.step + 1 == total {
            log::info!(
                "step {} stage {} align {:.5} sparsity {:.4} total {:.5}",
                r.step,
                r.stage,
                r.l_align,
                r.l_b,
                r.total
            );
        }
    })?;
    log::info!("checkpoints and log in {}", out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, args: &EvalArgs, exec: Execution) -> anyhow::Result<()> {
    let seed = cfg.eval.seed;
    let ds = read_dataset(cfg)?;
    let rows: Vec<EvalRow> = if args.reference {
        metrics::evaluate_reference(&ds, Split::Test, seed, exec)?
    } else {
        let (model, _) = checkpoint::load(cfg.checkpoint()?)?;
        metrics::evaluate_model(&model, &ds, Split::Test, seed, exec)?
    };
    let out = cfg.prepare_out()?;
    let path = out.join("metrics.tsv");
    metrics::write_table(&path, &rows).with_context(|| format!("writing {}", path.display()))?;
    log::info!(
        "mean CD {:.4} over {} shapes, table in {}",
        metrics::mean_cd(&rows),
        rows.len(),
        path.display()
    );
    if args.baseline {
        let (medoid, base) = metrics::evaluate_medoid_baseline(&ds, Split::Test, seed, exec)?;
        let path = out.join("baseline.tsv");
        metrics::write_table(&path, &base).with_context(|| format!("writing {}", path.display()))?;
        log::info!(
            "medoid baseline (shape {medoid}) mean CD {:.4}",
            metrics::mean_cd(&base)
        );
    }
    Ok(())
}
