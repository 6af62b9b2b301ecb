use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use nif::config::{RunConfig, DATA_KEYS, KEYS};
use nif::data::{self, Dataset};
use nif::eval::{
    bpd_over_dataset, export_embeddings, export_sample_grid, fd_sweep, grid_dims, write_report, FeatureMap,
    PixelRange,
};
use nif::model::{Model, Temperature, Variant};
use nif::nif::DeviationScale;
use nif::tensor::{SeededRng, Vector};
use nif::train::{load_checkpoint, save_checkpoint, train, Checkpoint};
use nif::verify::{run_suite, Mutation};
use nif::NifError;

#[derive(Parser)]
#[command(name = "nif", version, about = "Train, sample, evaluate and verify noisy injective flows")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus `<out>.metrics.csv`
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples: a PGM grid for image models, CSV otherwise
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write deterministic latent embeddings as CSV
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV or IDX input (default: test split of the training data)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write on-manifold reconstructions as CSV
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV or IDX input (default: test split of the training data)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one `metric,value` report
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV or IDX input (default: test split of the training data)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the Fréchet distance for each deviation scale in `s_grid`
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV or IDX input (default: test split of the training data)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the oracle suite; exit 1 if any check fails
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, default_value = "none")]
        mutate: String,
    },
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// One optional `--key VALUE` flag per config key.
#[derive(Clone, Debug, Default)]
struct Overrides(Vec<(&'static str, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let set = KEYS
            .iter()
            .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name, v.clone())))
            .collect();
        Ok(Overrides(set))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        KEYS.iter().fold(cmd.next_help_heading("Config keys"), |cmd, k| {
            let help = match k.default {
                Some(d) => format!("{} [default: {d}]", k.help),
                None => k.help.to_string(),
            };
            let mut arg = Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .help(help)
                .allow_hyphen_values(true);
            if k.name.contains('_') {
                arg = arg.alias(k.name.replace('_', "-"));
            }
            cmd.arg(arg)
        })
        .next_help_heading(None)
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl Common {
    fn resolve(&self) -> nif::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(),
        };
        for (k, v) in &self.overrides.0 {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn exit_code(e: &NifError) -> u8 {
    match e {
        NifError::Numeric { .. } | NifError::Train(_) => 3,
        _ => 2,
    }
}

fn config_error(key: &str, message: impl Into<String>) -> NifError {
    NifError::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn init_threads() -> nif::Result<()> {
    let Ok(v) = std::env::var("NIF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| config_error("NIF_THREADS", format!("expected a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_error("NIF_THREADS", e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> nif::Result<u8> {
    match cmd {
        Cmd::Train { common, out } => cmd_train(&common.resolve()?, &out),
        Cmd::Sample { common, ckpt, out } => cmd_sample(&common.resolve()?, &ckpt, &out),
        Cmd::Embed {
            common,
            ckpt,
            data,
            out,
        } => cmd_embed(&common.resolve()?, &ckpt, data.as_deref(), &out),
        Cmd::Reconstruct {
            common,
            ckpt,
            data,
            out,
        } => cmd_reconstruct(&common.resolve()?, &ckpt, data.as_deref(), &out),
        Cmd::Eval { common, ckpt, data } => cmd_eval(&common.resolve()?, &ckpt, data.as_deref()),
        Cmd::Sweep { common, ckpt, data } => cmd_sweep(&common.resolve()?, &ckpt, data.as_deref()),
        Cmd::Verify { common, mutate } => {
            let mutation = Mutation::parse(&mutate).ok_or_else(|| config_error("mutate", "unknown mutation"))?;
            cmd_verify(&common.resolve()?, mutation)
        }
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> nif::Result<u8> {
    let tc = cfg.train_config()?;
    let dataset = data::load(&cfg.dataset_spec()?)?;
    let mut extra = cfg.data_entries()?;
    if let Some((h, w)) = dataset.image_shape() {
        extra.insert("image_shape".into(), format!("{h}x{w}"));
    }
    let metrics_path = out.with_extension("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let outcome = train(&tc, &dataset, extra, &mut metrics)?;
    metrics.flush()?;
    save_checkpoint(&outcome.checkpoint, out)?;
    if !outcome.aborted.is_empty() {
        eprintln!("warning: {} steps skipped on numeric failures", outcome.aborted.len());
    }
    eprintln!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(0)
}

fn image_shape(ckpt: &Checkpoint) -> Option<(usize, usize)> {
    let (h, w) = ckpt.extra.get("image_shape")?.split_once('x')?;
    Some((h.parse().ok()?, w.parse().ok()?))
}

fn cmd_sample(cfg: &RunConfig, ckpt_path: &Path, out: &Path) -> nif::Result<u8> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let ev = cfg.eval_settings()?;
    let mut rng = SeededRng::new(cfg.seed()?);
    let model = &ckpt.model;
    if model.variant() == Variant::Nf && cfg.get("s").is_some() {
        eprintln!("warning: NF models have no noise term; s is ignored");
    }
    let (t, s) = (Temperature::new(ev.t)?, DeviationScale::new(ev.s)?);
    if let Some(shape) = image_shape(&ckpt) {
        let (rows, cols) = grid_dims(ev.n);
        let range = if ckpt.config.dequantize {
            PixelRange::Unit
        } else {
            PixelRange::Byte
        };
        export_sample_grid(model, rows, cols, t, s, shape, range, out, &mut rng)?;
    } else {
        let rows = (0..ev.n)
            .map(|_| model.sample(t, s, &mut rng))
            .collect::<nif::Result<Vec<_>>>()?;
        write_vectors(out, "x", model.data_dim(), &rows)?;
    }
    Ok(0)
}

fn write_vectors(path: &Path, prefix: &str, dim: usize, rows: &[Vector]) -> nif::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..dim).map(|k| format!("{prefix}_{k}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluation data: an explicit CSV or IDX file, otherwise the held-out
/// split of the dataset recorded in the checkpoint (data keys in the
/// config take precedence).
fn eval_data(cfg: &RunConfig, ckpt: &Checkpoint, file: Option<&Path>) -> nif::Result<Dataset> {
    if let Some(path) = file {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(&[0, 0]) {
            let labels = cfg.get("labels_path").map(Path::new);
            return data::load_idx(path, labels, 0);
        }
        let text = String::from_utf8(bytes).map_err(|e| NifError::Format {
            offset: e.utf8_error().valid_up_to(),
            message: "data file is neither IDX nor UTF-8 CSV".into(),
        })?;
        return data::parse_csv_vectors(&text);
    }
    let mut spec_cfg = RunConfig::new();
    spec_cfg.set("seed", &ckpt.config.seed.to_string())?;
    for &k in DATA_KEYS {
        if let Some(v) = cfg.get(k).or(ckpt.extra.get(k).map(String::as_str)) {
            spec_cfg.set(k, v)?;
        }
    }
    let all = data::load(&spec_cfg.dataset_spec()?)?;
    let test = all.test();
    Ok(if test.is_empty() { all } else { test })
}

/// Maps byte data to the `[0, 1)` scale a dequantized model was trained on.
fn to_model_space(ckpt: &Checkpoint, xs: &[Vector]) -> Vec<Vector> {
    if ckpt.config.dequantize {
        xs.iter().map(|x| x.iter().map(|k| (k + 0.5) / 256.0).collect()).collect()
    } else {
        xs.to_vec()
    }
}

fn check_dim(model: &Model, d: &Dataset) -> nif::Result<()> {
    if d.dim() != model.data_dim() {
        return Err(NifError::Shape(format!(
            "data has {} dimensions, model expects {}",
            d.dim(),
            model.data_dim()
        )));
    }
    Ok(())
}

fn cmd_embed(cfg: &RunConfig, ckpt_path: &Path, file: Option<&Path>, out: &Path) -> nif::Result<u8> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let d = eval_data(cfg, &ckpt, file)?;
    check_dim(&ckpt.model, &d)?;
    export_embeddings(&ckpt.model, &to_model_space(&ckpt, d.examples()), d.labels(), out)?;
    Ok(0)
}

fn cmd_reconstruct(cfg: &RunConfig, ckpt_path: &Path, file: Option<&Path>, out: &Path) -> nif::Result<u8> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let d = eval_data(cfg, &ckpt, file)?;
    check_dim(&ckpt.model, &d)?;
    let rows = to_model_space(&ckpt, d.examples())
        .iter()
        .map(|x| ckpt.model.reconstruct(x))
        .collect::<nif::Result<Vec<_>>>()?;
    let rows: Vec<Vector> = if ckpt.config.dequantize {
        rows.iter().map(|r| r.iter().map(|y| 256.0 * y - 0.5).collect()).collect()
    } else {
        rows
    };
    write_vectors(out, "x", ckpt.model.data_dim(), &rows)?;
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig, ckpt_path: &Path, file: Option<&Path>) -> nif::Result<u8> {
    use nif::config::Metric;
    let ckpt = load_checkpoint(ckpt_path)?;
    let ev = cfg.eval_settings()?;
    let model = &ckpt.model;
    let d = eval_data(cfg, &ckpt, file)?;
    check_dim(model, &d)?;
    let mut rng = SeededRng::new(cfg.seed()?);
    let value = match ev.metric {
        Metric::Bpd => {
            let r = bpd_over_dataset(model, d.examples(), ckpt.config.dequantize, &mut rng)?;
            if !r.exact {
                eprintln!("note: ELBO-based value, an upper bound on the true bits per dimension");
            }
            r.bpd
        }
        Metric::Fd => {
            let feat = FeatureMap::new(model.data_dim(), ev.feature_seed);
            let xs = to_model_space(&ckpt, d.examples());
            let (t, s) = (Temperature::new(ev.t)?, ev.s);
            fd_sweep(model, &xs, &[s], t, ev.n_samples, &feat, &mut rng)?.rows[0].1
        }
        Metric::Residual => {
            if model.variant() == Variant::Nf {
                return Err(config_error("metric", "residual needs a NIF model; NF reconstructs exactly"));
            }
            let xs = to_model_space(&ckpt, d.examples());
            let total = xs
                .iter()
                .map(|x| Ok(ckpt.model.reconstruct(x)?.sub(x).norm()))
                .sum::<nif::Result<f64>>()?;
            total / xs.len() as f64
        }
    };
    let mut stdout = std::io::stdout().lock();
    write_report(&mut stdout, "metric,value", &[(ev.metric.as_str().to_string(), value)])?;
    Ok(0)
}

fn cmd_sweep(cfg: &RunConfig, ckpt_path: &Path, file: Option<&Path>) -> nif::Result<u8> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let ev = cfg.eval_settings()?;
    let model = &ckpt.model;
    if model.variant() == Variant::Nf {
        return Err(config_error("s_grid", "NF models have no deviation scale to sweep"));
    }
    let d = eval_data(cfg, &ckpt, file)?;
    check_dim(model, &d)?;
    let feat = FeatureMap::new(model.data_dim(), ev.feature_seed);
    let xs = to_model_space(&ckpt, d.examples());
    let mut rng = SeededRng::new(cfg.seed()?);
    let r = fd_sweep(model, &xs, &ev.s_grid, Temperature::new(ev.t)?, ev.n_samples, &feat, &mut rng)?;
    let rows: Vec<(String, f64)> = r.rows.iter().map(|(s, fd)| (s.to_string(), *fd)).collect();
    let mut stdout = std::io::stdout().lock();
    write_report(&mut stdout, "s,fd", &rows)?;
    writeln!(stdout, "argmin_s,{}", r.argmin_s)?;
    Ok(0)
}

fn cmd_verify(cfg: &RunConfig, mutation: Mutation) -> nif::Result<u8> {
    let ev = cfg.eval_settings()?;
    let report = run_suite(cfg.seed()?, ev.level, mutation);
    print!("{}", report.render());
    Ok(if report.all_passed() { 0 } else { 1 })
}
