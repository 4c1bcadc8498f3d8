//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data or
//! format, 3 numerical.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig};
use crate::fit::{self, Family};
use crate::gradcheck::{self, GradCheckConfig};
use crate::losses::{LossConfig, RecKind};
use crate::model_io;
use crate::nig::MixtureMode;
use crate::predictor::{self, ModelConfig, TimeSpec};
use crate::synth::{self, AtrophyRates, SynthConfig};
use crate::tensor::{self, ImageTensor, Tensor3};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 3;
pub const THREADS_ENV: &str = "EVINIG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "evinig", version, about = "Temporal NIG image prediction with evidential uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic longitudinal dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Predict the image at time `t` from two scans.
    Predict(PredictArgs),
    /// Score a model on a dataset.
    Eval(EvalArgs),
    /// Compare distribution fits of pooled intensity changes.
    Fitdist(FitdistArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    subjects: usize,
    /// Image height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
    size: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    scans_min: usize,
    #[arg(long, default_value_t = 9)]
    scans_max: usize,
    #[arg(long, default_value_t = 0.5)]
    interval_min: f64,
    #[arg(long, default_value_t = 2.5)]
    interval_max: f64,
    #[arg(long, default_value_t = 0.01)]
    rate_cn: f64,
    #[arg(long, default_value_t = 0.025)]
    rate_mci: f64,
    #[arg(long, default_value_t = 0.04)]
    rate_ad: f64,
    #[arg(long, default_value_t = 0.02)]
    texture_drift: f64,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Training history (JSON lines). Defaults to `<out>.history.jsonl`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    rec_weight: f64,
    #[arg(long, default_value = "mae", value_parser = parse_rec)]
    rec: RecKind,
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    projected: usize,
    #[arg(long, default_value_t = 8)]
    decoder_hidden: usize,
    #[arg(long, default_value = "symmetric", value_parser = parse_mixture)]
    mixture: MixtureMode,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    fold_index: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training triples drawn per epoch (default: all).
    #[arg(long)]
    max_triples: Option<usize>,
    /// Size of the fixed validation subset (default: all).
    #[arg(long)]
    max_val_triples: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Earlier scan (2-d tensor file).
    #[arg(long)]
    i0: PathBuf,
    /// Later scan (2-d tensor file).
    #[arg(long)]
    i1: PathBuf,
    #[arg(long)]
    t0: f64,
    #[arg(long)]
    t1: f64,
    /// Target time.
    #[arg(long)]
    t: f64,
    /// Output prefix; writes `<prefix>_pred.tnig`, `_d`, `_al`, `_ep`.
    #[arg(long)]
    out: PathBuf,
    /// Also write 8-bit PGM previews.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fraction of scans removed before evaluation.
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower edges of the horizon buckets in years.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 5.0])]
    horizon_edges: Vec<f64>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV table of the same cells.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitdistArgs {
    /// Dataset directory; changes between consecutive scans are pooled.
    #[arg(long, conflicts_with = "deltas", required_unless_present = "deltas")]
    data: Option<PathBuf>,
    /// Tensor file of raw changes.
    #[arg(long)]
    deltas: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "tnig,student_t,laplace,exponential")]
    families: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the square test inputs.
    #[arg(long, default_value_t = 8)]
    size: usize,
}

fn parse_rec(s: &str) -> std::result::Result<RecKind, String> {
    match s {
        "mae" => Ok(RecKind::Mae),
        "mse" => Ok(RecKind::Mse),
        _ => Err(format!("expected mae or mse, got `{s}`")),
    }
}

fn parse_mixture(s: &str) -> std::result::Result<MixtureMode, String> {
    s.parse::<MixtureMode>().map_err(|e| e.to_string())
}

/// Worker count from `EVINIG_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn echo<T: Serialize>(out: &mut dyn Write, what: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    writeln!(out, "{what}:\n{text}").map_err(|e| Error::io("<stdout>", e))
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable text to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Fitdist(a) => cmd_fitdist(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = SynthConfig {
        subjects: a.subjects,
        height: a.size[0],
        width: a.size[1],
        scans_min: a.scans_min,
        scans_max: a.scans_max,
        interval_min: a.interval_min,
        interval_max: a.interval_max,
        atrophy_rate: AtrophyRates {
            cn: a.rate_cn,
            mci: a.rate_mci,
            ad: a.rate_ad,
        },
        texture_drift: a.texture_drift,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    echo(out, "synth config", &cfg)?;
    cfg.validate()?;
    let ds = synth::synth_dataset(&cfg)?;
    synth::write_dataset(&ds, &a.out)?;
    let scans: usize = ds.iter().map(|s| s.scans().len()).sum();
    say(out, format!("wrote {} subjects ({scans} scans) to {}", ds.len(), a.out.display()))?;
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        weight_decay: a.weight_decay,
        batch: a.batch,
        folds: a.folds,
        fold_index: a.fold_index,
        seed: a.seed,
        loss: LossConfig {
            tau: a.tau,
            rec_kind: a.rec,
            rec_weight: a.rec_weight,
        },
        model: ModelConfig {
            window: a.window,
            channels: a.channels,
            projected: a.projected,
            decoder_hidden: a.decoder_hidden,
            mixture: a.mixture,
        },
        max_triples_per_epoch: a.max_triples,
        max_val_triples: a.max_val_triples,
        threads: threads_from_env(),
        ..TrainConfig::default()
    };
    echo(out, "train config", &cfg)?;
    say(out, format!("threads: {}", cfg.threads))?;
    cfg.validate()?;
    let ds = synth::read_dataset(&a.data)?;
    let mut sink = Ok(());
    let (model, history) = trainer::train_with(&ds, &cfg, |r| {
        if sink.is_ok() {
            sink = say(
                out,
                format!(
                    "epoch {:>4}  train {:.6} (rec {:.6})  val {:.6} (rec {:.6})  {:.1}s",
                    r.epoch, r.train_total, r.train_rec, r.val_total, r.val_rec, r.wall_secs
                ),
            );
        }
    })?;
    sink?;
    model_io::model_save(&model, &a.out)?;
    let history_path = a.history.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.jsonl");
        PathBuf::from(p)
    });
    write_text(&history_path, &history.to_jsonl())?;
    say(
        out,
        format!(
            "best epoch {}; model written to {}; history to {}",
            history.best_epoch,
            a.out.display(),
            history_path.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn read_scan(path: &Path, age: f64) -> Result<ImageTensor> {
    let map = tensor::read_map(path)?;
    if map.channels() != 1 {
        return Err(Error::format(path, "expected a single-channel 2-d scan"));
    }
    ImageTensor::new(map, age.max(0.0)).map_err(|e| Error::format(path, e.to_string()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

/// Scales a non-negative map by its maximum for previewing.
fn normalized(map: &Tensor3) -> Tensor3 {
    let top = map.data().iter().fold(0.0f64, |a, &b| a.max(b));
    let mut m = map.clone();
    if top > 0.0 {
        m.data_mut().iter_mut().for_each(|v| *v /= top);
    }
    m
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> Result<i32> {
    let time = TimeSpec::new(a.t0, a.t1, a.t)?;
    echo(out, "time", &time)?;
    let model = model_io::model_load(&a.model)?;
    echo(out, "model config", &model.config)?;
    let i0 = read_scan(&a.i0, a.t0)?;
    let i1 = read_scan(&a.i1, a.t1)?;
    if !i0.same_shape(&i1) {
        return Err(Error::Shape("the two scans differ in size".into()));
    }
    let p = predictor::tnig_forward(&i0, &i1, &time, &model)?;
    let mut d_preview = p.d_map.clone();
    d_preview.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    let outputs = [
        ("_pred", p.image.pixels().clone(), p.image.pixels().clone()),
        ("_d", p.d_map.clone(), d_preview),
        ("_al", p.al_map.clone(), normalized(&p.al_map)),
        ("_ep", p.ep_map.clone(), normalized(&p.ep_map)),
    ];
    for (suffix, map, preview) in &outputs {
        let path = with_suffix(&a.out, &format!("{suffix}.tnig"));
        tensor::write_map(&path, map)?;
        say(out, format!("wrote {}", path.display()))?;
        if a.pgm {
            let path = with_suffix(&a.out, &format!("{suffix}.pgm"));
            tensor::write_pgm(&path, preview)?;
            say(out, format!("wrote {}", path.display()))?;
        }
    }
    let kind = if time.is_extrapolation() { "extrapolation" } else { "interpolation" };
    say(out, format!("{kind} at t_norm {:.4}", time.normalized()))?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = EvalConfig {
        missing_ratio: a.missing,
        missing_seed: a.seed,
        horizon_edges: a.horizon_edges,
        threads: threads_from_env(),
    };
    echo(out, "eval config", &cfg)?;
    let model = model_io::model_load(&a.model)?;
    let ds = synth::read_dataset(&a.data)?;
    let report = eval::evaluate(&model, &ds, &cfg)?;
    for c in &report.cells {
        say(
            out,
            format!(
                "{:<14} {:<10} n={:<4} ssim {:.4} (copy {:.4})  psnr {:.2}  mse {:.6}",
                c.section, c.key, c.model.count, c.model.ssim_mean, c.baseline.ssim_mean, c.model.psnr_mean, c.model.mse_mean
            ),
        )?;
    }
    write_text(&a.out, &report.to_json())?;
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv())?;
    }
    Ok(EXIT_OK)
}

/// Pixel-wise changes between consecutive scans, pooled over all subjects.
pub fn pooled_deltas(ds: &[synth::SubjectSequence]) -> Vec<f64> {
    let mut out = Vec::new();
    for seq in ds {
        for w in seq.scans().windows(2) {
            out.extend(w[1].pixels().data().iter().zip(w[0].pixels().data()).map(|(b, a)| b - a));
        }
    }
    out
}

fn cmd_fitdist(a: FitdistArgs, out: &mut dyn Write) -> Result<i32> {
    let families: BTreeSet<Family> = a.families.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let names: Vec<&str> = families.iter().map(|f| f.name()).collect();
    echo(out, "families", &names)?;
    let samples = match (&a.data, &a.deltas) {
        (Some(dir), _) => pooled_deltas(&synth::read_dataset(dir)?),
        (None, Some(path)) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            tensor::decode_tensor(&bytes, path)?.1
        }
        (None, None) => return Err(Error::Config("pass --data or --deltas".into())),
    };
    say(out, format!("samples: {}", samples.len()))?;
    let reports = fit::fit_compare(&samples, &families)?;
    say(out, format!("{:<12} {:>18} {:>12} {:>12}  params", "family", "log_likelihood", "mean_err", "var_err"))?;
    for r in &reports {
        let params: Vec<String> = r.params.iter().map(|p| format!("{p:.6}")).collect();
        say(
            out,
            format!(
                "{:<12} {:>18.3} {:>12.3e} {:>12.3e}  [{}]",
                r.family.name(),
                r.log_likelihood,
                r.mean_err,
                r.var_err,
                params.join(", ")
            ),
        )?;
    }
    if let Some(path) = &a.out {
        let mut text = serde_json::to_string_pretty(&reports).expect("reports serialize");
        text.push('\n');
        write_text(path, &text)?;
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = GradCheckConfig {
        eps: a.eps,
        tol: a.tol,
        seed: a.seed,
        size: a.size,
    };
    echo(out, "gradcheck config", &cfg)?;
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) || !(cfg.tol >= 0.0) || cfg.size < crate::tensor::MIN_IMAGE_SIDE {
        return Err(Error::Config("eps must be > 0, tol >= 0 and size >= 8".into()));
    }
    let report = gradcheck::run_gradcheck(&cfg)?;
    let mut ok = true;
    for e in &report {
        ok &= e.passed;
        say(
            out,
            format!(
                "{:<28} checked {:>5}  max rel err {:.3e}  {}",
                e.operation,
                e.checked,
                e.max_rel_err,
                if e.passed { "ok" } else { "FAIL" }
            ),
        )?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_NUMERICAL })
}
