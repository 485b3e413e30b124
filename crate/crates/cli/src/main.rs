mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spaer_core::io;
use spaer_core::simulator::simulate;
use spaer_core::temporal::{load_model, save_model, train, Model, TrainingExample};
use spaer_core::tracker::{pair_image_stats, ReportSummary, TrackTiming};
use spaer_core::{align, track, Error, MotionSequence, Result, TrackingReport};

use config::RunConfig;
use svg::Series;

#[derive(Debug, Parser)]
#[command(name = "spaer", version, about = "Rigid motion tracking for volume time series")]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true, env = "SPAER_THREADS")]
    threads: Option<usize>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic moving-phantom sequence.
    Simulate(SimulateArgs),
    /// Estimate the motion of a sequence.
    Track(TrackArgs),
    /// Train the attention refinement on simulated sequences.
    Train(TrainArgs),
    /// Compare a motion CSV against ground truth.
    Evaluate(EvaluateArgs),
    /// Render SVG plots from report and loss CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    /// Voxels per side.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    spacing_mm: Option<f64>,
    #[arg(long)]
    tmax_mm: Option<f64>,
    #[arg(long)]
    rmax_deg: Option<f64>,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Amplitude of the sinusoidal global intensity drift.
    #[arg(long)]
    contrast: Option<f64>,
    /// Magnitude of the per-frame smooth distortion, mm.
    #[arg(long)]
    distortion: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrackArgs {
    /// Sequence directory with a manifest.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Add a diffeomorphic residual to every rigidly aligned pair.
    #[arg(long)]
    diffeo: bool,
    #[arg(long)]
    aligned_out: Option<PathBuf>,
    /// Directory for the residual displacement fields (with --diffeo).
    #[arg(long)]
    residuals_out: Option<PathBuf>,
    /// Wall-clock timings as JSON (kept out of the motion CSV).
    #[arg(long)]
    timing_out: Option<PathBuf>,
    /// Motion CSV: pose of every frame relative to frame 0.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Simulated sequence directories (each with truth.csv and a reference).
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    split: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Loss curve CSV (default: <out>.loss.csv).
    #[arg(long)]
    loss_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Original sequence: adds image agreement columns and, if it has a
    /// reference, dice of the aligned frames.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Residual fields written by `track --residuals-out`.
    #[arg(long)]
    residuals: Option<PathBuf>,
    /// Timing JSON written by `track --timing-out`.
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Summary statistics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report CSVs; each becomes one series.
    #[arg(long, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Series labels (default: file stems).
    #[arg(long, num_args = 1..)]
    labels: Vec<String>,
    /// Loss curve CSVs from `train`.
    #[arg(long, num_args = 1..)]
    loss: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::DegenerateGeometry { .. } | Error::NonFiniteEnergy(_) => 4,
        Error::DivergenceDetected { .. } | Error::NonFiniteGradient(_) => 5,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(cfg, a),
        Command::Track(a) => cmd_track(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn cmd_simulate(cfg: RunConfig, a: SimulateArgs) -> Result<()> {
    let mut sim = cfg.simulate;
    set(&mut sim.seed, a.seed);
    set(&mut sim.frames, a.frames);
    set(&mut sim.size, a.size);
    set(&mut sim.spacing_mm, a.spacing_mm);
    set(&mut sim.t_max_mm, a.tmax_mm);
    set(&mut sim.r_max_deg, a.rmax_deg);
    set(&mut sim.noise_sigma, a.noise);
    set(&mut sim.contrast_drift, a.contrast);
    set(&mut sim.distortion_mm, a.distortion);
    let seq = simulate(&sim)?;
    io::write_sequence(&a.out, &seq.frames, Some(&seq.phantom))?;
    io::write_trajectory(&a.out.join("truth.csv"), &seq.trajectory)?;
    io::write_json(&a.out.join("simconfig.json"), &seq.config)?;
    eprintln!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(())
}

fn cmd_track(cfg: RunConfig, a: TrackArgs) -> Result<()> {
    let seq = io::read_sequence(&a.input)?;
    let mut settings = cfg.track.clone();
    settings.diffeo |= a.diffeo;
    let (bank, params) = match &a.model {
        Some(path) => {
            let model = load_model(path)?;
            let params = settings.attention.then_some(model.params);
            (model.bank, params)
        }
        None => (cfg.bank()?, None),
    };
    let tracked = track(&seq.frames, &bank, params.as_ref(), &settings.options())?;
    for (t, s) in tracked.timing.pair_secs.iter().enumerate() {
        eprintln!("pair {t}: {s:.3} s");
    }
    eprintln!("sequence: {:.3} s", tracked.timing.sequence_secs);
    io::write_trajectory(&a.out, &tracked.motion.accumulated)?;
    if let Some(path) = &a.timing_out {
        io::write_json(path, &tracked.timing)?;
    }
    if let Some(dir) = &a.residuals_out {
        let Some(fields) = &tracked.motion.residuals else {
            return Err(Error::InvalidConfig("--residuals-out needs --diffeo".into()));
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        for (t, u) in fields.iter().enumerate() {
            io::write_field(&dir.join(residual_name(t)), u, "displacement")?;
        }
    }
    if let Some(dir) = &a.aligned_out {
        let aligned = align(&seq.frames, &tracked.motion)?;
        io::write_sequence(dir, &aligned, seq.reference.as_ref())?;
    }
    Ok(())
}

fn residual_name(t: usize) -> String {
    format!("residual_{t:04}.vol")
}

fn parse_split(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("split `{text}` is not three numbers")))?;
    let [train, val, test] = parts[..] else {
        return Err(Error::InvalidConfig(format!("split `{text}` needs three fractions")));
    };
    if parts.iter().any(|p| !(*p >= 0.0)) || (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions must be non-negative and sum to 1, got `{text}`")));
    }
    Ok([train, val, test])
}

#[derive(Debug, Serialize)]
struct SplitRecord {
    seed: u64,
    train: Vec<PathBuf>,
    validation: Vec<PathBuf>,
    test: Vec<PathBuf>,
}

fn load_example(dir: &Path) -> Result<TrainingExample> {
    let seq = io::read_sequence(dir)?;
    let reference = seq
        .reference
        .ok_or_else(|| Error::InvalidConfig(format!("{} has no reference volume", dir.display())))?;
    Ok(TrainingExample {
        frames: seq.frames,
        trajectory: io::read_trajectory(&dir.join("truth.csv"))?,
        reference,
    })
}

fn cmd_train(cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let fractions = parse_split(&a.split)?;
    let mut tc = cfg.train.clone();
    set(&mut tc.epochs, a.epochs);
    set(&mut tc.seed, a.seed);
    set(&mut tc.learning_rate, a.lr);
    set(&mut tc.batch_size, a.batch_size);
    tc.validate()?;
    let bank = cfg.bank()?;

    let mut dirs = a.data.clone();
    dirs.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed));
    let n = dirs.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidConfig(format!(
            "{n} sequences leave an empty training or validation set with split {}",
            a.split
        )));
    }
    let split = SplitRecord {
        seed: tc.seed,
        train: dirs[..n_train].to_vec(),
        validation: dirs[n_train..n_train + n_val].to_vec(),
        test: dirs[n_train + n_val..].to_vec(),
    };
    let load = |ds: &[PathBuf]| ds.iter().map(|d| load_example(d)).collect::<Result<Vec<_>>>();
    let training = load(&split.train)?;
    let validation = load(&split.validation)?;
    eprintln!(
        "training on {} sequences, validating on {}, holding out {}",
        training.len(),
        validation.len(),
        split.test.len()
    );
    let outcome = train(&training, &validation, &bank, &tc)?;
    for h in &outcome.history {
        eprintln!("epoch {}: train {:.6e} val {:.6e}", h.epoch, h.train_loss, h.val_loss);
    }
    eprintln!("best epoch {}", outcome.best_epoch);
    let loss_path = a.loss_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    io::write_loss_csv(&loss_path, &outcome.history)?;
    io::write_json(&with_suffix(&a.out, ".split.json"), &split)?;
    save_model(
        &a.out,
        &Model {
            params: outcome.params,
            bank: outcome.bank,
        },
    )
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut estimated = MotionSequence::from_accumulated(&io::read_trajectory(&a.motion)?);
    let truth = MotionSequence::from_accumulated(&io::read_trajectory(&a.truth)?);
    if let Some(dir) = &a.residuals {
        let fields = (0..estimated.transforms.len())
            .map(|t| io::read_field(&dir.join(residual_name(t))).map(|(u, _)| u))
            .collect::<Result<Vec<_>>>()?;
        estimated.residuals = Some(fields);
    }
    let mut report = TrackingReport::from_motion(&estimated, &truth)?;
    if let Some(dir) = &a.input {
        let seq = io::read_sequence(dir)?;
        report = report.with_image_stats(&pair_image_stats(&seq.frames, &estimated)?)?;
        if let Some(reference) = &seq.reference {
            report = report.with_dice(&align(&seq.frames, &estimated)?, reference)?;
        }
    }
    if let Some(path) = &a.timing {
        let timing: TrackTiming = io::read_json(path)?;
        report = report.with_timing(&timing)?;
    }
    io::write_report_csv(&a.out, &report)?;
    let summary: ReportSummary = report.summary();
    eprintln!(
        "translation error {:.4} ± {:.4} mm, rotation error {:.4} ± {:.4} deg over {} pairs",
        summary.trans_err_mm.mean, summary.trans_err_mm.std, summary.ang_err_deg.mean, summary.ang_err_deg.std, summary.pairs
    );
    if let Some(path) = &a.json {
        io::write_json(path, &summary)?;
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if a.reports.is_empty() && a.loss.is_empty() {
        return Err(Error::InvalidConfig("nothing to plot: pass --reports or --loss".into()));
    }
    if !a.labels.is_empty() && a.labels.len() != a.reports.len() {
        return Err(Error::InvalidConfig(format!("{} labels for {} reports", a.labels.len(), a.reports.len())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let label = |i: usize, path: &Path| {
        a.labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
    };
    let write = |name: &str, text: String| {
        let path = a.out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    };

    if !a.reports.is_empty() {
        let reports = a.reports.iter().map(|p| io::read_report_csv(p)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = a.reports.iter().enumerate().map(|(i, p)| label(i, p)).collect();
        let series = |f: &dyn Fn(&spaer_core::tracker::PairReport) -> Option<(f64, f64)>| -> Vec<Series> {
            reports
                .iter()
                .zip(&labels)
                .map(|(rows, l)| Series {
                    label: l.clone(),
                    points: rows.iter().filter_map(f).collect(),
                })
                .filter(|s| !s.points.is_empty())
                .collect()
        };
        write(
            "trans_err.svg",
            svg::line_plot(
                "Translation error per pair",
                "pair",
                "error (mm)",
                &series(&|r| Some((r.pair as f64, r.trans_err_mm))),
            ),
        )?;
        write(
            "ang_err.svg",
            svg::line_plot(
                "Rotation error per pair",
                "pair",
                "error (deg)",
                &series(&|r| Some((r.pair as f64, r.ang_err_deg))),
            ),
        )?;
        // Dice of pair t is measured on frame t + 1, i.e. after t + 2 frames.
        let dice = series(&|r| r.dice.map(|d| ((r.pair + 2) as f64, d)));
        if !dice.is_empty() {
            write("dice.svg", svg::line_plot("Dice against the reference", "sequence length", "dice", &dice))?;
        }
        let groups = |f: &dyn Fn(&spaer_core::tracker::PairReport) -> f64| -> Vec<(String, Vec<f64>)> {
            reports.iter().zip(&labels).map(|(rows, l)| (l.clone(), rows.iter().map(f).collect())).collect()
        };
        write("trans_err_box.svg", svg::box_plot("Translation error", "error (mm)", &groups(&|r| r.trans_err_mm)))?;
        write("ang_err_box.svg", svg::box_plot("Rotation error", "error (deg)", &groups(&|r| r.ang_err_deg)))?;
    }
    for (i, path) in a.loss.iter().enumerate() {
        let history = io::read_loss_csv(path)?;
        let curve = |name: &str, f: &dyn Fn(&spaer_core::temporal::EpochLog) -> f64| Series {
            label: name.to_string(),
            points: history.iter().map(|h| (h.epoch as f64, f(h))).collect(),
        };
        let name = if a.loss.len() == 1 { "loss.svg".to_string() } else { format!("loss_{i}.svg") };
        write(
            &name,
            svg::line_plot(
                "Surrogate loss",
                "epoch",
                "loss",
                &[curve("train", &|h| h.train_loss), curve("validation", &|h| h.val_loss)],
            ),
        )?;
    }
    eprintln!("plots written to {}", a.out.display());
    Ok(())
}
