use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sincnet::analysis::{compare_convergence, export_filters, DEFAULT_NFFT};
use sincnet::config::KeyValues;
use sincnet::dataio::{synth_corpus, Corpus, Manifest, SynthOptions};
use sincnet::gradcheck::{gradcheck, THRESHOLD};
use sincnet::pipeline::{load_model, save_model, Experiment};
use sincnet::trainer::{evaluate_sentences, logs_from_csv, logs_to_csv};
use sincnet::verification::{run_verification, trials_to_csv, Scoring};
use sincnet::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "sincnet", version, about = "Speaker recognition with learnable sinc filters")]
struct Cli {
    /// Worker threads. Outputs do not depend on the count.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-speaker corpus and its manifest.
    Synth(SynthArgs),
    /// Train a classifier from a config file, with flags overriding its keys.
    Train(TrainArgs),
    /// Sentence-level identification error on the test split.
    EvalId(EvalIdArgs),
    /// Verification trials and equal error rate.
    EvalVerif(EvalVerifArgs),
    /// Export first-layer filters and responses, or compare two training logs.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every gradient on tiny random networks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    /// Training utterances per speaker.
    #[arg(long, default_value_t = 8)]
    utts: usize,
    #[arg(long, default_value_t = 4)]
    test_utts: usize,
    /// Held-out speakers that only provide impostor utterances.
    #[arg(long, default_value_t = 5)]
    impostor_speakers: usize,
    #[arg(long, default_value_t = 4)]
    impostor_utts: usize,
    #[arg(long, default_value_t = 2.0)]
    seconds: f64,
    #[arg(long, default_value_t = 4000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 100.0)]
    pitch_min: f64,
    #[arg(long, default_value_t = 250.0)]
    pitch_max: f64,
    #[arg(long, default_value_t = 15.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` file; see configs/toy.conf.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `sinc` or `standard`.
    #[arg(long)]
    cnn_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalIdArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Optional CSV of per-utterance predictions.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalVerifArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Impostor trials per genuine trial.
    #[arg(long, default_value_t = 10)]
    impostors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `dvector` or `posterior`.
    #[arg(long, default_value = "dvector")]
    scoring: String,
    /// Directory for `trials.csv` and `eer.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long, required_unless_present = "compare")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NFFT)]
    nfft: usize,
    /// Two training logs, sinc first, to align into `convergence.csv`.
    #[arg(long, num_args = 2, value_names = ["SINC_LOG", "CNN_LOG"])]
    compare: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of consecutive seeds to check, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    count: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::EvalId(a) => eval_id(a),
        Command::EvalVerif(a) => eval_verif(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn echo(title: &str, kv: &KeyValues) {
    println!("# {title}");
    print!("{kv}");
}

fn synth(a: SynthArgs) -> Result<()> {
    let opts = SynthOptions {
        speakers: a.speakers,
        train_utts: a.utts,
        test_utts: a.test_utts,
        impostor_speakers: a.impostor_speakers,
        impostor_utts: a.impostor_utts,
        seconds: a.seconds,
        sample_rate: a.sample_rate,
        pitch_range: (a.pitch_min, a.pitch_max),
        snr_db: a.snr_db,
        seed: a.seed,
    };
    let mut kv = KeyValues::default();
    kv.set("speakers", opts.speakers);
    kv.set("utts", opts.train_utts);
    kv.set("test_utts", opts.test_utts);
    kv.set("impostor_speakers", opts.impostor_speakers);
    kv.set("impostor_utts", opts.impostor_utts);
    kv.set("seconds", opts.seconds);
    kv.set("sample_rate", opts.sample_rate);
    kv.set("pitch_range", format!("{},{}", a.pitch_min, a.pitch_max));
    kv.set("snr_db", opts.snr_db);
    kv.set("seed", opts.seed);
    kv.set("out", a.out.display());
    echo("synth", &kv);
    let m = synth_corpus(&opts, &a.out)?;
    println!("wrote {} utterances and {}", m.entries.len(), a.out.join("manifest.csv").display());
    Ok(())
}

/// Precedence, lowest first: built-in defaults, `--config`, named flags, `--set`.
fn resolve_train(a: &TrainArgs) -> Result<Experiment> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::parse(sincnet::pipeline::TOY_CONFIG)?,
    };
    if let Some(v) = &a.manifest {
        kv.set("manifest", v.display());
    }
    if let Some(v) = &a.out {
        kv.set("out_dir", v.display());
    }
    if let Some(v) = &a.cnn_mode {
        kv.set("cnn_mode", v);
    }
    if let Some(v) = a.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = a.seed {
        kv.set("seed", v);
    }
    if let Some(v) = a.lr {
        kv.set("lr", v);
    }
    if let Some(v) = a.minibatch {
        kv.set("minibatch", v);
    }
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {s}` is not KEY=VALUE")))?;
        kv.set(k.trim(), v.trim());
    }
    let mut e = Experiment::from_kv(&kv)?;
    // Relative paths in a config file are taken relative to that file.
    if let (Some(cfg), Some(m)) = (&a.config, &e.manifest) {
        if a.manifest.is_none() && m.is_relative() {
            e.manifest = Some(cfg.parent().unwrap_or(Path::new("")).join(m));
        }
    }
    Ok(e)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut e = resolve_train(&a)?;
    let out = e
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory (`--out` or `out_dir`)".into()))?;
    if e.manifest.is_none() {
        return Err(Error::Config("no manifest (`--manifest` or `manifest`)".into()));
    }
    if e.train.checkpoint_every > 0 {
        e.train.checkpoint_dir = Some(out.join("checkpoints"));
    }
    echo("train", &e.to_kv());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.resolved"), e.to_kv().to_string())?;
    let corpus = e.load_corpus()?;
    let (net, logs) = e.run(&corpus)?;
    std::fs::write(out.join("train_log.csv"), logs_to_csv(&logs))?;
    save_model(&net, e.geometry(), out.join("model.snc"))?;
    if let Some(last) = logs.last() {
        println!(
            "epoch {} loss {:.4} train_fer {:.2}% eval_fer {}",
            last.epoch,
            last.loss,
            last.train_fer,
            last.eval_fer.map_or("n/a".into(), |f| format!("{f:.2}%"))
        );
    }
    println!("wrote {}", out.join("model.snc").display());
    Ok(())
}

fn load_corpus(manifest: &Path, fs: f64) -> Result<Corpus> {
    Corpus::load(&Manifest::load(manifest)?, fs as u32)
}

fn eval_id(a: EvalIdArgs) -> Result<()> {
    let (mut net, geometry) = load_model(&a.checkpoint)?;
    let mut kv = KeyValues::default();
    kv.set("checkpoint", a.checkpoint.display());
    kv.set("manifest", a.manifest.display());
    kv.set("chunk_len", geometry.window);
    kv.set("chunk_stride", geometry.stride);
    echo("eval-id", &kv);
    let corpus = load_corpus(&a.manifest, net.config().sample_rate)?;
    if corpus.classes.len() != net.config().classes {
        return Err(Error::Config(format!(
            "manifest has {} training speakers, model has {} classes",
            corpus.classes.len(),
            net.config().classes
        )));
    }
    if corpus.test.is_empty() {
        return Err(Error::Config("manifest has no test utterances".into()));
    }
    let (preds, cer) = evaluate_sentences(&mut net, &corpus.test, geometry)?;
    if let Some(out) = &a.out {
        let mut s = String::from("utterance,speaker_id,predicted\n");
        for ((u, _), p) in corpus.test.iter().zip(&preds) {
            s.push_str(&format!("{},{},{}\n", u.utterance_id, u.speaker_id, corpus.classes[*p]));
        }
        std::fs::write(out, s)?;
    }
    println!("CER {cer:.2}% over {} utterances", preds.len());
    Ok(())
}

fn eval_verif(a: EvalVerifArgs) -> Result<()> {
    let scoring: Scoring = a.scoring.parse()?;
    let (mut net, geometry) = load_model(&a.checkpoint)?;
    let mut kv = KeyValues::default();
    kv.set("checkpoint", a.checkpoint.display());
    kv.set("manifest", a.manifest.display());
    kv.set("impostors", a.impostors);
    kv.set("seed", a.seed);
    kv.set("scoring", &a.scoring);
    echo("eval-verif", &kv);
    let corpus = load_corpus(&a.manifest, net.config().sample_rate)?;
    let (trials, report) = run_verification(&mut net, &corpus, geometry, a.impostors, a.seed, scoring)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("trials.csv"), trials_to_csv(&trials))?;
        std::fs::write(out.join("eer.json"), report.to_json())?;
    }
    println!(
        "EER {:.2}% at threshold {:.6} ({} genuine, {} impostor trials)",
        report.eer_percent, report.threshold, report.n_genuine, report.n_impostor
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut kv = KeyValues::default();
    if let Some(c) = &a.checkpoint {
        kv.set("checkpoint", c.display());
    }
    kv.set("out", a.out.display());
    kv.set("nfft", a.nfft);
    if let Some(c) = &a.compare {
        kv.set("compare", format!("{},{}", c[0].display(), c[1].display()));
    }
    echo("analyze", &kv);
    std::fs::create_dir_all(&a.out)?;
    if let Some(c) = &a.checkpoint {
        let (net, _) = load_model(c)?;
        let summary = export_filters(&net, &a.out, a.nfft)?;
        println!("exported {} filters to {}", summary.n_filters, a.out.display());
        for k in &summary.nyquist_warnings {
            eprintln!("warning: filter {k} has its upper cutoff above Nyquist");
        }
    }
    if let Some(c) = &a.compare {
        let read = |p: &PathBuf| -> Result<_> { logs_from_csv(&std::fs::read_to_string(p)?) };
        let summary = compare_convergence(&read(&c[0])?, &read(&c[1])?)?;
        std::fs::write(a.out.join("convergence.csv"), summary.to_csv())?;
        println!(
            "final FER sinc {:.2}% vs standard {:.2}%",
            summary.final_sinc, summary.final_cnn
        );
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut kv = KeyValues::default();
    kv.set("seed", a.seed);
    kv.set("count", a.count);
    kv.set("threshold", THRESHOLD);
    echo("gradcheck", &kv);
    let mut worst = 0.0f64;
    for seed in a.seed..a.seed + a.count.max(1) {
        let r = gradcheck(seed)?;
        println!(
            "seed {seed}: {} parameters, max relative error {:.3e} ({}[{}])",
            r.n_params, r.max_rel_error, r.worst.0, r.worst.1
        );
        worst = worst.max(r.max_rel_error);
    }
    let pass = worst < THRESHOLD;
    println!("max relative error {worst:.3e}: {}", if pass { "PASS" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed: {worst:.3e} >= {THRESHOLD:e}"
        )))
    }
}
