//! Command-line interface: training, evaluation, segmentation, feature
//! extraction, synthetic-corpus generation, Monte-Carlo oracle tables, and
//! gradient checking.
//!
//! Exit codes: 0 on success, 2 for configuration/input errors, 3 for
//! numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use varprop::audio::{
    load_annotations, load_dataset, load_recordings, log_mel, read_clip_manifest, save_dataset,
    segment_dataset, synthetic_corpus, wav::read_wav_pcm16, write_clip_manifest, Dataset, Sample,
};
use varprop::config::RunConfig;
use varprop::error::{Error, Result};
use varprop::losses::LossMode;
use varprop::network::SeResNet;
use varprop::oracle::{
    chain_network_reports, network_moment_reports, network_weight_sampling_reports, MomentReport,
};
use varprop::train::{evaluate, gradcheck, train, Adam, Checkpoint, TrainOptions, TrialRecord};

#[derive(Parser)]
#[command(
    name = "varprop",
    version,
    about = "Sample-free variational Bayesian deep learning with uncertainty-aware label smoothing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more trials and write checkpoints, metrics, and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset partition.
    Evaluate(EvalArgs),
    /// Segment annotated recordings into a clips manifest.
    Segment(SegmentArgs),
    /// Extract log-Mel features for a clips manifest into a dataset directory.
    Features(FeaturesArgs),
    /// Generate the synthetic desk-scale corpus.
    Synth(SynthArgs),
    /// Monte-Carlo oracle comparison tables for a freshly initialized network.
    Oracle(OracleArgs),
    /// Finite-difference gradient check on a small network.
    Gradcheck(GradcheckArgs),
    /// Write the default configuration file.
    InitConfig(InitConfigArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML); every default is pre-filled.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (from `synth` or `features`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate the synthetic corpus from the config instead of loading one.
    #[arg(long)]
    synth: bool,
    /// Output directory for checkpoints, metrics, and histories.
    #[arg(long)]
    out: PathBuf,
    /// Number of trials; seeds derive as seed + trial index.
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train | devel | test
    #[arg(long, default_value = "test")]
    partition: String,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    /// Annotations CSV: recording_id,start_s,end_s,species
    #[arg(long)]
    annotations: PathBuf,
    /// Recordings CSV: recording_id,duration_s,partition
    #[arg(long)]
    recordings: PathBuf,
    /// Output clips manifest CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3.0)]
    clip_seconds: f64,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Clips manifest from `segment`.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<recording_id>.wav` files.
    #[arg(long)]
    audio: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Report the logistic-regression learnability baseline on the corpus.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// chain | outputs | weights | all
    #[arg(long, default_value = "all")]
    sampler: String,
    /// Also write the JSON tables here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

#[derive(Args)]
struct InitConfigArgs {
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Features(args) => cmd_features(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::InitConfig(args) => {
            std::fs::write(&args.out, RunConfig::default().to_toml())?;
            println!("wrote default configuration to {}", args.out.display());
            Ok(())
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.training.trials = trials;
    }
    let data: Dataset = if args.synth {
        synthetic_corpus(&cfg.generator())?
    } else {
        let dir = args
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("train needs --data DIR or --synth".into()))?;
        load_dataset(dir)?.0
    };
    let arch = cfg.architecture()?;
    if data.shape != arch.input_shape {
        return Err(Error::Config(format!(
            "dataset clips are {:?} but the architecture expects {:?}",
            data.shape, arch.input_shape
        )));
    }
    std::fs::create_dir_all(&args.out)?;
    let trials = cfg.training.trials.max(1);
    let mut records: Vec<TrialRecord> = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut opts = TrainOptions::from_config(&cfg)?;
        opts.seed = cfg.training.seed + trial as u64;
        let mut net = SeResNet::init(arch.clone(), opts.seed)?;
        let record = train(&mut net, &data, &opts)?;
        let adam = Adam::new(
            opts.learning_rate,
            opts.adam_beta1,
            opts.adam_beta2,
            opts.adam_eps,
        );
        let ckpt = Checkpoint::of(&net, &adam, record.best_epoch as u64, record.best_val_au_pr);
        varprop::train::write_trial_outputs(&args.out, trial, &ckpt, &record)?;
        println!(
            "trial {trial}: best epoch {} (val AU-PR {:.4}), test W-AU-PR {:.4}, W-AU-ROC {}, W-ECE {:.4}",
            record.best_epoch,
            record.best_val_au_pr,
            record.test.weighted_au_pr.unwrap_or(f64::NAN),
            record
                .test
                .weighted_au_roc
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "missing".into()),
            record.test.weighted_ece,
        );
        records.push(record);
    }
    if trials > 1 {
        let pr: Vec<f64> = records
            .iter()
            .filter_map(|r| r.test.weighted_au_pr)
            .collect();
        let roc: Vec<f64> = records
            .iter()
            .filter_map(|r| r.test.weighted_au_roc)
            .collect();
        let f1: Vec<f64> = records.iter().map(|r| r.test.weighted_f1).collect();
        let ece: Vec<f64> = records.iter().map(|r| r.test.weighted_ece).collect();
        let (prm, prs) = mean_std(&pr);
        let (rm, rs) = mean_std(&roc);
        let (fm, fs) = mean_std(&f1);
        let (em, es) = mean_std(&ece);
        println!(
            "over {trials} trials: W-AU-PR {:.2} ± {:.2}, W-AU-ROC {:.2} ± {:.2}, W-F1 {:.2} ± {:.2}, W-ECE {:.2} ± {:.2} (x100)",
            prm * 100.0,
            prs * 100.0,
            rm * 100.0,
            rs * 100.0,
            fm * 100.0,
            fs * 100.0,
            em * 100.0,
            es * 100.0,
        );
    }
    Ok(())
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (data, _) = load_dataset(&args.data)?;
    let samples = data.partition(&args.partition)?;
    let report = evaluate(&ckpt.net, samples)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.json {
        std::fs::write(path, report.to_json())?;
        println!("json report written to {}", path.display());
    }
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let annotations = load_annotations(&args.annotations)?;
    let recordings = load_recordings(&args.recordings, &annotations)?;
    let (clips, vocab) = segment_dataset(&recordings, args.clip_seconds, args.seed)?;
    write_clip_manifest(&args.out, &clips)?;
    let positives = clips.iter().filter(|c| c.labels.iter().any(|&l| l)).count();
    println!(
        "{} recordings -> {} clips ({} positive, {} negative), {} species: {}",
        recordings.len(),
        clips.len(),
        positives,
        clips.len() - positives,
        vocab.len(),
        vocab.join(", "),
    );
    Ok(())
}

fn cmd_features(args: FeaturesArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let frontend = cfg.frontend();
    let rows = read_clip_manifest(&args.manifest)?;
    if rows.is_empty() {
        return Err(Error::Config("empty clips manifest".into()));
    }
    // task vocabulary from the manifest labels
    let mut vocab: Vec<String> = rows
        .iter()
        .flat_map(|r| r.labels.split(';').map(str::to_string))
        .filter(|s| !s.is_empty())
        .collect();
    vocab.sort();
    vocab.dedup();
    if vocab.is_empty() {
        return Err(Error::Config("manifest has no labeled clips".into()));
    }
    let mut parts: [Vec<Sample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut wav_cache: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for row in &rows {
        let part = match row.partition.as_str() {
            "train" => 0,
            "devel" => 1,
            "test" => 2,
            other => {
                return Err(Error::Config(format!(
                    "unknown partition '{other}' in manifest"
                )))
            }
        };
        if !wav_cache.contains_key(&row.recording_id) {
            let path = args.audio.join(format!("{}.wav", row.recording_id));
            let (samples, rate) = read_wav_pcm16(&path)?;
            if rate != frontend.sample_rate {
                return Err(Error::Config(format!(
                    "{}: {rate} Hz, front-end requires {} Hz",
                    path.display(),
                    frontend.sample_rate
                )));
            }
            wav_cache.insert(row.recording_id.clone(), samples);
        }
        let wave = &wav_cache[&row.recording_id];
        let start = (row.start_s * frontend.sample_rate as f64).round() as usize;
        let len = (row.length_s * frontend.sample_rate as f64).round() as usize;
        let end = (start + len).min(wave.len());
        let spec = log_mel(
            &wave[start.min(wave.len())..end],
            frontend.sample_rate,
            &frontend,
        )?;
        let mut labels = vec![0.0; vocab.len()];
        for species in row.labels.split(';').filter(|s| !s.is_empty()) {
            if let Some(t) = vocab.iter().position(|v| v == species) {
                labels[t] = 1.0;
            }
        }
        parts[part].push(Sample {
            features: spec,
            labels,
        });
    }
    let [train, devel, test] = parts;
    let data = Dataset {
        tasks: vocab.len(),
        shape: (frontend.frames, frontend.n_mels),
        train,
        devel,
        test,
    };
    save_dataset(&args.out, &data, &vocab)?;
    println!(
        "wrote {} train / {} devel / {} test clips ({} tasks) to {}",
        data.train.len(),
        data.devel.len(),
        data.test.len(),
        data.tasks,
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let gen = cfg.generator();
    let data = synthetic_corpus(&gen)?;
    let names: Vec<String> = (0..gen.tasks).map(|t| format!("task{t}")).collect();
    save_dataset(&args.out, &data, &names)?;
    println!(
        "synthetic corpus: {} train / {} devel / {} test clips, {} tasks, shape {:?}",
        data.train.len(),
        data.devel.len(),
        data.test.len(),
        data.tasks,
        data.shape
    );
    if args.baseline {
        let auroc = varprop::audio::logistic_baseline_auroc(&data, 300, 0.15)?;
        println!("logistic-regression pixel baseline test AU-ROC: {auroc:.4}");
    }
    Ok(())
}

fn print_reports(title: &str, reports: &[MomentReport]) {
    println!("{title}");
    println!(
        "{:<10} {:>13} {:>13} {:>8} {:>13} {:>13} {:>8}",
        "probe", "E[analytic]", "E[empirical]", "z", "V[analytic]", "V[empirical]", "z"
    );
    for r in reports {
        println!(
            "{:<10} {:>13.6e} {:>13.6e} {:>8.2} {:>13.6e} {:>13.6e} {:>8.2}",
            r.name,
            r.analytic_mean,
            r.empirical_mean,
            r.mean_z,
            r.analytic_var,
            r.empirical_var,
            r.var_z
        );
    }
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    if args.samples < 1_000 {
        return Err(Error::Config(format!(
            "oracle needs at least 1000 samples, got {}",
            args.samples
        )));
    }
    let cfg = load_config(&args.config)?;
    let arch = cfg.architecture()?;
    let params = arch.param_count()?;
    if params > 100_000 {
        return Err(Error::Config(format!(
            "oracle sampling a {params}-parameter network is impractical; use the micro or miniature preset"
        )));
    }
    let net = SeResNet::init(arch, args.seed)?;
    // a structured synthetic clip as the probe input
    let mut gen = cfg.generator();
    gen.shape = net.config.input_shape;
    gen.seed = args.seed;
    let data = synthetic_corpus(&gen)?;
    let input = &data.test[0].features;

    let mut all: Vec<(String, Vec<MomentReport>)> = Vec::new();
    if args.sampler == "chain" || args.sampler == "all" {
        let r = chain_network_reports(&net, input, args.samples, args.seed)?;
        print_reports(
            "chain sampler (exact per-operation sampling, Gaussian re-matching at interfaces):",
            &r,
        );
        all.push(("chain".into(), r));
    }
    if args.sampler == "outputs" || args.sampler == "all" {
        let r = network_moment_reports(&net, input, args.samples, args.seed)?;
        print_reports(
            "output sampler (local reparameterization; factorization gaps show as |z| >> 3):",
            &r,
        );
        all.push(("outputs".into(), r));
    }
    if args.sampler == "weights" || args.sampler == "all" {
        let r = network_weight_sampling_reports(&net, input, args.samples, args.seed)?;
        print_reports("weight sampler (one joint draw per forward):", &r);
        all.push(("weights".into(), r));
    }
    if all.is_empty() {
        return Err(Error::Config(format!(
            "unknown sampler '{}' (chain|outputs|weights|all)",
            args.sampler
        )));
    }
    if let Some(path) = &args.json {
        let map: std::collections::BTreeMap<String, Vec<MomentReport>> = all.into_iter().collect();
        std::fs::write(path, serde_json::to_string_pretty(&map).unwrap())?;
        println!("json tables written to {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mut arch = cfg.architecture()?;
    if arch.param_count()? > 5_000 {
        println!(
            "{} parameters is too many for finite differences; using the miniature preset instead",
            arch.param_count()?
        );
        arch = varprop::network::ArchitectureConfig::miniature(arch.tasks, arch.pooling);
    }
    arch.rho_init = arch.rho_init.max(0.01);
    let net = SeResNet::init(arch.clone(), args.seed)?;
    let mut gen = cfg.generator();
    gen.shape = arch.input_shape;
    gen.tasks = arch.tasks;
    gen.positive_priors = vec![0.5; arch.tasks];
    gen.seed = args.seed;
    gen.train_clips = 4;
    gen.devel_clips = 1;
    gen.test_clips = 1;
    let data = synthetic_corpus(&gen)?;
    let batch: Vec<&Sample> = data.train.iter().collect();
    let report = gradcheck(
        &net,
        &batch,
        LossMode::Variational,
        cfg.training.cold_posterior,
        4,
        args.step,
        args.seed,
    )?;
    println!(
        "checked {} parameters: {:.2}% within 1e-3 relative error, max {:.3e} ({}); {} on subgradient boundaries",
        report.params,
        100.0 * report.frac_within_1e3(),
        report.max_rel_err,
        report.worst_param,
        report.kinked
    );
    if report.frac_within_1e3() < 0.99 || report.max_rel_err >= 1e-2 {
        return Err(Error::Numerical("gradient check failed".into()));
    }
    println!("gradient check passed");
    Ok(())
}
