use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use otcl::checkpoint::Checkpoint;
use otcl::data::{gen_synthetic, LabeledSample};
use otcl::harness::{
    evaluate_task, load_dataset, predict_batch, run_experiment_with, DatasetKind, RunConfig, RunEvent,
};
use otcl::otmm::OtmmConfig;
use otcl::preservation::PreservationConfig;
use otcl::replay::InsertionMode;
use otcl::{Error, Result};

#[derive(Parser)]
#[command(name = "otcl", version, about = "Online class-incremental learning with optimal-transport mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate over every configured seed.
    Run(RunArgs),
    /// Evaluate a checkpoint on every task's test set.
    Eval(EvalArgs),
    /// Write a synthetic dataset as CSV.
    GenSynth(GenSynthArgs),
    /// Write test-set features and labels of a checkpoint as CSV.
    ExportEmbeddings(ExportArgs),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Synth,
}

#[derive(Clone, Copy, ValueEnum)]
enum InsertionArg {
    Centroid,
    Random,
}

fn defaults() -> RunConfig {
    RunConfig::default()
}

fn pdef() -> PreservationConfig {
    PreservationConfig::default()
}

fn odef() -> OtmmConfig {
    OtmmConfig::default()
}

/// Flags that override the config file. Only flags given on the command
/// line are applied; the defaults shown are those of an empty config.
#[derive(Args)]
struct Overrides {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetArg,
    #[arg(long, default_value = "data/mnist")]
    mnist_dir: PathBuf,
    #[arg(long, default_value_t = defaults().num_tasks)]
    num_tasks: usize,
    #[arg(long, default_value_t = defaults().classes_per_task)]
    classes_per_task: usize,
    #[arg(long, default_value_t = defaults().memory_size)]
    memory_size: usize,
    #[arg(long, default_value_t = defaults().batch_size)]
    batch_size: usize,
    /// Centroids per class.
    #[arg(long, default_value_t = defaults().components)]
    components: usize,
    #[arg(long, value_enum, default_value = "centroid")]
    insertion: InsertionArg,
    #[arg(long, default_value_t = defaults().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = defaults().feat_dim)]
    feat_dim: usize,
    /// Scale features to unit length.
    #[arg(long, default_value_t = defaults().normalize_features, action = clap::ArgAction::Set)]
    normalize_features: bool,
    /// Comma-separated list of run seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also evaluate every N stream batches (0 = task boundaries only).
    #[arg(long, default_value_t = defaults().eval_interval)]
    eval_interval: usize,

    #[arg(long, default_value_t = pdef().lr_theta)]
    lr_theta: f64,
    #[arg(long, default_value_t = pdef().lr_proto)]
    lr_proto: f64,
    #[arg(long, default_value_t = pdef().clip_alpha)]
    clip_alpha: f64,
    #[arg(long, default_value_t = pdef().steps_l1)]
    steps_l1: usize,
    #[arg(long, default_value_t = pdef().steps_l2)]
    steps_l2: usize,
    /// Extractor step size of the compression steps.
    #[arg(long, default_value_t = pdef().lr_compression.unwrap_or(pdef().lr_theta))]
    lr_compression: f64,
    /// Gradient norm cap for the feature extractor (0 = off).
    #[arg(long, default_value_t = pdef().max_grad_norm)]
    max_grad_norm: f64,

    #[arg(long, default_value_t = odef().epsilon)]
    epsilon: f64,
    #[arg(long, default_value_t = odef().tau)]
    tau: f64,
    #[arg(long, default_value_t = odef().n_phi_steps)]
    n_phi_steps: usize,
    #[arg(long, default_value_t = odef().n_mix_steps)]
    n_mix_steps: usize,
    #[arg(long, default_value_t = odef().n_mix_samples)]
    n_mix_samples: usize,
    #[arg(long, default_value_t = odef().lr_phi)]
    lr_phi: f64,
    #[arg(long, default_value_t = odef().lr_mix)]
    lr_mix: f64,
    #[arg(long, default_value_t = odef().lr_alpha)]
    lr_alpha: f64,
    #[arg(long, default_value_t = odef().seed)]
    otmm_seed: u64,

    #[arg(long, default_value_t = defaults().synth.num_classes)]
    synth_classes: usize,
    #[arg(long, default_value_t = defaults().synth.modes_per_class)]
    synth_modes: usize,
    #[arg(long, default_value_t = defaults().synth.dim)]
    synth_dim: usize,
    #[arg(long, default_value_t = defaults().synth.spread)]
    synth_spread: f64,
    #[arg(long, default_value_t = defaults().synth.scale)]
    synth_scale: f64,
    #[arg(long, default_value_t = defaults().synth.samples_per_class)]
    synth_samples: usize,
    #[arg(long, default_value_t = defaults().synth.seed)]
    synth_seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with RunConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides the MNIST directory stored in the checkpoint.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Export at most this many test samples.
    #[arg(long)]
    limit: Option<usize>,
}

fn given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides, m: &ArgMatches) {
    macro_rules! set {
        ($($id:ident => $($field:ident).+;)*) => {
            $(if given(m, stringify!($id)) {
                cfg.$($field).+ = o.$id.clone();
            })*
        };
    }
    set! {
        mnist_dir => mnist_dir;
        num_tasks => num_tasks;
        classes_per_task => classes_per_task;
        memory_size => memory_size;
        batch_size => batch_size;
        components => components;
        hidden => hidden;
        feat_dim => feat_dim;
        seeds => seeds;
        normalize_features => normalize_features;
        eval_interval => eval_interval;
        lr_theta => preservation.lr_theta;
        lr_proto => preservation.lr_proto;
        clip_alpha => preservation.clip_alpha;
        steps_l1 => preservation.steps_l1;
        steps_l2 => preservation.steps_l2;
        max_grad_norm => preservation.max_grad_norm;
        epsilon => otmm.epsilon;
        tau => otmm.tau;
        n_phi_steps => otmm.n_phi_steps;
        n_mix_steps => otmm.n_mix_steps;
        n_mix_samples => otmm.n_mix_samples;
        lr_phi => otmm.lr_phi;
        lr_mix => otmm.lr_mix;
        lr_alpha => otmm.lr_alpha;
        otmm_seed => otmm.seed;
        synth_classes => synth.num_classes;
        synth_modes => synth.modes_per_class;
        synth_dim => synth.dim;
        synth_spread => synth.spread;
        synth_scale => synth.scale;
        synth_samples => synth.samples_per_class;
        synth_seed => synth.seed;
    }
    if given(m, "dataset") {
        cfg.dataset = match o.dataset {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Synth => DatasetKind::Synth,
        };
    }
    if given(m, "insertion") {
        cfg.insertion = match o.insertion {
            InsertionArg::Centroid => InsertionMode::Centroid,
            InsertionArg::Random => InsertionMode::Random,
        };
    }
    if given(m, "lr_compression") {
        cfg.preservation.lr_compression = Some(o.lr_compression);
    }
    if let Some(d) = &o.output_dir {
        cfg.output_dir = Some(d.clone());
    }
}

fn cmd_run(args: &RunArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &args.overrides, m);
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let exp = run_experiment_with(&cfg, &data, &mut |seed, ev| {
        if let RunEvent::TaskRow { task_index, row } = ev {
            let cells: Vec<String> = row.iter().map(|a| format!("{:.4}", a)).collect();
            eprintln!("seed {seed} task {}: [{}]", task_index + 1, cells.join(", "));
        }
    })?;
    for s in &exp.summary.seeds {
        println!(
            "seed {}: A = {:.4}, F = {}",
            s.seed,
            s.avg_accuracy.unwrap_or(f64::NAN),
            s.avg_forgetting.map_or("n/a".to_string(), |f| format!("{f:.4}"))
        );
    }
    if let (Some(m), Some(sd)) = (exp.summary.mean_avg_accuracy, exp.summary.std_avg_accuracy) {
        println!("mean A = {m:.4} (std {sd:.4})");
    }
    if let (Some(m), Some(sd)) = (exp.summary.mean_avg_forgetting, exp.summary.std_avg_forgetting) {
        println!("mean F = {m:.4} (std {sd:.4})");
    }
    println!("wall clock {:.1} s", exp.summary.wall_clock_seconds);
    Ok(())
}

fn checkpoint_data(ck: &Checkpoint, mnist_dir: Option<&Path>) -> Result<Vec<LabeledSample>> {
    let mut cfg = ck.config.clone();
    if let Some(d) = mnist_dir {
        cfg.mnist_dir = d.to_path_buf();
    }
    Ok(load_dataset(&cfg)?.test)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let test = checkpoint_data(&ck, args.mnist_dir.as_deref())?;
    let cfg = &ck.config;
    let l = &ck.learner;
    println!("eval_task,accuracy");
    let mut total = 0.0;
    for t in 0..cfg.num_tasks {
        let classes = t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task;
        let task: Vec<&LabeledSample> = test.iter().filter(|s| classes.contains(&s.label)).collect();
        let a = evaluate_task(&task, &l.extractor, &l.otmm)?;
        total += a;
        println!("{},{a}", t + 1);
    }
    eprintln!("average accuracy {:.4}", total / cfg.num_tasks as f64);
    Ok(())
}

fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dim = samples.first().map_or(0, |s| s.features.len());
    let header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    writeln!(w, "label,{}", header.join(","))?;
    for s in samples {
        let vals: Vec<String> = s.features.iter().map(f64::to_string).collect();
        writeln!(w, "{},{}", s.label, vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_gen_synth(args: &GenSynthArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = RunConfig::default();
    apply_overrides(&mut cfg, &args.overrides, m);
    let spec = cfg.synth.spec();
    spec.validate()?;
    let (train, test) = gen_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    write_samples(&args.out.join("train.csv"), &train)?;
    write_samples(&args.out.join("test.csv"), &test)?;
    let text = serde_json::to_string_pretty(&spec).map_err(std::io::Error::other)?;
    std::fs::write(args.out.join("spec.json"), text)?;
    eprintln!("wrote {} train and {} test samples to {}", train.len(), test.len(), args.out.display());
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut test = checkpoint_data(&ck, args.mnist_dir.as_deref())?;
    if let Some(n) = args.limit {
        test.truncate(n);
    }
    let l = &ck.learner;
    let inputs: Vec<&[f64]> = test.iter().map(|s| s.features.as_slice()).collect();
    let z = l.extractor.extract_features(&inputs)?;
    let preds = predict_batch(&inputs, &l.extractor, &l.otmm)?;
    let mut w = BufWriter::new(File::create(&args.out)?);
    let header: Vec<String> = (0..z.cols()).map(|i| format!("z{i}")).collect();
    writeln!(w, "label,predicted,{}", header.join(","))?;
    for (i, s) in test.iter().enumerate() {
        let vals: Vec<String> = z.row(i).iter().map(f64::to_string).collect();
        writeln!(w, "{},{},{}", s.label, preds[i], vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn dispatch(cli: &Cli, m: &ArgMatches) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, m.subcommand_matches("run").expect("run matches")),
        Command::Eval(a) => cmd_eval(a),
        Command::GenSynth(a) => cmd_gen_synth(a, m.subcommand_matches("gen-synth").expect("gen-synth matches")),
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
