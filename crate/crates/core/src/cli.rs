//! Command-line interface. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{synthesize_3dgan, train_2dgan, train_3dgan, Baseline3DConfig};
use crate::error::{Error, Result};
use crate::gan::StageTrainConfig;
use crate::io::checkpoint::{load_model, load_pipeline, save_model, save_pipeline, PIPELINE_MANIFEST};
use crate::io::montage::write_montage;
use crate::io::ovol::{read_volume, write_volume, Sidecar};
use crate::io::report::{compare, format_comparison, read_report, write_report};
use crate::io::{load_split, load_subject, read_manifest, read_unit_volume, subject_dirs};
use crate::metrics::{evaluate_volumes, FeatureExtractor};
use crate::phantom::{contrast_file, generate_dataset, DatasetSpec, Split, TissueTable, MANIFEST_FILE};
use crate::pipeline::{
    run_pipeline, train_pipeline, Contrast, PipelineConfig, PipelineModels, StageModel, SubjectVolumes,
};
use crate::volume::{Orientation, Volume};

pub const VOLUMETRIC_CHECKPOINT: &str = "volumetric.ckpt";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Debug, Parser)]
#[command(name = "orthosynth", version, about = "Progressive multi-orientation MRI contrast synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic phantom datasets.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Train the progressive pipeline.
    Train(TrainArgs),
    /// Train a comparison baseline.
    TrainBaseline(BaselineArgs),
    /// Apply trained models to subjects.
    Synthesize(SynthesizeArgs),
    /// Compare synthesized volumes with references and write a report.
    Evaluate(EvaluateArgs),
    /// Write a PGM montage of center slices.
    Montage(MontageArgs),
    /// Print the PSNR/FID deltas of report A relative to report B.
    ReportCompare(CompareArgs),
}

#[derive(Debug, Subcommand)]
enum PhantomCommand {
    /// Generate a dataset directory.
    Gen(PhantomArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 35)]
    n_train: usize,
    #[arg(long, default_value_t = 5)]
    n_val: usize,
    #[arg(long, default_value_t = 10)]
    n_test: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.02)]
    noise_std: f64,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Args)]
struct TrainingArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Stop each stage after this many optimizer steps.
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainingArgs,
    /// Comma-separated stages in canonical order, starting with axial.
    #[arg(long, value_delimiter = ',', default_value = "axial,coronal,sagittal")]
    stages: Vec<Orientation>,
    /// Epochs per stage; a single value applies to every stage.
    #[arg(long, value_delimiter = ',', default_value = "4,2,2")]
    epochs: Vec<usize>,
    /// Give refinement stages the source contrasts as extra channels.
    #[arg(long)]
    refine_with_sources: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineKind {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    kind: BaselineKind,
    #[command(flatten)]
    common: TrainingArgs,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    /// Pipeline checkpoint directory or volumetric baseline directory.
    #[arg(long)]
    models: PathBuf,
    /// Dataset root (with manifest), directory of subject directories, or one subject directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split to synthesize when `--input` is a dataset root.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    syns: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "proposed")]
    method: String,
    #[arg(long)]
    dataset_id: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct MontageArgs {
    /// Synthesized volumes, one montage row each, after the reference row.
    #[arg(long, required = true)]
    volume: Vec<PathBuf>,
    #[arg(long)]
    r#ref: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("orthosynth: {} error: {e}", e.tag());
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom(PhantomCommand::Gen(a)) => phantom_gen(a),
        Command::Train(a) => train(a),
        Command::TrainBaseline(a) => train_baseline(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Montage(a) => montage(a),
        Command::ReportCompare(a) => report_compare(a),
    }
}

fn phantom_gen(a: PhantomArgs) -> Result<()> {
    let spec = DatasetSpec {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        size: a.size,
        master_seed: a.seed,
        noise_std: a.noise_std,
    };
    let m = generate_dataset(&spec, &TissueTable::default(), &a.out, a.overwrite)?;
    let [tr, va, te] = m.split_sizes();
    println!("{}: {tr} train, {va} val, {te} test subjects in {}", m.dataset_id, a.out.display());
    Ok(())
}

/// Stages must follow axial, coronal, sagittal order and start with axial.
pub fn check_stage_order(stages: &[Orientation]) -> Result<()> {
    if stages.first() != Some(&Orientation::Axial) {
        return Err(Error::Usage("stages must start with axial".into()));
    }
    let rank = |o: &Orientation| Orientation::ALL.iter().position(|x| x == o).unwrap();
    if stages.windows(2).any(|w| rank(&w[0]) >= rank(&w[1])) {
        return Err(Error::Usage(
            "stages must be a subset of axial,coronal,sagittal in that order".into(),
        ));
    }
    Ok(())
}

fn load_training_data(data: &Path) -> Result<(String, Vec<SubjectVolumes>, Vec<SubjectVolumes>)> {
    let manifest = read_manifest(data)?;
    let train = load_split(data, &manifest, Split::Train)?;
    let val = load_split(data, &manifest, Split::Val)?;
    Ok((manifest.dataset_id, train, val))
}

fn stage_train(common: &TrainingArgs, epochs: usize) -> StageTrainConfig {
    StageTrainConfig {
        epochs,
        batch_size: common.batch_size,
        seed: common.seed,
        max_iterations: common.max_iterations,
        ..StageTrainConfig::default()
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn train(a: TrainArgs) -> Result<()> {
    check_stage_order(&a.stages)?;
    let epochs = match a.epochs.as_slice() {
        [e] => vec![*e; a.stages.len()],
        e if e.len() == a.stages.len() => e.to_vec(),
        e => {
            return Err(Error::Usage(format!(
                "{} epoch counts for {} stages",
                e.len(),
                a.stages.len()
            )))
        }
    };
    let (dataset_id, train, val) = load_training_data(&a.common.data)?;
    let cfg = PipelineConfig {
        master_seed: a.common.seed,
        stages: a.stages.clone(),
        epochs_per_stage: epochs,
        train: stage_train(&a.common, 1),
        refine_with_sources: a.refine_with_sources,
        ..PipelineConfig::default()
    };
    let (models, history) = train_pipeline(&train, &val, &cfg)?;
    save_pipeline(&models, &a.common.out)?;
    write_json(&history, &a.common.out.join(HISTORY_FILE))?;
    for s in &history.stages {
        let val = s.val_psnr.map_or("n/a".to_string(), |p| format!("{p:.3} dB"));
        println!("{dataset_id}: stage {} trained ({} pairs), val PSNR {val}", s.orientation, s.pairs);
    }
    Ok(())
}

fn train_baseline(a: BaselineArgs) -> Result<()> {
    let (dataset_id, train, val) = load_training_data(&a.common.data)?;
    let history = match a.kind {
        BaselineKind::TwoD => {
            let cfg = PipelineConfig {
                master_seed: a.common.seed,
                stages: vec![Orientation::Axial],
                epochs_per_stage: vec![a.epochs],
                train: stage_train(&a.common, a.epochs),
                ..PipelineConfig::default()
            };
            let (g, history) = train_2dgan(&train, &val, &cfg)?;
            let stage = StageModel {
                orientation: Orientation::Axial,
                config: cfg.synthesis,
                generator: g,
                seed: cfg.stage_seed(0),
                epochs: a.epochs,
            };
            let models = PipelineModels {
                stages: vec![stage],
                refine_with_sources: false,
            };
            save_pipeline(&models, &a.common.out)?;
            history
        }
        BaselineKind::ThreeD => {
            let cfg = Baseline3DConfig {
                train: StageTrainConfig {
                    batch_size: 1,
                    ..stage_train(&a.common, a.epochs)
                },
                ..Baseline3DConfig::default()
            };
            let (g, history) = train_3dgan(&train, &val, &cfg)?;
            std::fs::create_dir_all(&a.common.out).map_err(|e| Error::io(&a.common.out, e))?;
            save_model(&g, &a.common.out.join(VOLUMETRIC_CHECKPOINT))?;
            history
        }
    };
    write_json(&history, &a.common.out.join(HISTORY_FILE))?;
    let val = history.val_psnr.map_or("n/a".to_string(), |p| format!("{p:.3} dB"));
    println!("{dataset_id}: {:?} baseline trained, val PSNR {val}", a.kind);
    Ok(())
}

enum Synthesizer {
    Pipeline(PipelineModels),
    Volumetric(crate::nn::Model<f32>),
}

impl Synthesizer {
    fn load(dir: &Path) -> Result<Self> {
        if dir.join(PIPELINE_MANIFEST).exists() {
            Ok(Synthesizer::Pipeline(load_pipeline(dir)?))
        } else if dir.join(VOLUMETRIC_CHECKPOINT).exists() {
            Ok(Synthesizer::Volumetric(load_model(&dir.join(VOLUMETRIC_CHECKPOINT))?))
        } else {
            Err(Error::Config(format!(
                "{} holds neither a pipeline manifest nor a volumetric checkpoint",
                dir.display()
            )))
        }
    }

    fn apply(&self, s: &SubjectVolumes) -> Result<Volume> {
        match self {
            Synthesizer::Pipeline(m) => Ok(run_pipeline(m, s)?.0),
            Synthesizer::Volumetric(m) => synthesize_3dgan(m, s),
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

fn input_subjects(input: &Path, split: &str) -> Result<Vec<SubjectVolumes>> {
    if input.join(MANIFEST_FILE).exists() {
        let m = read_manifest(input)?;
        return load_split(input, &m, parse_split(split)?);
    }
    let pd = contrast_file(Contrast::Pd);
    if input.join(pd).exists() {
        return Ok(vec![load_subject(input)?]);
    }
    let dirs = subject_dirs(input, pd)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("no subjects under {}", input.display())));
    }
    dirs.iter().map(|d| load_subject(d)).collect()
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let synth = Synthesizer::load(&a.models)?;
    let subjects = input_subjects(&a.input, &a.split)?;
    for s in &subjects {
        let v = synth.apply(s)?;
        let dir = a.out.join(&s.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let sidecar = Sidecar {
            subject: s.id.clone(),
            contrast: Contrast::T1.name().into(),
            scale_max: 1.0,
            seed: None,
        };
        write_volume(&dir.join(contrast_file(Contrast::T1)), &v, Some(&sidecar))?;
    }
    println!("synthesized {} subjects into {}", subjects.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    let t1 = contrast_file(Contrast::T1);
    let dirs = subject_dirs(&a.syns, t1)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("no synthesized volumes under {}", a.syns.display())));
    }
    let mut refs = Vec::new();
    let mut syns = Vec::new();
    for d in &dirs {
        let id = d.file_name().expect("subject directory name");
        syns.push(read_unit_volume(&d.join(t1))?);
        let r = a.refs.join(id).join(t1);
        if !r.exists() {
            return Err(Error::MissingTarget(id.to_string_lossy().into_owned()));
        }
        refs.push(read_unit_volume(&r)?);
    }
    let dataset_id = match a.dataset_id {
        Some(id) => id,
        None if a.refs.join(MANIFEST_FILE).exists() => read_manifest(&a.refs)?.dataset_id,
        None => a
            .refs
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut report = evaluate_volumes(
        &refs.iter().collect::<Vec<_>>(),
        &syns.iter().collect::<Vec<_>>(),
        &FeatureExtractor::new(),
    )?
    .with_provenance(&a.method, &dataset_id, a.seed);
    report.wall_seconds = start.elapsed().as_secs_f64();
    write_report(&report, &a.report)?;
    println!(
        "{}: PSNR {:.3} +/- {:.3} dB, FID {:.5} over {} subjects",
        report.method,
        report.psnr_mean,
        report.psnr_std,
        report.fid,
        report.psnr_per_subject.len()
    );
    Ok(())
}

fn label(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn montage(a: MontageArgs) -> Result<()> {
    let reference = read_volume(&a.r#ref)?;
    let others = a.volume.iter().map(|p| read_volume(p)).collect::<Result<Vec<_>>>()?;
    let ref_label = label(&a.r#ref);
    let labels: Vec<String> = a.volume.iter().map(|p| label(p)).collect();
    let mut rows: Vec<(&str, &Volume)> = vec![(&ref_label, &reference)];
    rows.extend(labels.iter().map(String::as_str).zip(&others));
    write_montage(&rows, &a.out)
}

fn report_compare(a: CompareArgs) -> Result<()> {
    let ra = read_report(&a.a)?;
    let rb = read_report(&a.b)?;
    println!("{}", format_comparison(&compare(&ra, &rb), &rb.method));
    Ok(())
}
