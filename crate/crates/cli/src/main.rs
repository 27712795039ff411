use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use slicemil::data::{
    checksum_dir, filter_domains, generate_synthetic, load_volumes, DomainParams, GroundTruth, SyntheticSpec, Volume,
};
use slicemil::eval::{evaluate, explain_volume, roc_auc, write_overlay_png, EvalReport, EvalSettings};
use slicemil::trainer::{
    ablation_row, train, Experiment, TrainOptions, TrainState, TrainerConfig, TrainingMode,
};

/// Default output root when `--out-root` is not given.
const OUT_ROOT_ENV: &str = "SLICEMIL_OUT";

#[derive(Parser)]
#[command(name = "slicemil", version, about = "Slice-stack classification from patient-level labels")]
struct Cli {
    /// Root directory for outputs of commands run without `--out`.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-domain dataset with a ground-truth sidecar.
    Generate(GenerateArgs),
    /// Train a model from patient labels.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train and score the four loss configurations.
    Ablate(AblateArgs),
    /// Train and score one model per value of `lambda` or `k`.
    Sweep(SweepArgs),
    /// Export class activation overlays, boxes and section profiles.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML file with synthetic spec fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    /// Number of built-in domains.
    #[arg(long)]
    domains: Option<usize>,
    /// Index of the first built-in domain (0 = A).
    #[arg(long, default_value_t = 0)]
    first_domain: usize,
    #[arg(long)]
    slice_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Patient manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Keep only these domains (repeatable).
    #[arg(long = "include-domain")]
    include: Vec<String>,
    /// Drop these domains (repeatable).
    #[arg(long = "exclude-domain")]
    exclude: Vec<String>,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<Volume>> {
        let mut v = load_volumes(&self.manifest).with_context(|| format!("loading {}", self.manifest.display()))?;
        if !self.include.is_empty() {
            v = filter_domains(v, &self.include, false);
        }
        if !self.exclude.is_empty() {
            v = filter_domains(v, &self.exclude, true);
        }
        if v.is_empty() {
            bail!("no patients left after domain filtering");
        }
        Ok(v)
    }
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML file with trainer config fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    section_len: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    backbone: Option<String>,
    /// Network input size (square).
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Train with the section loss only.
    #[arg(long)]
    no_noisy_loss: bool,
    /// Train with the noisy loss only.
    #[arg(long)]
    no_cls_loss: bool,
    /// Copy the patient label to every slice instead of pooling.
    #[arg(long)]
    slice_labels: bool,
}

impl ConfigArgs {
    fn resolve(&self, base: Option<TrainerConfig>) -> Result<TrainerConfig> {
        let mut c = match (&self.config, base) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, Some(base)) => base,
            (None, None) => TrainerConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:expr) => {
                if let Some(v) = self.$flag.clone() {
                    $field = v;
                }
            };
        }
        set!(seed => c.seed);
        set!(iterations => c.max_iterations);
        set!(learning_rate => c.learning_rate);
        set!(lambda => c.lambda);
        set!(section_len => c.section_len);
        set!(k => c.k);
        set!(batch_size => c.batch_size);
        set!(dropout => c.dropout_rate);
        set!(weight_decay => c.weight_decay);
        set!(backbone => c.backbone);
        set!(input_size => c.augmentation.output_size);
        set!(checkpoint_every => c.checkpoint_every);
        if self.no_noisy_loss {
            c.enable_noisy_loss = false;
        }
        if self.no_cls_loss {
            c.enable_cls_loss = false;
        }
        if self.slice_labels {
            c.mode = TrainingMode::SliceLabels;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint; the resolved config must match it.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    dump_config: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoringArgs {
    /// Ground-truth sidecar; defaults to `ground_truth.json` beside the manifest.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Box threshold relative to the map maximum.
    #[arg(long, default_value_t = 0.5)]
    box_threshold: f64,
    /// Emit boxes on every slice, not only on slices predicted positive.
    #[arg(long)]
    no_gate: bool,
}

impl ScoringArgs {
    fn settings(&self, config: &TrainerConfig) -> EvalSettings {
        EvalSettings {
            threshold: self.threshold,
            box_threshold: self.box_threshold,
            gate_boxes: !self.no_gate,
            ..EvalSettings::from_config(config)
        }
    }

    fn truth(&self, manifest: &Path) -> Result<Option<GroundTruth>> {
        let path = match &self.truth {
            Some(p) => p.clone(),
            None => {
                let p = manifest.parent().unwrap_or(Path::new(".")).join("ground_truth.json");
                if !p.exists() {
                    return Ok(None);
                }
                p
            }
        };
        Ok(Some(
            GroundTruth::load(&path).with_context(|| format!("loading {}", path.display()))?,
        ))
    }
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Held-out manifest; without it the test split is `--holdout-domain`.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Domain removed from training and used as the test split.
    #[arg(long)]
    holdout_domain: Option<String>,
}

impl SplitArgs {
    fn load(&self) -> Result<(Vec<Volume>, Vec<Volume>, PathBuf)> {
        let mut train = self.data.load()?;
        let (test, test_manifest) = match (&self.test_manifest, &self.holdout_domain) {
            (Some(m), holdout) => {
                let mut test = load_volumes(m).with_context(|| format!("loading {}", m.display()))?;
                if let Some(d) = holdout {
                    train = filter_domains(train, std::slice::from_ref(d), true);
                    test = filter_domains(test, std::slice::from_ref(d), false);
                }
                (test, m.clone())
            }
            (None, Some(d)) => {
                let all = std::mem::take(&mut train);
                let d = std::slice::from_ref(d);
                train = filter_domains(all.clone(), d, true);
                (filter_domains(all, d, false), self.data.manifest.clone())
            }
            (None, None) => bail!("give --test-manifest or --holdout-domain"),
        };
        if train.is_empty() || test.is_empty() {
            bail!("train split has {} patients and test split {}", train.len(), test.len());
        }
        Ok((train, test, test_manifest))
    }
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Lambda,
    K,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Patients to explain (repeatable); defaults to the first in the manifest.
    #[arg(long = "patient")]
    patients: Vec<String>,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(root: &Path, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let dir = explicit.clone().unwrap_or_else(|| root.join(name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_config(dir: &Path, config: &TrainerConfig) -> Result<()> {
    fs::write(dir.join("config.toml"), toml::to_string(config)?)?;
    Ok(())
}

fn cmd_generate(root: &Path, a: &GenerateArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(p) = a.patients {
        spec.patients = p;
    }
    if let Some(n) = a.domains {
        spec.domains = (a.first_domain..a.first_domain + n).map(DomainParams::preset).collect();
    } else if a.first_domain != 0 {
        bail!("--first-domain needs --domains");
    }
    if let Some(s) = a.slice_size {
        spec.slice_size = s;
    }
    spec.validate()?;
    let dir = out_dir(root, &a.out, "data")?;
    let manifest = generate_synthetic(&spec, &dir)?;
    println!("manifest {}", manifest.display());
    println!("checksum {}", checksum_dir(&dir)?);
    Ok(())
}

fn cmd_train(root: &Path, a: &TrainArgs) -> Result<()> {
    let resume = match &a.resume {
        Some(p) => Some(TrainState::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let config = a.config.resolve(resume.as_ref().map(|s| s.config.clone()))?;
    if a.dump_config {
        print!("{}", toml::to_string(&config)?);
        return Ok(());
    }
    let volumes = a.data.load()?;
    let dir = out_dir(root, &a.out, "train")?;
    write_config(&dir, &config)?;
    let outcome = train(
        &volumes,
        &config,
        TrainOptions {
            out_dir: Some(dir.clone()),
            resume,
            validation: None,
        },
    )?;
    if let Some(last) = outcome.history.last() {
        println!(
            "iteration {} loss {:.6} (cls {:.6}, noisy {:.6})",
            last.iteration, last.loss, last.loss_cls, last.loss_noisy
        );
    }
    println!("checkpoint {}", dir.join("final.ckpt").display());
    Ok(())
}

/// Slice scores and lesion flags for an image-level ROC.
fn image_roc_inputs(report: &EvalReport, truth: &GroundTruth) -> (Vec<f64>, Vec<u8>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for p in &report.patients {
        if let Some(t) = truth.patient(&p.patient_id) {
            scores.extend(&p.slice_probabilities);
            labels.extend(t.slices.iter().map(|s| u8::from(s.lesion)));
        }
    }
    (scores, labels)
}

fn cmd_eval(root: &Path, a: &EvalArgs) -> Result<()> {
    let state = TrainState::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let volumes = a.data.load()?;
    let truth = a.scoring.truth(&a.data.manifest)?;
    let report = evaluate(
        &state.model,
        &volumes,
        truth.as_ref(),
        &a.scoring.settings(&state.config),
    )?;
    let dir = out_dir(root, &a.out, "eval")?;
    let text = report.to_text();
    fs::write(dir.join("report.txt"), &text)?;
    write_json(&dir.join("report.json"), &report)?;
    match report.patient_roc() {
        Ok(roc) => fs::write(dir.join("roc_patient.txt"), roc.to_text())?,
        Err(e) => log::warn!("no patient ROC: {e}"),
    }
    if let Some(t) = &truth {
        let (s, y) = image_roc_inputs(&report, t);
        match roc_auc(&s, &y) {
            Ok(roc) => fs::write(dir.join("roc_image.txt"), roc.to_text())?,
            Err(e) => log::warn!("no image ROC: {e}"),
        }
    }
    print!("{text}");
    Ok(())
}

fn cmd_ablate(root: &Path, a: &AblateArgs) -> Result<()> {
    let base = a.config.resolve(None)?;
    let (train_set, test_set, test_manifest) = a.split.load()?;
    let truth = a.scoring.truth(&test_manifest)?;
    let dir = out_dir(root, &a.out, "ablate")?;
    write_config(&dir, &base)?;
    let mut rows = Vec::new();
    for e in Experiment::ALL {
        let config = e.configure(&base);
        log::info!("experiment {} ({})", e.number(), e.name());
        let outcome = train(&train_set, &config, TrainOptions::default())?;
        let report = evaluate(&outcome.state.model, &test_set, truth.as_ref(), &a.scoring.settings(&config))?;
        rows.push(ablation_row(e, &report, outcome.history.last().map(|r| r.loss)));
    }
    let report = slicemil::trainer::AblationReport { rows };
    fs::write(dir.join("ablation.txt"), report.to_text())?;
    write_json(&dir.join("ablation.json"), &report)?;
    print!("{}", report.to_text());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    patient_accuracy: Option<f64>,
    patient_auc: Option<f64>,
    image_accuracy: Option<f64>,
    image_auc: Option<f64>,
}

/// Drops repeated values, keeping the first occurrence.
fn dedupe(values: &[f64]) -> Vec<f64> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &v in values {
        if seen.insert(v.to_bits()) {
            out.push(v);
        } else {
            log::warn!("duplicate sweep value {v} ignored");
            eprintln!("warning: duplicate sweep value {v} ignored");
        }
    }
    out
}

fn cmd_sweep(root: &Path, a: &SweepArgs) -> Result<()> {
    let base = a.config.resolve(None)?;
    let values = dedupe(&a.values);
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match a.param {
                SweepParam::Lambda => c.lambda = v,
                SweepParam::K => {
                    if v < 1.0 || v.fract() != 0.0 {
                        bail!("k must be a positive integer, got {v}");
                    }
                    c.k = v as usize;
                }
            }
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let (train_set, test_set, test_manifest) = a.split.load()?;
    let truth = a.scoring.truth(&test_manifest)?;
    let dir = out_dir(root, &a.out, "sweep")?;
    write_config(&dir, &base)?;
    let name = match a.param {
        SweepParam::Lambda => "lambda",
        SweepParam::K => "k",
    };
    let mut rows = Vec::new();
    let mut text = format!("{name:<10} patient acc  patient auc  image acc  image auc\n");
    for (v, config) in values.iter().zip(&configs) {
        log::info!("{name} = {v}");
        let outcome = train(&train_set, config, TrainOptions::default())?;
        let r = evaluate(&outcome.state.model, &test_set, truth.as_ref(), &a.scoring.settings(config))?;
        let row = SweepRow {
            value: *v,
            patient_accuracy: r.patient.accuracy,
            patient_auc: r.patient.auc,
            image_accuracy: r.image.as_ref().and_then(|m| m.accuracy),
            image_auc: r.image.as_ref().and_then(|m| m.auc),
        };
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        text += &format!(
            "{:<10} {:>11}  {:>11}  {:>9}  {:>9}\n",
            v,
            f(row.patient_accuracy),
            f(row.patient_auc),
            f(row.image_accuracy),
            f(row.image_auc)
        );
        rows.push(row);
    }
    fs::write(dir.join("sweep.txt"), &text)?;
    write_json(&dir.join("sweep.json"), &rows)?;
    print!("{text}");
    Ok(())
}

fn cmd_explain(root: &Path, a: &ExplainArgs) -> Result<()> {
    let state = TrainState::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let volumes = a.data.load()?;
    let selected: Vec<&Volume> = if a.patients.is_empty() {
        volumes.iter().take(1).collect()
    } else {
        a.patients
            .iter()
            .map(|id| {
                volumes
                    .iter()
                    .find(|v| &v.patient_id == id)
                    .with_context(|| format!("patient `{id}` not in manifest"))
            })
            .collect::<Result<_>>()?
    };
    let settings = a.scoring.settings(&state.config);
    let dir = out_dir(root, &a.out, "explain")?;
    for v in selected {
        let e = explain_volume(&state.model, v, &settings)?;
        let pdir = dir.join(&v.patient_id);
        fs::create_dir_all(&pdir)?;
        for (i, (slice, maps)) in v.slices.iter().zip(&e.maps).enumerate() {
            for (c, map) in maps.iter().enumerate() {
                let boxes = if c == slicemil::POSITIVE { e.slices[i].boxes.as_slice() } else { &[] };
                write_overlay_png(pdir.join(format!("slice-{i:03}-class-{c}.png")), slice, map, boxes)?;
            }
        }
        write_json(&pdir.join("boxes.json"), &e.slices)?;
        fs::write(pdir.join("profile.csv"), e.profile.to_csv())?;
        let boxed = e.slices.iter().filter(|s| !s.boxes.is_empty()).count();
        println!(
            "{}: {} slices, {} with boxes, {} sections -> {}",
            v.patient_id,
            v.len(),
            boxed,
            e.profile.len(),
            pdir.display()
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let root = &cli.out_root;
    match &cli.command {
        Command::Generate(a) => cmd_generate(root, a),
        Command::Train(a) => cmd_train(root, a),
        Command::Eval(a) => cmd_eval(root, a),
        Command::Ablate(a) => cmd_ablate(root, a),
        Command::Sweep(a) => cmd_sweep(root, a),
        Command::Explain(a) => cmd_explain(root, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
