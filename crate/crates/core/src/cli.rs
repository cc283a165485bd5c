//! Command-line surface: corpus generation, training, zero-shot and
//! linear-probe evaluation, and the supervision ablation.

use crate::augment::center_crop;
use crate::data::{
    build_vocab, lexicon_ids, load_samples, read_lexicon, read_lines, read_tags, synth_generate, CaptionRules, LoadReport,
    Sample, SynthSpec, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{build_zeroshot, image_features, probe_protocol, zeroshot_predict, LabeledFeatures, Metric, ProbeReport};
use crate::nets::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{apply_override, latest_checkpoint, load_model, run_training, TrainConfig, TrainData, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Standard evaluation transform: keep the central 87.5% of each side.
pub const EVAL_CENTER_CROP: f64 = 0.875;

#[derive(Debug, Parser)]
#[command(name = "declip", version, about = "Multi-supervision contrastive language-image pretraining at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shapes corpus.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus metrics.csv.
    Train(TrainArgs),
    /// Zero-shot accuracy of a checkpoint on a labeled manifest.
    EvalZeroshot(EvalArgs),
    /// Linear-probe accuracy with the λ sweep.
    EvalLinear(EvalArgs),
    /// Train the four supervision configurations over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; must be new or empty.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted config override, e.g. `augment.gray_prob=0.1`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Corpus directory (with train.jsonl) or a manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Accuracy,
    MeanPerClass,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint directory (containing header.json) or a training output directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory with train.jsonl, eval.jsonl and labels.txt.
    #[arg(long)]
    pub data: PathBuf,
    /// Prompt templates, one per line; defaults to prompts.txt in --data.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the validation split used by the λ sweep.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = EVAL_CENTER_CROP)]
    pub center_crop: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::Accuracy)]
    pub metric: MetricArg,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Seeds per configuration, counting up from --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = EVAL_CENTER_CROP)]
    pub center_crop: f64,
}

/// Written to `run.json` in every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub command: String,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

/// Creates `out`, refusing a non-empty directory unless resuming.
pub fn prepare_out_dir(out: &Path, resume: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !resume {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --resume or choose another",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_descriptor(command: &str, run: &RunArgs) -> Result<()> {
    let d = RunDescriptor {
        command: command.into(),
        config: run.config.clone(),
        out: run.out.clone(),
        seed: run.seed,
        overrides: run.overrides.clone(),
    };
    fs::write(run.out.join("run.json"), serde_json::to_string_pretty(&d)?)?;
    Ok(())
}

fn load_json_config<T: Default + Serialize + serde::de::DeserializeOwned>(run: &RunArgs) -> Result<T> {
    let mut cfg: T = match &run.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => T::default(),
    };
    for o in &run.overrides {
        apply_override(&mut cfg, o)?;
    }
    Ok(cfg)
}

/// Train config from `--config`, `--override` and `--seed`, in that order.
pub fn resolve_train_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = load_json_config(run)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Paths of a corpus given either its directory or one manifest inside it.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub dir: PathBuf,
    pub train: PathBuf,
}

impl CorpusPaths {
    pub fn new(data: &Path) -> Self {
        if data.is_file() {
            CorpusPaths {
                dir: data.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
                train: data.to_path_buf(),
            }
        } else {
            CorpusPaths {
                dir: data.to_path_buf(),
                train: data.join("train.jsonl"),
            }
        }
    }

    fn optional(&self, name: &str) -> Option<PathBuf> {
        let p = self.dir.join(name);
        p.exists().then_some(p)
    }

    /// Caption filters from `words.txt` and `tags.tsv` when present.
    pub fn caption_rules(&self) -> Result<CaptionRules> {
        Ok(CaptionRules {
            english: match self.optional("words.txt") {
                Some(p) => Some(read_lines(&p)?.into_iter().collect()),
                None => None,
            },
            tags: match self.optional("tags.tsv") {
                Some(p) => read_tags(&p)?,
                None => Default::default(),
            },
        })
    }

    pub fn label_names(&self) -> Result<Vec<String>> {
        read_lines(&self.dir.join("labels.txt"))
    }

    pub fn prompts(&self, explicit: Option<&Path>) -> Result<Vec<String>> {
        match explicit {
            Some(p) => read_lines(p),
            None => read_lines(&self.dir.join("prompts.txt")),
        }
    }
}

/// Filtered training pairs, vocabulary and synonym lexicon for `cfg`.
pub fn load_training_data(data: &Path, cfg: &TrainConfig) -> Result<(TrainData, LoadReport)> {
    let paths = CorpusPaths::new(data);
    let m = &cfg.model;
    let (samples, report) = load_samples(&paths.train, m.image_size, m.image_channels, &paths.caption_rules()?)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no usable records in {}", paths.train.display())));
    }
    let vocab = build_vocab(samples.iter().map(|s| s.caption.as_str()), cfg.min_count);
    let lexicon = match paths.optional("lexicon.tsv") {
        Some(p) => lexicon_ids(&read_lexicon(&p)?, &vocab),
        None => Default::default(),
    };
    Ok((TrainData::new(samples, vocab, lexicon), report))
}

/// Labeled records of a manifest; every record must carry a label.
pub fn load_labeled(manifest: &Path, model: &ModelConfig) -> Result<(Vec<Sample>, Vec<usize>)> {
    let (samples, _) = load_samples(manifest, model.image_size, model.image_channels, &CaptionRules::default())?;
    let labels = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Data(format!("unlabeled record in {}", manifest.display()))))
        .collect::<Result<Vec<usize>>>()?;
    Ok((samples, labels))
}

fn eval_images(samples: &[Sample], side: f64) -> Result<Vec<Tensor<f32>>> {
    samples.iter().map(|s| center_crop(&s.image, side)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub accuracy: f64,
    pub n: usize,
    pub classes: usize,
    pub center_crop: f64,
    pub per_class_accuracy: Vec<f64>,
}

pub fn evaluate_zeroshot(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    samples: &[Sample],
    labels: &[usize],
    label_names: &[String],
    prompts: &[String],
    side: f64,
) -> Result<ZeroShotReport> {
    let clf = build_zeroshot(params, vocab, label_names, prompts)?;
    let feats = image_features(params, &eval_images(samples, side)?, true)?;
    let pred = zeroshot_predict(&clf, &feats)?;
    let k = label_names.len();
    let mut hits = vec![(0usize, 0usize); k];
    for (&p, &l) in pred.iter().zip(labels) {
        if l >= k {
            return Err(Error::Data(format!("label {l} outside {k} class names")));
        }
        hits[l].0 += usize::from(p == l);
        hits[l].1 += 1;
    }
    Ok(ZeroShotReport {
        accuracy: crate::eval::accuracy(&pred, labels),
        n: labels.len(),
        classes: k,
        center_crop: side,
        per_class_accuracy: hits
            .iter()
            .map(|&(h, n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect(),
    })
}

/// Frozen backbone features of both splits, then the probe protocol.
pub fn evaluate_linear(
    params: &ModelParams<f32>,
    train: (&[Sample], &[usize]),
    test: (&[Sample], &[usize]),
    classes: usize,
    side: f64,
    metric: Metric,
    seed: u64,
) -> Result<ProbeReport> {
    let ftr = image_features(params, &eval_images(train.0, side)?, false)?;
    let fte = image_features(params, &eval_images(test.0, side)?, false)?;
    probe_protocol(
        &LabeledFeatures::new(&ftr, train.1.to_vec())?,
        &LabeledFeatures::new(&fte, test.1.to_vec())?,
        classes,
        metric,
        seed,
    )
}

/// One row of the supervision ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ss: bool,
    pub mvs: bool,
    pub nns: bool,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub median: f64,
}

/// The four cumulative configurations: CLIP, +MVS, +MVS+SS, +MVS+SS+NNS.
/// Active terms keep the base config's weights; the queue is disabled
/// whenever nearest-neighbor supervision is off.
pub fn ablation_configs(base: &TrainConfig) -> Result<Vec<(String, [bool; 3], TrainConfig)>> {
    if base.alpha <= 0.0 || base.beta <= 0.0 || base.gamma <= 0.0 {
        return Err(Error::Config("ablation needs positive alpha, beta and gamma in the base config".into()));
    }
    let rows = [
        ("CLIP", [false, false, false]),
        ("+MVS", [false, true, false]),
        ("+MVS+SS", [true, true, false]),
        ("+MVS+SS+NNS", [true, true, true]),
    ];
    Ok(rows
        .iter()
        .map(|&(name, [ss, mvs, nns])| {
            let mut c = base.clone();
            c.alpha = if ss { base.alpha } else { 0.0 };
            c.beta = if mvs { base.beta } else { 0.0 };
            c.gamma = if nns { base.gamma } else { 0.0 };
            if !nns {
                c.queue_capacity = 0;
            }
            (name.to_string(), [ss, mvs, nns], c)
        })
        .collect())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Outcome of one training run in the ablation.
pub struct AblationRun {
    pub row: String,
    pub seed: u64,
    pub out: PathBuf,
    pub trainer: Trainer,
    pub zeroshot: ZeroShotReport,
}

/// Trains every configuration for every seed under `out/<row>/seed_<s>`.
/// `on_run` sees each finished run.
pub fn run_ablation(
    base: &TrainConfig,
    data: &Path,
    out: &Path,
    seeds: &[u64],
    side: f64,
    mut on_run: impl FnMut(&AblationRun) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let paths = CorpusPaths::new(data);
    let (train, _) = load_training_data(data, base)?;
    let (eval, labels) = load_labeled(&paths.dir.join("eval.jsonl"), &base.model)?;
    let names = paths.label_names()?;
    let prompts = paths.prompts(None)?;
    let mut rows = Vec::new();
    for (name, [ss, mvs, nns], cfg) in ablation_configs(base)? {
        let mut accuracies = Vec::new();
        for &seed in seeds {
            let run_dir = out.join(name.trim_start_matches('+').replace('+', "_").to_lowercase()).join(format!("seed_{seed}"));
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let trainer = run_training(cfg, &train, &run_dir, false)?;
            let zeroshot = evaluate_zeroshot(&trainer.params, &trainer.vocab, &eval, &labels, &names, &prompts, side)?;
            fs::write(run_dir.join("zeroshot.json"), serde_json::to_string_pretty(&zeroshot)?)?;
            log::info!("{name} seed {seed}: zero-shot {:.4}", zeroshot.accuracy);
            accuracies.push(zeroshot.accuracy);
            on_run(&AblationRun {
                row: name.clone(),
                seed,
                out: run_dir,
                trainer,
                zeroshot,
            })?;
        }
        rows.push(AblationRow {
            name,
            ss,
            mvs,
            nns,
            seeds: seeds.to_vec(),
            median: median(&accuracies),
            accuracies,
        });
    }
    Ok(rows)
}

/// Median accuracy per row with its gain over the first row, both as
/// numbers and as a `84.5 (+2.0)` display string.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,ss,mvs,nns,median_zeroshot,delta_vs_clip,display,seed_accuracies\n");
    let base = rows.first().map_or(0.0, |r| r.median);
    for (i, r) in rows.iter().enumerate() {
        let delta = r.median - base;
        let display = if i == 0 {
            format!("{:.1}", 100.0 * r.median)
        } else {
            format!("{:.1} ({:+.1})", 100.0 * r.median, 100.0 * delta)
        };
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        s.push_str(&format!(
            "{},{},{},{},{:.4},{:+.4},{},{}\n",
            r.name,
            u8::from(r.ss),
            u8::from(r.mvs),
            u8::from(r.nns),
            r.median,
            delta,
            display,
            accs.join(";")
        ));
    }
    s
}

fn checkpoint_dir(path: &Path) -> Result<PathBuf> {
    if path.join("header.json").exists() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(path)?.ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", path.display())))
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let run = &args.run;
    let mut spec: SynthSpec = load_json_config(run)?;
    if let Some(s) = run.seed {
        spec.seed = s;
    }
    prepare_out_dir(&run.out, false)?;
    let data = synth_generate(&spec)?;
    data.write(&run.out)?;
    fs::write(run.out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    write_descriptor("gen-data", run)?;
    println!("wrote {} training and {} eval records to {}", data.train.len(), data.eval.len(), run.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = &args.run;
    let cfg = resolve_train_config(run)?;
    prepare_out_dir(&run.out, args.resume)?;
    let (data, report) = load_training_data(&args.data, &cfg)?;
    log::info!("kept {} records, dropped {:?}", report.kept, report.dropped);
    write_descriptor("train", run)?;
    fs::write(run.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let t = run_training(cfg, &data, &run.out, args.resume)?;
    println!("trained {} steps; tau {:.4}; output in {}", t.optim.step, t.params.tau(), run.out.display());
    Ok(())
}

fn cmd_eval_zeroshot(args: &EvalArgs) -> Result<()> {
    let (params, vocab, cfg) = load_model(&checkpoint_dir(&args.checkpoint)?)?;
    let paths = CorpusPaths::new(&args.data);
    let (samples, labels) = load_labeled(&paths.dir.join("eval.jsonl"), &cfg.model)?;
    let report = evaluate_zeroshot(
        &params,
        &vocab,
        &samples,
        &labels,
        &paths.label_names()?,
        &paths.prompts(args.prompts.as_deref())?,
        args.center_crop,
    )?;
    prepare_out_dir(&args.out, false)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(args.out.join("zeroshot.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_eval_linear(args: &EvalArgs) -> Result<()> {
    let (params, _, cfg) = load_model(&checkpoint_dir(&args.checkpoint)?)?;
    let paths = CorpusPaths::new(&args.data);
    let (train, train_labels) = load_labeled(&paths.train, &cfg.model)?;
    let (test, test_labels) = load_labeled(&paths.dir.join("eval.jsonl"), &cfg.model)?;
    let classes = paths.label_names()?.len();
    let metric = match args.metric {
        MetricArg::Accuracy => Metric::Accuracy,
        MetricArg::MeanPerClass => Metric::MeanPerClass,
    };
    let report = evaluate_linear(
        &params,
        (&train, &train_labels),
        (&test, &test_labels),
        classes,
        args.center_crop,
        metric,
        args.seed,
    )?;
    prepare_out_dir(&args.out, false)?;
    fs::write(args.out.join("probe.csv"), report.csv())?;
    let summary = serde_json::json!({
        "chosen_lambda": report.chosen_lambda,
        "test_metric": report.test_metric,
        "metric": report.metric,
    });
    fs::write(args.out.join("probe.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let run = &args.run;
    let cfg = resolve_train_config(run)?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    prepare_out_dir(&run.out, false)?;
    write_descriptor("ablate", run)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|k| cfg.seed + k).collect();
    let rows = run_ablation(&cfg, &args.data, &run.out, &seeds, args.center_crop, |_| Ok(()))?;
    let csv = ablation_csv(&rows);
    fs::write(run.out.join("ablation.csv"), &csv)?;
    let by_name: BTreeMap<&str, f64> = rows.iter().map(|r| (r.name.as_str(), r.median)).collect();
    fs::write(run.out.join("ablation.json"), serde_json::to_string_pretty(&by_name)?)?;
    print!("{csv}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalZeroshot(a) => cmd_eval_zeroshot(a),
        Command::EvalLinear(a) => cmd_eval_linear(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}
