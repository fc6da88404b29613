//! Command-line interface.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{decode_group, BlankScores};
use crate::attribution::{attribute, render_report, DEFAULT_STEPS};
use crate::corpus::{
    build_token_vocabulary, generate_groups, generate_synthetic, load_dataset_into, load_groups,
    split_80_10_10, write_dataset, write_groups, ClozeExample, IdiomVocabulary, SyntheticSpec,
};
use crate::encoder::{export_hidden_states, import_hidden_states};
use crate::error::{Error, Result};
use crate::heads::HeadVariant;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ClozeModel, ModelConfig};
use crate::training::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "idiomlab", version, about = "Cloze-style idiom prediction lab")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset file (JSON lines).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// charseq, idm, idm-ec, cp or cp-de.
    #[arg(long, global = true)]
    pub head: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic corpus with train/dev/test splits.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Accuracy and MRR of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-example candidate distributions.
    Predict(PredictArgs),
    /// Joint decoding of candidate groups.
    Assign(AssignArgs),
    /// Integrated Gradients heatmaps.
    Attribute(AttributeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 120)]
    pub idioms: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub topics: usize,
    #[arg(long, default_value_t = 20_000)]
    pub examples: usize,
    #[arg(long, default_value_t = 7)]
    pub candidates: usize,
    /// Also write this many candidate groups.
    #[arg(long, default_value_t = 0)]
    pub groups: usize,
    #[arg(long, default_value_t = 4)]
    pub group_size: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Idiom list (JSON array) fixing the vocabulary; defaults to the training data's candidates.
    #[arg(long)]
    pub idioms: Option<PathBuf>,
    /// Dataset evaluated after every epoch.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Enlarged-candidate term on or off (default depends on the head).
    #[arg(long)]
    pub ec: Option<bool>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split name in the report; defaults to the data file stem.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write each example's hidden states to this directory.
    #[arg(long)]
    pub export_states: Option<PathBuf>,
    /// Score from hidden states in this directory instead of running the encoder.
    #[arg(long)]
    pub import_states: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AssignArgs {
    /// Group file (JSON lines).
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Output of `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Example ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Attribute the gold candidate instead of the predicted one.
    #[arg(long)]
    pub gold: bool,
}

/// Everything a run depends on, as written to its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::new(HeadVariant::Dual),
            train: TrainConfig::desk(),
            seed: DEFAULT_SEED,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    fn resolve(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(h) = &common.head {
            cfg.model.head = h.parse()?;
        }
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if common.data.is_some() {
            cfg.data.clone_from(&common.data);
        }
        if common.out.is_some() {
            cfg.out.clone_from(&common.out);
        }
        cfg.train.seed = cfg.seed;
        cfg.model.encoder.seed = cfg.seed;
        Ok(cfg)
    }

    fn data(&self) -> Result<&Path> {
        let p = self.data.as_deref().ok_or_else(|| Error::Config("--data is required".into()))?;
        existing(p)
    }

    fn out(&self) -> Result<&Path> {
        let p = self.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))?;
        fs::create_dir_all(p)?;
        Ok(p)
    }
}

fn existing(p: &Path) -> Result<&Path> {
    if !p.exists() {
        return Err(Error::Config(format!("{} does not exist", p.display())));
    }
    Ok(p)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    config_sha256: String,
    seed: u64,
    git_describe: String,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    extra: serde_json::Value,
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_manifest(dir: &Path, command: &str, config: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let canonical = serde_json::to_vec(config)?;
    let m = Manifest {
        command,
        config,
        config_sha256: hex::encode(Sha256::digest(&canonical)),
        seed: config.seed,
        git_describe: git_describe(),
        extra,
    };
    fs::write(dir.join(format!("manifest-{command}.json")), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.common.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let config = RunConfig::resolve(&cli.common)?;
    pool.install(|| match cli.command {
        Cmd::Synth(a) => cmd_synth(&config, &a),
        Cmd::Train(a) => cmd_train(config, &a),
        Cmd::Eval(a) => cmd_eval(config, &cli.common, &a),
        Cmd::Predict(a) => cmd_predict(config, &cli.common, &a),
        Cmd::Assign(a) => cmd_assign(&config, &a),
        Cmd::Attribute(a) => cmd_attribute(config, &cli.common, &a),
    })
}

fn cmd_synth(config: &RunConfig, a: &SynthArgs) -> Result<()> {
    let out = config.out()?;
    let spec = SyntheticSpec {
        idioms: a.idioms,
        classes: a.classes,
        topics: a.topics,
        examples: a.examples,
        candidates: a.candidates,
        seed: config.seed,
    };
    let corpus = generate_synthetic(&spec)?;
    let (train, dev, test) = split_80_10_10(&corpus.examples);
    for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        write_dataset(&out.join(format!("{name}.jsonl")), part, &corpus.vocab)?;
    }
    write_json(&out.join("idioms.json"), &corpus.vocab)?;
    if a.groups > 0 {
        let (members, groups) = generate_groups(&spec, a.groups, a.group_size, config.seed.wrapping_add(1))?;
        write_dataset(&out.join("group_examples.jsonl"), &members, &corpus.vocab)?;
        write_groups(&out.join("groups.jsonl"), &groups, &corpus.vocab)?;
    }
    println!(
        "wrote {} / {} / {} examples to {}",
        train.len(),
        dev.len(),
        test.len(),
        out.display()
    );
    write_manifest(out, "synth", config, serde_json::to_value(&spec)?)
}

fn cmd_train(mut config: RunConfig, a: &TrainArgs) -> Result<()> {
    let data_path = config.data()?.to_path_buf();
    let dev_path = a.dev.as_deref().map(existing).transpose()?;
    let out = config.out()?.to_path_buf();

    let mut trainer: Trainer<f64> = match &a.resume {
        Some(ckpt) => {
            let t = load_checkpoint(existing(ckpt)?)?;
            config.model = t.model.config().clone();
            config.train = t.config.clone();
            config.seed = t.config.seed;
            t
        }
        None => {
            if let Some(h) = a.hidden {
                config.model.encoder.hidden = h;
            }
            if let Some(l) = a.layers {
                config.model.encoder.layers = l;
            }
            config.train.ec = a.ec.or(config.train.ec);
            let mut idioms = match &a.idioms {
                Some(p) => serde_json::from_str::<IdiomVocabulary>(&fs::read_to_string(existing(p)?)?)?,
                None => IdiomVocabulary::new(),
            };
            let grow = a.idioms.is_none();
            let examples = load_dataset_into(&data_path, &mut idioms, grow)?;
            let tokens = build_token_vocabulary(&examples, &idioms);
            let model = ClozeModel::new(config.model.clone(), tokens, idioms)?;
            config.model = model.config().clone();
            Trainer::new(model, config.train.clone())?
        }
    };
    if let Some(e) = a.epochs {
        trainer.config.epochs = e;
    }
    if let Some(lr) = a.lr {
        trainer.config.lr = lr;
    }
    if let Some(b) = a.batch_size {
        trainer.config.batch_size = b;
    }
    if let Some(w) = a.warmup {
        trainer.config.warmup = w;
    }
    config.train = trainer.config.clone();
    config.data = Some(data_path.clone());

    let mut vocab = trainer.model.idioms().clone();
    let data = load_dataset_into(&data_path, &mut vocab, false)?;
    let dev = dev_path.map(|p| load_dataset_into(p, &mut vocab, false)).transpose()?;
    trainer.config.validate(data.len())?;
    let start_step = trainer.step;
    let per_epoch = trainer.config.steps_per_epoch(data.len());
    let total = trainer.config.total_steps(data.len());
    let end = a.max_steps.map_or(total, |m| m.min(total));
    let mut dev_report = None;
    while trainer.step < end {
        let epoch_end = ((trainer.step / per_epoch + 1) * per_epoch).min(end);
        trainer.fit(&data, Some(epoch_end))?;
        let last = trainer.log.last().map(|l| l.loss.total).unwrap_or(f64::NAN);
        match &dev {
            Some(d) => {
                let r = evaluate(&trainer.model, d, "dev")?;
                log::info!("step {} loss {last:.4} dev acc {:.4}", trainer.step, r.accuracy);
                dev_report = Some(r);
            }
            None => log::info!("step {} loss {last:.4}", trainer.step),
        }
    }
    save_checkpoint(&trainer, &out.join("model.ckpt"))?;
    let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    for entry in &trainer.log {
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    if let Some(r) = &dev_report {
        write_json(&out.join("eval_dev.json"), r)?;
        print!("{}", r.table());
    }
    println!("trained {} to step {} ({})", trainer.model.head(), trainer.step, out.join("model.ckpt").display());
    write_manifest(
        &out,
        "train",
        &config,
        serde_json::json!({ "start_step": start_step, "end_step": trainer.step, "resume": a.resume }),
    )
}

fn load_model(path: &Path, common: &Common, config: &mut RunConfig) -> Result<ClozeModel<f64>> {
    let model = load_checkpoint::<f64>(existing(path)?)?.model;
    config.model = model.config().clone();
    if let Some(h) = &common.head {
        let h: HeadVariant = h.parse()?;
        if h != model.head() {
            return Err(Error::Config(format!("--head {h} but the checkpoint holds a {} model", model.head())));
        }
    }
    Ok(model)
}

fn load_for(model: &ClozeModel<f64>, path: &Path) -> Result<Vec<ClozeExample>> {
    let mut vocab = model.idioms().clone();
    load_dataset_into(path, &mut vocab, false)
}

fn cmd_eval(mut config: RunConfig, common: &Common, a: &EvalArgs) -> Result<()> {
    let data_path = config.data()?.to_path_buf();
    let model = load_model(&a.checkpoint, common, &mut config)?;
    let out = config.out()?.to_path_buf();
    let data = load_for(&model, &data_path)?;
    let split = a.split.clone().unwrap_or_else(|| {
        data_path
            .file_stem()
            .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
    });
    let report: EvalReport = evaluate(&model, &data, &split)?;
    write_json(&out.join(format!("eval_{split}.json")), &report)?;
    print!("{}", report.table());
    write_manifest(&out, "eval", &config, serde_json::json!({ "checkpoint": a.checkpoint }))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub candidates: Vec<String>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
}

fn cmd_predict(mut config: RunConfig, common: &Common, a: &PredictArgs) -> Result<()> {
    let data_path = config.data()?.to_path_buf();
    let model = load_model(&a.checkpoint, common, &mut config)?;
    let out = config.out()?.to_path_buf();
    let data = load_for(&model, &data_path)?;
    if let Some(dir) = &a.export_states {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(out.join("predictions.jsonl"))?);
    for ex in &data {
        let p = match &a.import_states {
            Some(dir) => {
                let stem = file_stem(&ex.id);
                let path = [dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json"))]
                    .into_iter()
                    .find(|p| p.exists())
                    .ok_or_else(|| Error::Config(format!("no hidden states for {} in {}", ex.id, dir.display())))?;
                let hs = import_hidden_states(&path, model.hidden())?;
                model.predict_from_states(&hs, &ex.candidates)?
            }
            None => model.predict(ex)?,
        };
        if let Some(dir) = &a.export_states {
            export_hidden_states(&model.encode(ex)?, &dir.join(format!("{}.bin", file_stem(&ex.id))))?;
        }
        let line = PredictionLine {
            id: ex.id.clone(),
            candidates: ex.candidates.iter().map(|&c| model.idioms().surface(c).to_string()).collect(),
            predicted: p.distribution.argmax(),
            probs: p.distribution.probs,
            gold: ex.gold,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("wrote {} predictions to {}", data.len(), out.join("predictions.jsonl").display());
    write_manifest(&out, "predict", &config, serde_json::json!({ "checkpoint": a.checkpoint }))
}

#[derive(Serialize)]
struct AssignLine<'a> {
    group_id: &'a str,
    id: &'a str,
    choice: &'a str,
    argmax: &'a str,
}

fn cmd_assign(config: &RunConfig, a: &AssignArgs) -> Result<()> {
    let groups_path = existing(a.groups.as_deref().ok_or_else(|| Error::Config("assign needs --groups".into()))?)?;
    let pred_path =
        existing(a.predictions.as_deref().ok_or_else(|| Error::Config("assign needs --predictions".into()))?)?;
    let out = config.out()?;

    let mut vocab = IdiomVocabulary::new();
    let mut preds: HashMap<String, (Vec<crate::corpus::IdiomId>, PredictionLine)> = HashMap::new();
    for (i, line) in BufReader::new(fs::File::open(pred_path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: pred_path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let ids = p.candidates.iter().map(|c| vocab.insert(c)).collect::<Result<Vec<_>>>()?;
        preds.insert(p.id.clone(), (ids, p));
    }
    let groups = load_groups(groups_path, &vocab)?;
    let mut w = BufWriter::new(fs::File::create(out.join("assignments.jsonl"))?);
    let (mut joint_hits, mut argmax_hits, mut blanks) = (0usize, 0usize, 0usize);
    for g in &groups {
        let members = g
            .members
            .iter()
            .map(|m| preds.get(m).ok_or_else(|| Error::Group(format!("no prediction for member {m} of {}", g.group_id))))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<BlankScores<'_>> = members
            .iter()
            .map(|(ids, p)| BlankScores {
                candidates: ids,
                probs: &p.probs,
            })
            .collect();
        let d = decode_group(&g.candidates, &scores)?;
        for ((ids, p), &choice) in members.iter().zip(&d.choices) {
            blanks += 1;
            joint_hits += usize::from(ids[p.gold] == choice);
            argmax_hits += usize::from(p.predicted == p.gold);
            let line = AssignLine {
                group_id: &g.group_id,
                id: &p.id,
                choice: vocab.surface(choice),
                argmax: &p.candidates[p.predicted],
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    if blanks > 0 {
        println!(
            "{} groups, {blanks} blanks: joint acc {:.4}, per-blank acc {:.4}",
            groups.len(),
            joint_hits as f64 / blanks as f64,
            argmax_hits as f64 / blanks as f64
        );
    }
    write_manifest(out, "assign", config, serde_json::json!({ "groups": groups_path, "predictions": pred_path }))
}

fn cmd_attribute(mut config: RunConfig, common: &Common, a: &AttributeArgs) -> Result<()> {
    let data_path = config.data()?.to_path_buf();
    let model = load_model(&a.checkpoint, common, &mut config)?;
    let out = config.out()?.to_path_buf();
    let data = load_for(&model, &data_path)?;
    for id in &a.ids {
        let ex = data
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| Error::Config(format!("no example with id {id}")))?;
        let target = if a.gold { ex.gold } else { model.predict(ex)?.distribution.argmax() };
        let report = attribute(&model, ex, target, a.steps)?;
        let stem = file_stem(id);
        write_json(&out.join(format!("{stem}.json")), &report)?;
        fs::write(out.join(format!("{stem}.html")), render_report(&report))?;
        println!("{id}: completeness gap {:.3e}", report.completeness_gap);
    }
    write_manifest(&out, "attribute", &config, serde_json::json!({ "checkpoint": a.checkpoint, "ids": a.ids }))
}
