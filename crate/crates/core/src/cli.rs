//! Command-line driver: synthesize data, train, sample and evaluate.
//!
//! Configuration files are JSON objects with flat dotted keys such as
//! `"schedule.T"` or `"loss.lambda"`; command flags override file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::tgv::write_atomic;
use crate::data::{
    case_dir_name, generate_raw_case, load_case, load_cases, load_tgv, save_tgv,
    write_case, BinaryMask, LongitudinalCase, SynthConfig, TgvArray,
};
use crate::denoiser::{load_checkpoint, save_checkpoint, Denoiser, ModelConfig, Treatment, TreatmentDayPair};
use crate::diffusion::{ImageTensor, Shape};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{
    aggregate, dsc, image_metrics, optimize_threshold, rvd, write_report, write_summary, GroupKey, MetricRow,
};
use crate::sampler::{run_ensemble, SamplerConfig, UncertaintyMaps};
use crate::schedule::{build_schedule, ScheduleConfig};
use crate::trainer::{TrainConfig, TrainLog, Trainer};

/// Every tunable setting, grouped by owning module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: SynthConfig,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(p) = parts.next() {
        let obj = cur.as_object_mut().expect("config paths lead through objects");
        if parts.peek().is_none() {
            obj.insert(p.to_string(), value);
            return;
        }
        cur = obj.get_mut(p).expect("path validated against defaults");
    }
}

impl RunConfig {
    /// Flat dotted-key view, the on-disk representation.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.to_flat().into_iter().collect();
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes");
        s.push('\n');
        s
    }

    /// Applies flat overrides on top of `self`; unknown keys are rejected.
    pub fn with_overrides(&self, flat: &Map<String, Value>) -> Result<Self> {
        let known = self.to_flat();
        let mut tree = serde_json::to_value(self)?;
        for (k, v) in flat {
            if !known.contains_key(k) {
                return Err(Error::config(k.clone(), "unknown configuration key"));
            }
            set_path(&mut tree, k, v.clone());
        }
        let cfg: RunConfig = serde_json::from_value(tree)
            .map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        let Value::Object(flat) = v else {
            return Err(Error::config("config", "expected a JSON object of dotted keys"));
        };
        RunConfig::default().with_overrides(&flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let table = build_schedule(&self.schedule)?;
        self.sampler.validate(&table)?;
        self.loss.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        self.data.validate()?;
        if !self.data.grid.is_multiple_of(self.model.divisor()) {
            return Err(Error::config(
                "data.grid",
                format!("must be divisible by {}", self.model.divisor()),
            ));
        }
        Ok(())
    }

    fn set<T: Serialize>(&self, key: &str, value: T) -> Result<Self> {
        let mut m = Map::new();
        m.insert(key.to_string(), serde_json::to_value(value)?);
        self.with_overrides(&m)
    }
}

#[derive(Debug, Parser)]
#[command(name = "tadiff", version, about = "Treatment-aware diffusion for longitudinal lesion growth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic longitudinal cases.
    Synth(SynthArgs),
    /// Train the denoiser on a case directory.
    Train(TrainArgs),
    /// Predict a future session for one case.
    Sample(SampleArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log CSV (default: `<out>.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint with optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop early after this step and save.
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub case: PathBuf,
    /// One to three 1-based session indices; the last is repeated to fill three.
    #[arg(long, value_delimiter = ',', num_args = 1..=3, required = true)]
    pub sources: Vec<usize>,
    #[arg(long)]
    pub target_day: u32,
    #[arg(long)]
    pub target_treatment: Treatment,
    #[arg(long)]
    pub ensembles: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `sample` outputs, one subdirectory per prediction.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth case directories.
    #[arg(long)]
    pub gt: PathBuf,
    /// `auto` or a fixed probability threshold.
    #[arg(long, default_value = "auto")]
    pub threshold: String,
    #[arg(long)]
    pub report: PathBuf,
    /// Minimum ground-truth lesion area in pixels for a row to be scored.
    #[arg(long, default_value_t = 100)]
    pub min_area: usize,
}

/// Process exit status for an error: 2 usage, 3 data, 4 numeric abort.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Argument(_) | Error::Vocabulary(_) | Error::Contract(_) => 2,
        Error::NonFiniteLoss { .. } => 4,
        Error::State(_)
        | Error::Format { .. }
        | Error::UndefinedMetric(_)
        | Error::Data(_)
        | Error::Io { .. }
        | Error::Json(_) => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(n) = a.cases {
        if n == 0 {
            return Err(Error::Argument("--cases must be at least 1".into()));
        }
        cfg = cfg.set("data.n_cases", n)?;
    }
    if let Some(s) = a.seed {
        cfg = cfg.set("data.seed", s)?;
    }
    if cfg.data.n_cases == 0 {
        return Err(Error::Argument("data.n_cases must be at least 1".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for i in 0..cfg.data.n_cases {
        let case = generate_raw_case(&cfg.data, i as u64)?;
        write_case(&a.out, &case)?;
        println!("case {}: {} sessions", case.case_id, case.len());
    }
    Ok(())
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut cfg = match (&resume, &a.config) {
        (_, Some(p)) => RunConfig::load(p)?,
        (Some(ck), None) => {
            let Value::Object(flat) = &ck.run_config else {
                return Err(Error::Data("checkpoint carries no run configuration".into()));
            };
            RunConfig::default().with_overrides(flat)?
        }
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg = cfg.set("train.seed", s)?;
    }
    if let Some(n) = a.steps {
        cfg = cfg.set("train.total_steps", n)?;
    }
    let cases = load_cases(&a.data)?;
    let table = build_schedule(&cfg.schedule)?;
    let run_config = Value::Object(cfg.to_flat().into_iter().collect());
    let mut trainer = match resume {
        Some(ck) => {
            if ck.model.config() != &cfg.model {
                return Err(Error::Data("checkpoint model does not match model.* settings".into()));
            }
            Trainer::from_checkpoint(ck, cases, cfg.train.clone(), cfg.loss, table)?
        }
        None => {
            let model = Denoiser::new(cfg.model.clone(), cfg.train.seed)?;
            Trainer::new(model, cases, cfg.train.clone(), cfg.loss, table)?
        }
    };
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let mut log = TrainLog::open(&log_path)?;
    let until = a.stop_at.unwrap_or(cfg.train.total_steps);
    let every = (cfg.train.total_steps / 20).max(1);
    let result = trainer.run_until(until, |row| {
        log.append(row).map_err(|e| Error::io(&log_path, e))?;
        if row.step % every == 0 {
            eprintln!(
                "step {}/{} lr {:.3e} loss {:.5} (mse {:.5}, seg {:.5})",
                row.step, cfg.train.total_steps, row.lr, row.total, row.weighted_mse, row.seg
            );
        }
        Ok(())
    });
    result?;
    save_checkpoint(&trainer.checkpoint(run_config), &a.out)?;
    println!("saved checkpoint at step {} to {}", trainer.step(), a.out.display());
    Ok(())
}

/// Metadata written next to the sampled arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub case_id: String,
    pub sources: [usize; 3],
    pub pairs: [TreatmentDayPair; 4],
    pub target_day: u32,
    pub target_treatment: Treatment,
    pub seed: u64,
    pub ensembles: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "T_m")]
    pub fusion_steps: usize,
    pub checkpoint_step: u64,
}

fn tensor_tgv(t: &ImageTensor) -> Result<TgvArray> {
    let s = t.shape();
    TgvArray::f32(
        vec![s.channels, s.height, s.width],
        t.data().iter().map(|&v| v as f32).collect(),
    )
}

fn load_tensor(path: &Path) -> Result<ImageTensor> {
    let arr = load_tgv(path)?;
    let [c, h, w] = arr.dims[..] else {
        return Err(Error::Data(format!("{}: expected a rank-3 array", path.display())));
    };
    ImageTensor::new(Shape::new(c, h, w), arr.to_f64())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Expands one to three 1-based indices to three, repeating the last.
pub fn expand_sources(sources: &[usize]) -> Result<[usize; 3]> {
    match *sources {
        [a] => Ok([a, a, a]),
        [a, b] => Ok([a, b, b]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Argument("--sources takes one to three indices".into())),
    }
}

pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let mut cfg = match &ck.run_config {
        Value::Object(flat) => RunConfig::default().with_overrides(flat)?,
        _ => RunConfig::default(),
    };
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let Value::Object(flat) = serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?
        else {
            return Err(Error::config("config", "expected a JSON object of dotted keys"));
        };
        cfg = cfg.with_overrides(&flat)?;
    }
    if let Some(k) = a.ensembles {
        cfg = cfg.set("sampler.ensembles", k)?;
    }
    if let Some(s) = a.seed {
        cfg = cfg.set("sampler.seed", s)?;
    }
    let case = load_case(&a.case)?;
    let sources = expand_sources(&a.sources)?;
    for &i in &sources {
        if i == 0 || i > case.len() {
            return Err(Error::Argument(format!(
                "source session {i} not in case {} (sessions 1..={})",
                case.case_id,
                case.len()
            )));
        }
    }
    let model = &ck.model;
    if model.config().channels != case.shape().channels {
        return Err(Error::Data(format!(
            "checkpoint expects {} channels, case has {}",
            model.config().channels,
            case.shape().channels
        )));
    }
    let sess = |i: usize| &case.sessions[i - 1];
    let pair = |i: usize| TreatmentDayPair::new(sess(i).treatment, sess(i).day);
    let target = TreatmentDayPair::new(a.target_treatment, a.target_day);
    let pairs = [pair(sources[0]), pair(sources[1]), pair(sources[2]), target];
    let images = sources.map(|i| sess(i).image.clone());
    let table = build_schedule(&cfg.schedule)?;
    let samples = run_ensemble(&images, &pairs, model, &cfg.sampler, &table)?;
    let maps = UncertaintyMaps::from_samples(&samples)?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let outputs = [
        ("generated.tgv", &samples[0].generated),
        ("masks.tgv", &samples[0].masks),
        ("image_mean.tgv", &maps.image_mean),
        ("image_std.tgv", &maps.image_std),
        ("mask_mean.tgv", &maps.mask_mean),
        ("mask_std.tgv", &maps.mask_std),
    ];
    for (name, t) in outputs {
        save_tgv(&tensor_tgv(t)?, &a.out.join(name))?;
    }
    let meta = SampleMeta {
        case_id: case.case_id.clone(),
        sources,
        pairs,
        target_day: a.target_day,
        target_treatment: a.target_treatment,
        seed: cfg.sampler.seed,
        ensembles: cfg.sampler.ensembles,
        steps: table.steps(),
        fusion_steps: cfg.sampler.fusion_steps,
        checkpoint_step: ck.step,
    };
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    write_atomic(&a.out.join("meta.json"), &json)?;
    let area: f64 = maps.mask_mean.channel(3).iter().sum();
    println!(
        "case {} day {} {}: expected future lesion area {:.1} px, written to {}",
        case.case_id,
        a.target_day,
        a.target_treatment,
        area,
        a.out.display()
    );
    Ok(())
}

struct Prediction {
    dir: PathBuf,
    meta: SampleMeta,
    image: ImageTensor,
    future: Vec<f64>,
}

fn load_predictions(root: &Path) -> Result<Vec<Prediction>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no predictions under {}", root.display())));
    }
    dirs.into_iter()
        .map(|dir| {
            let path = dir.join("meta.json");
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let meta: SampleMeta =
                serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let image = load_tensor(&dir.join("image_mean.tgv"))?;
            let masks = load_tensor(&dir.join("mask_mean.tgv"))?;
            if masks.shape().channels != 4 {
                return Err(Error::Data(format!("{}: mask_mean must have 4 channels", dir.display())));
            }
            let future = masks.channel(3).to_vec();
            Ok(Prediction { dir, meta, image, future })
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let fixed = match a.threshold.as_str() {
        "auto" => None,
        s => {
            let t: f64 = s
                .parse()
                .map_err(|_| Error::Argument(format!("--threshold must be `auto` or a number, got `{s}`")))?;
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Argument("--threshold must lie in [0, 1)".into()));
            }
            Some(t)
        }
    };
    let preds = load_predictions(&a.pred)?;
    let mut cases: BTreeMap<String, LongitudinalCase> = BTreeMap::new();
    let mut missing = Vec::new();
    let mut matched = Vec::new();
    for p in &preds {
        let id = &p.meta.case_id;
        if !cases.contains_key(id) {
            let dir = a.gt.join(case_dir_name(id));
            if !dir.join("manifest.json").is_file() {
                missing.push(format!("{}: no ground-truth case `{id}`", p.dir.display()));
                continue;
            }
            cases.insert(id.clone(), load_case(&dir)?);
        }
        let case = &cases[id];
        match case.sessions.iter().position(|s| s.day == p.meta.target_day) {
            Some(i) if case.sessions[i].image.shape() == p.image.shape() => matched.push((p, i)),
            Some(_) => missing.push(format!("{}: shape differs from ground truth", p.dir.display())),
            None => missing.push(format!(
                "{}: case `{id}` has no session on day {}",
                p.dir.display(),
                p.meta.target_day
            )),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("inventory mismatch:\n  {}", missing.join("\n  "))));
    }
    let mut scored = Vec::new();
    for (p, i) in matched {
        let s = &cases[&p.meta.case_id].sessions[i];
        if s.mask.area() < a.min_area {
            eprintln!(
                "skipping {}: ground-truth lesion area {} < {} px",
                p.dir.display(),
                s.mask.area(),
                a.min_area
            );
            continue;
        }
        scored.push((p, s));
    }
    if scored.is_empty() {
        return Err(Error::Data("no prediction has an eligible ground-truth lesion".into()));
    }
    let tau = match fixed {
        Some(t) => t,
        None => {
            let pairs: Vec<(&[f64], &BinaryMask)> = scored.iter().map(|(p, s)| (p.future.as_slice(), &s.mask)).collect();
            optimize_threshold(&pairs)?
        }
    };
    let mut rows = Vec::with_capacity(scored.len());
    for (p, s) in scored {
        let bin = BinaryMask::from_probabilities(s.mask.height(), s.mask.width(), &p.future, tau)?;
        let (ssim, psnr, mse) = image_metrics(&p.image, &s.image)?;
        rows.push(MetricRow {
            case_id: p.meta.case_id.clone(),
            slice_id: 0,
            target_day: p.meta.target_day,
            treatment: p.meta.target_treatment,
            dsc: dsc(&bin, &s.mask)?,
            rvd: rvd(&bin, &s.mask)?,
            ssim,
            psnr,
            mse,
        });
    }
    write_report(&a.report, &rows)?;
    println!("threshold {tau}; {} rows written to {}", rows.len(), a.report.display());
    for key in GroupKey::ALL {
        let summaries = aggregate(&rows, key)?;
        let path = summary_path(&a.report, key);
        write_summary(&path, key, tau, &summaries)?;
        for s in &summaries {
            println!(
                "{:>9} {:<8} n={:<3} dsc {:.3}±{:.3} rvd {:.3}±{:.3} ssim {:.3}±{:.3}",
                key.name(),
                s.group,
                s.n,
                s.dsc.mean,
                s.dsc.std,
                s.rvd.mean,
                s.rvd.std,
                s.ssim.mean,
                s.ssim.std
            );
        }
    }
    Ok(())
}

/// `report.csv` -> `report_by_<key>.csv`.
pub fn summary_path(report: &Path, key: GroupKey) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}_by_{}.csv", key.name()))
}
