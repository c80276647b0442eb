//! Training, evaluation and the experiment drivers behind the command line.
//!
//! A run directory holds `checkpoint.bin` (rewritten after every epoch),
//! `loss.csv`, and `run.json`. Training resumes from an existing checkpoint,
//! so re-invoking a finished run is a no-op; the experiment drivers rely on
//! that to share runs between the ablation table and the sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::{convex_baseline, post_process, summary_table, vm_baseline, EvalReport, EvalVariant, MethodSummary, fmt_percent};
use crate::mask::BinaryMask;
use crate::optim::{AdamW, LR_DECAY};
use crate::params::{sum_gradients, Bound, GradMap, ParameterStore};
use crate::rng::{derive_seed, stream, Purpose};
use crate::segnet::{total_loss, video_input, video_targets, InputMode, LossConfig, ModelConfig, SegNet};
use crate::synth::{generate_dataset, load_dataset, write_dataset, DatasetParams, RenderedSequence};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_CSV: &str = "loss.csv";
pub const RUN_JSON: &str = "run.json";
pub const THREADS_ENV: &str = "EORAS_THREADS";

pub const METHOD_MODEL: &str = "model";
pub const METHOD_VM: &str = "VM";
pub const METHOD_CONVEX: &str = "Convex";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train_data: PathBuf,
    /// Scored after every epoch for the loss CSV.
    pub val_data: Option<PathBuf>,
    /// Held-out split used by `eval`, `ablate` and the sweeps.
    pub test_data: Option<PathBuf>,
    pub output: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Caps the (object, sequence) items visited per epoch; `None` visits all.
    pub items_per_epoch: Option<usize>,
    pub eval_variant: EvalVariant,
    pub pp_intersection: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_data: PathBuf::from("data/train"),
            val_data: None,
            test_data: None,
            output: PathBuf::from("runs/default"),
            epochs: 30,
            batch_size: 4,
            lr0: 1e-3,
            lr_decay: LR_DECAY,
            weight_decay: 5e-4,
            items_per_epoch: None,
            eval_variant: EvalVariant::None,
            pp_intersection: false,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.loss.gamma >= 0.0 && self.loss.lambda >= 0.0) {
            return bad("focal gamma and lambda must be non-negative");
        }
        if self.items_per_epoch == Some(0) {
            return bad("items_per_epoch must be positive");
        }
        if self.eval_variant == EvalVariant::Sg && self.model.input_mode != InputMode::SgVisibleMask {
            return bad("the sg variant needs input_mode sg_visible_mask");
        }
        self.model.validate()
    }

    /// Reads a config file: either a bare config or a `run.json` record.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let inner = match value.get("config") {
            Some(c) if value.get("git_describe").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    /// Settings that change the trained weights; `epochs` and the output
    /// location are left out so a run can be extended or moved.
    fn training_identity(&self) -> RunConfig {
        RunConfig {
            epochs: 0,
            output: PathBuf::new(),
            val_data: None,
            test_data: None,
            eval_variant: EvalVariant::None,
            pp_intersection: false,
            ..self.clone()
        }
    }
}

/// Per-epoch row of the loss CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou_full: Option<f64>,
    pub val_miou_occ: Option<f64>,
}

/// JSON trailer stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub history: Vec<EpochLog>,
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord<C = RunConfig> {
    pub command: String,
    pub config: C,
    pub seed: u64,
    pub git_describe: String,
    pub wall_clock_seconds: f64,
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn write_run_record<C: Serialize>(dir: &Path, command: &str, config: &C, seed: u64, started: Instant) -> Result<()> {
    let record = RunRecord {
        command: command.to_string(),
        config,
        seed,
        git_describe: git_describe(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(RUN_JSON), &record)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Worker pool sized by `EORAS_THREADS` (all cores when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sequences: usize,
    pub objects: usize,
    /// Mean hidden share of the nonempty silhouettes.
    pub mean_occlusion_ratio: f64,
    /// (frame, object) instances with both hidden and visible pixels.
    pub partially_occluded_instances: usize,
    pub instances: usize,
}

pub fn dataset_stats(data: &[RenderedSequence]) -> DatasetStats {
    let mut stats = DatasetStats {
        sequences: data.len(),
        objects: data.iter().map(RenderedSequence::object_count).sum(),
        mean_occlusion_ratio: 0.0,
        partially_occluded_instances: 0,
        instances: 0,
    };
    for seq in data {
        stats.mean_occlusion_ratio += seq.occlusion_ratio();
        for (ft, vt) in seq.full.iter().zip(&seq.visible) {
            for (m, v) in ft.iter().zip(vt) {
                stats.instances += 1;
                stats.partially_occluded_instances += crate::eval::qualifies(m, v) as usize;
            }
        }
    }
    if !data.is_empty() {
        stats.mean_occlusion_ratio /= data.len() as f64;
    }
    stats
}

/// Renders a dataset into `out` and records the invocation in `out/run.json`.
pub fn generate(params: &DatasetParams, out: &Path) -> Result<DatasetStats> {
    let started = Instant::now();
    let data = generate_dataset(params)?;
    write_dataset(&data, out)?;
    write_run_record(out, "generate", params, params.seed, started)?;
    Ok(dataset_stats(&data))
}

/// Loads a dataset and checks it against the model before any work starts.
pub fn load_checked(dir: &Path, model: &ModelConfig) -> Result<Vec<RenderedSequence>> {
    let data = load_dataset(dir)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{}: dataset has no sequences", dir.display())));
    }
    for (i, seq) in data.iter().enumerate() {
        let (h, w) = seq.image_dims();
        if h != model.image_size || w != model.image_size {
            return Err(Error::Data(format!(
                "{}: sequence {i} is {h}x{w}, model expects {s}x{s}",
                dir.display(),
                s = model.image_size
            )));
        }
        if seq.object_count() == 0 {
            return Err(Error::Data(format!("{}: sequence {i} has no objects", dir.display())));
        }
    }
    Ok(data)
}

/// Every (sequence, object) pair in dataset order.
pub fn training_items(data: &[RenderedSequence]) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.object_count()).map(move |k| (i, k)))
        .collect()
}

/// Loss and parameter gradients for one (sequence, object) item.
pub fn item_gradient(net: &SegNet, store: &ParameterStore, seq: &RenderedSequence, k: usize, loss: &LossConfig) -> Result<(f64, GradMap)> {
    let tape = Tape::new();
    let p = Bound::new(store, &tape);
    let input = video_input(seq, k, net.cfg.input_mode)?;
    let (full, visible) = video_targets(seq, k);
    let logits = net.forward(&p, &input)?;
    let l = total_loss(logits, &full, &visible, loss)?;
    let value = l.value().item();
    let grads = tape.backward(l)?;
    Ok((value, p.collect(grads)))
}

/// One optimizer step on a mini-batch. Item gradients are computed in
/// parallel and summed in batch order, so the result does not depend on the
/// worker count. Returns the summed item losses.
pub fn train_step(net: &SegNet, store: &mut ParameterStore, data: &[RenderedSequence], batch: &[(usize, usize)], loss: &LossConfig, opt: &AdamW) -> Result<f64> {
    let results: Vec<Result<(f64, GradMap)>> = batch
        .par_iter()
        .map(|&(i, k)| item_gradient(net, store, &data[i], k, loss))
        .collect();
    let mut total = 0.0;
    let mut maps = Vec::with_capacity(batch.len());
    for r in results {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {l}")));
        }
        total += l;
        maps.push(g);
    }
    let mut grads = sum_gradients(maps);
    let scale = if loss.strict_sum { 1.0 } else { 1.0 / batch.len() as f64 };
    for (name, g) in grads.iter_mut() {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    opt.step(store, &grads)?;
    Ok(total)
}

/// Item order for `epoch`: a shuffle seeded by the run seed and the epoch.
pub fn epoch_order(cfg: &RunConfig, items: &[(usize, usize)], epoch: usize) -> Vec<(usize, usize)> {
    let mut order = items.to_vec();
    order.shuffle(&mut stream(derive_seed(cfg.seed, epoch as u64), Purpose::Shuffle));
    if let Some(n) = cfg.items_per_epoch {
        order.truncate(n);
    }
    order
}

pub struct TrainOutcome {
    pub net: SegNet,
    pub store: ParameterStore,
    pub history: Vec<EpochLog>,
}

pub fn loss_csv(history: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
    let mut out = String::from("epoch,lr,train_loss,val_miou_full,val_miou_occ\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch,
            h.lr,
            h.train_loss,
            opt(h.val_miou_full),
            opt(h.val_miou_occ)
        ));
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(SegNet, ParameterStore, CheckpointMeta)> {
    let (store, meta) = ParameterStore::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta).map_err(|e| Error::Data(format!("{}: checkpoint metadata: {e}", path.display())))?;
    let net = SegNet::new(meta.config.model.clone())?;
    Ok((net, store, meta))
}

fn save_checkpoint(path: &Path, store: &ParameterStore, meta: &CheckpointMeta) -> Result<()> {
    let text = serde_json::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    store.save(&tmp, &text)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Trains `cfg.epochs` epochs into `cfg.output`, resuming from a checkpoint
/// left there by an earlier invocation with the same settings.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// [`train`] with a callback after every finished epoch.
pub fn train_with(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let data = load_checked(&cfg.train_data, &cfg.model)?;
    let val = cfg.val_data.as_deref().map(|p| load_checked(p, &cfg.model)).transpose()?;
    create_dir(&cfg.output)?;
    let net = SegNet::new(cfg.model.clone())?;
    let ckpt = cfg.output.join(CHECKPOINT_FILE);
    let (mut store, mut history) = if ckpt.exists() {
        let (_, store, meta) = load_checkpoint(&ckpt)?;
        if meta.config.training_identity() != cfg.training_identity() {
            return Err(Error::Config(format!(
                "{} holds a checkpoint trained with different settings",
                cfg.output.display()
            )));
        }
        (store, meta.history)
    } else {
        (net.init(&mut stream(cfg.seed, Purpose::Init))?, Vec::new())
    };
    if history.len() > cfg.epochs {
        return Err(Error::Config(format!(
            "checkpoint already has {} epochs, config asks for {}",
            history.len(),
            cfg.epochs
        )));
    }
    let items = training_items(&data);
    for epoch in history.len()..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let opt = AdamW { lr, weight_decay: cfg.weight_decay, ..AdamW::default() };
        let order = epoch_order(cfg, &items, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            total += train_step(&net, &mut store, &data, batch, &cfg.loss, &opt)?;
        }
        let (val_miou_full, val_miou_occ) = match &val {
            Some(v) => {
                let s = evaluate(&net, &store, v, EvalVariant::None, false)?
                    .summary(METHOD_MODEL)
                    .expect("model rows present");
                (Some(s.miou_full), s.miou_occ)
            }
            None => (None, None),
        };
        let log = EpochLog { epoch: epoch + 1, lr, train_loss: total / order.len() as f64, val_miou_full, val_miou_occ };
        history.push(log.clone());
        save_checkpoint(&ckpt, &store, &CheckpointMeta { config: cfg.clone(), history: history.clone() })?;
        let csv = cfg.output.join(LOSS_CSV);
        fs::write(&csv, loss_csv(&history)).map_err(|e| Error::io(&csv, e))?;
        on_epoch(&log);
    }
    write_run_record(&cfg.output, "train", cfg, cfg.seed, started)?;
    Ok(TrainOutcome { net, store, history })
}

fn model_method(net: &SegNet) -> &'static str {
    match net.cfg.input_mode {
        InputMode::BoxChannel => METHOD_MODEL,
        InputMode::SgVisibleMask => "model+SG",
    }
}

/// Scores the model, VM and Convex on every (sequence, object, frame).
/// `Pp` adds a `model+PP` row (merge with the ground-truth visible mask),
/// `PpStar` a `model+PP*` row (merge with the predicted visible mask).
pub fn evaluate(net: &SegNet, store: &ParameterStore, data: &[RenderedSequence], variant: EvalVariant, pp_intersection: bool) -> Result<EvalReport> {
    let sg_model = net.cfg.input_mode == InputMode::SgVisibleMask;
    if variant == EvalVariant::Sg && !sg_model {
        return Err(Error::Config(
            "the sg variant needs a checkpoint trained with input_mode sg_visible_mask".to_string(),
        ));
    }
    let items = training_items(data);
    let parts: Vec<Result<EvalReport>> = items
        .par_iter()
        .map(|&(i, k)| {
            let seq = &data[i];
            let preds = net.forward_video(store, seq, k)?;
            let mut report = EvalReport::default();
            for pred in &preds {
                let t = pred.frame;
                let (full, visible) = (&seq.full[t][k], &seq.visible[t][k]);
                let key = (i, k, t);
                let m = pred.full_mask();
                report.add(key, model_method(net), &m, full, visible);
                match variant {
                    EvalVariant::Pp => report.add(key, "model+PP", &post_process(&m, visible, pp_intersection), full, visible),
                    EvalVariant::PpStar => {
                        report.add(key, "model+PP*", &post_process(&m, &pred.visible_mask(), pp_intersection), full, visible)
                    }
                    EvalVariant::None | EvalVariant::Sg => {}
                }
                report.add(key, METHOD_VM, &vm_baseline(visible), full, visible);
                report.add(key, METHOD_CONVEX, &convex_baseline(visible), full, visible);
            }
            Ok(report)
        })
        .collect();
    let mut report = EvalReport::default();
    for part in parts {
        report.extend(part?);
    }
    Ok(report)
}

#[derive(Serialize)]
struct EvalSummaryFile<'a> {
    config: &'a RunConfig,
    checkpoint: &'a Path,
    dataset: &'a Path,
    methods: Vec<MethodSummary>,
}

/// Writes `eval.csv`, `eval_summary.json` and `eval_summary.md` into `dir`.
pub fn write_eval(dir: &Path, report: &EvalReport, cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<()> {
    create_dir(dir)?;
    let csv = dir.join("eval.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let summaries = report.summaries();
    let md = dir.join("eval_summary.md");
    fs::write(&md, summary_table(&summaries)).map_err(|e| Error::io(&md, e))?;
    write_json(
        &dir.join("eval_summary.json"),
        &EvalSummaryFile { config: cfg, checkpoint, dataset, methods: summaries },
    )
}

/// Loads a checkpoint, evaluates it on `dataset` and writes the report to `out`.
pub fn eval_checkpoint(checkpoint: &Path, dataset: &Path, variant: EvalVariant, pp_intersection: bool, out: &Path) -> Result<EvalReport> {
    let started = Instant::now();
    let (net, store, meta) = load_checkpoint(checkpoint)?;
    let data = load_checked(dataset, &net.cfg)?;
    let report = evaluate(&net, &store, &data, variant, pp_intersection)?;
    let cfg = RunConfig {
        test_data: Some(dataset.to_path_buf()),
        output: out.to_path_buf(),
        eval_variant: variant,
        pp_intersection,
        ..meta.config
    };
    write_eval(out, &report, &cfg, checkpoint, dataset)?;
    write_run_record(out, "eval", &cfg, cfg.seed, started)?;
    Ok(report)
}

const OVERLAY_PRED: [f64; 3] = [230.0, 40.0, 40.0];
const OVERLAY_EDGE: [u8; 3] = [40, 230, 40];

/// Frame with the predicted full mask tinted red and the ground-truth full
/// mask outlined in green.
pub fn overlay(frame: &crate::synth::RgbImage, pred: &BinaryMask, gt: &BinaryMask) -> crate::synth::RgbImage {
    let mut out = frame.clone();
    let (h, w) = gt.dims();
    for y in 0..h {
        for x in 0..w {
            if pred.get(y, x) {
                let p = frame.pixel(y, x);
                let mix = |c: usize| (0.5 * p[c] as f64 + 0.5 * OVERLAY_PRED[c]).round() as u8;
                out.put(y, x, [mix(0), mix(1), mix(2)]);
            }
            let edge = gt.get(y, x)
                && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || !gt.get(y - 1, x) || !gt.get(y + 1, x) || !gt.get(y, x - 1) || !gt.get(y, x + 1));
            if edge {
                out.put(y, x, OVERLAY_EDGE);
            }
        }
    }
    out
}

/// Writes `seq_XXXX_objK_tTT.ppm` overlays for the first `sequences` sequences.
pub fn render_overlays(checkpoint: &Path, dataset: &Path, sequences: usize, out: &Path) -> Result<usize> {
    let (net, store, _) = load_checkpoint(checkpoint)?;
    let data = load_checked(dataset, &net.cfg)?;
    create_dir(out)?;
    let mut written = 0;
    for (i, seq) in data.iter().enumerate().take(sequences) {
        for k in 0..seq.object_count() {
            for pred in net.forward_video(&store, seq, k)? {
                let t = pred.frame;
                let img = overlay(&seq.frames[t], &pred.full_mask(), &seq.full[t][k]);
                let path = out.join(format!("seq_{i:04}_obj{k}_t{t:02}.ppm"));
                fs::write(&path, img.to_ppm()).map_err(|e| Error::io(&path, e))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

/// One trained-and-evaluated configuration of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub label: String,
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub final_train_loss: f64,
    pub model: MethodSummary,
    pub vm: MethodSummary,
    pub convex: MethodSummary,
}

/// Trains `cfg` (or reuses a finished run in `cfg.output`) and evaluates it on
/// `cfg.test_data`, writing the eval files into the run directory.
pub fn run_experiment(label: &str, cfg: &RunConfig) -> Result<ExperimentRow> {
    let test = cfg
        .test_data
        .clone()
        .ok_or_else(|| Error::Config("test_data is required for experiments".to_string()))?;
    let outcome = train(cfg)?;
    let data = load_checked(&test, &cfg.model)?;
    let report = evaluate(&outcome.net, &outcome.store, &data, EvalVariant::None, false)?;
    write_eval(&cfg.output, &report, cfg, &cfg.output.join(CHECKPOINT_FILE), &test)?;
    let get = |m: &str| report.summary(m).ok_or_else(|| Error::Data(format!("{}: no {m} rows", test.display())));
    Ok(ExperimentRow {
        label: label.to_string(),
        run_dir: cfg.output.clone(),
        config: cfg.clone(),
        final_train_loss: outcome.history.last().map_or(f64::NAN, |h| h.train_loss),
        model: get(model_method(&outcome.net))?,
        vm: get(METHOD_VM)?,
        convex: get(METHOD_CONVEX)?,
    })
}

/// Run directory for a variant of `base` under `root`: the base config itself
/// always lands in `root/base`, so experiments share it.
pub fn variant_dir(root: &Path, base: &RunConfig, variant: &RunConfig, label: &str) -> PathBuf {
    if variant.training_identity() == base.training_identity() {
        root.join("base")
    } else {
        root.join(label)
    }
}

fn run_variants(base: &RunConfig, root: &Path, variants: Vec<(String, RunConfig)>) -> Result<Vec<ExperimentRow>> {
    variants
        .into_iter()
        .map(|(label, mut cfg)| {
            cfg.output = variant_dir(root, base, &cfg, &label);
            run_experiment(&label, &cfg)
        })
        .collect()
}

/// The four module switches of the ablation table: (temporal, bidirectional, bev).
pub const ABLATION_ROWS: [(bool, bool, bool); 4] = [(false, false, false), (true, true, false), (true, false, true), (true, true, true)];

fn ablation_label(t: bool, bi: bool, bev: bool) -> String {
    let mut parts = Vec::new();
    if t {
        parts.push("t");
    }
    if bi {
        parts.push("bi");
    }
    if bev {
        parts.push("bev");
    }
    if parts.is_empty() {
        "ablate_none".to_string()
    } else {
        format!("ablate_{}", parts.join("_"))
    }
}

pub fn ablation(base: &RunConfig, root: &Path) -> Result<Vec<ExperimentRow>> {
    let variants = ABLATION_ROWS
        .iter()
        .map(|&(t, bi, bev)| {
            let mut cfg = base.clone();
            cfg.model.use_temporal = t;
            cfg.model.use_bidirectional = bi;
            cfg.model.use_bev = bev;
            (ablation_label(t, bi, bev), cfg)
        })
        .collect();
    run_variants(base, root, variants)
}

pub fn sweep_slots(base: &RunConfig, root: &Path, slots: &[usize]) -> Result<Vec<ExperimentRow>> {
    let variants = slots
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.model.n_slots = n;
            (format!("slots_{n}"), cfg)
        })
        .collect();
    run_variants(base, root, variants)
}

pub fn sweep_lambda(base: &RunConfig, root: &Path, lambdas: &[f64]) -> Result<Vec<ExperimentRow>> {
    let variants = lambdas
        .iter()
        .map(|&l| {
            let mut cfg = base.clone();
            cfg.loss.lambda = l;
            (format!("lambda_{l}"), cfg)
        })
        .collect();
    run_variants(base, root, variants)
}

fn check(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        ""
    }
}

/// Markdown and CSV renderings of the ablation rows.
pub fn ablation_tables(rows: &[ExperimentRow]) -> (String, String) {
    let mut md = String::from("| Temporal | Bi-direction | BEV | mIoU_full | mIoU_occ |\n|---|---|---|---|---|\n");
    let mut csv = String::from("temporal,bidirectional,bev,miou_full,miou_occ\n");
    for r in rows {
        let m = &r.config.model;
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            check(m.use_temporal),
            check(m.use_bidirectional),
            check(m.use_bev),
            fmt_percent(Some(r.model.miou_full)),
            fmt_percent(r.model.miou_occ)
        ));
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            m.use_temporal,
            m.use_bidirectional,
            m.use_bev,
            fmt_percent(Some(r.model.miou_full)),
            fmt_percent(r.model.miou_occ)
        ));
    }
    (md, csv)
}

/// Markdown and CSV renderings of a one-parameter sweep.
pub fn sweep_tables(name: &str, rows: &[ExperimentRow], value: impl Fn(&RunConfig) -> String) -> (String, String) {
    let mut md = format!("| {name} | mIoU_full | mIoU_occ | final train loss |\n|---|---|---|---|\n");
    let mut csv = format!("{name},miou_full,miou_occ,final_train_loss\n");
    for r in rows {
        let (v, full, occ) = (value(&r.config), fmt_percent(Some(r.model.miou_full)), fmt_percent(r.model.miou_occ));
        md.push_str(&format!("| {v} | {full} | {occ} | {:.4} |\n", r.final_train_loss));
        csv.push_str(&format!("{v},{full},{occ},{}\n", r.final_train_loss));
    }
    (md, csv)
}

/// Writes `<stem>.md`, `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_table(dir: &Path, stem: &str, tables: &(String, String), rows: &[ExperimentRow]) -> Result<()> {
    create_dir(dir)?;
    let md = dir.join(format!("{stem}.md"));
    fs::write(&md, &tables.0).map_err(|e| Error::io(&md, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, &tables.1).map_err(|e| Error::io(&csv, e))?;
    write_json(&dir.join(format!("{stem}.json")), &rows)
}
