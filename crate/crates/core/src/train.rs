//! Adam, the step learning-rate schedule, the training loop and checkpoints.
//!
//! Training is single-threaded and deterministic: every random draw comes
//! from a stream keyed by `(seed, epoch, batch)`, so a checkpoint needs only
//! the epoch counter besides model and optimizer state.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::config::ExperimentConfig;
use crate::data::{self, Dataset, PreprocessMode, Split};
use crate::error::{contract, Error, Result};
use crate::eval::{self, ItemMeta, RankingResult};
use crate::msgr::{self, RegMode, Target};
use crate::net::{ForwardOutput, MsflModel};
use crate::nn::{Mode, ParamId, Parameter};
use crate::objective::{accuracy, batch_hard_triplet, cross_entropy, pk_sampler};
use crate::rng::stream_rng;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const LOG_FILE: &str = "train.log.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

const AUGMENT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Parameter], config: AdamConfig, lr: f64) -> Self {
        AdamState {
            config,
            lr,
            step: 0,
            m: params.iter().map(|p| p.value.zeros_like()).collect(),
            v: params.iter().map(|p| p.value.zeros_like()).collect(),
        }
    }

    /// One bias-corrected update from the gradients stored in `params`.
    /// Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(contract(format!(
                "adam: {} parameters, state for {}",
                params.len(),
                self.m.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.grad.shape() != m.shape() || p.value.shape() != m.shape() {
                return Err(contract(format!("adam: shape mismatch for {}", p.name)));
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let m_new: Vec<f64> = m.data().iter().zip(g).map(|(m, g)| beta1 * m + (1.0 - beta1) * g).collect();
            let v_new: Vec<f64> = v.data().iter().zip(g).map(|(v, g)| beta2 * v + (1.0 - beta2) * g * g).collect();
            let value: Vec<f64> = p
                .value
                .data()
                .iter()
                .zip(m_new.iter().zip(&v_new))
                .map(|(x, (m, v))| x - self.lr * (m / c1) / ((v / c2).sqrt() + eps))
                .collect();
            let shape = p.value.shape().clone();
            p.value = Tensor::from_shape(shape.clone(), value)?;
            *m = Tensor::from_shape(shape.clone(), m_new)?;
            *v = Tensor::from_shape(shape, v_new)?;
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: multiplied by `decay_factor` at each
/// decay epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, decay_factor: f64, decay_epochs: Vec<usize>, epochs: usize) -> Result<Self> {
        let mut errs = Vec::new();
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            errs.push(format!("schedule.base_lr must be positive, got {base_lr}"));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            errs.push(format!("schedule.decay_factor must be in (0, 1], got {decay_factor}"));
        }
        if epochs == 0 {
            errs.push("schedule: no epochs to run".into());
        }
        if decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            errs.push(format!("schedule decay epochs {decay_epochs:?} must be strictly increasing"));
        }
        if decay_epochs.iter().any(|&e| e >= epochs) {
            errs.push(format!("schedule decay epochs {decay_epochs:?} must be below the {epochs} total epochs"));
        }
        if errs.is_empty() {
            Ok(Schedule {
                base_lr,
                decay_factor,
                decay_epochs,
                epochs,
            })
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(contract(format!("epoch {epoch} outside schedule of {} epochs", self.epochs)));
        }
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        Ok(self.base_lr * self.decay_factor.powi(decays as i32))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MSFLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    /// Completed epochs; training resumes here.
    epoch: usize,
    num_classes: usize,
    config: String,
    adam: AdamConfig,
    lr: f64,
    adam_step: u64,
    params: Vec<String>,
    buffers: Vec<String>,
}

/// Everything needed to continue a run: the resolved config, parameters,
/// batch-norm statistics and optimizer moments. Random streams are derived
/// from `(seed, epoch)`, so there is no generator state to store.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub num_classes: usize,
    pub config: ExperimentConfig,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn capture(model: &MsflModel, adam: &AdamState, config: &ExperimentConfig, epoch: usize) -> Self {
        Checkpoint {
            epoch,
            num_classes: model.config().num_classes,
            config: config.clone(),
            params: model.store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            buffers: model.store.buffers().iter().map(|b| (b.name.clone(), b.value.clone())).collect(),
            adam: adam.clone(),
        }
    }

    /// `magic | version u32 | header length u64 | JSON header | tensors |
    /// SHA-256 of everything before`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            num_classes: self.num_classes,
            config: self.config.to_toml(),
            adam: self.adam.config,
            lr: self.adam.lr,
            adam_step: self.adam.step,
            params: self.params.iter().map(|(n, _)| n.clone()).collect(),
            buffers: self.buffers.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(self.buffers.iter().map(|(_, t)| t))
            .chain(&self.adam.m)
            .chain(&self.adam.v);
        for t in tensors {
            write_tensor(&mut buf, t)?;
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (wrong magic bytes)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (corrupt file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..hend])?;
        let config = ExperimentConfig::resolve(&header.config, &[])?;
        let mut r = &body[hend..];
        let mut read = |n: usize| -> Result<Vec<Tensor>> { (0..n).map(|_| Ok(read_tensor(&mut r)?)).collect() };
        let params = read(header.params.len())?;
        let buffers = read(header.buffers.len())?;
        let m = read(header.params.len())?;
        let v = read(header.params.len())?;
        if !r.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(Checkpoint {
            epoch: header.epoch,
            num_classes: header.num_classes,
            config,
            params: header.params.into_iter().zip(params).collect(),
            buffers: header.buffers.into_iter().zip(buffers).collect(),
            adam: AdamState {
                config: header.adam,
                lr: header.lr,
                step: header.adam_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn model(&self) -> Result<MsflModel> {
        let mut model = MsflModel::new(self.config.model_config(self.num_classes), self.config.seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    fn restore_into(&self, model: &mut MsflModel) -> Result<()> {
        let store = &mut model.store;
        if store.params().len() != self.params.len() || store.buffers().len() != self.buffers.len() {
            return Err(Error::Checkpoint("parameter layout differs from the configured model".into()));
        }
        for (p, (name, t)) in store.params_mut().iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {} does not fit model parameter {} {}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for (b, (name, t)) in store.buffers_mut().iter_mut().zip(&self.buffers) {
            if &b.name != name || b.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("buffer {name} does not fit the model")));
            }
            b.value = t.clone();
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: LogKind,
    pub epoch: usize,
    /// Batch index within the epoch; absent on epoch summaries.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub batch: Option<usize>,
    pub base_loss: f64,
    pub penalty: f64,
    pub lr: f64,
    /// Dual norm of the loss gradient at each penalized scale.
    pub grad_norms: BTreeMap<String, f64>,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Batch,
    Epoch,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint (its config must match).
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MsflModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epochs: usize,
    pub history: Vec<LogRecord>,
    pub output_dir: PathBuf,
}

impl TrainOutcome {
    pub fn final_train_accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.train_accuracy)
    }
}

/// Training split loaded into memory with contiguous class labels.
pub struct TrainSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainSet {
    pub fn load(ds: &Dataset) -> Result<Self> {
        let ids = ds.manifest.identities(Split::Train);
        let class: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        let records = ds.manifest.split(Split::Train);
        if records.is_empty() {
            return Err(Error::Data("no training images".into()));
        }
        let images = records.iter().map(|r| ds.load(r)).collect::<Result<Vec<_>>>()?;
        let labels = records.iter().map(|r| class[&r.identity]).collect();
        Ok(TrainSet {
            images,
            labels,
            num_classes: ids.len(),
        })
    }
}

/// Values of one optimization step, before the parameter update.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub base_loss: f64,
    pub penalty: f64,
    pub grad_norms: BTreeMap<String, f64>,
    pub accuracy: f64,
}

fn target_var(out: &ForwardOutput, t: Target) -> Var {
    match t.stage_index() {
        None => out.input,
        Some(k) => out.features.c[k],
    }
}

fn base_loss(tape: &mut Tape, out: &ForwardOutput, labels: &[usize], cfg: &ExperimentConfig) -> Result<Var> {
    let ce = cross_entropy(tape, out.logits, labels)?;
    if !cfg.loss.triplet.enabled {
        return Ok(ce);
    }
    let tri = batch_hard_triplet(tape, out.embedding, labels, cfg.loss.triplet.margin)?;
    Ok(tape.add(ce, tri)?)
}

fn store_grads(model: &mut MsflModel, bound: &[(ParamId, Var)], grads: Vec<Tensor>) {
    model.store.zero_grads();
    for ((id, _), g) in bound.iter().zip(grads) {
        model.store.param_mut(*id).grad = g;
    }
}

/// Forward, loss, regularizer and backward for one batch; leaves parameter
/// gradients in the model's store.
pub fn compute_step(
    model: &mut MsflModel,
    images: &Tensor,
    labels: &[usize],
    cfg: &ExperimentConfig,
) -> Result<StepStats> {
    let reg = cfg.regularizer();
    let mut tape = Tape::new();
    if reg.mode == RegMode::AdversarialStep {
        // Clean pass for the input gradient only; batch statistics are
        // updated by the pass that is trained on.
        let (net, f) = model.begin(&mut tape, Mode::Train);
        let mut f = f.without_stat_updates();
        let x = f.tape.leaf(images.clone());
        let out = net.forward_var(&mut f, x)?;
        let clean = base_loss(f.tape, &out, labels, cfg)?;
        let clean_value = f.tape.value(clean).item();
        let g = f.tape.grad(clean, &[x])?.remove(0);
        let (shifted, pert) = msgr::perturb_input(images, &g, reg.p, reg.sigma)?;
        let mut tape = Tape::new();
        let (out, bound) = model.forward(&mut tape, &shifted, Mode::Train)?;
        let loss = base_loss(&mut tape, &out, labels, cfg)?;
        let accuracy = accuracy(tape.value(out.logits), labels);
        let value = tape.value(loss).item();
        let vars: Vec<Var> = bound.iter().map(|(_, v)| *v).collect();
        let grads = tape.grad(loss, &vars)?;
        store_grads(model, &bound, grads);
        let norm = if reg.sigma > 0.0 { pert.attained / reg.sigma } else { reg.p.dual().of(&g) };
        return Ok(StepStats {
            base_loss: clean_value,
            penalty: value - clean_value,
            grad_norms: BTreeMap::from([(Target::Input.name().to_string(), norm)]),
            accuracy,
        });
    }

    let (out, bound) = model.forward(&mut tape, images, Mode::Train)?;
    let base = base_loss(&mut tape, &out, labels, cfg)?;
    let accuracy = accuracy(tape.value(out.logits), labels);
    let base_value = tape.value(base).item();
    let (total, penalty, grad_norms) = match reg.mode {
        RegMode::Penalty => {
            let targets: Vec<Var> = reg.targets.iter().map(|&t| target_var(&out, t)).collect();
            let term = msgr::penalty(&mut tape, base, &targets, reg.p, reg.sigma)?;
            let norms = reg.targets.iter().map(|t| t.name().to_string()).zip(term.grad_norms).collect();
            let penalty = tape.value(term.value).item();
            (tape.add(base, term.value)?, penalty, norms)
        }
        _ => (base, 0.0, BTreeMap::new()),
    };
    let vars: Vec<Var> = bound.iter().map(|(_, v)| *v).collect();
    let grads = tape.grad(total, &vars)?;
    store_grads(model, &bound, grads);
    Ok(StepStats {
        base_loss: base_value,
        penalty,
        grad_norms,
        accuracy,
    })
}

/// Preprocessed training batch for `(epoch, batch)`.
pub fn batch_images(set: &TrainSet, indices: &[usize], cfg: &ExperimentConfig, epoch: usize, batch: usize) -> Result<Tensor> {
    let mut rng = stream_rng(cfg.seed, ((epoch as u64) << 32) | batch as u64, AUGMENT_STREAM);
    let target = (cfg.model.input_height, cfg.model.input_width);
    let imgs = indices
        .iter()
        .map(|&i| Ok(data::preprocess(&set.images[i], target, PreprocessMode::Train, &mut rng)?.0))
        .collect::<Result<Vec<_>>>()?;
    data::stack(&imgs)
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    reason: String,
    epoch: usize,
    batch: usize,
    indices: &'a [usize],
    labels: &'a [usize],
    base_loss: Option<f64>,
    penalty: Option<f64>,
    grad_norms: Option<&'a BTreeMap<String, f64>>,
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Keep only log lines from epochs before `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let rec: LogRecord = serde_json::from_str(&line)?;
        if rec.epoch < epoch {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Run (or resume) training as configured. Writes the resolved config, the
/// JSON-lines log, periodic checkpoints and `final.ckpt` under
/// `cfg.output_dir`.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let schedule = cfg.schedule().map_err(|e| Error::Config(vec![e]))?;
    let ds = Dataset::open(Path::new(&cfg.data.root))?;
    let set = TrainSet::load(&ds)?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::write(out_dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;

    let mut model = MsflModel::new(cfg.model_config(set.num_classes), cfg.seed)?;
    let mut adam = AdamState::new(model.store.params(), cfg.adam(), schedule.base_lr);
    let mut start = 0;
    let log_path = out_dir.join(LOG_FILE);
    if let Some(path) = &opts.resume {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.config != *cfg {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different configuration",
                path.display()
            )));
        }
        if ckpt.num_classes != set.num_classes {
            return Err(Error::Checkpoint("class count differs from the dataset".into()));
        }
        ckpt.restore_into(&mut model)?;
        adam = ckpt.adam;
        start = ckpt.epoch;
        truncate_log(&log_path, start)?;
    } else if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut log = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(&log_path)?);

    let end = opts.stop_after.map_or(schedule.epochs, |s| s.min(schedule.epochs));
    let mut history = Vec::new();
    for epoch in start..end {
        adam.lr = schedule.lr_at(epoch)?;
        let batches = pk_sampler(&set.labels, cfg.pk(), cfg.seed, epoch as u64)?;
        let (mut loss_sum, mut pen_sum, mut acc_sum) = (0.0, 0.0, 0.0);
        let mut norm_sums: BTreeMap<String, f64> = BTreeMap::new();
        for (b, batch) in batches.iter().enumerate() {
            let labels: Vec<usize> = batch.indices.iter().map(|&i| set.labels[i]).collect();
            let images = batch_images(&set, &batch.indices, cfg, epoch, b)?;
            let dump = |reason: String, stats: Option<&StepStats>| -> Result<Error> {
                let path = out_dir.join(DIAGNOSTIC_FILE);
                let d = Diagnostic {
                    reason: reason.clone(),
                    epoch,
                    batch: b,
                    indices: &batch.indices,
                    labels: &labels,
                    base_loss: stats.map(|s| s.base_loss),
                    penalty: stats.map(|s| s.penalty),
                    grad_norms: stats.map(|s| &s.grad_norms),
                };
                fs::write(&path, serde_json::to_string_pretty(&d)?)?;
                Ok(Error::Diverged { reason, path })
            };
            let stats = match compute_step(&mut model, &images, &labels, cfg) {
                Ok(s) => s,
                Err(e) if e.is_non_finite() => return Err(dump(e.to_string(), None)?),
                Err(e) => return Err(e),
            };
            if !stats.base_loss.is_finite() || !stats.penalty.is_finite() {
                return Err(dump("non-finite loss".into(), Some(&stats))?);
            }
            if let Err(e) = adam.step(model.store.params_mut()) {
                if e.is_non_finite() {
                    return Err(dump(e.to_string(), Some(&stats))?);
                }
                return Err(e);
            }
            write_json_line(
                &mut log,
                &LogRecord {
                    kind: LogKind::Batch,
                    epoch,
                    batch: Some(b),
                    base_loss: stats.base_loss,
                    penalty: stats.penalty,
                    lr: adam.lr,
                    grad_norms: stats.grad_norms.clone(),
                    train_accuracy: stats.accuracy,
                },
            )?;
            loss_sum += stats.base_loss;
            pen_sum += stats.penalty;
            acc_sum += stats.accuracy;
            for (k, v) in &stats.grad_norms {
                *norm_sums.entry(k.clone()).or_default() += v;
            }
        }
        let n = batches.len() as f64;
        let summary = LogRecord {
            kind: LogKind::Epoch,
            epoch,
            batch: None,
            base_loss: loss_sum / n,
            penalty: pen_sum / n,
            lr: adam.lr,
            grad_norms: norm_sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            train_accuracy: acc_sum / n,
        };
        write_json_line(&mut log, &summary)?;
        log.flush()?;
        if opts.progress {
            eprintln!(
                "epoch {:>3}/{}  loss {:.4}  penalty {:.4}  train acc {:.3}  lr {:.2e}",
                epoch + 1,
                schedule.epochs,
                summary.base_loss,
                summary.penalty,
                summary.train_accuracy,
                summary.lr
            );
        }
        history.push(summary);
        let done = epoch + 1;
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < schedule.epochs {
            Checkpoint::capture(&model, &adam, cfg, done).save(&checkpoint_path(&out_dir, done))?;
        }
    }
    let epochs = end.max(start);
    let ckpt = Checkpoint::capture(&model, &adam, cfg, epochs);
    if epochs == schedule.epochs {
        ckpt.save(&out_dir.join(FINAL_CHECKPOINT))?;
    } else {
        ckpt.save(&checkpoint_path(&out_dir, epochs))?;
    }
    Ok(TrainOutcome {
        model,
        adam,
        epochs,
        history,
        output_dir: out_dir,
    })
}

/// Eval-mode embeddings of a list of records, in order.
pub fn embed_records(
    model: &mut MsflModel,
    ds: &Dataset,
    records: &[&data::Record],
    batch_size: usize,
) -> Result<Tensor> {
    let cfg = model.config().clone();
    let target = (cfg.input_height, cfg.input_width);
    let mut rows = Vec::new();
    let mut dim = 0;
    for chunk in records.chunks(batch_size.max(1)) {
        let imgs = chunk
            .iter()
            .map(|r| {
                let img = ds.load(r)?;
                // Eval preprocessing draws nothing from the generator.
                Ok(data::preprocess(&img, target, PreprocessMode::Eval, &mut stream_rng(0, 0, 0))?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let emb = model.embed(&data::stack(&imgs)?)?;
        dim = emb.dims()[1];
        rows.extend_from_slice(emb.data());
    }
    Ok(Tensor::new(vec![records.len(), dim], rows)?)
}

/// Query/gallery ranking metrics of a model on a dataset.
pub fn evaluate_model(model: &mut MsflModel, ds: &Dataset, max_rank: usize, batch_size: usize) -> Result<RankingResult> {
    let query = ds.manifest.split(Split::Query);
    let gallery = ds.manifest.split(Split::Gallery);
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Data("dataset has no query or gallery images".into()));
    }
    let q = embed_records(model, ds, &query, batch_size)?;
    let g = embed_records(model, ds, &gallery, batch_size)?;
    let dist = eval::distance_matrix(&q, &g)?;
    let meta = |rs: &[&data::Record]| -> Vec<ItemMeta> {
        rs.iter()
            .map(|r| ItemMeta {
                identity: r.identity,
                camera: r.camera,
            })
            .collect()
    };
    eval::evaluate(&dist.matrix, &meta(&query), &meta(&gallery), max_rank)
}

/// Bitwise equality of parameters and batch-norm statistics.
pub fn params_bit_equal(a: &MsflModel, b: &MsflModel) -> bool {
    let bits = |m: &MsflModel| -> Vec<u64> {
        m.store
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|x| x.to_bits()))
            .chain(m.store.buffers().iter().flat_map(|b| b.value.data().iter().map(|x| x.to_bits())))
            .collect()
    };
    bits(a) == bits(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Parameter {
        let value = Tensor::new(vec![1], vec![x]).unwrap();
        Parameter {
            name: "x".into(),
            grad: value.zeros_like(),
            value,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = vec![scalar_param(1.5)];
        let mut adam = AdamState::new(&ps, AdamConfig::default(), 0.1);
        for _ in 0..5 {
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps[0].value.data(), &[1.5]);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut ps = vec![scalar_param(0.0)];
        ps[0].grad = Tensor::new(vec![1], vec![-3.0]).unwrap();
        let mut adam = AdamState::new(&ps, AdamConfig::default(), 0.01);
        let mut prev = 0.0;
        for _ in 0..200 {
            adam.step(&mut ps).unwrap();
            let x = ps[0].value.data()[0];
            assert!(((x - prev) - 0.01).abs() < 1e-8);
            prev = x;
        }
    }

    #[test]
    fn quadratic_decreases() {
        // From x = 5 the steps stay near lr and never overshoot the minimum
        // within 50 steps (from x = 1 momentum overshoots at step 12).
        let mut ps = vec![scalar_param(5.0)];
        let mut adam = AdamState::new(&ps, AdamConfig::default(), 0.1);
        let mut f = 25.0;
        for _ in 0..50 {
            let x = ps[0].value.data()[0];
            ps[0].grad = Tensor::new(vec![1], vec![2.0 * x]).unwrap();
            adam.step(&mut ps).unwrap();
            let x = ps[0].value.data()[0];
            assert!(x * x < f, "{} !< {f}", x * x);
            f = x * x;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut ps = vec![scalar_param(1.0), scalar_param(2.0)];
        ps[1].grad = ps[1].value.map(|_| f64::NAN);
        ps[0].grad = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut adam = AdamState::new(&ps, AdamConfig::default(), 0.1);
        let err = adam.step(&mut ps).unwrap_err();
        assert!(err.is_non_finite());
        assert_eq!(adam.step, 0);
        assert_eq!(ps[0].value.data(), &[1.0]);
    }

    #[test]
    fn step_schedule() {
        let s = Schedule::new(3.5e-4, 0.1, vec![40, 70], 120).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 3.5e-4);
        assert_eq!(s.lr_at(39).unwrap(), 3.5e-4);
        assert!((s.lr_at(40).unwrap() - 3.5e-5).abs() < 1e-18);
        assert!((s.lr_at(70).unwrap() - 3.5e-6).abs() < 1e-18);
        assert!((s.lr_at(119).unwrap() - 3.5e-6).abs() < 1e-18);
        assert!(s.lr_at(120).is_err());
        assert!(Schedule::new(3.5e-4, 0.1, vec![70, 40], 120).is_err());
        assert!(Schedule::new(3.5e-4, 0.1, vec![40, 120], 120).is_err());
    }

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ExperimentConfig::default();
        let mut model = MsflModel::new(crate::net::tests::tiny(3), 1).unwrap();
        let mut adam = AdamState::new(model.store.params(), cfg.adam(), 1e-3);
        for p in model.store.params_mut() {
            p.grad = p.value.map(|x| x * 0.5 + 0.1);
        }
        adam.step(model.store.params_mut()).unwrap();
        Checkpoint::capture(&model, &adam, &cfg, 3)
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = sample_checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).unwrap_err().to_string().contains("magic"));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).unwrap_err().to_string().contains("version"));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn restore_checks_layout() {
        let c = sample_checkpoint();
        let mut other = MsflModel::new(crate::net::tests::tiny(4), 1).unwrap();
        assert!(c.restore_into(&mut other).is_err());
        let mut same = MsflModel::new(crate::net::tests::tiny(3), 9).unwrap();
        c.restore_into(&mut same).unwrap();
        assert_eq!(same.store.params()[0].value, c.params[0].1);
    }
}
