//! Experiment configuration.
//!
//! A TOML document with the sections below; every key is optional and
//! defaults to the desk-scale toy setup. Command-line overrides use dotted
//! paths, `model.csip=off`, `msgr.sigma=0.01`, `msgr.targets=input,c2`.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/toy"
//!
//! [data]
//! root = "data/toy"
//!
//! [model]
//! input_height = 64
//! input_width = 32
//! stem_width = 16
//! stage_widths = [16, 32, 64, 128]
//! stage_blocks = [1, 1, 1, 1]
//! lateral_width = 32
//! embedding_dim = 64
//! csip = true
//! lateral = true
//! msff = true
//! last_stride_one = false
//! fuse_from = 0         # csip off: finest stage fused directly (0 = none)
//!
//! [msgr]
//! p = "2"               # 1, 2 or "inf"
//! sigma = 0.01
//! targets = ["input", "c2", "c3"]
//! mode = "penalty"      # penalty | adversarial-step | off
//!
//! [batch]
//! p = 8
//! k = 4
//!
//! [loss.triplet]
//! enabled = false
//! margin = 0.3
//!
//! [schedule]
//! base_lr = 0.00035
//! decay_factor = 0.1
//! decay_epochs = [40, 70]
//! epochs = 120
//! scale = 0.25          # epochs and decay points are multiplied and floored
//!
//! [optim]
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//!
//! [train]
//! checkpoint_every = 5  # epochs; 0 keeps only the final checkpoint
//!
//! [eval]
//! max_rank = 10
//! batch_size = 32
//! ```
//!
//! Unknown keys and type mismatches are collected and reported together.
//! Booleans also accept `on`/`off`; string lists accept a comma-separated
//! string.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::msgr::{NormOrder, RegMode, RegularizerConfig, Target};
use crate::net::ModelConfig;
use crate::objective::{PkSpec, DEFAULT_TRIPLET_MARGIN};
use crate::train::{AdamConfig, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub data: DataSection,
    pub model: ModelSection,
    pub msgr: MsgrSection,
    pub batch: BatchSection,
    pub loss: LossSection,
    pub schedule: ScheduleSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub root: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub input_height: usize,
    pub input_width: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub lateral_width: usize,
    pub embedding_dim: usize,
    pub csip: bool,
    pub lateral: bool,
    pub msff: bool,
    pub last_stride_one: bool,
    pub fuse_from: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsgrSection {
    pub p: NormOrder,
    pub sigma: f64,
    pub targets: Vec<Target>,
    pub mode: RegMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSection {
    pub p: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSection {
    pub triplet: TripletSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletSection {
    pub enabled: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub max_rank: usize,
    pub batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::desk(1);
        let r = RegularizerConfig::default();
        ExperimentConfig {
            seed: 0,
            output_dir: "runs/default".into(),
            data: DataSection {
                root: "data/toy".into(),
            },
            model: ModelSection {
                input_height: m.input_height,
                input_width: m.input_width,
                stem_width: m.stem_width,
                stage_widths: m.stage_widths.to_vec(),
                stage_blocks: m.stage_blocks.to_vec(),
                lateral_width: m.lateral_width,
                embedding_dim: m.embedding_dim,
                csip: m.csip,
                lateral: m.lateral,
                msff: m.msff,
                last_stride_one: m.last_stride_one,
                fuse_from: m.fuse_from,
            },
            msgr: MsgrSection {
                p: r.p,
                sigma: r.sigma,
                targets: r.targets,
                mode: r.mode,
            },
            batch: BatchSection { p: 8, k: 4 },
            loss: LossSection {
                triplet: TripletSection {
                    enabled: false,
                    margin: DEFAULT_TRIPLET_MARGIN,
                },
            },
            schedule: ScheduleSection {
                base_lr: 3.5e-4,
                decay_factor: 0.1,
                decay_epochs: vec![40, 70],
                epochs: 120,
                scale: 0.25,
            },
            optim: OptimSection {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            train: TrainSection { checkpoint_every: 5 },
            eval: EvalSection {
                max_rank: 10,
                batch_size: 32,
            },
        }
    }
}

/// Flatten nested tables to dotted keys; arrays are leaves.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, x) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = toml::map::Map::new();
    for (k, v) in flat {
        let parts: Vec<&str> = k.split('.').collect();
        let mut table = &mut root;
        for p in &parts[..parts.len() - 1] {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(toml::map::Map::new()))
                .as_table_mut()
                .expect("schema keys never collide with tables");
        }
        table.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Table(root)
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Coerce `given` to the type of the schema value `like`, or explain why not.
fn coerce(key: &str, like: &Value, given: Value) -> std::result::Result<Value, String> {
    let mismatch = |g: &Value| {
        format!(
            "`{key}`: expected {}, got {} {}",
            type_name(like),
            type_name(g),
            g
        )
    };
    match (like, given) {
        (Value::Integer(_), Value::Integer(i)) if i >= 0 => Ok(Value::Integer(i)),
        (Value::Integer(_), g @ Value::Integer(_)) => Err(format!("`{key}`: must be >= 0, got {g}")),
        (Value::Float(_), Value::Float(f)) => Ok(Value::Float(f)),
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Boolean(_), Value::Boolean(b)) => Ok(Value::Boolean(b)),
        (Value::Boolean(_), Value::String(s)) => match s.to_ascii_lowercase().as_str() {
            "on" | "true" | "yes" => Ok(Value::Boolean(true)),
            "off" | "false" | "no" => Ok(Value::Boolean(false)),
            _ => Err(mismatch(&Value::String(s))),
        },
        (Value::String(_), Value::String(s)) => Ok(Value::String(s)),
        (Value::String(_), Value::Integer(i)) => Ok(Value::String(i.to_string())),
        (Value::String(_), Value::Float(f)) => Ok(Value::String(if f.fract() == 0.0 && f.is_finite() {
            format!("{}", f as i64)
        } else {
            f.to_string()
        })),
        (Value::Array(items), Value::String(s)) => {
            let parts: Vec<Value> = s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| parse_scalar(p))
                .collect();
            coerce(key, &Value::Array(items.clone()), Value::Array(parts))
        }
        (Value::Array(items), Value::Array(given)) => {
            let Some(elem) = items.first() else {
                return Ok(Value::Array(given));
            };
            given
                .into_iter()
                .enumerate()
                .map(|(i, g)| coerce(&format!("{key}[{i}]"), elem, g))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        (_, g) => Err(mismatch(&g)),
    }
}

/// A command-line value: TOML syntax when it parses, else a bare string.
fn parse_scalar(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Split `key=value` overrides.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for item in items {
        match item.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => out.push((k.trim().to_string(), parse_scalar(v.trim()))),
            _ => errs.push(format!("override {item:?} is not key=value")),
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(errs))
    }
}

impl ExperimentConfig {
    /// Resolve a TOML document plus overrides against the defaults,
    /// reporting every unknown key, type mismatch and invalid value.
    pub fn resolve(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let defaults = Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
        let mut schema = BTreeMap::new();
        flatten("", &defaults, &mut schema);

        let doc: Value = toml::from_str::<toml::Table>(text)
            .map(Value::Table)
            .map_err(|e| Error::Config(vec![format!("config syntax: {}", e.message())]))?;
        let mut given = BTreeMap::new();
        flatten("", &doc, &mut given);
        for (k, v) in overrides {
            given.insert(k.clone(), v.clone());
        }

        let mut errs = Vec::new();
        let mut merged = schema.clone();
        for (k, v) in given {
            match schema.get(&k) {
                None => errs.push(format!("unknown key `{k}`")),
                Some(like) => match coerce(&k, like, v) {
                    Ok(v) => {
                        merged.insert(k, v);
                    }
                    Err(e) => errs.push(e),
                },
            }
        }
        // Enum-valued strings are checked before typed deserialization so
        // that every bad value is reported.
        for (k, check) in [
            ("msgr.p", (|s: &str| s.parse::<NormOrder>().err()) as fn(&str) -> Option<String>),
            ("msgr.mode", |s: &str| s.parse::<RegMode>().err()),
        ] {
            if let Some(Value::String(s)) = merged.get(k) {
                if let Some(e) = check(s) {
                    errs.push(format!("`{k}`: {e}"));
                    merged.insert(k.into(), schema[k].clone());
                }
            }
        }
        if let Some(Value::Array(items)) = merged.get("msgr.targets").cloned() {
            let mut ok = Vec::new();
            for it in items {
                match it.as_str().map(|s| s.parse::<Target>()) {
                    Some(Ok(_)) => ok.push(it),
                    Some(Err(e)) => errs.push(format!("`msgr.targets`: {e}")),
                    None => errs.push(format!("`msgr.targets`: expected strings, got {it}")),
                }
            }
            merged.insert("msgr.targets".into(), Value::Array(ok));
        }

        let cfg: ExperimentConfig = unflatten(&merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        errs.extend(cfg.validate());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::resolve(&text, overrides)
    }

    /// Semantic checks on an already typed config.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.model.stage_widths.len() != 4 || self.model.stage_blocks.len() != 4 {
            errs.push("model.stage_widths and model.stage_blocks need exactly 4 entries".into());
        } else {
            errs.extend(self.model_config(1).validate());
        }
        errs.extend(self.regularizer().validate());
        errs.extend(self.pk().validate());
        if self.loss.triplet.margin < 0.0 || !self.loss.triplet.margin.is_finite() {
            errs.push("loss.triplet.margin must be finite and >= 0".into());
        }
        if let Err(e) = self.schedule() {
            errs.push(e);
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            errs.push("optim: beta1, beta2 must be in [0, 1) and eps > 0".into());
        }
        if self.eval.max_rank == 0 || self.eval.batch_size == 0 {
            errs.push("eval.max_rank and eval.batch_size must be positive".into());
        }
        if self.output_dir.is_empty() {
            errs.push("output_dir must not be empty".into());
        }
        errs
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let m = &self.model;
        let four = |v: &[usize]| {
            let mut a = [0; 4];
            for (x, y) in a.iter_mut().zip(v) {
                *x = *y;
            }
            a
        };
        ModelConfig {
            input_height: m.input_height,
            input_width: m.input_width,
            in_channels: 3,
            stem_width: m.stem_width,
            stage_widths: four(&m.stage_widths),
            stage_blocks: four(&m.stage_blocks),
            lateral_width: m.lateral_width,
            embedding_dim: m.embedding_dim,
            num_classes,
            csip: m.csip,
            lateral: m.lateral,
            msff: m.msff,
            last_stride_one: m.last_stride_one,
            fuse_from: m.fuse_from,
        }
    }

    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig {
            p: self.msgr.p,
            sigma: self.msgr.sigma,
            targets: self.msgr.targets.clone(),
            mode: self.msgr.mode,
        }
    }

    pub fn pk(&self) -> PkSpec {
        PkSpec {
            p: self.batch.p,
            k: self.batch.k,
        }
    }

    /// The effective (scaled) schedule.
    pub fn schedule(&self) -> std::result::Result<Schedule, String> {
        let s = &self.schedule;
        if !(s.scale > 0.0 && s.scale <= 1.0) {
            return Err(format!("schedule.scale must be in (0, 1], got {}", s.scale));
        }
        let scaled = |e: usize| (e as f64 * s.scale).floor() as usize;
        Schedule::new(
            s.base_lr,
            s.decay_factor,
            s.decay_epochs.iter().map(|&e| scaled(e)).collect(),
            scaled(s.epochs),
        )
        .map_err(|e| e.to_string())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    /// The fully resolved document; resolving it again yields `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable hash of the resolved document.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(items: &[&str]) -> Vec<(String, Value)> {
        parse_overrides(&items.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn defaults_resolve_and_round_trip() {
        let c = ExperimentConfig::resolve("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let again = ExperimentConfig::resolve(&c.to_toml(), &[]).unwrap();
        assert_eq!(again, c);
        let s = c.schedule().unwrap();
        assert_eq!((s.epochs, s.decay_epochs.clone()), (30, vec![10, 17]));
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::resolve(
            "[msgr]\nsigma = 0.5\n",
            &sets(&["msgr.sigma=0.01", "model.csip=off", "model.msff=off", "msgr.mode=off", "msgr.p=inf", "msgr.targets=input,c4"]),
        )
        .unwrap();
        assert_eq!(c.msgr.sigma, 0.01);
        assert!(!c.model.csip && !c.model.msff);
        assert_eq!(c.msgr.mode, RegMode::Off);
        assert_eq!(c.msgr.p, NormOrder::Inf);
        assert_eq!(c.msgr.targets, vec![Target::Input, Target::C4]);
        assert!(c.to_toml().contains("sigma = 0.01"));
        let c = ExperimentConfig::resolve("[msgr]\np = 1\n", &[]).unwrap();
        assert_eq!(c.msgr.p, NormOrder::One);
    }

    #[test]
    fn every_error_is_listed() {
        let err = ExperimentConfig::resolve(
            "bogus = 1\n[model]\ncsip = \"maybe\"\ninput_height = 250\n[msgr]\np = 3\ntargets = [\"c9\"]\n",
            &sets(&["batch.p=1", "schedule.nope=2"]),
        )
        .unwrap_err();
        let Error::Config(list) = err else { panic!() };
        let text = list.join("\n");
        for needle in ["`bogus`", "`model.csip`", "`schedule.nope`", "msgr.p", "c9", "batch.p", "multiple of 32"] {
            assert!(text.contains(needle), "missing {needle} in\n{text}");
        }
    }

    #[test]
    fn schedule_validation() {
        let err = ExperimentConfig::resolve("[schedule]\ndecay_epochs = [70, 40]\n", &[]);
        assert!(err.is_err());
        let err = ExperimentConfig::resolve("[schedule]\nscale = 0.0\n", &[]);
        assert!(err.is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), ExperimentConfig::default().fingerprint());
    }
}
