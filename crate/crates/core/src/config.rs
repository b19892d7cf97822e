//! Run configuration: flat `key = value` text files, CLI overrides with
//! flag > file > default precedence, strict unknown-key rejection, and a
//! self-round-tripping resolved form.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Default => write!(f, "default"),
            Provenance::File => write!(f, "file"),
            Provenance::Flag => write!(f, "flag"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmenterKind {
    Oracle,
    OracleNoisy,
    External,
}

/// All runtime hyperparameters with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // scene representation
    pub coarse_cell: f64,
    pub fine_cell: f64,
    pub bbox_margin: f64,
    pub init_scale: f64,
    // sampling / rendering
    pub truncation: f64,
    pub n_stratified: usize,
    pub n_surface: usize,
    pub near: f64,
    /// 0 means "derive from scene diagonal".
    pub far: f64,
    pub freq_count: usize,
    // optimization
    pub m_map: usize,
    pub m_track: usize,
    pub i_map: usize,
    pub i_track: usize,
    pub keyframe_every: usize,
    pub map_window: usize,
    pub lr_planes: f64,
    pub lr_nets: f64,
    pub lr_pose_rot: f64,
    pub lr_pose_trans: f64,
    // loss weights
    pub lambda_fs: f64,
    pub lambda_tr: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    // ablation switches
    pub switch_hsm: bool,
    pub switch_fl: bool,
    pub switch_dec: bool,
    pub switch_ff: bool,
    // frontend
    pub segmenter: SegmenterKind,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            coarse_cell: 0.24,
            fine_cell: 0.06,
            bbox_margin: 0.10,
            init_scale: 0.01,
            truncation: 0.06,
            n_stratified: 16,
            n_surface: 8,
            near: 0.05,
            far: 0.0,
            freq_count: 6,
            m_map: 1024,
            m_track: 512,
            i_map: 15,
            i_track: 15,
            keyframe_every: 10,
            map_window: 5,
            lr_planes: 1e-2,
            lr_nets: 1e-3,
            lr_pose_rot: 1e-3,
            lr_pose_trans: 3e-3,
            lambda_fs: 1.0,
            lambda_tr: 10.0,
            lambda_s: 0.1,
            lambda_f: 0.5,
            lambda_c: 1.0,
            lambda_d: 0.1,
            switch_hsm: true,
            switch_fl: true,
            switch_dec: true,
            switch_ff: true,
            segmenter: SegmenterKind::Oracle,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "coarse_cell",
    "fine_cell",
    "bbox_margin",
    "init_scale",
    "truncation",
    "n_stratified",
    "n_surface",
    "near",
    "far",
    "freq_count",
    "m_map",
    "m_track",
    "i_map",
    "i_track",
    "keyframe_every",
    "map_window",
    "lr_planes",
    "lr_nets",
    "lr_pose_rot",
    "lr_pose_trans",
    "lambda_fs",
    "lambda_tr",
    "lambda_s",
    "lambda_f",
    "lambda_c",
    "lambda_d",
    "switch_hsm",
    "switch_fl",
    "switch_dec",
    "switch_ff",
    "segmenter",
    "label_noise",
    "seed",
];

/// A [`RunConfig`] plus the provenance of every key.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub cfg: RunConfig,
    pub provenance: BTreeMap<String, Provenance>,
}

impl RunConfig {
    fn get(&self, key: &str) -> String {
        match key {
            "coarse_cell" => self.coarse_cell.to_string(),
            "fine_cell" => self.fine_cell.to_string(),
            "bbox_margin" => self.bbox_margin.to_string(),
            "init_scale" => self.init_scale.to_string(),
            "truncation" => self.truncation.to_string(),
            "n_stratified" => self.n_stratified.to_string(),
            "n_surface" => self.n_surface.to_string(),
            "near" => self.near.to_string(),
            "far" => self.far.to_string(),
            "freq_count" => self.freq_count.to_string(),
            "m_map" => self.m_map.to_string(),
            "m_track" => self.m_track.to_string(),
            "i_map" => self.i_map.to_string(),
            "i_track" => self.i_track.to_string(),
            "keyframe_every" => self.keyframe_every.to_string(),
            "map_window" => self.map_window.to_string(),
            "lr_planes" => self.lr_planes.to_string(),
            "lr_nets" => self.lr_nets.to_string(),
            "lr_pose_rot" => self.lr_pose_rot.to_string(),
            "lr_pose_trans" => self.lr_pose_trans.to_string(),
            "lambda_fs" => self.lambda_fs.to_string(),
            "lambda_tr" => self.lambda_tr.to_string(),
            "lambda_s" => self.lambda_s.to_string(),
            "lambda_f" => self.lambda_f.to_string(),
            "lambda_c" => self.lambda_c.to_string(),
            "lambda_d" => self.lambda_d.to_string(),
            "switch_hsm" => self.switch_hsm.to_string(),
            "switch_fl" => self.switch_fl.to_string(),
            "switch_dec" => self.switch_dec.to_string(),
            "switch_ff" => self.switch_ff.to_string(),
            "segmenter" => match self.segmenter {
                SegmenterKind::Oracle => "oracle".into(),
                SegmenterKind::OracleNoisy => "oracle_noisy".into(),
                SegmenterKind::External => "external".into(),
            },
            "label_noise" => self.label_noise.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("get: unknown key {key}"),
        }
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |why: &str| {
            Error::Config(format!("key `{key}` (line {line}): {why}, got `{value}`"))
        };
        macro_rules! num {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad("invalid number"))?
            };
        }
        match key {
            "coarse_cell" => self.coarse_cell = num!(f64),
            "fine_cell" => self.fine_cell = num!(f64),
            "bbox_margin" => self.bbox_margin = num!(f64),
            "init_scale" => self.init_scale = num!(f64),
            "truncation" => self.truncation = num!(f64),
            "n_stratified" => self.n_stratified = num!(usize),
            "n_surface" => self.n_surface = num!(usize),
            "near" => self.near = num!(f64),
            "far" => self.far = num!(f64),
            "freq_count" => self.freq_count = num!(usize),
            "m_map" => self.m_map = num!(usize),
            "m_track" => self.m_track = num!(usize),
            "i_map" => self.i_map = num!(usize),
            "i_track" => self.i_track = num!(usize),
            "keyframe_every" => self.keyframe_every = num!(usize),
            "map_window" => self.map_window = num!(usize),
            "lr_planes" => self.lr_planes = num!(f64),
            "lr_nets" => self.lr_nets = num!(f64),
            "lr_pose_rot" => self.lr_pose_rot = num!(f64),
            "lr_pose_trans" => self.lr_pose_trans = num!(f64),
            "lambda_fs" => self.lambda_fs = num!(f64),
            "lambda_tr" => self.lambda_tr = num!(f64),
            "lambda_s" => self.lambda_s = num!(f64),
            "lambda_f" => self.lambda_f = num!(f64),
            "lambda_c" => self.lambda_c = num!(f64),
            "lambda_d" => self.lambda_d = num!(f64),
            "switch_hsm" => self.switch_hsm = parse_bool(value).ok_or_else(|| bad("expected true/false"))?,
            "switch_fl" => self.switch_fl = parse_bool(value).ok_or_else(|| bad("expected true/false"))?,
            "switch_dec" => self.switch_dec = parse_bool(value).ok_or_else(|| bad("expected true/false"))?,
            "switch_ff" => self.switch_ff = parse_bool(value).ok_or_else(|| bad("expected true/false"))?,
            "segmenter" => {
                self.segmenter = match value {
                    "oracle" => SegmenterKind::Oracle,
                    "oracle_noisy" => SegmenterKind::OracleNoisy,
                    "external" => SegmenterKind::External,
                    _ => return Err(bad("expected oracle | oracle_noisy | external")),
                }
            }
            "label_noise" => self.label_noise = num!(f64),
            "seed" => self.seed = num!(u64),
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key `{key}` (line {line})"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.coarse_cell > 0.0 && self.fine_cell > 0.0, "cell sizes must be positive")?;
        check(self.fine_cell < self.coarse_cell, "fine_cell must be smaller than coarse_cell")?;
        check(self.truncation > 0.0, "truncation must be positive")?;
        check(self.n_stratified >= 2, "n_stratified must be >= 2")?;
        check(self.near > 0.0, "near must be positive")?;
        check(self.far == 0.0 || self.far > self.near, "far must exceed near (or be 0 for auto)")?;
        check(self.freq_count >= 1, "freq_count must be >= 1")?;
        check(self.m_map > 0 && self.m_track > 0, "pixel batch sizes must be positive")?;
        check(self.i_map > 0, "i_map must be positive")?;
        check(self.keyframe_every > 0, "keyframe_every must be positive")?;
        check(self.map_window >= 1, "map_window must be >= 1")?;
        check(
            self.lr_planes > 0.0 && self.lr_nets > 0.0 && self.lr_pose_rot > 0.0 && self.lr_pose_trans > 0.0,
            "learning rates must be positive",
        )?;
        let lambdas = [
            self.lambda_fs,
            self.lambda_tr,
            self.lambda_s,
            self.lambda_f,
            self.lambda_c,
            self.lambda_d,
        ];
        check(lambdas.iter().all(|l| *l >= 0.0), "loss weights must be non-negative")?;
        check(lambdas.iter().any(|l| *l > 0.0), "at least one loss weight must be positive")?;
        check((0.0..=1.0).contains(&self.label_noise), "label_noise must be in [0,1]")?;
        check(self.init_scale > 0.0, "init_scale must be positive")?;
        Ok(())
    }

    /// Effective truncation-region loss weights with ablation switches
    /// applied: FL off forces `lambda_f = 0`.
    pub fn effective_lambda_f(&self) -> f64 {
        if self.switch_fl {
            self.lambda_f
        } else {
            0.0
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "on" => Some(true),
        "false" | "0" | "off" => Some(false),
        _ => None,
    }
}

fn split_line(raw: &str) -> Option<(&str, &str)> {
    let line = raw.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

/// Parse a config file (or pure defaults when `file` is `None`) and apply
/// `key=value` CLI overrides on top.
pub fn parse_config(file: Option<&Path>, cli_overrides: &[String]) -> Result<ResolvedConfig> {
    let mut cfg = RunConfig::default();
    let mut provenance: BTreeMap<String, Provenance> =
        CONFIG_KEYS.iter().map(|k| (k.to_string(), Provenance::Default)).collect();

    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let Some((k, v)) = split_line(raw) else { continue };
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::Config(format!(
                    "unknown config key `{k}` (line {})",
                    lineno + 1
                )));
            }
            cfg.set(k, v, lineno + 1)?;
            provenance.insert(k.to_string(), Provenance::File);
        }
    }

    for (i, ov) in cli_overrides.iter().enumerate() {
        let Some((k, v)) = split_line(ov) else {
            return Err(Error::Config(format!("malformed override `{ov}`")));
        };
        if !CONFIG_KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown config key `{k}` (override {i})")));
        }
        cfg.set(k, v, 0)?;
        provenance.insert(k.to_string(), Provenance::Flag);
    }

    cfg.validate()?;
    Ok(ResolvedConfig { cfg, provenance })
}

impl ResolvedConfig {
    pub fn from_defaults() -> Self {
        ResolvedConfig {
            cfg: RunConfig::default(),
            provenance: CONFIG_KEYS.iter().map(|k| (k.to_string(), Provenance::Default)).collect(),
        }
    }

    /// Serialized form written to `config_resolved.txt`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let prov = self.provenance.get(*key).copied().unwrap_or(Provenance::Default);
            out.push_str(&format!("{key} = {}  # source={prov}\n", self.cfg.get(key)));
        }
        out
    }

    /// Parses the output of [`ResolvedConfig::to_text`], restoring provenance.
    pub fn from_resolved_text(text: &str) -> Result<ResolvedConfig> {
        let mut cfg = RunConfig::default();
        let mut provenance = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let prov = if raw.contains("# source=flag") {
                Provenance::Flag
            } else if raw.contains("# source=file") {
                Provenance::File
            } else {
                Provenance::Default
            };
            let Some((k, v)) = split_line(raw) else { continue };
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown config key `{k}` (line {})", lineno + 1)));
            }
            cfg.set(k, v, lineno + 1)?;
            provenance.insert(k.to_string(), prov);
        }
        cfg.validate()?;
        Ok(ResolvedConfig { cfg, provenance })
    }
}
