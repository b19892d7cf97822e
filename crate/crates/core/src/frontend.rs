//! Modality frontends: frequency-encoded geometry features, a pluggable
//! per-pixel segmenter providing semantic features from a trainable
//! class-embedding table, and the appearance MLP mapping semantic features
//! to appearance features.

use crate::autodiff::{Graph, Var};
use crate::config::{RunConfig, SegmenterKind};
use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::params::{init_mlp, mlp_forward, ParamStore};
use crate::scene_grid::{GridMeta, FEATURE_DIM};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::rc::Rc;

pub const APPEARANCE_MLP: &str = "net.h";
pub const GEOMETRY_MLP: &str = "net.e";
pub const CLASS_EMBED: &str = "net.class_embed";
pub const MLP_HIDDEN: usize = 32;

/// Margin used for the oracle's one-hot-correct logits.
const ORACLE_LOGIT_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyConfig {
    pub count: usize,
}

impl FrequencyConfig {
    pub fn new(count: usize) -> Result<Self> {
        if count < 1 {
            return Err(Error::Config("frequency count must be >= 1".into()));
        }
        Ok(FrequencyConfig { count })
    }

    pub fn output_dim(&self) -> usize {
        6 * self.count
    }
}

/// γ(p): per component, interleaved `sin(2^l π p), cos(2^l π p)` blocks.
/// `points` is `(P, 3)`, pre-normalized to [-1, 1]; output is `(P, 6L)`.
pub fn freq_encode(g: &mut Graph, points: Var, cfg: FrequencyConfig) -> Var {
    let mut parts = Vec::with_capacity(2 * cfg.count);
    for l in 0..cfg.count {
        let scaled = g.scale(points, (1u64 << l) as f64 * std::f64::consts::PI);
        parts.push(g.sin(scaled));
        parts.push(g.cos(scaled));
    }
    g.concat_cols(&parts)
}

/// Map world points into the [-1, 1]^3 encoding domain of the scene bbox.
pub fn normalize_points(g: &mut Graph, points_world: Var, meta: &GridMeta) -> Var {
    let mut parts = Vec::with_capacity(3);
    for d in 0..3 {
        let x = g.slice_cols(points_world, d, d + 1);
        let extent = meta.bbox_max[d] - meta.bbox_min[d];
        let x = g.scale(x, 2.0 / extent);
        parts.push(g.add_const(x, -2.0 * meta.bbox_min[d] / extent - 1.0));
    }
    g.concat_cols(&parts)
}

/// Initialize H_θ, E_θ and the class-embedding table.
pub fn init_frontend(store: &mut ParamStore, cfg: &RunConfig, l_cls: usize, rng: &mut ChaCha8Rng) {
    init_mlp(store, APPEARANCE_MLP, FEATURE_DIM, MLP_HIDDEN, FEATURE_DIM, rng);
    let freq = FrequencyConfig::new(cfg.freq_count).expect("validated config");
    init_mlp(store, GEOMETRY_MLP, freq.output_dim(), MLP_HIDDEN, FEATURE_DIM, rng);
    let table = Array2::from_shape_fn((l_cls, FEATURE_DIM), |_| rng.gen_range(-0.5..0.5));
    store.insert(CLASS_EMBED, table);
}

/// f_a = H_θ(f_s).
pub fn appearance_from_semantic(g: &mut Graph, vars: &BTreeMap<String, Var>, f_s: Var) -> Var {
    mlp_forward(g, vars, APPEARANCE_MLP, f_s)
}

/// f_g = E_θ(γ(p)) for normalized points.
pub fn geometry_feature(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    points_norm: Var,
    cfg: FrequencyConfig,
) -> Var {
    let enc = freq_encode(g, points_norm, cfg);
    mlp_forward(g, vars, GEOMETRY_MLP, enc)
}

/// In-graph semantic feature lookup for a list of class IDs.
pub fn embed_classes(g: &mut Graph, vars: &BTreeMap<String, Var>, classes: &[usize]) -> Var {
    g.gather_rows(vars[CLASS_EMBED], Rc::new(classes.to_vec()))
}

/// Per-pixel segmenter decisions for one frame.
#[derive(Debug, Clone)]
pub struct SegLabels {
    /// H×W predicted class IDs.
    pub classes: Array2<i32>,
    /// H×W×L_cls logits.
    pub logits: Array3<f64>,
}

/// Pluggable per-frame segmenter.
pub trait Segmenter {
    fn segment(&self, frame: &Frame, l_cls: usize) -> Result<SegLabels>;
}

/// Ground-truth oracle, optionally corrupted by a label-noise rate. Noise is
/// deterministic per frame index.
pub struct OracleSegmenter {
    pub noise_rate: f64,
    pub noise_seed: u64,
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, frame: &Frame, l_cls: usize) -> Result<SegLabels> {
        if frame.semantic.iter().all(|&c| c < 0) {
            return Err(Error::Config(format!(
                "oracle segmenter selected but frame {} lacks a semantic channel",
                frame.frame_index
            )));
        }
        let (h, w) = frame.semantic.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.noise_seed ^ (frame.frame_index as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let mut classes = frame.semantic.clone();
        let mut logits = Array3::zeros((h, w, l_cls));
        for v in 0..h {
            for u in 0..w {
                let mut c = classes[[v, u]];
                if c < 0 {
                    continue;
                }
                if self.noise_rate > 0.0 && rng.gen_bool(self.noise_rate) {
                    // draw a different class uniformly
                    let shift = rng.gen_range(1..l_cls as i32);
                    c = (c + shift) % l_cls as i32;
                    classes[[v, u]] = c;
                }
                logits[[v, u, c as usize]] = ORACLE_LOGIT_MARGIN;
            }
        }
        Ok(SegLabels { classes, logits })
    }
}

/// Build the segmenter selected by the config.
pub fn make_segmenter(cfg: &RunConfig) -> Result<Box<dyn Segmenter>> {
    match cfg.segmenter {
        SegmenterKind::Oracle => Ok(Box::new(OracleSegmenter { noise_rate: 0.0, noise_seed: cfg.seed })),
        SegmenterKind::OracleNoisy => {
            Ok(Box::new(OracleSegmenter { noise_rate: cfg.label_noise, noise_seed: cfg.seed }))
        }
        SegmenterKind::External => Err(Error::Config(
            "segmenter `external` must be supplied programmatically via the library API".into(),
        )),
    }
}
