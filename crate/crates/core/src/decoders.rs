//! Fusion-based decoders: TSDF from geometry features, color from
//! [geometry | appearance | semantic], semantic logits from
//! [semantic | geometry], plus the learnable density sharpness scalars.
//!
//! One-way correlation is realized as gradient detachment of the auxiliary
//! modality inputs at the decoder boundary: color losses never reach the
//! semantic or geometry planes, semantic losses never reach the geometry
//! planes.

use crate::autodiff::{Graph, Var};
use crate::params::{init_mlp, mlp_forward, ParamStore};
use crate::scene_grid::FEATURE_DIM;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const SDF_DECODER: &str = "dec.sdf";
pub const COLOR_DECODER: &str = "dec.color";
pub const SEMANTIC_DECODER: &str = "dec.sem";
pub const ALPHA_G: &str = "dec.alpha_g_log";
pub const ALPHA_S: &str = "dec.alpha_s_log";

pub const SDF_COLOR_HIDDEN: usize = 32;
pub const SEMANTIC_HIDDEN: usize = 256;

/// Initial sharpness (truncation-scaled units) before the log-parameterization.
pub const ALPHA_INIT: f64 = 0.05;

pub fn init_decoders(store: &mut ParamStore, l_cls: usize, rng: &mut ChaCha8Rng) {
    init_mlp(store, SDF_DECODER, FEATURE_DIM, SDF_COLOR_HIDDEN, 1, rng);
    init_mlp(store, COLOR_DECODER, 3 * FEATURE_DIM, SDF_COLOR_HIDDEN, 3, rng);
    init_mlp(store, SEMANTIC_DECODER, 2 * FEATURE_DIM, SEMANTIC_HIDDEN, l_cls, rng);
    store.insert(ALPHA_G, Array2::from_elem((1, 1), ALPHA_INIT.ln()));
    store.insert(ALPHA_S, Array2::from_elem((1, 1), ALPHA_INIT.ln()));
}

/// Positivity-preserving read of α_g (`"g"`) or α_s (`"s"`).
pub fn alpha(g: &mut Graph, vars: &BTreeMap<String, Var>, which: &str) -> Var {
    let name = if which == "g" { ALPHA_G } else { ALPHA_S };
    g.exp(vars[name])
}

/// TSDF prediction in truncation-normalized units, `(P, 1)`.
pub fn decode_sdf(g: &mut Graph, vars: &BTreeMap<String, Var>, geo_feat: Var) -> Var {
    mlp_forward(g, vars, SDF_DECODER, geo_feat)
}

/// RGB prediction `(P, 3)`. Geometry and semantic features enter detached;
/// with `dec` disabled they are replaced by zero blocks (single-modality
/// decoding from appearance alone).
pub fn decode_color(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    geo_feat: Var,
    app_feat: Var,
    sem_feat: Var,
    dec: bool,
) -> Var {
    let p = g.shape(app_feat).0;
    let (geo_in, sem_in) = if dec {
        (g.detach(geo_feat), g.detach(sem_feat))
    } else {
        let z1 = g.constant(Array2::zeros((p, FEATURE_DIM)));
        let z2 = g.constant(Array2::zeros((p, FEATURE_DIM)));
        (z1, z2)
    };
    let cat = g.concat_cols(&[geo_in, app_feat, sem_in]);
    mlp_forward(g, vars, COLOR_DECODER, cat)
}

/// Class logits `(P, L_cls)`. The geometry feature enters detached; with
/// `dec` disabled its slot is a zero block.
pub fn decode_semantic(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    sem_feat: Var,
    geo_feat: Var,
    dec: bool,
) -> Var {
    let geo_in = if dec {
        g.detach(geo_feat)
    } else {
        let p = g.shape(sem_feat).0;
        g.constant(Array2::zeros((p, FEATURE_DIM)))
    };
    let cat = g.concat_cols(&[sem_feat, geo_in]);
    mlp_forward(g, vars, SEMANTIC_DECODER, cat)
}
