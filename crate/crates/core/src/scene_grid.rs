//! Hierarchical axis-aligned feature planes.
//!
//! Each attribute (geometry, appearance, semantic) is represented by two
//! resolution levels, each level by three planes (xy, xz, yz). A 3D point is
//! projected onto each plane, the three bilinear lookups are summed per
//! level, and the coarse and fine level outputs are concatenated into a
//! 16-channel feature.

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const CHANNELS_PER_LEVEL: usize = 8;
pub const FEATURE_DIM: usize = 2 * CHANNELS_PER_LEVEL;

/// World-dimension pairs spanned by the xy, xz, yz planes.
pub const PLANE_AXES: [(usize, usize, &str); 3] = [(0, 1, "xy"), (0, 2, "xz"), (1, 2, "yz")];

pub const LEVELS: [&str; 2] = ["coarse", "fine"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Geometry,
    Appearance,
    Semantic,
}

pub const ATTRIBUTES: [Attribute; 3] = [Attribute::Geometry, Attribute::Appearance, Attribute::Semantic];

impl Attribute {
    pub fn key(&self) -> &'static str {
        match self {
            Attribute::Geometry => "geometry",
            Attribute::Appearance => "appearance",
            Attribute::Semantic => "semantic",
        }
    }
}

/// Geometry of the plane grids; shared by all attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeta {
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub coarse_cell: f64,
    pub fine_cell: f64,
    /// Grid nodes per world dimension at each level.
    pub coarse_nodes: [usize; 3],
    pub fine_nodes: [usize; 3],
}

fn node_count(extent: f64, cell: f64) -> usize {
    (extent / cell - 1e-9).ceil() as usize + 1
}

impl GridMeta {
    pub fn new(bbox_min: [f64; 3], bbox_max: [f64; 3], coarse_cell: f64, fine_cell: f64) -> Result<GridMeta> {
        let mut coarse_nodes = [0usize; 3];
        let mut fine_nodes = [0usize; 3];
        for d in 0..3 {
            let extent = bbox_max[d] - bbox_min[d];
            if extent <= 0.0 {
                return Err(Error::Config("degenerate scene bounding box".into()));
            }
            if coarse_cell > extent {
                return Err(Error::Config(format!(
                    "coarse cell {coarse_cell} m larger than bbox extent {extent} m"
                )));
            }
            coarse_nodes[d] = node_count(extent, coarse_cell);
            fine_nodes[d] = node_count(extent, fine_cell);
        }
        Ok(GridMeta { bbox_min, bbox_max, coarse_cell, fine_cell, coarse_nodes, fine_nodes })
    }

    pub fn nodes(&self, level: &str) -> [usize; 3] {
        if level == "coarse" {
            self.coarse_nodes
        } else {
            self.fine_nodes
        }
    }

    pub fn cell(&self, level: &str) -> f64 {
        if level == "coarse" {
            self.coarse_cell
        } else {
            self.fine_cell
        }
    }

    /// Resolution `(n_u, n_v)` of the plane spanning world dims `(a, b)`.
    pub fn plane_res(&self, level: &str, a: usize, b: usize) -> (usize, usize) {
        let n = self.nodes(level);
        (n[a], n[b])
    }

    pub fn diagonal(&self) -> f64 {
        let mut s = 0.0;
        for d in 0..3 {
            s += (self.bbox_max[d] - self.bbox_min[d]).powi(2);
        }
        s.sqrt()
    }
}

pub fn plane_name(attr: Attribute, level: &str, axis: &str) -> String {
    format!("plane.{}.{}.{}", attr.key(), level, axis)
}

/// Initialize every plane tensor: zero-mean uniform with half-width
/// `cfg.init_scale`, deterministic under the rng.
pub fn init_planes(store: &mut ParamStore, meta: &GridMeta, cfg: &RunConfig, rng: &mut ChaCha8Rng) {
    for attr in ATTRIBUTES {
        for level in LEVELS {
            for (a, b, axis) in PLANE_AXES {
                let (nu, nv) = meta.plane_res(level, a, b);
                let values = Array2::from_shape_fn((nu * nv, CHANNELS_PER_LEVEL), |_| {
                    rng.gen_range(-cfg.init_scale..cfg.init_scale)
                });
                store.insert(&plane_name(attr, level, axis), values);
            }
        }
    }
}

pub fn all_plane_names() -> Vec<String> {
    let mut names = Vec::new();
    for attr in ATTRIBUTES {
        for level in LEVELS {
            for (_, _, axis) in PLANE_AXES {
                names.push(plane_name(attr, level, axis));
            }
        }
    }
    names
}

pub fn plane_names_for(attr: Attribute) -> Vec<String> {
    let mut names = Vec::new();
    for level in LEVELS {
        for (_, _, axis) in PLANE_AXES {
            names.push(plane_name(attr, level, axis));
        }
    }
    names
}

/// Interpolate one level: sum of the three plane lookups, `(P, 8)`.
fn interpolate_level(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    meta: &GridMeta,
    attr: Attribute,
    level: &str,
    points: Var,
) -> Var {
    let cell = meta.cell(level);
    let mut acc: Option<Var> = None;
    let dims: [Var; 3] = [
        g.slice_cols(points, 0, 1),
        g.slice_cols(points, 1, 2),
        g.slice_cols(points, 2, 3),
    ];
    for (a, b, axis) in PLANE_AXES {
        let (nu, nv) = meta.plane_res(level, a, b);
        // world -> grid units
        let ua = g.scale(dims[a], 1.0 / cell);
        let ua = g.add_const(ua, -meta.bbox_min[a] / cell);
        let vb = g.scale(dims[b], 1.0 / cell);
        let vb = g.add_const(vb, -meta.bbox_min[b] / cell);
        let coords = g.concat_cols(&[ua, vb]);
        let plane = vars[&plane_name(attr, level, axis)];
        let feat = g.plane_interp(plane, coords, nu, nv);
        acc = Some(match acc {
            Some(prev) => g.add(prev, feat),
            None => feat,
        });
    }
    acc.expect("three planes per level")
}

/// Full hierarchical interpolation: coarse ⊕ fine, `(P, 16)`.
///
/// With `hsm` disabled the semantic fine half is a constant zero block (the
/// single-level ablation); other attributes are unaffected.
pub fn interpolate(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    meta: &GridMeta,
    attr: Attribute,
    points: Var,
    hsm: bool,
) -> Var {
    let coarse = interpolate_level(g, vars, meta, attr, "coarse", points);
    let fine = if attr == Attribute::Semantic && !hsm {
        let p = g.shape(points).0;
        g.constant(Array2::zeros((p, CHANNELS_PER_LEVEL)))
    } else {
        interpolate_level(g, vars, meta, attr, "fine", points)
    };
    g.concat_cols(&[coarse, fine])
}
