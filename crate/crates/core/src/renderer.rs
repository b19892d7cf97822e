//! Volume rendering along camera rays: pixel-to-ray casting, depth-guided
//! sampling, SDF-to-density conversion and transmittance-weighted
//! compositing of color, semantics and depth.
//!
//! Sample batches are rectangular `(M rays, N samples)` with a 0/1 mask.
//! Masked samples contribute exactly zero density, which makes padded slots
//! (e.g. surface samples of rays without a depth reading) equivalent to not
//! sampling at all.

use crate::autodiff::{Graph, Var};
use crate::dataset::Frame;
use crate::pose::CameraPose;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A set of rays through selected pixels of one frame. Directions are unit
/// vectors in the camera frame; depths are ray distances (not z-depths),
/// with `0.0` marking pixels without a valid depth reading.
pub struct RayBatch {
    pub pixels: Vec<(usize, usize)>,
    /// `(M, 3)` unit direction per ray, camera coordinates.
    pub dirs_cam: Array2<f64>,
    /// `(M, 3)` ground-truth color in `[0, 1]`.
    pub gt_rgb: Array2<f64>,
    /// Ray-distance depth per ray; `0.0` if the sensor reading is invalid.
    pub gt_depth: Vec<f64>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Build rays through `pixels` (row, col) of `frame`. The z-depth stored in
/// the frame is converted to distance along the ray.
pub fn cast_rays(frame: &Frame, pixels: &[(usize, usize)]) -> RayBatch {
    let m = pixels.len();
    let intr = &frame.intrinsics;
    let mut dirs = Array2::zeros((m, 3));
    let mut rgb = Array2::zeros((m, 3));
    let mut depth = Vec::with_capacity(m);
    for (i, &(r, c)) in pixels.iter().enumerate() {
        let x = (c as f64 - intr.cx) / intr.fx;
        let y = (r as f64 - intr.cy) / intr.fy;
        let norm = (x * x + y * y + 1.0).sqrt();
        dirs[[i, 0]] = x / norm;
        dirs[[i, 1]] = y / norm;
        dirs[[i, 2]] = 1.0 / norm;
        for ch in 0..3 {
            rgb[[i, ch]] = frame.rgb[[r, c, ch]];
        }
        let z = frame.depth[[r, c]];
        depth.push(if z > 0.0 { z * norm } else { 0.0 });
    }
    RayBatch { pixels: pixels.to_vec(), dirs_cam: dirs, gt_rgb: rgb, gt_depth: depth }
}

/// Per-ray sample positions and validity mask, both `(M, N)` with each row
/// sorted by distance. Masked entries carry a placeholder distance and must
/// never influence rendering.
pub struct SampleSet {
    pub z: Array2<f64>,
    pub mask: Array2<f64>,
    pub n_per_ray: usize,
}

/// Stratified samples over `[near, far]` plus surface samples uniform in
/// `[d - truncation, d + truncation]` around the depth reading. Rays without
/// a depth reading get their surface slots masked out.
pub fn sample_points(
    batch: &RayBatch,
    near: f64,
    far: f64,
    truncation: f64,
    n_stratified: usize,
    n_surface: usize,
    rng: &mut ChaCha8Rng,
) -> SampleSet {
    let m = batch.len();
    let n = n_stratified + n_surface;
    let mut z = Array2::zeros((m, n));
    let mut mask = Array2::ones((m, n));
    for i in 0..m {
        let mut row: Vec<(f64, f64)> = Vec::with_capacity(n);
        for k in 0..n_stratified {
            let u: f64 = rng.gen();
            row.push((near + (far - near) * (k as f64 + u) / n_stratified as f64, 1.0));
        }
        let d = batch.gt_depth[i];
        for _ in 0..n_surface {
            if d > 0.0 {
                let u: f64 = rng.gen();
                let t = (d - truncation + 2.0 * truncation * u).clamp(near, far);
                row.push((t, 1.0));
            } else {
                // keep the slot but make it inert
                let _ = rng.gen::<f64>();
                row.push((0.5 * (near + far), 0.0));
            }
        }
        row.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (k, (t, mk)) in row.into_iter().enumerate() {
            z[[i, k]] = t;
            mask[[i, k]] = mk;
        }
    }
    SampleSet { z, mask, n_per_ray: n }
}

/// World coordinates of every sample under a fixed pose, flattened row-major
/// to `(M*N, 3)` (ray-major, then sample order).
pub fn sample_world_points(pose: &CameraPose, batch: &RayBatch, samples: &SampleSet) -> Array2<f64> {
    let (m, n) = samples.z.dim();
    let rot = pose.rotation_matrix();
    let mut out = Array2::zeros((m * n, 3));
    for i in 0..m {
        let dir = nalgebra::Vector3::new(
            batch.dirs_cam[[i, 0]],
            batch.dirs_cam[[i, 1]],
            batch.dirs_cam[[i, 2]],
        );
        for k in 0..n {
            let p = rot * (dir * samples.z[[i, k]]) + pose.translation;
            for ax in 0..3 {
                out[[i * n + k, ax]] = p[ax];
            }
        }
    }
    out
}

/// Differentiable rotation from a small-angle increment `omega` `(1, 3)`,
/// via the quaternion chart `q = (1, omega/2)` normalized:
/// `R = I + 2/(1 + |v|^2) ([v]x + [v]x^2)` with `v = omega/2`.
pub fn rotation_from_increment(g: &mut Graph, omega: Var) -> Var {
    // B maps (v1, v2, v3) to the row-major flattening of the skew matrix [v]x.
    let mut b = Array2::zeros((3, 9));
    b[[2, 1]] = -1.0;
    b[[1, 2]] = 1.0;
    b[[2, 3]] = 1.0;
    b[[0, 5]] = -1.0;
    b[[1, 6]] = -1.0;
    b[[0, 7]] = 1.0;
    let b = g.constant(b);
    let v = g.scale(omega, 0.5);
    let skew_flat = g.matmul(v, b);
    let skew = g.reshape(skew_flat, 3, 3);
    let skew2 = g.matmul(skew, skew);
    let sum = g.add(skew, skew2);
    let v_sq = g.square(v);
    let norm_sq = g.sum_all(v_sq);
    let denom = g.add_const(norm_sq, 1.0);
    let two = g.constant(ndarray::arr2(&[[2.0]]));
    let factor = g.div(two, denom);
    let scaled = g.mul_scalar(sum, factor);
    let eye = g.constant(Array2::eye(3));
    g.add(eye, scaled)
}

/// World coordinates of every sample as a graph node, differentiable with
/// respect to the pose increment `(omega, t)` applied on top of `init`:
/// `p = R_init (R_inc (dir * z) + t_inc) + t_init`.
pub fn sample_world_points_tracked(
    g: &mut Graph,
    init: &CameraPose,
    omega: Var,
    t_inc: Var,
    batch: &RayBatch,
    samples: &SampleSet,
) -> Var {
    let identity = CameraPose::identity();
    let p_cam = sample_world_points(&identity, batch, samples);
    let p_cam = g.constant(p_cam);
    let r_inc = rotation_from_increment(g, omega);
    let rotated = g.matmul_nt(p_cam, r_inc);
    let shifted = g.add_row(rotated, t_inc);
    let r_init = g.constant(Array2::from_shape_fn((3, 3), |(i, j)| pose_rot(init, i, j)));
    let in_world = g.matmul_nt(shifted, r_init);
    let t_init = g.constant(Array2::from_shape_fn((1, 3), |(_, j)| init.translation[j]));
    let t_rot = g.add_row(in_world, t_init);
    t_rot
}

fn pose_rot(pose: &CameraPose, i: usize, j: usize) -> f64 {
    pose.rotation_matrix()[(i, j)]
}

/// One sample per ray at the sensor depth `z = D(m)`. Rays without a valid
/// reading get `z = 0` (the camera origin) and must be excluded downstream.
pub fn surface_sample_set(batch: &RayBatch) -> SampleSet {
    let m = batch.gt_depth.len();
    let z = Array2::from_shape_fn((m, 1), |(i, _)| batch.gt_depth[i]);
    SampleSet { z, mask: Array2::ones((m, 1)), n_per_ray: 1 }
}

/// Density from predicted SDF: `sigma = (1/alpha) * sigmoid(-d / alpha)`.
/// `sdf` is `(M*N, 1)`; the result is reshaped to `(M, N)` and multiplied by
/// the sample mask so padded slots have exactly zero density.
pub fn sdf_to_density(
    g: &mut Graph,
    sdf: Var,
    alpha: Var,
    mask: &Array2<f64>,
) -> Var {
    let (m, n) = mask.dim();
    let one = g.constant(ndarray::arr2(&[[1.0]]));
    let inv_alpha = g.div(one, alpha);
    let neg = g.scale(sdf, -1.0);
    let arg = g.mul_scalar(neg, inv_alpha);
    let sig = g.sigmoid(arg);
    let sigma = g.mul_scalar(sig, inv_alpha);
    let sigma = g.reshape(sigma, m, n);
    let mask = g.constant(mask.clone());
    g.mul(sigma, mask)
}

/// Transmittance weights `w_k = exp(-sum_{i<k} sigma_i) * (1 - exp(-sigma_k))`,
/// `(M, N)`. Densities are used as-is (no spacing factor).
pub fn render_weights(g: &mut Graph, sigma: Var) -> Var {
    let cum = g.cumsum_exclusive(sigma);
    let neg_cum = g.scale(cum, -1.0);
    let trans = g.exp(neg_cum);
    let neg_sigma = g.scale(sigma, -1.0);
    let escape = g.exp(neg_sigma);
    let neg_escape = g.scale(escape, -1.0);
    let absorb = g.add_const(neg_escape, 1.0);
    g.mul(trans, absorb)
}

/// Weighted sum of per-sample values `(M*N, C)` into per-ray values `(M, C)`.
pub fn composite(g: &mut Graph, weights: Var, values: Var) -> Var {
    let (m, n) = g.shape(weights);
    let w_flat = g.reshape(weights, m * n, 1);
    let weighted = g.mul_col(values, w_flat);
    g.sum_row_groups(weighted, n)
}

/// Expected ray-distance depth `(M, 1)` from weights and sample distances.
pub fn render_depth(g: &mut Graph, weights: Var, z: &Array2<f64>) -> Var {
    let z_const = g.constant(z.clone());
    let wz = g.mul(weights, z_const);
    g.sum_rows(wz)
}
