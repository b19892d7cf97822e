//! Evaluation: trajectory error, mesh reconstruction metrics, depth error,
//! and semantic segmentation quality.

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::pose::CameraPose;
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Absolute trajectory error (RMSE, meters) after rigid alignment of the
/// estimate onto the ground truth. Rotation and translation are optimized;
/// scale is fixed at 1.
pub fn ate_rmse(est: &[CameraPose], gt: &[CameraPose]) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::Eval(format!(
            "trajectory length mismatch: {} estimated vs {} ground truth",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < 2 {
        return Err(Error::Eval("need at least two poses for ATE".into()));
    }
    let n = est.len() as f64;
    let mean = |ps: &[CameraPose]| -> Vector3<f64> {
        ps.iter().map(|p| p.translation).sum::<Vector3<f64>>() / n
    };
    let (me, mg) = (mean(est), mean(gt));
    let mut h = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        h += (e.translation - me) * (g.translation - mg).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Eval("SVD failed in alignment".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Eval("SVD failed in alignment".into()))?;
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let t = mg - r * me;
    let mut sq = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let aligned = r * e.translation + t;
        sq += (aligned - g.translation).norm_squared();
    }
    Ok((sq / n).sqrt())
}

fn tri_vertices(mesh: &Mesh, t: usize) -> [Vector3<f64>; 3] {
    let idx = mesh.triangles[t];
    let v = |i: u32| {
        let p = mesh.vertices[i as usize];
        Vector3::new(p[0], p[1], p[2])
    };
    [v(idx[0]), v(idx[1]), v(idx[2])]
}

/// Closest distance from `p` to the triangle `(a, b, c)`.
pub fn point_triangle_distance(
    p: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
) -> f64 {
    // Ericson, Real-Time Collision Detection: closest point via Voronoi regions
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (p - a).norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (p - b).norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (p - (a + ab * t)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (p - c).norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (p - (a + ac * t)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * t)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Uniform-grid bucket index over mesh triangles for nearest-surface queries.
pub struct TriangleIndex<'a> {
    mesh: &'a Mesh,
    cell: f64,
    origin: Vector3<f64>,
    dims: [i64; 3],
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> TriangleIndex<'a> {
    pub fn new(mesh: &'a Mesh, cell: f64) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::Eval("cannot index an empty mesh".into()));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &mesh.vertices {
            for ax in 0..3 {
                lo[ax] = lo[ax].min(v[ax]);
                hi[ax] = hi[ax].max(v[ax]);
            }
        }
        let dims = [
            (((hi[0] - lo[0]) / cell).floor() as i64 + 1).max(1),
            (((hi[1] - lo[1]) / cell).floor() as i64 + 1).max(1),
            (((hi[2] - lo[2]) / cell).floor() as i64 + 1).max(1),
        ];
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = tri_vertices(mesh, t);
            let mut tlo = [i64::MAX; 3];
            let mut thi = [i64::MIN; 3];
            for v in [a, b, c] {
                for ax in 0..3 {
                    let i = ((v[ax] - lo[ax]) / cell).floor() as i64;
                    tlo[ax] = tlo[ax].min(i);
                    thi[ax] = thi[ax].max(i);
                }
            }
            for i in tlo[0]..=thi[0] {
                for j in tlo[1]..=thi[1] {
                    for k in tlo[2]..=thi[2] {
                        buckets.entry((i, j, k)).or_default().push(t);
                    }
                }
            }
        }
        Ok(TriangleIndex { mesh, cell, origin: lo, dims, buckets })
    }

    /// Distance from `p` to the nearest point on the mesh surface.
    pub fn distance(&self, p: Vector3<f64>) -> f64 {
        let cell_of = |ax: usize| ((p[ax] - self.origin[ax]) / self.cell).floor() as i64;
        let (ci, cj, ck) = (cell_of(0), cell_of(1), cell_of(2));
        let max_ring = self
            .dims
            .iter()
            .zip([ci, cj, ck])
            .map(|(&d, c)| c.abs() + (c - d).abs() + d)
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            // any triangle in a farther ring is at least (ring - 1) cells away
            if best <= (ring - 1).max(0) as f64 * self.cell {
                break;
            }
            for i in (ci - ring)..=(ci + ring) {
                for j in (cj - ring)..=(cj + ring) {
                    for k in (ck - ring)..=(ck + ring) {
                        let on_shell = (i - ci).abs() == ring
                            || (j - cj).abs() == ring
                            || (k - ck).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        let Some(tris) = self.buckets.get(&(i, j, k)) else { continue };
                        for &t in tris {
                            let [a, b, c] = tri_vertices(self.mesh, t);
                            best = best.min(point_triangle_distance(p, a, b, c));
                        }
                    }
                }
            }
        }
        best
    }
}

/// Area-weighted uniform samples on the mesh surface, `(n, 3)`.
pub fn sample_mesh_surface(mesh: &Mesh, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    if mesh.triangles.is_empty() {
        return Err(Error::Eval("cannot sample an empty mesh".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = tri_vertices(mesh, t);
        total += (b - a).cross(&(c - a)).norm() * 0.5;
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::Eval("mesh has zero surface area".into()));
    }
    let mut out = Array2::zeros((n, 3));
    for row in 0..n {
        let target = rng.gen::<f64>() * total;
        let t = cumulative.partition_point(|&c| c < target).min(mesh.triangles.len() - 1);
        let [a, b, c] = tri_vertices(mesh, t);
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let p = a + (b - a) * u + (c - a) * v;
        for ax in 0..3 {
            out[[row, ax]] = p[ax];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReconMetrics {
    /// Mean distance from predicted surface samples to the reference (m).
    pub accuracy: f64,
    /// Mean distance from reference surface samples to the prediction (m).
    pub completion: f64,
    /// Fraction of reference samples within `threshold` of the prediction.
    pub completion_ratio: f64,
}

/// Sampled accuracy / completion / completion-ratio between two meshes.
pub fn recon_metrics(
    predicted: &Mesh,
    reference: &Mesh,
    n_samples: usize,
    threshold: f64,
    index_cell: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ReconMetrics> {
    let pred_samples = sample_mesh_surface(predicted, n_samples, rng)?;
    let ref_samples = sample_mesh_surface(reference, n_samples, rng)?;
    let pred_index = TriangleIndex::new(predicted, index_cell)?;
    let ref_index = TriangleIndex::new(reference, index_cell)?;
    let mut acc = 0.0;
    for r in 0..n_samples {
        let p = Vector3::new(pred_samples[[r, 0]], pred_samples[[r, 1]], pred_samples[[r, 2]]);
        acc += ref_index.distance(p);
    }
    let mut comp = 0.0;
    let mut within = 0usize;
    for r in 0..n_samples {
        let p = Vector3::new(ref_samples[[r, 0]], ref_samples[[r, 1]], ref_samples[[r, 2]]);
        let d = pred_index.distance(p);
        comp += d;
        if d <= threshold {
            within += 1;
        }
    }
    Ok(ReconMetrics {
        accuracy: acc / n_samples as f64,
        completion: comp / n_samples as f64,
        completion_ratio: within as f64 / n_samples as f64,
    })
}

/// Mean absolute z-depth error in centimeters over pixels with a valid
/// ground-truth reading.
pub fn depth_l1_cm(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Eval("depth map shape mismatch".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *g > 0.0 {
            sum += (p - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Eval("no valid depth pixels to evaluate".into()));
    }
    Ok(100.0 * sum / n as f64)
}

/// Running confusion matrix for semantic evaluation. Rows are ground truth,
/// columns are predictions.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(l_cls: usize) -> Self {
        ConfusionMatrix { counts: Array2::zeros((l_cls, l_cls)) }
    }

    /// Accumulate one frame of predictions; ground-truth labels `< 0` are
    /// skipped.
    pub fn add(&mut self, pred: &Array2<i32>, gt: &Array2<i32>) {
        let l = self.counts.nrows() as i32;
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *g >= 0 && *g < l && *p >= 0 && *p < l {
                self.counts[[*g as usize, *p as usize]] += 1;
            }
        }
    }

    /// Mean intersection-over-union over classes present in the ground truth.
    pub fn miou(&self) -> f64 {
        let l = self.counts.nrows();
        let mut sum = 0.0;
        let mut classes = 0usize;
        for c in 0..l {
            let gt_total: u64 = (0..l).map(|j| self.counts[[c, j]]).sum();
            if gt_total == 0 {
                continue;
            }
            let pred_total: u64 = (0..l).map(|i| self.counts[[i, c]]).sum();
            let tp = self.counts[[c, c]];
            let union = gt_total + pred_total - tp;
            sum += tp as f64 / union as f64;
            classes += 1;
        }
        if classes == 0 { 0.0 } else { sum / classes as f64 }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.counts.nrows()).map(|c| self.counts[[c, c]]).sum();
        correct as f64 / total as f64
    }
}
