//! Training objectives: free-space and truncation SDF supervision, semantic
//! cross-entropy, feature distillation, and photometric / depth terms.
//!
//! All per-ray terms are masked means: samples outside the relevant region
//! (or belonging to rays without a depth reading) get zero coefficient, and
//! rays with an empty sample set are excluded from the outer mean entirely.

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::renderer::SampleSet;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Scalar values of every loss term for one optimization step, in the units
/// produced by the graph (before λ weighting except for `total`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub free_space: f64,
    pub truncation: f64,
    pub semantic: f64,
    pub feature: f64,
    pub color: f64,
    pub depth: f64,
    pub total: f64,
}

/// Graph nodes of the individual terms plus the weighted total.
pub struct LossTerms {
    pub free_space: Var,
    pub truncation: Var,
    pub semantic: Var,
    pub feature: Var,
    pub color: Var,
    pub depth: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            free_space: g.scalar(self.free_space),
            truncation: g.scalar(self.truncation),
            semantic: g.scalar(self.semantic),
            feature: g.scalar(self.feature),
            color: g.scalar(self.color),
            depth: g.scalar(self.depth),
            total: g.scalar(self.total),
        }
    }
}

/// Per-sample coefficient matrices for the free-space and truncation terms.
///
/// An entry is `1 / (count_in_ray * rays_with_nonempty_set)` so that
/// `sum(coeff * residual^2)` equals the mean over rays of the per-ray mean.
fn region_coefficients(
    samples: &SampleSet,
    gt_depth: &[f64],
    truncation: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (m, n) = samples.z.dim();
    let mut fs = Array2::zeros((m, n));
    let mut tr = Array2::zeros((m, n));
    let mut fs_rays = 0usize;
    let mut tr_rays = 0usize;
    for i in 0..m {
        let d = gt_depth[i];
        if d <= 0.0 {
            continue;
        }
        let mut fs_count = 0usize;
        let mut tr_count = 0usize;
        for k in 0..n {
            if samples.mask[[i, k]] == 0.0 {
                continue;
            }
            let z = samples.z[[i, k]];
            if z < d - truncation {
                fs[[i, k]] = 1.0;
                fs_count += 1;
            } else if z <= d + truncation {
                tr[[i, k]] = 1.0;
                tr_count += 1;
            }
        }
        if fs_count > 0 {
            fs_rays += 1;
            let inv = 1.0 / fs_count as f64;
            fs.row_mut(i).mapv_inplace(|v| v * inv);
        }
        if tr_count > 0 {
            tr_rays += 1;
            let inv = 1.0 / tr_count as f64;
            tr.row_mut(i).mapv_inplace(|v| v * inv);
        }
    }
    if fs_rays > 0 {
        fs.mapv_inplace(|v| v / fs_rays as f64);
    }
    if tr_rays > 0 {
        tr.mapv_inplace(|v| v / tr_rays as f64);
    }
    (fs, tr)
}

/// Free-space loss: mean over rays of mean over samples in front of the
/// surface of `(d - 1)^2`, with `d` in truncation-normalized units.
/// Also the truncation loss: `(z + T*d - D)^2` for samples within the
/// truncation band. Returns `(free_space, truncation)`.
pub fn sdf_losses(
    g: &mut Graph,
    sdf: Var,
    samples: &SampleSet,
    gt_depth: &[f64],
    truncation: f64,
) -> (Var, Var) {
    let (m, n) = samples.z.dim();
    let (fs_coeff, tr_coeff) = region_coefficients(samples, gt_depth, truncation);
    let d = g.reshape(sdf, m, n);

    let fs_res = g.add_const(d, -1.0);
    let fs_sq = g.square(fs_res);
    let fs_c = g.constant(fs_coeff);
    let fs_w = g.mul(fs_sq, fs_c);
    let l_fs = g.sum_all(fs_w);

    let depth_mat =
        Array2::from_shape_fn((m, n), |(i, _)| if gt_depth[i] > 0.0 { gt_depth[i] } else { 0.0 });
    let z_minus_d = g.constant(&samples.z - &depth_mat);
    let td = g.scale(d, truncation);
    let tr_res = g.add(z_minus_d, td);
    let tr_sq = g.square(tr_res);
    let tr_c = g.constant(tr_coeff);
    let tr_w = g.mul(tr_sq, tr_c);
    let l_tr = g.sum_all(tr_w);
    (l_fs, l_tr)
}

/// Cross-entropy of rendered class logits `(M, L)` against integer labels.
/// Labels `< 0` are excluded; if none are valid the loss is a constant zero.
pub fn semantic_loss(g: &mut Graph, logits: Var, labels: &[i32]) -> Var {
    let (m, l) = g.shape(logits);
    debug_assert_eq!(labels.len(), m);
    let valid = labels.iter().filter(|&&c| c >= 0).count();
    if valid == 0 {
        return g.constant(Array2::zeros((1, 1)));
    }
    let mut onehot = Array2::zeros((m, l));
    for (i, &c) in labels.iter().enumerate() {
        if c >= 0 {
            onehot[[i, c as usize]] = -1.0 / valid as f64;
        }
    }
    let log_p = g.log_softmax_rows(logits);
    let picks = g.constant(onehot);
    let prod = g.mul(log_p, picks);
    g.sum_all(prod)
}

/// L1 distillation between the fused frontend feature map and its rendered
/// counterpart, normalized by tokens x channels. The frontend side enters
/// detached: this term only trains the scene representation.
pub fn feature_loss(g: &mut Graph, fused: Var, rendered: Var) -> Var {
    let target = g.detach(fused);
    let diff = g.sub(rendered, target);
    let a = g.abs(diff);
    g.mean_all(a)
}

/// Mean absolute color error over all rays.
pub fn color_loss(g: &mut Graph, pred: Var, gt: &Array2<f64>) -> Var {
    let (m, _) = g.shape(pred);
    debug_assert_eq!(gt.nrows(), m);
    let gt = g.constant(gt.clone());
    let diff = g.sub(pred, gt);
    let a = g.abs(diff);
    g.mean_all(a)
}

/// Mean absolute ray-distance depth error over rays with a valid reading.
/// With no valid readings in the batch the loss is a constant zero and a
/// diagnostic is printed.
pub fn depth_loss(g: &mut Graph, pred: Var, gt_depth: &[f64]) -> Var {
    let m = gt_depth.len();
    let valid = gt_depth.iter().filter(|&&d| d > 0.0).count();
    if valid == 0 {
        eprintln!("depth loss: no valid depth readings in batch, term skipped");
        return g.constant(Array2::zeros((1, 1)));
    }
    let mut gt = Array2::zeros((m, 1));
    let mut coeff = Array2::zeros((m, 1));
    for i in 0..m {
        if gt_depth[i] > 0.0 {
            gt[[i, 0]] = gt_depth[i];
            coeff[[i, 0]] = 1.0 / valid as f64;
        }
    }
    let gt = g.constant(gt);
    let diff = g.sub(pred, gt);
    let a = g.abs(diff);
    let c = g.constant(coeff);
    let w = g.mul(a, c);
    g.sum_all(w)
}

/// Weighted sum of all terms. The feature weight honors the feature-loss
/// switch via [`RunConfig::effective_lambda_f`].
pub fn total_loss(g: &mut Graph, cfg: &RunConfig, terms: [Var; 6]) -> Var {
    let [fs, tr, s, f, c, d] = terms;
    let weights = [
        cfg.lambda_fs,
        cfg.lambda_tr,
        cfg.lambda_s,
        cfg.effective_lambda_f(),
        cfg.lambda_c,
        cfg.lambda_d,
    ];
    let mut acc = None;
    for (term, w) in [fs, tr, s, f, c, d].into_iter().zip(weights) {
        let scaled = g.scale(term, w);
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled),
        });
    }
    acc.unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn simple_samples() -> (SampleSet, Vec<f64>) {
        // two rays with depth, one without
        let z = arr2(&[
            [0.2, 0.5, 0.95, 1.02],
            [0.3, 0.8, 1.48, 1.55],
            [0.4, 0.9, 1.20, 1.60],
        ]);
        let mask = arr2(&[
            [1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 0.0],
        ]);
        let s = SampleSet { z, mask, n_per_ray: 4 };
        (s, vec![1.0, 1.5, 0.0])
    }

    #[test]
    fn free_space_zero_when_sdf_is_one() {
        let (s, d) = simple_samples();
        let mut g = Graph::new();
        let sdf = g.leaf(Array2::ones((12, 1)));
        let (l_fs, _) = sdf_losses(&mut g, sdf, &s, &d, 0.06);
        assert_eq!(g.scalar(l_fs), 0.0);
    }

    #[test]
    fn truncation_zero_when_sdf_matches_signed_distance() {
        let (s, d) = simple_samples();
        let t = 0.06;
        let mut g = Graph::new();
        let sdf_v = Array2::from_shape_fn((12, 1), |(idx, _)| {
            let (i, k) = (idx / 4, idx % 4);
            if d[i] > 0.0 { (d[i] - s.z[[i, k]]) / t } else { 0.0 }
        });
        let sdf = g.leaf(sdf_v);
        let (_, l_tr) = sdf_losses(&mut g, sdf, &s, &d, t);
        assert!(g.scalar(l_tr).abs() < 1e-24);
    }

    #[test]
    fn sdf_losses_match_scalar_oracle() {
        let (s, d) = simple_samples();
        let t = 0.06;
        let sdf_v = Array2::from_shape_fn((12, 1), |(idx, _)| ((idx as f64) * 0.37).sin());
        // independent scalar computation
        let mut fs_sum = 0.0;
        let mut fs_rays = 0;
        let mut tr_sum = 0.0;
        let mut tr_rays = 0;
        for i in 0..3 {
            if d[i] <= 0.0 {
                continue;
            }
            let (mut fs_acc, mut fs_n, mut tr_acc, mut tr_n) = (0.0, 0, 0.0, 0);
            for k in 0..4 {
                if s.mask[[i, k]] == 0.0 {
                    continue;
                }
                let z = s.z[[i, k]];
                let sd = sdf_v[[i * 4 + k, 0]];
                if z < d[i] - t {
                    fs_acc += (sd - 1.0) * (sd - 1.0);
                    fs_n += 1;
                } else if z <= d[i] + t {
                    let r = z + t * sd - d[i];
                    tr_acc += r * r;
                    tr_n += 1;
                }
            }
            if fs_n > 0 {
                fs_sum += fs_acc / fs_n as f64;
                fs_rays += 1;
            }
            if tr_n > 0 {
                tr_sum += tr_acc / tr_n as f64;
                tr_rays += 1;
            }
        }
        let expect_fs = fs_sum / fs_rays as f64;
        let expect_tr = tr_sum / tr_rays as f64;
        let mut g = Graph::new();
        let sdf = g.leaf(sdf_v);
        let (l_fs, l_tr) = sdf_losses(&mut g, sdf, &s, &d, t);
        assert!((g.scalar(l_fs) - expect_fs).abs() < 1e-14);
        assert!((g.scalar(l_tr) - expect_tr).abs() < 1e-14);
    }

    #[test]
    fn invalid_depth_and_masked_samples_get_no_gradient() {
        let (s, d) = simple_samples();
        let mut g = Graph::new();
        let sdf_v = Array2::from_shape_fn((12, 1), |(idx, _)| ((idx as f64) * 0.21).cos());
        let sdf = g.leaf(sdf_v);
        let (l_fs, l_tr) = sdf_losses(&mut g, sdf, &s, &d, 0.06);
        let tot = g.add(l_fs, l_tr);
        g.backward(tot);
        let grad = g.grad(sdf).unwrap();
        // ray 2 has no depth: every sample gradient must be exactly zero
        for k in 0..4 {
            assert_eq!(grad[[8 + k, 0]], 0.0);
        }
    }

    #[test]
    fn semantic_loss_zero_cases_and_uniform_value() {
        let mut g = Graph::new();
        // huge correct-class margin: loss ~ 0
        let logits = g.leaf(arr2(&[[50.0, 0.0, 0.0], [0.0, 50.0, 0.0]]));
        let l = semantic_loss(&mut g, logits, &[0, 1]);
        assert!(g.scalar(l) < 1e-20);
        // uniform logits: loss = ln(L)
        let logits = g.leaf(Array2::zeros((4, 3)));
        let l = semantic_loss(&mut g, logits, &[0, 1, 2, 0]);
        assert!((g.scalar(l) - (3.0f64).ln()).abs() < 1e-12);
        // labels < 0 are ignored
        let logits = g.leaf(arr2(&[[50.0, 0.0, 0.0], [9.0, 9.0, 9.0]]));
        let l = semantic_loss(&mut g, logits, &[0, -1]);
        assert!(g.scalar(l) < 1e-20);
    }

    #[test]
    fn semantic_loss_matches_scalar_ce() {
        let logits_v = arr2(&[[0.3, -0.7, 1.1], [2.0, 0.1, -0.5]]);
        let labels = [2, 0];
        let mut expect = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            let row: Vec<f64> = logits_v.row(i).to_vec();
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            expect += lse - row[c as usize];
        }
        expect /= 2.0;
        let mut g = Graph::new();
        let logits = g.leaf(logits_v);
        let l = semantic_loss(&mut g, logits, &labels);
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_zero_at_match_and_detaches_frontend() {
        let mut g = Graph::new();
        let v = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        let fused = g.leaf(v.clone());
        let rendered = g.leaf(v.clone());
        let l = feature_loss(&mut g, fused, rendered);
        assert_eq!(g.scalar(l), 0.0);

        let mut g = Graph::new();
        let fused = g.leaf(v.clone());
        let rendered = g.leaf(&v + 0.5);
        let l = feature_loss(&mut g, fused, rendered);
        assert!((g.scalar(l) - 0.5).abs() < 1e-14);
        g.backward(l);
        assert!(g.grad(fused).is_none(), "fused frontend side must be detached");
        let gn: f64 = g.grad(rendered).unwrap().iter().map(|x| x.abs()).sum();
        assert!(gn > 0.0);
    }

    #[test]
    fn color_and_depth_l1_match_hand_values() {
        let mut g = Graph::new();
        let pred = g.leaf(arr2(&[[0.5, 0.5, 0.5], [0.0, 1.0, 0.2]]));
        let gt = arr2(&[[0.5, 0.7, 0.5], [0.0, 1.0, 0.0]]);
        let l = color_loss(&mut g, pred, &gt);
        assert!((g.scalar(l) - (0.2 + 0.2) / 6.0).abs() < 1e-14);

        let pred_d = g.leaf(arr2(&[[1.1], [2.0], [7.0]]));
        let l_d = depth_loss(&mut g, pred_d, &[1.0, 2.5, 0.0]);
        // invalid third ray excluded: (0.1 + 0.5) / 2
        assert!((g.scalar(l_d) - 0.3).abs() < 1e-14);
        g.backward(l_d);
        assert_eq!(g.grad(pred_d).unwrap()[[2, 0]], 0.0);
    }

    #[test]
    fn depth_loss_all_invalid_is_zero_not_nan() {
        let mut g = Graph::new();
        let pred = g.leaf(arr2(&[[1.0], [2.0]]));
        let l = depth_loss(&mut g, pred, &[0.0, 0.0]);
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn total_is_weighted_sum_and_honors_feature_switch() {
        let mut cfg = RunConfig::default();
        let vals = [0.11, 0.22, 0.33, 0.44, 0.55, 0.66];
        let build = |g: &mut Graph| -> [Var; 6] {
            let mut out = Vec::new();
            for v in vals {
                out.push(g.leaf(arr2(&[[v]])));
            }
            out.try_into().unwrap()
        };
        let mut g = Graph::new();
        let terms = build(&mut g);
        let t = total_loss(&mut g, &cfg, terms);
        let expect = cfg.lambda_fs * vals[0]
            + cfg.lambda_tr * vals[1]
            + cfg.lambda_s * vals[2]
            + cfg.lambda_f * vals[3]
            + cfg.lambda_c * vals[4]
            + cfg.lambda_d * vals[5];
        assert!((g.scalar(t) - expect).abs() < 1e-12);

        cfg.switch_fl = false;
        let mut g = Graph::new();
        let terms = build(&mut g);
        let feature = terms[3];
        let t = total_loss(&mut g, &cfg, terms);
        let expect_off = expect - cfg.lambda_f * vals[3];
        assert!((g.scalar(t) - expect_off).abs() < 1e-12);
        g.backward(t);
        assert!(
            g.grad(feature).is_none() || g.grad(feature).unwrap()[[0, 0]] == 0.0,
            "feature term must not contribute gradient when switched off"
        );
    }

    #[test]
    fn sdf_loss_gradients_match_fd() {
        use crate::autodiff::check;
        let (s, d) = simple_samples();
        let sdf0 = Array2::from_shape_fn((12, 1), |(idx, _)| ((idx as f64) * 0.53).sin() * 0.8);
        let mut f = |x: &Array2<f64>| -> f64 {
            let mut g = Graph::new();
            let sdf = g.leaf(x.clone());
            let (l_fs, l_tr) = sdf_losses(&mut g, sdf, &s, &d, 0.06);
            let t = g.add(l_fs, l_tr);
            g.scalar(t)
        };
        let mut g = Graph::new();
        let sdf = g.leaf(sdf0.clone());
        let (l_fs, l_tr) = sdf_losses(&mut g, sdf, &s, &d, 0.06);
        let t = g.add(l_fs, l_tr);
        g.backward(t);
        let analytic = g.grad(sdf).unwrap().clone();
        let fd = check::fd_grad(&mut f, &sdf0, 1e-6);
        assert!(check::rel_err(&analytic, &fd) < 1e-6);
    }
}
