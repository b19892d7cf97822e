//! Cross-attention fusion of geometry, appearance, and semantic tokens.
//!
//! Tokens are the sampled pixels of one optimization batch. Geometry
//! features act as queries throughout; the fused semantic feature T_s uses
//! appearance keys and semantic values, the fused appearance feature T_a
//! uses T_s keys and appearance values, and the final appearance token
//! T_a' = F_θ([f_a | T_a]). The supervision feature map is
//! FM = [f_g | T_a' | T_s].
//!
//! The attention scale is the Frobenius norm of the key matrix divided by
//! sqrt(N), which reduces to the vector L2 norm for a single token.

use crate::autodiff::{Graph, Var};
use crate::params::{init_mlp, mlp_forward, ParamStore};
use crate::scene_grid::FEATURE_DIM;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const FUSION_MLP: &str = "net.f";

/// N×16 tokens for each modality.
#[derive(Debug, Clone, Copy)]
pub struct TokenBatch {
    pub f_g: Var,
    pub f_a: Var,
    pub f_s: Var,
}

/// Fusion output; `fm` is exactly `[f_g | t_a_prime | t_s]` per token.
#[derive(Debug, Clone, Copy)]
pub struct FusedFeatureMap {
    pub f_g: Var,
    pub t_a_prime: Var,
    pub t_s: Var,
    pub fm: Var,
}

pub fn init_fusion(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    init_mlp(store, FUSION_MLP, 2 * FEATURE_DIM, 32, FEATURE_DIM, rng);
}

/// Row-wise attention `softmax(q kᵀ / s) v` with the Frobenius/sqrt(N) key
/// scale. A degenerate all-zero key matrix falls back to s = 1.
fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> (Var, Var) {
    let n = g.shape(k).0 as f64;
    let ksq = g.square(k);
    let ssq = g.sum_all(ksq);
    let ssq = g.scale(ssq, 1.0 / n);
    let s = g.sqrt(ssq);
    let s = if g.scalar(s) == 0.0 {
        eprintln!("fusion: degenerate all-zero key matrix, falling back to unit attention scale");
        g.constant(ndarray::Array2::from_elem((1, 1), 1.0))
    } else {
        s
    };
    let one = g.constant(ndarray::Array2::from_elem((1, 1), 1.0));
    let inv_s = g.div(one, s);
    let logits = g.matmul_nt(q, k);
    let logits = g.mul_scalar(logits, inv_s);
    let attn = g.softmax_rows(logits);
    (g.matmul(attn, v), attn)
}

/// T_s = softmax(f_g f_aᵀ / s) f_s. Also returns the attention matrix.
pub fn fuse_semantic(g: &mut Graph, f_g: Var, f_a: Var, f_s: Var) -> (Var, Var) {
    attention(g, f_g, f_a, f_s)
}

/// T_a = softmax(f_g T_sᵀ / s') f_a. Also returns the attention matrix.
pub fn fuse_appearance(g: &mut Graph, f_g: Var, t_s: Var, f_a: Var) -> (Var, Var) {
    attention(g, f_g, t_s, f_a)
}

/// Full fusion: T_s, T_a, T_a' = F_θ([f_a | T_a]), FM = [f_g | T_a' | T_s].
/// With `ff` disabled the map degenerates to FM = [f_g | f_a | f_s].
pub fn fuse_map(
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    tokens: TokenBatch,
    ff: bool,
) -> FusedFeatureMap {
    if !ff {
        let fm = g.concat_cols(&[tokens.f_g, tokens.f_a, tokens.f_s]);
        return FusedFeatureMap { f_g: tokens.f_g, t_a_prime: tokens.f_a, t_s: tokens.f_s, fm };
    }
    let (t_s, _) = fuse_semantic(g, tokens.f_g, tokens.f_a, tokens.f_s);
    let (t_a, _) = fuse_appearance(g, tokens.f_g, t_s, tokens.f_a);
    let cat = g.concat_cols(&[tokens.f_a, t_a]);
    let t_a_prime = mlp_forward(g, vars, FUSION_MLP, cat);
    let fm = g.concat_cols(&[tokens.f_g, t_a_prime, t_s]);
    FusedFeatureMap { f_g: tokens.f_g, t_a_prime, t_s, fm }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{fd_grad, rel_err};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Scalar triple-loop attention oracle with the same scale rule.
    fn attention_oracle(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let n = q.nrows();
        let c = q.ncols();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..c {
                s += k[[i, j]] * k[[i, j]];
            }
        }
        let scale = (s / n as f64).sqrt();
        let scale = if scale == 0.0 { 1.0 } else { scale };
        let mut out = Array2::zeros((n, v.ncols()));
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                for d in 0..c {
                    logits[j] += q[[i, d]] * k[[j, d]];
                }
                logits[j] /= scale;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                for d in 0..v.ncols() {
                    out[[i, d]] += exps[j] / z * v[[j, d]];
                }
            }
        }
        out
    }

    #[test]
    fn single_token_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f_g, f_a, f_s) = (randn(&mut rng, 1, 16), randn(&mut rng, 1, 16), randn(&mut rng, 1, 16));
        let mut g = Graph::new();
        let (gq, ka, vs) = (g.constant(f_g), g.constant(f_a.clone()), g.constant(f_s.clone()));
        let (t_s, _) = fuse_semantic(&mut g, gq, ka, vs);
        for c in 0..16 {
            assert!((g.value(t_s)[[0, c]] - f_s[[0, c]]).abs() < 1e-12);
        }
        let (t_a, _) = fuse_appearance(&mut g, gq, t_s, ka);
        for c in 0..16 {
            assert!((g.value(t_a)[[0, c]] - f_a[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rows_give_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row_g = randn(&mut rng, 1, 16);
        let row_a = randn(&mut rng, 1, 16);
        let f_s = randn(&mut rng, 6, 16);
        let rep = |row: &Array2<f64>| {
            Array2::from_shape_fn((6, 16), |(_, c)| row[[0, c]])
        };
        let mut g = Graph::new();
        let (gq, ka, vs) = (g.constant(rep(&row_g)), g.constant(rep(&row_a)), g.constant(f_s.clone()));
        let (t_s, attn) = fuse_semantic(&mut g, gq, ka, vs);
        for i in 0..6 {
            for j in 0..6 {
                assert!((g.value(attn)[[i, j]] - 1.0 / 6.0).abs() < 1e-12);
            }
            for c in 0..16 {
                let mean: f64 = (0..6).map(|r| f_s[[r, c]]).sum::<f64>() / 6.0;
                assert!((g.value(t_s)[[i, c]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f_g, f_a, f_s) = (randn(&mut rng, 5, 16), randn(&mut rng, 5, 16), randn(&mut rng, 5, 16));
        let mut g = Graph::new();
        let (gq, ka, vs) = (g.constant(f_g.clone()), g.constant(f_a.clone()), g.constant(f_s.clone()));
        let (t_s, attn) = fuse_semantic(&mut g, gq, ka, vs);
        let expect = attention_oracle(&f_g, &f_a, &f_s);
        for i in 0..5 {
            let rowsum: f64 = (0..5).map(|j| g.value(attn)[[i, j]]).sum();
            assert!((rowsum - 1.0).abs() < 1e-6);
            for j in 0..5 {
                assert!(g.value(attn)[[i, j]] >= 0.0);
            }
            for c in 0..16 {
                assert!((g.value(t_s)[[i, c]] - expect[[i, c]]).abs() < 1e-6);
            }
        }
        // appearance fusion against the same oracle
        let (t_a, _) = fuse_appearance(&mut g, gq, t_s, ka);
        let expect_a = attention_oracle(&f_g, &expect, &f_a);
        for i in 0..5 {
            for c in 0..16 {
                assert!((g.value(t_a)[[i, c]] - expect_a[[i, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn convex_hull_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f_g, f_a, f_s) = (randn(&mut rng, 8, 16), randn(&mut rng, 8, 16), randn(&mut rng, 8, 16));
        let mut g = Graph::new();
        let (gq, ka, vs) = (g.constant(f_g), g.constant(f_a), g.constant(f_s.clone()));
        let (t_s, _) = fuse_semantic(&mut g, gq, ka, vs);
        for c in 0..16 {
            let lo = (0..8).map(|r| f_s[[r, c]]).fold(f64::INFINITY, f64::min);
            let hi = (0..8).map(|r| f_s[[r, c]]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..8 {
                let v = g.value(t_s)[[i, c]];
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_fusion(&mut store, &mut rng);
        let (f_g, f_a, f_s) = (randn(&mut rng, 6, 16), randn(&mut rng, 6, 16), randn(&mut rng, 6, 16));
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let permute = |x: &Array2<f64>| {
            Array2::from_shape_fn(x.dim(), |(r, c)| x[[perm[r], c]])
        };
        let run = |f_g: &Array2<f64>, f_a: &Array2<f64>, f_s: &Array2<f64>| -> Array2<f64> {
            let mut g = Graph::new();
            let vars = store.leaves(&mut g);
            let tokens = TokenBatch {
                f_g: g.constant(f_g.clone()),
                f_a: g.constant(f_a.clone()),
                f_s: g.constant(f_s.clone()),
            };
            let fused = fuse_map(&mut g, &vars, tokens, true);
            g.value(fused.fm).clone()
        };
        let base = run(&f_g, &f_a, &f_s);
        let perm_out = run(&permute(&f_g), &permute(&f_a), &permute(&f_s));
        for r in 0..6 {
            for c in 0..48 {
                assert!((perm_out[[r, c]] - base[[perm[r], c]]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn ff_off_is_plain_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        init_fusion(&mut store, &mut rng);
        let (f_g, f_a, f_s) = (randn(&mut rng, 4, 16), randn(&mut rng, 4, 16), randn(&mut rng, 4, 16));
        let mut g = Graph::new();
        let vars = store.leaves(&mut g);
        let tokens = TokenBatch {
            f_g: g.constant(f_g.clone()),
            f_a: g.constant(f_a.clone()),
            f_s: g.constant(f_s.clone()),
        };
        let fused = fuse_map(&mut g, &vars, tokens, false);
        for r in 0..4 {
            for c in 0..16 {
                assert_eq!(g.value(fused.fm)[[r, c]], f_g[[r, c]]);
                assert_eq!(g.value(fused.fm)[[r, 16 + c]], f_a[[r, c]]);
                assert_eq!(g.value(fused.fm)[[r, 32 + c]], f_s[[r, c]]);
            }
        }
    }

    #[test]
    fn zero_weight_fusion_mlp_gives_bias_rows_and_wellformed_fm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        init_fusion(&mut store, &mut rng);
        store.insert("net.f.w2", Array2::zeros((32, 16)));
        let bias = randn(&mut rng, 1, 16);
        store.insert("net.f.b2", bias.clone());
        let (f_g, f_a, f_s) = (randn(&mut rng, 4, 16), randn(&mut rng, 4, 16), randn(&mut rng, 4, 16));
        let mut g = Graph::new();
        let vars = store.leaves(&mut g);
        let tokens = TokenBatch {
            f_g: g.constant(f_g),
            f_a: g.constant(f_a),
            f_s: g.constant(f_s),
        };
        let fused = fuse_map(&mut g, &vars, tokens, true);
        assert_eq!(g.shape(fused.fm), (4, 48));
        for r in 0..4 {
            for c in 0..16 {
                assert_eq!(g.value(fused.t_a_prime)[[r, c]], bias[[0, c]]);
            }
        }
    }

    #[test]
    fn fm_slices_recompose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        init_fusion(&mut store, &mut rng);
        let mut g = Graph::new();
        let vars = store.leaves(&mut g);
        let tokens = TokenBatch {
            f_g: g.constant(randn(&mut rng, 5, 16)),
            f_a: g.constant(randn(&mut rng, 5, 16)),
            f_s: g.constant(randn(&mut rng, 5, 16)),
        };
        let fused = fuse_map(&mut g, &vars, tokens, true);
        let s0 = g.slice_cols(fused.fm, 0, 16);
        let s1 = g.slice_cols(fused.fm, 16, 32);
        let s2 = g.slice_cols(fused.fm, 32, 48);
        assert_eq!(g.value(s0), g.value(fused.f_g));
        assert_eq!(g.value(s1), g.value(fused.t_a_prime));
        assert_eq!(g.value(s2), g.value(fused.t_s));
    }

    #[test]
    fn low_temperature_appearance_selects_argmax() {
        // orthogonal queries with one dominant key match each: as the scale
        // shrinks, each output row approaches the matched value row.
        let n = 4;
        let mut f_g = Array2::zeros((n, 16));
        for i in 0..n {
            f_g[[i, i]] = 60.0; // large queries push the softmax toward argmax
        }
        let t_s = f_g.clone(); // keys aligned with queries
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f_a = randn(&mut rng, n, 16);
        let mut g = Graph::new();
        let (gq, ks, va) = (g.constant(f_g), g.constant(t_s), g.constant(f_a.clone()));
        let (t_a, _) = fuse_appearance(&mut g, gq, ks, va);
        for i in 0..n {
            for c in 0..16 {
                assert!(
                    (g.value(t_a)[[i, c]] - f_a[[i, c]]).abs() < 1e-3,
                    "row {i} ch {c}: {} vs {}",
                    g.value(t_a)[[i, c]],
                    f_a[[i, c]]
                );
            }
        }
    }

    #[test]
    fn end_to_end_gradient_wrt_f_s_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        init_fusion(&mut store, &mut rng);
        let (f_g0, f_a0, f_s0) = (randn(&mut rng, 4, 16), randn(&mut rng, 4, 16), randn(&mut rng, 4, 16));
        let run = |f_s: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut g = Graph::new();
            let vars = store.leaves(&mut g);
            let fsv = g.leaf(f_s.clone());
            let tokens = TokenBatch {
                f_g: g.constant(f_g0.clone()),
                f_a: g.constant(f_a0.clone()),
                f_s: fsv,
            };
            let fused = fuse_map(&mut g, &vars, tokens, true);
            let sq = g.square(fused.fm);
            let l = g.sum_all(sq);
            g.backward(l);
            (g.scalar(l), g.grad(fsv).unwrap().clone())
        };
        let (_, analytic) = run(&f_s0);
        let fd = fd_grad(&mut |x| run(x).0, &f_s0, 1e-6);
        assert!(rel_err(&analytic, &fd) < 1e-4, "{}", rel_err(&analytic, &fd));
    }
}
