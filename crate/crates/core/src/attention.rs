//! Transformer primitives: multi-head self/cross attention, the GELU
//! feed-forward network, layer normalization and the pre-LN standard block.
//!
//! Graph-level functions read their weights from the tape by module path
//! (`{prefix}.wq`, `{prefix}.w1`, ...). The array-level wrappers at the
//! bottom of the file take explicit weights and validate their inputs.

use crate::error::{Result, SvfapError};
use crate::params::{ParamSpec, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-6;

pub fn attention_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    ["wq", "wk", "wv", "wo"]
        .iter()
        .map(|w| ParamSpec::dense(format!("{prefix}.{w}"), dim, dim))
        .collect()
}

pub fn ffn_specs(prefix: &str, dim: usize, hidden: usize, out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::dense(format!("{prefix}.w1"), dim, hidden),
        ParamSpec::bias(format!("{prefix}.b1"), hidden),
        ParamSpec::dense(format!("{prefix}.w2"), hidden, out),
        ParamSpec::bias(format!("{prefix}.b2"), out),
    ]
}

pub fn ln_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::ln_gain(format!("{prefix}.gain"), dim),
        ParamSpec::ln_bias(format!("{prefix}.bias"), dim),
    ]
}

pub fn standard_block_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    let mut v = ln_specs(&format!("{prefix}.ln1"), dim);
    v.extend(attention_specs(&format!("{prefix}.attn"), dim));
    v.extend(ln_specs(&format!("{prefix}.ln2"), dim));
    v.extend(ffn_specs(&format!("{prefix}.ffn"), dim, 4 * dim, dim));
    v
}

pub fn layer_norm(t: &mut Tape, prefix: &str, x: Var) -> Var {
    let gain = t.param(&format!("{prefix}.gain"));
    let bias = t.param(&format!("{prefix}.bias"));
    t.layer_norm(x, gain, bias, LN_EPS)
}

/// Cross attention with queries from `x` and keys/values from `y`.
/// Returns the output and the per-head attention matrices.
pub fn mhca_with_probs(t: &mut Tape, prefix: &str, x: Var, y: Var, heads: usize) -> (Var, Vec<Var>) {
    let dim = t.cols(x);
    assert_eq!(t.cols(y), dim, "query/key width mismatch");
    assert_eq!(dim % heads, 0, "width not divisible by heads");
    let dh = dim / heads;
    let wq = t.param(&format!("{prefix}.wq"));
    let wk = t.param(&format!("{prefix}.wk"));
    let wv = t.param(&format!("{prefix}.wv"));
    let wo = t.param(&format!("{prefix}.wo"));
    let q = t.matmul(x, wq);
    let k = t.matmul(y, wk);
    let v = t.matmul(y, wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let kt = t.transpose(kh);
        let logits = t.matmul(qh, kt);
        let logits = t.scale(logits, scale);
        let p = t.softmax_rows(logits);
        outs.push(t.matmul(p, vh));
        probs.push(p);
    }
    let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    (t.matmul(cat, wo), probs)
}

pub fn mhca(t: &mut Tape, prefix: &str, x: Var, y: Var, heads: usize) -> Var {
    mhca_with_probs(t, prefix, x, y, heads).0
}

pub fn mhsa(t: &mut Tape, prefix: &str, x: Var, heads: usize) -> Var {
    mhca(t, prefix, x, x, heads)
}

/// GELU(x·W1 + b1)·W2 + b2.
pub fn ffn(t: &mut Tape, prefix: &str, x: Var) -> Var {
    let w1 = t.param(&format!("{prefix}.w1"));
    let b1 = t.param(&format!("{prefix}.b1"));
    let w2 = t.param(&format!("{prefix}.w2"));
    let b2 = t.param(&format!("{prefix}.b2"));
    let h = t.matmul(x, w1);
    let h = t.add_row(h, b1);
    let h = t.gelu(h);
    let o = t.matmul(h, w2);
    t.add_row(o, b2)
}

/// Pre-LN block: MHSA then FFN, each wrapped in a residual.
pub fn standard_block(t: &mut Tape, prefix: &str, x: Var, heads: usize) -> Var {
    let n1 = layer_norm(t, &format!("{prefix}.ln1"), x);
    let a = mhsa(t, &format!("{prefix}.attn"), n1, heads);
    let y = t.add(a, x);
    let n2 = layer_norm(t, &format!("{prefix}.ln2"), y);
    let f = ffn(t, &format!("{prefix}.ffn"), n2);
    t.add(f, y)
}

/// Explicit attention weights; per-head projections are the column blocks
/// of `wq`, `wk`, `wv` (head h owns columns h·d_h..(h+1)·d_h).
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct FfnWeights {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl AttentionWeights {
    fn check(&self) -> Result<usize> {
        let c = self.wq.nrows();
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.dim() != (c, c) {
                return Err(SvfapError::shape(format!("{name} is {:?}, expected ({c}, {c})", w.dim())));
            }
            check_finite(name, w)?;
        }
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(SvfapError::shape(format!("width {c} not divisible by {} heads", self.heads)));
        }
        Ok(c)
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("attn.wq", self.wq.clone());
        s.insert("attn.wk", self.wk.clone());
        s.insert("attn.wv", self.wv.clone());
        s.insert("attn.wo", self.wo.clone());
        s
    }
}

fn check_finite(what: &str, m: &Mat) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SvfapError::NonFinite(what.to_string()))
    }
}

fn check_width(what: &str, m: &Mat, c: usize) -> Result<()> {
    if m.ncols() != c {
        return Err(SvfapError::shape(format!("{what} has width {}, expected {c}", m.ncols())));
    }
    check_finite(what, m)
}

/// Multi-head self attention; also returns the per-head softmax matrices.
pub fn mhsa_array(x: &Mat, w: &AttentionWeights) -> Result<(Mat, Vec<Mat>)> {
    mhca_array(x, x, w)
}

/// Multi-head cross attention: queries from `x`, keys and values from `y`.
pub fn mhca_array(x: &Mat, y: &Mat, w: &AttentionWeights) -> Result<(Mat, Vec<Mat>)> {
    let c = w.check()?;
    check_width("x", x, c)?;
    check_width("y", y, c)?;
    let store = w.store();
    let mut t = Tape::new(&store);
    let xv = t.constant(x.clone());
    let yv = if std::ptr::eq(x, y) { xv } else { t.constant(y.clone()) };
    let (out, probs) = mhca_with_probs(&mut t, "attn", xv, yv, w.heads);
    let probs = probs.iter().map(|&p| t.value(p).to_owned()).collect();
    Ok((t.value(out).to_owned(), probs))
}

pub fn ffn_array(x: &Mat, w: &FfnWeights) -> Result<Mat> {
    let c = w.w1.nrows();
    let hidden = w.w1.ncols();
    if w.b1.dim() != (1, hidden) || w.w2.nrows() != hidden || w.b2.dim() != (1, w.w2.ncols()) {
        return Err(SvfapError::shape("inconsistent feed-forward weights"));
    }
    check_width("x", x, c)?;
    let mut s = ParamStore::default();
    s.insert("ffn.w1", w.w1.clone());
    s.insert("ffn.b1", w.b1.clone());
    s.insert("ffn.w2", w.w2.clone());
    s.insert("ffn.b2", w.b2.clone());
    for (k, m) in s.iter() {
        check_finite(k, m)?;
    }
    let mut t = Tape::new(&s);
    let xv = t.constant(x.clone());
    let out = ffn(&mut t, "ffn", xv);
    Ok(t.value(out).to_owned())
}

/// Row-wise standardization over the feature axis followed by `gain`/`bias`.
pub fn layer_norm_array(x: &Mat, gain: &Mat, bias: &Mat, eps: f64) -> Result<Mat> {
    let c = x.ncols();
    if c < 2 {
        return Err(SvfapError::shape("layer norm needs at least two features"));
    }
    if gain.dim() != (1, c) || bias.dim() != (1, c) {
        return Err(SvfapError::shape("gain/bias must be 1×C"));
    }
    let store = ParamStore::default();
    let mut t = Tape::new(&store);
    let xv = t.constant(x.clone());
    let g = t.constant(gain.clone());
    let b = t.constant(bias.clone());
    let out = t.layer_norm(xv, g, b, eps);
    Ok(t.value(out).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    fn weights(c: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
        AttentionWeights {
            wq: randn(c, c, rng) * 0.5,
            wk: randn(c, c, rng) * 0.5,
            wv: randn(c, c, rng) * 0.5,
            wo: randn(c, c, rng) * 0.5,
            heads,
        }
    }

    /// Scalar head loop, independent of the tape.
    fn attention_oracle(x: &Mat, y: &Mat, w: &AttentionWeights) -> Mat {
        let c = x.ncols();
        let dh = c / w.heads;
        let proj = |m: &Mat, p: &Mat| {
            let mut o = Mat::zeros((m.nrows(), c));
            for i in 0..m.nrows() {
                for j in 0..c {
                    o[[i, j]] = (0..c).map(|k| m[[i, k]] * p[[k, j]]).sum();
                }
            }
            o
        };
        let q = proj(x, &w.wq);
        let k = proj(y, &w.wk);
        let v = proj(y, &w.wv);
        let mut cat = Mat::zeros((x.nrows(), c));
        for h in 0..w.heads {
            for i in 0..x.nrows() {
                let logits: Vec<f64> = (0..y.nrows())
                    .map(|j| {
                        (0..dh).map(|d| q[[i, h * dh + d]] * k[[j, h * dh + d]]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dh {
                    cat[[i, h * dh + d]] = (0..y.nrows()).map(|j| e[j] / z * v[[j, h * dh + d]]).sum();
                }
            }
        }
        proj(&cat, &w.wo)
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        let num = (a - b).mapv(|v| v * v).sum().sqrt();
        let den = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        num / den.max(1e-300)
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = weights(4, 2, &mut rng);
        let x = randn(1, 4, &mut rng);
        let (out, probs) = mhsa_array(&x, &w).unwrap();
        for p in &probs {
            assert_eq!(p, &array![[1.0]]);
        }
        let expected = x.dot(&w.wv).dot(&w.wo);
        assert!(rel_err(&out, &expected) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = weights(8, 4, &mut rng);
        let x = randn(6, 8, &mut rng);
        let (_, probs) = mhsa_array(&x, &w).unwrap();
        for p in probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mhsa_matches_head_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = weights(6, 2, &mut rng);
        let x = randn(3, 6, &mut rng);
        let (out, _) = mhsa_array(&x, &w).unwrap();
        assert!(rel_err(&out, &attention_oracle(&x, &x, &w)) < 1e-6);
    }

    #[test]
    fn mhca_matches_oracle_and_reduces_to_mhsa() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = weights(6, 3, &mut rng);
        let x = randn(4, 6, &mut rng);
        let y = randn(5, 6, &mut rng);
        let (out, _) = mhca_array(&x, &y, &w).unwrap();
        assert_eq!(out.dim(), (4, 6));
        assert!(rel_err(&out, &attention_oracle(&x, &y, &w)) < 1e-6);

        let x2 = x.clone();
        let (cross, _) = mhca_array(&x, &x2, &w).unwrap();
        let (selfa, _) = mhsa_array(&x, &w).unwrap();
        assert_eq!(cross, selfa);
    }

    #[test]
    fn single_key_cross_attention_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = weights(4, 2, &mut rng);
        let x = randn(5, 4, &mut rng);
        let y = randn(1, 4, &mut rng);
        let (out, probs) = mhca_array(&x, &y, &w).unwrap();
        assert!(probs.iter().all(|p| p.iter().all(|&v| v == 1.0)));
        let row = y.dot(&w.wv).dot(&w.wo);
        for r in out.rows() {
            for (a, b) in r.iter().zip(row.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = weights(8, 2, &mut rng);
        let x = randn(5, 8, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let px = x.select(ndarray::Axis(0), &perm);
        let (out, _) = mhsa_array(&x, &w).unwrap();
        let (pout, _) = mhsa_array(&px, &w).unwrap();
        assert!(rel_err(&pout, &out.select(ndarray::Axis(0), &perm)) < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = weights(4, 2, &mut rng);
        let mut x = randn(2, 4, &mut rng);
        x[[1, 1]] = f64::NAN;
        assert!(matches!(mhsa_array(&x, &w), Err(SvfapError::NonFinite(_))));
    }

    #[test]
    fn ffn_zero_input_and_gelu_value() {
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = FfnWeights {
            w1: randn(c, 4 * c, &mut rng),
            b1: Mat::zeros((1, 4 * c)),
            w2: randn(4 * c, c, &mut rng),
            b2: Mat::zeros((1, c)),
        };
        assert!(ffn_array(&Mat::zeros((2, c)), &w).unwrap().iter().all(|&v| v == 0.0));

        let id = FfnWeights {
            w1: Mat::eye(1),
            b1: Mat::zeros((1, 1)),
            w2: Mat::eye(1),
            b2: Mat::zeros((1, 1)),
        };
        let out = ffn_array(&array![[1.0]], &id).unwrap();
        assert!((out[[0, 0]] - 0.841345).abs() < 1e-5);
    }

    #[test]
    fn ffn_is_linear_in_second_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(3, 2, &mut rng);
        let base = FfnWeights {
            w1: randn(2, 8, &mut rng),
            b1: randn(1, 8, &mut rng),
            w2: randn(8, 2, &mut rng),
            b2: Mat::zeros((1, 2)),
        };
        let other = FfnWeights {
            w2: randn(8, 2, &mut rng),
            ..base.clone()
        };
        let sum = FfnWeights {
            w2: &base.w2 * 2.0 + &other.w2 * -0.5,
            ..base.clone()
        };
        let lhs = ffn_array(&x, &sum).unwrap();
        let rhs = ffn_array(&x, &base).unwrap() * 2.0 + ffn_array(&x, &other).unwrap() * -0.5;
        assert!(rel_err(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Mat::ones((1, 4));
        let zeros = Mat::zeros((1, 4));
        let out = layer_norm_array(&array![[2.0, 2.0, 2.0, 2.0]], &ones, &zeros, LN_EPS).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let out = layer_norm_array(&array![[1.0, 3.0]], &Mat::ones((1, 2)), &Mat::zeros((1, 2)), 0.0)
            .unwrap();
        assert_eq!(out, array![[-1.0, 1.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(5, 16, &mut rng) * 3.0 + 7.0;
        let out = layer_norm_array(&x, &Mat::ones((1, 16)), &Mat::zeros((1, 16)), LN_EPS).unwrap();
        for row in out.rows() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(layer_norm_array(&Mat::ones((2, 1)), &Mat::ones((1, 1)), &Mat::zeros((1, 1)), 0.0).is_err());
    }

    #[test]
    fn zero_sublayers_make_block_identity() {
        let c = 4;
        let specs = standard_block_specs("b", c);
        let mut store = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(10));
        for (name, m) in store.iter_mut() {
            if !name.contains(".ln") {
                m.fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(3, c, &mut rng);
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let out = standard_block(&mut t, "b", xv, 2);
        assert_eq!(t.value(out), x);
    }
}
