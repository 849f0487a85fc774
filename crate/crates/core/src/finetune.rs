//! Downstream heads: global average pooling, an affine head, the
//! classification and regression losses, and two-clip inference.

use ndarray::ArrayView4;

use crate::data::sample_clip;
use crate::error::{Result, SvfapError};
use crate::params::ParamSpec;
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

pub fn head_specs(dim: usize, outputs: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::dense("head.weight", dim, outputs),
        ParamSpec::bias("head.bias", outputs),
    ]
}

/// Mean over tokens, then `head.weight`/`head.bias`. Returns a 1×K row.
pub fn pool_and_predict_node(t: &mut Tape, x: Var) -> Var {
    let pooled = t.mean_rows(x);
    let w = t.param("head.weight");
    let b = t.param("head.bias");
    let y = t.matmul(pooled, w);
    t.add_row(y, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub weight: Mat,
    pub bias: Mat,
}

impl HeadWeights {
    pub fn new(weight: Mat, bias: Mat) -> Result<Self> {
        if bias.dim() != (1, weight.ncols()) {
            return Err(SvfapError::shape(format!(
                "head bias {:?} for weight {:?}",
                bias.dim(),
                weight.dim()
            )));
        }
        if !weight.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(SvfapError::NonFinite("head weights".into()));
        }
        Ok(HeadWeights { weight, bias })
    }
}

pub fn pool_and_predict(x: &Mat, head: &HeadWeights) -> Result<Vec<f64>> {
    if x.nrows() == 0 {
        return Err(SvfapError::InvalidArgument("no tokens to pool".into()));
    }
    if x.ncols() != head.weight.nrows() {
        return Err(SvfapError::shape(format!(
            "tokens of width {} for a head expecting {}",
            x.ncols(),
            head.weight.nrows()
        )));
    }
    let pooled = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    Ok((pooled.dot(&head.weight) + head.bias.row(0)).to_vec())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn ce_loss(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(SvfapError::InvalidArgument(format!(
            "target class {target} outside [0, {})",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(SvfapError::shape(format!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Start frames of the two evaluation clips: the first frame and the last
/// start that still fits a whole clip (0 when the video is too short).
pub fn two_clip_starts(frames: usize, clip_len: usize, stride: usize) -> [usize; 2] {
    let span = (clip_len.max(1) - 1) * stride + 1;
    [0, frames.saturating_sub(span)]
}

/// Averages the scores of the two evaluation clips; classification scores
/// are softmax probabilities, regression scores are raw outputs.
pub fn two_clip_inference<F>(
    video: ArrayView4<'_, f64>,
    clip_len: usize,
    stride: usize,
    task: Task,
    mut predict: F,
) -> Result<Vec<f64>>
where
    F: FnMut(ArrayView4<'_, f64>) -> Result<Vec<f64>>,
{
    if video.shape()[0] == 0 {
        return Err(SvfapError::InvalidArgument("empty video".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    for start in two_clip_starts(video.shape()[0], clip_len, stride) {
        let clip = sample_clip(video, clip_len, stride, start)?;
        let mut scores = predict(clip.view())?;
        if task == Task::Classification {
            scores = softmax(&scores);
        }
        acc = Some(match acc {
            None => scores,
            Some(a) => {
                if a.len() != scores.len() {
                    return Err(SvfapError::shape("clip predictions differ in length"));
                }
                a.iter().zip(&scores).map(|(x, y)| (x + y) / 2.0).collect()
            }
        });
    }
    Ok(acc.expect("two clips"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::Array4;
    use proptest::prelude::*;

    #[test]
    fn pooling_examples() {
        let head = HeadWeights::new(Mat::eye(3), Mat::zeros((1, 3))).unwrap();
        let x = Mat::from_shape_fn((5, 3), |(_, j)| j as f64 - 1.0);
        assert_eq!(pool_and_predict(&x, &head).unwrap(), vec![-1.0, 0.0, 1.0]);

        let bias = Mat::from_shape_vec((1, 2), vec![0.3, -0.7]).unwrap();
        let head = HeadWeights::new(Mat::zeros((512, 2)), bias).unwrap();
        let x = Mat::from_shape_fn((200, 512), |(i, j)| (i * j % 13) as f64);
        assert_eq!(pool_and_predict(&x, &head).unwrap(), vec![0.3, -0.7]);

        assert!(pool_and_predict(&Mat::zeros((0, 512)), &head).is_err());
        assert!(HeadWeights::new(Mat::zeros((2, 2)), Mat::zeros((1, 3))).is_err());
    }

    #[test]
    fn ce_examples() {
        let l = ce_loss(&[0.0; 7], 3).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!((l - 1.945910).abs() < 1e-6);
        assert!(ce_loss(&[0.0, 60.0, 0.0], 1).unwrap() < 1e-20);
        assert!(ce_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse_loss(&[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.5];
        let store = ParamStore::default();
        let mut t = Tape::new(&store);
        let l = t.input(Mat::from_shape_vec((1, 4), logits.clone()).unwrap());
        let out = t.cross_entropy(l, 2);
        let g = t.backward(out);
        let g = g.of(l).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (ce_loss(&p, 2).unwrap() - ce_loss(&m, 2).unwrap()) / (2.0 * h);
            assert!((fd - g[[0, i]]).abs() <= 1e-6 * fd.abs().max(1e-3), "logit {i}: {fd} vs {}", g[[0, i]]);
        }
    }

    #[test]
    fn two_clip_starts_follow_rule() {
        assert_eq!(two_clip_starts(100, 16, 4), [0, 100 - 61]);
        assert_eq!(two_clip_starts(61, 16, 4), [0, 0]);
        assert_eq!(two_clip_starts(20, 16, 4), [0, 0]);
    }

    #[test]
    fn two_clip_inference_averages_scores() {
        let video = Array4::from_shape_fn((40, 1, 1, 3), |(t, _, _, _)| t as f64);
        // regression: output first frame value; clips start at 0 and 40 − 13
        let out = two_clip_inference(video.view(), 4, 4, Task::Regression, |c| Ok(vec![c[[0, 0, 0, 0]]])).unwrap();
        assert_eq!(out, vec![(0.0 + 27.0) / 2.0]);

        let p = [vec![2.0f64.ln(), 0.0], vec![0.0, 3.0f64.ln()]];
        let mut calls = 0;
        let out = two_clip_inference(video.view(), 4, 4, Task::Classification, |_| {
            calls += 1;
            Ok(p[calls - 1].clone())
        })
        .unwrap();
        let expect = [(2.0 / 3.0 + 1.0 / 4.0) / 2.0, (1.0 / 3.0 + 3.0 / 4.0) / 2.0];
        assert!((out[0] - expect[0]).abs() < 1e-12 && (out[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn short_video_uses_one_clip_twice() {
        let video = Array4::from_shape_fn((5, 1, 1, 3), |(t, _, _, c)| (t * 3 + c) as f64);
        let single = |c: ArrayView4<'_, f64>| Ok(vec![c.sum(), c[[3, 0, 0, 1]]]);
        let two = two_clip_inference(video.view(), 8, 2, Task::Regression, single).unwrap();
        let clip = sample_clip(video.view(), 8, 2, 0).unwrap();
        assert_eq!(two, single(clip.view()).unwrap());
        let again = two_clip_inference(video.view(), 8, 2, Task::Regression, single).unwrap();
        assert_eq!(two, again);
        assert!(two_clip_inference(Array4::zeros((0, 1, 1, 3)).view(), 8, 2, Task::Regression, single).is_err());
    }

    proptest! {
        #[test]
        fn ce_is_shift_invariant(v in prop::collection::vec(-5.0f64..5.0, 2..8), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((ce_loss(&v, 0).unwrap() - ce_loss(&shifted, 0).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn mse_scales_quadratically(v in prop::collection::vec(-5.0f64..5.0, 1..8), c in 0.1f64..10.0) {
            let zero = vec![0.0; v.len()];
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let a = mse_loss(&scaled, &zero).unwrap();
            let b = c * c * mse_loss(&v, &zero).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }

        #[test]
        fn argmax_ignores_positive_logit_scaling(v in prop::collection::vec(-5.0f64..5.0, 2..8), c in 0.01f64..100.0) {
            let argmax = |x: &[f64]| x.iter().enumerate().fold(0, |b, (i, &y)| if y > x[b] { i } else { b });
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(argmax(&v), argmax(&scaled));
        }
    }
}
