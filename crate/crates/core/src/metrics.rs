//! Evaluation metrics for classification (WAR, UAR, weighted F1) and
//! regression (PCC, CCC, ACC). Correlations use population moments.

use crate::error::{Result, SvfapError};

fn check_pairs<T>(preds: &[T], labels: &[T]) -> Result<()> {
    if preds.is_empty() {
        return Err(SvfapError::InvalidArgument("empty evaluation batch".into()));
    }
    if preds.len() != labels.len() {
        return Err(SvfapError::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn check_classes(preds: &[usize], labels: &[usize], k: usize) -> Result<()> {
    check_pairs(preds, labels)?;
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(SvfapError::InvalidArgument(format!("class {bad} outside [0, {k})")));
    }
    Ok(())
}

/// `m[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_classes(preds, labels, k)?;
    let mut m = vec![vec![0; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

/// Overall accuracy.
pub fn war(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean per-class recall over the classes present in `labels`, together
/// with the classes skipped for having no samples.
pub fn uar_with_excluded(preds: &[usize], labels: &[usize], k: usize) -> Result<(f64, Vec<usize>)> {
    let m = confusion_matrix(preds, labels, k)?;
    let mut recalls = Vec::new();
    let mut excluded = Vec::new();
    for (c, row) in m.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            excluded.push(c);
        } else {
            recalls.push(row[c] as f64 / support as f64);
        }
    }
    Ok((recalls.iter().sum::<f64>() / recalls.len() as f64, excluded))
}

pub fn uar(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    uar_with_excluded(preds, labels, k).map(|(v, _)| v)
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    let m = confusion_matrix(preds, labels, k)?;
    let n = preds.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        let tp = m[c][c] as f64;
        let support: usize = m[c].iter().sum();
        let predicted: usize = m.iter().map(|row| row[c]).sum();
        let denom = (support + predicted) as f64;
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        total += support as f64 / n * f1;
    }
    Ok(total)
}

struct Moments {
    mean_p: f64,
    mean_t: f64,
    var_p: f64,
    var_t: f64,
    cov: f64,
}

fn moments(pred: &[f64], truth: &[f64]) -> Result<Moments> {
    check_pairs(pred, truth)?;
    if !pred.iter().chain(truth).all(|v| v.is_finite()) {
        return Err(SvfapError::NonFinite("metric inputs".into()));
    }
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_t = truth.iter().sum::<f64>() / n;
    let (mut var_p, mut var_t, mut cov) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        var_p += (p - mean_p) * (p - mean_p);
        var_t += (t - mean_t) * (t - mean_t);
        cov += (p - mean_p) * (t - mean_t);
    }
    Ok(Moments {
        mean_p,
        mean_t,
        var_p: var_p / n,
        var_t: var_t / n,
        cov: cov / n,
    })
}

pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let m = moments(pred, truth)?;
    if m.var_p == 0.0 || m.var_t == 0.0 {
        return Err(SvfapError::UndefinedMetric("PCC of a constant sequence".into()));
    }
    Ok(m.cov / (m.var_p.sqrt() * m.var_t.sqrt()))
}

pub fn ccc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let m = moments(pred, truth)?;
    let denom = m.var_p + m.var_t + (m.mean_p - m.mean_t).powi(2);
    if denom == 0.0 {
        return Err(SvfapError::UndefinedMetric("CCC of two equal constant sequences".into()));
    }
    Ok(2.0 * m.cov / denom)
}

/// 1 − mean absolute error.
pub fn acc_personality(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred, truth)?;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
    Ok(1.0 - mae)
}

/// Metrics for one evaluation run, in a fixed printing order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable(pub Vec<(String, f64)>);

impl MetricTable {
    pub fn classification(preds: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        Ok(MetricTable(vec![
            ("uar".into(), uar(preds, labels, k)?),
            ("war".into(), war(preds, labels)?),
            ("weighted_f1".into(), weighted_f1(preds, labels, k)?),
        ]))
    }

    /// Per-dimension and averaged PCC/CCC/ACC; undefined correlations are
    /// reported as NaN.
    pub fn regression(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Self> {
        check_pairs(pred, truth)?;
        let dims = truth[0].len();
        if pred.iter().chain(truth).any(|v| v.len() != dims) {
            return Err(SvfapError::shape("score vectors differ in length"));
        }
        let mut rows = Vec::new();
        let mut sums = [0.0; 3];
        for d in 0..dims {
            let p: Vec<f64> = pred.iter().map(|v| v[d]).collect();
            let t: Vec<f64> = truth.iter().map(|v| v[d]).collect();
            let vals = [
                pcc(&p, &t).unwrap_or(f64::NAN),
                ccc(&p, &t).unwrap_or(f64::NAN),
                acc_personality(&p, &t)?,
            ];
            for (i, name) in ["pcc", "ccc", "acc"].iter().enumerate() {
                rows.push((format!("{name}_{d}"), vals[i]));
                sums[i] += vals[i];
            }
        }
        for (i, name) in ["pcc", "ccc", "acc"].iter().enumerate() {
            rows.push((format!("{name}_mean"), sums[i] / dims as f64));
        }
        Ok(MetricTable(rows))
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_text(&self) -> String {
        let width = self.0.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  value\n", "metric");
        for (n, v) in &self.0 {
            s.push_str(&format!("{n:<width$}  {v:.6}\n"));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (n, v) in &self.0 {
            s.push_str(&format!("{n},{v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn war_examples() {
        assert_eq!(war(&[1, 2, 0], &[1, 2, 0]).unwrap(), 1.0);
        assert_eq!(war(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap(), 0.75);
        assert_eq!(war(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(war(&[], &[]).is_err());
    }

    #[test]
    fn uar_examples() {
        assert_eq!(uar(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert!(close(uar(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap(), 0.833333));
        assert_eq!(uar(&[0; 10], &[0, 0, 0, 0, 0, 0, 0, 0, 1, 1], 2).unwrap(), 0.5);
        let (v, excluded) = uar_with_excluded(&[0, 1], &[0, 0], 3).unwrap();
        assert_eq!((v, excluded), (0.5, vec![1, 2]));
        assert!(uar(&[3], &[0], 3).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(weighted_f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        assert!(close(weighted_f1(&[0, 1, 1], &[0, 0, 1], 2).unwrap(), 0.666667));
        assert_eq!(weighted_f1(&[2, 2], &[2, 2], 4).unwrap(), 1.0);
    }

    #[test]
    fn correlation_examples() {
        let y = [1.0, 2.0, 3.0];
        assert!(close(pcc(&y, &y).unwrap(), 1.0));
        assert!(close(pcc(&[-1.0, -2.0, -3.0], &y).unwrap(), -1.0));
        assert!((pcc(&[1.0, 2.0, 4.0], &y).unwrap() - 0.981981).abs() < 1e-5);
        assert!(matches!(pcc(&[1.0; 3], &y), Err(SvfapError::UndefinedMetric(_))));
        assert!(close(ccc(&y, &y).unwrap(), 1.0));
        assert_eq!(ccc(&[2.0; 3], &y).unwrap(), 0.0);
        assert!(ccc(&[2.0; 3], &[2.0; 3]).is_err());
    }

    #[test]
    fn acc_examples() {
        assert_eq!(acc_personality(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 1.0);
        assert_eq!(acc_personality(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(acc_personality(&[0.6], &[0.5]).unwrap(), 0.9));
        assert!(acc_personality(&[0.6], &[0.5, 0.1]).is_err());
    }

    #[test]
    fn balanced_sets_give_equal_war_and_uar() {
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 1, 1, 0, 2];
        assert!(close(war(&preds, &labels).unwrap(), uar(&preds, &labels, 3).unwrap()));
    }

    #[test]
    fn metric_table_formats() {
        let t = MetricTable::classification(&[0, 1], &[0, 1], 2).unwrap();
        assert_eq!(t.get("war"), Some(1.0));
        assert!(t.to_csv().starts_with("metric,value\nuar,1\n"));
        let r = MetricTable::regression(&[vec![0.1, 0.5], vec![0.3, 0.5]], &[vec![0.1, 0.4], vec![0.3, 0.6]]).unwrap();
        assert!(close(r.get("pcc_0").unwrap(), 1.0));
        assert!(r.get("pcc_1").unwrap().is_nan());
    }

    proptest! {
        #[test]
        fn ccc_bounded_by_pcc(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Ok(r), Ok(c)) = (pcc(&p, &t), ccc(&p, &t)) {
                prop_assert!(c.abs() <= r.abs() + 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            }
        }
    }
}
