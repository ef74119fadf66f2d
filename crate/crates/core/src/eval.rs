//! Verification and identification metrics: FAR-calibrated thresholds, protection
//! success rates, ROC AUC and the one-sided sign test.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Cosine between two embeddings; zero when either is degenerate.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    crate::surgery::cosine(a, b)
}

/// Cosine scores of all cross-identity pairs `(i, j)`, `i < j`, in index order.
pub fn impostor_scores(embeddings: &Tensor<f64>, labels: &[usize]) -> Vec<f64> {
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                out.push(cosine(embeddings.row(i), embeddings.row(j)));
            }
        }
    }
    out
}

/// Smallest threshold `s` such that at most `far·N` impostor scores exceed `s`.
///
/// Acceptance is strict (`score > s`), so `far = 0` yields the largest impostor
/// score and `far = 1` the smallest.
pub fn far_threshold(impostor: &[f64], far: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&far) {
        return Err(Error::Invalid(format!("FAR {far} outside [0,1]")));
    }
    let n = impostor.len();
    let needed = if far > 0.0 { (1.0 / far).ceil() as usize } else { 1 };
    if n == 0 || n < needed {
        return Err(Error::Invalid(format!(
            "{n} impostor pairs cannot resolve FAR {far} (need {needed})"
        )));
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let allowed = ((far * n as f64) + 1e-9).floor() as usize;
    Ok(sorted[allowed.min(n - 1)])
}

/// Fraction of probe embeddings whose cosine to `target` exceeds `threshold`.
pub fn psr_verification(probes: &Tensor<f64>, target: &[f64], threshold: f64) -> Result<f64> {
    let (n, _) = probes.dims2();
    if n == 0 {
        return Err(Error::Invalid("empty protected set".into()));
    }
    let hits = (0..n)
        .filter(|&i| cosine(probes.row(i), target) > threshold)
        .count();
    Ok(hits as f64 / n as f64)
}

/// One template (mean embedding) per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub labels: Vec<usize>,
    pub templates: Vec<Vec<f64>>,
}

impl Gallery {
    pub fn from_embeddings(embeddings: &Tensor<f64>, labels: &[usize]) -> Result<Self> {
        let (n, d) = embeddings.dims2();
        if n != labels.len() || n == 0 {
            return Err(Error::shape("gallery", "labels and embeddings differ"));
        }
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut templates = Vec::with_capacity(ids.len());
        for &id in &ids {
            let mut m = vec![0.0; d];
            for i in (0..n).filter(|&i| labels[i] == id) {
                let u = tensor::normalize(embeddings.row(i))?;
                for (a, b) in m.iter_mut().zip(u) {
                    *a += b;
                }
            }
            templates.push(m);
        }
        Ok(Self {
            labels: ids,
            templates,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gallery labels by decreasing cosine to `probe`; ties broken by label.
    pub fn ranking(&self, probe: &[f64]) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .templates
            .iter()
            .zip(&self.labels)
            .map(|(t, &l)| (cosine(probe, t), l))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, l)| l).collect()
    }
}

/// Fraction of probes whose top-`n` gallery matches include `target`.
pub fn psr_rank_n(probes: &Tensor<f64>, gallery: &Gallery, target: usize, n: usize) -> Result<f64> {
    if n == 0 || n > gallery.len() {
        return Err(Error::Invalid(format!(
            "rank {n} outside 1..={}",
            gallery.len()
        )));
    }
    if !gallery.labels.contains(&target) {
        return Err(Error::Invalid(format!("target {target} not in gallery")));
    }
    let (rows, _) = probes.dims2();
    if rows == 0 {
        return Err(Error::Invalid("empty protected set".into()));
    }
    let hits = (0..rows)
        .filter(|&i| gallery.ranking(probes.row(i))[..n].contains(&target))
        .count();
    Ok(hits as f64 / rows as f64)
}

/// Probability that a genuine score beats an impostor score, ties counting half.
pub fn roc_auc(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Invalid("AUC needs both genuine and impostor scores".into()));
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for &g in genuine {
        let below = imp.partition_point(|&v| v < g);
        let not_above = imp.partition_point(|&v| v <= g);
        total += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(total / (genuine.len() as f64 * imp.len() as f64))
}

/// One-sided sign test: `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
/// Ties are dropped before calling.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k);
    }
    p / 2f64.powi(n as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn far_boundaries() {
        let s: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(far_threshold(&s, 1.0).unwrap(), 0.0);
        assert_eq!(far_threshold(&s, 0.0).unwrap(), 0.99);
        assert_eq!(far_threshold(&s, 0.01).unwrap(), 0.98);
        assert!(far_threshold(&s[..50], 0.01).is_err());
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test(5, 0), 1.0 / 32.0);
        assert_eq!(sign_test(4, 1), 6.0 / 32.0);
        assert_eq!(sign_test(0, 0), 1.0);
    }

    #[test]
    fn auc_values() {
        assert_eq!(roc_auc(&[1.0, 2.0], &[0.0, 0.5]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.0], &[0.0]).unwrap(), 0.5);
    }
}
