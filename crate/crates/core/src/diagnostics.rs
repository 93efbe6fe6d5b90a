//! Activation-distribution diagnostics.
//!
//! The support-mismatch analyses work on spatially-averaged per-channel
//! activation rows captured at normalization layers, the penultimate
//! embedding, and the logits. A summary keeps moments, optionally the full
//! channel covariance, and a capped reservoir sample of raw rows.
//!
//! The discrepancy measure is the test-sample average of the log density
//! ratio ln q̂(h) − ln p̂(h) between moment-matched multivariate normals for
//! the test (q̂) and training (p̂) activation distributions. Note the naming
//! subtlety: this estimator is the sample form of KL(q̂‖p̂), even though
//! support-mismatch discussions often write the direction as KL(p‖q). The
//! formula is implemented exactly as stated here.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::substream;
use crate::tensor::{Scalar, Tensor};

/// Retained-row cap per layer per source.
pub const DEFAULT_SAMPLE_CAP: usize = 4096;
/// Ridge coefficient: λ = RIDGE_SCALE · mean(diag Σ).
pub const RIDGE_SCALE: Scalar = 1e-6;

/// Per-layer, per-channel activation statistics from one forward source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub layer: String,
    /// Data provenance: "train" or a split id.
    pub source: String,
    /// Normalization mode tag the capture ran under.
    pub mode: String,
    pub mean: Vec<Scalar>,
    pub var: Vec<Scalar>,
    /// Row-major d×d channel covariance; present for penultimate/logits
    /// layers, absent for wide internal layers (diagonal moments suffice).
    pub covariance: Option<Vec<Scalar>>,
    /// Reservoir-sampled rows, row-major `retained × dim`.
    pub samples: Vec<Scalar>,
    pub dim: usize,
    pub retained: usize,
    pub total_rows: usize,
}

/// Build a summary from `[n, d]` activation rows.
pub fn summarize_rows(
    layer: &str,
    source: &str,
    mode: &str,
    rows: &Tensor,
    with_covariance: bool,
    sample_cap: usize,
    seed: u64,
) -> Result<ActivationSummary> {
    let (n, d) = match rows.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "activation rows must be n×d, got {other:?}"
            )))
        }
    };
    let data = rows.data();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += data[i * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as Scalar;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let c = data[i * d + j] - mean[j];
            var[j] += c * c;
        }
    }
    for v in &mut var {
        *v /= n as Scalar;
    }
    let covariance = if with_covariance {
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            for a in 0..d {
                let ca = data[i * d + a] - mean[a];
                for b in a..d {
                    cov[a * d + b] += ca * (data[i * d + b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / n as Scalar;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        Some(cov)
    } else {
        None
    };

    // reservoir sample of rows, fixed seed
    let mut rng = substream(seed, &format!("reservoir-{layer}-{source}"));
    let keep = sample_cap.min(n);
    let mut kept: Vec<usize> = (0..keep).collect();
    for i in keep..n {
        let j = rng.gen_range(0..=i);
        if j < keep {
            kept[j] = i;
        }
    }
    let mut samples = Vec::with_capacity(keep * d);
    for &i in &kept {
        samples.extend_from_slice(&data[i * d..(i + 1) * d]);
    }

    Ok(ActivationSummary {
        layer: layer.to_string(),
        source: source.to_string(),
        mode: mode.to_string(),
        mean,
        var,
        covariance,
        samples,
        dim: d,
        retained: keep,
        total_rows: n,
    })
}

impl ActivationSummary {
    pub fn sample_rows(&self) -> Result<Tensor> {
        Tensor::new(&[self.retained, self.dim], self.samples.clone())
    }
}

fn ridged_covariance(summary: &ActivationSummary) -> DMatrix<Scalar> {
    let d = summary.dim;
    let mut m = match &summary.covariance {
        Some(cov) => DMatrix::from_row_slice(d, d, cov),
        None => {
            // diagonal moment matching for layers without a stored covariance
            let mut m = DMatrix::zeros(d, d);
            for j in 0..d {
                m[(j, j)] = summary.var[j];
            }
            m
        }
    };
    let mean_diag: Scalar = (0..d).map(|j| m[(j, j)]).sum::<Scalar>() / d as Scalar;
    let ridge = RIDGE_SCALE * mean_diag.max(Scalar::MIN_POSITIVE);
    for j in 0..d {
        m[(j, j)] += ridge;
    }
    m
}

struct GaussianLogDensity {
    mean: DVector<Scalar>,
    chol: nalgebra::Cholesky<Scalar, nalgebra::Dyn>,
    log_norm: Scalar,
}

impl GaussianLogDensity {
    fn fit(summary: &ActivationSummary) -> Result<Self> {
        let d = summary.dim;
        let cov = ridged_covariance(summary);
        let chol = nalgebra::Cholesky::new(cov).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "covariance for {}/{} is singular even after ridge regularization",
                summary.layer, summary.source
            ))
        })?;
        let log_det: Scalar = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm = -0.5 * (d as Scalar * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(GaussianLogDensity {
            mean: DVector::from_row_slice(&summary.mean),
            chol,
            log_norm,
        })
    }

    fn log_pdf(&self, x: &DVector<Scalar>) -> Scalar {
        let centered = x - &self.mean;
        let solved = self.chol.solve(&centered);
        self.log_norm - 0.5 * centered.dot(&solved)
    }
}

/// Mean over test samples of ln q̂(h) − ln p̂(h), with p̂ and q̂ the
/// moment-matched normals of the training and test summaries. Swapping the
/// two summaries negates the estimate exactly (same samples).
pub fn gaussian_kl_discrepancy(
    train_summary: &ActivationSummary,
    test_summary: &ActivationSummary,
    test_samples: &Tensor,
) -> Result<Scalar> {
    if train_summary.dim != test_summary.dim {
        return Err(Error::ShapeMismatch(format!(
            "summaries disagree on channel count: {} vs {}",
            train_summary.dim, test_summary.dim
        )));
    }
    if train_summary.layer != test_summary.layer {
        return Err(Error::InvalidArgument(format!(
            "summaries are from different layers: {} vs {}",
            train_summary.layer, test_summary.layer
        )));
    }
    let (t, d) = match test_samples.shape() {
        [t, d] => (*t, *d),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "test samples must be t×d, got {other:?}"
            )))
        }
    };
    if d != train_summary.dim {
        return Err(Error::ShapeMismatch(format!(
            "samples have {d} channels, summaries {}",
            train_summary.dim
        )));
    }
    let p_hat = GaussianLogDensity::fit(train_summary)?;
    let q_hat = GaussianLogDensity::fit(test_summary)?;
    let mut total = 0.0;
    for i in 0..t {
        let x = DVector::from_row_slice(&test_samples.data()[i * d..(i + 1) * d]);
        total += q_hat.log_pdf(&x) - p_hat.log_pdf(&x);
    }
    let out = total / t as Scalar;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("discrepancy estimate is {out}")));
    }
    Ok(out)
}

/// Descending eigenvalues of the summary's covariance matrix via a
/// symmetric eigensolver. Tiny negative values (> −1e-8) are clamped to 0;
/// asymmetry beyond 1e-8 is an error.
pub fn covariance_eigenspectrum(summary: &ActivationSummary) -> Result<Vec<Scalar>> {
    let cov = summary.covariance.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("no covariance stored for layer {}", summary.layer))
    })?;
    let d = summary.dim;
    for a in 0..d {
        for b in 0..d {
            if (cov[a * d + b] - cov[b * d + a]).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "covariance asymmetric at ({a}, {b})"
                )));
            }
        }
    }
    let m = DMatrix::from_row_slice(d, d, cov);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut vals: Vec<Scalar> = eig.eigenvalues.iter().cloned().collect();
    for v in &mut vals {
        if *v < 0.0 && *v > -1e-8 {
            *v = 0.0;
        }
    }
    vals.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    Ok(vals)
}

/// One bin of a per-channel activation histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramRow {
    pub layer: String,
    pub source: String,
    pub channel: usize,
    pub bin: usize,
    pub lo: Scalar,
    pub hi: Scalar,
    pub count: usize,
}

/// Equal-width histograms of retained samples for the selected channels,
/// over a range shared across all compared summaries so the histograms can
/// be overlaid.
pub fn histogram_dump(
    summaries: &[&ActivationSummary],
    channels: &[usize],
    bins: usize,
) -> Result<Vec<HistogramRow>> {
    if summaries.is_empty() || bins == 0 {
        return Err(Error::InvalidArgument("need ≥ 1 summary and ≥ 1 bin".into()));
    }
    let d = summaries[0].dim;
    for s in summaries {
        if s.dim != d {
            return Err(Error::ShapeMismatch("summaries disagree on channel count".into()));
        }
        if s.retained == 0 {
            return Err(Error::InvalidArgument(format!(
                "summary {}/{} holds no samples",
                s.layer, s.source
            )));
        }
    }
    let mut out = Vec::new();
    for &ch in channels {
        if ch >= d {
            return Err(Error::InvalidArgument(format!("channel {ch} out of {d}")));
        }
        let mut lo = Scalar::INFINITY;
        let mut hi = Scalar::NEG_INFINITY;
        for s in summaries {
            for i in 0..s.retained {
                let v = s.samples[i * d + ch];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as Scalar;
        for s in summaries {
            let mut counts = vec![0usize; bins];
            for i in 0..s.retained {
                let v = s.samples[i * d + ch];
                let b = (((v - lo) / width).floor() as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, &count) in counts.iter().enumerate() {
                out.push(HistogramRow {
                    layer: s.layer.clone(),
                    source: s.source.clone(),
                    channel: ch,
                    bin: b,
                    lo: lo + b as Scalar * width,
                    hi: lo + (b + 1) as Scalar * width,
                    count,
                });
            }
        }
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks over ties.
pub fn spearman(xs: &[Scalar], ys: &[Scalar]) -> Result<Scalar> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs ≥ 2 paired values".into()));
    }
    let rank = |vals: &[Scalar]| -> Vec<Scalar> {
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("finite values"));
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
                j += 1;
            }
            let avg = (i + j) as Scalar / 2.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as Scalar;
    let mx = rx.iter().sum::<Scalar>() / n;
    let my = ry.iter().sum::<Scalar>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        let a = rx[i] - mx;
        let b = ry[i] - my;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("constant ranks; correlation undefined".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn rows_from(data: Vec<Scalar>, n: usize, d: usize) -> Tensor {
        Tensor::new(&[n, d], data).unwrap()
    }

    fn gaussian_rows(n: usize, mean: Scalar, std: Scalar, seed: u64) -> Tensor {
        let mut rng = substream(seed, "diag-test");
        let data: Vec<Scalar> =
            (0..n).map(|_| mean + std * rng.sample::<Scalar, _>(StandardNormal)).collect();
        rows_from(data, n, 1)
    }

    #[test]
    fn summary_moments_match_direct_computation() {
        let rows = rows_from(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2);
        let s = summarize_rows("penultimate", "train", "ema", &rows, true, 10, 0).unwrap();
        assert!((s.mean[0] - 3.0).abs() < 1e-12);
        assert!((s.mean[1] - 4.0).abs() < 1e-12);
        let cov = s.covariance.as_ref().unwrap();
        // channel 0 values 1,3,5 → var 8/3; channels perfectly correlated
        assert!((cov[0] - 8.0 / 3.0).abs() < 1e-12);
        assert!((cov[1] - cov[2]).abs() < 1e-15);
        assert_eq!(s.retained, 3);
    }

    #[test]
    fn discrepancy_identical_summaries_near_zero() {
        let rows = gaussian_rows(5000, 0.0, 1.0, 1);
        let s = summarize_rows("penultimate", "train", "ema", &rows, true, 5000, 0).unwrap();
        let d = gaussian_kl_discrepancy(&s, &s, &rows).unwrap();
        assert!(d.abs() < 1e-9, "self-discrepancy {d}");
    }

    #[test]
    fn discrepancy_matches_closed_form_gaussian_kl() {
        // p̂ = N(0,1), q̂ = N(1,1), samples from q → E_q[ln q̂ − ln p̂] = 1/2.
        let train = gaussian_rows(20_000, 0.0, 1.0, 2);
        let test = gaussian_rows(20_000, 1.0, 1.0, 3);
        let sp = summarize_rows("penultimate", "train", "ema", &train, true, 64, 0).unwrap();
        let sq = summarize_rows("penultimate", "shift", "ema", &test, true, 64, 0).unwrap();
        let d = gaussian_kl_discrepancy(&sp, &sq, &test).unwrap();
        assert!((d - 0.5).abs() < 0.05, "estimate {d}");
    }

    #[test]
    fn discrepancy_antisymmetric_under_summary_swap() {
        let a_rows = gaussian_rows(2000, 0.0, 1.0, 4);
        let b_rows = gaussian_rows(2000, 0.7, 1.3, 5);
        let sa = summarize_rows("logits", "train", "ema", &a_rows, true, 64, 0).unwrap();
        let sb = summarize_rows("logits", "shift", "ema", &b_rows, true, 64, 0).unwrap();
        let fwd = gaussian_kl_discrepancy(&sa, &sb, &b_rows).unwrap();
        let rev = gaussian_kl_discrepancy(&sb, &sa, &b_rows).unwrap();
        assert!((fwd + rev).abs() < 1e-12);
    }

    #[test]
    fn eigenspectrum_identity_and_diagonal() {
        let mut s = summarize_rows(
            "penultimate",
            "train",
            "ema",
            &rows_from(vec![0.0; 10], 2, 5),
            true,
            10,
            0,
        )
        .unwrap();
        let mut eye = vec![0.0; 25];
        for i in 0..5 {
            eye[i * 5 + i] = 1.0;
        }
        s.covariance = Some(eye);
        let vals = covariance_eigenspectrum(&s).unwrap();
        for v in &vals {
            assert!((v - 1.0).abs() < 1e-12);
        }

        let mut s2 = s.clone();
        s2.dim = 2;
        s2.mean = vec![0.0; 2];
        s2.var = vec![0.0; 2];
        s2.covariance = Some(vec![3.0, 0.0, 0.0, 1.0]);
        assert_eq!(covariance_eigenspectrum(&s2).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn eigenspectrum_matches_power_iteration_oracle_and_trace() {
        // random symmetric PSD 4×4 built as AᵀA
        let mut rng = substream(11, "psd");
        let a: Vec<Scalar> = (0..16).map(|_| rng.sample::<Scalar, _>(StandardNormal)).collect();
        let mut cov = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[k * 4 + i] * a[k * 4 + j];
                }
                cov[i * 4 + j] = s;
            }
        }
        let summary = ActivationSummary {
            layer: "logits".into(),
            source: "train".into(),
            mode: "ema".into(),
            mean: vec![0.0; 4],
            var: (0..4).map(|i| cov[i * 4 + i]).collect(),
            covariance: Some(cov.clone()),
            samples: vec![0.0; 4],
            dim: 4,
            retained: 1,
            total_rows: 1,
        };
        let vals = covariance_eigenspectrum(&summary).unwrap();

        // independent oracle: power iteration with deflation
        let mut work = cov.clone();
        let mut oracle = Vec::new();
        for _ in 0..4 {
            let mut v = [1.0, 0.5, -0.3, 0.8];
            let mut lambda = 0.0;
            for _ in 0..10_000 {
                let mut nv = [0.0; 4];
                for i in 0..4 {
                    for j in 0..4 {
                        nv[i] += work[i * 4 + j] * v[j];
                    }
                }
                let norm = nv.iter().map(|x| x * x).sum::<Scalar>().sqrt();
                if norm < 1e-300 {
                    break;
                }
                for i in 0..4 {
                    v[i] = nv[i] / norm;
                }
                lambda = norm;
            }
            oracle.push(lambda);
            for i in 0..4 {
                for j in 0..4 {
                    work[i * 4 + j] -= lambda * v[i] * v[j];
                }
            }
        }
        for (got, want) in vals.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        let trace: Scalar = (0..4).map(|i| cov[i * 4 + i]).sum();
        let sum: Scalar = vals.iter().sum();
        assert!((trace - sum).abs() < 1e-8);
        assert!(vals.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let summary = ActivationSummary {
            layer: "logits".into(),
            source: "train".into(),
            mode: "ema".into(),
            mean: vec![0.0; 2],
            var: vec![1.0; 2],
            covariance: Some(vec![1.0, 0.5, 0.2, 1.0]),
            samples: vec![0.0; 2],
            dim: 2,
            retained: 1,
            total_rows: 1,
        };
        assert!(covariance_eigenspectrum(&summary).is_err());
    }

    #[test]
    fn histogram_counts_and_degenerate_samples() {
        let rows = rows_from(vec![2.5; 7], 7, 1);
        let s = summarize_rows("norm0", "train", "batch", &rows, false, 100, 0).unwrap();
        let hist = histogram_dump(&[&s], &[0], 10).unwrap();
        let occupied: Vec<_> = hist.iter().filter(|r| r.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(occupied[0].count, 7);

        let uniform: Vec<Scalar> = (0..1000).map(|i| i as Scalar / 1000.0).collect();
        let s2 = summarize_rows("norm0", "t", "batch", &rows_from(uniform, 1000, 1), false, 2000, 0)
            .unwrap();
        let hist2 = histogram_dump(&[&s2], &[0], 10).unwrap();
        let total: usize = hist2.iter().map(|r| r.count).sum();
        assert_eq!(total, 1000);
        let bound = 4.0 * (1000.0_f64 / 10.0).sqrt();
        for r in &hist2 {
            assert!((r.count as f64 - 100.0).abs() <= bound);
        }
    }

    #[test]
    fn histogram_shares_range_across_sources() {
        let a = summarize_rows("l", "train", "ema", &rows_from(vec![0.0, 1.0], 2, 1), false, 10, 0)
            .unwrap();
        let b = summarize_rows("l", "shift", "ema", &rows_from(vec![9.0, 10.0], 2, 1), false, 10, 0)
            .unwrap();
        let hist = histogram_dump(&[&a, &b], &[0], 5).unwrap();
        let lo = hist.iter().map(|r| r.lo).fold(f64::INFINITY, f64::min);
        let hi = hist.iter().map(|r| r.hi).fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - 0.0).abs() < 1e-12);
        assert!((hi - 10.0).abs() < 1e-12);
    }

    #[test]
    fn reservoir_is_deterministic_and_capped() {
        let mut rng = substream(9, "res");
        let data: Vec<Scalar> = (0..500).map(|_| rng.sample::<Scalar, _>(StandardNormal)).collect();
        let rows = rows_from(data, 500, 1);
        let a = summarize_rows("l", "s", "m", &rows, false, 100, 3).unwrap();
        let b = summarize_rows("l", "s", "m", &rows, false, 100, 3).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.retained, 100);
        assert_eq!(a.total_rows, 500);
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 6.0, 8.0, 10.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let yr: Vec<f64> = y.iter().rev().cloned().collect();
        assert!((spearman(&x, &yr).unwrap() + 1.0).abs() < 1e-12);
        // monotone nonlinear map: still rank correlation 1
        let ynl: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        assert!((spearman(&x, &ynl).unwrap() - 1.0).abs() < 1e-12);
    }
}
