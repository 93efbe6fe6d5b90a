//! Accuracy and calibration metrics, plus post-hoc temperature scaling.
//!
//! Conventions pinned here because every oracle test depends on them:
//! confidence is the max predicted class probability; argmax ties break
//! toward the lowest class index; a confidence exactly on a bin edge goes to
//! the higher bin, and confidence 1.0 to the last bin; log inputs to NLL are
//! clamped at [`NLL_CLAMP`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Floor for probabilities entering a logarithm.
pub const NLL_CLAMP: Scalar = 1e-12;

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_inputs(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = match probs.shape() {
        [n, k] => (*n, *k),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "probabilities must be n×K, got {other:?}"
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range 0..{k}")));
    }
    for i in 0..n {
        let row = &probs.data()[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for &p in row {
            if !(-1e-9..=1.0 + 1e-9).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not a distribution: probability {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "row {i} is not a distribution: sums to {sum}"
            )));
        }
    }
    Ok((n, k))
}

/// Equal-width confidence bins on [0, 1] with per-bin counts and sums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub num_bins: usize,
    pub counts: Vec<usize>,
    pub sum_conf: Vec<Scalar>,
    pub sum_correct: Vec<Scalar>,
}

impl CalibrationBins {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::InvalidArgument("at least one confidence bin required".into()));
        }
        Ok(CalibrationBins {
            num_bins,
            counts: vec![0; num_bins],
            sum_conf: vec![0.0; num_bins],
            sum_correct: vec![0.0; num_bins],
        })
    }

    /// Bin assignment rule shared by the implementation and its oracle:
    /// edge values go up, confidence 1.0 lands in the last bin.
    pub fn bin_index(confidence: Scalar, num_bins: usize) -> usize {
        ((confidence * num_bins as Scalar).floor() as usize).min(num_bins - 1)
    }

    pub fn add(&mut self, confidence: Scalar, correct: bool) {
        let b = Self::bin_index(confidence, self.num_bins);
        self.counts[b] += 1;
        self.sum_conf[b] += confidence;
        self.sum_correct[b] += if correct { 1.0 } else { 0.0 };
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Σ_b (|B_b|/N)·|acc(B_b) − conf(B_b)|; empty bins contribute 0.
    pub fn ece(&self) -> Scalar {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let mut e = 0.0;
        for b in 0..self.num_bins {
            if self.counts[b] == 0 {
                continue;
            }
            let cnt = self.counts[b] as Scalar;
            let acc = self.sum_correct[b] / cnt;
            let conf = self.sum_conf[b] / cnt;
            e += cnt / n as Scalar * (acc - conf).abs();
        }
        e
    }

    /// (lo, hi) edges of bin `b`.
    pub fn edges(&self, b: usize) -> (Scalar, Scalar) {
        let w = 1.0 / self.num_bins as Scalar;
        (b as Scalar * w, (b + 1) as Scalar * w)
    }
}

/// Fill confidence bins from predictions. `ece(probs, labels, 10)` and the
/// 100-bin reliability histogram both go through here.
pub fn calibration_bins(probs: &Tensor, labels: &[usize], num_bins: usize) -> Result<CalibrationBins> {
    let (n, k) = check_inputs(probs, labels)?;
    let mut bins = CalibrationBins::new(num_bins)?;
    for i in 0..n {
        let row = &probs.data()[i * k..(i + 1) * k];
        let pred = argmax(row);
        bins.add(row[pred], pred == labels[i]);
    }
    Ok(bins)
}

/// Expected calibration error over `num_bins` equal-width confidence bins.
pub fn ece(probs: &Tensor, labels: &[usize], num_bins: usize) -> Result<Scalar> {
    Ok(calibration_bins(probs, labels, num_bins)?.ece())
}

/// Fraction of rows whose argmax equals the label (exact integer count).
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<Scalar> {
    let (n, k) = check_inputs(probs, labels)?;
    let mut correct = 0usize;
    for i in 0..n {
        let row = &probs.data()[i * k..(i + 1) * k];
        if argmax(row) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as Scalar / n as Scalar)
}

/// Mean over examples of Σ_k (p_k − onehot_k)². The raw convention; divide
/// by K via [`brier_per_class`] for the per-class reading.
pub fn brier(probs: &Tensor, labels: &[usize]) -> Result<Scalar> {
    let (n, k) = check_inputs(probs, labels)?;
    let mut total = 0.0;
    for i in 0..n {
        let row = &probs.data()[i * k..(i + 1) * k];
        let mut s = 0.0;
        for (j, &p) in row.iter().enumerate() {
            let t = if j == labels[i] { 1.0 } else { 0.0 };
            s += (p - t) * (p - t);
        }
        total += s;
    }
    Ok(total / n as Scalar)
}

/// Brier score divided by the class count.
pub fn brier_per_class(probs: &Tensor, labels: &[usize]) -> Result<Scalar> {
    let k = probs.shape()[1] as Scalar;
    Ok(brier(probs, labels)? / k)
}

/// Mean negative log-likelihood with probabilities clamped at [`NLL_CLAMP`].
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<Scalar> {
    let (n, k) = check_inputs(probs, labels)?;
    let mut total = 0.0;
    for i in 0..n {
        let p = probs.data()[i * k + labels[i]].max(NLL_CLAMP);
        total -= p.ln();
    }
    Ok(total / n as Scalar)
}

/// Plain (non-tape) row softmax of logits divided by a temperature.
pub fn softmax_rows_with_temperature(logits: &Tensor, temperature: Scalar) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        other => return Err(Error::ShapeMismatch(format!("logits must be n×K, got {other:?}"))),
    };
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = ((row[j] - mx) / temperature).exp();
            out[i * k + j] = e;
            z += e;
        }
        for j in 0..k {
            out[i * k + j] /= z;
        }
    }
    Ok(Tensor::from_op(vec![n, k], out))
}

/// Result of fitting a softmax temperature on validation data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FittedTemperature {
    pub temperature: Scalar,
    /// Set when the validation labels contain a single class; the fit is
    /// skipped and T = 1 returned.
    pub degenerate: bool,
}

/// Temperature search bounds.
pub const TEMPERATURE_RANGE: (Scalar, Scalar) = (0.05, 20.0);

/// Fit T > 0 minimizing validation NLL of softmax(logits / T) by
/// golden-section search over log T. Dividing by a positive scalar never
/// changes the argmax, so accuracy is unaffected by construction.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<FittedTemperature> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        other => return Err(Error::ShapeMismatch(format!("logits must be n×K, got {other:?}"))),
    };
    if n == 0 || labels.len() != n {
        return Err(Error::ShapeMismatch("empty or mismatched validation set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range 0..{k}")));
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Ok(FittedTemperature { temperature: 1.0, degenerate: true });
    }

    let nll_at = |t: Scalar| -> Scalar {
        let mut total = 0.0;
        for i in 0..n {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let z: Scalar = row.iter().map(|&v| ((v - mx) / t).exp()).sum();
            total -= (row[labels[i]] - mx) / t - z.ln();
        }
        total / n as Scalar
    };

    let (mut lo, mut hi) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = nll_at(x1.exp());
    let mut f2 = nll_at(x2.exp());
    for _ in 0..90 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = nll_at(x1.exp());
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = nll_at(x2.exp());
        }
    }
    Ok(FittedTemperature { temperature: ((lo + hi) / 2.0).exp(), degenerate: false })
}

/// Area under the ROC curve by rank sum (Mann–Whitney U, average ranks over
/// ties). `labels` are binary; `scores` score the positive class.
pub fn auc(scores: &[Scalar], labels: &[bool]) -> Result<Scalar> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::ShapeMismatch("AUC needs equal, nonempty scores/labels".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average rank (1-based) for the tie block [i, j]
        let avg_rank = (i + j + 2) as Scalar / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as Scalar / 2.0;
    Ok(u / (n_pos as Scalar * n_neg as Scalar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn ece_zero_for_perfect_one_hot() {
        let p = probs(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ece(&p, &[0, 1, 0], 10).unwrap(), 0.0);
    }

    #[test]
    fn ece_hand_case() {
        // (conf .9, correct) and (conf .6, incorrect), 10 bins:
        // 0.5·|1−0.9| + 0.5·|0−0.6| = 0.35
        let p = probs(&[2, 2], &[0.9, 0.1, 0.6, 0.4]);
        let e = ece(&p, &[0, 1], 10).unwrap();
        assert!((e - 0.35).abs() < 1e-12);
    }

    #[test]
    fn ece_zero_for_uniform_predictions_at_chance_accuracy() {
        // conf = 1/K for every row, empirical accuracy exactly 1/K → ECE = 0.
        let row = [0.25; 4];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let p = probs(&[4, 4], &data);
        // argmax ties to class 0; one of four labels is 0.
        assert_eq!(ece(&p, &[0, 1, 2, 3], 10).unwrap(), 0.0);
    }

    #[test]
    fn ece_bin_edge_goes_to_higher_bin() {
        assert_eq!(CalibrationBins::bin_index(0.1, 10), 1);
        assert_eq!(CalibrationBins::bin_index(0.999999, 10), 9);
        assert_eq!(CalibrationBins::bin_index(1.0, 10), 9);
        assert_eq!(CalibrationBins::bin_index(0.0, 10), 0);
    }

    #[test]
    fn ece_rejects_invalid_rows() {
        let p = probs(&[1, 2], &[0.7, 0.7]);
        assert!(ece(&p, &[0], 10).is_err());
    }

    #[test]
    fn brier_hand_cases() {
        let perfect = probs(&[1, 3], &[0.0, 1.0, 0.0]);
        assert_eq!(brier(&perfect, &[1]).unwrap(), 0.0);

        let uniform3 = probs(&[1, 3], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!((brier(&uniform3, &[0]).unwrap() - 2.0 / 3.0).abs() < 1e-12);

        let half = probs(&[1, 2], &[0.5, 0.5]);
        assert!((brier(&half, &[1]).unwrap() - 0.5).abs() < 1e-12);

        assert!((brier_per_class(&uniform3, &[0]).unwrap() - 2.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn nll_hand_cases() {
        let perfect = probs(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(nll(&perfect, &[0, 1]).unwrap(), -(1.0_f64.ln()));

        let uniform4 = probs(&[1, 4], &[0.25; 4]);
        assert!((nll(&uniform4, &[2]).unwrap() - 4.0_f64.ln()).abs() < 1e-12);

        // confident wrong prediction is clamped, not −inf
        let wrong = probs(&[1, 2], &[1.0, 0.0]);
        let v = nll(&wrong, &[1]).unwrap();
        assert!(v.is_finite());
        assert!((v - (-NLL_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn accuracy_matches_label_frequency_for_fixed_prediction() {
        // Fixed argmax=0 prediction: accuracy is the empirical frequency of 0.
        let mut data = Vec::new();
        let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 3).collect();
        for _ in 0..40 {
            data.extend_from_slice(&[0.6, 0.3, 0.1]);
        }
        let p = probs(&[40, 3], &data);
        let freq0 = labels.iter().filter(|&&y| y == 0).count() as f64 / 40.0;
        assert_eq!(accuracy(&p, &labels).unwrap(), freq0);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn temperature_recovers_scaling_of_calibrated_logits() {
        // Build calibrated logits: logits = ln p_true, labels ~ p_true.
        use rand::Rng;
        let mut rng = crate::seeding::substream(424242, "temperature-oracle");
        let n = 8000;
        let k = 4;
        let mut logits = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let u = rng.gen::<f64>();
            let mut acc = 0.0;
            let mut y = k - 1;
            for (j, &pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    y = j;
                    break;
                }
            }
            labels.push(y);
            logits.extend(p.iter().map(|v| v.ln()));
        }
        let t_cal = Tensor::new(&[n, k], logits.clone()).unwrap();
        let fit = fit_temperature(&t_cal, &labels).unwrap();
        assert!(!fit.degenerate);
        assert!(
            (fit.temperature - 1.0).abs() < 0.05,
            "calibrated logits should fit T ≈ 1, got {}",
            fit.temperature
        );

        let scaled: Vec<f64> = logits.iter().map(|v| v * 3.0).collect();
        let t_scaled = Tensor::new(&[n, k], scaled).unwrap();
        let fit3 = fit_temperature(&t_scaled, &labels).unwrap();
        assert!(
            (fit3.temperature - 3.0).abs() < 0.15,
            "3× logits should fit T ≈ 3, got {}",
            fit3.temperature
        );
    }

    #[test]
    fn temperature_never_changes_argmax() {
        let logits = probs(&[3, 3], &[2.0, -1.0, 0.5, 0.0, 0.1, -3.0, 5.0, 5.5, 5.4]);
        for &t in &[0.05, 0.3, 1.0, 7.0, 20.0] {
            let p = softmax_rows_with_temperature(&logits, t).unwrap();
            for i in 0..3 {
                let zrow = &logits.data()[i * 3..(i + 1) * 3];
                let prow = &p.data()[i * 3..(i + 1) * 3];
                assert_eq!(argmax(zrow), argmax(prow));
            }
        }
    }

    #[test]
    fn temperature_degenerate_single_class() {
        let logits = probs(&[3, 2], &[1.0, 0.0, 2.0, 0.0, 0.5, 0.0]);
        let fit = fit_temperature(&logits, &[0, 0, 0]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.temperature, 1.0);
    }

    #[test]
    fn metrics_invariant_to_example_order() {
        let p = probs(
            &[4, 3],
            &[0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.25, 0.5, 0.25],
        );
        let labels = [0, 2, 1, 1];
        let perm = [2usize, 0, 3, 1];
        let mut pdata = Vec::new();
        let mut plabels = Vec::new();
        for &i in &perm {
            pdata.extend_from_slice(&p.data()[i * 3..(i + 1) * 3]);
            plabels.push(labels[i]);
        }
        let pp = probs(&[4, 3], &pdata);
        assert_eq!(ece(&p, &labels, 10).unwrap(), ece(&pp, &plabels, 10).unwrap());
        assert_eq!(accuracy(&p, &labels).unwrap(), accuracy(&pp, &plabels).unwrap());
        assert!((brier(&p, &labels).unwrap() - brier(&pp, &plabels).unwrap()).abs() < 1e-15);
        assert!((nll(&p, &labels).unwrap() - nll(&pp, &plabels).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn auc_hand_case_and_ties() {
        let auc1 = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc1 - 0.75).abs() < 1e-12);
        // all scores tied → AUC 0.5
        let auc2 = auc(&[0.3, 0.3, 0.3, 0.3], &[false, true, false, true]).unwrap();
        assert!((auc2 - 0.5).abs() < 1e-12);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }
}
