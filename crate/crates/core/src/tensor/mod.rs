//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Tensors are rank ≤ 4 with layout `batch × channel × height × width`
//! (rank 2 means `batch × feature`, i.e. H = W = 1). All arithmetic is
//! f64; execution order is fixed so results are reproducible bit for bit.

mod tape;

pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Project-wide float width.
pub type Scalar = f64;

/// Dense n-dimensional array. The value carrier for everything:
/// inputs, weights, activations, probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    /// Build a tensor, validating shape/data agreement and finiteness.
    /// Non-finite values are a hard error everywhere in this crate.
    pub fn new(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "rank {} exceeds the supported maximum of 4",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor contains {bad}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Internal constructor for op outputs. Finiteness is not checked here:
    /// diverging training can legitimately overflow, and the training loop /
    /// prediction surface turn that into a hard error where it can be
    /// reported with context.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<Scalar>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: Scalar) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a rank-0/one-element tensor.
    pub fn item(&self) -> Result<Scalar> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.data[0])
    }

    /// View any supported rank as (N, C, H, W). Rank 2 maps to (N, C, 1, 1);
    /// rank 1 to (1, C, 1, 1).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            [n, c] => Ok((*n, *c, 1, 1)),
            [c] => Ok((1, *c, 1, 1)),
            other => Err(Error::ShapeMismatch(format!(
                "cannot view shape {other:?} as N×C×H×W"
            ))),
        }
    }

    /// Number of examples (extent of the first axis).
    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Per-example flattened length.
    pub fn example_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Gather examples (rows of the first axis) by index into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::ShapeMismatch("gather_rows on scalar".into()));
        }
        let row = self.example_len();
        let n = self.batch_len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidArgument(format!("row index {i} out of {n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenate along the first axis. All inputs must share trailing dims.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let trailing = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != trailing {
                return Err(Error::ShapeMismatch("concat_rows trailing dims differ".into()));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().find(|v| !v.is_finite()) {
            Some(bad) => Err(Error::NonFinite(format!("tensor contains {bad}"))),
            None => Ok(()),
        }
    }
}

/// Statistic pooling axes for normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// One statistics group per channel, pooled over batch and spatial dims
    /// (batch normalization).
    PerChannel,
    /// `groups` statistics groups per example, each pooling a contiguous
    /// channel block plus spatial dims. groups = 1 is layer norm,
    /// groups = C is instance norm.
    PerSample { groups: usize },
}

impl Grouping {
    /// (number of groups, elements per group) for an (N, C, H, W) view.
    pub fn layout(&self, n: usize, c: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        match *self {
            Grouping::PerChannel => Ok((c, n * h * w)),
            Grouping::PerSample { groups } => {
                if groups == 0 || c % groups != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "channel count {c} not divisible by {groups} groups"
                    )));
                }
                Ok((n * groups, (c / groups) * h * w))
            }
        }
    }

    /// Group id of element (n, c) — spatial position never affects the group.
    #[inline]
    pub(crate) fn group_of(&self, n: usize, c: usize, channels: usize) -> usize {
        match *self {
            Grouping::PerChannel => c,
            Grouping::PerSample { groups } => n * groups + c / (channels / groups),
        }
    }
}

/// Per-group mean and biased variance (divisor = group size) of a tensor
/// viewed as N×C×H×W. This is the single source of statistics for every
/// normalization path in the crate.
pub fn group_stats(x: &Tensor, grouping: Grouping) -> Result<(Vec<Scalar>, Vec<Scalar>)> {
    let (n, c, h, w) = x.dims4()?;
    let (num_groups, group_len) = grouping.layout(n, c, h, w)?;
    if group_len == 0 {
        return Err(Error::InvalidArgument("empty statistics group".into()));
    }
    let mut mean = vec![0.0; num_groups];
    let data = x.data();
    let mut idx = 0;
    for ni in 0..n {
        for ci in 0..c {
            let g = grouping.group_of(ni, ci, c);
            for _ in 0..h * w {
                mean[g] += data[idx];
                idx += 1;
            }
        }
    }
    for m in &mut mean {
        *m /= group_len as Scalar;
    }
    let mut var = vec![0.0; num_groups];
    idx = 0;
    for ni in 0..n {
        for ci in 0..c {
            let g = grouping.group_of(ni, ci, c);
            for _ in 0..h * w {
                let d = data[idx] - mean[g];
                var[g] += d * d;
                idx += 1;
            }
        }
    }
    for v in &mut var {
        *v /= group_len as Scalar;
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn new_rejects_rank_over_four() {
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn gather_and_concat_round_trip() {
        let t = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(a.data(), &[5.0, 6.0, 1.0, 2.0]);
        let b = t.gather_rows(&[1]).unwrap();
        let joined = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(joined.shape(), &[3, 2]);
        assert_eq!(joined.data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn group_stats_per_channel_hand_case() {
        // Single channel, N=4, H=W=1: values 1..4 → mean 2.5, biased var 1.25.
        let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (mean, var) = group_stats(&x, Grouping::PerChannel).unwrap();
        assert_eq!(mean, vec![2.5]);
        assert_eq!(var, vec![1.25]);
    }

    #[test]
    fn group_stats_constant_input() {
        let x = Tensor::full(&[2, 3, 2, 2], 7.25);
        let (mean, var) = group_stats(&x, Grouping::PerChannel).unwrap();
        assert!(mean.iter().all(|&m| m == 7.25));
        assert!(var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_stats_matches_two_pass_loop_oracle() {
        // Independent naive oracle: explicit per-channel two-pass loops.
        let mut vals = Vec::new();
        let mut s = 0.123_f64;
        for _ in 0..2 * 3 * 4 * 4 {
            s = (s * 997.0 + 0.61803).fract();
            vals.push(s * 4.0 - 2.0);
        }
        let x = Tensor::new(&[2, 3, 4, 4], vals.clone()).unwrap();
        let (mean, var) = group_stats(&x, Grouping::PerChannel).unwrap();
        for c in 0..3 {
            let mut collected = Vec::new();
            for n in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        collected.push(vals[((n * 3 + c) * 4 + h) * 4 + w]);
                    }
                }
            }
            let m: f64 = collected.iter().sum::<f64>() / collected.len() as f64;
            let v: f64 =
                collected.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / collected.len() as f64;
            assert!((mean[c] - m).abs() < 1e-6);
            assert!((var[c] - v).abs() < 1e-6);
        }
    }

    #[test]
    fn per_sample_grouping_requires_divisibility() {
        let x = Tensor::zeros(&[1, 5, 2, 2]);
        assert!(group_stats(&x, Grouping::PerSample { groups: 2 }).is_err());
        assert!(group_stats(&x, Grouping::PerSample { groups: 5 }).is_ok());
    }
}
