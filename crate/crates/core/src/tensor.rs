//! Dense channel-last tensors and the handful of kernels a small CNN needs.
//!
//! Everything is computed in `f64` with a fixed loop nest, so two runs on the
//! same inputs are bit-identical. Feature maps are `(batch, height, width,
//! channels)`, conv kernels `(kh, kw, c_in, c_out)`, depthwise kernels
//! `(kh, kw, c, 1)`.

use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

/// Per-channel reduction over every axis but the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    /// Sum of squares.
    pub energy: f64,
}

impl ChannelStats {
    /// Largest magnitude seen in the channel.
    pub fn extremum(&self) -> f64 {
        self.max.abs().max(self.min.abs())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {expected} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the trailing (channel) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least 1")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Concatenates along the batch axis. All parts must agree on the trailing axes.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyTensor("concat_batch"))?;
        let tail = &first.shape[1..];
        let mut batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::InvalidTensor(format!(
                    "cannot batch shapes {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Tensor::new(shape, data)
    }

    /// Scales every slice along the trailing axis by the matching factor.
    pub fn scale_channels(&self, factors: &[f64]) -> Result<Tensor> {
        let c = self.channels();
        if factors.len() != c {
            return Err(Error::ShapeMismatch {
                context: "scale_channels".into(),
                dimension: "channels",
                expected: c,
                actual: factors.len(),
            });
        }
        let mut out = self.clone();
        for (i, x) in out.data.iter_mut().enumerate() {
            *x *= factors[i % c];
        }
        Ok(out)
    }

    fn feature_dims(&self, context: &str) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                dimension: "rank",
                expected: 4,
                actual: self.rank(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }
}

/// Output extent and leading pad for one spatial axis.
pub(crate) fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            if input < kernel {
                (0, 0)
            } else {
                ((input - kernel) / stride + 1, 0)
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(input);
            (out, needed / 2)
        }
    }
}

fn check_stride(stride: (usize, usize), context: &str) -> Result<()> {
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::InvalidTensor(format!("{context}: stride must be positive")));
    }
    Ok(())
}

fn check_bias(bias: &Tensor, expected: usize, context: &str) -> Result<()> {
    if bias.rank() != 1 || bias.len() != expected {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            dimension: "bias length",
            expected,
            actual: bias.len(),
        });
    }
    Ok(())
}

/// Standard 2-D cross-correlation plus bias.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let (n, h, w, cin) = input.feature_dims("conv2d input")?;
    if kernel.rank() != 4 {
        return Err(Error::ShapeMismatch {
            context: "conv2d kernel".into(),
            dimension: "rank",
            expected: 4,
            actual: kernel.rank(),
        });
    }
    let (kh, kw, kcin, cout) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if kcin != cin {
        return Err(Error::ShapeMismatch {
            context: "conv2d".into(),
            dimension: "input channels",
            expected: kcin,
            actual: cin,
        });
    }
    check_bias(bias, cout, "conv2d")?;
    check_stride(stride, "conv2d")?;
    let (oh, pad_top) = output_extent(h, kh, stride.0, padding);
    let (ow, pad_left) = output_extent(w, kw, stride.1, padding);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidTensor(format!(
            "conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with valid padding"
        )));
    }

    let mut out = vec![0.0; n * oh * ow * cout];
    let mut acc = vec![0.0; cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(&bias.data);
                for ky in 0..kh {
                    let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let k_base = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let x = input.data[in_base + ci];
                            let row = &kernel.data[k_base + ci * cout..k_base + (ci + 1) * cout];
                            for (a, &k) in acc.iter_mut().zip(row) {
                                *a += x * k;
                            }
                        }
                    }
                }
                let out_base = ((b * oh + oy) * ow + ox) * cout;
                out[out_base..out_base + cout].copy_from_slice(&acc);
            }
        }
    }
    Tensor::new(vec![n, oh, ow, cout], out)
}

/// Depthwise convolution: output channel `i` reads only input channel `i`.
/// Accepts kernels shaped `(kh, kw, c, 1)` or `(kh, kw, c)`.
pub fn depthwise_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let (n, h, w, c) = input.feature_dims("depthwise_conv2d input")?;
    let (kh, kw, kc) = match kernel.shape.as_slice() {
        [kh, kw, kc, 1] | [kh, kw, kc] => (*kh, *kw, *kc),
        other => {
            return Err(Error::InvalidTensor(format!(
                "depthwise kernel must be (kh, kw, c, 1) or (kh, kw, c), got {other:?}"
            )))
        }
    };
    if kc != c {
        return Err(Error::ShapeMismatch {
            context: "depthwise_conv2d".into(),
            dimension: "channels",
            expected: kc,
            actual: c,
        });
    }
    check_bias(bias, c, "depthwise_conv2d")?;
    check_stride(stride, "depthwise_conv2d")?;
    let (oh, pad_top) = output_extent(h, kh, stride.0, padding);
    let (ow, pad_left) = output_extent(w, kw, stride.1, padding);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidTensor(format!(
            "depthwise_conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with valid padding"
        )));
    }

    let mut out = vec![0.0; n * oh * ow * c];
    let mut acc = vec![0.0; c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(&bias.data);
                for ky in 0..kh {
                    let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = ((b * h + iy as usize) * w + ix as usize) * c;
                        let k_base = (ky * kw + kx) * c;
                        for ch in 0..c {
                            acc[ch] += input.data[in_base + ch] * kernel.data[k_base + ch];
                        }
                    }
                }
                let out_base = ((b * oh + oy) * ow + ox) * c;
                out[out_base..out_base + c].copy_from_slice(&acc);
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c], out)
}

/// Element-wise activation. PReLU slopes broadcast along the channel axis.
pub fn apply_activation(x: &Tensor, kind: &ActivationKind) -> Result<Tensor> {
    match kind {
        ActivationKind::Linear => Ok(x.clone()),
        ActivationKind::Relu => Ok(x.map(|v| v.max(0.0))),
        ActivationKind::Relu6 => Ok(x.map(|v| v.clamp(0.0, 6.0))),
        ActivationKind::Prelu { slopes } => {
            let c = x.channels();
            match slopes.len() {
                1 => {
                    let a = slopes[0];
                    Ok(x.map(|v| if v >= 0.0 { v } else { a * v }))
                }
                n if n == c => {
                    let mut out = x.clone();
                    for (i, v) in out.data.iter_mut().enumerate() {
                        if *v < 0.0 {
                            *v *= slopes[i % c];
                        }
                    }
                    Ok(out)
                }
                n => Err(Error::ShapeMismatch {
                    context: "prelu".into(),
                    dimension: "slope count",
                    expected: c,
                    actual: n,
                }),
            }
        }
    }
}

/// Per-channel min, max and sum of squares, reduced over every other axis.
pub fn channel_stats(x: &Tensor) -> Result<Vec<ChannelStats>> {
    if x.is_empty() {
        return Err(Error::EmptyTensor("channel_stats"));
    }
    let c = x.channels();
    let mut stats = vec![
        ChannelStats {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            energy: 0.0,
        };
        c
    ];
    for row in x.data.chunks_exact(c) {
        for (s, &v) in stats.iter_mut().zip(row) {
            s.min = s.min.min(v);
            s.max = s.max.max(v);
            s.energy += v * v;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn scalar_conv_is_multiply_add() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &k, &Tensor::vector(vec![1.0]), (1, 1), Padding::Valid).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = random(vec![2, 3, 4, 3], 1);
        let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
        for i in 0..3 {
            k.data_mut()[i * 3 + i] = 1.0;
        }
        let y = conv2d(&x, &k, &Tensor::zeros(vec![3]), (1, 1), Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::filled(vec![1, 3, 3, 1], 1.0);
        let k = Tensor::filled(vec![3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(vec![1]), (1, 1), Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn same_padding_keeps_extent_and_zero_pads() {
        let x = Tensor::filled(vec![1, 3, 3, 1], 1.0);
        let k = Tensor::filled(vec![3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(vec![1]), (1, 1), Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 1]);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        let y2 = conv2d(&x, &k, &Tensor::zeros(vec![1]), (2, 2), Padding::Same).unwrap();
        assert_eq!(y2.shape(), &[1, 2, 2, 1]);
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let x = Tensor::zeros(vec![1, 2, 2, 3]);
        let k = Tensor::zeros(vec![1, 1, 2, 4]);
        match conv2d(&x, &k, &Tensor::zeros(vec![4]), (1, 1), Padding::Valid) {
            Err(Error::ShapeMismatch { dimension, .. }) => assert_eq!(dimension, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
        let k = Tensor::zeros(vec![1, 1, 3, 4]);
        match conv2d(&x, &k, &Tensor::zeros(vec![2]), (1, 1), Padding::Valid) {
            Err(Error::ShapeMismatch { dimension, .. }) => assert_eq!(dimension, "bias length"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn depthwise_scales_each_channel() {
        let x = Tensor::filled(vec![1, 1, 1, 2], 1.0);
        let k = Tensor::new(vec![1, 1, 2, 1], vec![2.0, 3.0]).unwrap();
        let y = depthwise_conv2d(&x, &k, &Tensor::zeros(vec![2]), (1, 1), Padding::Valid).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
        let k3 = Tensor::new(vec![1, 1, 2], vec![2.0, 3.0]).unwrap();
        let y3 = depthwise_conv2d(&x, &k3, &Tensor::zeros(vec![2]), (1, 1), Padding::Valid).unwrap();
        assert_eq!(y3, y);
    }

    #[test]
    fn depthwise_zero_kernel_broadcasts_bias() {
        let x = random(vec![1, 3, 3, 2], 4);
        let k = Tensor::zeros(vec![3, 3, 2, 1]);
        let y = depthwise_conv2d(&x, &k, &Tensor::vector(vec![0.5, -2.0]), (1, 1), Padding::Same).unwrap();
        for px in y.data().chunks(2) {
            assert_eq!(px, &[0.5, -2.0]);
        }
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let x = random(vec![1, 4, 4, 3], 7);
        let k = random(vec![3, 3, 3, 1], 8);
        let b = random(vec![3], 9);
        let y = depthwise_conv2d(&x, &k, &b, (1, 1), Padding::Same).unwrap();
        for ch in 0..3 {
            let xc: Vec<f64> = x.data().iter().skip(ch).step_by(3).copied().collect();
            let kc: Vec<f64> = k.data().iter().skip(ch).step_by(3).copied().collect();
            let yc = conv2d(
                &Tensor::new(vec![1, 4, 4, 1], xc).unwrap(),
                &Tensor::new(vec![3, 3, 1, 1], kc).unwrap(),
                &Tensor::vector(vec![b.data()[ch]]),
                (1, 1),
                Padding::Same,
            )
            .unwrap();
            let got: Vec<f64> = y.data().iter().skip(ch).step_by(3).copied().collect();
            assert_eq!(got, yc.data());
        }
    }

    #[test]
    fn depthwise_channel_mismatch_errors() {
        let x = Tensor::zeros(vec![1, 2, 2, 3]);
        let k = Tensor::zeros(vec![1, 1, 2, 1]);
        assert!(depthwise_conv2d(&x, &k, &Tensor::zeros(vec![2]), (1, 1), Padding::Valid).is_err());
    }

    #[test]
    fn activations() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(apply_activation(&x, &ActivationKind::Relu).unwrap().data(), &[0.0, 0.0, 2.0]);
        let y = apply_activation(&Tensor::vector(vec![7.5]), &ActivationKind::Relu6).unwrap();
        assert_eq!(y.data(), &[6.0]);
        let p = ActivationKind::Prelu { slopes: vec![0.25] };
        assert_eq!(apply_activation(&Tensor::vector(vec![-4.0]), &p).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn relu6_is_not_homogeneous_past_saturation() {
        let x = Tensor::vector(vec![4.0]);
        let scaled = apply_activation(&x.scaled(2.0), &ActivationKind::Relu6).unwrap();
        let expected = apply_activation(&x, &ActivationKind::Relu6).unwrap().scaled(2.0);
        assert_ne!(scaled, expected);
    }

    #[test]
    fn channel_stats_examples() {
        let s = channel_stats(&Tensor::vector(vec![-1.0, 2.0]).reshape_for_test(vec![2, 1])).unwrap();
        assert_eq!(s[0], ChannelStats { min: -1.0, max: 2.0, energy: 5.0 });
        let z = channel_stats(&Tensor::zeros(vec![1, 2, 2, 1])).unwrap();
        assert_eq!(z[0], ChannelStats { min: 0.0, max: 0.0, energy: 0.0 });
    }

    #[test]
    fn channel_stats_matches_naive_loop() {
        let x = random(vec![2, 3, 3, 4], 11);
        let stats = channel_stats(&x).unwrap();
        let (n, h, w, c) = (2, 3, 3, 4);
        for ch in 0..c {
            let mut vals = Vec::new();
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        vals.push(x.data()[((b * h + y) * w + xx) * c + ch]);
                    }
                }
            }
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let energy: f64 = vals.iter().map(|v| v * v).sum();
            assert_eq!(stats[ch].min, min);
            assert_eq!(stats[ch].max, max);
            assert!((stats[ch].energy - energy).abs() <= 1e-12 * energy);
        }
    }

    #[test]
    fn channel_stats_rejects_empty() {
        let t = Tensor { shape: vec![0], data: vec![] };
        assert!(matches!(channel_stats(&t), Err(Error::EmptyTensor(_))));
    }

    impl Tensor {
        fn reshape_for_test(self, shape: Vec<usize>) -> Tensor {
            Tensor::new(shape, self.data).unwrap()
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn homogeneous_activations_commute_with_positive_scaling(
                xs in proptest::collection::vec(-100.0f64..100.0, 1..32),
                alpha in 0.01f64..100.0,
                slope in 0.0f64..1.0,
            ) {
                let x = Tensor::vector(xs);
                for kind in [
                    ActivationKind::Linear,
                    ActivationKind::Relu,
                    ActivationKind::Prelu { slopes: vec![slope] },
                ] {
                    let lhs = apply_activation(&x.scaled(alpha), &kind).unwrap();
                    let rhs = apply_activation(&x, &kind).unwrap().scaled(alpha);
                    for (a, b) in lhs.data().iter().zip(rhs.data()) {
                        // Both sides round the same product once, except PReLU which
                        // multiplies twice; allow one ulp-scale difference there.
                        prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()));
                    }
                }
            }

            #[test]
            fn conv_is_linear_in_kernel_and_bias(seed in 0u64..1000, alpha in 0.01f64..50.0) {
                let x = random(vec![1, 4, 4, 2], seed);
                let k = random(vec![3, 3, 2, 3], seed + 1);
                let b = random(vec![3], seed + 2);
                let base = conv2d(&x, &k, &b, (1, 1), Padding::Same).unwrap();
                let scaled = conv2d(&x, &k.scaled(alpha), &b.scaled(alpha), (1, 1), Padding::Same).unwrap();
                for (s, b) in scaled.data().iter().zip(base.data()) {
                    let want = alpha * b;
                    prop_assert!((s - want).abs() <= 1e-12 * want.abs().max(1e-300) + 1e-13 * alpha);
                }
            }

            #[test]
            fn depthwise_channels_are_independent(seed in 0u64..1000, ch in 0usize..3, delta in -5.0f64..5.0) {
                let x = random(vec![1, 4, 4, 3], seed);
                let k = random(vec![3, 3, 3, 1], seed + 1);
                let b = Tensor::zeros(vec![3]);
                let y = depthwise_conv2d(&x, &k, &b, (1, 1), Padding::Same).unwrap();
                let mut xp = x.clone();
                for (i, v) in xp.data_mut().iter_mut().enumerate() {
                    if i % 3 == ch { *v += delta; }
                }
                let yp = depthwise_conv2d(&xp, &k, &b, (1, 1), Padding::Same).unwrap();
                for (i, (a, b)) in y.data().iter().zip(yp.data()).enumerate() {
                    if i % 3 != ch { prop_assert_eq!(a, b); }
                }
            }
        }
    }
}
