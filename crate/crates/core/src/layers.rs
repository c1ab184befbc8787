//! Neural building blocks: standard and depthwise separable convolution,
//! batch normalization, dropout, and the parameter-free resampling layers.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] and run against a
//! [`Session`], so the same layer description serves training (f32),
//! inference and double-precision gradient checks.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Kaiming-normal tensor: `N(0, 2 / fan_in)`.
fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.normal() * std))
}

/// Standard 2-D convolution (cross-correlation) with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Stride 1 with "same" padding `(k − 1)/2`.
    pub fn same<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::new(store, prefix, in_channels, out_channels, kernel, 1, (kernel - 1) / 2, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(
            format!("{prefix}.weight"),
            kaiming(&shape, in_channels * kernel * kernel, rng),
            true,
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]), true);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// `C_out·(C_in·k² + 1)`.
    pub fn closed_form_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * (in_channels * kernel * kernel + 1)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let c = s.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(channel_mismatch("conv2d", self.in_channels, s.tape.shape(x)));
        }
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Depthwise `k×k` convolution per input channel followed by a `1×1`
/// pointwise convolution that mixes channels. Stride 1, "same" padding.
#[derive(Debug, Clone)]
pub struct SeparableConv2d {
    pub depthwise_weight: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise_weight: ParamId,
    pub pointwise_bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl SeparableConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "separable convolution needs an odd kernel");
        let depthwise_weight = store.add(
            format!("{prefix}.dw_weight"),
            kaiming(&[in_channels, 1, kernel, kernel], kernel * kernel, rng),
            true,
        );
        let depthwise_bias = store.add(format!("{prefix}.dw_bias"), Tensor::zeros(&[in_channels]), true);
        let pointwise_weight = store.add(
            format!("{prefix}.pw_weight"),
            kaiming(&[out_channels, in_channels, 1, 1], in_channels, rng),
            true,
        );
        let pointwise_bias = store.add(format!("{prefix}.pw_bias"), Tensor::zeros(&[out_channels]), true);
        Self {
            depthwise_weight,
            depthwise_bias,
            pointwise_weight,
            pointwise_bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// `C_in·(k² + 1) + C_out·(C_in + 1)`.
    pub fn closed_form_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        in_channels * (kernel * kernel + 1) + out_channels * (in_channels + 1)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.depthwise_weight,
            self.depthwise_bias,
            self.pointwise_weight,
            self.pointwise_bias,
        ]
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let c = s.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(channel_mismatch("separable_conv2d", self.in_channels, s.tape.shape(x)));
        }
        let (dw, db) = (s.param(self.depthwise_weight), s.param(self.depthwise_bias));
        let spatial = s.tape.depthwise_conv2d(x, dw, db)?;
        let (pw, pb) = (s.param(self.pointwise_weight), s.param(self.pointwise_bias));
        s.tape.conv2d(spatial, pw, Some(pb), 1, 0)
    }

    /// The equivalent dense weight `W[o,i,:,:] = pw[o,i]·dw[i,:,:]` and bias
    /// `b[o] = pb[o] + Σ_i pw[o,i]·db[i]`.
    pub fn factored_weight<T: Scalar>(&self, store: &ParamStore<T>) -> (Tensor<T>, Tensor<T>) {
        let (ci, co, k) = (self.in_channels, self.out_channels, self.kernel);
        let dw = store.get(self.depthwise_weight).data();
        let db = store.get(self.depthwise_bias).data();
        let pw = store.get(self.pointwise_weight).data();
        let pb = store.get(self.pointwise_bias).data();
        let weight = Tensor::from_fn(&[co, ci, k, k], |idx| {
            let (o, i, t) = (idx / (ci * k * k), (idx / (k * k)) % ci, idx % (k * k));
            pw[o * ci + i] * dw[i * k * k + t]
        });
        let bias = Tensor::from_fn(&[co], |o| pb[o] + (0..ci).map(|i| pw[o * ci + i] * db[i]).sum::<T>());
        (weight, bias)
    }
}

/// Either convolution flavour, as used inside residual blocks.
#[derive(Debug, Clone)]
pub enum ConvLayer {
    Standard(Conv2d),
    Separable(SeparableConv2d),
}

impl ConvLayer {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        match self {
            Self::Standard(c) => c.forward(s, x),
            Self::Separable(c) => c.forward(s, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Self::Standard(c) => c.param_ids(),
            Self::Separable(c) => c.param_ids(),
        }
    }

    pub fn closed_form_count(&self) -> usize {
        match self {
            Self::Standard(c) => Conv2d::closed_form_count(c.in_channels, c.out_channels, c.kernel),
            Self::Separable(c) => SeparableConv2d::closed_form_count(c.in_channels, c.out_channels, c.kernel),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Standard(_) => "conv2d",
            Self::Separable(_) => "separable_conv2d",
        }
    }
}

/// Per-channel batch normalization with running statistics.
///
/// Training mode normalizes with the batch mean and biased variance and
/// queues running-average updates (`running ← (1 − m)·running + m·batch`,
/// unbiased variance); inference mode uses the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{prefix}.running_var"), Tensor::ones(&[channels]), false),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let c = s.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(channel_mismatch("batch_norm", self.channels, s.tape.shape(x)));
        }
        let (gamma, beta) = (s.param(self.gamma), s.param(self.beta));
        let eps = T::of(self.eps);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                let unbias = T::of(stats.count as f64 / (stats.count - 1) as f64);
                let store = s.store();
                let rm = store.get(self.running_mean);
                let rv = store.get(self.running_var);
                let new_mean = Tensor::from_fn(&[c], |i| keep * rm.data()[i] + m * stats.mean[i]);
                let new_var = Tensor::from_fn(&[c], |i| keep * rv.data()[i] + m * stats.var[i] * unbias);
                s.queue_update(self.running_mean, new_mean);
                s.queue_update(self.running_var, new_var);
                Ok(y)
            }
            Mode::Infer => {
                let store = s.store();
                let (rm, rv) = (store.get(self.running_mean), store.get(self.running_var));
                s.tape.batch_norm_infer(x, gamma, beta, rm.data(), rv.data(), eps)
            }
        }
    }
}

/// Inverted dropout; identity in inference mode.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        Ok(Self { rate })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        match s.mode() {
            Mode::Infer => Ok(x),
            Mode::Train => {
                let mut rng = s.rng().clone();
                let y = s.tape.dropout(x, self.rate, &mut rng);
                *s.rng() = rng;
                y
            }
        }
    }
}

/// Parameter-free 2× upsampling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Upsample {
    /// Bilinear, half-pixel centers, clamped borders; channels unchanged.
    Bilinear,
    /// Pixel shuffle with r = 2; channels divided by 4.
    Subpixel,
}

impl Upsample {
    pub fn out_channels(self, in_channels: usize) -> usize {
        match self {
            Self::Bilinear => in_channels,
            Self::Subpixel => in_channels / 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bilinear => "bilinear",
            Self::Subpixel => "subpixel",
        }
    }

    pub fn forward<T: Scalar>(self, s: &mut Session<T>, x: Var) -> Result<Var> {
        match self {
            Self::Bilinear => s.tape.upsample_bilinear_2x(x),
            Self::Subpixel => s.tape.pixel_shuffle(x, 2),
        }
    }
}

fn channel_mismatch(op: &'static str, expected: usize, shape: &[usize]) -> Error {
    Error::InvalidArgument {
        op,
        reason: format!("expected {expected} input channels, got input of shape {shape:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::kernels;
    use crate::rng::StreamKind;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    fn infer_session(store: &ParamStore<f64>) -> Session<'_, f64> {
        Session::new(store, Mode::Infer, Rng::new(0, 0))
    }

    #[test]
    fn unit_kernel_identity_conv() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(0, 0);
        let conv = Conv2d::same(&mut store, "c", 1, 1, 1, &mut rng);
        *store.get_mut(conv.weight) = Tensor::ones(&[1, 1, 1, 1]);
        let mut rng = Rng::new(1, 0);
        let x = random(&[2, 1, 3, 3], &mut rng);
        let mut s = infer_session(&store);
        let xv = s.tape.constant(x.clone());
        let y = conv.forward(&mut s, xv).unwrap();
        assert_eq!(s.tape.value(y), &x);
    }

    #[test]
    fn zero_weight_gives_bias_map() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(0, 0);
        let conv = Conv2d::same(&mut store, "c", 2, 3, 3, &mut rng);
        *store.get_mut(conv.weight) = Tensor::zeros(&[3, 2, 3, 3]);
        *store.get_mut(conv.bias) = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut s = infer_session(&store);
        let xv = s.tape.constant(random(&[1, 2, 4, 4], &mut rng));
        let y = conv.forward(&mut s, xv).unwrap();
        let yv = s.tape.value(y);
        for c in 0..3 {
            for p in 0..16 {
                assert_eq!(yv.data()[c * 16 + p], [1.0, -2.0, 0.5][c]);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::same(&mut store, "c", 3, 2, 3, &mut Rng::new(0, 0));
        let mut s = infer_session(&store);
        let xv = s.tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(conv.forward(&mut s, xv).is_err());
    }

    #[test]
    fn separable_identity() {
        let mut store = ParamStore::<f64>::new();
        let sep = SeparableConv2d::new(&mut store, "s", 3, 3, 3, &mut Rng::new(0, 0));
        *store.get_mut(sep.depthwise_weight) =
            Tensor::from_fn(&[3, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        *store.get_mut(sep.pointwise_weight) = Tensor::identity(3).reshape(&[3, 3, 1, 1]).unwrap();
        let x = random(&[1, 3, 5, 5], &mut Rng::new(1, 0));
        let mut s = infer_session(&store);
        let xv = s.tape.constant(x.clone());
        let y = sep.forward(&mut s, xv).unwrap();
        assert!(s.tape.value(y).max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn separable_equals_factored_dense_conv() {
        let mut rng = Rng::new(2, 0);
        let mut store = ParamStore::<f64>::new();
        let sep = SeparableConv2d::new(&mut store, "s", 4, 5, 3, &mut rng);
        for id in sep.param_ids() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = random(&shape, &mut rng);
        }
        let x = random(&[1, 4, 6, 6], &mut rng);
        let mut s = infer_session(&store);
        let xv = s.tape.constant(x.clone());
        let y = sep.forward(&mut s, xv).unwrap();
        let (w, b) = sep.factored_weight(&store);
        let dense = kernels::conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(s.tape.value(y).max_abs_diff(&dense) < 1e-10);
    }

    #[test]
    fn separable_count_closed_form() {
        assert_eq!(SeparableConv2d::closed_form_count(64, 128, 3), 8960);
        assert_eq!(Conv2d::closed_form_count(64, 128, 3), 73856);
        let mut store = ParamStore::<f32>::new();
        SeparableConv2d::new(&mut store, "s", 64, 128, 3, &mut Rng::new(0, 0));
        assert_eq!(store.learnable_scalars(), 8960);
        let mut store = ParamStore::<f32>::new();
        Conv2d::same(&mut store, "c", 64, 128, 3, &mut Rng::new(0, 0));
        assert_eq!(store.learnable_scalars(), 73856);
    }

    #[test]
    fn batch_norm_infer_identity() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let x = random(&[2, 2, 3, 3], &mut Rng::new(3, 0));
        let mut s = infer_session(&store);
        let xv = s.tape.constant(x.clone());
        let y = bn.forward(&mut s, xv).unwrap();
        assert!(s.tape.value(y).max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let mut rng = Rng::new(4, 0);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| 3.0 + 2.0 * rng.normal());
        let mut s = Session::new(&store, Mode::Train, Rng::new(0, 0));
        let xv = s.tape.constant(x.clone());
        let y = bn.forward(&mut s, xv).unwrap();
        let yv = s.tape.value(y).clone();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..16).map(move |p| (n, p)))
                .map(|(n, p)| yv.data()[(n * 3 + c) * 16 + p])
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
        let updates = s.take_updates();
        assert_eq!(updates.len(), 2);
        let rm = &updates[0].1;
        assert!(rm.data().iter().all(|&m| m > 0.1 && m < 0.5), "{rm:?}");
    }

    #[test]
    fn batch_norm_rejects_degenerate_batch() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let mut s = Session::new(&store, Mode::Train, Rng::new(0, 0));
        let xv = s.tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(matches!(bn.forward(&mut s, xv), Err(Error::DegenerateBatch { .. })));
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::<f64>::ones(&[1000]);
        let store = ParamStore::<f64>::new();
        for (rate, mode) in [(0.0, Mode::Train), (0.0, Mode::Infer), (0.5, Mode::Infer)] {
            let mut s = Session::new(&store, mode, Rng::new(0, 0));
            let xv = s.tape.constant(x.clone());
            let y = Dropout::new(rate).unwrap().forward(&mut s, xv).unwrap();
            assert_eq!(s.tape.value(y), &x);
        }
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn dropout_rate_concentrates() {
        let n = 1_000_000;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[n]));
        let mut rng = Rng::substream(9, StreamKind::Dropout, 0);
        let y = tape.dropout(x, 0.05, &mut rng).unwrap();
        let yv = tape.value(y);
        let dropped = yv.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((0.048..=0.052).contains(&dropped), "{dropped}");
        let kept = yv.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.95).abs() < 1e-6);
    }

    #[test]
    fn softmax_properties() {
        let mut rng = Rng::new(5, 0);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let shifted = x.map(|v| v + 7.5);
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let pa = tape.softmax_channels(a).unwrap();
        let pb = tape.softmax_channels(b).unwrap();
        assert!(tape.value(pa).max_abs_diff(tape.value(pb)) < 1e-7);
        let p = tape.value(pa);
        for n in 0..2 {
            for px in 0..16 {
                let s: f64 = (0..3).map(|c| p.data()[(n * 3 + c) * 16 + px]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_properties() {
        let mut rng = Rng::new(6, 0);
        let constant = Tensor::<f64>::full(&[1, 2, 3, 5], 0.7);
        let up = kernels::upsample_bilinear(&constant, 6, 10).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let x = random(&[1, 2, 3, 5], &mut rng);
        let y = random(&[1, 2, 3, 5], &mut rng);
        let combo = Tensor::from_fn(x.shape(), |i| 2.0 * x.data()[i] - 0.5 * y.data()[i]);
        let lhs = kernels::upsample_bilinear(&combo, 6, 10).unwrap();
        let ux = kernels::upsample_bilinear(&x, 6, 10).unwrap();
        let uy = kernels::upsample_bilinear(&y, 6, 10).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |i| 2.0 * ux.data()[i] - 0.5 * uy.data()[i]);
        assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        let (lo, hi) = x.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(ux.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn layer_gradients_pass_finite_differences() {
        let mut rng = Rng::new(7, 0);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let sep = SeparableConv2d::new(&mut store, "s", 3, 4, 3, &mut rng);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let proj = random(&[2, 4, 4, 4], &mut rng);
        let report = crate::verify::check_session(
            &crate::autograd::GradChecker::default(),
            &store,
            Mode::Train,
            &[x],
            |s, vars| {
                let h = bn.forward(s, vars[0])?;
                let y = sep.forward(s, h)?;
                crate::verify::project(&mut s.tape, y, &proj)
            },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
