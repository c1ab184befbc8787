//! The encoder-decoder network and its baseline UNet.
//!
//! Channel schedule at base depth `b` (proposed variant):
//!
//! ```text
//! encoder.0   1   -> b      (skip s0, full res)   max-pool
//! encoder.1   b   -> 2b     (skip s1, 1/2)        max-pool
//! encoder.2   2b  -> 4b     (skip s2, 1/4)        max-pool
//! encoder.3   4b  -> 8b     (skip s3, 1/8)        max-pool
//! bottleneck  8b  -> 16b    (1/16)
//! decoder.0   bilinear, concat s3:  24b -> 8b
//! decoder.1   bilinear, concat s2:  12b -> 4b
//! decoder.2   bilinear, concat s1:   6b -> 2b
//! decoder.3   pixel shuffle 2b -> b/2, concat s0: 3b/2 -> b
//! head        1x1 conv b -> C, softmax over channels
//! ```
//!
//! The baseline swaps every separable convolution for a standard one and
//! upsamples bilinearly at all four decoder stages.

use std::fmt::Write as _;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ConvLayer, Dropout, SeparableConv2d, Upsample};
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::rng::{Rng, StreamKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Proposed,
    BaselineUnet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::BaselineUnet => "baseline-unet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "proposed" => Some(Self::Proposed),
            "baseline-unet" | "baseline" => Some(Self::BaselineUnet),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// 1×1 standard convolution to the block's output depth.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub separable: bool,
    pub shortcut: Shortcut,
}

impl ResNetBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, separable: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            separable,
            shortcut: if in_channels == out_channels {
                Shortcut::Identity
            } else {
                Shortcut::Projection
            },
        }
    }
}

/// `y = relu(dropout(conv2(relu(conv1(bn(x))))) + shortcut(bn(x)))`
#[derive(Debug, Clone)]
pub struct ResNetBlock {
    pub spec: ResNetBlockSpec,
    pub name: String,
    pub bn: BatchNorm2d,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<Conv2d>,
    pub dropout: Dropout,
}

impl ResNetBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ResNetBlockSpec,
        dropout: Dropout,
        rng: &mut Rng,
    ) -> Self {
        let (i, o, k) = (spec.in_channels, spec.out_channels, spec.kernel);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), i);
        let mut conv = |store: &mut ParamStore<T>, layer: &str, cin: usize| {
            let prefix = format!("{name}.{layer}");
            if spec.separable {
                ConvLayer::Separable(SeparableConv2d::new(store, &prefix, cin, o, k, rng))
            } else {
                ConvLayer::Standard(Conv2d::same(store, &prefix, cin, o, k, rng))
            }
        };
        let conv1 = conv(store, "conv1", i);
        let conv2 = conv(store, "conv2", o);
        let shortcut = match spec.shortcut {
            Shortcut::Identity => None,
            Shortcut::Projection => Some(Conv2d::same(store, &format!("{name}.shortcut"), i, o, 1, rng)),
        };
        Self {
            spec,
            name: name.to_string(),
            bn,
            conv1,
            conv2,
            shortcut,
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let c = s.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.spec.in_channels {
            return Err(Error::InvalidArgument {
                op: "resnet_block",
                reason: format!(
                    "{}: expected {} input channels, got shape {:?}",
                    self.name,
                    self.spec.in_channels,
                    s.tape.shape(x)
                ),
            });
        }
        let h = self.bn.forward(s, x)?;
        let a = self.conv1.forward(s, h)?;
        let a = s.tape.relu(a);
        let b = self.conv2.forward(s, a)?;
        let b = self.dropout.forward(s, b)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(s, h)?,
            None => h,
        };
        let sum = s.tape.add(b, skip)?;
        Ok(s.tape.relu(sum))
    }

    fn layers(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo {
            name: format!("{}.bn", self.name),
            kind: "batch_norm",
            params: self.bn.param_ids(),
            closed_form: 2 * self.spec.in_channels,
        });
        for (label, conv) in [("conv1", &self.conv1), ("conv2", &self.conv2)] {
            out.push(LayerInfo {
                name: format!("{}.{label}", self.name),
                kind: conv.kind(),
                params: conv.param_ids(),
                closed_form: conv.closed_form_count(),
            });
        }
        if let Some(proj) = &self.shortcut {
            out.push(LayerInfo {
                name: format!("{}.shortcut", self.name),
                kind: "conv2d_1x1",
                params: proj.param_ids(),
                closed_form: Conv2d::closed_form_count(proj.in_channels, proj.out_channels, 1),
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub base_depth: usize,
    pub depth_cap: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub kernel: usize,
    pub upsample_plan: Vec<Upsample>,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn proposed(base_depth: usize) -> Self {
        Self {
            variant: Variant::Proposed,
            base_depth,
            depth_cap: 1024,
            num_classes: 2,
            input_channels: 1,
            kernel: 3,
            upsample_plan: vec![
                Upsample::Bilinear,
                Upsample::Bilinear,
                Upsample::Bilinear,
                Upsample::Subpixel,
            ],
            dropout: 0.05,
        }
    }

    pub fn baseline(base_depth: usize) -> Self {
        Self {
            variant: Variant::BaselineUnet,
            upsample_plan: vec![Upsample::Bilinear; 4],
            ..Self::proposed(base_depth)
        }
    }

    pub fn for_variant(variant: Variant, base_depth: usize) -> Self {
        match variant {
            Variant::Proposed => Self::proposed(base_depth),
            Variant::BaselineUnet => Self::baseline(base_depth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.base_depth == 0 || self.num_classes < 2 || self.input_channels == 0 {
            return fail(format!(
                "base depth {}, classes {}, input channels {} must be positive (classes >= 2)",
                self.base_depth, self.num_classes, self.input_channels
            ));
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel {} must be odd to preserve spatial size", self.kernel));
        }
        if self.base_depth * 16 > self.depth_cap {
            return fail(format!(
                "bottleneck depth {} exceeds depth cap {}",
                self.base_depth * 16,
                self.depth_cap
            ));
        }
        if self.upsample_plan.len() != 4 {
            return fail(format!("upsample plan needs 4 entries, got {}", self.upsample_plan.len()));
        }
        if self.variant == Variant::Proposed && self.upsample_plan[3] != Upsample::Subpixel {
            return fail("proposed variant must end with a sub-pixel upsampling".into());
        }
        let mut c = self.base_depth * 16;
        for (i, up) in self.upsample_plan.iter().enumerate() {
            if *up == Upsample::Subpixel && c % 4 != 0 {
                return fail(format!("decoder.{i}: {c} channels not divisible by 4 for pixel shuffle"));
            }
            c = self.base_depth << (3 - i);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn separable(&self) -> bool {
        self.variant == Variant::Proposed
    }

    /// Output depth of encoder stage `i` (0..4) and of the bottleneck (`i = 4`).
    pub fn encoder_depth(&self, i: usize) -> usize {
        self.base_depth << i
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub name: String,
    pub upsample: Upsample,
    pub block: ResNetBlock,
}

/// Description of one layer for auditing.
#[derive(Debug, Clone)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub params: Vec<ParamId>,
    /// Parameter count from the layer's closed-form formula.
    pub closed_form: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub name: String,
    pub kind: String,
    /// `None` for parameter-free layers.
    pub shape: Option<Vec<usize>>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

impl ParamTable {
    fn shape_str(shape: &Option<Vec<usize>>) -> String {
        match shape {
            Some(s) => s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
            None => "-".to_string(),
        }
    }

    /// Column-aligned text with a total line.
    pub fn to_text(&self) -> String {
        let shapes: Vec<String> = self.rows.iter().map(|r| Self::shape_str(&r.shape)).collect();
        let wn = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let wk = self.rows.iter().map(|r| r.kind.len()).max().unwrap_or(4).max(4);
        let ws = shapes.iter().map(|s| s.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<wn$}  {:<wk$}  {:<ws$}  {:>12}", "name", "kind", "shape", "count");
        for (r, s) in self.rows.iter().zip(&shapes) {
            let _ = writeln!(out, "{:<wn$}  {:<wk$}  {:<ws$}  {:>12}", r.name, r.kind, s, r.count);
        }
        let _ = writeln!(out, "{:<wn$}  {:<wk$}  {:<ws$}  {:>12}", "total", "", "", self.total);
        out
    }

    /// `name,shape,count,kind` rows after a header, closed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,shape,count,kind\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.name, Self::shape_str(&r.shape), r.count, r.kind);
        }
        let _ = writeln!(out, "total,-,{},-", self.total);
        out
    }
}

/// Output of a forward pass plus the shape after every stage.
pub struct ForwardOutput {
    pub probs: Var,
    pub trace: Vec<(String, Vec<usize>)>,
}

/// A built model: its spec, the layers, and the named parameters.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    pub encoder: Vec<ResNetBlock>,
    pub bottleneck: ResNetBlock,
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

impl<T: Scalar> Network<T> {
    /// Allocate and initialize every layer from `Init` substream 0 of `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::build_with(spec, &mut Rng::substream(seed, StreamKind::Init, 0))
    }

    pub fn build_with(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let drop = Dropout::new(spec.dropout)?;
        let sep = spec.separable();
        let k = spec.kernel;
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(4);
        let mut c = spec.input_channels;
        for i in 0..4 {
            let out = spec.encoder_depth(i);
            let block_spec = ResNetBlockSpec::new(c, out, k, sep);
            encoder.push(ResNetBlock::new(&mut store, &format!("encoder.{i}"), block_spec, drop, rng));
            c = out;
        }
        let deepest = spec.encoder_depth(4);
        let bottleneck = ResNetBlock::new(
            &mut store,
            "bottleneck.0",
            ResNetBlockSpec::new(c, deepest, k, sep),
            drop,
            rng,
        );
        c = deepest;
        let mut decoder = Vec::with_capacity(4);
        for (i, &up) in spec.upsample_plan.iter().enumerate() {
            let skip = spec.encoder_depth(3 - i);
            let cin = up.out_channels(c) + skip;
            let name = format!("decoder.{i}");
            let block = ResNetBlock::new(&mut store, &name, ResNetBlockSpec::new(cin, skip, k, sep), drop, rng);
            decoder.push(DecoderStage {
                name,
                upsample: up,
                block,
            });
            c = skip;
        }
        let head = Conv2d::same(&mut store, "head.0.conv", c, spec.num_classes, 1, rng);
        Ok(Self {
            spec: spec.clone(),
            params: store,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::InvalidArgument {
                op: "forward",
                reason: format!("expected an [N, C, H, W] input, got {shape:?}"),
            });
        };
        if c != self.spec.input_channels {
            return Err(Error::InvalidArgument {
                op: "forward",
                reason: format!("expected {} input channels, got {c}", self.spec.input_channels),
            });
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible { height: h, width: w });
        }
        Ok(())
    }

    /// Record the full forward pass on `s`. The session must have been
    /// created over `self.params` (or a store with identical layout).
    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<ForwardOutput> {
        self.check_input(s.tape.shape(x))?;
        let mut trace = Vec::new();
        let mut skips = Vec::with_capacity(4);
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(s, h)?;
            trace.push((block.name.clone(), s.tape.shape(h).to_vec()));
            skips.push(h);
            h = s.tape.max_pool_2x2(h)?;
        }
        h = self.bottleneck.forward(s, h)?;
        trace.push((self.bottleneck.name.clone(), s.tape.shape(h).to_vec()));
        for (stage, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let up = stage.upsample.forward(s, h)?;
            let cat = s.tape.concat_channels(&[up, skip])?;
            h = stage.block.forward(s, cat)?;
            trace.push((stage.name.clone(), s.tape.shape(h).to_vec()));
        }
        let logits = self.head.forward(s, h)?;
        let probs = s.tape.softmax_channels(logits)?;
        trace.push(("head.0".to_string(), s.tape.shape(probs).to_vec()));
        Ok(ForwardOutput { probs, trace })
    }

    /// Inference-mode class probabilities `[N, C, H, W]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.params, Mode::Infer, Rng::new(0, 0)).frozen();
        let xv = s.tape.constant(x.clone());
        let out = self.forward(&mut s, xv)?;
        Ok(s.tape.value(out.probs).clone())
    }

    /// Every layer in forward order, including parameter-free ones.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let free = |name: String, kind: &'static str| LayerInfo {
            name,
            kind,
            params: Vec::new(),
            closed_form: 0,
        };
        for block in &self.encoder {
            block.layers(&mut out);
            out.push(free(format!("{}.pool", block.name), "max_pool_2x2"));
        }
        self.bottleneck.layers(&mut out);
        for stage in &self.decoder {
            let kind = match stage.upsample {
                Upsample::Bilinear => "upsample_bilinear",
                Upsample::Subpixel => "upsample_subpixel",
            };
            out.push(free(format!("{}.upsample", stage.name), kind));
            out.push(free(format!("{}.concat", stage.name), "concat_skip"));
            stage.block.layers(&mut out);
        }
        out.push(LayerInfo {
            name: "head.0.conv".to_string(),
            kind: "conv2d_1x1",
            params: self.head.param_ids(),
            closed_form: Conv2d::closed_form_count(self.head.in_channels, self.head.out_channels, 1),
        });
        out.push(free("head.0.softmax".to_string(), "softmax"));
        out
    }

    /// Per-tensor learnable parameter table, with a zero-count row for each
    /// parameter-free layer.
    pub fn parameter_table(&self) -> ParamTable {
        let mut rows = Vec::new();
        for layer in self.layers() {
            if layer.params.is_empty() {
                rows.push(ParamRow {
                    name: layer.name,
                    kind: layer.kind.to_string(),
                    shape: None,
                    count: 0,
                });
                continue;
            }
            for id in layer.params {
                let t = self.params.get(id);
                rows.push(ParamRow {
                    name: self.params.name(id).to_string(),
                    kind: layer.kind.to_string(),
                    shape: Some(t.shape().to_vec()),
                    count: t.numel(),
                });
            }
        }
        let total = rows.iter().map(|r| r.count).sum();
        ParamTable { rows, total }
    }

    pub fn count_parameters(&self) -> usize {
        self.params.learnable_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_identity_path() {
        let mut store = ParamStore::<f64>::new();
        let spec = ResNetBlockSpec::new(3, 3, 3, true);
        let block = ResNetBlock::new(&mut store, "b", spec, Dropout::new(0.0).unwrap(), &mut Rng::new(0, 0));
        for layer in [&block.conv1, &block.conv2] {
            for id in layer.param_ids() {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let x = Tensor::from_fn(&[1, 3, 4, 4], |i| (i % 7) as f64 * 0.3);
        let mut s = Session::new(&store, Mode::Infer, Rng::new(0, 0));
        let xv = s.tape.constant(x.clone());
        let y = block.forward(&mut s, xv).unwrap();
        assert!(s.tape.value(y).max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn projection_iff_depth_changes() {
        assert_eq!(ResNetBlockSpec::new(8, 8, 3, true).shortcut, Shortcut::Identity);
        assert_eq!(ResNetBlockSpec::new(8, 16, 3, true).shortcut, Shortcut::Projection);
        let mut store = ParamStore::<f64>::new();
        let block = ResNetBlock::new(
            &mut store,
            "b",
            ResNetBlockSpec::new(2, 5, 3, true),
            Dropout::new(0.0).unwrap(),
            &mut Rng::new(0, 0),
        );
        let mut s = Session::new(&store, Mode::Infer, Rng::new(0, 0));
        let xv = s.tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let y = block.forward(&mut s, xv).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 5, 4, 4]);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::proposed(64).validate().is_ok());
        assert!(ModelSpec::proposed(128).validate().is_err());
        let mut bad = ModelSpec::proposed(8);
        bad.upsample_plan.pop();
        assert!(bad.validate().is_err());
        let mut bad = ModelSpec::proposed(8);
        bad.upsample_plan[3] = Upsample::Bilinear;
        assert!(bad.validate().is_err());
        let mut bad = ModelSpec::proposed(8);
        bad.kernel = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn miniature_schedule() {
        let net = Network::<f32>::build(&ModelSpec::proposed(8), 0).unwrap();
        let depths: Vec<usize> = net.encoder.iter().map(|b| b.spec.out_channels).collect();
        assert_eq!(depths, vec![8, 16, 32, 64]);
        assert_eq!(net.bottleneck.spec.out_channels, 128);
        let dec: Vec<(usize, usize)> = net
            .decoder
            .iter()
            .map(|d| (d.block.spec.in_channels, d.block.spec.out_channels))
            .collect();
        assert_eq!(dec, vec![(192, 64), (96, 32), (48, 16), (12, 8)]);
    }

    #[test]
    fn forward_shapes_and_softmax() {
        let net = Network::<f32>::build(&ModelSpec::proposed(4), 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 32, 48], |i| ((i * 37) % 101) as f32 / 101.0);
        let p = net.predict(&x).unwrap();
        assert_eq!(p.shape(), &[2, 2, 32, 48]);
        let plane = 32 * 48;
        for n in 0..2 {
            for px in 0..plane {
                let s = p.data()[n * 2 * plane + px] + p.data()[(n * 2 + 1) * plane + px];
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = Network::<f32>::build(&ModelSpec::proposed(4), 1).unwrap();
        let err = net.predict(&Tensor::zeros(&[1, 1, 24, 32])).unwrap_err();
        assert!(matches!(err, Error::Indivisible { height: 24, width: 32 }));
        assert!(err.to_string().contains("divisible by 16"));
    }

    #[test]
    fn table_total_matches_store_and_closed_forms() {
        for spec in [ModelSpec::proposed(8), ModelSpec::baseline(8)] {
            let net = Network::<f32>::build(&spec, 0).unwrap();
            let table = net.parameter_table();
            assert_eq!(table.total, net.count_parameters());
            assert_eq!(table.total, table.rows.iter().map(|r| r.count).sum::<usize>());
            for layer in net.layers() {
                let enumerated: usize = layer.params.iter().map(|&id| net.params.get(id).numel()).sum();
                assert_eq!(enumerated, layer.closed_form, "{}", layer.name);
            }
        }
    }

    #[test]
    fn upsampling_rows_are_parameter_free() {
        let net = Network::<f32>::build(&ModelSpec::proposed(8), 0).unwrap();
        let table = net.parameter_table();
        let ups: Vec<&ParamRow> = table.rows.iter().filter(|r| r.kind.starts_with("upsample")).collect();
        assert_eq!(ups.len(), 4);
        assert!(ups.iter().all(|r| r.count == 0 && r.shape.is_none()));
        assert_eq!(ups[3].kind, "upsample_subpixel");
        assert!(table.to_csv().lines().any(|l| l == "decoder.3.upsample,-,0,upsample_subpixel"));
    }
}
