//! CT intensity preprocessing and training-time augmentation.
//!
//! Images are `f32` tensors whose last two axes are `[H, W]`; any leading
//! axes are treated as independent planes. Masks are `u8` label maps of the
//! same layout and are always resampled nearest-neighbour.

use crate::error::{invalid, Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Hounsfield-unit clamp range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub low: f64,
    pub high: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            low: -100.0,
            high: 200.0,
        }
    }
}

impl WindowSpec {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(invalid("window", format!("need finite low < high, got [{low}, {high}]")));
        }
        Ok(Self { low, high })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub max_rotation_deg: f64,
    /// Scale is drawn from `[1 − zoom, 1 + zoom]`.
    pub zoom: f64,
    /// Displacement noise scale in pixels.
    pub elastic_alpha: f64,
    /// Gaussian smoothing width of the displacement field in pixels.
    pub elastic_sigma: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            max_rotation_deg: 180.0,
            zoom: 0.2,
            elastic_alpha: 10.0,
            elastic_sigma: 4.0,
        }
    }
}

impl AugmentSpec {
    /// No rotation, zoom or displacement.
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            zoom: 0.0,
            elastic_alpha: 0.0,
            elastic_sigma: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(invalid("augment", format!("max rotation {} outside [0, 180]", self.max_rotation_deg)));
        }
        if !(0.0..1.0).contains(&self.zoom) {
            return Err(invalid("augment", format!("zoom {} outside [0, 1)", self.zoom)));
        }
        if !(self.elastic_alpha >= 0.0 && self.elastic_sigma > 0.0) {
            return Err(invalid(
                "augment",
                format!("elastic alpha {} / sigma {} out of range", self.elastic_alpha, self.elastic_sigma),
            ));
        }
        Ok(())
    }
}

fn plane_dims<T: Copy>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
        return Err(invalid(op, format!("expected a [.., H, W] tensor with positive extents, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.numel() / (h * w), h, w))
}

fn with_plane_shape(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    let r = out.len();
    out[r - 2] = h;
    out[r - 1] = w;
    out
}

/// Clamp to `[low, high]` and map affinely onto `[0, 1]`.
pub fn window_hu(x: &Tensor<f32>, w: WindowSpec) -> Tensor<f32> {
    let span = w.high - w.low;
    x.map(|v| ((v as f64).clamp(w.low, w.high) - w.low) as f32 / span as f32)
        .map(|v| v.clamp(0.0, 1.0))
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Per-plane histogram equalization over `bins` quantization levels.
///
/// Level `l` maps to `round((cdf(l) − cdf_min) / (N − cdf_min) · (bins − 1))`,
/// rescaled to `[0, 1]`. A plane with a single occupied level is returned
/// unchanged.
pub fn histogram_equalize(x: &Tensor<f32>, bins: usize) -> Result<Tensor<f32>> {
    if bins < 2 {
        return Err(invalid("histogram_equalize", format!("bins {bins} < 2")));
    }
    let (planes, h, w) = plane_dims(x, "histogram_equalize")?;
    let n = h * w;
    let top = (bins - 1) as f64;
    let mut out = x.clone();
    let mut hist = vec![0usize; bins];
    for p in 0..planes {
        let src = &x.data()[p * n..(p + 1) * n];
        let levels: Vec<usize> = src
            .iter()
            .map(|&v| round_half_up((v as f64).clamp(0.0, 1.0) * top) as usize)
            .collect();
        hist.iter_mut().for_each(|c| *c = 0);
        for &l in &levels {
            hist[l] += 1;
        }
        let mut cdf = hist.clone();
        for i in 1..bins {
            cdf[i] += cdf[i - 1];
        }
        let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if cdf_min == n {
            continue;
        }
        let lut: Vec<f32> = cdf
            .iter()
            .map(|&c| {
                let v = c.saturating_sub(cdf_min) as f64 / (n - cdf_min) as f64;
                (round_half_up(v * top) / top) as f32
            })
            .collect();
        for (dst, &l) in out.data_mut()[p * n..(p + 1) * n].iter_mut().zip(&levels) {
            *dst = lut[l];
        }
    }
    Ok(out)
}

/// Bilinear resize of every plane to `out_h × out_w` (half-pixel centers,
/// clamped borders, as the upsampling layer).
pub fn resize_bilinear(x: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (planes, h, w) = plane_dims(x, "resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize_bilinear", "target extents must be positive".to_string()));
    }
    Tensor::new(
        &with_plane_shape(x.shape(), out_h, out_w),
        kernels::resize_planes(x.data(), planes, h, w, out_h, out_w),
    )
}

fn nearest_index(d: usize, src: usize, dst: usize) -> usize {
    (((d as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

/// Nearest-neighbour resize for label maps.
pub fn resize_nearest(mask: &Tensor<u8>, out_h: usize, out_w: usize) -> Result<Tensor<u8>> {
    let (planes, h, w) = plane_dims(mask, "resize_nearest")?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize_nearest", "target extents must be positive".to_string()));
    }
    let ys: Vec<usize> = (0..out_h).map(|y| nearest_index(y, h, out_h)).collect();
    let xs: Vec<usize> = (0..out_w).map(|x| nearest_index(x, w, out_w)).collect();
    let mut data = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        for &y in &ys {
            for &x in &xs {
                data.push(mask.data()[(p * h + y) * w + x]);
            }
        }
    }
    Tensor::new(&with_plane_shape(mask.shape(), out_h, out_w), data)
}

/// Snap values within 1e-9 of an integer so exact symmetries (such as a
/// half turn) resample without interpolation error.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Bilinear tap with zero outside the plane.
fn sample_bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let at = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0.0
        } else {
            plane[y as usize * w + x as usize] as f64
        }
    };
    let mut v = (1.0 - fy) * (1.0 - fx) * at(y0, x0);
    if fx != 0.0 {
        v += (1.0 - fy) * fx * at(y0, x0 + 1.0);
    }
    if fy != 0.0 {
        v += fy * (1.0 - fx) * at(y0 + 1.0, x0);
        if fx != 0.0 {
            v += fy * fx * at(y0 + 1.0, x0 + 1.0);
        }
    }
    v as f32
}

fn sample_nearest(plane: &[u8], h: usize, w: usize, sy: f64, sx: f64) -> u8 {
    let (y, x) = ((sy + 0.5).floor(), (sx + 0.5).floor());
    if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
        0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Resample image and mask through `source(y, x) -> (sy, sx)`.
fn warp<F>(image: &Tensor<f32>, mask: &Tensor<u8>, source: F) -> Result<(Tensor<f32>, Tensor<u8>)>
where
    F: Fn(usize, usize) -> (f64, f64),
{
    let (planes, h, w) = plane_dims(image, "warp")?;
    let (mplanes, mh, mw) = plane_dims(mask, "warp")?;
    if (mh, mw) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "warp",
            lhs: image.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|i| {
            let (sy, sx) = source(i / w, i % w);
            (snap(sy), snap(sx))
        })
        .collect();
    let n = h * w;
    let mut img = image.clone();
    for p in 0..planes {
        let src = &image.data()[p * n..(p + 1) * n];
        for (dst, &(sy, sx)) in img.data_mut()[p * n..(p + 1) * n].iter_mut().zip(&coords) {
            *dst = sample_bilinear(src, h, w, sy, sx);
        }
    }
    let mut m = mask.clone();
    for p in 0..mplanes {
        let src = &mask.data()[p * n..(p + 1) * n];
        for (dst, &(sy, sx)) in m.data_mut()[p * n..(p + 1) * n].iter_mut().zip(&coords) {
            *dst = sample_nearest(src, h, w, sy, sx);
        }
    }
    Ok((img, m))
}

fn center(h: usize, w: usize) -> (f64, f64) {
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

/// Rotate by `degrees` (counter-clockwise in display orientation) about
/// the plane center; zero fill.
pub fn rotate(image: &Tensor<f32>, mask: &Tensor<u8>, degrees: f64) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let (_, h, w) = plane_dims(image, "rotate")?;
    let (cy, cx) = center(h, w);
    let (sin, cos) = degrees.to_radians().sin_cos();
    warp(image, mask, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // inverse map: rotate the output offset back by the angle
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    })
}

/// Rotation by an angle drawn uniformly from `±max_rotation_deg`.
pub fn random_rotate(
    image: &Tensor<f32>,
    mask: &Tensor<u8>,
    spec: &AugmentSpec,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let angle = rng.uniform_range(-spec.max_rotation_deg, spec.max_rotation_deg);
    rotate(image, mask, angle)
}

/// Separable Gaussian blur of one `[h, w]` field. Taps are renormalized over
/// the in-bounds part of the kernel, whose radius is
/// `min(ceil(3σ), max(h, w) − 1)`.
pub fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).min(h.max(w) - 1);
    let kernel: Vec<f64> = (0..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], len: usize, stride: usize, lines: usize, line_stride: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..lines {
            let base = line * line_stride;
            for i in 0..len {
                let (mut acc, mut norm) = (0.0, 0.0);
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(len - 1);
                for j in lo..=hi {
                    let k = kernel[i.abs_diff(j)];
                    acc += k * src[base + j * stride];
                    norm += k;
                }
                out[base + i * stride] = acc / norm;
            }
        }
        out
    };
    let rows = pass(field, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

/// Smooth per-pixel displacement in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub h: usize,
    pub w: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

impl DisplacementField {
    pub fn zero(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            dy: vec![0.0; h * w],
            dx: vec![0.0; h * w],
        }
    }

    /// `alpha · N(0, 1)` noise per pixel and axis, blurred with width `sigma`.
    pub fn random(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut Rng) -> Self {
        let mut noise = || -> Vec<f64> {
            let raw: Vec<f64> = (0..h * w).map(|_| alpha * rng.normal()).collect();
            gaussian_blur(&raw, h, w, sigma)
        };
        let dy = noise();
        let dx = noise();
        Self { h, w, dy, dx }
    }
}

/// Zoom by `scale` about the center, then displace by `field`.
pub fn deform(
    image: &Tensor<f32>,
    mask: &Tensor<u8>,
    scale: f64,
    field: &DisplacementField,
) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let (_, h, w) = plane_dims(image, "elastic_deform")?;
    if (field.h, field.w) != (h, w) || !(scale > 0.0) {
        return Err(invalid(
            "elastic_deform",
            format!("field {}x{} / scale {scale} incompatible with {h}x{w} planes", field.h, field.w),
        ));
    }
    let (cy, cx) = center(h, w);
    warp(image, mask, |y, x| {
        let i = y * w + x;
        (
            cy + (y as f64 - cy) / scale + field.dy[i],
            cx + (x as f64 - cx) / scale + field.dx[i],
        )
    })
}

/// Random zoom in `[1 − zoom, 1 + zoom]` composed with a random smooth
/// displacement field.
pub fn elastic_deform(
    image: &Tensor<f32>,
    mask: &Tensor<u8>,
    spec: &AugmentSpec,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let (_, h, w) = plane_dims(image, "elastic_deform")?;
    let scale = rng.uniform_range(1.0 - spec.zoom, 1.0 + spec.zoom);
    let field = if spec.elastic_alpha == 0.0 {
        DisplacementField::zero(h, w)
    } else {
        DisplacementField::random(h, w, spec.elastic_alpha, spec.elastic_sigma, rng)
    };
    deform(image, mask, scale, &field)
}

/// Rotation followed by elastic deformation.
pub fn augment(
    image: &Tensor<f32>,
    mask: &Tensor<u8>,
    spec: &AugmentSpec,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let (image, mask) = random_rotate(image, mask, spec, rng)?;
    elastic_deform(&image, &mask, spec, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn img(h: usize, w: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::new(&[h, w], v.to_vec()).unwrap()
    }

    fn ramp(h: usize, w: usize) -> (Tensor<f32>, Tensor<u8>) {
        let image = Tensor::from_fn(&[1, h, w], |i| ((i * 7919) % 97) as f32 / 97.0);
        let mask = Tensor::from_fn(&[1, h, w], |i| u8::from((i * 31) % 5 == 0));
        (image, mask)
    }

    #[test]
    fn window_examples() {
        let x = img(1, 3, &[-150.0, 50.0, 300.0]);
        assert_eq!(window_hu(&x, WindowSpec::default()).data(), &[0.0, 0.5, 1.0]);
        assert!(WindowSpec::new(5.0, 5.0).is_err());
    }

    proptest! {
        #[test]
        fn window_is_idempotent(v in prop::collection::vec(-2000.0f32..3000.0, 1..50)) {
            let x = Tensor::new(&[1, v.len()], v).unwrap();
            let once = window_hu(&x, WindowSpec::default());
            let unit = WindowSpec::new(0.0, 1.0).unwrap();
            prop_assert_eq!(window_hu(&once, unit), once.clone());
            prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn equalization_is_monotone(v in prop::collection::vec(0.0f32..=1.0, 2..80), bins in 2usize..300) {
            let x = Tensor::new(&[1, v.len()], v.clone()).unwrap();
            let y = histogram_equalize(&x, bins).unwrap();
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            for pair in order.windows(2) {
                prop_assert!(y.data()[pair[0]] <= y.data()[pair[1]]);
            }
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn augmentation_keeps_shapes_and_binary_masks(seed in 0u64..1000) {
            let (image, mask) = ramp(12, 12);
            let mut rng = Rng::new(seed, 3);
            let (i2, m2) = augment(&image, &mask, &AugmentSpec::default(), &mut rng).unwrap();
            prop_assert_eq!(i2.shape(), image.shape());
            prop_assert_eq!(m2.shape(), mask.shape());
            prop_assert!(m2.data().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn equalization_examples() {
        let c = img(2, 2, &[0.3; 4]);
        assert_eq!(histogram_equalize(&c, 256).unwrap(), c);
        let x = img(2, 2, &[0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0]);
        let y = histogram_equalize(&x, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0 / 3.0, 1.0]);
        let ramp = Tensor::from_fn(&[16, 16], |i| i as f32 / 255.0);
        let eq = histogram_equalize(&ramp, 256).unwrap();
        assert!(eq.max_abs_diff(&ramp) <= 0.5 / 255.0);
        assert!(histogram_equalize(&ramp, 1).is_err());
    }

    #[test]
    fn resize_examples() {
        let x = img(2, 2, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(resize_bilinear(&x, 2, 2).unwrap(), x);
        let c = Tensor::full(&[3, 5], 0.25f32);
        assert!(resize_bilinear(&c, 7, 4).unwrap().data().iter().all(|&v| v == 0.25));
        let up = resize_bilinear(&x, 4, 4).unwrap();
        // rows taps at source 0, 0.25, 0.75, 1 along each axis
        let axis = [0.0, 0.25, 0.75, 1.0];
        for (y, &sy) in axis.iter().enumerate() {
            for (xx, &sx) in axis.iter().enumerate() {
                let want = 2.0 * sy + sx;
                assert!((up.data()[y * 4 + xx] - want as f32).abs() < 1e-6);
            }
        }
        let m = Tensor::new(&[2, 2], vec![0u8, 1, 1, 0]).unwrap();
        let big = resize_nearest(&m, 4, 4).unwrap();
        assert_eq!(big.data(), &[0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(resize_nearest(&big, 2, 2).unwrap(), m);
    }

    #[test]
    fn rotation_examples() {
        let x = img(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m = Tensor::new(&[2, 2], vec![1u8, 0, 0, 0]).unwrap();
        let (r0, m0) = rotate(&x, &m, 0.0).unwrap();
        assert_eq!((r0.clone(), m0.clone()), (x.clone(), m.clone()));
        let (r, rm) = rotate(&x, &m, 180.0).unwrap();
        assert_eq!(r.data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(rm.data(), &[0, 0, 0, 1]);
        let (image, mask) = ramp(9, 6);
        let (a, am) = rotate(&image, &mask, 180.0).unwrap();
        let (b, bm) = rotate(&a, &am, 180.0).unwrap();
        assert_eq!((b, bm), (image, mask));
    }

    #[test]
    fn rotation_fills_corners_with_zero() {
        let x = Tensor::full(&[8, 8], 1.0f32);
        let m = Tensor::full(&[8, 8], 1u8);
        let (r, rm) = rotate(&x, &m, 45.0).unwrap();
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(rm.data()[0], 0);
        assert_eq!(r.data()[4 * 8 + 4], 1.0);
    }

    #[test]
    fn elastic_identity_and_rigid_limit() {
        let (image, mask) = ramp(16, 16);
        let (i2, m2) = deform(&image, &mask, 1.0, &DisplacementField::zero(16, 16)).unwrap();
        assert_eq!((i2, m2), (image.clone(), mask.clone()));
        let spec = AugmentSpec {
            zoom: 0.0,
            elastic_alpha: 0.0,
            ..AugmentSpec::default()
        };
        let (i3, _) = elastic_deform(&image, &mask, &spec, &mut Rng::new(1, 3)).unwrap();
        assert_eq!(i3, image);

        let alpha = 10.0;
        let field = DisplacementField::random(32, 32, alpha, 1000.0, &mut Rng::new(2, 3));
        for comp in [&field.dy, &field.dx] {
            let mean = comp.iter().sum::<f64>() / comp.len() as f64;
            let dev = comp.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            assert!(dev < 0.01 * alpha, "{dev}");
        }
    }

    #[test]
    fn augmentation_is_reproducible() {
        let (image, mask) = ramp(16, 16);
        let run = || augment(&image, &mask, &AugmentSpec::default(), &mut Rng::new(9, 3)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        let bad = AugmentSpec {
            zoom: 1.0,
            ..AugmentSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentSpec {
            max_rotation_deg: 200.0,
            ..AugmentSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
