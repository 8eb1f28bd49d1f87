//! Weka-style classical filter bank: Gaussian blurs over a set of scales and,
//! for each blurred copy, Sobel magnitude, Hessian statistics and pairwise
//! differences of Gaussians, plus oriented line-kernel (membrane) responses.
//!
//! All filters use reflect padding. Only the blurred planes are held as
//! intermediates; every other channel is computed per pixel and written
//! straight into the output stack.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stack::FeatureStack;
use crate::error::{Error, Result};
use crate::numerics::{convolve_separable, reflect_index, Padding, Plane, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Filter {
    Gaussian,
    Sobel,
    Hessian,
    Dog,
    Membrane,
}

pub const ALL_FILTERS: [Filter; 5] = [
    Filter::Gaussian,
    Filter::Sobel,
    Filter::Hessian,
    Filter::Dog,
    Filter::Membrane,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSetConfig {
    pub sigmas: Vec<f32>,
    pub membrane_kernel_size: usize,
    pub membrane_angles_deg: Vec<f32>,
    pub enabled_filters: Vec<Filter>,
}

impl Default for FeatureSetConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0],
            membrane_kernel_size: 19,
            membrane_angles_deg: vec![0.0, 30.0, 60.0, 90.0, 120.0, 150.0],
            enabled_filters: ALL_FILTERS.to_vec(),
        }
    }
}

impl FeatureSetConfig {
    pub fn only(filters: &[Filter]) -> Self {
        Self {
            enabled_filters: filters.to_vec(),
            ..Self::default()
        }
    }

    pub fn enabled(&self, f: Filter) -> bool {
        self.enabled_filters.contains(&f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled_filters.is_empty() {
            return Err(Error::arg("at least one filter must be enabled"));
        }
        if self.sigmas.is_empty() {
            return Err(Error::arg("at least one sigma is required"));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::arg(format!("sigma {s} must be finite and non-negative")));
        }
        if self.sigmas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("sigmas must be strictly ascending"));
        }
        if self.enabled(Filter::Membrane) {
            if self.membrane_kernel_size.is_multiple_of(2) {
                return Err(Error::arg(format!(
                    "membrane kernel size {} must be odd",
                    self.membrane_kernel_size
                )));
            }
            if self.membrane_angles_deg.is_empty()
                || self
                    .membrane_angles_deg
                    .iter()
                    .any(|a| !(0.0..180.0).contains(a))
            {
                return Err(Error::arg("membrane angles must lie in [0, 180)"));
            }
        }
        Ok(())
    }

    /// Number of channels `featurize_classical` emits for this config.
    pub fn channel_count(&self) -> usize {
        let s = self.sigmas.len();
        let mut n = 0;
        if self.enabled(Filter::Gaussian) {
            n += s;
        }
        if self.enabled(Filter::Sobel) {
            n += s;
        }
        if self.enabled(Filter::Hessian) {
            n += 5 * s;
        }
        if self.enabled(Filter::Dog) {
            n += s * s.saturating_sub(1) / 2;
        }
        if self.enabled(Filter::Membrane) {
            n += MEMBRANE_STATS.len();
        }
        n
    }

    /// Smallest image side the config accepts.
    pub fn min_side(&self) -> usize {
        if self.enabled(Filter::Membrane) {
            self.membrane_kernel_size
        } else {
            3
        }
    }
}

const MEMBRANE_STATS: [&str; 6] = ["sum", "mean", "std", "median", "max", "min"];
const HESSIAN_PARTS: [&str; 5] = ["eig1", "eig2", "mod", "trace", "det"];

/// Rec. 709 luminance for `[H, W, 3]`; single-channel input passes through.
pub fn to_luminance(image: &Tensor) -> Result<Plane> {
    let (h, w, c) = image.hwc()?;
    match c {
        1 => image.plane(0),
        3 | 4 => {
            let data = image
                .data()
                .chunks(c)
                .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
                .collect();
            Plane::new(h, w, data)
        }
        _ => Err(Error::shape(format!("cannot take luminance of {c} channels"))),
    }
}

/// Normalised sampled Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let raw: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / s2).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Single-pixel-wide line of `size` taps through the kernel centre at
/// `angle_deg` (counter-clockwise from the +x axis, y pointing down), each
/// weighted `1/size`.
pub fn line_kernel_taps(size: usize, angle_deg: f32) -> Vec<(isize, isize, f32)> {
    let r = (size / 2) as isize;
    let theta = (angle_deg as f64).to_radians();
    let (s, c) = theta.sin_cos();
    let w = 1.0 / size as f32;
    (-r..=r)
        .map(|t| {
            if c.abs() >= s.abs() {
                let dy = (-(t as f64) * s / c).round() as isize;
                (dy, t, w)
            } else {
                let dx = (-(t as f64) * c / s).round() as isize;
                (t, dx, w)
            }
        })
        .collect()
}

fn sigma_label(s: f32) -> String {
    format!("{s}")
}

fn blur(image: &Plane, sigma: f32) -> Result<Plane> {
    if sigma < 0.0 {
        return Err(Error::arg(format!("negative sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let k = gaussian_kernel(sigma);
    convolve_separable(image, &k, &k, Padding::Reflect)
}

/// Reflect-padded view used by the per-pixel filters.
struct Sampler<'a> {
    p: &'a Plane,
}

impl Sampler<'_> {
    #[inline]
    fn get(&self, y: isize, x: isize) -> f32 {
        let (h, w) = (self.p.height, self.p.width);
        let yy = if y >= 0 && (y as usize) < h { y as usize } else { reflect_index(y, h) };
        let xx = if x >= 0 && (x as usize) < w { x as usize } else { reflect_index(x, w) };
        self.p.data[yy * w + xx]
    }

    #[inline]
    fn sobel(&self, y: isize, x: isize) -> f32 {
        let g = |dy, dx| self.get(y + dy, x + dx);
        let gx = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1) - g(-1, -1) - 2.0 * g(0, -1) - g(1, -1)) * 0.5;
        let gy = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1) - g(-1, -1) - 2.0 * g(-1, 0) - g(-1, 1)) * 0.5;
        (gx * gx + gy * gy).sqrt()
    }

    #[inline]
    fn hessian(&self, y: isize, x: isize, out: &mut [f32]) {
        let g = |dy, dx| self.get(y + dy, x + dx);
        let c = g(0, 0);
        let ixx = g(0, 1) - 2.0 * c + g(0, -1);
        let iyy = g(1, 0) - 2.0 * c + g(-1, 0);
        let ixy = (g(1, 1) - g(1, -1) - g(-1, 1) + g(-1, -1)) * 0.25;
        let half_trace = 0.5 * (ixx + iyy);
        let half_diff = 0.5 * (ixx - iyy);
        let disc = (half_diff * half_diff + ixy * ixy).sqrt();
        out[0] = half_trace + disc;
        out[1] = half_trace - disc;
        out[2] = (ixx * ixx + 2.0 * ixy * ixy + iyy * iyy).sqrt();
        out[3] = ixx + iyy;
        out[4] = ixx * iyy - ixy * ixy;
    }
}

/// Runs `f(y, x, dst)` for every pixel, where `dst` is that pixel's
/// `[offset, offset + n)` slice of an interleaved `stride`-channel buffer.
fn fill_channels<F>(out: &mut [f32], h: usize, w: usize, stride: usize, offset: usize, n: usize, f: F)
where
    F: Fn(usize, usize, &mut [f32]) + Sync,
{
    debug_assert_eq!(out.len(), h * w * stride);
    out.par_chunks_mut(w * stride).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            f(y, x, &mut row[x * stride + offset..x * stride + offset + n]);
        }
    });
}

struct Assembler {
    h: usize,
    w: usize,
    stride: usize,
    data: Vec<f32>,
    names: Vec<String>,
}

impl Assembler {
    fn new(h: usize, w: usize, stride: usize) -> Self {
        Self {
            h,
            w,
            stride,
            data: vec![0.0; h * w * stride],
            names: Vec::with_capacity(stride),
        }
    }

    fn push<F>(&mut self, names: Vec<String>, f: F)
    where
        F: Fn(usize, usize, &mut [f32]) + Sync,
    {
        let offset = self.names.len();
        let n = names.len();
        fill_channels(&mut self.data, self.h, self.w, self.stride, offset, n, f);
        self.names.extend(names);
    }

    fn finish(self) -> Result<FeatureStack> {
        debug_assert_eq!(self.names.len(), self.stride);
        let t = Tensor::new(vec![self.h, self.w, self.stride], self.data)?;
        FeatureStack::new(t.with_channel_names(self.names)?)
    }
}

fn gaussian_planes(image: &Plane, sigmas: &[f32]) -> Result<Vec<Plane>> {
    sigmas.iter().map(|&s| blur(image, s)).collect()
}

fn push_gaussians(asm: &mut Assembler, planes: &[Plane], sigmas: &[f32]) {
    let names = sigmas.iter().map(|s| format!("gauss_s{}", sigma_label(*s))).collect();
    let w = asm.w;
    asm.push(names, |y, x, dst| {
        for (d, p) in dst.iter_mut().zip(planes) {
            *d = p.data[y * w + x];
        }
    });
}

fn push_sobel(asm: &mut Assembler, planes: &[Plane], labels: &[String]) {
    let names = labels.iter().map(|l| format!("sobel_{l}")).collect();
    let samplers: Vec<Sampler> = planes.iter().map(|p| Sampler { p }).collect();
    asm.push(names, |y, x, dst| {
        for (d, s) in dst.iter_mut().zip(&samplers) {
            *d = s.sobel(y as isize, x as isize);
        }
    });
}

fn push_hessian(asm: &mut Assembler, planes: &[Plane], labels: &[String]) {
    let names = labels
        .iter()
        .flat_map(|l| HESSIAN_PARTS.iter().map(move |part| format!("hessian_{part}_{l}")))
        .collect();
    let samplers: Vec<Sampler> = planes.iter().map(|p| Sampler { p }).collect();
    asm.push(names, |y, x, dst| {
        for (chunk, s) in dst.chunks_mut(5).zip(&samplers) {
            s.hessian(y as isize, x as isize, chunk);
        }
    });
}

fn dog_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

fn push_dog(asm: &mut Assembler, planes: &[Plane], labels: &[String]) {
    let pairs = dog_pairs(planes.len());
    let names = pairs
        .iter()
        .map(|&(i, j)| format!("dog_{}_{}", labels[i], labels[j]))
        .collect();
    let w = asm.w;
    asm.push(names, |y, x, dst| {
        let px = y * w + x;
        for (d, &(i, j)) in dst.iter_mut().zip(&pairs) {
            *d = planes[i].data[px] - planes[j].data[px];
        }
    });
}

fn push_membrane(asm: &mut Assembler, image: &Plane, config: &FeatureSetConfig) {
    let kernels: Vec<Vec<(isize, isize, f32)>> = config
        .membrane_angles_deg
        .iter()
        .map(|&a| line_kernel_taps(config.membrane_kernel_size, a))
        .collect();
    let names = MEMBRANE_STATS.iter().map(|s| format!("membrane_{s}")).collect();
    let sampler = Sampler { p: image };
    asm.push(names, |y, x, dst| {
        let mut responses: Vec<f32> = kernels
            .iter()
            .map(|taps| {
                taps.iter()
                    .map(|&(dy, dx, wt)| sampler.get(y as isize + dy, x as isize + dx) * wt)
                    .sum()
            })
            .collect();
        aggregate(&mut responses, dst);
    });
}

/// `{sum, mean, std, median, max, min}` of the orientation responses.
fn aggregate(values: &mut [f32], dst: &mut [f32]) {
    let n = values.len() as f64;
    let sum: f64 = values.iter().map(|&v| v as f64).sum();
    let mean = sum / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len();
    let median = if m % 2 == 1 {
        values[m / 2] as f64
    } else {
        (values[m / 2 - 1] as f64 + values[m / 2] as f64) * 0.5
    };
    dst[0] = sum as f32;
    dst[1] = mean as f32;
    dst[2] = var.sqrt() as f32;
    dst[3] = median as f32;
    dst[4] = values[m - 1];
    dst[5] = values[0];
}

fn labels_of(gaussians: &FeatureStack) -> Vec<String> {
    gaussians
        .names()
        .iter()
        .map(|n| n.strip_prefix("gauss_").unwrap_or(n).to_string())
        .collect()
}

fn planes_of(stack: &FeatureStack) -> Result<Vec<Plane>> {
    (0..stack.channels()).map(|c| stack.raster().plane(c)).collect()
}

/// One blurred copy of `image` per sigma; sigma 0 is an exact copy.
pub fn gaussian_stack(image: &Plane, sigmas: &[f32]) -> Result<FeatureStack> {
    let planes = gaussian_planes(image, sigmas)?;
    let mut asm = Assembler::new(image.height, image.width, sigmas.len());
    push_gaussians(&mut asm, &planes, sigmas);
    asm.finish()
}

/// Gradient magnitude of each blurred copy.
pub fn sobel_stack(gaussians: &FeatureStack) -> Result<FeatureStack> {
    let planes = planes_of(gaussians)?;
    let labels = labels_of(gaussians);
    let mut asm = Assembler::new(gaussians.height(), gaussians.width(), planes.len());
    push_sobel(&mut asm, &planes, &labels);
    asm.finish()
}

/// Five Hessian statistics per blurred copy: eigenvalues (descending),
/// module, trace, determinant.
pub fn hessian_stack(gaussians: &FeatureStack) -> Result<FeatureStack> {
    let planes = planes_of(gaussians)?;
    let labels = labels_of(gaussians);
    let mut asm = Assembler::new(gaussians.height(), gaussians.width(), 5 * planes.len());
    push_hessian(&mut asm, &planes, &labels);
    asm.finish()
}

/// `G(sigma_i) - G(sigma_j)` for every pair `i < j`. Returns `None` when
/// fewer than two scales exist.
pub fn dog_stack(gaussians: &FeatureStack) -> Result<Option<FeatureStack>> {
    let planes = planes_of(gaussians)?;
    if planes.len() < 2 {
        return Ok(None);
    }
    let labels = labels_of(gaussians);
    let n = dog_pairs(planes.len()).len();
    let mut asm = Assembler::new(gaussians.height(), gaussians.width(), n);
    push_dog(&mut asm, &planes, &labels);
    asm.finish().map(Some)
}

/// Aggregated oriented line-kernel responses.
pub fn membrane_projections(image: &Plane, config: &FeatureSetConfig) -> Result<FeatureStack> {
    if config.membrane_kernel_size.is_multiple_of(2) {
        return Err(Error::arg(format!(
            "membrane kernel size {} must be odd",
            config.membrane_kernel_size
        )));
    }
    if config.membrane_angles_deg.is_empty() {
        return Err(Error::arg("no membrane angles configured"));
    }
    let mut asm = Assembler::new(image.height, image.width, MEMBRANE_STATS.len());
    push_membrane(&mut asm, image, config);
    asm.finish()
}

/// Full classical stack: enabled sub-stacks in the order gaussian, sobel,
/// hessian, dog, membrane. Colour input is reduced to luminance first.
pub fn featurize_classical(image: &Tensor, config: &FeatureSetConfig) -> Result<FeatureStack> {
    config.validate()?;
    let gray = to_luminance(image)?;
    let side = config.min_side();
    if gray.height < side || gray.width < side {
        return Err(Error::arg(format!(
            "image {}x{} smaller than the {side}px kernel",
            gray.height, gray.width
        )));
    }
    let needs_blur = [Filter::Gaussian, Filter::Sobel, Filter::Hessian, Filter::Dog]
        .iter()
        .any(|f| config.enabled(*f));
    let planes = if needs_blur {
        gaussian_planes(&gray, &config.sigmas)?
    } else {
        Vec::new()
    };
    let labels: Vec<String> = config.sigmas.iter().map(|s| format!("s{}", sigma_label(*s))).collect();
    let mut asm = Assembler::new(gray.height, gray.width, config.channel_count());
    if config.enabled(Filter::Gaussian) {
        push_gaussians(&mut asm, &planes, &config.sigmas);
    }
    if config.enabled(Filter::Sobel) {
        push_sobel(&mut asm, &planes, &labels);
    }
    if config.enabled(Filter::Hessian) {
        push_hessian(&mut asm, &planes, &labels);
    }
    if config.enabled(Filter::Dog) && planes.len() >= 2 {
        push_dog(&mut asm, &planes, &labels);
    }
    drop(planes);
    if config.enabled(Filter::Membrane) {
        push_membrane(&mut asm, &gray, config);
    }
    asm.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_fn(h: usize, w: usize, f: impl Fn(f32, f32) -> f32) -> Plane {
        let data = (0..h * w).map(|i| f((i % w) as f32, (i / w) as f32)).collect();
        Plane::new(h, w, data).unwrap()
    }

    fn channel(stack: &FeatureStack, name: &str) -> Plane {
        let c = stack.names().iter().position(|n| n == name).unwrap();
        stack.raster().plane(c).unwrap()
    }

    #[test]
    fn sigma_zero_is_identity() {
        let img = plane_fn(20, 20, |x, y| (x * 0.37 + y * y * 0.1).sin());
        let g = gaussian_stack(&img, &[0.0, 1.0]).unwrap();
        assert_eq!(channel(&g, "gauss_s0").data, img.data);
    }

    #[test]
    fn negative_sigma_rejected() {
        let img = plane_fn(8, 8, |x, _| x);
        assert!(matches!(gaussian_stack(&img, &[-1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn impulse_gives_kernel() {
        let mut img = Plane::zeros(21, 21);
        img.data[10 * 21 + 10] = 1.0;
        let g = gaussian_stack(&img, &[1.0]).unwrap();
        let out = channel(&g, "gauss_s1");
        // sampled exp(-r^2/2) normalised over the 7x7 support
        let k1: Vec<f64> = (-3i32..=3).map(|x| (-(x * x) as f64 / 2.0).exp()).collect();
        let z: f64 = k1.iter().sum();
        for y in 0..21 {
            for x in 0..21 {
                let (dy, dx) = (y as i32 - 10, x as i32 - 10);
                let expected = if dy.abs() <= 3 && dx.abs() <= 3 {
                    k1[(dy + 3) as usize] * k1[(dx + 3) as usize] / (z * z)
                } else {
                    0.0
                };
                assert!((out.at(y, x) as f64 - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_image_features() {
        let img = Tensor::filled(vec![24, 24, 1], 0.5).unwrap();
        let cfg = FeatureSetConfig {
            sigmas: vec![0.0, 1.0, 2.0],
            membrane_kernel_size: 7,
            ..Default::default()
        };
        let s = featurize_classical(&img, &cfg).unwrap();
        for (c, name) in s.names().iter().enumerate() {
            let p = s.raster().plane(c).unwrap();
            let expected = if name.starts_with("gauss") || name == "membrane_mean" || name.starts_with("membrane_m") {
                0.5
            } else if name == "membrane_sum" {
                3.0
            } else {
                0.0
            };
            for v in p.data {
                assert!((v - expected).abs() < 1e-5, "{name}: {v}");
            }
        }
    }

    #[test]
    fn ramp_sobel_is_four() {
        let g = gaussian_stack(&plane_fn(9, 9, |x, _| x), &[0.0]).unwrap();
        let s = sobel_stack(&g).unwrap();
        let p = s.raster().plane(0).unwrap();
        for y in 1..8 {
            for x in 1..8 {
                assert!((p.at(y, x) - 4.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sobel_rotation_covariant() {
        let img = plane_fn(11, 11, |x, y| (x * 0.7).sin() + y * y * 0.05 + x * y * 0.01);
        // 90 degree rotation: (y, x) -> (x, n-1-y)
        let n = 11;
        let mut rot = Plane::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                rot.data[x * n + (n - 1 - y)] = img.at(y, x);
            }
        }
        let a = sobel_stack(&gaussian_stack(&img, &[0.0]).unwrap()).unwrap();
        let b = sobel_stack(&gaussian_stack(&rot, &[0.0]).unwrap()).unwrap();
        let (pa, pb) = (a.raster().plane(0).unwrap(), b.raster().plane(0).unwrap());
        for y in 0..n {
            for x in 0..n {
                assert!((pa.at(y, x) - pb.at(x, n - 1 - y)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn hessian_of_parabolas() {
        let g = gaussian_stack(&plane_fn(9, 9, |x, _| x * x), &[0.0]).unwrap();
        let h = hessian_stack(&g).unwrap();
        let v = h.pixel(4, 4);
        assert_eq!(&v[..5], &[2.0, 0.0, 2.0, 2.0, 0.0]);
        let g = gaussian_stack(&plane_fn(9, 9, |x, y| x * x + y * y), &[0.0]).unwrap();
        let v = hessian_stack(&g).unwrap().pixel(4, 4).to_vec();
        assert_eq!(v[0], 2.0);
        assert_eq!(v[1], 2.0);
        assert_eq!(v[3], 4.0);
        assert_eq!(v[4], 4.0);
        assert_eq!(h.names()[0], "hessian_eig1_s0");
    }

    #[test]
    fn dog_counts_and_impulse() {
        let mut img = Plane::zeros(15, 15);
        img.data[7 * 15 + 7] = 1.0;
        let sigmas = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0];
        let g = gaussian_stack(&img, &sigmas).unwrap();
        let d = dog_stack(&g).unwrap().unwrap();
        assert_eq!(d.channels(), 15);
        let g1 = channel(&g, "gauss_s1");
        let d01 = channel(&d, "dog_s0_s1");
        for i in 0..img.data.len() {
            assert!((d01.data[i] - (img.data[i] - g1.data[i])).abs() < 1e-6);
        }
        let single = gaussian_stack(&img, &[1.0]).unwrap();
        assert!(dog_stack(&single).unwrap().is_none());
    }

    #[test]
    fn line_kernels_are_single_pixel_lines() {
        for a in [0.0, 30.0, 60.0, 90.0, 120.0, 150.0] {
            let taps = line_kernel_taps(19, a);
            assert_eq!(taps.len(), 19);
            let mut seen = std::collections::HashSet::new();
            for &(dy, dx, w) in &taps {
                assert!(dy.abs() <= 9 && dx.abs() <= 9);
                assert!(seen.insert((dy, dx)));
                assert!((w - 1.0 / 19.0).abs() < 1e-7);
            }
            assert!(seen.contains(&(0, 0)));
        }
        let vertical = line_kernel_taps(5, 90.0);
        assert!(vertical.iter().all(|&(_, dx, _)| dx == 0));
        let horizontal = line_kernel_taps(5, 0.0);
        assert!(horizontal.iter().all(|&(dy, _, _)| dy == 0));
    }

    #[test]
    fn membrane_peaks_on_vertical_line() {
        let img = plane_fn(31, 31, |x, _| if x == 15.0 { 1.0 } else { 0.0 });
        let m = membrane_projections(&img, &FeatureSetConfig::default()).unwrap();
        assert_eq!(m.channels(), 6);
        let max = channel(&m, "membrane_max");
        for y in 0..31 {
            assert!((max.at(y, 15) - 1.0).abs() < 1e-6);
        }
        let even = FeatureSetConfig {
            membrane_kernel_size: 18,
            ..Default::default()
        };
        assert!(membrane_projections(&img, &even).is_err());
    }

    #[test]
    fn default_config_has_63_unique_channels() {
        let cfg = FeatureSetConfig::default();
        assert_eq!(cfg.channel_count(), 63);
        let img = Tensor::from_fn_hwc(20, 22, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f32 / 7.0);
        let s = featurize_classical(&img, &cfg).unwrap();
        assert_eq!(s.channels(), 63);
        let uniq: std::collections::HashSet<_> = s.names().iter().collect();
        assert_eq!(uniq.len(), 63);
        assert!(s.raster().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gaussian_only_matches_gaussian_stack() {
        let img = Tensor::from_fn_hwc(20, 20, 1, |y, x, _| ((x * y) % 5) as f32);
        let cfg = FeatureSetConfig::only(&[Filter::Gaussian]);
        let s = featurize_classical(&img, &cfg).unwrap();
        let g = gaussian_stack(&img.plane(0).unwrap(), &cfg.sigmas).unwrap();
        assert_eq!(s, g);
    }

    #[test]
    fn too_small_and_invalid_configs() {
        let img = Tensor::zeros(vec![10, 40, 1]).unwrap();
        assert!(matches!(
            featurize_classical(&img, &FeatureSetConfig::default()),
            Err(Error::Argument(_))
        ));
        let mut cfg = FeatureSetConfig::only(&[Filter::Gaussian]);
        cfg.sigmas = vec![1.0, 1.0];
        assert!(featurize_classical(&img, &cfg).is_err());
        cfg.enabled_filters.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn luminance_weights() {
        let img = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_luminance(&img).unwrap().data[0] - 0.2126).abs() < 1e-7);
    }
}
