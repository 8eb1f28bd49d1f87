//! Guided convolutional feature upsampler (inference only).
//!
//! Layout, with `s = num_stages` and `R_0 = (H, W)`, `R_i = ceil(R_{i-1} / 2)`:
//!
//! * `down.0`: DoubleConv(3 -> d_down) on the image at `R_0`, giving `g_0`.
//! * `down.i`, `i = 1..=s`: 2x2 max-pool then DoubleConv(d_down -> d_down), giving `g_i` at `R_i`.
//! * The low-resolution grid is bilinearly resampled onto `R_s` when its size differs.
//! * `up.0`: DoubleConv(d_in + d_down -> d_hidden) on `[lr, g_s]`.
//! * `up.i`, `i = 1..=s`: bilinear resize to `R_{s-i}`, concat `g_{s-i}`, DoubleConv(d_hidden + d_down -> d_hidden).
//! * `head`: 1x1 conv d_hidden -> d_out.
//!
//! A DoubleConv `P` holds `P.conv1`, `P.norm1`, `P.conv2`, `P.norm2`; convs
//! carry `.weight` `[k,k,Cin,Cout]` and `.bias` `[Cout]`, batch norms carry
//! `.weight`, `.bias`, `.running_mean`, `.running_var`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::formats::NamedTensorArchive;
use super::LowResFeatures;
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::numerics::{conv2d, max_pool2, resize_bilinear, Padding, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsamplerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub d_hidden: usize,
    pub d_down: usize,
    pub kernel_size: usize,
    pub num_stages: usize,
}

impl UpsamplerSpec {
    /// Stage count for a patch size: `ceil(log2 p)`.
    pub fn stages_for_patch(patch_size: usize) -> usize {
        let mut s = 0;
        while (1usize << s) < patch_size {
            s += 1;
        }
        s.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_in, self.d_out, self.d_hidden, self.d_down, self.num_stages];
        if dims.contains(&0) {
            return Err(Error::Archive(format!("all upsampler dims must be positive: {self:?}")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Archive(format!("kernel size {} must be odd", self.kernel_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Silu,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f32]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Silu => v.iter_mut().for_each(|x| *x /= 1.0 + (-*x).exp()),
            Activation::Identity => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Batch,
    None,
}

fn default_eps() -> f32 {
    1e-5
}

fn default_padding() -> Padding {
    Padding::Zero
}

/// Self-describing manifest stored in a WAR1 archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsamplerManifest {
    pub format_version: u32,
    pub kind: String,
    pub spec: UpsamplerSpec,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_padding")]
    pub padding: Padding,
    /// Divide each low-resolution feature vector by its L1 norm before use.
    #[serde(default)]
    pub lr_l1_normalize: bool,
}

impl UpsamplerManifest {
    pub fn new(spec: UpsamplerSpec) -> Self {
        Self {
            format_version: 1,
            kind: "upsampler".into(),
            spec,
            activation: Activation::Relu,
            normalization: Normalization::Batch,
            norm_eps: default_eps(),
            padding: Padding::Zero,
            lr_l1_normalize: false,
        }
    }

    /// Every tensor the forward pass reads, with its dims.
    pub fn required_layers(&self) -> Vec<(String, Vec<usize>)> {
        let s = &self.spec;
        let mut out = Vec::new();
        let mut double_conv = |prefix: String, cin: usize, cout: usize| {
            let k = s.kernel_size;
            for (i, ci) in [(1, cin), (2, cout)] {
                out.push((format!("{prefix}.conv{i}.weight"), vec![k, k, ci, cout]));
                out.push((format!("{prefix}.conv{i}.bias"), vec![cout]));
                if self.normalization == Normalization::Batch {
                    for p in ["weight", "bias", "running_mean", "running_var"] {
                        out.push((format!("{prefix}.norm{i}.{p}"), vec![cout]));
                    }
                }
            }
        };
        double_conv("down.0".into(), 3, s.d_down);
        for i in 1..=s.num_stages {
            double_conv(format!("down.{i}"), s.d_down, s.d_down);
        }
        double_conv("up.0".into(), s.d_in + s.d_down, s.d_hidden);
        for i in 1..=s.num_stages {
            double_conv(format!("up.{i}"), s.d_hidden + s.d_down, s.d_hidden);
        }
        out.push(("head.weight".into(), vec![1, 1, s.d_hidden, s.d_out]));
        out.push(("head.bias".into(), vec![s.d_out]));
        out
    }
}

/// Validated upsampler weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive {
    pub manifest: UpsamplerManifest,
    archive: NamedTensorArchive,
}

impl WeightArchive {
    pub fn from_archive(mut archive: NamedTensorArchive) -> Result<Self> {
        if let Value::Object(o) = &mut archive.manifest {
            o.remove("layers");
        }
        let manifest: UpsamplerManifest = serde_json::from_value(archive.manifest.clone())
            .map_err(|e| Error::Archive(format!("bad upsampler manifest: {e}")))?;
        if manifest.kind != "upsampler" {
            return Err(Error::Archive(format!("archive kind {:?} is not an upsampler", manifest.kind)));
        }
        if manifest.format_version != 1 {
            return Err(Error::Archive(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        manifest.spec.validate()?;
        for (name, dims) in manifest.required_layers() {
            let t = archive.require(&name)?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Archive(format!(
                    "layer {name:?} has dims {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        Ok(Self { manifest, archive })
    }

    /// Builds an archive whose every tensor comes from `init(name, dims)`.
    pub fn from_fn(manifest: UpsamplerManifest, mut init: impl FnMut(&str, &[usize]) -> Tensor) -> Result<Self> {
        let mut value = serde_json::to_value(&manifest)?;
        if let Value::Object(o) = &mut value {
            o.remove("layers");
        }
        let mut archive = NamedTensorArchive::new(value);
        for (name, dims) in manifest.required_layers() {
            let t = init(&name, &dims);
            archive.push(name, t);
        }
        Self::from_archive(archive)
    }

    pub fn zeros(manifest: UpsamplerManifest) -> Result<Self> {
        Self::from_fn(manifest, |_, dims| Tensor::zeros(dims.to_vec()).unwrap())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.archive.require(name)
    }

    pub fn archive(&self) -> &NamedTensorArchive {
        &self.archive
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.archive.encode()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.archive.write(path)
    }

    pub fn total_parameters(&self) -> usize {
        self.archive.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn load_weight_archive(path: impl AsRef<Path>) -> Result<WeightArchive> {
    WeightArchive::from_archive(NamedTensorArchive::read(path)?)
}

/// Spatial sizes `R_0..=R_s` visited by the down- and up-samplers.
pub fn stage_resolutions(h: usize, w: usize, stages: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(h, w)];
    for _ in 0..stages {
        let (ph, pw) = *out.last().unwrap();
        out.push((ph.div_ceil(2), pw.div_ceil(2)));
    }
    out
}

struct Forward<'a> {
    weights: &'a WeightArchive,
}

impl Forward<'_> {
    fn conv(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let w = self.weights.tensor(&format!("{prefix}.weight"))?;
        let b = self.weights.tensor(&format!("{prefix}.bias"))?;
        let mut y = conv2d(x, w, 1, self.weights.manifest.padding)?;
        let c = b.len();
        for px in y.data_mut().chunks_mut(c) {
            for (v, bias) in px.iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
        Ok(y)
    }

    fn norm(&self, x: &mut Tensor, prefix: &str) -> Result<()> {
        if self.weights.manifest.normalization == Normalization::None {
            return Ok(());
        }
        let get = |p: &str| self.weights.tensor(&format!("{prefix}.{p}"));
        let (gamma, beta) = (get("weight")?, get("bias")?);
        let (mean, var) = (get("running_mean")?, get("running_var")?);
        let eps = self.weights.manifest.norm_eps;
        let scale: Vec<f32> = gamma
            .data()
            .iter()
            .zip(var.data())
            .map(|(g, v)| g / (v + eps).sqrt())
            .collect();
        let c = scale.len();
        for px in x.data_mut().chunks_mut(c) {
            for i in 0..c {
                px[i] = (px[i] - mean.data()[i]) * scale[i] + beta.data()[i];
            }
        }
        Ok(())
    }

    /// Consumes its input so the wide concatenated tensors are freed early.
    fn double_conv(&self, x: Tensor, prefix: &str) -> Result<Tensor> {
        let act = self.weights.manifest.activation;
        let mut y = self.conv(&x, &format!("{prefix}.conv1"))?;
        drop(x);
        self.norm(&mut y, &format!("{prefix}.norm1"))?;
        act.apply(y.data_mut());
        let mut z = self.conv(&y, &format!("{prefix}.conv2"))?;
        self.norm(&mut z, &format!("{prefix}.norm2"))?;
        act.apply(z.data_mut());
        Ok(z)
    }
}

fn l1_normalize(t: &mut Tensor) {
    let c = t.channels();
    for px in t.data_mut().chunks_mut(c) {
        let n: f32 = px.iter().map(|v| v.abs()).sum();
        if n > 0.0 {
            px.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn as_rgb(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    match c {
        3 if image.rank() == 3 => Ok(image.clone()),
        3 => Ok(image.clone().reshape(vec![h, w, 3])?),
        1 => Ok(Tensor::new(
            vec![h, w, 3],
            image.data().iter().flat_map(|&v| [v, v, v]).collect(),
        )?),
        _ => Err(Error::shape(format!("upsampler needs an RGB or grey image, got {c} channels"))),
    }
}

/// Runs the guided upsampler, returning `d_out` channels at exactly the
/// image's `(H, W)`.
pub fn upsample(image: &Tensor, lr: &LowResFeatures, weights: &WeightArchive) -> Result<FeatureStack> {
    let spec = &weights.manifest.spec;
    let image = as_rgb(image)?;
    let (h, w, _) = image.hwc()?;
    let (_, _, d) = lr.grid.hwc()?;
    if d != spec.d_in {
        return Err(Error::Archive(format!(
            "archive expects {} input channels, features have {d}",
            spec.d_in
        )));
    }
    let expected_stages = UpsamplerSpec::stages_for_patch(lr.patch_size);
    if spec.num_stages != expected_stages {
        return Err(Error::Archive(format!(
            "archive has {} stages, patch size {} needs {expected_stages}",
            spec.num_stages, lr.patch_size
        )));
    }
    if h < lr.patch_size || w < lr.patch_size {
        return Err(Error::arg(format!(
            "image {h}x{w} smaller than patch size {}",
            lr.patch_size
        )));
    }
    let s = spec.num_stages;
    let res = stage_resolutions(h, w, s);
    let fwd = Forward { weights };

    let mut guidance = Vec::with_capacity(s + 1);
    guidance.push(fwd.double_conv(image, "down.0")?);
    for i in 1..=s {
        let pooled = max_pool2(&guidance[i - 1])?;
        guidance.push(fwd.double_conv(pooled, &format!("down.{i}"))?);
    }

    let mut x = lr.grid.clone();
    x.take_channel_names();
    if weights.manifest.lr_l1_normalize {
        l1_normalize(&mut x);
    }
    let (bh, bw) = res[s];
    if (x.dims()[0], x.dims()[1]) != (bh, bw) {
        x = resize_bilinear(&x, bh, bw)?;
    }
    let g = guidance.pop().expect("s + 1 guidance levels");
    let cat = Tensor::concat_channels(&[&x, &g])?;
    drop((x, g));
    x = fwd.double_conv(cat, "up.0")?;
    for i in 1..=s {
        let (th, tw) = res[s - i];
        let up = resize_bilinear(&x, th, tw)?;
        drop(x);
        let g = guidance.pop().expect("one guidance level per stage");
        let cat = Tensor::concat_channels(&[&up, &g])?;
        drop((up, g));
        x = fwd.double_conv(cat, &format!("up.{i}"))?;
    }
    let out = fwd.conv(&x, "head")?;
    drop(x);
    debug_assert_eq!(out.dims(), &[h, w, spec.d_out]);
    let mut stack = FeatureStack::with_prefix(out, "deep_")?;
    stack.variance_ordered = true;
    Ok(stack)
}
