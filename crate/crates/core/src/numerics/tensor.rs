use std::collections::HashSet;

use crate::error::{Error, Result};

/// Row-major float32 tensor of rank 1 to 4.
///
/// The last axis is the channel axis; `channel_names`, when present, labels
/// each entry along it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    channel_names: Option<Vec<String>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_dims(&dims)?;
        let expected = checked_product(&dims)?;
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} imply {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            data,
            channel_names: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        validate_dims(&dims)?;
        let len = checked_product(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; len],
            channel_names: None,
        })
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Builds an `[H, W, C]` tensor by evaluating `f(y, x, c)`.
    pub fn from_fn_hwc(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self::new(vec![h, w, c], data).expect("dims match data by construction")
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        let extent = *self.dims.last().unwrap();
        if names.len() != extent {
            return Err(Error::shape(format!(
                "{} channel names for channel extent {extent}",
                names.len()
            )));
        }
        let mut seen = HashSet::with_capacity(names.len());
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::arg(format!("duplicate channel name {n:?}")));
            }
        }
        self.channel_names = Some(names);
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel_names(&self) -> Option<&[String]> {
        self.channel_names.as_deref()
    }

    pub fn take_channel_names(&mut self) -> Option<Vec<String>> {
        self.channel_names.take()
    }

    pub fn channels(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Interprets the tensor as an image grid: rank 2 is `[H, W]` with one
    /// channel, rank 3 is `[H, W, C]`.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w] => Ok((h, w, 1)),
            &[h, w, c] => Ok((h, w, c)),
            d => Err(Error::shape(format!("expected [H,W] or [H,W,C], got {d:?}"))),
        }
    }

    /// Interprets the tensor as a sample matrix `[M, F]`.
    pub fn matrix(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[m, f] => Ok((m, f)),
            d => Err(Error::shape(format!("expected [M,F], got {d:?}"))),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        validate_dims(&dims)?;
        if checked_product(&dims)? != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        if dims.last() != self.dims.last() {
            self.channel_names = None;
        }
        self.dims = dims;
        Ok(self)
    }

    /// One channel of an `[H, W, C]` tensor as a plane.
    pub fn plane(&self, c: usize) -> Result<Plane> {
        let (h, w, ch) = self.hwc()?;
        if c >= ch {
            return Err(Error::shape(format!("channel {c} out of range for {ch} channels")));
        }
        let data = self.data.iter().skip(c).step_by(ch).copied().collect();
        Ok(Plane { height: h, width: w, data })
    }

    /// Interleaves equally-sized planes into an `[H, W, C]` tensor.
    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::arg("at least one plane required"))?;
        let (h, w) = (first.height, first.width);
        if planes.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::shape("planes differ in size"));
        }
        let c = planes.len();
        let mut data = vec![0.0f32; h * w * c];
        for (ci, p) in planes.iter().enumerate() {
            for (i, v) in p.data.iter().enumerate() {
                data[i * c + ci] = *v;
            }
        }
        Self::new(vec![h, w, c], data)
    }

    /// Concatenates `[H, W, C_i]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("nothing to concatenate"))?;
        let (h, w, _) = first.hwc()?;
        let mut total = 0;
        for p in parts {
            let (ph, pw, pc) = p.hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "cannot concatenate {ph}x{pw} with {h}x{w}"
                )));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for p in parts {
                let c = p.channels();
                data.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        let mut out = Self::new(vec![h, w, total], data)?;
        if parts.iter().all(|p| p.channel_names.is_some()) {
            let names = parts
                .iter()
                .flat_map(|p| p.channel_names.clone().unwrap())
                .collect();
            out = out.with_channel_names(names)?;
        }
        Ok(out)
    }

    /// Channels `start..end` of an `[H, W, C]` tensor, names carried along.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        if start > end || end > c {
            return Err(Error::arg(format!("channel range {start}..{end} outside 0..{c}")));
        }
        let n = end - start;
        let mut data = Vec::with_capacity(h * w * n);
        for px in 0..h * w {
            data.extend_from_slice(&self.data[px * c + start..px * c + end]);
        }
        let mut out = Self::new(vec![h, w, n], data)?;
        if let Some(names) = &self.channel_names {
            out.channel_names = Some(names[start..end].to_vec());
        }
        Ok(out)
    }
}

/// Single-channel `H x W` float plane; the working unit of the filter bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || height * width != data.len() {
            return Err(Error::shape(format!(
                "plane {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 1], self.data).expect("plane dims are valid")
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::shape(format!("rank {} outside 1..=4", dims.len())));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero extent in {dims:?}")));
    }
    Ok(())
}

pub(crate) fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::shape(format!("dims {dims:?} overflow")))
    })
}
