use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bilinear resampling of an `[H, W, C]` grid with half-pixel centres
/// (align-corners = false). Source coordinates are clamped to the grid, so
/// the output never leaves the input's value range.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!("target size {out_h}x{out_w} must be positive")));
    }
    let (h, w, c) = input.hwc()?;
    let ys = axis_weights(h, out_h);
    let xs = axis_weights(w, out_w);
    let src = input.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = &src[(y0 * w + x0) * c..][..c];
            let p01 = &src[(y0 * w + x1) * c..][..c];
            let p10 = &src[(y1 * w + x0) * c..][..c];
            let p11 = &src[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                let top = p00[ch] + (p01[ch] - p00[ch]) * fx;
                let bottom = p10[ch] + (p11[ch] - p10[ch]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    let mut t = Tensor::new(vec![out_h, out_w, c], out)?;
    if let Some(names) = input.channel_names() {
        t = t.with_channel_names(names.to_vec())?;
    }
    Ok(t)
}

fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == i1 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, frac)
        })
        .collect()
}
