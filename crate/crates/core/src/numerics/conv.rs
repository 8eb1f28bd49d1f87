use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{Plane, Tensor};
use crate::error::{Error, Result};

/// Border handling for convolutions.
///
/// `Reflect` and `Zero` are "same" paddings (output covers every input
/// position at the given stride); `None` only keeps fully-covered windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Reflect,
    Zero,
    None,
}

/// Mirror index `i` into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n-2`), folding as many times as needed.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Direct 2-D cross-correlation of `[H, W, Cin]` with `[kh, kw, Cin, Cout]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::arg("stride must be at least 1"));
    }
    let (h, w, cin) = input.hwc()?;
    let (kh, kw, kcin, cout) = match kernel.dims() {
        &[a, b, c, d] => (a, b, c, d),
        d => return Err(Error::shape(format!("kernel must be [kh,kw,Cin,Cout], got {d:?}"))),
    };
    if kcin != cin {
        return Err(Error::shape(format!("kernel expects {kcin} input channels, input has {cin}")));
    }
    let (oh, ow, pad_y, pad_x) = match padding {
        Padding::None => {
            if kh > h || kw > w {
                return Err(Error::shape(format!("{kh}x{kw} kernel larger than {h}x{w} input")));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0isize, 0isize)
        }
        Padding::Reflect | Padding::Zero => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::arg(format!("same padding needs odd kernel, got {kh}x{kw}")));
            }
            (h.div_ceil(stride), w.div_ceil(stride), (kh / 2) as isize, (kw / 2) as isize)
        }
    };
    let src = input.data();
    let k = kernel.data();
    let mut out = vec![0.0f32; oh * ow * cout];
    out.par_chunks_mut(ow * cout).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            let acc = &mut row[ox * cout..(ox + 1) * cout];
            for dy in 0..kh {
                let sy = (oy * stride) as isize + dy as isize - pad_y;
                let sy = match resolve(sy, h, padding) {
                    Some(v) => v,
                    None => continue,
                };
                for dx in 0..kw {
                    let sx = (ox * stride) as isize + dx as isize - pad_x;
                    let sx = match resolve(sx, w, padding) {
                        Some(v) => v,
                        None => continue,
                    };
                    let px = &src[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let kbase = (dy * kw + dx) * cin * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        let kr = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(kr) {
                            *a += v * kv;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![oh, ow, cout], out)
}

#[inline]
fn resolve(i: isize, n: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match padding {
        Padding::Reflect => Some(reflect_index(i, n)),
        _ => None,
    }
}

/// Separable same-size convolution of a plane: rows with `kx`, then columns
/// with `ky`. Both kernels must have odd length.
pub fn convolve_separable(plane: &Plane, kx: &[f32], ky: &[f32], padding: Padding) -> Result<Plane> {
    if kx.len().is_multiple_of(2) || ky.len().is_multiple_of(2) {
        return Err(Error::arg("separable kernels must have odd length"));
    }
    if padding == Padding::None {
        return Err(Error::arg("separable convolution requires a same padding"));
    }
    let (h, w) = (plane.height, plane.width);
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let src = &plane.data[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (i, &kv) in kx.iter().enumerate() {
                let sx = x as isize + i as isize - rx;
                if let Some(sx) = resolve(sx, w, padding) {
                    acc += src[sx] * kv;
                }
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0f32; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (i, &kv) in ky.iter().enumerate() {
            let sy = y as isize + i as isize - ry;
            if let Some(sy) = resolve(sy, h, padding) {
                let src = &tmp[sy * w..(sy + 1) * w];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += s * kv;
                }
            }
        }
    });
    Plane::new(h, w, out)
}

/// Same-size convolution of a plane with a kernel given as its non-zero taps
/// `(dy, dx, weight)` relative to the kernel centre. Exact for any kernel
/// whose remaining entries are zero.
pub fn conv2d_plane_sparse(plane: &Plane, taps: &[(isize, isize, f32)], padding: Padding) -> Result<Plane> {
    if padding == Padding::None {
        return Err(Error::arg("sparse plane convolution requires a same padding"));
    }
    let (h, w) = (plane.height, plane.width);
    let mut out = vec![0.0f32; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for &(dy, dx, kv) in taps {
                let sy = resolve(y as isize + dy, h, padding);
                let sx = resolve(x as isize + dx, w, padding);
                if let (Some(sy), Some(sx)) = (sy, sx) {
                    acc += plane.data[sy * w + sx] * kv;
                }
            }
            *o = acc;
        }
    });
    Plane::new(h, w, out)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns form partial
/// windows, so the output is `ceil(H/2) x ceil(W/2)`.
pub fn max_pool2(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let src = input.data();
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    for y in 0..h {
        for x in 0..w {
            let o = ((y / 2) * ow + x / 2) * c;
            let s = (y * w + x) * c;
            for ch in 0..c {
                if src[s + ch] > out[o + ch] {
                    out[o + ch] = src[s + ch];
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Vec<f32> {
        let (h, w, cin) = input.hwc().unwrap();
        let d = kernel.dims();
        let (kh, kw, cout) = (d[0], d[1], d[3]);
        let (oh, ow, py, px) = match padding {
            Padding::None => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
            _ => (
                h.div_ceil(stride),
                w.div_ceil(stride),
                (kh / 2) as isize,
                (kw / 2) as isize,
            ),
        };
        let mut out = vec![0.0f64; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0f64;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let mut sy = (oy * stride + dy) as isize - py;
                            let mut sx = (ox * stride + dx) as isize - px;
                            if padding == Padding::Zero
                                && (sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize)
                            {
                                continue;
                            }
                            // mirror without repeating the edge
                            while sy < 0 || sy >= h as isize {
                                sy = if sy < 0 { -sy } else { 2 * (h as isize - 1) - sy };
                            }
                            while sx < 0 || sx >= w as isize {
                                sx = if sx < 0 { -sx } else { 2 * (w as isize - 1) - sx };
                            }
                            for ci in 0..cin {
                                let v = input.data()[((sy as usize) * w + sx as usize) * cin + ci];
                                let kv = kernel.data()[((dy * kw + dx) * cin + ci) * cout + co];
                                acc += v as f64 * kv as f64;
                            }
                        }
                    }
                    out[(oy * ow + ox) * cout + co] = acc;
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    fn tensor_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-1.0f32..1.0, h * w * c)
            .prop_map(move |d| Tensor::new(vec![h, w, c], d).unwrap())
    }

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let img = Tensor::filled(vec![5, 5, 1], 1.0).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let k = Tensor::new(vec![3, 3, 1, 1], k).unwrap();
        for pad in [Padding::Reflect, Padding::Zero] {
            assert_eq!(conv2d(&img, &k, 1, pad).unwrap(), img);
        }
    }

    #[test]
    fn ones_kernel_centre_sum() {
        let img = Tensor::filled(vec![3, 3, 1], 1.0).unwrap();
        let k = Tensor::filled(vec![3, 3, 1, 1], 1.0).unwrap();
        let out = conv2d(&img, &k, 1, Padding::Zero).unwrap();
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let img = Tensor::from_fn_hwc(6, 7, 2, |y, x, c| (y + x * c) as f32);
        let k = Tensor::zeros(vec![3, 3, 2, 4]).unwrap();
        let out = conv2d(&img, &k, 2, Padding::Reflect).unwrap();
        assert_eq!(out.dims(), &[3, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argument_and_shape_errors() {
        let img = Tensor::zeros(vec![4, 4, 2]).unwrap();
        let k = Tensor::zeros(vec![3, 3, 2, 1]).unwrap();
        assert!(matches!(conv2d(&img, &k, 0, Padding::Zero), Err(Error::Argument(_))));
        let bad = Tensor::zeros(vec![3, 3, 3, 1]).unwrap();
        assert!(matches!(conv2d(&img, &bad, 1, Padding::Zero), Err(Error::Shape(_))));
        let even = Tensor::zeros(vec![2, 2, 2, 1]).unwrap();
        assert!(conv2d(&img, &even, 1, Padding::Zero).is_err());
        assert_eq!(conv2d(&img, &even, 1, Padding::None).unwrap().dims(), &[3, 3, 1]);
    }

    #[test]
    fn reflect_index_folds() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-9, 5), 1);
        assert_eq!(reflect_index(13, 5), 3);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn max_pool_partial_windows() {
        let t = Tensor::from_fn_hwc(3, 3, 1, |y, x, _| (y * 3 + x) as f32);
        let p = max_pool2(&t).unwrap();
        assert_eq!(p.dims(), &[2, 2, 1]);
        assert_eq!(p.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_naive_oracle(
            (h, w) in (3usize..=16, 3usize..=16),
            stride in 1usize..=2,
            pad in prop_oneof![Just(Padding::Reflect), Just(Padding::Zero), Just(Padding::None)],
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let k = Tensor::new(vec![3, 3, 3, 2], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let fast = conv2d(&img, &k, stride, pad).unwrap();
            let slow = naive(&img, &k, stride, pad);
            prop_assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.data().iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
            }
        }

        #[test]
        fn linear_in_input(x in tensor_strategy(6, 5, 2), y in tensor_strategy(6, 5, 2), a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let k = Tensor::from_fn_hwc(3, 3, 2, |i, j, c| (i as f32 - j as f32) * 0.3 + c as f32 * 0.1)
                .reshape(vec![3, 3, 2, 1]).unwrap();
            let mix = Tensor::new(vec![6, 5, 2], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = conv2d(&mix, &k, 1, Padding::Reflect).unwrap();
            let cx = conv2d(&x, &k, 1, Padding::Reflect).unwrap();
            let cy = conv2d(&y, &k, 1, Padding::Reflect).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-4);
            }
        }

        #[test]
        fn separable_matches_direct(p in tensor_strategy(9, 11, 1)) {
            let kx = [0.25f32, 0.5, 0.25];
            let ky = [0.1f32, 0.2, 0.4, 0.2, 0.1];
            let plane = p.plane(0).unwrap();
            let sep = convolve_separable(&plane, &kx, &ky, Padding::Reflect).unwrap();
            let mut k2 = vec![0.0f32; 15];
            for (i, a) in ky.iter().enumerate() { for (j, b) in kx.iter().enumerate() { k2[i * 3 + j] = a * b; } }
            let k2 = Tensor::new(vec![5, 3, 1, 1], k2).unwrap();
            let direct = conv2d(&p, &k2, 1, Padding::Reflect).unwrap();
            for (a, b) in sep.data.iter().zip(direct.data()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }
}
