//! Raw loops behind the graph operators. All reductions run in a fixed
//! sequential order so results are bit-reproducible.

use crate::tensor::Scalar;

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Split a shape around `axis` into `(outer, dim, inner)` extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_CUBIC);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_CUBIC);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// 3×3, stride 1, zero-padded convolution. `input` is `[cin,h,w]`,
/// `weight` is `[cout,cin,3,3]`, output `[cout,h,w]`.
pub(crate) fn conv3x3_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); cout * plane];
    for co in 0..cout {
        let oplane = &mut out[co * plane..(co + 1) * plane];
        oplane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let iplane = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = valid_range(kx, w);
                    let (y0, y1) = valid_range(ky, h);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let orow = &mut oplane[y * w + x0..y * w + x1];
                        let irow = &iplane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (o, &iv) in orow.iter_mut().zip(irow) {
                            *o += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3x3_forward`] with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<T: Scalar>(
    grad: &[T],
    input: &[T],
    weight: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    d_input: Option<&mut [T]>,
    d_weight: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
) {
    let plane = h * w;
    if let Some(db) = d_bias {
        for co in 0..cout {
            let mut acc = T::zero();
            for &g in &grad[co * plane..(co + 1) * plane] {
                acc += g;
            }
            db[co] += acc;
        }
    }
    if let Some(dw) = d_weight {
        for co in 0..cout {
            let gplane = &grad[co * plane..(co + 1) * plane];
            for ci in 0..cin {
                let iplane = &input[ci * plane..(ci + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, w);
                        let (y0, y1) = valid_range(ky, h);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let grow = &gplane[y * w + x0..y * w + x1];
                            let irow = &iplane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (&g, &iv) in grow.iter().zip(irow) {
                                acc += g * iv;
                            }
                        }
                        dw[((co * cin + ci) * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(dx) = d_input {
        for co in 0..cout {
            let gplane = &grad[co * plane..(co + 1) * plane];
            for ci in 0..cin {
                let dplane = &mut dx[ci * plane..(ci + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                        let (x0, x1) = valid_range(kx, w);
                        let (y0, y1) = valid_range(ky, h);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let grow = &gplane[y * w + x0..y * w + x1];
                            let drow = &mut dplane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (d, &g) in drow.iter_mut().zip(grow) {
                                *d += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output coordinates `[lo, hi)` whose tap at kernel offset `k` stays inside `0..n`.
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo.min(hi), hi)
}

/// Source taps for ×2 bilinear upsampling along one axis, half-pixel
/// centres with edge clamping: `(i0, i1, w0, w1)` per output coordinate.
pub(crate) fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}
