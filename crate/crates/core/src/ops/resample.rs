//! Bilinear upsampling with pixel-centre sampling (no corner alignment).
//!
//! Output pixel `o` along an axis of input length `n` and output length `m`
//! samples the input at
//!
//! ```text
//! s = (o + 0.5) * n / m - 0.5,   clamped to [0, n - 1]
//! i0 = floor(s),  i1 = min(i0 + 1, n - 1),  t = s - i0
//! value = (1 - t) * in[i0] + t * in[i1]
//! ```
//!
//! applied separably (rows, then columns). This is the convention of
//! `align_corners = false` in common frameworks.

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub(crate) struct AxisPlan<T> {
    pub taps: Vec<(usize, usize, T)>,
}

impl<T: Scalar> AxisPlan<T> {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, T::from_f64_lossy(s - i0 as f64))
            })
            .collect();
        AxisPlan { taps }
    }
}

/// Upsamples every `h x w` plane of `input` to `out_h x out_w`.
pub(crate) fn upsample_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    (h, w): (usize, usize),
    rows: &AxisPlan<T>,
    cols: &AxisPlan<T>,
) -> Vec<T> {
    let (oh, ow) = (rows.taps.len(), cols.taps.len());
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut horiz = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, &(i0, i1, t)) in cols.taps.iter().enumerate() {
                horiz[y * ow + x] = row[i0] * (T::one() - t) + row[i1] * t;
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(i0, i1, t)) in rows.taps.iter().enumerate() {
            let (a, b) = (&horiz[i0 * ow..(i0 + 1) * ow], &horiz[i1 * ow..(i1 + 1) * ow]);
            for x in 0..ow {
                dst[y * ow + x] = a[x] * (T::one() - t) + b[x] * t;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    rows: &AxisPlan<T>,
    cols: &AxisPlan<T>,
    grad_in: &mut [T],
) {
    let (oh, ow) = (rows.taps.len(), cols.taps.len());
    let mut horiz = vec![T::zero(); h * ow];
    for p in 0..planes {
        horiz.fill(T::zero());
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(i0, i1, t)) in rows.taps.iter().enumerate() {
            for x in 0..ow {
                let gv = go[y * ow + x];
                horiz[i0 * ow + x] += gv * (T::one() - t);
                horiz[i1 * ow + x] += gv * t;
            }
        }
        let gi = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (x, &(i0, i1, t)) in cols.taps.iter().enumerate() {
                let gv = horiz[y * ow + x];
                gi[y * w + i0] += gv * (T::one() - t);
                gi[y * w + i1] += gv * t;
            }
        }
    }
}
