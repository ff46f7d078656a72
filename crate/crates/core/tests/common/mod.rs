#![allow(dead_code)]

use ofnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Set of `(y, x)` with a nonzero value in channel-summed `N=1` output.
pub fn support(t: &Tensor<f64>) -> std::collections::BTreeSet<(usize, usize)> {
    let (_, c, h, w) = t.dims4().unwrap();
    let mut out = std::collections::BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if (0..c).any(|ch| t.at4(0, ch, y, x) != 0.0) {
                out.insert((y, x));
            }
        }
    }
    out
}

/// Dilates a pixel set by a list of offsets, clipped to the canvas.
pub fn dilate(
    set: &std::collections::BTreeSet<(usize, usize)>,
    offsets: &[(isize, isize)],
    h: usize,
    w: usize,
) -> std::collections::BTreeSet<(usize, usize)> {
    let mut out = std::collections::BTreeSet::new();
    for &(y, x) in set {
        for &(dy, dx) in offsets {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                out.insert((ny as usize, nx as usize));
            }
        }
    }
    out
}

/// Tap offsets of a `kh x kw` kernel with dilation `d`.
pub fn taps(kh: usize, kw: usize, d: usize) -> Vec<(isize, isize)> {
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let d = d as isize;
    let mut out = Vec::new();
    for i in -rh..=rh {
        for j in -rw..=rw {
            out.push((i * d, j * d));
        }
    }
    out
}
