//! Inference-time chain: NMS thinning, sign mask, orientation masking and
//! snapping orientations to the tangent of the thinned edge.

use ndarray::Array2;

use crate::loss::wrap_angle;

/// Standard deviation of the Gaussian pre-smoothing used to estimate ridge normals.
pub const NMS_SIGMA: f64 = 1.0;
/// Side of the window used to estimate edge tangents.
pub const TANGENT_WINDOW: usize = 5;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tmp: Array2<f64> = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter().enumerate().map(|(j, &kv)| kv * map[(y, clamp(x as isize + j as isize - r, w))]).sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter().enumerate().map(|(j, &kv)| kv * tmp[(clamp(y as isize + j as isize - r, h), x)]).sum::<f64>()
    })
}

/// Neighbour offsets `(dx, dy)` for the four quantised normal directions
/// (0, 45, 90 and 135 degrees from +x towards +y).
const DIRECTIONS: [(isize, isize); 4] = [(1, 0), (1, 1), (0, 1), (-1, 1)];

/// Quantised ridge normal per pixel: the Hessian eigenvector of largest
/// absolute curvature of the smoothed map.
fn normal_directions(map: &Array2<f64>) -> Array2<u8> {
    let s = gaussian_blur(map, NMS_SIGMA);
    let (h, w) = s.dim();
    let at = |y: isize, x: isize| s[(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize)];
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let c = at(y, x);
        let hxx = at(y, x + 1) - 2.0 * c + at(y, x - 1);
        let hyy = at(y + 1, x) - 2.0 * c + at(y - 1, x);
        let hxy = (at(y + 1, x + 1) - at(y - 1, x + 1) - at(y + 1, x - 1) + at(y - 1, x - 1)) / 4.0;
        // Eigenvector of the larger eigenvalue, then pick whichever axis has
        // the stronger curvature: the crest across a ridge, and also the
        // profile direction out in its convex tails.
        let major = 0.5 * (2.0 * hxy).atan2(hxx - hyy);
        let mean = 0.5 * (hxx + hyy);
        let normal = if mean > 0.0 { major } else { major + std::f64::consts::FRAC_PI_2 };
        let normal = normal.rem_euclid(std::f64::consts::PI);
        ((normal / std::f64::consts::FRAC_PI_4).round() as usize % 4) as u8
    })
}

fn nms_step(map: &Array2<f64>) -> Array2<f64> {
    let dirs = normal_directions(map);
    let (h, w) = map.dim();
    let value = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            map[(y as usize, x as usize)]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = map[(y, x)];
        if v <= 0.0 {
            return 0.0;
        }
        let (dx, dy) = DIRECTIONS[dirs[(y, x)] as usize];
        let (yi, xi) = (y as isize, x as isize);
        if v < value(yi + dy, xi + dx) || v < value(yi - dy, xi - dx) {
            0.0
        } else {
            v
        }
    })
}

/// Non-maximum suppression along the ridge normal.
///
/// A pixel survives when it is not strictly smaller than either neighbour
/// across the ridge, so equal-valued plateaus (binary maps in particular)
/// pass through. Suppression is repeated until nothing changes, which makes
/// the operator idempotent. Surviving pixels keep their input value.
pub fn nms_thin(edge_prob: &Array2<f32>) -> Array2<f32> {
    let mut cur = edge_prob.mapv(|v| (v as f64).max(0.0));
    loop {
        let next = nms_step(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur.mapv(|v| v as f32)
}

pub fn sign_mask(thin_edge: &Array2<f32>) -> Array2<bool> {
    thin_edge.mapv(|v| v > 0.0)
}

/// Keeps orientations on the mask, wrapped into `(-π, π]`, and zeroes the rest.
pub fn mask_orientation(mask: &Array2<bool>, orientation: &Array2<f32>) -> Array2<f32> {
    let mut out = Array2::zeros(mask.dim());
    ndarray::Zip::from(&mut out).and(mask).and(orientation).for_each(|o, &m, &v| {
        if m {
            *o = wrap_angle(v as f64) as f32;
        }
    });
    out
}

/// Final boundary map of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionBoundary {
    pub thin_edge: Array2<f32>,
    pub mask: Array2<bool>,
    pub orientation: Array2<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignDiagnostics {
    pub aligned: usize,
    /// Ridge pixels with no other ridge pixel in their window.
    pub isolated: usize,
    /// Ridge pixels whose neighbourhood has no dominant direction.
    pub ambiguous: usize,
}

/// Tangent line angle in `(-π/2, π/2]` of the thinned edge at `(x, y)`:
/// principal axis of the ridge pixels in the surrounding window, weighted
/// by ridge strength. `Err(true)` for isolated pixels, `Err(false)` when
/// no axis dominates.
pub fn local_tangent(thin_edge: &Array2<f32>, x: usize, y: usize) -> Result<f64, bool> {
    local_tangent_in(thin_edge, x, y, TANGENT_WINDOW)
}

/// [`local_tangent`] over a `window x window` neighbourhood.
pub fn local_tangent_in(thin_edge: &Array2<f32>, x: usize, y: usize, window: usize) -> Result<f64, bool> {
    let (h, w) = thin_edge.dim();
    let r = (window / 2) as isize;
    let mut pts = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (qx, qy) = (x as isize + dx, y as isize + dy);
            if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                continue;
            }
            let v = thin_edge[(qy as usize, qx as usize)] as f64;
            if v > 0.0 {
                pts.push((dx as f64, dy as f64, v));
            }
        }
    }
    if pts.len() < 2 {
        return Err(true);
    }
    let total: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.0 * p.2).sum::<f64>() / total;
    let my = pts.iter().map(|p| p.1 * p.2).sum::<f64>() / total;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(px, py, v) in &pts {
        sxx += v * (px - mx) * (px - mx);
        syy += v * (py - my) * (py - my);
        sxy += v * (px - mx) * (py - my);
    }
    let gap = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    if gap <= 1e-9 * (sxx + syy) {
        return Err(false);
    }
    let tau = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Ok(if tau <= -std::f64::consts::FRAC_PI_2 { tau + std::f64::consts::PI } else { tau })
}

/// Snaps `theta` onto the tangent line `tau`, keeping its half-plane.
pub fn snap_to_tangent(theta: f64, tau: f64) -> f64 {
    if wrap_angle(theta - tau).abs() <= std::f64::consts::FRAC_PI_2 {
        wrap_angle(tau)
    } else {
        wrap_angle(tau + std::f64::consts::PI)
    }
}

pub fn align_to_tangent(thin_edge: &Array2<f32>, masked_orientation: &Array2<f32>) -> (OcclusionBoundary, AlignDiagnostics) {
    let mask = sign_mask(thin_edge);
    let mut orientation = Array2::zeros(mask.dim());
    let mut diag = AlignDiagnostics::default();
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let theta = masked_orientation[(y, x)] as f64;
        orientation[(y, x)] = match local_tangent(thin_edge, x, y) {
            Ok(tau) => {
                diag.aligned += 1;
                snap_to_tangent(theta, tau) as f32
            }
            Err(isolated) => {
                if isolated {
                    diag.isolated += 1;
                } else {
                    diag.ambiguous += 1;
                }
                wrap_angle(theta) as f32
            }
        };
    }
    (OcclusionBoundary { thin_edge: thin_edge.clone(), mask, orientation }, diag)
}

/// Full chain from network outputs to the occlusion boundary map.
pub fn postprocess(edge_prob: &Array2<f32>, orientation: &Array2<f32>) -> (OcclusionBoundary, AlignDiagnostics) {
    let thin = nms_thin(edge_prob);
    let masked = mask_orientation(&sign_mask(&thin), orientation);
    align_to_tangent(&thin, &masked)
}
