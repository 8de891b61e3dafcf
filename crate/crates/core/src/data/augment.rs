//! Resizing and geometric augmentation. Images use bilinear interpolation,
//! masks nearest-neighbour; pixels rotated in from outside are 0.

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_TARGET: (usize, usize) = (256, 256);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    pub max_rotate_deg: f64,
    /// `(height, width)` after resizing.
    pub target_size: (usize, usize),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip_prob: 0.5,
            max_rotate_deg: 20.0,
            target_size: DEFAULT_TARGET,
        }
    }
}

impl AugmentPolicy {
    /// Resizing only.
    pub fn none(target_size: (usize, usize)) -> Self {
        AugmentPolicy {
            hflip_prob: 0.0,
            max_rotate_deg: 0.0,
            target_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Invalid(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if !(0.0..=180.0).contains(&self.max_rotate_deg) {
            return Err(Error::Invalid(format!(
                "max_rotate_deg {} outside [0, 180]",
                self.max_rotate_deg
            )));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::Invalid("target size must be positive".into()));
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Vec::with_capacity(th * tw);
    for oy in 0..th {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f64;
        for ox in 0..tw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - ax) + src[y0 * w + x1] * ax;
            let bot = src[y1 * w + x0] * (1.0 - ax) + src[y1 * w + x1] * ax;
            out.push(top * (1.0 - ay) + bot * ay);
        }
    }
    out
}

/// Nearest-neighbour resize; the only resampling ever applied to masks.
pub fn resize_nearest(src: &[u8], h: usize, w: usize, th: usize, tw: usize) -> Vec<u8> {
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(th * tw);
    for oy in 0..th {
        let y = (((oy as f64 + 0.5) * h as f64 / th as f64) as usize).min(h - 1);
        for ox in 0..tw {
            let x = (((ox as f64 + 0.5) * w as f64 / tw as f64) as usize).min(w - 1);
            out.push(src[y * w + x]);
        }
    }
    out
}

pub fn hflip<T>(data: &mut [T], h: usize, w: usize) {
    for row in data.chunks_mut(w).take(h) {
        row.reverse();
    }
}

/// Source coordinates for output pixel `(ox, oy)` under a rotation by `deg`
/// about the image centre.
fn source_coord(ox: usize, oy: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let dx = ox as f64 - cx;
    let dy = oy as f64 - cy;
    (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
}

fn trig(deg: f64) -> (f64, f64) {
    if deg == 0.0 {
        (1.0, 0.0)
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

pub fn rotate_bilinear(src: &[f64], h: usize, w: usize, deg: f64) -> Vec<f64> {
    let (cos, sin) = trig(deg);
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let (fx, fy) = source_coord(ox, oy, h, w, cos, sin);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (at(x0, y0) * (1.0 - ax) + at(x0 + 1, y0) * ax) * (1.0 - ay)
                + (at(x0, y0 + 1) * (1.0 - ax) + at(x0 + 1, y0 + 1) * ax) * ay;
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

pub fn rotate_nearest(src: &[u8], h: usize, w: usize, deg: f64) -> Vec<u8> {
    let (cos, sin) = trig(deg);
    let mut out = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let (fx, fy) = source_coord(ox, oy, h, w, cos, sin);
            let (x, y) = (fx.round(), fy.round());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                out.push(0);
            } else {
                out.push(src[y as usize * w + x as usize]);
            }
        }
    }
    out
}

/// Resizes to the policy target, then applies one random flip/rotation to
/// the image and, identically, to the mask. Both random draws are always
/// taken so the generator advances the same way whatever the outcome.
pub fn augment(
    image: &[f64],
    mask: Option<&[u8]>,
    h: usize,
    w: usize,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> (Vec<f64>, Option<Vec<u8>>) {
    let (th, tw) = policy.target_size;
    let mut img = resize_bilinear(image, h, w, th, tw);
    let mut m = mask.map(|m| resize_nearest(m, h, w, th, tw));
    let flip = rng.random::<f64>() < policy.hflip_prob;
    let u = rng.random::<f64>();
    let deg = policy.max_rotate_deg * (2.0 * u - 1.0);
    if flip {
        hflip(&mut img, th, tw);
        if let Some(m) = m.as_mut() {
            hflip(m, th, tw);
        }
    }
    if deg != 0.0 {
        img = rotate_bilinear(&img, th, tw, deg);
        m = m.map(|m| rotate_nearest(&m, th, tw, deg));
    }
    (img, m)
}
