//! Deterministic synthetic dataset: grayscale scenes of 3 to 6 structures
//! drawn from a 14-class vocabulary of ellipses, annuli and crescents over
//! multiplicative speckle.
//!
//! Rendering uses only IEEE-exact arithmetic (no transcendental functions),
//! so a given `(seed, n, size)` yields identical bytes on every platform.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batches::mix_seed;
use super::io::{write_gray, Gray8};
use super::manifest::{self, Split, IMAGES_DIR, LABELS_FILE, MASKS_DIR};
use crate::error::{Error, Result};
use crate::types::LabelVector;

pub const STRUCTURE_CLASSES: u8 = 14;
pub const SYNTH_LABELS: usize = 7;
const BACKGROUND_INTENSITY: f64 = 0.1;
const SPECKLE: f64 = 0.2;
/// Class 5 counts as small below this fraction of the image area.
pub const SMALL_AREA_FRAC: f64 = 0.03;
/// Foreground-fraction cut of label bit 4.
pub const FOREGROUND_FRAC: f64 = 0.15;

const TAG_SPLIT: u64 = 0x7370_6c69;
const TAG_SAMPLE: u64 = 0x696d_6167;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub labeled_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl GenConfig {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        GenConfig {
            n,
            height: size,
            width: size,
            seed,
            labeled_frac: 0.2,
            val_frac: 0.1,
            test_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Invalid("n must be at least 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Invalid(format!(
                "image size {}x{} below the 8x8 minimum",
                self.height, self.width
            )));
        }
        for (name, f) in [
            ("labeled_frac", self.labeled_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Invalid(format!("{name} {f} outside [0, 1]")));
            }
        }
        let (l, v, t) = self.split_counts();
        if l + v + t > self.n {
            return Err(Error::Invalid(format!(
                "split fractions take {} of {} records",
                l + v + t,
                self.n
            )));
        }
        Ok(())
    }

    /// `(labeled, val, test)` counts; the remainder is unlabeled.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let c = |f: f64| (f * self.n as f64).round() as usize;
        (c(self.labeled_frac), c(self.val_frac), c(self.test_frac))
    }
}

/// Records written per split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenSummary {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
    pub labels: [u8; SYNTH_LABELS],
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse,
    Annulus,
    Crescent,
}

fn shape_of(class: u8) -> Shape {
    match (class - 1) % 3 {
        0 => Shape::Ellipse,
        1 => Shape::Annulus,
        _ => Shape::Crescent,
    }
}

/// Mean intensity of a structure class, spread over `[0.3, 0.95]`.
pub fn class_intensity(class: u8) -> f64 {
    0.3 + 0.05 * (class - 1) as f64
}

fn class_radius_frac(class: u8) -> f64 {
    0.1 + 0.01 * ((class as u32 * 5) % 7) as f64
}

/// Unit vector with a uniformly random direction, by rejection.
fn direction(rng: &mut impl Rng) -> (f64, f64) {
    loop {
        let x: f64 = rng.random_range(-1.0..1.0);
        let y: f64 = rng.random_range(-1.0..1.0);
        let r2 = x * x + y * y;
        if (0.01..=1.0).contains(&r2) {
            let r = r2.sqrt();
            return (x / r, y / r);
        }
    }
}

struct Placed {
    class: u8,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    dir: (f64, f64),
}

impl Placed {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = self.dir;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let inside = |scale: f64| {
            let (a, b) = (self.a * scale, self.b * scale);
            u * u / (a * a) + v * v / (b * b) <= 1.0
        };
        match shape_of(self.class) {
            Shape::Ellipse => inside(1.0),
            Shape::Annulus => inside(1.0) && !inside(0.55),
            Shape::Crescent => {
                let r = self.a;
                let (ou, ov) = (u - 0.45 * r, v);
                u * u + v * v <= r * r && ou * ou + ov * ov > 0.72 * r * r
            }
        }
    }
}

/// Renders scene `index` of a dataset with master seed `seed`.
pub fn render(seed: u64, index: usize, h: usize, w: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_SAMPLE, index as u64]));
    let count = rng.random_range(3..=6usize);
    let classes: Vec<u8> = (1..=STRUCTURE_CLASSES).collect::<Vec<_>>().choose_multiple(&mut rng, count).copied().collect();
    let side = h.min(w) as f64;
    let placed: Vec<Placed> = classes
        .iter()
        .map(|&class| {
            let a = side * class_radius_frac(class) * rng.random_range(0.85..1.15);
            let b = a * rng.random_range(0.55..1.0);
            let dir = direction(&mut rng);
            let mut span = |len: usize| {
                let lo = a.min((len as f64 - 1.0) / 2.0);
                let hi = (len as f64 - 1.0 - a).max(lo);
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            };
            let cx = span(w);
            let cy = span(h);
            Placed { class, cx, cy, a, b, dir }
        })
        .collect();
    let mut mask = vec![0u8; h * w];
    for p in &placed {
        for y in 0..h {
            for x in 0..w {
                if p.contains(x as f64, y as f64) {
                    mask[y * w + x] = p.class;
                }
            }
        }
    }
    let image = mask
        .iter()
        .map(|&c| {
            let base = if c == 0 { BACKGROUND_INTENSITY } else { class_intensity(c) };
            // Sum of four uniforms, rescaled to zero mean and unit variance.
            let z = (rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>() - 2.0)
                * 3f64.sqrt();
            let v = (base * (1.0 + SPECKLE * z)).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        })
        .collect();
    let labels = label_bits(&mask, h, w);
    SynthSample { image, mask, labels }
}

/// The seven label bits as geometric predicates of a mask:
///
/// 0. class 3 absent
/// 1. class 5 present with area below `SMALL_AREA_FRAC` of the image
/// 2. at least 5 distinct structure classes present
/// 3. classes 1 and 2 both present
/// 4. foreground fraction above `FOREGROUND_FRAC`
/// 5. foreground centroid strictly left of the vertical centre line
/// 6. class 7 or class 11 present
pub fn label_bits(mask: &[u8], h: usize, w: usize) -> [u8; SYNTH_LABELS] {
    let mut area = [0usize; 256];
    let mut sum_x = 0usize;
    for (i, &c) in mask.iter().enumerate() {
        area[c as usize] += 1;
        if c != 0 {
            sum_x += i % w;
        }
    }
    let fg = h * w - area[0];
    let present = |c: usize| area[c] > 0;
    let distinct = (1..256).filter(|&c| present(c)).count();
    let bits = [
        !present(3),
        present(5) && (area[5] as f64) < SMALL_AREA_FRAC * (h * w) as f64,
        distinct >= 5,
        present(1) && present(2),
        fg as f64 > FOREGROUND_FRAC * (h * w) as f64,
        fg > 0 && 2 * sum_x + fg < w * fg,
        present(7) || present(11),
    ];
    bits.map(u8::from)
}

/// Writes a full dataset root. `out` must be absent or empty.
pub fn gen_synthetic(cfg: &GenConfig, out: &Path) -> Result<GenSummary> {
    cfg.validate()?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            return Err(Error::Invalid(format!("output directory {} is not empty", out.display())));
        }
    }
    for d in [IMAGES_DIR, MASKS_DIR] {
        fs::create_dir_all(out.join(d)).map_err(|e| Error::io(out.join(d), e))?;
    }
    let (n_lab, n_val, n_test) = cfg.split_counts();
    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_SPLIT])));
    let mut split = vec![Split::Unlabeled; cfg.n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_lab {
            Split::Labeled
        } else if rank < n_lab + n_val {
            Split::Val
        } else if rank < n_lab + n_val + n_test {
            Split::Test
        } else {
            Split::Unlabeled
        };
    }
    let digits = cfg.n.saturating_sub(1).to_string().len().max(4);
    let mut rows = Vec::with_capacity(cfg.n);
    let mut labels = BTreeMap::new();
    let mut summary = GenSummary::default();
    let (h, w) = (cfg.height, cfg.width);
    for (i, &s) in split.iter().enumerate() {
        let id = format!("img_{i:0digits$}");
        let sample = render(cfg.seed, i, h, w);
        write_gray(
            &manifest::image_path(out, &id),
            &Gray8 {
                height: h,
                width: w,
                pixels: sample.image,
            },
        )?;
        if s.annotated() {
            write_gray(
                &manifest::mask_path(out, &id),
                &Gray8 {
                    height: h,
                    width: w,
                    pixels: sample.mask,
                },
            )?;
            labels.insert(id.clone(), LabelVector::new(1, SYNTH_LABELS, sample.labels.to_vec())?);
        }
        match s {
            Split::Labeled => summary.labeled += 1,
            Split::Unlabeled => summary.unlabeled += 1,
            Split::Val => summary.val += 1,
            Split::Test => summary.test += 1,
        }
        rows.push((id, s));
    }
    manifest::write_labels(&out.join(LABELS_FILE), SYNTH_LABELS, &labels)?;
    manifest::write_manifest(out, &rows)?;
    log::info!(
        "generated {} records: {} labeled, {} unlabeled, {} val, {} test",
        cfg.n,
        summary.labeled,
        summary.unlabeled,
        summary.val,
        summary.test
    );
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_in_range() {
        let a = render(7, 3, 32, 32);
        assert_eq!(a, render(7, 3, 32, 32));
        assert_ne!(a, render(7, 4, 32, 32));
        assert!(a.mask.iter().all(|&c| c < 15));
        let distinct: std::collections::BTreeSet<u8> = a.mask.iter().copied().filter(|&c| c > 0).collect();
        assert!(distinct.len() <= 6 && !distinct.is_empty());
    }

    #[test]
    fn label_bits_on_handmade_masks() {
        let (h, w) = (10, 10);
        let mut m = vec![0u8; h * w];
        assert_eq!(label_bits(&m, h, w), [1, 0, 0, 0, 0, 0, 0]);
        m[0] = 5;
        m[1] = 1;
        m[2] = 2;
        m[3] = 7;
        m[4] = 3;
        assert_eq!(label_bits(&m, h, w), [0, 1, 1, 1, 0, 1, 1]);
        for (i, v) in m.iter_mut().enumerate() {
            if i % w >= 5 {
                *v = 9;
            }
        }
        let b = label_bits(&m, h, w);
        assert_eq!((b[4], b[5]), (1, 0));
    }

    #[test]
    fn split_counts_follow_fractions() {
        let cfg = GenConfig::new(200, 64, 7);
        assert_eq!(cfg.split_counts(), (40, 20, 0));
        let cfg = GenConfig {
            labeled_frac: 0.1,
            ..cfg
        };
        assert_eq!(cfg.split_counts().0, 20);
        let bad = GenConfig {
            labeled_frac: 0.95,
            ..cfg
        };
        assert!(bad.validate().is_err());
        assert!(GenConfig::new(0, 64, 1).validate().is_err());
    }

    #[test]
    fn label_bits_are_informative() {
        let n = 300;
        let mut on = [0usize; SYNTH_LABELS];
        for i in 0..n {
            let s = render(1, i, 64, 64);
            for k in 0..SYNTH_LABELS {
                on[k] += s.labels[k] as usize;
            }
        }
        for (k, &c) in on.iter().enumerate() {
            let rate = c as f64 / n as f64;
            assert!((0.05..=0.95).contains(&rate), "bit {k} rate {rate}");
        }
    }
}
