//! Deterministic synthetic target images.
//!
//! Everything here uses integer hashing and plain arithmetic (no `exp`, `sin`
//! or other libm calls), so a `(kind, size, seed)` triple produces the same
//! bytes on every platform.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gaussian::Rgb;
use crate::image::Image;

pub const MIN_TARGET_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetKind {
    Checker,
    RadialGradient,
    HfNoise,
    Stripes,
    Mixed,
}

impl TargetKind {
    pub const ALL: [TargetKind; 5] =
        [TargetKind::Checker, TargetKind::RadialGradient, TargetKind::HfNoise, TargetKind::Stripes, TargetKind::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Checker => "checker",
            TargetKind::RadialGradient => "radial_gradient",
            TargetKind::HfNoise => "hf_noise",
            TargetKind::Stripes => "stripes",
            TargetKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        TargetKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown target kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl TargetSpec {
    pub fn new(kind: TargetKind, width: usize, height: usize, seed: u64) -> Self {
        TargetSpec { kind, width, height, seed }
    }
}

/// SplitMix64 finalizer over a combined key.
fn hash(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(c.wrapping_mul(0x1656_67B1_9E37_79F9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash mapped to `[0, 1)` with 24 bits of resolution.
fn unit(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    (hash(seed, a, b, c) >> 40) as f64 / (1u64 << 24) as f64
}

fn checker_cell(spec: &TargetSpec) -> usize {
    (spec.width.min(spec.height) / 4).max(4)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn clamp01(c: Rgb) -> Rgb {
    [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]
}

fn random_color(seed: u64, key: u64, lo: f64, hi: f64) -> Rgb {
    let s = |c| lo + (hi - lo) * unit(seed, key, 0xC0105, c);
    [s(0), s(1), s(2)]
}

/// Low-frequency field: a bilinear color ramp with three soft blobs.
fn smooth_background(spec: &TargetSpec, x: f64, y: f64) -> Rgb {
    let u = x / spec.width as f64;
    let v = y / spec.height as f64;
    let c00 = random_color(spec.seed, 1, 0.15, 0.55);
    let c10 = random_color(spec.seed, 2, 0.2, 0.6);
    let c01 = random_color(spec.seed, 3, 0.25, 0.65);
    let c11 = random_color(spec.seed, 4, 0.3, 0.7);
    let mut c = mix(mix(c00, c10, u), mix(c01, c11, u), v);
    let extent = spec.width.max(spec.height) as f64;
    for k in 0..3u64 {
        let cx = (0.15 + 0.7 * unit(spec.seed, 10 + k, 0, 0)) * spec.width as f64;
        let cy = (0.15 + 0.7 * unit(spec.seed, 10 + k, 1, 0)) * spec.height as f64;
        let radius = (0.18 + 0.12 * unit(spec.seed, 10 + k, 2, 0)) * extent;
        let d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (radius * radius);
        let bump = if d2 < 1.0 { (1.0 - d2) * (1.0 - d2) } else { 0.0 };
        let blob = random_color(spec.seed, 20 + k, 0.1, 0.9);
        c = mix(c, blob, 0.7 * bump);
    }
    c
}

#[derive(Clone, Copy)]
enum Patch {
    Checker,
    Stripes,
    Noise,
    Disc,
}

fn mixed_pixel(spec: &TargetSpec, x: usize, y: usize) -> Rgb {
    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
    let base = smooth_background(spec, fx, fy);
    let side = (spec.width.min(spec.height) / 7).max(4);
    let anchors = [(0.10, 0.12), (0.62, 0.10), (0.12, 0.64), (0.64, 0.62)];
    let patches = [Patch::Checker, Patch::Stripes, Patch::Noise, Patch::Disc];
    for (k, (&(ax, ay), patch)) in anchors.iter().zip(patches).enumerate() {
        let jitter = |axis: u64| (unit(spec.seed, 40 + k as u64, axis, 0) * (side / 2) as f64) as usize;
        let x0 = (ax * spec.width as f64) as usize + jitter(0);
        let y0 = (ay * spec.height as f64) as usize + jitter(1);
        if x < x0 || y < y0 || x >= x0 + side || y >= y0 + side {
            continue;
        }
        let (lx, ly) = (x - x0, y - y0);
        let tint = random_color(spec.seed, 60 + k as u64, 0.0, 1.0);
        return clamp01(match patch {
            Patch::Checker => {
                let on = (lx / 3 + ly / 3) % 2 == 0;
                let s = if on { 0.18 } else { -0.18 };
                [base[0] + s, base[1] + s, base[2] + s]
            }
            Patch::Stripes => {
                let on = (lx + ly) % 6 < 3;
                if on {
                    mix(base, tint, 0.45)
                } else {
                    base
                }
            }
            Patch::Noise => {
                let n = |c| 0.24 * (unit(spec.seed, (y * spec.width + x) as u64, 77, c) - 0.5);
                [base[0] + n(0), base[1] + n(1), base[2] + n(2)]
            }
            Patch::Disc => {
                let r = side as f64 / 2.0;
                let (dx, dy) = (lx as f64 + 0.5 - r, ly as f64 + 0.5 - r);
                if dx * dx + dy * dy < 0.8 * r * r {
                    mix(base, tint, 0.7)
                } else {
                    base
                }
            }
        });
    }
    clamp01(base)
}

pub fn generate(spec: &TargetSpec) -> Result<Image> {
    if spec.width < MIN_TARGET_SIZE || spec.height < MIN_TARGET_SIZE {
        return Err(Error::ImageTooSmall { width: spec.width, height: spec.height, min: MIN_TARGET_SIZE });
    }
    let (w, h) = (spec.width, spec.height);
    let img = match spec.kind {
        TargetKind::Checker => {
            let cell = checker_cell(spec);
            Image::from_fn(w, h, |x, y| if (x / cell + y / cell) % 2 == 0 { [0.0; 3] } else { [1.0; 3] })
        }
        TargetKind::RadialGradient => {
            let inner = random_color(spec.seed, 5, 0.6, 1.0);
            let outer = random_color(spec.seed, 6, 0.0, 0.4);
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let reach = (cx * cx + cy * cy).sqrt();
            Image::from_fn(w, h, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                clamp01(mix(inner, outer, smoothstep((dx * dx + dy * dy).sqrt() / reach)))
            })
        }
        TargetKind::HfNoise => Image::from_fn(w, h, |x, y| {
            let k = (y * w + x) as u64;
            [unit(spec.seed, k, 0, 0), unit(spec.seed, k, 0, 1), unit(spec.seed, k, 0, 2)]
        }),
        TargetKind::Stripes => {
            let a = random_color(spec.seed, 7, 0.0, 0.5);
            let b = random_color(spec.seed, 8, 0.5, 1.0);
            Image::from_fn(w, h, |x, _| if (x / 4) % 2 == 0 { a } else { b })
        }
        TargetKind::Mixed => Image::from_fn(w, h, |x, y| mixed_pixel(spec, x, y)),
    };
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_definition() {
        let img = generate(&TargetSpec::new(TargetKind::Checker, 16, 16, 0)).unwrap();
        assert_eq!(img.get(0, 0), [0.0; 3]);
        assert_eq!(img.get(4, 0), [1.0; 3]);
        assert_eq!(img.get(4, 4), [0.0; 3]);
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in TargetKind::ALL {
            let spec = TargetSpec::new(kind, 40, 24, 17);
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn noise_depends_on_seed() {
        let a = generate(&TargetSpec::new(TargetKind::HfNoise, 32, 32, 1)).unwrap();
        let b = generate(&TargetSpec::new(TargetKind::HfNoise, 32, 32, 2)).unwrap();
        let differing = (0..32 * 32).filter(|&k| a.get(k % 32, k / 32) != b.get(k % 32, k / 32)).count();
        assert!(differing * 10 >= 32 * 32);
    }

    #[test]
    fn channels_in_unit_range() {
        for kind in TargetKind::ALL {
            for seed in 0..4 {
                let img = generate(&TargetSpec::new(kind, 64, 48, seed)).unwrap();
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn mixed_has_detail_and_smooth_regions() {
        let img = generate(&TargetSpec::new(TargetKind::Mixed, 128, 128, 0)).unwrap();
        let step = |x: usize, y: usize| {
            let (a, b) = (img.get(x, y), img.get(x + 1, y));
            (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max)
        };
        let edges = (0..127).flat_map(|x| (0..128).map(move |y| (x, y))).filter(|&(x, y)| step(x, y) > 0.1).count();
        assert!(edges > 200, "{edges}");
        assert!(edges < 128 * 128 / 8, "{edges}");
    }

    #[test]
    fn rejects_tiny_and_unknown() {
        assert!(generate(&TargetSpec::new(TargetKind::Mixed, 15, 64, 0)).is_err());
        assert!("plasma".parse::<TargetKind>().is_err());
        assert_eq!("radial-gradient".parse::<TargetKind>().unwrap(), TargetKind::RadialGradient);
    }
}
