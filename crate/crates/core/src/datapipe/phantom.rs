//! Synthetic fundus/vessel pairs.
//!
//! A shaded circular field of view holds a bright optic-disc spot from
//! which a few vessel trunks grow as a random recursive branching tree.
//! Each branch is a short polyline whose width tapers toward the tips. The
//! label marks pixel centers inside a segment's half width; the image darkens
//! the background by the anti-aliased segment coverage and adds noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Plane, RgbImage, SamplePair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// Field-of-view radius as a fraction of the side.
    pub disc_radius_frac: f64,
    pub min_trunks: usize,
    pub max_trunks: usize,
    /// Branching levels below the trunk, drawn from this inclusive range.
    pub min_levels: usize,
    pub max_levels: usize,
    /// Trunk width as a fraction of the side.
    pub root_width_frac: f64,
    /// Width multiplier from a branch to its children.
    pub taper: f64,
    /// Floor on vessel width in pixels.
    pub min_width_px: f64,
    /// Trunk length as a fraction of the disc radius.
    pub trunk_length_frac: f64,
    pub length_decay: f64,
    /// Relative darkening at full coverage, for trunk and finest level.
    pub contrast: (f64, f64),
    pub noise_std: f64,
    /// Accepted in-disc vessel fraction; draws outside are regenerated.
    pub fraction_band: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            disc_radius_frac: 0.46,
            min_trunks: 2,
            max_trunks: 3,
            min_levels: 3,
            max_levels: 4,
            root_width_frac: 0.055,
            taper: 0.75,
            min_width_px: 1.3,
            trunk_length_frac: 0.5,
            length_decay: 0.72,
            contrast: (0.5, 0.3),
            noise_std: 0.03,
            fraction_band: (0.03, 0.25),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
    contrast: f64,
}

impl Segment {
    fn distance(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (qx, qy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        (qx * qx + qy * qy).sqrt()
    }
}

struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Disc {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (p.0 - self.cx, p.1 - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }

    /// Point where the segment from inside point `a` toward `b` leaves the disc.
    fn clip(&self, a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
        if self.contains(b) {
            return b;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if self.contains((a.0 + mid * (b.0 - a.0), a.1 + mid * (b.1 - a.1))) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (a.0 + lo * (b.0 - a.0), a.1 + lo * (b.1 - a.1))
    }
}

struct TreeBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: &'a PhantomConfig,
    disc: Disc,
    levels: usize,
    segments: Vec<Segment>,
}

impl TreeBuilder<'_> {
    fn branch(&mut self, start: (f64, f64), angle: f64, length: f64, width: f64, level: usize) {
        let t = if self.levels == 0 { 0.0 } else { level as f64 / self.levels as f64 };
        let contrast = self.cfg.contrast.0 + (self.cfg.contrast.1 - self.cfg.contrast.0) * t;
        let end_width = (width * self.cfg.taper).max(self.cfg.min_width_px);
        let pieces = 3;
        let mut p = start;
        let mut heading = angle;
        for k in 0..pieces {
            heading += self.rng.random_range(-0.25..0.25);
            let step = length / pieces as f64;
            let target = (p.0 + step * heading.cos(), p.1 + step * heading.sin());
            let q = self.disc.clip(p, target);
            let w = width + (end_width - width) * (k as f64 + 0.5) / pieces as f64;
            self.segments.push(Segment { a: p, b: q, width: w.max(self.cfg.min_width_px), contrast });
            if q != target {
                return;
            }
            p = q;
        }
        if level >= self.levels {
            return;
        }
        let spread = self.rng.random_range(0.35..0.75);
        let skew = self.rng.random_range(-0.15..0.15);
        let child_len = length * self.cfg.length_decay;
        for side in [-1.0, 1.0] {
            let jitter = self.rng.random_range(0.85..1.15);
            self.branch(p, heading + skew + side * spread, child_len * jitter, end_width, level + 1);
        }
    }
}

/// Deterministic synthetic pair of side `side` for `seed`.
pub fn gen_phantom(seed: u64, side: usize, cfg: &PhantomConfig) -> Result<SamplePair> {
    if side < 32 {
        return Err(Error::Config(format!("phantom side must be at least 32, got {side}")));
    }
    if cfg.min_trunks == 0 || cfg.min_trunks > cfg.max_trunks || cfg.min_levels > cfg.max_levels {
        return Err(Error::Config("phantom trunk/level ranges are empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..32 {
        let attempt = render(&mut rng, side, cfg);
        let in_disc = attempt.mask.as_ref().map_or(0.0, |m| m.data.iter().sum::<f64>());
        let fraction = attempt.label.data.iter().sum::<f64>() / in_disc;
        if fraction >= cfg.fraction_band.0 && fraction <= cfg.fraction_band.1 {
            return Ok(SamplePair { id: format!("phantom_{seed:05}"), ..attempt });
        }
        last = Some(fraction);
    }
    Err(Error::Config(format!(
        "phantom seed {seed}: vessel fraction {:?} never fell inside {:?}",
        last, cfg.fraction_band
    )))
}

fn render(rng: &mut ChaCha8Rng, side: usize, cfg: &PhantomConfig) -> SamplePair {
    let s = side as f64;
    let disc = Disc { cx: s / 2.0, cy: s / 2.0, r: cfg.disc_radius_frac * s };

    // optic disc placed off-center, trunks fanning out from it
    let od_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let od_dist = disc.r * rng.random_range(0.25..0.45);
    let od = (disc.cx + od_dist * od_angle.cos(), disc.cy + od_dist * od_angle.sin());
    let trunks = rng.random_range(cfg.min_trunks..=cfg.max_trunks);
    let levels = rng.random_range(cfg.min_levels..=cfg.max_levels);
    let toward_center = (disc.cy - od.1).atan2(disc.cx - od.0);
    let mut tree = TreeBuilder { rng, cfg, disc, levels, segments: Vec::new() };
    let base = tree.rng.random_range(0.0..std::f64::consts::TAU);
    for k in 0..trunks {
        let fan = base + std::f64::consts::TAU * k as f64 / trunks as f64;
        // bias trunks toward the bulk of the field of view
        let angle = 0.6 * fan + 0.4 * toward_center + tree.rng.random_range(-0.3..0.3);
        let length = cfg.trunk_length_frac * tree.disc.r * tree.rng.random_range(0.85..1.15);
        tree.branch(od, angle, length, cfg.root_width_frac * s, 0);
    }
    let TreeBuilder { segments, disc, rng, .. } = tree;

    let shade_phase: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let tint = rng.random_range(0.9..1.1);
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise std is finite and non-negative");
    let base_rgb = [0.80 * tint, 0.42, 0.22 / tint];
    let od_sigma = 0.07 * s;

    let mut image = RgbImage::filled(side, side, 0.0);
    let mut label = Plane::filled(side, side, 0.0);
    let mut mask = Plane::filled(side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = disc.contains(p);
            let mut darken = 0.0f64;
            let mut vessel = false;
            if inside {
                for seg in &segments {
                    let d = seg.distance(p);
                    let half = seg.width / 2.0;
                    if d <= half {
                        vessel = true;
                    }
                    let cov = (half + 0.5 - d).clamp(0.0, 1.0);
                    darken = darken.max(cov * seg.contrast);
                }
            }
            let mut px = [0.0; 3];
            if inside {
                let (dx, dy) = ((p.0 - disc.cx) / disc.r, (p.1 - disc.cy) / disc.r);
                let vignette = 0.72 + 0.28 * (1.0 - (dx * dx + dy * dy));
                let wobble = 0.04 * ((3.1 * dx + shade_phase[0]).sin() + (2.3 * dy + shade_phase[1]).sin())
                    + 0.03 * ((1.7 * (dx + dy) + shade_phase[2]).cos() * (2.9 * dx + shade_phase[3]).sin());
                let (ox, oy) = (p.0 - od.0, p.1 - od.1);
                let spot = 0.35 * (-(ox * ox + oy * oy) / (2.0 * od_sigma * od_sigma)).exp();
                for c in 0..3 {
                    let bg = base_rgb[c] * (vignette + wobble) + spot;
                    px[c] = bg * (1.0 - darken);
                }
                mask.set(y, x, 1.0);
                if vessel {
                    label.set(y, x, 1.0);
                }
            }
            for v in px.iter_mut() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
            image.set_pixel(y, x, px);
        }
    }
    SamplePair { id: String::new(), image, label, mask: Some(mask) }
}
