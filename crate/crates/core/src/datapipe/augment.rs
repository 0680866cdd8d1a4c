//! Online augmentation: flips, rotation, translation and intensity changes.
//!
//! Geometric transforms share one parameter draw across image, label and
//! mask. The image is resampled bilinearly, label and mask by nearest
//! neighbor so they stay binary; pixels mapped from outside the frame are 0.

use rand::Rng;

use super::{Plane, RgbImage, SamplePair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub rotation: bool,
    /// Rotation angle drawn uniformly from ±this many degrees.
    pub max_rotation_deg: f64,
    pub hflip: bool,
    pub hflip_prob: f64,
    pub vflip: bool,
    pub vflip_prob: f64,
    pub translation: bool,
    /// Integer shift drawn uniformly from ±(this fraction of the side).
    pub max_translation_frac: f64,
    pub intensity: bool,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotation: true,
            max_rotation_deg: 30.0,
            hflip: true,
            hflip_prob: 0.5,
            vflip: true,
            vflip_prob: 0.5,
            translation: true,
            max_translation_frac: 0.1,
            intensity: true,
            scale_range: (0.8, 1.2),
            shift_range: (-0.1, 0.1),
        }
    }
}

impl AugmentPolicy {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self { rotation: false, hflip: false, vflip: false, translation: false, intensity: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !prob_ok(self.hflip_prob) || !prob_ok(self.vflip_prob) {
            return Err(Error::Config("flip probabilities must lie in [0,1]".into()));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(Error::Config(format!("max_rotation_deg {} outside [0,180]", self.max_rotation_deg)));
        }
        if !(self.max_translation_frac >= 0.0 && self.max_translation_frac < 1.0) {
            return Err(Error::Config(format!("max_translation_frac {} outside [0,1)", self.max_translation_frac)));
        }
        if !range_ok(self.scale_range) || self.scale_range.0 < 0.0 || !range_ok(self.shift_range) {
            return Err(Error::Config("intensity ranges must be finite with lo <= hi (scale >= 0)".into()));
        }
        Ok(())
    }

    /// Draws one parameter set for an image of the given size.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, height: usize, width: usize) -> AugmentParams {
        let mut p = AugmentParams::identity();
        // every draw consumes the same number of variates regardless of flags
        let u: [f64; 7] = std::array::from_fn(|_| rng.random::<f64>());
        let lerp = |(lo, hi): (f64, f64), t: f64| lo + (hi - lo) * t;
        if self.hflip {
            p.hflip = u[0] < self.hflip_prob;
        }
        if self.vflip {
            p.vflip = u[1] < self.vflip_prob;
        }
        if self.rotation {
            p.rotation_deg = lerp((-self.max_rotation_deg, self.max_rotation_deg), u[2]);
        }
        if self.translation {
            let mx = (self.max_translation_frac * width as f64).floor();
            let my = (self.max_translation_frac * height as f64).floor();
            p.shift_x = lerp((-mx, mx), u[3]).round() as i64;
            p.shift_y = lerp((-my, my), u[4]).round() as i64;
        }
        if self.intensity {
            p.scale = lerp(self.scale_range, u[5]);
            p.offset = lerp(self.shift_range, u[6]);
        }
        p
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise rotation about the image center.
    pub rotation_deg: f64,
    pub shift_x: i64,
    pub shift_y: i64,
    /// Image-only intensity map `v·scale + offset`, clamped to [0,1].
    pub scale: f64,
    pub offset: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { hflip: false, vflip: false, rotation_deg: 0.0, shift_x: 0, shift_y: 0, scale: 1.0, offset: 0.0 }
    }
}

pub fn augment<R: Rng + ?Sized>(pair: &SamplePair, policy: &AugmentPolicy, rng: &mut R) -> SamplePair {
    let (h, w) = pair.image.dims();
    augment_with(pair, &policy.draw(rng, h, w))
}

pub fn augment_with(pair: &SamplePair, p: &AugmentParams) -> SamplePair {
    let mut image = pair.image.clone();
    let mut label = pair.label.clone();
    let mut mask = pair.mask.clone();

    if p.hflip || p.vflip {
        image = flip_rgb(&image, p.hflip, p.vflip);
        label = flip_plane(&label, p.hflip, p.vflip);
        mask = mask.map(|m| flip_plane(&m, p.hflip, p.vflip));
    }
    if p.rotation_deg != 0.0 || p.shift_x != 0 || p.shift_y != 0 {
        let map = InverseMap::new(image.height, image.width, p);
        image = map.warp_rgb(&image);
        label = map.warp_nearest(&label);
        mask = mask.map(|m| map.warp_nearest(&m));
    }
    if p.scale != 1.0 || p.offset != 0.0 {
        for v in image.data.iter_mut() {
            *v = (*v * p.scale + p.offset).clamp(0.0, 1.0);
        }
    }
    SamplePair { id: pair.id.clone(), image, label, mask }
}

fn flip_index(y: usize, x: usize, h: usize, w: usize, hflip: bool, vflip: bool) -> usize {
    let sy = if vflip { h - 1 - y } else { y };
    let sx = if hflip { w - 1 - x } else { x };
    sy * w + sx
}

fn flip_plane(p: &Plane, hflip: bool, vflip: bool) -> Plane {
    let (h, w) = p.dims();
    let mut data = Vec::with_capacity(p.data.len());
    for y in 0..h {
        for x in 0..w {
            data.push(p.data[flip_index(y, x, h, w, hflip, vflip)]);
        }
    }
    Plane { height: h, width: w, data }
}

fn flip_rgb(img: &RgbImage, hflip: bool, vflip: bool) -> RgbImage {
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let s = flip_index(y, x, h, w, hflip, vflip) * 3;
            data.extend_from_slice(&img.data[s..s + 3]);
        }
    }
    RgbImage { height: h, width: w, data }
}

/// Maps output pixel coordinates to source coordinates.
struct InverseMap {
    h: usize,
    w: usize,
    cos: f64,
    sin: f64,
    cx: f64,
    cy: f64,
    tx: f64,
    ty: f64,
}

impl InverseMap {
    fn new(h: usize, w: usize, p: &AugmentParams) -> Self {
        let theta = p.rotation_deg.to_radians();
        Self {
            h,
            w,
            cos: theta.cos(),
            sin: theta.sin(),
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            tx: p.shift_x as f64,
            ty: p.shift_y as f64,
        }
    }

    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        // undo the shift, then rotate by −θ about the center (y axis points down)
        let dx = x as f64 - self.tx - self.cx;
        let dy = y as f64 - self.ty - self.cy;
        let sx = self.cos * dx - self.sin * dy + self.cx;
        let sy = self.sin * dx + self.cos * dy + self.cy;
        (sy, sx)
    }

    fn warp_nearest(&self, p: &Plane) -> Plane {
        let mut out = Plane::filled(self.h, self.w, 0.0);
        for y in 0..self.h {
            for x in 0..self.w {
                let (sy, sx) = self.source(y, x);
                let (ry, rx) = (sy.round(), sx.round());
                if ry >= 0.0 && rx >= 0.0 && (ry as usize) < self.h && (rx as usize) < self.w {
                    out.set(y, x, p.at(ry as usize, rx as usize));
                }
            }
        }
        out
    }

    fn warp_rgb(&self, img: &RgbImage) -> RgbImage {
        let mut out = RgbImage::filled(self.h, self.w, 0.0);
        let fetch = |yy: i64, xx: i64| -> [f64; 3] {
            if yy < 0 || xx < 0 || yy as usize >= self.h || xx as usize >= self.w {
                [0.0; 3]
            } else {
                img.pixel(yy as usize, xx as usize)
            }
        };
        for y in 0..self.h {
            for x in 0..self.w {
                let (sy, sx) = self.source(y, x);
                if sy <= -1.0 || sx <= -1.0 || sy >= self.h as f64 || sx >= self.w as f64 {
                    continue;
                }
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                let (a, b, c, d) = (fetch(y0, x0), fetch(y0, x0 + 1), fetch(y0 + 1, x0), fetch(y0 + 1, x0 + 1));
                let mut px = [0.0; 3];
                for k in 0..3 {
                    let top = a[k] * (1.0 - fx) + b[k] * fx;
                    let bottom = c[k] * (1.0 - fx) + d[k] * fx;
                    px[k] = top * (1.0 - fy) + bottom * fy;
                }
                out.set_pixel(y, x, px);
            }
        }
        out
    }
}
