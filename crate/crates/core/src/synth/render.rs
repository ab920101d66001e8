//! Procedural garments, textures and the person context.
//!
//! Garments live in a canonical frame `(u, v)` with `u` horizontal and `v`
//! pointing down; the silhouette is symmetric in `u`. The catalog view is a
//! product shot on a black backdrop whose frame is the garment's bounding
//! box, the same framing an object crop resized to catalog resolution has.
//! Context views show that framing scaled down, rotated and shifted, with a
//! simple person drawn around the garment.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};


const CATALOG_BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    Stripes,
    Checks,
    Dots,
    Solid,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 4] = [Self::Stripes, Self::Checks, Self::Dots, Self::Solid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Stripes => "stripes",
            Self::Checks => "checks",
            Self::Dots => "dots",
            Self::Solid => "solid",
        }
    }
}

impl std::str::FromStr for TextureFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown texture family `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub family: TextureFamily,
    /// Pattern period in canonical units.
    pub period: f64,
    /// Stripe orientation in degrees (0 = horizontal bands).
    pub angle_deg: f64,
    /// Dot radius as a fraction of the period.
    pub dot_radius: f64,
    pub colors: [[f64; 3]; 2],
}

impl Texture {
    /// RGB in `[0, 1]` at canonical position `(u, v)`.
    pub fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let [a, b] = self.colors;
        let p = self.period;
        let pick = |first: bool| if first { a } else { b };
        match self.family {
            TextureFamily::Solid => a,
            TextureFamily::Stripes => {
                let t = self.angle_deg.to_radians();
                let s = -u * t.sin() + v * t.cos();
                pick((s / p).rem_euclid(1.0) < 0.5)
            }
            TextureFamily::Checks => {
                let i = (u / (p * 0.5)).floor() as i64;
                let j = (v / (p * 0.5)).floor() as i64;
                pick((i + j).rem_euclid(2) == 0)
            }
            TextureFamily::Dots => {
                let du = (u / p).rem_euclid(1.0) - 0.5;
                let dv = (v / p).rem_euclid(1.0) - 0.5;
                pick(du * du + dv * dv < self.dot_radius * self.dot_radius)
            }
        }
    }
}

/// T-shirt shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub half_width: f64,
    /// Bottom hem position.
    pub hem: f64,
    /// Outer end of each sleeve.
    pub sleeve_reach: f64,
}

pub const SHOULDER: f64 = -0.6;
const NECK_RADIUS: f64 = 0.2;

impl Silhouette {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let au = u.abs();
        if u * u + (v - SHOULDER).powi(2) < NECK_RADIUS * NECK_RADIUS {
            return false;
        }
        let body = au <= self.half_width && (SHOULDER..=self.hem).contains(&v);
        let d = au - self.half_width;
        let sleeve = d > 0.0 && au <= self.sleeve_reach && {
            let top = SHOULDER + 0.45 * d;
            v >= top && v <= top + 0.38
        };
        body || sleeve
    }

    /// Bounding box `(u_min, u_max, v_min, v_max)` of the silhouette.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (-self.sleeve_reach, self.sleeve_reach, SHOULDER, self.hem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    /// Size of the garment's frame relative to the image.
    pub scale: f64,
    pub rotation_deg: f64,
    /// Garment centre offset as a fraction of the image size.
    pub shift: [f64; 2],
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub legwear: [f64; 3],
}

/// Everything needed to redraw one item and all its views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub item: usize,
    pub silhouette: Silhouette,
    pub texture: Texture,
    pub views: Vec<ViewParams>,
}

/// Ranges the item sampler draws from.
#[derive(Debug, Clone)]
pub struct SampleRanges<'a> {
    pub families: &'a [TextureFamily],
    pub scale: (f64, f64),
    pub max_rotation_deg: f64,
    pub max_shift: f64,
    pub period: (f64, f64),
    pub views: usize,
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn color_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn sample_item<R: Rng>(item: usize, r: &SampleRanges<'_>, rng: &mut R) -> ItemParams {
    let family = r.families[rng.random_range(0..r.families.len())];
    let c0 = random_color(rng, 0.05, 0.95);
    let mut c1 = random_color(rng, 0.05, 0.95);
    while color_dist(c0, c1) < 0.45 {
        c1 = random_color(rng, 0.05, 0.95);
    }
    let period = rng.random_range(r.period.0..=r.period.1);
    let texture = Texture {
        family,
        period,
        angle_deg: if rng.random_bool(0.5) { 0.0 } else { 90.0 },
        dot_radius: rng.random_range(0.22..0.34),
        colors: [c0, c1],
    };
    let half_width = rng.random_range(0.36..0.5);
    let silhouette = Silhouette {
        half_width,
        hem: rng.random_range(0.6..0.9),
        sleeve_reach: half_width + rng.random_range(0.2..0.4),
    };
    let views = (0..r.views)
        .map(|_| {
            let mut background = random_color(rng, 0.1, 0.9);
            while color_dist(background, c0) < 0.3 || color_dist(background, c1) < 0.3 {
                background = random_color(rng, 0.1, 0.9);
            }
            let tone = rng.random_range(0.35..0.95);
            ViewParams {
                scale: rng.random_range(r.scale.0..=r.scale.1),
                rotation_deg: rng.random_range(-r.max_rotation_deg..=r.max_rotation_deg),
                shift: [
                    rng.random_range(-r.max_shift..=r.max_shift),
                    rng.random_range(-r.max_shift..=r.max_shift),
                ],
                background,
                skin: [tone, tone * 0.78, tone * 0.62],
                legwear: random_color(rng, 0.05, 0.6),
            }
        })
        .collect();
    ItemParams {
        item,
        silhouette,
        texture,
        views,
    }
}

/// Interleaved RGB bytes of the catalog view.
pub fn render_catalog(p: &ItemParams, size: usize) -> Vec<u8> {
    let (u0, u1, v0, v1) = p.silhouette.bounds();
    let n = size as f64;
    let mut out = vec![0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let u = u0 + (x as f64 + 0.5) / n * (u1 - u0);
            let v = v0 + (y as f64 + 0.5) / n * (v1 - v0);
            let rgb = if p.silhouette.contains(u, v) {
                p.texture.color_at(u, v)
            } else {
                CATALOG_BACKGROUND
            };
            put(&mut out, (y * size + x) * 3, rgb);
        }
    }
    out
}

fn put(out: &mut [u8], at: usize, rgb: [f64; 3]) {
    for (k, v) in rgb.iter().enumerate() {
        out[at + k] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
}

/// Person parts in the garment frame, drawn beneath the garment.
fn person_color(s: &Silhouette, view: &ViewParams, u: f64, v: f64) -> Option<[f64; 3]> {
    let head = u * u + (v - (SHOULDER - 0.45)).powi(2) < 0.33 * 0.33;
    let neck = u.abs() < 0.12 && (SHOULDER - 0.2..=SHOULDER + 0.1).contains(&v);
    let legs = v > s.hem - 0.1 && v < 2.6 && {
        let au = u.abs();
        (0.04..0.34).contains(&au)
    };
    let arms = {
        let au = u.abs();
        let x0 = s.sleeve_reach - 0.18;
        v > SHOULDER && v < 1.1 && au > x0 && au < x0 + 0.16 + 0.08 * (v - SHOULDER)
    };
    if legs {
        Some(view.legwear)
    } else if head || neck || arms {
        Some(view.skin)
    } else {
        None
    }
}

/// Interleaved RGB bytes of context view `k` and its `{0, 255}` garment
/// mask. The view is the catalog framing shrunk by `view.scale`, rotated
/// and shifted, with the person drawn in the same garment frame.
pub fn render_context(p: &ItemParams, k: usize, size: usize) -> (Vec<u8>, Vec<u8>) {
    let view = &p.views[k];
    let (u0, u1, v0, v1) = p.silhouette.bounds();
    let n = size as f64;
    let cx = n / 2.0 + view.shift[0] * n;
    let cy = n / 2.0 + view.shift[1] * n;
    let th = view.rotation_deg * PI / 180.0;
    let (sin, cos) = th.sin_cos();
    let mut rgb = vec![0; size * size * 3];
    let mut mask = vec![0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let qx = (cos * dx + sin * dy) / (view.scale * n);
            let qy = (-sin * dx + cos * dy) / (view.scale * n);
            let u = (u0 + u1) / 2.0 + qx * (u1 - u0);
            let v = (v0 + v1) / 2.0 + qy * (v1 - v0);
            let col = if p.silhouette.contains(u, v) {
                mask[y * size + x] = 255;
                p.texture.color_at(u, v)
            } else if let Some(c) = person_color(&p.silhouette, view, u, v) {
                c
            } else {
                view.background
            };
            put(&mut rgb, (y * size + x) * 3, col);
        }
    }
    (rgb, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_is_mirror_symmetric() {
        let s = Silhouette {
            half_width: 0.42,
            hem: 0.8,
            sleeve_reach: 0.75,
        };
        for i in 0..200 {
            let u = -1.2 + i as f64 * 0.012;
            for j in 0..100 {
                let v = -1.0 + j as f64 * 0.02;
                assert_eq!(s.contains(u, v), s.contains(-u, v));
            }
        }
        assert!(s.contains(0.0, 0.0));
        assert!(!s.contains(0.0, SHOULDER + 0.05));
    }

    #[test]
    fn bounds_enclose_the_silhouette_tightly() {
        let s = Silhouette {
            half_width: 0.4,
            hem: 0.7,
            sleeve_reach: 0.7,
        };
        let (u0, u1, v0, v1) = s.bounds();
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for i in 0..=400 {
            for j in 0..=400 {
                let (u, v) = (-1.0 + i as f64 * 0.005, -1.0 + j as f64 * 0.005);
                if s.contains(u, v) {
                    lo_u = lo_u.min(u);
                    hi_u = hi_u.max(u);
                    lo_v = lo_v.min(v);
                    hi_v = hi_v.max(v);
                }
            }
        }
        for (got, want) in [(lo_u, u0), (hi_u, u1), (lo_v, v0), (hi_v, v1)] {
            assert!((got - want).abs() <= 0.005, "{got} vs {want}");
        }
    }

    #[test]
    fn texture_families_use_both_colors() {
        let mut fams = TextureFamily::ALL.to_vec();
        fams.retain(|f| *f != TextureFamily::Solid);
        for family in fams {
            let t = Texture {
                family,
                period: 0.5,
                angle_deg: 0.0,
                dot_radius: 0.3,
                colors: [[0.0; 3], [1.0; 3]],
            };
            let mut seen = [false; 2];
            for i in 0..50 {
                for j in 0..50 {
                    let c = t.color_at(i as f64 * 0.03, j as f64 * 0.03);
                    seen[(c[0] == 1.0) as usize] = true;
                }
            }
            assert_eq!(seen, [true, true], "{family:?}");
        }
    }
}
