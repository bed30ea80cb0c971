//! Procedural defect families.
//!
//! A defect is a convex blend of the scene toward a target pattern:
//! out = in + amplitude·w·(target − in), with the per-pixel weight w zero
//! outside the clipped region and softly falling off at its border. Target
//! values stay in [0,1], so the blend needs no clamping and the result is
//! linear in the amplitude.

use crate::rng::{uniform, uniform_int, Stream};
use crate::tensor::Tensor;

use super::textures::{self, lerp_color, random_color_wide, TextureParams, TextureSynth};
use super::RegionR;

/// Border falloff width as a fraction of the smaller region extent.
const FALLOFF_FRAC: f64 = 0.10;

pub struct DefectContext<'a> {
    pub image: &'a Tensor,
    pub region: &'a RegionR,
    /// inclusive clipped pixel bounds (x0, y0, x1, y1)
    pub bounds: (usize, usize, usize, usize),
    pub size: usize,
    /// mean color of the clipped region in the clean image
    pub region_mean: [f64; 3],
}

/// Extreme corner of the color cube opposite the region's mean; scene
/// colors stay mid-range, so defect targets near this corner stand out.
pub fn contrast_anchor(region_mean: &[f64; 3]) -> [f64; 3] {
    [
        if region_mean[0] > 0.5 { 0.03 } else { 0.97 },
        if region_mean[1] > 0.5 { 0.03 } else { 0.97 },
        if region_mean[2] > 0.5 { 0.03 } else { 0.97 },
    ]
}

/// One defect family: per-pixel blend weight in [0,1] and target color.
pub trait DefectSynth: Sync {
    fn name(&self) -> &'static str;

    /// Weight and target at pixel (x, y) inside the clipped bounds.
    /// The base weight is multiplied by the border falloff afterwards.
    fn sample(&self, x: usize, y: usize, ctx: &DefectContext, params: &DefectParams) -> (f64, [f64; 3]);
}

/// Per-defect parameters drawn from the sample stream.
#[derive(Clone, Debug)]
pub struct DefectParams {
    pub color: [f64; 3],
    pub secondary: [f64; 3],
    pub texture: TextureParams,
    pub strokes: Vec<Stroke>,
    pub channel_rot: usize,
}

#[derive(Clone, Debug)]
pub struct Stroke {
    /// endpoints in unit region coordinates
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub width: f64,
}

impl DefectParams {
    pub fn sample(rng: &mut Stream) -> Self {
        let strokes = (0..uniform_int(rng, 2, 4))
            .map(|_| Stroke {
                a: (uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)),
                b: (uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)),
                width: uniform(rng, 0.04, 0.12),
            })
            .collect();
        let mut texture = TextureParams::sample(rng);
        // defect patterns sit well above the scene-texture frequency band
        texture.freq = uniform(rng, 6.0, 12.0);
        DefectParams {
            color: random_color_wide(rng),
            secondary: random_color_wide(rng),
            texture,
            strokes,
            channel_rot: uniform_int(rng, 1, 2),
        }
    }
}

fn pixel(image: &Tensor, size: usize, x: usize, y: usize) -> [f64; 3] {
    [
        image.data()[y * size + x],
        image.data()[size * size + y * size + x],
        image.data()[2 * size * size + y * size + x],
    ]
}

/// Unit coordinates of (x, y) within the clipped bounds.
fn unit_coords(x: usize, y: usize, bounds: (usize, usize, usize, usize)) -> (f64, f64) {
    let (x0, y0, x1, y1) = bounds;
    let w = (x1 - x0 + 1).max(1) as f64;
    let h = (y1 - y0 + 1).max(1) as f64;
    (
        (x - x0) as f64 / w + 0.5 / w,
        (y - y0) as f64 / h + 0.5 / h,
    )
}

// ── families ─────────────────────────────────────────────────────────

/// Rotates the color channels of the underlying pixels.
pub struct ColorShift;
impl DefectSynth for ColorShift {
    fn name(&self) -> &'static str {
        "color_shift"
    }
    fn sample(&self, x: usize, y: usize, ctx: &DefectContext, p: &DefectParams) -> (f64, [f64; 3]) {
        let base = pixel(ctx.image, ctx.size, x, y);
        let r = p.channel_rot;
        let shifted = [base[r % 3], base[(1 + r) % 3], base[(2 + r) % 3]];
        // pull toward the contrasting corner when the rotation changes little
        let anchor = lerp_color(&contrast_anchor(&ctx.region_mean), &p.color, 0.3);
        let target = lerp_color(&shifted, &anchor, 0.6);
        (1.0, target)
    }
}

/// Replaces the region content with another texture family.
pub struct TextureSwap;
impl DefectSynth for TextureSwap {
    fn name(&self) -> &'static str {
        "texture_swap"
    }
    fn sample(&self, x: usize, y: usize, ctx: &DefectContext, p: &DefectParams) -> (f64, [f64; 3]) {
        let (u, v) = unit_coords(x, y, ctx.bounds);
        let t = textures::Weave.field(u, v, &p.texture);
        let anchor = contrast_anchor(&ctx.region_mean);
        let ca = lerp_color(&anchor, &p.color, 0.35);
        let cb = lerp_color(&anchor, &p.secondary, 0.7);
        (0.95, lerp_color(&ca, &cb, t))
    }
}

/// A few dark or bright strokes across the region.
pub struct Scratch;
impl DefectSynth for Scratch {
    fn name(&self) -> &'static str {
        "scratch"
    }
    fn sample(&self, x: usize, y: usize, ctx: &DefectContext, p: &DefectParams) -> (f64, [f64; 3]) {
        let (u, v) = unit_coords(x, y, ctx.bounds);
        let mut w: f64 = 0.0;
        for s in &p.strokes {
            let d = dist_to_segment((u, v), s.a, s.b);
            if d < s.width {
                let t = 1.0 - d / s.width;
                w = w.max(t * t);
            }
        }
        (w, lerp_color(&contrast_anchor(&ctx.region_mean), &p.color, 0.25))
    }
}

/// An occluding blob with a soft noisy boundary.
pub struct Blob;
impl DefectSynth for Blob {
    fn name(&self) -> &'static str {
        "blob"
    }
    fn sample(&self, x: usize, y: usize, ctx: &DefectContext, p: &DefectParams) -> (f64, [f64; 3]) {
        let (u, v) = unit_coords(x, y, ctx.bounds);
        let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
        let wobble = 0.12 * (textures::value_noise(p.texture.lattice_seed, u * 4.0, v * 4.0) - 0.5);
        let radius = 0.38 + wobble;
        let w = if d < radius {
            ((radius - d) / 0.1).min(1.0)
        } else {
            0.0
        };
        (w, lerp_color(&contrast_anchor(&ctx.region_mean), &p.color, 0.3))
    }
}

/// Dark speckles eating into the surface.
pub struct Speckle;
impl DefectSynth for Speckle {
    fn name(&self) -> &'static str {
        "speckle"
    }
    fn sample(&self, x: usize, y: usize, ctx: &DefectContext, p: &DefectParams) -> (f64, [f64; 3]) {
        let (u, v) = unit_coords(x, y, ctx.bounds);
        let n = textures::value_noise(p.texture.lattice_seed, u * 9.0, v * 9.0);
        let w = if n > 0.58 { 1.0 } else { 0.0 };
        let base = pixel(ctx.image, ctx.size, x, y);
        // pits darken bright surfaces and glint on dark ones
        let lum = (ctx.region_mean[0] + ctx.region_mean[1] + ctx.region_mean[2]) / 3.0;
        let target = if lum > 0.45 {
            [base[0] * 0.2, base[1] * 0.2, base[2] * 0.2]
        } else {
            [
                1.0 - (1.0 - base[0]) * 0.2,
                1.0 - (1.0 - base[1]) * 0.2,
                1.0 - (1.0 - base[2]) * 0.2,
            ]
        };
        (w, target)
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let len2 = bx * bx + by * by;
    let t = if len2 > 0.0 {
        ((px * bx + py * by) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - t * bx, py - t * by);
    (dx * dx + dy * dy).sqrt()
}

/// Smooth falloff toward the clipped region border: 1 well inside, 0 at
/// the edge.
pub fn border_falloff(x: usize, y: usize, bounds: (usize, usize, usize, usize)) -> f64 {
    let (x0, y0, x1, y1) = bounds;
    let w = (x1 - x0 + 1) as f64;
    let h = (y1 - y0 + 1) as f64;
    let margin = (w.min(h) * FALLOFF_FRAC).max(1.0);
    let dx = ((x - x0) as f64 + 0.5).min((x1 - x) as f64 + 0.5);
    let dy = ((y - y0) as f64 + 0.5).min((y1 - y) as f64 + 0.5);
    let d = dx.min(dy);
    (d / margin).clamp(0.0, 1.0)
}

static COLOR_SHIFT: ColorShift = ColorShift;
static TEXTURE_SWAP: TextureSwap = TextureSwap;
static SCRATCH: Scratch = Scratch;
static BLOB: Blob = Blob;
static SPECKLE: Speckle = Speckle;

static FAMILIES: [&dyn DefectSynth; 5] = [&COLOR_SHIFT, &TEXTURE_SWAP, &SCRATCH, &BLOB, &SPECKLE];

pub fn defect_families() -> &'static [&'static dyn DefectSynth] {
    &FAMILIES
}

pub fn defect_by_name(name: &str) -> Option<&'static dyn DefectSynth> {
    defect_families().iter().find(|f| f.name() == name).copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let names: Vec<&str> = defect_families().iter().map(|f| f.name()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(defect_by_name("scratch").is_some());
        assert!(defect_by_name("rust").is_none());
    }

    #[test]
    fn falloff_is_small_at_border_one_inside() {
        let bounds = (10, 10, 29, 29);
        assert!(border_falloff(10, 20, bounds) < 0.3);
        assert!(border_falloff(20, 20, bounds) > 0.99);
        assert!(border_falloff(10, 10, bounds) <= border_falloff(12, 12, bounds));
    }
}
