//! Procedural texture families.
//!
//! Each family is one strategy behind [`TextureSynth`]; scenes pick a
//! family by hashing the vocabulary tag, so one tag always renders with
//! the same family while its colors and frequencies vary per scene seed.

use crate::rng::{uniform, Stream};
use crate::tensor::Tensor;

pub type Rgb = [f64; 3];

/// Per-scene texture parameters drawn from the scene stream.
#[derive(Clone, Debug)]
pub struct TextureParams {
    pub color_a: Rgb,
    pub color_b: Rgb,
    pub freq: f64,
    pub angle: f64,
    pub lattice_seed: u64,
}

impl TextureParams {
    pub fn sample(rng: &mut Stream) -> Self {
        let color_a = random_color(rng);
        // moderate within-texture contrast keeps surfaces locally smooth
        let mut color_b = random_color(rng);
        for _ in 0..16 {
            let d = color_distance(&color_a, &color_b);
            if (0.08..=0.40).contains(&d) {
                break;
            }
            color_b = random_color(rng);
        }
        TextureParams {
            color_a,
            color_b,
            freq: uniform(rng, 1.0, 3.0),
            angle: uniform(rng, 0.0, std::f64::consts::PI),
            lattice_seed: uniform(rng, 0.0, 1.0).to_bits(),
        }
    }
}

/// Scene colors sit in a mid-range band; defect targets may leave it.
pub fn random_color(rng: &mut Stream) -> Rgb {
    [
        uniform(rng, 0.30, 0.70),
        uniform(rng, 0.30, 0.70),
        uniform(rng, 0.30, 0.70),
    ]
}

pub fn random_color_wide(rng: &mut Stream) -> Rgb {
    [
        uniform(rng, 0.05, 0.95),
        uniform(rng, 0.05, 0.95),
        uniform(rng, 0.05, 0.95),
    ]
}

pub fn color_distance(a: &Rgb, b: &Rgb) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn lerp_color(a: &Rgb, b: &Rgb, t: f64) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// One texture family: maps unit coordinates to a blend factor in [0,1]
/// between the two palette colors.
pub trait TextureSynth: Sync {
    fn name(&self) -> &'static str;
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64;

    /// Render an RGB square of extent `size`.
    fn render(&self, size: usize, p: &TextureParams) -> Tensor {
        let mut data = vec![0.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64;
                let v = (y as f64 + 0.5) / size as f64;
                let t = self.field(u, v, p).clamp(0.0, 1.0);
                let c = lerp_color(&p.color_a, &p.color_b, t);
                for ch in 0..3 {
                    data[ch * size * size + y * size + x] = c[ch];
                }
            }
        }
        Tensor::from_vec(&[3, size, size], data).expect("texture shape")
    }
}

// ── coordinate hashing ───────────────────────────────────────────────
// SplitMix64 over (seed, x, y); pure and stable, used only for lattice
// noise where a per-pixel cryptographic hash would dominate runtime.

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn lattice_value(seed: u64, x: i64, y: i64) -> f64 {
    let h = mix64(seed ^ mix64(x as u64).wrapping_add(mix64((y as u64).wrapping_mul(0x9e3779b9))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smootherstep(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Bilinear value noise with smootherstep interpolation, range [0,1].
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let xi = x.floor();
    let yi = y.floor();
    let fx = smootherstep(x - xi);
    let fy = smootherstep(y - yi);
    let (xi, yi) = (xi as i64, yi as i64);
    let v00 = lattice_value(seed, xi, yi);
    let v10 = lattice_value(seed, xi + 1, yi);
    let v01 = lattice_value(seed, xi, yi + 1);
    let v11 = lattice_value(seed, xi + 1, yi + 1);
    let a = v00 + (v10 - v00) * fx;
    let b = v01 + (v11 - v01) * fx;
    a + (b - a) * fy
}

/// Three-octave fractal value noise, range roughly [0,1].
pub fn fbm_noise(seed: u64, x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    let mut amp = 0.5715;
    let mut freq = 1.0;
    for octave in 0..3u64 {
        total += amp * value_noise(seed.wrapping_add(octave * 7919), x * freq, y * freq);
        amp *= 0.5;
        freq *= 2.0;
    }
    total
}

// ── families ─────────────────────────────────────────────────────────

pub struct Gradient;
impl TextureSynth for Gradient {
    fn name(&self) -> &'static str {
        "gradient"
    }
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64 {
        let (s, c) = p.angle.sin_cos();
        (u * c + v * s + 1.0) / 2.0
    }
}

pub struct ValueNoise;
impl TextureSynth for ValueNoise {
    fn name(&self) -> &'static str {
        "value_noise"
    }
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64 {
        value_noise(p.lattice_seed, u * p.freq, v * p.freq)
    }
}

pub struct Stripes;
impl TextureSynth for Stripes {
    fn name(&self) -> &'static str {
        "stripes"
    }
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64 {
        let (s, c) = p.angle.sin_cos();
        let t = (u * c + v * s) * p.freq * std::f64::consts::TAU;
        (t.sin() + 1.0) / 2.0
    }
}

pub struct Checker;
impl TextureSynth for Checker {
    fn name(&self) -> &'static str {
        "checker"
    }
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64 {
        let n = p.freq.ceil();
        let cell = ((u * n).floor() + (v * n).floor()) as i64;
        if cell % 2 == 0 {
            0.3
        } else {
            0.7
        }
    }
}

pub struct Fbm;
impl TextureSynth for Fbm {
    fn name(&self) -> &'static str {
        "fbm"
    }
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64 {
        fbm_noise(p.lattice_seed, u * p.freq, v * p.freq)
    }
}

pub struct Rings;
impl TextureSynth for Rings {
    fn name(&self) -> &'static str {
        "rings"
    }
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64 {
        let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
        ((d * p.freq * std::f64::consts::TAU).sin() + 1.0) / 2.0
    }
}

pub struct Dots;
impl TextureSynth for Dots {
    fn name(&self) -> &'static str {
        "dots"
    }
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64 {
        let n = p.freq.ceil();
        let cu = (u * n).fract() - 0.5;
        let cv = (v * n).fract() - 0.5;
        let d = (cu * cu + cv * cv).sqrt();
        // soft-edged dots
        (0.7 - ((d - 0.28) / 0.08).clamp(0.0, 1.0) * 0.4).clamp(0.0, 1.0)
    }
}

pub struct Weave;
impl TextureSynth for Weave {
    fn name(&self) -> &'static str {
        "weave"
    }
    fn field(&self, u: f64, v: f64, p: &TextureParams) -> f64 {
        let t = p.freq * std::f64::consts::TAU;
        ((u * t).sin().abs() + (v * t).sin().abs()) / 2.0
    }
}

static GRADIENT: Gradient = Gradient;
static VALUE_NOISE: ValueNoise = ValueNoise;
static STRIPES: Stripes = Stripes;
static CHECKER: Checker = Checker;
static FBM: Fbm = Fbm;
static RINGS: Rings = Rings;
static DOTS: Dots = Dots;
static WEAVE: Weave = Weave;

static BG_FAMILIES: [&dyn TextureSynth; 4] = [&GRADIENT, &VALUE_NOISE, &STRIPES, &CHECKER];
static OBJ_FAMILIES: [&dyn TextureSynth; 4] = [&FBM, &RINGS, &DOTS, &WEAVE];

/// Families used for backgrounds.
pub fn background_families() -> &'static [&'static dyn TextureSynth] {
    &BG_FAMILIES
}

/// Families used for foreground objects; visually distinct from the
/// background set.
pub fn object_families() -> &'static [&'static dyn TextureSynth] {
    &OBJ_FAMILIES
}

pub fn family_by_name(name: &str) -> Option<&'static dyn TextureSynth> {
    background_families()
        .iter()
        .chain(object_families())
        .find(|f| f.name() == name)
        .copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = derive_stream(5, "texture-test", 0);
        let p = TextureParams::sample(&mut rng);
        for fam in background_families().iter().chain(object_families()) {
            let a = fam.render(16, &p);
            let b = fam.render(16, &p);
            assert!(a.bit_equal(&b), "{} not deterministic", fam.name());
        }
    }

    #[test]
    fn rendered_values_stay_in_unit_range() {
        let mut rng = derive_stream(5, "texture-test", 1);
        for i in 0..8 {
            let p = TextureParams::sample(&mut rng);
            let fam = object_families()[i % 4];
            let img = fam.render(12, &p);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn family_lookup_by_name() {
        assert!(family_by_name("fbm").is_some());
        assert!(family_by_name("granite").is_none());
    }

    #[test]
    fn value_noise_is_smooth_and_bounded() {
        for i in 0..50 {
            let v = value_noise(42, i as f64 * 0.13, i as f64 * 0.07);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
