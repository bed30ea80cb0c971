//! Three-stage synthetic triplet generation: normal-scene synthesis,
//! region-restricted defect synthesis, and feature-distance filtering
//! with mask extraction.
//!
//! Every attempt is a pure function of (master seed, attempt index), so
//! generation is byte-identical regardless of worker count: workers only
//! parallelise attempt evaluation, and the output is always the ordered
//! prefix of attempts up to the one that yields the n-th acceptance.

pub mod defects;
pub mod textures;
pub mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::FeatureExtractor;
use crate::pngio;
use crate::rng::{derive_seed, log_uniform, stream_from_seed, uniform, uniform_int, Stream};
use crate::tensor::Tensor;

use defects::{border_falloff, defect_families, DefectContext, DefectParams, DefectSynth};
use textures::{background_families, color_distance, object_families, TextureParams, TextureSynth};
use vocab::Vocabulary;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub image_size: usize,
    /// Patch extent of the raw-pixel extractor (and the mask cell size).
    pub extractor_patch: usize,
    /// Acceptance and binarisation threshold T.
    pub threshold: f64,
    pub forced_fail_prob: f64,
    /// Defect amplitude, sampled log-uniformly.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub fg_cover_min: f64,
    pub fg_cover_max: f64,
    /// Region extents at the anchor resolution, scaled linearly to
    /// `image_size`.
    pub region_w: (f64, f64),
    pub region_h: (f64, f64),
    pub region_anchor: f64,
    /// Ablation: sample defect centers over the whole image.
    pub full_image_fg: bool,
    /// Ablation: keep every generated sample.
    pub no_filter: bool,
    /// `raw_pixel` or `backbone`.
    pub extractor: String,
    /// Restrict the object tags; `None` means the full vocabulary.
    pub objects: Option<Vec<String>>,
    pub workers: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            image_size: 64,
            extractor_patch: 8,
            threshold: 0.3,
            forced_fail_prob: 0.2,
            amplitude_min: 0.15,
            amplitude_max: 0.9,
            fg_cover_min: 0.10,
            fg_cover_max: 0.60,
            region_w: (50.0, 350.0),
            region_h: (50.0, 350.0),
            region_anchor: 1024.0,
            full_image_fg: false,
            no_filter: false,
            extractor: "backbone".into(),
            objects: None,
            workers: 1,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.extractor_patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by extractor patch {}",
                self.image_size, self.extractor_patch
            )));
        }
        if !(0.0..=1.0).contains(&self.forced_fail_prob) {
            return Err(Error::Config("forced_fail_prob out of [0,1]".into()));
        }
        if self.amplitude_min <= 0.0 || self.amplitude_max > 1.0 || self.amplitude_min > self.amplitude_max {
            return Err(Error::Config("amplitude range must satisfy 0 < min <= max <= 1".into()));
        }
        Ok(())
    }

    /// Region extent bounds scaled from the anchor resolution.
    pub fn scaled_ranges(&self) -> (usize, usize, usize, usize) {
        let scale = self.image_size as f64 / self.region_anchor;
        let f = |v: f64| ((v * scale).round() as usize).max(1).min(self.image_size);
        (
            f(self.region_w.0),
            f(self.region_w.1),
            f(self.region_h.0),
            f(self.region_h.1),
        )
    }
}

/// Procedural analog of a generation prompt: tags plus a seed.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub object_tag: String,
    pub texture_tag: String,
    pub seed: u64,
    pub image_size: usize,
}

/// Defect rectangle: center pixel and extents, clipped to bounds on use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionR {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl RegionR {
    /// Inclusive pixel bounds (x0, y0, x1, y1) after clipping.
    pub fn clipped(&self, size: usize) -> (usize, usize, usize, usize) {
        let x0 = self.x.saturating_sub(self.w / 2);
        let y0 = self.y.saturating_sub(self.h / 2);
        let x1 = (self.x + self.w / 2).min(size - 1);
        let y1 = (self.y + self.h / 2).min(size - 1);
        (x0, y0, x1, y1)
    }
}

#[derive(Clone, Debug)]
pub struct SampleTriplet {
    pub id: u64,
    pub object: String,
    pub texture: String,
    pub anomaly: String,
    pub normal: Tensor,
    pub anomalous: Tensor,
    /// [H × W] binary anomaly mask
    pub mask: Tensor,
    /// [H × W] binary foreground mask
    pub fg_mask: Tensor,
    pub region: RegionR,
    pub distance: f64,
    pub accepted: bool,
    pub forced_fail: bool,
    pub amplitude: f64,
    pub seed: u64,
}

// ── stage 1: normal scene ────────────────────────────────────────────

fn family_for_tag<'a>(
    families: &'a [&'a dyn TextureSynth],
    salt: &str,
    tag: &str,
) -> &'a dyn TextureSynth {
    let idx = derive_seed(0, &format!("{salt}:{tag}"), 0) as usize % families.len();
    families[idx]
}

fn defect_family_for_tag(tag: &str) -> &'static dyn DefectSynth {
    let fams = defect_families();
    fams[derive_seed(0, &format!("defect-family:{tag}"), 0) as usize % fams.len()]
}

/// Star-convex blob raster; retries until coverage lands inside the
/// configured band, falling back to a centered disk.
fn foreground_blob(size: usize, cover: (f64, f64), rng: &mut Stream) -> Tensor {
    for _ in 0..8 {
        let cx = (0.5 + uniform(rng, -0.08, 0.08)) * size as f64;
        let cy = (0.5 + uniform(rng, -0.08, 0.08)) * size as f64;
        let r0 = uniform(rng, 0.25, 0.40) * size as f64;
        let lobes: Vec<(f64, f64, f64)> = (2..5)
            .map(|k| (k as f64, uniform(rng, 0.0, 0.10), uniform(rng, 0.0, std::f64::consts::TAU)))
            .collect();
        let mut data = vec![0.0; size * size];
        let mut count = 0usize;
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let theta = dy.atan2(dx);
                let modulation: f64 = lobes.iter().map(|(k, a, p)| a * (k * theta + p).cos()).sum();
                let radius = r0 * (1.0 + modulation);
                if (dx * dx + dy * dy).sqrt() <= radius {
                    data[y * size + x] = 1.0;
                    count += 1;
                }
            }
        }
        let coverage = count as f64 / (size * size) as f64;
        if coverage >= cover.0 && coverage <= cover.1 {
            return Tensor::from_vec(&[size, size], data).expect("blob shape");
        }
    }
    // centered disk: coverage π·0.09 ≈ 28%
    let r = 0.3 * size as f64;
    Tensor::from_fn(&[size, size], |i| {
        let (y, x) = (i / size, i % size);
        let dx = x as f64 + 0.5 - size as f64 / 2.0;
        let dy = y as f64 + 0.5 - size as f64 / 2.0;
        if (dx * dx + dy * dy).sqrt() <= r {
            1.0
        } else {
            0.0
        }
    })
}

/// Quantize to the 8-bit lattice so PNG round trips are lossless.
fn quantize_u8(t: &mut Tensor) {
    for v in t.make_data_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

/// Deterministic normal-scene synthesis: textured background, a blob
/// foreground with a distinct texture family, and its exact raster mask.
pub fn generate_normal(spec: &SceneSpec, vocabulary: &Vocabulary) -> Result<(Tensor, Tensor)> {
    if !vocabulary.objects.iter().any(|o| o == &spec.object_tag) {
        return Err(Error::Vocabulary(spec.object_tag.clone()));
    }
    if !vocabulary.textures.iter().any(|t| t == &spec.texture_tag) {
        return Err(Error::Vocabulary(spec.texture_tag.clone()));
    }
    let size = spec.image_size;
    let mut rng = stream_from_seed(spec.seed);

    let bg_family = family_for_tag(background_families(), "bg-family", &spec.texture_tag);
    let fg_family = family_for_tag(object_families(), "fg-family", &spec.object_tag);

    let bg_params = TextureParams::sample(&mut rng);
    let mut fg_params = TextureParams::sample(&mut rng);
    for _ in 0..20 {
        let spread = color_distance(&fg_params.color_a, &bg_params.color_a)
            + color_distance(&fg_params.color_b, &bg_params.color_b);
        if spread >= 0.7 {
            break;
        }
        fg_params = TextureParams::sample(&mut rng);
    }

    let fg_mask = foreground_blob(size, (0.10, 0.60), &mut rng);
    let bg = bg_family.render(size, &bg_params);
    let fg = fg_family.render(size, &fg_params);

    let mut data = bg.data().to_vec();
    for y in 0..size {
        for x in 0..size {
            if fg_mask.data()[y * size + x] > 0.5 {
                for ch in 0..3 {
                    data[ch * size * size + y * size + x] = fg.data()[ch * size * size + y * size + x];
                }
            }
        }
    }
    let mut image = Tensor::from_vec(&[3, size, size], data)?;
    quantize_u8(&mut image);
    Ok((image, fg_mask))
}

// ── stage 2: region + defect ─────────────────────────────────────────

/// Center uniform over positive foreground pixels, extents uniform in the
/// scaled ranges, rectangle clipped to bounds on use.
pub fn sample_region(
    fg_mask: &Tensor,
    ranges: (usize, usize, usize, usize),
    rng: &mut Stream,
) -> Result<RegionR> {
    let (h, w) = fg_mask.dims2()?;
    let positives: Vec<usize> = fg_mask
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v > 0.5).then_some(i))
        .collect();
    if positives.is_empty() {
        return Err(Error::Generation("empty foreground mask".into()));
    }
    let pick = positives[uniform_int(rng, 0, positives.len() - 1)];
    let (wmin, wmax, hmin, hmax) = ranges;
    Ok(RegionR {
        x: pick % w,
        y: pick / w,
        w: uniform_int(rng, wmin, wmax),
        h: uniform_int(rng, hmin.min(h), hmax.min(h)),
    })
}

/// Region-restricted defect synthesis. Pixels outside the clipped region
/// are bit-identical to the input; a forced failure or zero amplitude
/// returns the input unchanged.
pub fn inpaint_defect(
    image: &Tensor,
    region: &RegionR,
    anomaly_tag: &str,
    amplitude: f64,
    forced_fail: bool,
    rng: &mut Stream,
) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if h != w {
        return Err(Error::dim("inpaint_defect", "square images only".to_string()));
    }
    let params = DefectParams::sample(rng);
    if forced_fail || amplitude == 0.0 {
        return Ok(image.clone());
    }
    let size = h;
    let bounds = region.clipped(size);
    let family = defect_family_for_tag(anomaly_tag);
    let (x0, y0, x1, y1) = bounds;
    let mut region_mean = [0.0f64; 3];
    let npix = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            for ch in 0..3 {
                region_mean[ch] += image.data()[ch * size * size + y * size + x];
            }
        }
    }
    for m in &mut region_mean {
        *m /= npix;
    }
    let ctx = DefectContext {
        image,
        region,
        bounds,
        size,
        region_mean,
    };
    let mut out = image.clone();
    let data = out.make_data_mut();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (base_w, target) = family.sample(x, y, &ctx, &params);
            let wgt = (amplitude * base_w * border_falloff(x, y, bounds)).clamp(0.0, 1.0);
            if wgt == 0.0 {
                continue;
            }
            for ch in 0..3 {
                let idx = ch * size * size + y * size + x;
                data[idx] += wgt * (target[ch] - data[idx]);
            }
        }
    }
    quantize_u8(&mut out);
    Ok(out)
}

// ── stage 3: filtering ───────────────────────────────────────────────

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (na * nb)
}

/// Per-patch cosine distance between extracted features of two images.
pub fn feature_distance_map(
    extractor: &dyn FeatureExtractor,
    normal: &Tensor,
    anomalous: &Tensor,
) -> Result<Tensor> {
    if normal.shape() != anomalous.shape() {
        return Err(Error::dim(
            "feature_distance_map",
            format!("{:?} vs {:?}", normal.shape(), anomalous.shape()),
        ));
    }
    let (gh, gw) = extractor.grid(normal)?;
    let f = extractor.extract(normal)?;
    let fa = extractor.extract(anomalous)?;
    let (n, dim) = f.dims2()?;
    if n != gh * gw {
        return Err(Error::dim(
            "feature_distance_map",
            format!("extractor produced {} rows for a {}x{} grid", n, gh, gw),
        ));
    }
    let data = (0..n)
        .map(|i| cosine_distance(&f.data()[i * dim..(i + 1) * dim], &fa.data()[i * dim..(i + 1) * dim]))
        .collect();
    Tensor::from_vec(&[gh, gw], data)
}

/// D = max(M_d); accept iff D > T; mask = nearest-neighbor upsample of
/// (M_d > T) to image resolution.
pub fn filter_and_mask(
    m_d: &Tensor,
    threshold: f64,
    out_h: usize,
    out_w: usize,
) -> Result<(bool, f64, Tensor)> {
    let (gh, gw) = m_d.dims2()?;
    let d = m_d.data().iter().copied().fold(0.0f64, f64::max);
    let accepted = d > threshold;
    let mask = Tensor::from_fn(&[out_h, out_w], |i| {
        let (y, x) = (i / out_w, i % out_w);
        let cy = y * gh / out_h;
        let cx = x * gw / out_w;
        if m_d.data()[cy * gw + cx] > threshold {
            1.0
        } else {
            0.0
        }
    });
    Ok((accepted, d, mask))
}

// ── full pipeline ────────────────────────────────────────────────────

/// One attempt, a pure function of (master seed, attempt index).
pub fn generate_attempt(
    attempt: u64,
    master_seed: u64,
    cfg: &DatagenConfig,
    vocabulary: &Vocabulary,
    extractor: &dyn FeatureExtractor,
) -> Result<SampleTriplet> {
    let seed = derive_seed(master_seed, "sample", attempt);
    let mut rng = stream_from_seed(seed);

    let object = vocabulary.objects[uniform_int(&mut rng, 0, vocabulary.objects.len() - 1)].clone();
    let texture = vocabulary.textures[uniform_int(&mut rng, 0, vocabulary.textures.len() - 1)].clone();
    let anomalies = vocabulary.anomalies_for(&object)?;
    let anomaly = anomalies[uniform_int(&mut rng, 0, anomalies.len() - 1)].clone();

    let spec = SceneSpec {
        object_tag: object.clone(),
        texture_tag: texture.clone(),
        seed: derive_seed(seed, "scene", 0),
        image_size: cfg.image_size,
    };
    let (normal, fg_real) = generate_normal(&spec, vocabulary)?;
    let fg_mask = if cfg.full_image_fg {
        Tensor::full(&[cfg.image_size, cfg.image_size], 1.0)
    } else {
        fg_real
    };

    let region = sample_region(&fg_mask, cfg.scaled_ranges(), &mut rng)?;
    let forced_fail = uniform(&mut rng, 0.0, 1.0) < cfg.forced_fail_prob;
    let amplitude = log_uniform(&mut rng, cfg.amplitude_min, cfg.amplitude_max);
    let anomalous = inpaint_defect(&normal, &region, &anomaly, amplitude, forced_fail, &mut rng)?;

    let m_d = feature_distance_map(extractor, &normal, &anomalous)?;
    let (mut accepted, distance, mask) =
        filter_and_mask(&m_d, cfg.threshold, cfg.image_size, cfg.image_size)?;
    if cfg.no_filter {
        accepted = true;
    }

    Ok(SampleTriplet {
        id: attempt,
        object,
        texture,
        anomaly,
        normal,
        anomalous,
        mask,
        fg_mask,
        region,
        distance,
        accepted,
        forced_fail,
        amplitude,
        seed,
    })
}

/// Generate attempts until `n` are accepted (budget 10·n). Returns every
/// attempt up to and including the one that yields the n-th acceptance,
/// in attempt order.
pub fn generate_triplets(
    n: usize,
    cfg: &DatagenConfig,
    vocabulary: &Vocabulary,
    extractor: &dyn FeatureExtractor,
    master_seed: u64,
) -> Result<Vec<SampleTriplet>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    cfg.validate()?;
    vocabulary.validate()?;
    let budget = 10 * n as u64;
    let workers = cfg.workers.max(1);
    let block = (workers * 8).max(16) as u64;

    let mut attempts: Vec<SampleTriplet> = Vec::new();
    let mut accepted = 0usize;
    let mut next = 0u64;
    while accepted < n && next < budget {
        let hi = (next + block).min(budget);
        let ids: Vec<u64> = (next..hi).collect();
        let mut results: Vec<Option<Result<SampleTriplet>>> = Vec::new();
        results.resize_with(ids.len(), || None);
        if workers <= 1 {
            for (slot, &id) in results.iter_mut().zip(&ids) {
                *slot = Some(generate_attempt(id, master_seed, cfg, vocabulary, extractor));
            }
        } else {
            std::thread::scope(|scope| {
                for (chunk_idx, chunk) in results.chunks_mut(ids.len().div_ceil(workers)).enumerate() {
                    let ids = &ids;
                    let base = chunk_idx * ids.len().div_ceil(workers);
                    scope.spawn(move || {
                        for (off, slot) in chunk.iter_mut().enumerate() {
                            let id = ids[base + off];
                            *slot = Some(generate_attempt(id, master_seed, cfg, vocabulary, extractor));
                        }
                    });
                }
            });
        }
        for result in results.into_iter().flatten() {
            let triplet = result?;
            let was_accepted = triplet.accepted;
            if accepted < n {
                attempts.push(triplet);
                if was_accepted {
                    accepted += 1;
                }
            }
        }
        next = hi;
    }
    if accepted < n {
        return Err(Error::Config(format!(
            "only {} of {} samples accepted within a {}-attempt budget; \
             threshold or amplitudes are mis-set",
            accepted, n, budget
        )));
    }
    Ok(attempts)
}

// ── stats and on-disk layout ─────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AreaStats {
    pub mean_pct: f64,
    pub min_pct: f64,
    pub max_pct: f64,
    /// counts per 1% bucket, final bucket open-ended
    pub histogram_pct: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenStats {
    pub requested: usize,
    pub attempts: usize,
    pub accepted: usize,
    pub rejection_rate: f64,
    pub forced_fail_attempts: usize,
    pub distinct_objects: usize,
    pub distinct_textures: usize,
    pub distinct_anomalies: usize,
    pub objects: BTreeMap<String, usize>,
    pub textures: BTreeMap<String, usize>,
    pub anomalies: BTreeMap<String, usize>,
    pub anomalous_area: AreaStats,
}

pub fn compute_stats(samples: &[SampleTriplet], requested: usize) -> GenStats {
    let mut objects = BTreeMap::new();
    let mut textures = BTreeMap::new();
    let mut anomalies = BTreeMap::new();
    let mut areas: Vec<f64> = Vec::new();
    let mut forced = 0usize;
    let mut accepted = 0usize;
    for s in samples {
        if s.forced_fail {
            forced += 1;
        }
        if !s.accepted {
            continue;
        }
        accepted += 1;
        *objects.entry(s.object.clone()).or_insert(0) += 1;
        *textures.entry(s.texture.clone()).or_insert(0) += 1;
        *anomalies.entry(s.anomaly.clone()).or_insert(0) += 1;
        let positives = s.mask.data().iter().filter(|&&v| v > 0.5).count();
        areas.push(positives as f64 / s.mask.numel() as f64 * 100.0);
    }
    let mut histogram = vec![0usize; 16];
    for &a in &areas {
        let bucket = (a.floor() as usize).min(histogram.len() - 1);
        histogram[bucket] += 1;
    }
    let area = AreaStats {
        mean_pct: if areas.is_empty() {
            0.0
        } else {
            areas.iter().sum::<f64>() / areas.len() as f64
        },
        min_pct: areas.iter().copied().fold(f64::INFINITY, f64::min).min(f64::INFINITY),
        max_pct: areas.iter().copied().fold(0.0, f64::max),
        histogram_pct: histogram,
    };
    GenStats {
        requested,
        attempts: samples.len(),
        accepted,
        rejection_rate: if samples.is_empty() {
            0.0
        } else {
            1.0 - accepted as f64 / samples.len() as f64
        },
        forced_fail_attempts: forced,
        distinct_objects: objects.len(),
        distinct_textures: textures.len(),
        distinct_anomalies: anomalies.len(),
        objects,
        textures,
        anomalies,
        anomalous_area: area,
    }
}

/// meta.jsonl row, one per attempt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaRow {
    pub id: String,
    pub object: String,
    pub texture: String,
    pub anomaly: String,
    pub region: RegionR,
    #[serde(rename = "D")]
    pub distance: f64,
    pub accepted: bool,
    pub forced_fail: bool,
    pub seed: u64,
}

pub fn sample_id(attempt: u64) -> String {
    format!("{:06}", attempt)
}

/// Write the dataset directory: meta.jsonl over all attempts, PNG images
/// for accepted samples, stats.json.
pub fn write_dataset(dir: &Path, samples: &[SampleTriplet], requested: usize) -> Result<GenStats> {
    fs::create_dir_all(dir.join("normal"))?;
    fs::create_dir_all(dir.join("anomalous"))?;
    fs::create_dir_all(dir.join("mask"))?;

    let mut meta = fs::File::create(dir.join("meta.jsonl"))?;
    for s in samples {
        let row = MetaRow {
            id: sample_id(s.id),
            object: s.object.clone(),
            texture: s.texture.clone(),
            anomaly: s.anomaly.clone(),
            region: s.region,
            distance: s.distance,
            accepted: s.accepted,
            forced_fail: s.forced_fail,
            seed: s.seed,
        };
        serde_json::to_writer(&mut meta, &row)?;
        meta.write_all(b"\n")?;
        if s.accepted {
            let id = sample_id(s.id);
            pngio::save_rgb(&dir.join("normal").join(format!("{id}.png")), &s.normal)?;
            pngio::save_rgb(&dir.join("anomalous").join(format!("{id}.png")), &s.anomalous)?;
            pngio::save_mask(&dir.join("mask").join(format!("{id}.png")), &s.mask)?;
        }
    }
    let stats = compute_stats(samples, requested);
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    Ok(stats)
}

/// An accepted triplet loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedTriplet {
    pub id: String,
    pub object: String,
    pub texture: String,
    pub anomaly: String,
    pub normal: Tensor,
    pub anomalous: Tensor,
    pub mask: Tensor,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedTriplet>> {
    let meta = fs::read_to_string(dir.join("meta.jsonl"))?;
    let mut out = Vec::new();
    for line in meta.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: MetaRow = serde_json::from_str(line)?;
        if !row.accepted {
            continue;
        }
        out.push(LoadedTriplet {
            normal: pngio::load_rgb(&dir.join("normal").join(format!("{}.png", row.id)))?,
            anomalous: pngio::load_rgb(&dir.join("anomalous").join(format!("{}.png", row.id)))?,
            mask: pngio::load_mask(&dir.join("mask").join(format!("{}.png", row.id)))?,
            id: row.id,
            object: row.object,
            texture: row.texture,
            anomaly: row.anomaly,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no accepted samples in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Guard for the train/eval split: object tag sets must not intersect.
pub fn assert_disjoint_splits(train: &[String], eval: &[String]) -> Result<()> {
    for t in train {
        if eval.contains(t) {
            return Err(Error::Config(format!(
                "data leakage: object tag '{}' present in both splits",
                t
            )));
        }
    }
    Ok(())
}
