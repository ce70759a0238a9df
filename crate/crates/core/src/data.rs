//! Synthetic multi-modal tumor phantoms and the dataset container.
//!
//! A phantom is an elliptical "brain" with (usually) a nested tumor:
//! an edema ellipse enclosing a core blob that splits into a necrotic
//! center and an enhancing rim, so the evaluation hierarchy
//! ET within TC within WT holds by construction. Four pseudo-modalities
//! get tissue-dependent intensities, a smooth multiplicative bias field,
//! and additive noise; everything outside the brain is exactly zero.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::{LabelMap, Mask};
use crate::tensor::Tensor;

pub const MODALITIES: usize = 4;
pub const MODALITY_NAMES: [&str; MODALITIES] = ["flair", "t1", "t1ce", "t2"];
pub const FLAIR: usize = 0;

/// One case: a 4-modality image stack, a label map over {0,1,2,4}, and
/// the ground-truth brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Modality-major planes, `MODALITIES * height * width` values.
    pub image: Vec<f64>,
    pub labels: LabelMap,
    pub brain: Mask,
}

impl VolumeSample {
    #[inline]
    pub fn intensity(&self, modality: usize, y: usize, x: usize) -> f64 {
        self.image[(modality * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set_intensity(&mut self, modality: usize, y: usize, x: usize, v: f64) {
        self.image[(modality * self.height + y) * self.width + x] = v;
    }

    pub fn has_tumor(&self) -> bool {
        self.labels.tumor_mask().any()
    }

    /// Count of tumor pixels over count of brain pixels.
    pub fn tumor_fraction(&self) -> f64 {
        let brain = self.brain.count();
        if brain == 0 {
            return 0.0;
        }
        self.labels.tumor_mask().count() as f64 / brain as f64
    }

    /// Validate the structural invariants enforced on read-back.
    pub fn validate(&self) -> Result<()> {
        if self.image.len() != MODALITIES * self.height * self.width {
            return Err(Error::Input(format!("sample {}: image plane size mismatch", self.id)));
        }
        if !self.labels.is_in_vocabulary() {
            return Err(Error::Input(format!("sample {}: label outside {{0,1,2,4}}", self.id)));
        }
        for y in 0..self.height {
            for x in 0..self.width {
                if self.labels.get(0, y, x) != 0 && !self.brain.get(0, y, x) {
                    return Err(Error::Input(format!(
                        "sample {}: nonzero label outside brain at ({y}, {x})",
                        self.id
                    )));
                }
            }
        }
        if !self.image.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("sample {}: non-finite intensity", self.id)));
        }
        Ok(())
    }
}

/// Stack samples into a [b, 4, h, w] input tensor.
pub fn to_input_tensor(samples: &[&VolumeSample]) -> Tensor {
    assert!(!samples.is_empty());
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * MODALITIES * h * w);
    for s in samples {
        assert_eq!((s.height, s.width), (h, w), "batched samples must share extents");
        data.extend_from_slice(&s.image);
    }
    Tensor::new([samples.len(), MODALITIES, h, w], data)
}

pub fn to_label_batch(samples: &[&VolumeSample]) -> LabelMap {
    let maps: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
    LabelMap::stack(&maps)
}

pub fn to_brain_batch(samples: &[&VolumeSample]) -> Mask {
    let masks: Vec<Mask> = samples.iter().map(|s| s.brain.clone()).collect();
    Mask::stack(&masks)
}

// ── Phantom generation ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    /// Squared normalized radius; <= 1 means inside.
    fn rho2(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        self.rho2(y, x) <= 1.0
    }
}

struct TumorGeometry {
    edema: Ellipse,
    core: Ellipse,
    necrosis_rho: f64,
}

fn draw_tumor_geometry(rng: &mut impl Rng, size: usize, brain: &Ellipse) -> TumorGeometry {
    let s = size as f64;
    let reach = 0.25 * brain.ry.min(brain.rx);
    let cy = brain.cy + rng.random_range(-reach..reach);
    let cx = brain.cx + rng.random_range(-reach..reach);
    let ry = (s * rng.random_range(0.08..0.15)).max(4.5);
    let rx = (s * rng.random_range(0.08..0.15)).max(4.5);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let edema = Ellipse { cy, cx, ry, rx, theta };
    let scale = rng.random_range(0.50..0.65);
    let off = 0.1 * ry.min(rx);
    let core = Ellipse {
        cy: cy + rng.random_range(-off..off),
        cx: cx + rng.random_range(-off..off),
        ry: (ry * scale).max(2.5),
        rx: (rx * scale).max(2.5),
        theta,
    };
    let necrosis_rho = rng.random_range(0.45..0.65);
    TumorGeometry { edema, core, necrosis_rho }
}

fn rasterize_labels(geom: &TumorGeometry, brain_mask: &Mask, h: usize, w: usize) -> LabelMap {
    let mut labels = LabelMap::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            if !brain_mask.get(0, y, x) || !geom.edema.contains(y, x) {
                continue;
            }
            let rho2 = geom.core.rho2(y, x);
            let label = if rho2 <= geom.necrosis_rho * geom.necrosis_rho {
                1
            } else if rho2 <= 1.0 {
                4
            } else {
                2
            };
            labels.set(0, y, x, label);
        }
    }
    labels
}

fn label_counts(labels: &LabelMap) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for &v in labels.data() {
        match v {
            1 => counts[0] += 1,
            2 => counts[1] += 1,
            4 => counts[2] += 1,
            _ => {}
        }
    }
    counts
}

/// Generate one phantom. Exactly reproducible for a fixed generator state;
/// tumor presence is decided with probability `q_tumor`.
pub fn generate_phantom(rng: &mut impl Rng, size: usize, q_tumor: f64) -> VolumeSample {
    assert!(size >= 32, "phantom size {size} too small for the nested geometry");
    let s = size as f64;
    let brain = Ellipse {
        cy: s * (0.5 + rng.random_range(-0.04..0.04)),
        cx: s * (0.5 + rng.random_range(-0.04..0.04)),
        ry: s * rng.random_range(0.33..0.42),
        rx: s * rng.random_range(0.33..0.42),
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let mut brain_mask = Mask::filled(1, size, size, false);
    for y in 0..size {
        for x in 0..size {
            if brain.contains(y, x) {
                brain_mask.set(0, y, x, true);
            }
        }
    }

    let with_tumor = rng.random::<f64>() < q_tumor;
    let mut labels = LabelMap::zeros(1, size, size);
    if with_tumor {
        let mut ok = false;
        for _ in 0..64 {
            let geom = draw_tumor_geometry(rng, size, &brain);
            let candidate = rasterize_labels(&geom, &brain_mask, size, size);
            if label_counts(&candidate).iter().all(|&c| c >= 3) {
                labels = candidate;
                ok = true;
                break;
            }
        }
        if !ok {
            // Deterministic fallback: centered disks always satisfy the
            // nesting as long as the brain is present.
            let edema = Ellipse { cy: brain.cy, cx: brain.cx, ry: 0.13 * s, rx: 0.13 * s, theta: 0.0 };
            let core = Ellipse { cy: brain.cy, cx: brain.cx, ry: 0.08 * s, rx: 0.08 * s, theta: 0.0 };
            labels = rasterize_labels(&TumorGeometry { edema, core, necrosis_rho: 0.55 }, &brain_mask, size, size);
        }
    }

    // Intensity model: per-modality base level, tissue shifts, smooth
    // multiplicative bias field, additive noise inside the brain.
    const BASE: [f64; MODALITIES] = [0.9, 1.0, 0.95, 1.05];
    // Shifts for labels 1 (necrosis), 2 (edema), 4 (enhancing): FLAIR and
    // T2 brighten the whole tumor, T1 darkens it, T1ce highlights the rim.
    const SHIFT: [[f64; 3]; MODALITIES] = [
        [0.55, 0.75, 0.60],
        [-0.45, -0.25, -0.10],
        [-0.35, -0.05, 0.85],
        [0.25, 0.55, 0.30],
    ];
    let noise = Normal::new(0.0, 0.05).expect("valid noise sigma");
    let mut image = vec![0.0; MODALITIES * size * size];
    for m in 0..MODALITIES {
        let amp = rng.random_range(0.0..0.12);
        let phase_y = rng.random_range(0.0..std::f64::consts::TAU);
        let phase_x = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                if !brain_mask.get(0, y, x) {
                    continue;
                }
                let shift = match labels.get(0, y, x) {
                    1 => SHIFT[m][0],
                    2 => SHIFT[m][1],
                    4 => SHIFT[m][2],
                    _ => 0.0,
                };
                let bias = 1.0
                    + amp
                        * (std::f64::consts::TAU * y as f64 / s + phase_y).sin()
                        * (std::f64::consts::TAU * x as f64 / s + phase_x).sin();
                let v = (BASE[m] + shift) * bias + noise.sample(rng);
                image[(m * size + y) * size + x] = v;
            }
        }
    }

    VolumeSample { id: String::new(), height: size, width: size, image, labels, brain: brain_mask }
}

/// Generate `count` phantoms with sequential ids.
pub fn generate_dataset(rng: &mut impl Rng, count: usize, size: usize, q_tumor: f64) -> Vec<VolumeSample> {
    (0..count)
        .map(|i| {
            let mut s = generate_phantom(rng, size, q_tumor);
            s.id = format!("case_{i:05}");
            s
        })
        .collect()
}

// ── Preprocessing ───────────────────────────────────────────────────

/// Z-score each modality over the brain pixels; everything outside the
/// brain becomes 0. A constant modality maps to all zeros.
pub fn normalize_intensity(sample: &VolumeSample) -> Result<VolumeSample> {
    let brain_count = sample.brain.count();
    if brain_count == 0 {
        return Err(Error::Input(format!("sample {}: empty brain mask", sample.id)));
    }
    let mut out = sample.clone();
    for m in 0..MODALITIES {
        let mut mean = 0.0;
        for y in 0..sample.height {
            for x in 0..sample.width {
                if sample.brain.get(0, y, x) {
                    mean += sample.intensity(m, y, x);
                }
            }
        }
        mean /= brain_count as f64;
        let mut var = 0.0;
        for y in 0..sample.height {
            for x in 0..sample.width {
                if sample.brain.get(0, y, x) {
                    let d = sample.intensity(m, y, x) - mean;
                    var += d * d;
                }
            }
        }
        let sigma = (var / brain_count as f64).sqrt().max(1e-8);
        for y in 0..sample.height {
            for x in 0..sample.width {
                let v = if sample.brain.get(0, y, x) {
                    (sample.intensity(m, y, x) - mean) / sigma
                } else {
                    0.0
                };
                out.set_intensity(m, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Pixels where all four raw modalities are exactly zero.
pub fn extract_nonbrain_mask(sample: &VolumeSample) -> Mask {
    let mut out = Mask::filled(1, sample.height, sample.width, false);
    for y in 0..sample.height {
        for x in 0..sample.width {
            if (0..MODALITIES).all(|m| sample.intensity(m, y, x) == 0.0) {
                out.set(0, y, x, true);
            }
        }
    }
    out
}

// ── Augmentation ────────────────────────────────────────────────────

fn rotate90_plane<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    // 90 degrees counterclockwise: out[w-1-x][y] = in[y][x],
    // i.e. out has w rows and h columns.
    let mut out = Vec::with_capacity(src.len());
    for oy in 0..w {
        for ox in 0..h {
            out.push(src[ox * w + (w - 1 - oy)]);
        }
    }
    out
}

fn flip_plane<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            out.push(src[y * w + (w - 1 - x)]);
        }
    }
    out
}

fn transform_sample(sample: &VolumeSample, quarter_turns: usize, flip: bool) -> VolumeSample {
    let mut image_planes: Vec<Vec<f64>> = (0..MODALITIES)
        .map(|m| sample.image[m * sample.height * sample.width..][..sample.height * sample.width].to_vec())
        .collect();
    let mut labels: Vec<u8> = sample.labels.data().to_vec();
    let mut brain: Vec<bool> = sample.brain.data().to_vec();
    let (mut h, mut w) = (sample.height, sample.width);
    for _ in 0..quarter_turns % 4 {
        for plane in &mut image_planes {
            *plane = rotate90_plane(plane, h, w);
        }
        labels = rotate90_plane(&labels, h, w);
        brain = rotate90_plane(&brain, h, w);
        std::mem::swap(&mut h, &mut w);
    }
    if flip {
        for plane in &mut image_planes {
            *plane = flip_plane(plane, h, w);
        }
        labels = flip_plane(&labels, h, w);
        brain = flip_plane(&brain, h, w);
    }
    VolumeSample {
        id: sample.id.clone(),
        height: h,
        width: w,
        image: image_planes.concat(),
        labels: LabelMap::new(1, h, w, labels),
        brain: Mask::new(1, h, w, brain),
    }
}

/// Random right-angle rotation (k uniform in 0..4) followed by a
/// horizontal flip with probability 1/2; image, labels, and mask share
/// the transform. Draw order: rotation first, then flip.
pub fn augment(sample: &VolumeSample, rng: &mut impl Rng) -> VolumeSample {
    let quarter_turns = rng.random_range(0..4usize);
    let flip = rng.random::<f64>() < 0.5;
    transform_sample(sample, quarter_turns, flip)
}

/// Drop cases without any tumor pixel (training split only, by contract
/// of the caller).
pub fn filter_tumorless(samples: Vec<VolumeSample>) -> Vec<VolumeSample> {
    samples.into_iter().filter(|s| s.has_tumor()).collect()
}

// ── Split ───────────────────────────────────────────────────────────

/// Disjoint 3:1:1 case-id split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then 3:1:1 by integer division (train gets 3n/5,
/// validation n/5, test the remainder).
pub fn split_dataset(ids: &[String], rng: &mut impl Rng) -> DatasetSplit {
    let mut shuffled: Vec<String> = ids.to_vec();
    // Fisher-Yates, explicit so the draw count is pinned.
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let n = shuffled.len();
    let n_train = n * 3 / 5;
    let n_val = n / 5;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    DatasetSplit { train: shuffled, val, test }
}

// ── Dataset container ───────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"CUNS";
pub const SPLIT_DIRS: [&str; 3] = ["train", "val", "test"];

/// Serialize one case: magic `CUNS`, length-prefixed id, u32 extents,
/// f32 LE modality planes, label bytes, mask bytes.
pub fn sample_to_bytes(sample: &VolumeSample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(sample.id.len() as u32).to_le_bytes());
    out.extend_from_slice(sample.id.as_bytes());
    out.extend_from_slice(&(sample.height as u32).to_le_bytes());
    out.extend_from_slice(&(sample.width as u32).to_le_bytes());
    for v in &sample.image {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(sample.labels.data());
    out.extend(sample.brain.data().iter().map(|&b| b as u8));
    out
}

pub fn sample_from_bytes(buf: &[u8]) -> Result<VolumeSample> {
    let mut offset = 0usize;
    let fail = |offset: usize, reason: String| Error::Format { offset: offset as u64, reason };
    let take = |offset: &mut usize, n: usize| -> Result<&[u8]> {
        if *offset + n > buf.len() {
            return Err(fail(*offset, format!("truncated: wanted {} bytes, {} remain", n, buf.len() - *offset)));
        }
        let s = &buf[*offset..*offset + n];
        *offset += n;
        Ok(s)
    };
    let magic = take(&mut offset, 4)?;
    if magic != MAGIC {
        return Err(fail(0, format!("bad magic {magic:?}, expected CUNS")));
    }
    let id_len = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize;
    let id_bytes = take(&mut offset, id_len)?;
    let id = std::str::from_utf8(id_bytes)
        .map_err(|_| fail(offset - id_len, "case id is not UTF-8".into()))?
        .to_string();
    let height = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize;
    let plane = height * width;
    let image_bytes = take(&mut offset, MODALITIES * plane * 4)?;
    let image: Vec<f64> = image_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let label_offset = offset;
    let label_bytes = take(&mut offset, plane)?.to_vec();
    let mask_offset = offset;
    let mask_bytes = take(&mut offset, plane)?;
    if offset != buf.len() {
        return Err(fail(offset, format!("{} trailing bytes after payload", buf.len() - offset)));
    }
    for (i, &b) in mask_bytes.iter().enumerate() {
        if b > 1 {
            return Err(fail(mask_offset + i, format!("mask byte {b} is not 0/1")));
        }
    }
    for (i, &l) in label_bytes.iter().enumerate() {
        if !LabelMap::VOCABULARY.contains(&l) {
            return Err(fail(label_offset + i, format!("label {l} outside {{0,1,2,4}}")));
        }
    }
    let sample = VolumeSample {
        id,
        height,
        width,
        image,
        labels: LabelMap::new(1, height, width, label_bytes),
        brain: Mask::new(1, height, width, mask_bytes.iter().map(|&b| b != 0).collect()),
    };
    sample.validate()?;
    Ok(sample)
}

/// Write one case atomically (temp file + rename).
pub fn write_sample(dir: impl AsRef<Path>, sample: &VolumeSample) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.cuns", sample.id));
    let tmp = dir.join(format!("{}.cuns.tmp", sample.id));
    fs::write(&tmp, sample_to_bytes(sample))?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

pub fn write_dataset(dir: impl AsRef<Path>, samples: &[VolumeSample]) -> Result<()> {
    for s in samples {
        write_sample(&dir, s)?;
    }
    Ok(())
}

/// Read every `.cuns` case in a directory, ordered by file name.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<VolumeSample>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "cuns").unwrap_or(false))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let buf = fs::read(&p)?;
        let sample = sample_from_bytes(&buf)
            .map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
        out.push(sample);
    }
    Ok(out)
}

/// Generate, split 3:1:1, and persist a dataset under
/// `out/{train,val,test}/`. Returns the split.
pub fn synthesize_to_dir(
    out: impl AsRef<Path>,
    count: usize,
    size: usize,
    seed: u64,
    q_tumor: f64,
) -> Result<DatasetSplit> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samples = generate_dataset(&mut rng, count, size, q_tumor);
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_dataset(&ids, &mut rng);
    let out = out.as_ref();
    for (dir, members) in SPLIT_DIRS.iter().zip([&split.train, &split.val, &split.test]) {
        let subset: Vec<VolumeSample> = samples
            .iter()
            .filter(|s| members.contains(&s.id))
            .cloned()
            .collect();
        write_dataset(out.join(dir), &subset)?;
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(&mut ChaCha8Rng::seed_from_u64(5), 64, 0.7);
        let b = generate_phantom(&mut ChaCha8Rng::seed_from_u64(5), 64, 0.7);
        assert_eq!(a, b);
        let c = generate_phantom(&mut ChaCha8Rng::seed_from_u64(6), 64, 0.7);
        assert_ne!(a, c);
    }

    #[test]
    fn phantom_labels_nest_and_stay_in_brain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut saw_tumor = false;
        for _ in 0..50 {
            let s = generate_phantom(&mut rng, 64, 0.8);
            s.validate().unwrap();
            if s.has_tumor() {
                saw_tumor = true;
                let counts = {
                    let mut c = [0usize; 3];
                    for &v in s.labels.data() {
                        match v {
                            1 => c[0] += 1,
                            2 => c[1] += 1,
                            4 => c[2] += 1,
                            _ => {}
                        }
                    }
                    c
                };
                assert!(counts.iter().all(|&c| c > 0), "all three tissue labels present: {counts:?}");
            }
        }
        assert!(saw_tumor);
    }

    #[test]
    fn tumor_stays_minor_within_brain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst: f64 = 0.0;
        let mut total_tumor = 0usize;
        let mut total_brain = 0usize;
        for _ in 0..200 {
            let s = generate_phantom(&mut rng, 64, 1.0);
            worst = worst.max(s.tumor_fraction());
            total_tumor += s.labels.tumor_mask().count();
            total_brain += s.brain.count();
        }
        assert!(worst <= 0.25, "worst per-case tumor fraction {worst}");
        let overall = total_tumor as f64 / total_brain as f64;
        assert!(overall <= 0.25, "aggregate tumor fraction {overall}");
    }

    #[test]
    fn normalization_zero_mean_unit_std_and_idempotent() {
        let s = generate_phantom(&mut ChaCha8Rng::seed_from_u64(9), 64, 1.0);
        let n = normalize_intensity(&s).unwrap();
        for m in 0..MODALITIES {
            let brain_px: Vec<f64> = (0..64)
                .flat_map(|y| (0..64).map(move |x| (y, x)))
                .filter(|&(y, x)| s.brain.get(0, y, x))
                .map(|(y, x)| n.intensity(m, y, x))
                .collect();
            let mean: f64 = brain_px.iter().sum::<f64>() / brain_px.len() as f64;
            let var: f64 = brain_px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / brain_px.len() as f64;
            assert!(mean.abs() <= 1e-6, "modality {m} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-6, "modality {m} std {}", var.sqrt());
            // Outside the brain everything is zero.
            for y in 0..64 {
                for x in 0..64 {
                    if !s.brain.get(0, y, x) {
                        assert_eq!(n.intensity(m, y, x), 0.0);
                    }
                }
            }
        }
        let twice = normalize_intensity(&n).unwrap();
        for (a, b) in n.image.iter().zip(&twice.image) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_modality_normalizes_to_zero() {
        let mut s = generate_phantom(&mut ChaCha8Rng::seed_from_u64(10), 64, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                if s.brain.get(0, y, x) {
                    s.set_intensity(0, y, x, 3.5);
                }
            }
        }
        let n = normalize_intensity(&s).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(n.intensity(0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn normalize_rejects_empty_brain() {
        let s = VolumeSample {
            id: "empty".into(),
            height: 4,
            width: 4,
            image: vec![0.0; MODALITIES * 16],
            labels: LabelMap::zeros(1, 4, 4),
            brain: Mask::filled(1, 4, 4, false),
        };
        assert!(matches!(normalize_intensity(&s), Err(Error::Input(_))));
    }

    #[test]
    fn nonbrain_mask_agrees_with_generator_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut disagree = 0usize;
        let mut total = 0usize;
        for _ in 0..100 {
            let s = generate_phantom(&mut rng, 64, 0.7);
            let nonbrain = extract_nonbrain_mask(&s);
            for y in 0..64 {
                for x in 0..64 {
                    total += 1;
                    if nonbrain.get(0, y, x) == s.brain.get(0, y, x) {
                        disagree += 1;
                    }
                }
            }
        }
        let agreement = 1.0 - disagree as f64 / total as f64;
        assert!(agreement >= 0.999, "nonbrain/brain agreement {agreement}");
    }

    #[test]
    fn augment_identity_and_group_closure() {
        let s = generate_phantom(&mut ChaCha8Rng::seed_from_u64(12), 64, 1.0);
        let id = transform_sample(&s, 0, false);
        assert_eq!(s, id);
        let four = transform_sample(&transform_sample(&transform_sample(&transform_sample(&s, 1, false), 1, false), 1, false), 1, false);
        assert_eq!(s, four);
        let double_flip = transform_sample(&transform_sample(&s, 0, true), 0, true);
        assert_eq!(s, double_flip);
    }

    #[test]
    fn augment_preserves_class_counts_and_commutes() {
        let s = generate_phantom(&mut ChaCha8Rng::seed_from_u64(13), 64, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..8 {
            let a = augment(&s, &mut rng);
            let mut before = [0usize; 5];
            let mut after = [0usize; 5];
            for &v in s.labels.data() {
                before[v as usize] += 1;
            }
            for &v in a.labels.data() {
                after[v as usize] += 1;
            }
            assert_eq!(before, after);
            assert_eq!(s.brain.count(), a.brain.count());
            // Image and labels moved together: tumor pixels keep their
            // FLAIR brightening relative to normal brain.
            a.validate().unwrap();
        }
    }

    #[test]
    fn rotation_moves_a_marked_pixel_correctly() {
        let mut s = generate_phantom(&mut ChaCha8Rng::seed_from_u64(15), 64, 0.0);
        s.set_intensity(0, 0, 1, 99.0);
        let r = transform_sample(&s, 1, false);
        // 90 degrees CCW sends (y=0, x=1) to (y = w-1-x = 62, x = 0).
        assert_eq!(r.intensity(0, 62, 0), 99.0);
    }

    #[test]
    fn filter_keeps_only_tumor_bearing() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let samples = generate_dataset(&mut rng, 30, 64, 0.5);
        let with_tumor = samples.iter().filter(|s| s.has_tumor()).count();
        let filtered = filter_tumorless(samples);
        assert_eq!(filtered.len(), with_tumor);
        assert!(filtered.iter().all(|s| s.has_tumor()));
    }

    #[test]
    fn split_ratios() {
        let ids: Vec<String> = (0..210).map(|i| format!("case_{i:05}")).collect();
        let split = split_dataset(&ids, &mut ChaCha8Rng::seed_from_u64(17));
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (126, 42, 42));

        let ids10: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let split10 = split_dataset(&ids10, &mut ChaCha8Rng::seed_from_u64(18));
        assert_eq!((split10.train.len(), split10.val.len(), split10.test.len()), (6, 2, 2));

        // Partition: disjoint and exhaustive.
        let mut all: Vec<String> = split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
    }

    #[test]
    fn sample_roundtrip_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for i in 0..10 {
            let mut s = generate_phantom(&mut rng, 32, 0.7);
            s.id = format!("rt_{i}");
            let bytes = sample_to_bytes(&s);
            let back = sample_from_bytes(&bytes).unwrap();
            assert_eq!(sample_to_bytes(&back), bytes);
        }
    }

    #[test]
    fn corrupt_and_truncated_files_report_offsets() {
        let mut s = generate_phantom(&mut ChaCha8Rng::seed_from_u64(20), 32, 0.7);
        s.id = "bad".into();
        let bytes = sample_to_bytes(&s);

        let mut wrong_magic = bytes.clone();
        wrong_magic[2] = b'X';
        match sample_from_bytes(&wrong_magic) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        match sample_from_bytes(&bytes[..bytes.len() / 2]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut extra = bytes.clone();
        extra.push(7);
        assert!(matches!(sample_from_bytes(&extra), Err(Error::Format { .. })));

        // Out-of-vocabulary label byte.
        let mut bad_label = bytes.clone();
        let label_start = bytes.len() - 2 * 32 * 32;
        bad_label[label_start] = 3;
        assert!(matches!(sample_from_bytes(&bad_label), Err(Error::Format { .. })));
    }

    #[test]
    fn directory_roundtrip_and_split_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let split = synthesize_to_dir(dir.path(), 10, 32, 123, 0.7).unwrap();
        assert_eq!(split.train.len(), 6);
        let train = read_dataset(dir.path().join("train")).unwrap();
        assert_eq!(train.len(), 6);
        let mut ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
        let mut want = split.train.clone();
        ids.sort();
        want.sort();
        assert_eq!(ids, want);

        // Same seed reproduces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        synthesize_to_dir(dir2.path(), 10, 32, 123, 0.7).unwrap();
        for sub in SPLIT_DIRS {
            let a_dir = dir.path().join(sub);
            let mut names: Vec<_> = std::fs::read_dir(&a_dir)
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            for name in names {
                let a = std::fs::read(a_dir.join(&name)).unwrap();
                let b = std::fs::read(dir2.path().join(sub).join(&name)).unwrap();
                assert_eq!(a, b, "bytes differ for {name:?}");
            }
        }
    }
}
