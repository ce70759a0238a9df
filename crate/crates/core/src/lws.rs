//! Loss-weighted sampling: four-region image partition, contour band
//! extraction, per-region sampling probabilities, the sample matrix W,
//! and assembly of the total training loss.
//!
//! Region meaning follows the training-sample partition: S1 black
//! background, S2 normal brain, S3 tumor interior, S4 tumor contour band.
//! W carries entries in {0, 1, alpha}; zero-weight pixels contribute
//! neither loss nor gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::{LabelMap, Mask};
use crate::tensor::{Graph, Tensor, Var};

/// Disjoint cover of the image by the four sampling regions.
#[derive(Debug, Clone)]
pub struct RegionPartition {
    pub s1: Mask,
    pub s2: Mask,
    pub s3: Mask,
    pub s4: Mask,
}

impl RegionPartition {
    pub fn counts(&self) -> [usize; 4] {
        [self.s1.count(), self.s2.count(), self.s3.count(), self.s4.count()]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.s1.shape()
    }
}

/// Per-region sampling probabilities plus the contour weight alpha.
///
/// `p2` is optional: `None` means "derive from the balance equation per
/// batch" and must be resolved before sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub p1: f64,
    pub p2: Option<f64>,
    pub p3: f64,
    pub p4: f64,
    pub alpha: f64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [Some(self.p1), self.p2, Some(self.p3), Some(self.p4)];
        for (i, p) in probs.iter().enumerate() {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Contract(format!("p{} = {} outside [0, 1]", i + 1, p)));
                }
            }
        }
        if self.alpha.is_nan() || self.alpha < 1.0 {
            return Err(Error::Contract(format!("alpha = {} must be >= 1", self.alpha)));
        }
        Ok(())
    }

    pub fn with_p2(&self, p2: f64) -> SamplingConfig {
        SamplingConfig { p2: Some(p2), ..self.clone() }
    }
}

/// Stage configurations: the first U-Net samples the normal-brain region
/// down to the balance equation and up-weights the contour band by 2;
/// the second U-Net only learns inside the tumor (p2 = 0, alpha = 1).
pub fn stage_sampling_configs() -> (SamplingConfig, SamplingConfig) {
    let unet1 = SamplingConfig { p1: 0.0, p2: None, p3: 1.0, p4: 1.0, alpha: 2.0 };
    let unet2 = SamplingConfig { p1: 0.0, p2: Some(0.0), p3: 1.0, p4: 1.0, alpha: 1.0 };
    (unet1, unet2)
}

/// Per-pixel loss weights with entries in {0, 1, alpha}.
#[derive(Debug, Clone)]
pub struct SampleMatrix {
    batch: usize,
    height: usize,
    width: usize,
    w: Vec<f64>,
}

impl SampleMatrix {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> f64 {
        self.w[(b * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.w
    }

    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.w {
            acc += *v;
        }
        acc
    }

    pub fn count_nonzero(&self) -> usize {
        self.w.iter().filter(|v| **v != 0.0).count()
    }

    /// As a [b, 1, h, w] weight tensor for the loss.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.batch, 1, self.height, self.width], self.w.clone())
    }
}

/// Two-sided contour band: every pixel within Chebyshev distance
/// ceil(width/2) of the opposite region (tumor pixels near background and
/// background pixels near tumor). Width 0 gives an empty band.
pub fn extract_contour_band(tumor: &Mask, width: usize) -> Mask {
    let (b, h, w) = tumor.shape();
    let mut out = Mask::filled(b, h, w, false);
    let r = width.div_ceil(2);
    if r == 0 {
        return out;
    }
    for n in 0..b {
        for y in 0..h {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            for x in 0..w {
                let v = tumor.get(n, y, x);
                let x0 = x.saturating_sub(r);
                let x1 = (x + r).min(w - 1);
                'scan: for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        if tumor.get(n, yy, xx) != v {
                            out.set(n, y, x, true);
                            break 'scan;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Split the image into S1..S4. The band is clipped to the brain; tumor
/// pixels inside the band leave S3, normal-brain pixels inside it leave S2.
pub fn partition_regions(labels: &LabelMap, brain: &Mask, contour_width: usize) -> Result<RegionPartition> {
    let (b, h, w) = labels.shape();
    if brain.shape() != (b, h, w) {
        return Err(Error::Contract(format!(
            "labels shape {:?} != brain mask shape {:?}",
            labels.shape(),
            brain.shape()
        )));
    }
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                if labels.get(n, y, x) != 0 && !brain.get(n, y, x) {
                    return Err(Error::Input(format!(
                        "nonzero label {} outside brain mask at ({n}, {y}, {x})",
                        labels.get(n, y, x)
                    )));
                }
            }
        }
    }
    let tumor = labels.tumor_mask();
    let band = extract_contour_band(&tumor, contour_width);
    let s4 = band.intersect(brain);
    let s3 = tumor.minus(&s4);
    let s2 = brain.minus(&tumor).minus(&s4);
    let s1 = brain.complement();
    Ok(RegionPartition { s1, s2, s3, s4 })
}

/// Balance equation for the normal-brain sampling probability:
/// p2 * N_S2 = beta * p3 * N_S3, clamped to 1. An empty S2 yields 0.
pub fn compute_p2(beta: f64, p3: f64, n_s3: usize, n_s2: usize) -> f64 {
    if n_s2 == 0 {
        log::warn!("degenerate slice: S2 is empty, using p2 = 0");
        return 0.0;
    }
    (beta * p3 * n_s3 as f64 / n_s2 as f64).min(1.0)
}

/// Outcome of the expected-coverage heuristic beta * p2 * epochs >= 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CoverageCheck {
    pub expected: f64,
    pub pass: bool,
}

/// Expected number of times a normal-brain pixel joins the loss across
/// training; warns (does not fail) when below one.
pub fn coverage_check(beta: f64, p2: f64, epochs: usize) -> CoverageCheck {
    assert!(epochs >= 1, "coverage check needs at least one epoch");
    let expected = beta * p2 * epochs as f64;
    let pass = expected >= 1.0;
    if !pass {
        log::warn!(
            "expected sampling coverage {:.3} < 1 (beta {}, p2 {}, epochs {}); some pixels may never train",
            expected,
            beta,
            p2,
            epochs
        );
    }
    CoverageCheck { expected, pass }
}

/// Draw the sample matrix: each pixel of region i is kept independently
/// with probability p_i, at weight 1 for S1..S3 and alpha for S4.
///
/// Exactly one uniform draw is consumed per pixel in row-major order, so
/// the stream stays aligned regardless of the region layout.
pub fn sample_matrix(partition: &RegionPartition, cfg: &SamplingConfig, rng: &mut impl Rng) -> SampleMatrix {
    let p2 = cfg.p2.expect("sample_matrix requires a resolved p2");
    cfg.validate().expect("invalid sampling config");
    let (b, h, w) = partition.shape();
    let mut out = vec![0.0; b * h * w];
    let mut idx = 0;
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (p, weight) = if partition.s4.get(n, y, x) {
                    (cfg.p4, cfg.alpha)
                } else if partition.s3.get(n, y, x) {
                    (cfg.p3, 1.0)
                } else if partition.s2.get(n, y, x) {
                    (p2, 1.0)
                } else {
                    (cfg.p1, 1.0)
                };
                let u: f64 = rng.random();
                if u < p {
                    out[idx] = weight;
                }
                idx += 1;
            }
        }
    }
    SampleMatrix { batch: b, height: h, width: w, w: out }
}

/// One-hot whole-tumor target: channel 0 background, channel 1 tumor.
pub fn binary_tumor_target(labels: &LabelMap) -> Tensor {
    let (b, h, w) = labels.shape();
    let mut t = Tensor::zeros([b, 2, h, w]);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let ch = if labels.get(n, y, x) != 0 { 1 } else { 0 };
                t.set(n, ch, y, x, 1.0);
            }
        }
    }
    t
}

/// One-hot substructure target over channels [0, 1, 2, 4]; contour-band
/// pixels outside the tumor carry label 0 and land on the background
/// channel.
pub fn substructure_target(labels: &LabelMap) -> Tensor {
    let (b, h, w) = labels.shape();
    let mut t = Tensor::zeros([b, 4, h, w]);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let ch = match labels.get(n, y, x) {
                    0 => 0,
                    1 => 1,
                    2 => 2,
                    4 => 3,
                    other => panic!("label {other} outside vocabulary {{0,1,2,4}}"),
                };
                t.set(n, ch, y, x, 1.0);
            }
        }
    }
    t
}

/// Total loss: l1 + l2 + omega * sum(aux) + lambda * psi with
/// psi = sum of squared parameter values.
///
/// When weight decay is applied inside the optimizer instead, pass
/// lambda = 0 to avoid double regularization.
pub fn total_loss(g: &mut Graph, l1: Var, l2: Var, aux: &[Var], omega: f64, lambda: f64, params: &[Var]) -> Var {
    let mut total = g.elementwise_add(l1, l2);
    if !aux.is_empty() {
        let mut aux_sum = aux[0];
        for a in &aux[1..] {
            aux_sum = g.elementwise_add(aux_sum, *a);
        }
        let scaled = g.scale(aux_sum, omega);
        total = g.elementwise_add(total, scaled);
    }
    if lambda != 0.0 && !params.is_empty() {
        let mut psi = g.sum_squares(params[0]);
        for p in &params[1..] {
            let s = g.sum_squares(*p);
            psi = g.elementwise_add(psi, s);
        }
        let reg = g.scale(psi, lambda);
        total = g.elementwise_add(total, reg);
    }
    total
}
