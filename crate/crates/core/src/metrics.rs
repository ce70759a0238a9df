//! Dice, sensitivity, and specificity over the three nested evaluation
//! regions (whole tumor, tumor core, enhancing tumor), with per-case and
//! aggregate reporting as CSV and JSON.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{LabelMap, Mask};

/// Nested evaluation masks derived from a label map: WT = {1,2,4},
/// TC = {1,4}, ET = {4}.
#[derive(Debug, Clone)]
pub struct EvalRegionMasks {
    pub wt: Mask,
    pub tc: Mask,
    pub et: Mask,
}

pub const REGION_NAMES: [&str; 3] = ["wt", "tc", "et"];
pub const METRIC_NAMES: [&str; 3] = ["dice", "sens", "spec"];

pub fn region_masks(labels: &LabelMap) -> Result<EvalRegionMasks> {
    if !labels.is_in_vocabulary() {
        let bad = labels.data().iter().find(|v| !LabelMap::VOCABULARY.contains(v)).unwrap();
        return Err(Error::Input(format!("label {bad} outside vocabulary {{0,1,2,4}}")));
    }
    Ok(EvalRegionMasks {
        wt: labels.mask_where(|v| v == 1 || v == 2 || v == 4),
        tc: labels.mask_where(|v| v == 1 || v == 4),
        et: labels.mask_where(|v| v == 4),
    })
}

fn confusion(p: &Mask, t: &Mask) -> (usize, usize, usize, usize) {
    assert_eq!(p.shape(), t.shape(), "prediction/truth mask shape mismatch");
    let (mut tp, mut fp, mut fne, mut tn) = (0, 0, 0, 0);
    for (pv, tv) in p.data().iter().zip(t.data()) {
        match (pv, tv) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fne, tn)
}

/// Dice = 2|P1 ^ T1| / (|P1| + |T1|). Both sides empty scores 1.0.
pub fn dice(p: &Mask, t: &Mask) -> Option<f64> {
    let (tp, fp, fne, _) = confusion(p, t);
    let denom = 2 * tp + fp + fne;
    if denom == 0 {
        return Some(1.0);
    }
    Some(2.0 * tp as f64 / denom as f64)
}

/// Sensitivity = |P1 ^ T1| / |T1|. Empty truth with empty prediction
/// scores 1.0; empty truth with a nonempty prediction is undefined.
pub fn sensitivity(p: &Mask, t: &Mask) -> Option<f64> {
    let (tp, fp, fne, _) = confusion(p, t);
    if tp + fne == 0 {
        return if fp == 0 { Some(1.0) } else { None };
    }
    Some(tp as f64 / (tp + fne) as f64)
}

/// Specificity = |P0 ^ T0| / |T0|. Empty negative truth with an empty
/// negative prediction scores 1.0; otherwise undefined.
pub fn specificity(p: &Mask, t: &Mask) -> Option<f64> {
    let (_, fp, fne, tn) = confusion(p, t);
    if tn + fp == 0 {
        return if fne == 0 { Some(1.0) } else { None };
    }
    Some(tn as f64 / (tn + fp) as f64)
}

/// Dice/sensitivity/specificity for one region.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegionScores {
    pub dice: Option<f64>,
    pub sens: Option<f64>,
    pub spec: Option<f64>,
}

impl RegionScores {
    pub fn compute(p: &Mask, t: &Mask) -> RegionScores {
        RegionScores { dice: dice(p, t), sens: sensitivity(p, t), spec: specificity(p, t) }
    }

    fn get(&self, metric: usize) -> Option<f64> {
        [self.dice, self.sens, self.spec][metric]
    }
}

/// Scores of a single case over the three evaluation regions.
#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub id: String,
    pub wt: RegionScores,
    pub tc: RegionScores,
    pub et: RegionScores,
}

impl CaseReport {
    pub fn compute(id: impl Into<String>, prediction: &LabelMap, truth: &LabelMap) -> Result<CaseReport> {
        let p = region_masks(prediction)?;
        let t = region_masks(truth)?;
        Ok(CaseReport {
            id: id.into(),
            wt: RegionScores::compute(&p.wt, &t.wt),
            tc: RegionScores::compute(&p.tc, &t.tc),
            et: RegionScores::compute(&p.et, &t.et),
        })
    }

    fn region(&self, region: usize) -> &RegionScores {
        [&self.wt, &self.tc, &self.et][region]
    }
}

/// How undefined per-case values enter the aggregate means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UndefinedPolicy {
    /// Drop undefined cases from the mean and report how many were dropped.
    #[default]
    Exclude,
    /// Score undefined cases as zero.
    CountAsZero,
}

/// Mean of one metric over the cases where it was defined.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricMean {
    pub mean: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

/// Per-case rows plus per-region/per-metric means.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetReport {
    pub cases: Vec<CaseReport>,
    /// `means[region][metric]`, regions ordered wt/tc/et, metrics
    /// ordered dice/sens/spec.
    pub means: [[MetricMean; 3]; 3],
}

/// Evaluate matched prediction/truth lists into a report table.
pub fn evaluate_dataset(
    ids: &[String],
    predictions: &[LabelMap],
    truths: &[LabelMap],
    policy: UndefinedPolicy,
) -> Result<DatasetReport> {
    if predictions.len() != truths.len() || ids.len() != truths.len() {
        return Err(Error::Input(format!(
            "case list lengths differ: {} ids, {} predictions, {} truths",
            ids.len(),
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("cannot evaluate an empty case list".into()));
    }
    let mut cases = Vec::with_capacity(ids.len());
    for ((id, p), t) in ids.iter().zip(predictions).zip(truths) {
        cases.push(CaseReport::compute(id.clone(), p, t)?);
    }
    let mut means = [[MetricMean { mean: None, defined: 0, undefined: 0 }; 3]; 3];
    for (r, row) in means.iter_mut().enumerate() {
        for (m, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut defined = 0;
            let mut undefined = 0;
            for case in &cases {
                match case.region(r).get(m) {
                    Some(v) => {
                        acc += v;
                        defined += 1;
                    }
                    None => {
                        undefined += 1;
                        if policy == UndefinedPolicy::CountAsZero {
                            defined += 1;
                        }
                    }
                }
            }
            *cell = MetricMean {
                mean: if defined > 0 { Some(acc / defined as f64) } else { None },
                defined,
                undefined,
            };
        }
    }
    Ok(DatasetReport { cases, means })
}

impl DatasetReport {
    pub fn mean(&self, region: &str, metric: &str) -> Option<f64> {
        let r = REGION_NAMES.iter().position(|n| *n == region)?;
        let m = METRIC_NAMES.iter().position(|n| *n == metric)?;
        self.means[r][m].mean
    }

    /// CSV rows: case id then wt_dice, wt_sens, wt_spec, tc_dice, tc_sens,
    /// tc_spec, et_dice, et_sens, et_spec. Undefined cells are empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["case".to_string()];
        for region in REGION_NAMES {
            for metric in METRIC_NAMES {
                header.push(format!("{region}_{metric}"));
            }
        }
        wtr.write_record(&header).map_err(csv_err)?;
        for case in &self.cases {
            let mut row = vec![case.id.clone()];
            for r in 0..3 {
                for m in 0..3 {
                    row.push(match case.region(r).get(m) {
                        Some(v) => format!("{v}"),
                        None => String::new(),
                    });
                }
            }
            wtr.write_record(&row).map_err(csv_err)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv write failed: {e}"))
}
