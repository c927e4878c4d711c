//! Per-patient evaluation reports, fold splitting and cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::{predict_volume, InferError};
use crate::io::{read_json, write_json, IoError};
use crate::metrics::{evaluate_pair, MetricError};
use crate::network::ModelGraph;
use crate::train::{train_with_observer, EpochRecord, TrainConfig, TrainError};
use crate::volume::{Study, Target};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{patients} patients cannot be split into {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("duplicate patient id {0}")]
    DuplicateId(String),
    #[error("study {patient} has no {target} ground truth")]
    MissingMask { patient: String, target: Target },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

/// One CSV row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub patient_id: String,
    pub target: Target,
    pub dsc_percent: f64,
    /// Empty when the distance is undefined (empty prediction or mask).
    pub assd_mm: Option<f64>,
    pub flagged_missing: bool,
}

/// Mean ± population standard deviation per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub patients: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub assd_mean: Option<f64>,
    pub assd_std: Option<f64>,
    /// Patients whose ASSD is undefined and excluded from the mean.
    pub assd_missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: Option<usize>,
    pub rows: Vec<ReportRow>,
    pub summary: BTreeMap<Target, TargetSummary>,
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl FoldReport {
    /// Builds the report, computing aggregates from the rows.
    pub fn from_rows(fold_id: Option<usize>, rows: Vec<ReportRow>) -> Self {
        let targets: BTreeSet<Target> = rows.iter().map(|r| r.target).collect();
        let summary = targets
            .into_iter()
            .map(|t| {
                let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.target == t).collect();
                let dsc: Vec<f64> = mine.iter().map(|r| r.dsc_percent).collect();
                let assd: Vec<f64> = mine.iter().filter_map(|r| r.assd_mm).collect();
                let (dsc_mean, dsc_std) = mean_std(&dsc).unwrap_or((f64::NAN, f64::NAN));
                let a = mean_std(&assd);
                (
                    t,
                    TargetSummary {
                        patients: mine.len(),
                        dsc_mean,
                        dsc_std,
                        assd_mean: a.map(|x| x.0),
                        assd_std: a.map(|x| x.1),
                        assd_missing: mine.iter().filter(|r| r.flagged_missing).count(),
                    },
                )
            })
            .collect();
        FoldReport { fold_id, rows, summary }
    }

    /// Concatenates the rows of several folds into one pooled report.
    pub fn pooled(reports: &[FoldReport]) -> Self {
        FoldReport::from_rows(None, reports.iter().flat_map(|r| r.rows.clone()).collect())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "target", "dsc_percent", "assd_mm", "flagged_missing"])?;
        for r in &self.rows {
            w.write_record([
                r.patient_id.clone(),
                r.target.as_str().to_string(),
                format!("{}", r.dsc_percent),
                r.assd_mm.map(|v| format!("{v}")).unwrap_or_default(),
                r.flagged_missing.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        Ok(write_json(path.as_ref(), self)?)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Ok(read_json(path.as_ref())?)
    }
}

/// Shuffles ids with `seed` and cuts them into `k` contiguous folds whose
/// sizes differ by at most one (larger folds first).
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>, EvalError> {
    if k == 0 || ids.len() < k {
        return Err(EvalError::TooFewPatients {
            patients: ids.len(),
            folds: k,
        });
    }
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(EvalError::DuplicateId(id.clone()));
        }
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut it = shuffled.into_iter();
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(it.by_ref().take(size).collect());
    }
    Ok(folds)
}

/// Scores one patient's predictions against its masks.
pub fn score_study(
    patient_id: &str,
    truth: &Study,
    predicted: &BTreeMap<Target, crate::infer::Prediction>,
) -> Result<Vec<ReportRow>, EvalError> {
    predicted
        .iter()
        .map(|(t, p)| {
            let m = truth.mask(*t).ok_or_else(|| EvalError::MissingMask {
                patient: patient_id.to_string(),
                target: *t,
            })?;
            let (dsc_percent, assd_mm) = if m.is_empty_mask() && p.mask.is_empty_mask() {
                (100.0, None)
            } else {
                let r = evaluate_pair(m, &p.mask)?;
                (100.0 * r.dsc, r.assd_mm)
            };
            Ok(ReportRow {
                patient_id: patient_id.to_string(),
                target: *t,
                dsc_percent,
                assd_mm,
                flagged_missing: assd_mm.is_none(),
            })
        })
        .collect()
}

/// Predicts every study with a sliding window and scores each target.
pub fn evaluate(
    model: &ModelGraph<f32>,
    studies: &[Study],
    window: [usize; 3],
    overlap: f64,
    fold_id: Option<usize>,
) -> Result<FoldReport, EvalError> {
    let mut rows = Vec::new();
    for s in studies {
        for t in model.config().targets() {
            if s.mask(t).is_none() {
                return Err(EvalError::MissingMask {
                    patient: s.patient_id.clone(),
                    target: t,
                });
            }
        }
        let preds = predict_volume(model, s, window, overlap)?;
        rows.extend(score_study(&s.patient_id, s, &preds)?);
    }
    Ok(FoldReport::from_rows(fold_id, rows))
}

/// Study split of one fold: the held-out test fold, one validation patient
/// taken from the remaining patients and the rest for training.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub test: Vec<String>,
    pub validation: Vec<String>,
    pub train: Vec<String>,
}

/// Plans every fold; the validation patient is drawn with `seed + fold`.
pub fn plan_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldPlan>, EvalError> {
    let folds = kfold_split(ids, k, seed)?;
    Ok((0..k)
        .map(|f| {
            let mut rest: Vec<String> = folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != f)
                .flat_map(|(_, fold)| fold.clone())
                .collect();
            let validation = if rest.len() > 1 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + f as u64));
                let pick = rand::Rng::random_range(&mut rng, 0..rest.len());
                vec![rest.remove(pick)]
            } else {
                Vec::new()
            };
            FoldPlan {
                fold_id: f,
                test: folds[f].clone(),
                validation,
                train: rest,
            }
        })
        .collect())
}

fn select<'a>(studies: &'a [Study], ids: &[String]) -> Vec<Study> {
    let by_id: BTreeMap<&str, &'a Study> = studies.iter().map(|s| (s.patient_id.as_str(), s)).collect();
    ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
}

/// Trains and evaluates each fold in turn; `observer` receives
/// `(fold, epoch record)` for progress reporting.
pub fn cross_validate(
    cfg: &TrainConfig,
    studies: &[Study],
    k: usize,
    overlap: f64,
    observer: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<Vec<FoldReport>, EvalError> {
    let ids: Vec<String> = studies.iter().map(|s| s.patient_id.clone()).collect();
    let plans = plan_folds(&ids, k, cfg.seed)?;
    let mut reports = Vec::with_capacity(k);
    for plan in plans {
        let train = select(studies, &plan.train);
        let val = select(studies, &plan.validation);
        let test = select(studies, &plan.test);
        let outcome = train_with_observer(cfg, &train, &val, &mut |r| observer(plan.fold_id, r))?;
        reports.push(evaluate(&outcome.model, &test, cfg.sampler.size, overlap, Some(plan.fold_id))?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::Prediction;
    use crate::volume::{BinaryMask, Geometry, Gridded, Modality, Spacing, Volume};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:02}")).collect()
    }

    #[test]
    fn fold_sizes() {
        let folds = kfold_split(&ids(39), 5, 1).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![8, 8, 8, 8, 7]);
        let mut all: Vec<String> = folds.concat();
        all.sort();
        assert_eq!(all, ids(39));
        let singles = kfold_split(&ids(5), 5, 1).unwrap();
        assert!(singles.iter().all(|f| f.len() == 1));
        assert_eq!(kfold_split(&ids(39), 5, 1).unwrap(), folds);
        assert_ne!(kfold_split(&ids(39), 5, 2).unwrap(), folds);
        assert!(matches!(kfold_split(&ids(4), 5, 1), Err(EvalError::TooFewPatients { .. })));
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(kfold_split(&dup, 2, 0), Err(EvalError::DuplicateId(_))));
    }

    #[test]
    fn fold_plans_partition_patients() {
        let plans = plan_folds(&ids(12), 5, 3).unwrap();
        for p in &plans {
            assert_eq!(p.validation.len(), 1);
            let mut all: Vec<String> = [p.test.clone(), p.validation.clone(), p.train.clone()].concat();
            all.sort();
            assert_eq!(all, ids(12));
        }
    }

    fn mask(bits: &[u8], t: Target) -> BinaryMask {
        let g = Geometry::new([bits.len(), 1, 1], Spacing::isotropic(1.0).unwrap(), [0.0; 3]).unwrap();
        BinaryMask::new(g, t, bits.to_vec()).unwrap()
    }

    fn pred(bits: &[u8], t: Target) -> Prediction {
        let m = mask(bits, t);
        Prediction {
            probability: Volume::new(*m.geometry(), Modality::PROB, bits.iter().map(|&b| b as f32).collect()).unwrap(),
            mask: m,
        }
    }

    fn study(bits: &[u8]) -> Study {
        let m = mask(bits, Target::T2);
        let mut masks = BTreeMap::new();
        masks.insert(Target::T2, m.clone());
        let mut volumes = BTreeMap::new();
        volumes.insert(Modality::T2, Volume::new(*m.geometry(), Modality::T2, vec![0.0; bits.len()]).unwrap());
        Study {
            patient_id: "x".into(),
            volumes,
            masks,
        }
    }

    #[test]
    fn exact_and_empty_predictions() {
        let truth = study(&[0, 1, 1, 0]);
        let mut p = BTreeMap::new();
        p.insert(Target::T2, pred(&[0, 1, 1, 0], Target::T2));
        let rows = score_study("x", &truth, &p).unwrap();
        assert_eq!(rows[0].dsc_percent, 100.0);
        assert_eq!(rows[0].assd_mm, Some(0.0));
        assert!(!rows[0].flagged_missing);
        p.insert(Target::T2, pred(&[0, 0, 0, 0], Target::T2));
        let rows = score_study("x", &truth, &p).unwrap();
        assert_eq!(rows[0].dsc_percent, 0.0);
        assert_eq!(rows[0].assd_mm, None);
        assert!(rows[0].flagged_missing);
    }

    #[test]
    fn aggregates_and_roundtrip() {
        let rows = vec![
            ReportRow {
                patient_id: "a".into(),
                target: Target::T2,
                dsc_percent: 80.0,
                assd_mm: Some(2.0),
                flagged_missing: false,
            },
            ReportRow {
                patient_id: "b".into(),
                target: Target::T2,
                dsc_percent: 60.0,
                assd_mm: None,
                flagged_missing: true,
            },
            ReportRow {
                patient_id: "a".into(),
                target: Target::PET,
                dsc_percent: 70.0,
                assd_mm: Some(1.0),
                flagged_missing: false,
            },
        ];
        let r = FoldReport::from_rows(Some(2), rows);
        let t2 = &r.summary[&Target::T2];
        assert_eq!((t2.dsc_mean, t2.dsc_std), (70.0, 10.0));
        assert_eq!((t2.assd_mean, t2.assd_std, t2.assd_missing), (Some(2.0), Some(0.0), 1));
        let dir = tempfile::tempdir().unwrap();
        r.write_json(dir.path().join("r.json")).unwrap();
        let back = FoldReport::read_json(dir.path().join("r.json")).unwrap();
        assert_eq!(back, r);
        assert_eq!(FoldReport::from_rows(back.fold_id, back.rows.clone()), r);
        r.write_csv(dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "patient_id,target,dsc_percent,assd_mm,flagged_missing");
        assert_eq!(lines.next().unwrap(), "a,T2,80,2,false");
        assert_eq!(lines.next().unwrap(), "b,T2,60,,true");
    }
}
