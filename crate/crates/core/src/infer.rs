//! Whole-volume inference by overlapping sliding windows.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::network::{ModelError, ModelGraph};
use crate::tensor::Tensor;
use crate::train::{model_inputs, TrainError};
use crate::volume::{BinaryMask, Modality, Study, Target, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("study {patient} has no {modality} volume")]
    MissingModality { patient: String, modality: String },
    #[error("overlap {0} must lie in [0, 1)")]
    BadOverlap(f64),
    #[error("window {0:?} must be positive on every axis")]
    BadWindow([usize; 3]),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Probability map (modality `PROB`) and thresholded mask of one target.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probability: Volume,
    pub mask: BinaryMask,
}

/// Window corners along one axis of length `n` (already at least `w`).
pub fn window_starts(n: usize, w: usize, overlap: f64) -> Vec<usize> {
    if n <= w {
        return vec![0];
    }
    let stride = ((w as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + w < n).collect();
    starts.push(n - w);
    starts.dedup();
    starts
}

fn reflect(k: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = k % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads every channel at the high end of each axis up to `dims`.
fn pad_tensor(t: &Tensor<f32>, dims: [usize; 3]) -> Tensor<f32> {
    let src = t.spatial();
    if src == dims {
        return t.clone();
    }
    let mut out = Tensor::zeros(t.channels(), dims);
    for c in 0..t.channels() {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let v = t.get(c, reflect(x, src[0]), reflect(y, src[1]), reflect(z, src[2]));
                    let i = out.index(c, x, y, z);
                    out.data_mut()[i] = v;
                }
            }
        }
    }
    out
}

fn crop_tensor(t: &Tensor<f32>, start: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let mut out = Tensor::zeros(t.channels(), size);
    for c in 0..t.channels() {
        for z in 0..size[2] {
            for y in 0..size[1] {
                let s = t.index(c, start[0], start[1] + y, start[2] + z);
                let d = out.index(c, 0, y, z);
                out.data_mut()[d..d + size[0]].copy_from_slice(&t.data()[s..s + size[0]]);
            }
        }
    }
    out
}

/// Runs `model` over `s` in windows of `window` voxels overlapping by the
/// fraction `overlap`, averaging overlapping probabilities. Volumes smaller
/// than the window are reflect-padded and the result cropped back.
pub fn predict_volume(
    model: &ModelGraph<f32>,
    s: &Study,
    window: [usize; 3],
    overlap: f64,
) -> Result<BTreeMap<Target, Prediction>, InferError> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(InferError::BadOverlap(overlap));
    }
    if window.contains(&0) {
        return Err(InferError::BadWindow(window));
    }
    let inputs = model_inputs(model.config(), s).map_err(|e| match e {
        TrainError::MissingData { patient, what } => InferError::MissingModality {
            patient,
            modality: what,
        },
        other => InferError::MissingModality {
            patient: s.patient_id.clone(),
            modality: other.to_string(),
        },
    })?;
    let geometry = *s.geometry().expect("model_inputs checked the study has volumes");
    let n = geometry.dims;
    let padded = [0, 1, 2].map(|a| n[a].max(window[a]));
    let inputs: Vec<Tensor<f32>> = inputs.iter().map(|t| pad_tensor(t, padded)).collect();
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(padded[a], window[a], overlap)).collect();
    let targets = model.config().targets();
    let total: usize = padded.iter().product();
    let mut sums: BTreeMap<Target, Vec<f64>> = targets.iter().map(|t| (*t, vec![0.0; total])).collect();
    let mut counts = vec![0u32; total];
    let idx = |x: usize, y: usize, z: usize| x + padded[0] * (y + padded[1] * z);
    for &sz in &starts[2] {
        for &sy in &starts[1] {
            for &sx in &starts[0] {
                let start = [sx, sy, sz];
                let crops: Vec<Tensor<f32>> = inputs.iter().map(|t| crop_tensor(t, start, window)).collect();
                let out = model.forward(&crops)?;
                for (t, p) in out.targets() {
                    let acc = sums.get_mut(&t).expect("target list comes from the model");
                    for z in 0..window[2] {
                        for y in 0..window[1] {
                            for x in 0..window[0] {
                                acc[idx(sx + x, sy + y, sz + z)] += p.get(0, x, y, z) as f64;
                            }
                        }
                    }
                }
                for z in 0..window[2] {
                    for y in 0..window[1] {
                        for x in 0..window[0] {
                            counts[idx(sx + x, sy + y, sz + z)] += 1;
                        }
                    }
                }
            }
        }
    }
    let mut result = BTreeMap::new();
    for (t, acc) in sums {
        let mut prob = Vec::with_capacity(geometry.len());
        for z in 0..n[2] {
            for y in 0..n[1] {
                for x in 0..n[0] {
                    let i = idx(x, y, z);
                    prob.push((acc[i] / counts[i] as f64) as f32);
                }
            }
        }
        let bits = prob.iter().map(|&p| u8::from(p >= 0.5)).collect();
        let probability = Volume::new(geometry, Modality::PROB, prob)?;
        let mask = BinaryMask::new(geometry, t, bits)?;
        result.insert(t, Prediction { probability, mask });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::volume::Gridded;
    use crate::phantom::{generate_study, PhantomSpec};

    fn tiny() -> ModelGraph<f32> {
        let cfg = ModelConfig::from_variant("E^{t1,t2}E^{pet}-D^{t2}D^{pet}")
            .unwrap()
            .narrowed(4, &[2, 4], 1)
            .unwrap();
        let mut m = ModelGraph::build(&cfg).unwrap();
        m.init_weights(2);
        m
    }

    fn study(dims: [usize; 3]) -> Study {
        generate_study(&PhantomSpec {
            dims,
            radii_mm: [1.5, 1.5, 4.0],
            ..PhantomSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn window_positions_cover_the_axis() {
        assert_eq!(window_starts(16, 16, 0.5), vec![0]);
        assert_eq!(window_starts(20, 8, 0.5), vec![0, 4, 8, 12]);
        assert_eq!(window_starts(21, 8, 0.5), vec![0, 4, 8, 12, 13]);
        assert_eq!(window_starts(10, 8, 0.75), vec![0, 2]);
    }

    #[test]
    fn single_window_matches_forward() {
        let m = tiny();
        let s = study([8, 8, 4]);
        let preds = predict_volume(&m, &s, [8, 8, 4], 0.5).unwrap();
        let direct = m.forward(&model_inputs(m.config(), &s).unwrap()).unwrap();
        for (t, p) in direct.targets() {
            let got = &preds[&t];
            assert_eq!(got.probability.dims(), [8, 8, 4]);
            assert_eq!(got.probability.voxels(), p.data());
            assert!(got.probability.geometry().approx_eq(s.geometry().unwrap()));
        }
    }

    #[test]
    fn constant_output_averages_to_itself() {
        let mut m = tiny();
        let logit = (0.7f32 / 0.3).ln();
        for d in 0..2 {
            let (w, b) = m.head_params_mut(d).unwrap();
            w.fill(0.0);
            b.fill(logit);
        }
        let s = study([20, 14, 6]);
        let preds = predict_volume(&m, &s, [8, 8, 4], 0.5).unwrap();
        for p in preds.values() {
            assert_eq!(p.probability.dims(), [20, 14, 6]);
            assert!(p.probability.voxels().iter().all(|&v| (v - 0.7).abs() < 1e-5));
            assert_eq!(p.mask.count(), 20 * 14 * 6);
        }
    }

    #[test]
    fn small_volumes_are_padded_and_cropped() {
        let m = tiny();
        let s = study([6, 7, 3]);
        let preds = predict_volume(&m, &s, [8, 8, 4], 0.5).unwrap();
        assert_eq!(preds[&Target::T2].mask.dims(), [6, 7, 3]);
    }

    #[test]
    fn missing_modality_is_reported() {
        let m = tiny();
        let mut s = study([8, 8, 4]);
        s.volumes.remove(&Modality::T1);
        assert!(matches!(
            predict_volume(&m, &s, [8, 8, 4], 0.5),
            Err(InferError::MissingModality { .. })
        ));
        assert!(matches!(
            predict_volume(&m, &study([8, 8, 4]), [6, 8, 4], 0.5),
            Err(InferError::Model(ModelError::NotDivisible { axis: 'x', .. }))
        ));
    }
}
