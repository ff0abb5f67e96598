//! Synthetic 2-D classification datasets with deterministic splits.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};
use crate::rng::RngStream;
use crate::tensor::TensorValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Rings,
    Xor,
}

impl std::str::FromStr for DatasetKind {
    type Err = HatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "rings" => Ok(Self::Rings),
            "xor" => Ok(Self::Xor),
            other => Err(HatError::UnknownDatasetKind(other.into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub x: TensorValue,
    pub y: Vec<usize>,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// First `n` rows (used for fixed probe batches and calibration subsets).
    pub fn head(&self, n: usize) -> DataSplit {
        let n = n.min(self.len());
        let cols = self.x.cols();
        let x = TensorValue::from_fn(&[n, cols], |i| self.x.data()[i]);
        DataSplit {
            x,
            y: self.y[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DataSplit,
    pub val: DataSplit,
    pub test: DataSplit,
    /// Per-feature mean/std used to standardize (computed on train).
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

/// Balanced two-class synthetic data with a deterministic 70/15/15 split and
/// train-fitted standardization.
pub fn synth_dataset(kind: DatasetKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 30 {
        return Err(HatError::DatasetTooSmall { n, min: 30 });
    }
    let stream = RngStream::new(seed, "dataset");
    let mut rng = stream.child("points").rng();
    let mut xs = Vec::with_capacity(n * 2);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (px, py) = sample_point(kind, label, noise, &mut rng);
        xs.push(px);
        xs.push(py);
        ys.push(label);
    }

    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut shuffle_rng = stream.child("split").rng();
        order.shuffle(&mut shuffle_rng);
    }
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let idx_train = &order[..n_train];
    let idx_val = &order[n_train..n_train + n_val];
    let idx_test = &order[n_train + n_val..];

    let gather = |idx: &[usize]| -> DataSplit {
        let x = TensorValue::from_fn(&[idx.len(), 2], |i| xs[idx[i / 2] * 2 + i % 2]);
        let y = idx.iter().map(|&i| ys[i]).collect();
        DataSplit { x, y }
    };
    let mut train = gather(idx_train);
    let mut val = gather(idx_val);
    let mut test = gather(idx_test);

    let mut mean = vec![0.0; 2];
    let mut std = vec![0.0; 2];
    for c in 0..2 {
        let m: f64 = (0..train.len()).map(|r| train.x.at(r, c)).sum::<f64>() / train.len() as f64;
        let v: f64 = (0..train.len())
            .map(|r| (train.x.at(r, c) - m).powi(2))
            .sum::<f64>()
            / train.len() as f64;
        mean[c] = m;
        std[c] = v.sqrt().max(1e-12);
    }
    for split in [&mut train, &mut val, &mut test] {
        let rows = split.len();
        for r in 0..rows {
            for c in 0..2 {
                let v = (split.x.at(r, c) - mean[c]) / std[c];
                split.x.set(r, c, v);
            }
        }
    }

    Ok(Dataset {
        train,
        val,
        test,
        feature_mean: mean,
        feature_std: std,
    })
}

fn sample_point(kind: DatasetKind, label: usize, noise: f64, rng: &mut impl Rng) -> (f64, f64) {
    match kind {
        DatasetKind::Blobs => {
            let c = if label == 0 { -1.5 } else { 1.5 };
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            (c + noise * dx, c + noise * dy)
        }
        DatasetKind::Rings => {
            let radius = if label == 0 { 1.0 } else { 2.0 };
            let dr: f64 = StandardNormal.sample(rng);
            let r = radius + noise * dr;
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            (r * theta.cos(), r * theta.sin())
        }
        DatasetKind::Xor => {
            let (sx, sy) = match (label, rng.gen::<bool>()) {
                (0, false) => (1.0, 1.0),
                (0, true) => (-1.0, -1.0),
                (1, false) => (1.0, -1.0),
                (1, true) => (-1.0, 1.0),
                _ => unreachable!(),
            };
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            (sx + noise * dx, sy + noise * dy)
        }
    }
}
