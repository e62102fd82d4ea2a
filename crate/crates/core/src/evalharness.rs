//! Frozen-encoder evaluation: feature export, linear probe, kNN.

use std::path::Path;

use candle_core::{DType, Device};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::DatasetManifest;
use crate::error::{CmidError, Result};
use crate::model::{global_average_pool, images_to_tensor, ModelState};
use crate::trainer::load_model;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub label: Option<usize>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureTable {
        FeatureTable {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.id.clone(), row.label.map(|l| l.to_string()).unwrap_or_default()];
            rec.extend(row.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| CmidError::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| {
                CmidError::Dataset(format!("{}: row {}: {what}", path.display(), line + 2))
            };
            let id = rec.get(0).ok_or_else(|| bad("missing id"))?.to_string();
            let label = match rec.get(1).map(str::trim) {
                None | Some("") => None,
                Some(s) => Some(s.parse().map_err(|_| bad("label is not an integer"))?),
            };
            let features = rec
                .iter()
                .skip(2)
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad("feature is not a number")))
                .collect::<Result<Vec<_>>>()?;
            rows.push(FeatureRow { id, label, features });
        }
        let table = FeatureTable { rows };
        if table.rows.iter().any(|r| r.features.len() != table.dim()) {
            return Err(CmidError::Dataset(format!("{}: ragged feature rows", path.display())));
        }
        Ok(table)
    }
}

/// GAP features of the student's final map on uncropped, unmasked images,
/// in manifest order.
pub fn extract_with_model(
    model: &ModelState,
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<FeatureTable> {
    let size = cfg.data.image_size;
    let mut rows = Vec::with_capacity(manifest.len());
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut records = Vec::with_capacity(chunk.len());
        for &i in chunk {
            match manifest.load(i, cfg.data.channels, size) {
                Ok(r) => records.push(r),
                Err(err) => log::warn!("skipping {}: {err}", manifest.records[i].id),
            }
        }
        if records.is_empty() {
            continue;
        }
        let pixels: Vec<_> = records.iter().map(|r| &r.pixels).collect();
        let x = images_to_tensor(&pixels, model.device())?;
        let map = model.encode_student(&x, None)?;
        let feats = global_average_pool(&map)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (rec, features) in records.into_iter().zip(feats) {
            rows.push(FeatureRow {
                id: rec.id,
                label: rec.label,
                features,
            });
        }
    }
    Ok(FeatureTable { rows })
}

pub fn extract_features(checkpoint: &Path, manifest: &DatasetManifest) -> Result<FeatureTable> {
    let (cfg, model) = load_model(checkpoint, &Device::Cpu)?;
    extract_with_model(&model, &cfg, manifest, 64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Linear,
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub protocol: Protocol,
    pub accuracy: f64,
    /// Accuracy per class over its test points; `None` for classes absent
    /// from the test split.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub num_train: usize,
    pub num_test: usize,
}

impl ProbeResult {
    fn from_predictions(
        protocol: Protocol,
        truth: &[usize],
        predicted: &[usize],
        classes: usize,
        num_train: usize,
    ) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Self {
            protocol,
            accuracy: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
            per_class,
            confusion,
            num_train,
            num_test: truth.len(),
        }
    }

    pub fn summary(&self) -> String {
        let tag = match self.protocol {
            Protocol::Linear => "linear",
            Protocol::Knn => "knn",
        };
        format!(
            "{tag} accuracy {:.4} ({} train, {} test)",
            self.accuracy, self.num_train, self.num_test
        )
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CmidError::Contract(format!("serializing probe result: {e}")))?;
        std::fs::write(path, text).map_err(|e| CmidError::io(path, e))
    }
}

fn labeled<'a>(table: &'a FeatureTable, split: &str) -> Result<(Vec<&'a [f64]>, Vec<usize>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for row in &table.rows {
        if let Some(l) = row.label {
            x.push(row.features.as_slice());
            y.push(l);
        }
    }
    if x.len() < table.len() {
        log::warn!("{split}: ignoring {} unlabeled rows", table.len() - x.len());
    }
    Ok((x, y))
}

fn class_count(train: &[usize], test: &[usize], split_train: &str) -> Result<(usize, Vec<bool>)> {
    let classes = train.iter().chain(test).max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    for &l in train {
        seen[l] = true;
    }
    if seen.iter().filter(|s| **s).count() < 2 {
        return Err(CmidError::Dataset(format!("{split_train} needs at least two classes")));
    }
    for &l in test {
        if !seen[l] {
            log::warn!("class {l} appears in the test split but not in training; its points count as errors");
        }
    }
    Ok((classes, seen))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            weight_decay: 1e-4,
        }
    }
}

/// Eigenvalues below this fraction of the largest are treated as noise and
/// dropped from the whitened basis.
const WHITEN_FLOOR: f64 = 1e-6;

/// Linear map `x -> W (x - mean)` that decorrelates the training features
/// and scales every retained principal direction to unit variance.
struct Whitener {
    mean: Vec<f64>,
    basis: DMatrix<f64>,
}

impl Whitener {
    fn fit(x: &[&[f64]], d: usize) -> Self {
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v / n;
            }
        }
        let centered = DMatrix::from_fn(x.len(), d, |i, j| x[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n;
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > top * WHITEN_FLOOR && top > 0.0).collect();
        let basis = DMatrix::from_fn(keep.len(), d, |r, j| {
            let i = keep[r];
            eig.eigenvectors[(j, i)] / eig.eigenvalues[i].sqrt()
        });
        Self { mean, basis }
    }

    fn dim(&self) -> usize {
        self.basis.nrows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let centered = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        (&self.basis * centered).iter().cloned().collect()
    }
}

fn argmax_allowed(scores: &[f64], allowed: &[bool]) -> usize {
    let mut best = None;
    for (c, &s) in scores.iter().enumerate() {
        if !allowed[c] {
            continue;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((c, s)),
        }
    }
    best.map_or(0, |(c, _)| c)
}

/// Multinomial logistic regression on train-whitened features, trained
/// full-batch with Nesterov momentum. Whitening is linear, so the result is
/// still a linear classifier of the raw features.
pub fn linear_probe(
    train: &FeatureTable,
    test: &FeatureTable,
    settings: ProbeSettings,
) -> Result<ProbeResult> {
    let (xtr, ytr) = labeled(train, "train features")?;
    let (xte, yte) = labeled(test, "test features")?;
    let (classes, seen) = class_count(&ytr, &yte, "train features")?;
    let d = train.dim();
    if test.dim() != d {
        return Err(CmidError::Shape(format!(
            "train features have width {d}, test features {}",
            test.dim()
        )));
    }
    let n = xtr.len() as f64;
    let whitener = Whitener::fit(&xtr, d);
    let ztr: Vec<Vec<f64>> = xtr.iter().map(|x| whitener.apply(x)).collect();
    let d = whitener.dim();

    let width = d + 1;
    let mut w = vec![0.0; classes * width];
    let mut velocity = vec![0.0; classes * width];
    let momentum = 0.9;
    let logits = |w: &[f64], z: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let row = &w[c * width..(c + 1) * width];
                row[d] + row[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    for _ in 0..settings.epochs {
        let lookahead: Vec<f64> = w.iter().zip(&velocity).map(|(a, v)| a + momentum * v).collect();
        let mut grad = vec![0.0; classes * width];
        for (z, &y) in ztr.iter().zip(&ytr) {
            let mut s = logits(&lookahead, z);
            for (c, v) in s.iter_mut().enumerate() {
                if !seen[c] {
                    *v = f64::NEG_INFINITY;
                }
            }
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / total - if c == y { 1.0 } else { 0.0 };
                let row = &mut grad[c * width..(c + 1) * width];
                for j in 0..d {
                    row[j] += p * z[j] / n;
                }
                row[d] += p / n;
            }
        }
        for i in 0..w.len() {
            let decay = if i % width == d { 0.0 } else { settings.weight_decay * lookahead[i] };
            velocity[i] = momentum * velocity[i] - settings.lr * (grad[i] + decay);
            w[i] += velocity[i];
        }
    }
    let predicted: Vec<usize> = xte
        .iter()
        .map(|x| argmax_allowed(&logits(&w, &whitener.apply(x)), &seen))
        .collect();
    Ok(ProbeResult::from_predictions(Protocol::Linear, &yte, &predicted, classes, xtr.len()))
}

fn unit(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter().map(|v| v / n).collect()
}

/// Cosine-similarity k-nearest-neighbor vote. Vote ties go to the class
/// with the larger summed similarity, then to the lower class index.
pub fn knn_eval(train: &FeatureTable, test: &FeatureTable, k: usize) -> Result<ProbeResult> {
    let (xtr, ytr) = labeled(train, "train features")?;
    let (xte, yte) = labeled(test, "test features")?;
    if k == 0 || k > xtr.len() {
        return Err(CmidError::Parameter(format!(
            "k = {k} must be between 1 and the {} training points",
            xtr.len()
        )));
    }
    let classes = ytr.iter().chain(&yte).max().map_or(0, |m| m + 1);
    let utr: Vec<Vec<f64>> = xtr.iter().map(|x| unit(x)).collect();
    let predicted: Vec<usize> = xte
        .iter()
        .map(|x| {
            let q = unit(x);
            let mut sims: Vec<(f64, usize)> = utr
                .iter()
                .enumerate()
                .map(|(i, t)| (t.iter().zip(&q).map(|(a, b)| a * b).sum(), i))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![(0usize, 0.0f64); classes];
            for &(s, i) in &sims[..k] {
                votes[ytr[i]].0 += 1;
                votes[ytr[i]].1 += s;
            }
            let mut best = 0;
            for c in 1..classes {
                let (vc, sc) = votes[c];
                let (vb, sb) = votes[best];
                if vc > vb || (vc == vb && sc > sb) {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(ProbeResult::from_predictions(Protocol::Knn, &yte, &predicted, classes, xtr.len()))
}

/// Mean over feature dimensions of the per-dimension standard deviation
/// across rows.
pub fn mean_feature_std(table: &FeatureTable) -> f64 {
    let (n, d) = (table.len(), table.dim());
    if n < 2 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = table.rows.iter().map(|r| r.features[j]).sum::<f64>() / n as f64;
        let var = table.rows.iter().map(|r| (r.features[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}
