//! Linear multi-output regression head with a ReLU clamp, trained on
//! precomputed text embeddings against silver SDG vectors.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::SilverRecord;
use crate::error::{Error, Result};
use crate::model::{float_cell, SdgId, SDG_COUNT};

/// Feature rows paired with 17-component targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionBatch {
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
}

impl RegressionBatch {
    pub fn new(features: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("regression batch is empty"));
        }
        if features.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                actual: targets.nrows(),
            });
        }
        if targets.ncols() != SDG_COUNT {
            return Err(Error::DimensionMismatch {
                expected: SDG_COUNT,
                actual: targets.ncols(),
            });
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in regression batch"));
        }
        if targets.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("negative regression target"));
        }
        Ok(RegressionBatch { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn select(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.features.select(Axis(0), rows), self.targets.select(Axis(0), rows))
    }
}

/// Per-SDG loss weights, all positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights([f64; SDG_COUNT]);

impl ClassWeights {
    pub fn new(w: [f64; SDG_COUNT]) -> Result<Self> {
        if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::invalid("class weights must be positive and finite"));
        }
        Ok(ClassWeights(w))
    }

    pub fn uniform() -> Self {
        ClassWeights([1.0; SDG_COUNT])
    }

    /// `w_j = sum_k f_k / (17 * f_j)`, where `f_j` counts rows with a
    /// positive component `j`, floored at 1.
    pub fn inverse_frequency(targets: ArrayView2<f64>) -> Self {
        let mut f = [0.0f64; SDG_COUNT];
        for row in targets.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    f[j] += 1.0;
                }
            }
        }
        let f = f.map(|x| x.max(1.0));
        let total: f64 = f.iter().sum();
        ClassWeights(f.map(|x| total / (SDG_COUNT as f64 * x)))
    }

    pub fn values(&self) -> &[f64; SDG_COUNT] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `d x 17`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            weights: Array2::zeros((dim, SDG_COUNT)),
            bias: Array1::zeros(SDG_COUNT),
        }
    }

    /// Small Gaussian weights and a positive bias so no unit starts dead.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        LinearModel {
            weights: Array2::from_shape_simple_fn((dim, SDG_COUNT), || normal.sample(&mut rng)),
            bias: Array1::from_elem(SDG_COUNT, 0.1),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn pre_activation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    /// `max(0, x W + b)` for one feature row.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok((x.dot(&self.weights) + &self.bias).mapv(|v| v.max(0.0)))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.ncols(),
            });
        }
        Ok(self.pre_activation(x).mapv(|v| v.max(0.0)))
    }
}

/// Mean over rows of the (weighted) sum of squared component errors.
pub fn loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, weights: Option<&ClassWeights>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.nrows() == 0 {
        return Err(Error::invalid("loss over zero rows"));
    }
    let mut total = 0.0;
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        for (j, (a, b)) in p.iter().zip(t.iter()).enumerate() {
            let sq = (a - b) * (a - b);
            total += weights.map_or(sq, |w| w.0[j] * sq);
        }
    }
    Ok(total / pred.nrows() as f64)
}

/// Analytic gradient of [`loss`] through the clamp; units with
/// pre-activation `<= 0` pass no gradient.
pub fn gradient(
    model: &LinearModel,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weights: Option<&ClassWeights>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let z = model.pre_activation(features);
    if z.dim() != targets.dim() {
        return Err(Error::DimensionMismatch {
            expected: z.nrows(),
            actual: targets.nrows(),
        });
    }
    let scale = 2.0 / features.nrows() as f64;
    let mut g = z;
    for (mut row, t) in g.rows_mut().into_iter().zip(targets.rows()) {
        for (j, (v, &y)) in row.iter_mut().zip(t.iter()).enumerate() {
            let w = weights.map_or(1.0, |w| w.0[j]);
            *v = if *v > 0.0 { scale * w * (*v - y) } else { 0.0 };
        }
    }
    Ok((features.t().dot(&g), g.sum_axis(Axis(0))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Rows per gradient step; 0 means the whole batch.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            epochs: 500,
            seed: 0,
            batch_size: 0,
            weighted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Training {
    pub model: LinearModel,
    /// Full-data loss after each epoch.
    pub history: Vec<f64>,
    pub weights: Option<ClassWeights>,
}

/// Gradient descent over seed-shuffled mini-batches.
pub fn train(batch: &RegressionBatch, config: &TrainConfig) -> Result<Training> {
    if !(config.lr.is_finite() && config.lr > 0.0) {
        return Err(Error::config("lr", "must be positive"));
    }
    let weights = config
        .weighted
        .then(|| ClassWeights::inverse_frequency(batch.targets.view()));
    let mut model = LinearModel::init(batch.dim(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let step = if config.batch_size == 0 {
        batch.len()
    } else {
        config.batch_size.min(batch.len())
    };
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        if step < batch.len() {
            order.shuffle(&mut rng);
        }
        for rows in order.chunks(step) {
            let (gw, gb) = if step == batch.len() {
                gradient(&model, batch.features.view(), batch.targets.view(), weights.as_ref())?
            } else {
                let (x, y) = batch.select(rows);
                gradient(&model, x.view(), y.view(), weights.as_ref())?
            };
            model.weights.scaled_add(-config.lr, &gw);
            model.bias.scaled_add(-config.lr, &gb);
        }
        let pred = model.predict(batch.features.view())?;
        let l = loss(pred.view(), batch.targets.view(), weights.as_ref())?;
        if !l.is_finite() {
            return Err(Error::invalid("training diverged; lower the learning rate"));
        }
        history.push(l);
    }
    Ok(Training {
        model,
        history,
        weights,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SdgError {
    pub sdg: SdgId,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub per_sdg: Vec<SdgError>,
    /// Mean over all (row, component) cells.
    pub mse: f64,
    pub mae: f64,
}

pub fn error_table(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<ErrorReport> {
    if pred.dim() != target.dim() || pred.ncols() != SDG_COUNT || pred.nrows() == 0 {
        return Err(Error::invalid("error table needs matching non-empty n x 17 matrices"));
    }
    let n = pred.nrows() as f64;
    let diff = &pred - &target;
    let per_sdg: Vec<SdgError> = SdgId::all()
        .map(|s| {
            let col = diff.column(s.index());
            SdgError {
                sdg: s,
                mse: col.iter().map(|d| d * d).sum::<f64>() / n,
                mae: col.iter().map(|d| d.abs()).sum::<f64>() / n,
            }
        })
        .collect();
    let k = SDG_COUNT as f64;
    Ok(ErrorReport {
        mse: per_sdg.iter().map(|e| e.mse).sum::<f64>() / k,
        mae: per_sdg.iter().map(|e| e.mae).sum::<f64>() / k,
        per_sdg,
    })
}

pub fn error_report(model: &LinearModel, batch: &RegressionBatch) -> Result<ErrorReport> {
    let pred = model.predict(batch.features.view())?;
    error_table(pred.view(), batch.targets.view())
}

pub fn write_error_csv(path: &Path, report: &ErrorReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sdg", "mse", "mae"])?;
    for e in &report.per_sdg {
        w.write_record([e.sdg.to_string(), float_cell(e.mse), float_cell(e.mae)])?;
    }
    w.write_record(["overall".to_string(), float_cell(report.mse), float_cell(report.mae)])?;
    w.flush().map_err(|e| Error::io("writing error table", e))
}

#[derive(Deserialize)]
struct FeatureRow {
    patent_id: String,
    features: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureHeader {
    embedding_dim: usize,
}

/// Reads `{"embedding_dim": d}` followed by `{"patent_id", "features"}` rows.
pub fn load_features(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let schema = |line: usize, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut dim = None;
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if dim.is_none() {
            let h: FeatureHeader = serde_json::from_str(&line)
                .map_err(|e| schema(line_no, format!("expected embedding_dim header: {e}")))?;
            if h.embedding_dim == 0 {
                return Err(schema(line_no, "embedding_dim must be positive".into()));
            }
            dim = Some(h.embedding_dim);
            continue;
        }
        let row: FeatureRow = serde_json::from_str(&line).map_err(|e| schema(line_no, e.to_string()))?;
        if Some(row.features.len()) != dim {
            return Err(schema(
                line_no,
                format!("{} features, header says {}", row.features.len(), dim.unwrap_or(0)),
            ));
        }
        if row.features.iter().any(|v| !v.is_finite()) {
            return Err(schema(line_no, "non-finite feature".into()));
        }
        if !seen.insert(row.patent_id.clone()) {
            return Err(Error::DuplicateId {
                id: row.patent_id,
                line: line_no,
            });
        }
        rows.push((row.patent_id, row.features));
    }
    if dim.is_none() {
        return Err(schema(1, "missing embedding_dim header".into()));
    }
    Ok(rows)
}

/// Writes rows in the format read by [`load_features`].
pub fn write_features(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    if dim == 0 || rows.iter().any(|r| r.1.len() != dim) {
        return Err(Error::invalid("feature rows must share a positive dimension"));
    }
    let mut out = serde_json::to_string(&serde_json::json!({ "embedding_dim": dim }))?;
    out.push('\n');
    for (id, f) in rows {
        out.push_str(&serde_json::to_string(&serde_json::json!({ "patent_id": id, "features": f }))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Inner join of feature rows and silver vectors on patent id, in feature
/// order. Returns the joined ids with the batch.
pub fn join_silver(
    features: &[(String, Vec<f64>)],
    silver: &[SilverRecord],
) -> Result<(Vec<String>, RegressionBatch)> {
    let by_id: HashMap<&str, &SilverRecord> =
        silver.iter().map(|r| (r.patent_id.as_str(), r)).collect();
    let dim = features.first().map_or(0, |f| f.1.len());
    let mut ids = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (id, f) in features {
        if let Some(r) = by_id.get(id.as_str()) {
            ids.push(id.clone());
            x.extend_from_slice(f);
            y.extend_from_slice(r.sdg_vector.components());
        }
    }
    if ids.is_empty() {
        return Err(Error::invalid("no patent has both features and a silver vector"));
    }
    let n = ids.len();
    let features = Array2::from_shape_vec((n, dim), x).map_err(|e| Error::invalid(e.to_string()))?;
    let targets =
        Array2::from_shape_vec((n, SDG_COUNT), y).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((ids, RegressionBatch::new(features, targets)?))
}
