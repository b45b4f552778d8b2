//! Ridge regression probes from region embeddings to downstream targets.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::objectives::{write_train_log, LossReport};
use crate::tape::Mat;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} samples, got {found}")]
    TooFewRegions { needed: usize, found: usize },
    #[error("normal equations are singular")]
    SingularSystem,
    #[error("lambda must be nonnegative and finite, got {0}")]
    InvalidLambda(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ridge model fit on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    /// Coefficients on the standardized features.
    pub std_weights: Array1<f64>,
    /// Coefficients on the original features.
    pub weights: Array1<f64>,
    /// Intercept on the original features.
    pub bias: f64,
    pub mean: Array1<f64>,
    /// Column standard deviations; 0 marks a constant column.
    pub scale: Array1<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &Mat) -> Array1<f64> {
        x.dot(&self.weights) + self.bias
    }
}

/// `w = (ZᵀZ + λI)⁻¹ Zᵀ(y − ȳ)` on column-standardized `Z`; constant columns stay 0.
pub fn ridge_fit(x: &Mat, y: ArrayView1<f64>, lambda: f64) -> Result<RidgeModel, EvalError> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(EvalError::TooFewRegions { needed: 2, found: n });
    }
    if y.len() != n {
        return Err(EvalError::ShapeMismatch(format!("{n} feature rows, {} targets", y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EvalError::InvalidLambda(lambda));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 0.0 });
    let z = Mat::from_shape_fn((n, d), |(i, j)| if scale[j] > 0.0 { (x[[i, j]] - mean[j]) / scale[j] } else { 0.0 });
    let y_mean = y.mean().expect("n >= 2");

    let zm = DMatrix::from_row_slice(n, d, z.as_slice().expect("standard layout"));
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let gram = zm.transpose() * &zm + DMatrix::identity(d, d) * lambda;
    let rhs = zm.transpose() * yc;
    let std_w = gram.cholesky().ok_or(EvalError::SingularSystem)?.solve(&rhs);

    let std_weights = Array1::from_iter(std_w.iter().copied());
    let weights = Array1::from_shape_fn(d, |j| if scale[j] > 0.0 { std_weights[j] / scale[j] } else { 0.0 });
    let bias = y_mean - weights.dot(&mean);
    Ok(RidgeModel { std_weights, weights, bias, mean, scale })
}

fn nan_from_null<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// NaN (serialized as null) when the truth has zero variance.
    #[serde(deserialize_with = "nan_from_null")]
    pub r2: f64,
    pub r2_defined: bool,
}

pub fn evaluate_metrics(y_true: ArrayView1<f64>, y_pred: ArrayView1<f64>) -> Result<Metrics, EvalError> {
    let n = y_true.len();
    if y_pred.len() != n {
        return Err(EvalError::ShapeMismatch(format!("{n} truths, {} predictions", y_pred.len())));
    }
    if n < 2 {
        return Err(EvalError::TooFewRegions { needed: 2, found: n });
    }
    let e = &y_true - &y_pred;
    let mae = e.mapv(f64::abs).sum() / n as f64;
    let sse = e.mapv(|v| v * v).sum();
    let rmse = (sse / n as f64).sqrt();
    let mean = y_true.sum() / n as f64;
    let sst = y_true.mapv(|v| (v - mean).powi(2)).sum();
    let (r2, r2_defined) = if sst > 0.0 { (1.0 - sse / sst, true) } else { (f64::NAN, false) };
    Ok(Metrics { mae, rmse, r2, r2_defined })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub name: String,
    pub mae: f64,
    pub rmse: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub r2: f64,
    pub mae_std: f64,
    pub rmse_std: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub r2_std: f64,
    pub folds: Vec<Metrics>,
    /// Out-of-fold prediction for every region (NaN where a region was never scored).
    #[serde(skip)]
    pub predictions: Vec<f64>,
    #[serde(skip)]
    pub truths: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Mean R² over tasks.
    pub fn mean_r2(&self) -> f64 {
        self.tasks.iter().map(|t| t.r2).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Seeded shuffle dealt round-robin into `folds` test sets.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if folds < 2 {
        return Err(EvalError::TooFewRegions { needed: 2, found: folds });
    }
    if n < folds {
        return Err(EvalError::TooFewRegions { needed: folds, found: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (k, i) in order.into_iter().enumerate() {
        out[k % folds].push(i);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits on the complement of every test set and scores on the test set.
pub fn cross_validate_folds(
    embeddings: &Mat,
    targets: &Mat,
    task_names: &[String],
    test_sets: &[Vec<usize>],
    lambda: f64,
) -> Result<MetricsReport, EvalError> {
    let n = embeddings.nrows();
    if targets.nrows() != n || task_names.len() != targets.ncols() {
        return Err(EvalError::ShapeMismatch(format!(
            "{n} embedding rows, targets {:?}, {} task names",
            targets.dim(),
            task_names.len()
        )));
    }
    let mut tasks = Vec::new();
    for (k, name) in task_names.iter().enumerate() {
        let y = targets.column(k);
        let mut folds = Vec::new();
        let mut predictions = vec![f64::NAN; n];
        for test in test_sets {
            let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
            let model = ridge_fit(&embeddings.select(Axis(0), &train), y.select(Axis(0), &train).view(), lambda)?;
            let pred = model.predict(&embeddings.select(Axis(0), test));
            for (&i, &p) in test.iter().zip(pred.iter()) {
                predictions[i] = p;
            }
            folds.push(evaluate_metrics(y.select(Axis(0), test).view(), pred.view())?);
        }
        let (mae, mae_std) = mean_std(folds.iter().map(|f| f.mae));
        let (rmse, rmse_std) = mean_std(folds.iter().map(|f| f.rmse));
        let (r2, r2_std) = mean_std(folds.iter().map(|f| f.r2));
        tasks.push(TaskMetrics {
            name: name.clone(),
            mae,
            rmse,
            r2,
            mae_std,
            rmse_std,
            r2_std,
            folds,
            predictions,
            truths: y.to_vec(),
        });
    }
    Ok(MetricsReport { tasks, config: serde_json::json!({ "lambda": lambda, "folds": test_sets.len() }) })
}

/// Seeded k-fold cross-validation.
pub fn cross_validate(
    embeddings: &Mat,
    targets: &Mat,
    task_names: &[String],
    folds: usize,
    lambda: f64,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let sets = fold_assignment(embeddings.nrows(), folds, seed)?;
    let mut report = cross_validate_folds(embeddings, targets, task_names, &sets, lambda)?;
    report.config = serde_json::json!({ "protocol": "kfold", "folds": folds, "lambda": lambda, "seed": seed });
    Ok(report)
}

/// Single 60/20/20 split: fit on the first 60%, report test metrics on the
/// last 20%; validation metrics are echoed in the config.
pub fn split_evaluate(
    embeddings: &Mat,
    targets: &Mat,
    task_names: &[String],
    lambda: f64,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let n = embeddings.nrows();
    if n < 5 {
        return Err(EvalError::TooFewRegions { needed: 5, found: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n * 3 / 5).max(2);
    let n_val = ((n - n_train) / 2).max(1);
    let val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let test: Vec<usize> = order[n_train + n_val..].to_vec();
    let score = |held: &[usize]| -> Result<MetricsReport, EvalError> {
        let train = &order[..n_train];
        let mut tasks = Vec::new();
        for (k, name) in task_names.iter().enumerate() {
            let y = targets.column(k);
            let model = ridge_fit(&embeddings.select(Axis(0), train), y.select(Axis(0), train).view(), lambda)?;
            let pred = model.predict(&embeddings.select(Axis(0), held));
            let m = evaluate_metrics(y.select(Axis(0), held).view(), pred.view())?;
            let mut predictions = vec![f64::NAN; n];
            for (&i, &p) in held.iter().zip(pred.iter()) {
                predictions[i] = p;
            }
            tasks.push(TaskMetrics {
                name: name.clone(),
                mae: m.mae,
                rmse: m.rmse,
                r2: m.r2,
                mae_std: 0.0,
                rmse_std: 0.0,
                r2_std: 0.0,
                folds: vec![m],
                predictions,
                truths: y.to_vec(),
            });
        }
        Ok(MetricsReport { tasks, config: serde_json::Value::Null })
    };
    let validation = score(&val)?;
    let mut report = score(&test)?;
    report.config = serde_json::json!({
        "protocol": "split_60_20_20",
        "lambda": lambda,
        "seed": seed,
        "validation_r2": validation.tasks.iter().map(|t| t.r2).collect::<Vec<_>>(),
    });
    Ok(report)
}

/// Markdown table with one row per labelled report and MAE/RMSE/R² per task.
pub fn markdown_table(rows: &[(String, &MetricsReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["Model".to_string()];
    for t in &first.tasks {
        for m in ["MAE", "RMSE", "R²"] {
            header.push(format!("{} {m}", t.name));
        }
    }
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), " --- |".repeat(header.len()));
    for (label, report) in rows {
        let mut cells = vec![label.clone()];
        for t in &report.tasks {
            cells.push(format!("{:.4}", t.mae));
            cells.push(format!("{:.4}", t.rmse));
            cells.push(if t.r2.is_nan() { "NaN".into() } else { format!("{:.4}", t.r2) });
        }
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}

/// Writes metrics.json, metrics.md, scatter_<task>.csv and (given a history) losses.csv.
pub fn emit_report(
    report: &MetricsReport,
    history: Option<&[LossReport]>,
    label: &str,
    out_dir: &Path,
) -> Result<(), EvalError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(report).expect("report serializes"))?;
    fs::write(out_dir.join("metrics.md"), markdown_table(&[(label.to_string(), report)]))?;
    for t in &report.tasks {
        let mut f = std::io::BufWriter::new(fs::File::create(out_dir.join(format!("scatter_{}.csv", t.name)))?);
        writeln!(f, "region,truth,prediction")?;
        for (i, (y, p)) in t.truths.iter().zip(&t.predictions).enumerate() {
            writeln!(f, "{i},{y},{p}")?;
        }
        f.flush()?;
    }
    if let Some(losses) = history {
        write_train_log(&out_dir.join("losses.csv"), losses)?;
    }
    Ok(())
}
