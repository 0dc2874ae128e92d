//! Seeded grid search and final retraining.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{train, train_observed, EncoderConfig, EncoderError, EncoderModel, TrainConfig, TrainingExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub point: GridPoint,
    /// Final validation loss per seed, in seed order.
    pub seed_losses: Vec<f64>,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best_index: usize,
    pub best: GridPoint,
    pub table: Vec<GridRow>,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Index of the row with the lowest mean validation loss; ties go to the lower
/// variance, then to the earlier grid position.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    rows.iter()
        .filter_map(|r| Some((r.index, r.mean?, r.variance?)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .map(|(i, _, _)| i)
}

/// Trains every grid point once per seed and picks the most stable winner.
pub fn grid_search(
    train_set: &[TrainingExample<'_>],
    val_set: &[TrainingExample<'_>],
    input_shape: (usize, usize),
    grid: &[GridPoint],
    seeds: &[u64],
) -> Result<GridOutcome, EncoderError> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(EncoderError::EmptyGrid);
    }
    if val_set.is_empty() {
        return Err(EncoderError::NoValidation);
    }
    let (channels, samples) = input_shape;
    let mut table = Vec::with_capacity(grid.len());
    for (index, point) in grid.iter().enumerate() {
        let mut seed_losses = Vec::with_capacity(seeds.len());
        let mut error = None;
        for &seed in seeds {
            let tc = TrainConfig { seed, ..point.train.clone() };
            let outcome = EncoderModel::init(point.encoder.clone(), channels, samples, seed)
                .and_then(|m| train(m, train_set, val_set, &tc));
            match outcome {
                Ok(model) => {
                    let loss = model.training_history.last().and_then(|h| h.val_loss).expect("validation set is non-empty");
                    seed_losses.push(loss);
                }
                Err(e) => {
                    log::warn!("grid point {index} failed with seed {seed}: {e}");
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let (mean, variance) = if error.is_none() {
            let (m, v) = mean_var(&seed_losses);
            (Some(m), Some(v))
        } else {
            (None, None)
        };
        table.push(GridRow { index, point: point.clone(), seed_losses, mean, variance, error });
    }
    let best_index = select_best(&table).ok_or_else(|| {
        EncoderError::GridFailed(table.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>().join("; "))
    })?;
    Ok(GridOutcome { best_index, best: grid[best_index].clone(), table })
}

/// Retrains `point` on the full training partition. Any batch containing one
/// of `test_ids` aborts with [`EncoderError::TestLeakage`].
pub fn finalize(
    full_train: &[TrainingExample<'_>],
    test_ids: &BTreeSet<String>,
    input_shape: (usize, usize),
    point: &GridPoint,
) -> Result<EncoderModel, EncoderError> {
    let model = EncoderModel::init(point.encoder.clone(), input_shape.0, input_shape.1, point.train.seed)?;
    train_observed(model, full_train, &[], &point.train, &mut |_, ids| {
        match ids.iter().find(|id| test_ids.contains(**id)) {
            Some(id) => Err(EncoderError::TestLeakage(id.to_string())),
            None => Ok(()),
        }
    })
}
