//! Mini-batch training on the mean cosine-alignment loss.
//!
//! Plain SGD with decoupled weight decay and a per-epoch cosine-annealed
//! learning rate. Sequential and fully determined by `TrainConfig::seed`.

use rand::seq::SliceRandom;

use super::{cosine_loss, EncoderError, EncoderModel, EpochRecord, TrainConfig};
use crate::corpus::EegTrial;
use crate::embedding::EmbeddingVector;
use crate::seed;

/// One supervised pair: a padded trial and its unit-norm target embedding.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub sentence_id: &'a str,
    pub trial: &'a EegTrial,
    pub target: &'a EmbeddingVector,
}

struct Prepared<'a> {
    id: &'a str,
    x: Vec<f64>,
    target: Vec<f64>,
}

fn prepare<'a>(model: &EncoderModel, set: &[TrainingExample<'a>]) -> Result<Vec<Prepared<'a>>, EncoderError> {
    set.iter()
        .map(|ex| {
            if ex.target.dim() != model.config().output_dim {
                return Err(EncoderError::DimensionMismatch(ex.target.dim(), model.config().output_dim));
            }
            let norm = ex.target.norm();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(EncoderError::TargetNotNormalized { sentence_id: ex.sentence_id.into(), norm });
            }
            Ok(Prepared { id: ex.sentence_id, x: model.input_of(ex.trial)?, target: ex.target.to_f64() })
        })
        .collect()
}

fn mean_loss(model: &EncoderModel, set: &[Prepared<'_>]) -> Result<f64, EncoderError> {
    let mut total = 0.0;
    for p in set {
        let z = model.network().forward(&p.x, None).z;
        total += cosine_loss(&z, &p.target)?;
    }
    Ok(total / set.len() as f64)
}

pub fn train(
    model: EncoderModel,
    train_set: &[TrainingExample<'_>],
    val_set: &[TrainingExample<'_>],
    tc: &TrainConfig,
) -> Result<EncoderModel, EncoderError> {
    train_observed(model, train_set, val_set, tc, &mut |_, _| Ok(()))
}

/// Like [`train`], calling `observer(epoch, batch_ids)` before every update.
/// An observer error aborts training.
pub fn train_observed(
    mut model: EncoderModel,
    train_set: &[TrainingExample<'_>],
    val_set: &[TrainingExample<'_>],
    tc: &TrainConfig,
    observer: &mut dyn FnMut(usize, &[&str]) -> Result<(), EncoderError>,
) -> Result<EncoderModel, EncoderError> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(EncoderError::EmptyTrainingSet);
    }
    let train_data = prepare(&model, train_set)?;
    let val_data = prepare(&model, val_set)?;
    let mut batch_rng = seed::named_rng(tc.seed, "batching");
    let mut dropout_rng = seed::named_rng(tc.seed, "dropout");
    let mut grads = vec![0.0; model.parameter_count()];
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..tc.epochs {
        let lr = tc.learning_rate_at(epoch);
        order.shuffle(&mut batch_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let ids: Vec<&str> = chunk.iter().map(|&i| train_data[i].id).collect();
            observer(epoch, &ids)?;
            let batch: Vec<(&[f64], &[f64])> =
                chunk.iter().map(|&i| (train_data[i].x.as_slice(), train_data[i].target.as_slice())).collect();
            let masks: Option<Vec<Vec<f64>>> = chunk.iter().map(|_| model.dropout_mask(&mut dropout_rng)).collect();
            let loss = model.loss_and_grad(&batch, masks, &mut grads)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(EncoderError::NonFiniteLoss {
                    epoch,
                    batch: ids.iter().map(|s| s.to_string()).collect(),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            let decay = 1.0 - lr * tc.weight_decay;
            for (p, g) in model.params.iter_mut().zip(&grads) {
                *p = *p * decay - lr * g;
            }
        }
        if let Some(seg) = model
            .segments()
            .iter()
            .find(|s| model.params[s.offset..s.offset + s.len()].iter().any(|v| !v.is_finite()))
        {
            return Err(EncoderError::NonFiniteParameter { epoch, segment: seg.name.clone() });
        }
        let val_loss = if val_data.is_empty() { None } else { Some(mean_loss(&model, &val_data)?) };
        model.training_history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / train_data.len() as f64,
            val_loss,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, pad_symmetric, SyntheticConfig};
    use crate::embedding::{EmbeddingProvider, OfflineProvider};
    use crate::encoder::EncoderConfig;

    fn mini() -> EncoderConfig {
        EncoderConfig {
            temporal_dilations: vec![1, 2],
            temporal_kernel: 3,
            spatial_kernel_channels: 0,
            residual_blocks: 1,
            hidden_width: 8,
            dropout_rate: 0.1,
            leaky_relu_slope: 0.01,
            output_dim: 768,
        }
    }

    struct Fixture {
        trials: Vec<EegTrial>,
        targets: Vec<EmbeddingVector>,
    }

    fn fixture(n: usize, snr: f64) -> Fixture {
        let corpus = pad_symmetric(&generate_synthetic(&SyntheticConfig::new(n, 4, 32, snr, 2)).unwrap()).unwrap();
        let p = OfflineProvider::new(0);
        let targets = corpus.trials.iter().map(|t| p.embed(corpus.text(&t.sentence_id).unwrap()).unwrap()).collect();
        Fixture { trials: corpus.trials, targets }
    }

    fn examples(f: &Fixture) -> Vec<TrainingExample<'_>> {
        f.trials
            .iter()
            .zip(&f.targets)
            .map(|(t, e)| TrainingExample { sentence_id: &t.sentence_id, trial: t, target: e })
            .collect()
    }

    #[test]
    fn seeded_runs_are_identical() {
        let f = fixture(8, 2.0);
        let ex = examples(&f);
        let tc = TrainConfig { epochs: 3, batch_size: 3, learning_rate: 0.05, seed: 9, ..TrainConfig::default() };
        let run = || train(EncoderModel::init(mini(), 4, 32, 9).unwrap(), &ex[..6], &ex[6..], &tc).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(a.training_history, b.training_history);
        assert_eq!(a.training_history.len(), 3);
        for h in &a.training_history {
            assert!((0.0..=2.0).contains(&h.train_loss));
            assert!((0.0..=2.0).contains(&h.val_loss.unwrap()));
        }
    }

    #[test]
    fn memorizes_a_small_high_snr_set() {
        let corpus = pad_symmetric(&generate_synthetic(&SyntheticConfig::new(10, 4, 64, 8.0, 2)).unwrap()).unwrap();
        let p = OfflineProvider::new(0);
        let targets: Vec<_> =
            corpus.trials.iter().map(|t| p.embed(corpus.text(&t.sentence_id).unwrap()).unwrap()).collect();
        let samples = corpus.max_samples();
        let f = Fixture { trials: corpus.trials, targets };
        let ex = examples(&f);
        let cfg = EncoderConfig {
            temporal_dilations: vec![1, 2, 4, 8],
            temporal_kernel: 7,
            residual_blocks: 2,
            hidden_width: 64,
            dropout_rate: 0.0,
            ..mini()
        };
        let tc = TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 2.0,
            weight_decay: 0.0,
            seed: 4,
            ..TrainConfig::default()
        };
        let model = train(EncoderModel::init(cfg, 4, samples, 4).unwrap(), &ex, &[], &tc).unwrap();
        let last = model.training_history.last().unwrap().train_loss;
        assert!(last < 0.05, "final train loss {last}");
    }

    #[test]
    fn observer_sees_every_example_each_epoch() {
        let f = fixture(7, 1.0);
        let ex = examples(&f);
        let tc = TrainConfig { epochs: 2, batch_size: 3, ..TrainConfig::default() };
        let mut seen = vec![Vec::new(); 2];
        train_observed(EncoderModel::init(mini(), 4, 32, 0).unwrap(), &ex, &[], &tc, &mut |e, ids| {
            seen[e].extend(ids.iter().map(|s| s.to_string()));
            Ok(())
        })
        .unwrap();
        for s in &mut seen {
            s.sort();
            let mut all: Vec<String> = ex.iter().map(|e| e.sentence_id.to_string()).collect();
            all.sort();
            assert_eq!(*s, all);
        }
    }

    #[test]
    fn rejects_unnormalized_targets_and_empty_sets() {
        let f = fixture(3, 1.0);
        let big = EmbeddingVector::new(vec![2.0; 768]).unwrap();
        let bad = [TrainingExample { sentence_id: "x", trial: &f.trials[0], target: &big }];
        let m = EncoderModel::init(mini(), 4, 32, 0).unwrap();
        assert!(matches!(
            train(m.clone(), &bad, &[], &TrainConfig::default()),
            Err(EncoderError::TargetNotNormalized { .. })
        ));
        assert!(matches!(train(m, &[], &[], &TrainConfig::default()), Err(EncoderError::EmptyTrainingSet)));
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let f = fixture(4, 1.0);
        let ex = examples(&f);
        let tc = TrainConfig {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e300,
            weight_decay: 0.0,
            lr_schedule: crate::encoder::LrSchedule::CosineAnnealing { min_lr: 1e299 },
            seed: 0,
        };
        let err = train(EncoderModel::init(mini(), 4, 32, 0).unwrap(), &ex, &[], &tc).unwrap_err();
        assert!(matches!(
            err,
            EncoderError::NonFiniteLoss { .. } | EncoderError::NonFiniteParameter { .. } | EncoderError::ZeroNorm
        ));
    }
}
