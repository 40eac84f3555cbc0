use super::{sequence_loss, GptConfig, GptError, GptModel};
use crate::corpus::{Corpus, TrainingView};
use crate::nn::{clip_grad_norm, linear_decay_lr, AdamWConfig, OptState, ParamSet, Tensor};
use crate::rng::StreamRng;
use crate::tokenizer::{encode, VOCAB_SIZE};

/// Optimizer and schedule settings shared by every trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub adamw: AdamWConfig,
    pub grad_clip: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean loss of each optimizer step.
    pub step_losses: Vec<f64>,
    /// Token-weighted mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Seeded shuffle of `0..n` into consecutive batches, one plan per epoch.
pub fn batch_plan(n: usize, batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    StreamRng::stream(seed, 0xe90c_0000 + epoch as u64).shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Result of one forward/backward pass over a batch.
pub struct StepOutput {
    pub loss: f64,
    pub tokens: usize,
    pub grads: Vec<Tensor<f32>>,
}

/// Runs AdamW over pre-planned epochs. `step_fn` receives the current
/// parameters, the batch of item indices and the global step number, and
/// `after_step` runs once the update is applied.
pub fn run_training<E: From<GptError>>(
    params: &mut ParamSet<f32>,
    spec: &LoopSpec,
    plans: &[Vec<Vec<usize>>],
    mut step_fn: impl FnMut(&ParamSet<f32>, &[usize], u64) -> Result<StepOutput, E>,
    mut after_step: impl FnMut(&mut ParamSet<f32>, u64),
) -> Result<TrainReport, E> {
    let total: u64 = plans.iter().map(|p| p.len() as u64).sum();
    let mut opt = OptState::new(params, spec.adamw);
    let mut report = TrainReport::default();
    for (epoch, plan) in plans.iter().enumerate() {
        let (mut loss_sum, mut tok_sum) = (0.0, 0usize);
        for batch in plan {
            let step = report.steps;
            let mut out = step_fn(params, batch, step)?;
            if !out.loss.is_finite() {
                return Err(GptError::NonFiniteLoss {
                    step,
                    loss: out.loss,
                }
                .into());
            }
            clip_grad_norm(&mut out.grads, spec.grad_clip);
            let lr = linear_decay_lr(step, total, spec.base_lr);
            opt.step(params, &out.grads, lr).map_err(GptError::from)?;
            after_step(params, step);
            report.step_losses.push(out.loss);
            loss_sum += out.loss * out.tokens as f64;
            tok_sum += out.tokens;
            report.steps += 1;
            log::debug!("step {step} lr {lr:.3e} loss {:.4}", out.loss);
        }
        let mean = loss_sum / tok_sum.max(1) as f64;
        log::info!("epoch {} mean loss {mean:.4}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    if !params.all_finite() {
        return Err(GptError::NonFiniteLoss {
            step: report.steps,
            loss: f64::NAN,
        }
        .into());
    }
    Ok(report)
}

/// Trains `model` in place on framed token sequences.
pub fn train_sequences(model: &mut GptModel, seqs: &[Vec<u32>]) -> Result<TrainReport, GptError> {
    if seqs.is_empty() {
        return Err(GptError::EmptyTraining);
    }
    let cfg = model.config.clone();
    let spec = cfg.loop_spec();
    let plans: Vec<_> = (0..cfg.epochs)
        .map(|e| batch_plan(seqs.len(), cfg.batch_size, e, cfg.seed))
        .collect();
    run_training::<GptError>(
        &mut model.params,
        &spec,
        &plans,
        |params, batch, step| {
            let rows: Vec<&[u32]> = batch.iter().map(|&i| seqs[i].as_slice()).collect();
            let mut rng = StreamRng::stream(cfg.seed, 0xd40f_0000_0000 + step);
            let mut drop = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
            let (mut g, loss, tokens) = sequence_loss(params, &cfg, &rows, &mut drop)?;
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss, params)?;
            Ok(StepOutput {
                loss: value,
                tokens,
                grads,
            })
        },
        |_, _| {},
    )
}

/// Trains a fresh password model on a corpus view.
pub fn train(
    corpus: &Corpus,
    cfg: &GptConfig,
    view: TrainingView,
) -> Result<(GptModel, TrainReport), GptError> {
    if cfg.vocab != VOCAB_SIZE {
        return Err(GptError::Config(format!(
            "password models need vocab {VOCAB_SIZE}, got {}",
            cfg.vocab
        )));
    }
    if corpus.max_len > cfg.max_len {
        return Err(GptError::Config(format!(
            "corpus max_len {} exceeds model max_len {}",
            corpus.max_len, cfg.max_len
        )));
    }
    let seqs = corpus
        .view(view)
        .into_iter()
        .map(|pw| encode(pw, cfg.max_len).map(|t| t.into_ids()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut model = GptModel::init(cfg.clone())?;
    let report = train_sequences(&mut model, &seqs)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_plan_is_a_seeded_permutation() {
        let p = batch_plan(10, 4, 0, 7);
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        let mut all: Vec<usize> = p.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(p, batch_plan(10, 4, 0, 7));
        assert_ne!(p, batch_plan(10, 4, 1, 7));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let corpus = Corpus::from_counts("t", 4, [(&b"ab"[..], 3), (&b"cd"[..], 1)]);
        let cfg = GptConfig {
            d_model: 16,
            heads: 2,
            layers: 1,
            max_len: 4,
            batch_size: 4,
            epochs: 20,
            base_lr: 1e-2,
            dropout: 0.1,
            seed: 3,
            ..Default::default()
        };
        let (m1, r1) = train(&corpus, &cfg, TrainingView::AllOccurrences).unwrap();
        let (m2, r2) = train(&corpus, &cfg, TrainingView::AllOccurrences).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.params, m2.params);
        assert!(r1.final_loss() < r1.epoch_losses[0]);
        assert!(r1.final_loss() < (258f64).ln());
    }

    #[test]
    fn corpus_longer_than_model_is_rejected() {
        let corpus = Corpus::from_counts("t", 16, [(&b"ab"[..], 1)]);
        let cfg = GptConfig {
            max_len: 8,
            ..Default::default()
        };
        assert!(matches!(
            train(&corpus, &cfg, TrainingView::Unique),
            Err(GptError::Config(_))
        ));
    }

    #[test]
    fn exploding_learning_rate_reports_non_finite_loss() {
        let mut m = GptModel::init(GptConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            max_len: 3,
            batch_size: 2,
            epochs: 50,
            base_lr: 1e30,
            grad_clip: 0.0,
            dropout: 0.0,
            ..Default::default()
        })
        .unwrap();
        let seqs = vec![vec![256, 1, 2, 257], vec![256, 3, 257]];
        assert!(matches!(
            train_sequences(&mut m, &seqs),
            Err(GptError::NonFiniteLoss { .. })
        ));
    }
}
