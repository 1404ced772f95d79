use rand::seq::SliceRandom;
use rand::Rng;

use super::samples::{frustum_sample, jitter_box, refinement_sample, PreparedScene};
use crate::config::Config;
use crate::losses::{total_loss, LossConfig, SampleTargets};
use crate::net::{Mode, Network, SampleInput};
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::{Error, Result};

/// Losses recorded during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Total loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean step loss of every epoch that ran at least one step.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Batches that produced no usable sample.
    pub skipped_batches: usize,
}

/// One forward/backward/update step on a batch; returns the total loss.
pub fn train_step(
    net: &mut Network,
    adam: &mut Adam,
    batch: &[(SampleInput, SampleTargets)],
    loss_cfg: &LossConfig,
    lr: f64,
    bn_momentum: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = net.params.bind(&mut tape, true);
    let inputs: Vec<SampleInput> = batch.iter().map(|b| b.0.clone()).collect();
    let targets: Vec<SampleTargets> = batch.iter().map(|b| b.1.clone()).collect();
    let out = net.forward(&mut tape, &vars, &inputs, Mode::Train)?;
    let loss = total_loss(&mut tape, out.cls_logits, out.reg, &targets, loss_cfg)?;
    let value = tape.value(loss.total).item();
    if !value.is_finite() {
        return Err(Error::Invalid(format!("training loss became {value}")));
    }
    let grads = tape.backward(loss.total)?;
    let ids = net.params.trainable_ids();
    let grad_slices: Vec<Option<&[f64]>> = ids.iter().map(|&i| grads.get(vars[i])).collect();
    let mut params = net.params.trainable_slices_mut();
    adam.step(&mut params, &grad_slices, lr);
    net.update_running_stats(&out.bn_stats, bn_momentum)?;
    Ok(value)
}

/// Minibatch training over `n_items` items. `make(i, rng)` builds item `i`
/// or returns `None` to skip it. Items are shuffled every epoch. With
/// `cfg.steps > 0` training runs exactly that many steps, cycling epochs as
/// needed and spreading the epoch learning-rate schedule over the step
/// budget; otherwise it runs `cfg.epochs` epochs.
pub fn train_network<R, F>(
    net: &mut Network,
    n_items: usize,
    cfg: &Config,
    rng: &mut R,
    mut make: F,
) -> Result<TrainReport>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &mut R) -> Result<Option<(SampleInput, SampleTargets)>>,
{
    let mut report = TrainReport::default();
    if n_items == 0 || (cfg.steps == 0 && cfg.epochs == 0) {
        return Ok(report);
    }
    let loss_cfg = LossConfig::from_config(cfg);
    let mut adam = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut epoch = 0;
    loop {
        if cfg.steps == 0 && epoch >= cfg.epochs {
            break;
        }
        order.shuffle(rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(batch_size) {
            if cfg.steps > 0 && report.steps >= cfg.steps {
                break;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if let Some(item) = make(i, rng)? {
                    batch.push(item);
                }
            }
            if batch.is_empty() {
                log::warn!("epoch {epoch}: skipping a batch with no usable samples");
                report.skipped_batches += 1;
                continue;
            }
            let lr = cfg.lr_at_epoch(
                (report.steps * cfg.epochs.max(1))
                    .checked_div(cfg.steps)
                    .unwrap_or(epoch),
            );
            let loss = train_step(net, &mut adam, &batch, &loss_cfg, lr, cfg.bn_momentum)?;
            report.step_losses.push(loss);
            report.steps += 1;
            epoch_sum += loss;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            if cfg.steps > 0 && report.steps < cfg.steps {
                return Err(Error::Invalid("no trainable samples: every batch was empty".into()));
            }
        } else {
            let mean = epoch_sum / epoch_steps as f64;
            log::info!("epoch {epoch}: mean loss {mean:.6} over {epoch_steps} steps");
            report.epoch_losses.push(mean);
        }
        epoch += 1;
        if cfg.steps > 0 && report.steps >= cfg.steps {
            break;
        }
    }
    Ok(report)
}

/// Trains the first-stage network on every proposal of every labeled scene.
pub fn train_first_stage<R: Rng + ?Sized>(
    net: &mut Network,
    scenes: &[PreparedScene],
    cfg: &Config,
    rng: &mut R,
) -> Result<TrainReport> {
    let items: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.labeled)
        .flat_map(|(i, s)| (0..s.proposals.len()).map(move |p| (i, p)))
        .collect();
    train_network(net, items.len(), cfg, rng, |i, rng| {
        let (s, p) = items[i];
        let scene = &scenes[s];
        let sample = frustum_sample(scene, &scene.proposals[p], cfg, cfg.augment, rng)?;
        if sample.point_count == 0 {
            return Ok(None);
        }
        let targets = sample.targets(cfg.shrink_ratio);
        Ok(Some((sample.input, targets)))
    })
}

/// Trains the refinement network on crops around jittered ground truths.
pub fn train_refinement<R: Rng + ?Sized>(
    net: &mut Network,
    scenes: &[PreparedScene],
    cfg: &Config,
    rng: &mut R,
) -> Result<TrainReport> {
    let items: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.gts.len()).map(move |g| (i, g)))
        .collect();
    train_network(net, items.len(), cfg, rng, |i, rng| {
        let (s, g) = items[i];
        let scene = &scenes[s];
        let input_box = jitter_box(&scene.gts[g].0, cfg.refine_jitter, rng);
        let Some(sample) = refinement_sample(scene, &input_box, cfg, rng)? else {
            return Ok(None);
        };
        let targets = sample.targets(cfg.shrink_ratio);
        Ok(Some((sample.input, targets)))
    })
}
