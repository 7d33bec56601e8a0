//! Shared minibatch loop: per-example graphs, summed gradients, one Adam step per batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Gradients;
use super::optim::Adam;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Per-epoch mean losses plus the number of optimizer steps taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Run `opts.epochs` passes over `examples` in a seeded shuffled order.
///
/// `loss_and_grads` builds one example's graph (using the trainable mask it is
/// given) and returns its loss and gradients. Gradients are averaged over the
/// batch in example order, so results do not depend on scheduling.
pub fn train_minibatch<E, F>(
    store: &mut ParamStore,
    trainable: &[ParamId],
    examples: &[E],
    opts: TrainOptions,
    label: &str,
    mut loss_and_grads: F,
) -> Result<TrainLog>
where
    F: FnMut(&ParamStore, &[bool], &E, &mut ChaCha8Rng) -> Result<(f64, Gradients)>,
{
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut mask = vec![false; store.len()];
    for id in trainable {
        mask[id.index()] = true;
    }
    let adam = Adam::new(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = opts.batch_size.max(1);
    let mut log = TrainLog::default();
    store.zero_grad();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            for &i in chunk {
                let (loss, grads) = loss_and_grads(store, &mask, &examples[i], &mut rng)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteObjective);
                }
                total += loss;
                grads.accumulate_into(store);
            }
            let inv = 1.0 / chunk.len() as f64;
            for id in trainable {
                store.param_mut(*id).grad.scale_assign(inv);
            }
            adam.step(store, trainable);
            store.zero_grad();
            log.steps += 1;
        }
        let mean = total / examples.len() as f64;
        log::info!("{label}: epoch {} loss {mean:.5}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    Ok(log)
}
