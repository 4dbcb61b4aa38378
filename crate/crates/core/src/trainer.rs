//! The semi-supervised training loop: half-labeled/half-unlabeled batches,
//! Dice supervision on the student, flip-consistency against the EMA
//! teacher, Adam on the student, then the teacher's EMA step.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::augment::{augment_sample, flip_pair, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval::{check_threshold, evaluate_model, EvalReport, DEFAULT_THRESHOLD};
use crate::losses::{dice_loss, feat_consistency, seg_consistency, LossBreakdown, LossWeights};
use crate::math;
use crate::model::{ema_update, forward, init_model, predict, ModelConfig, ModelParams};
use crate::optim::AdamState;
use crate::rng::{self, tag};
use crate::synthworld::Sample;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Even; half the batch is labeled, half unlabeled.
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// First 0-based epoch trained at `lr_final`; `None` means 60% of `epochs`.
    pub lr_decay_epoch: Option<usize>,
    pub loss_weights: LossWeights,
    pub ema_decay: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Evaluate the teacher every this many epochs (and after the last);
    /// 0 evaluates after the last epoch only.
    pub eval_every: usize,
    pub threshold: f64,
    /// Also feed the labeled images, without labels, to the unlabeled stream.
    pub unlabeled_includes_labeled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            lr_decay_epoch: None,
            loss_weights: LossWeights::default(),
            ema_decay: 0.999,
            augment: AugmentConfig::default(),
            seed: 0,
            eval_every: 5,
            threshold: DEFAULT_THRESHOLD,
            unlabeled_includes_labeled: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidValue(format!("batch_size must be even and >= 2, got {}", self.batch_size)));
        }
        if !(self.lr_final > 0.0 && self.lr_initial >= self.lr_final && self.lr_initial.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "need lr_initial >= lr_final > 0, got {} and {}",
                self.lr_initial, self.lr_final
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidValue(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        check_threshold(self.threshold)?;
        self.loss_weights.validate()?;
        self.augment.validate()
    }

    pub fn decay_epoch(&self) -> usize {
        self.lr_decay_epoch
            .unwrap_or_else(|| math::round(self.epochs as f64 * 0.6) as usize)
    }

    /// Learning rate used throughout 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch() {
            self.lr_initial
        } else {
            self.lr_final
        }
    }

    pub fn half_batch(&self) -> usize {
        self.batch_size / 2
    }

    fn evaluates_after(&self, epoch: usize) -> bool {
        epoch == self.epochs || (self.eval_every > 0 && epoch % self.eval_every == 0)
    }
}

/// Endless reshuffled index stream over `0..n`; each pass uses a fresh
/// permutation drawn from its own rng stream.
#[derive(Clone, Debug)]
struct IndexCycler {
    n: usize,
    seed: u64,
    tag: u64,
    cycle: u64,
    order: Vec<usize>,
    pos: usize,
}

impl IndexCycler {
    fn new(n: usize, seed: u64, tag: u64) -> Self {
        IndexCycler {
            n,
            seed,
            tag,
            cycle: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng::stream(self.seed, &[self.tag, self.cycle]));
            self.cycle += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Draws half-labeled, half-unlabeled index batches.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    half: usize,
    labeled: IndexCycler,
    unlabeled: Option<IndexCycler>,
}

impl BatchSampler {
    /// `n_unlabeled` may be 0 only for supervised-only training.
    pub fn new(n_labeled: usize, n_unlabeled: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_labeled == 0 {
            return Err(Error::EmptyDataset("labeled"));
        }
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::InvalidValue(format!("batch_size must be even and >= 2, got {batch_size}")));
        }
        Ok(BatchSampler {
            half: batch_size / 2,
            labeled: IndexCycler::new(n_labeled, seed, tag::SHUFFLE_LABELED),
            unlabeled: (n_unlabeled > 0).then(|| IndexCycler::new(n_unlabeled, seed, tag::SHUFFLE_UNLABELED)),
        })
    }

    /// Batches per epoch: enough to pass once over the larger set.
    pub fn steps_per_epoch(&self) -> usize {
        let larger = self.labeled.n.max(self.unlabeled.as_ref().map_or(0, |u| u.n));
        larger.div_ceil(self.half)
    }

    /// `(labeled indices, unlabeled indices)`, `batch_size / 2` each (the
    /// unlabeled half is empty when there is no unlabeled set).
    pub fn make_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        let labeled = (0..self.half).map(|_| self.labeled.next()).collect();
        let unlabeled = match &mut self.unlabeled {
            Some(u) => (0..self.half).map(|_| u.next()).collect(),
            None => Vec::new(),
        };
        (labeled, unlabeled)
    }
}

/// Student, teacher and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    /// Student and teacher from independent init streams of `seed`.
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self> {
        let student = init_model(model, &mut rng::stream(seed, &[tag::INIT_STUDENT]))?;
        let teacher = init_model(model, &mut rng::stream(seed, &[tag::INIT_TEACHER]))?;
        Ok(TrainState {
            adam: AdamState::new(student.tensors().iter().map(|(_, t)| t)),
            student,
            teacher,
            step: 0,
        })
    }
}

fn add_grads(acc: &mut [Tensor], grads: Vec<Tensor>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
    }
}

/// One optimisation step on an already augmented batch.
///
/// The supervised loss is the mean per-sample Dice over `labeled`; the
/// consistency losses are means over `unlabeled`, comparing the teacher's
/// outputs with the student's outputs on the flipped view, flipped back.
/// The teacher runs with its pre-step parameters and only ever changes
/// through the EMA update at the end.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[Sample],
    unlabeled: &[Sample],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    if labeled.is_empty() {
        return Err(Error::EmptyDataset("labeled half of batch"));
    }
    let w = cfg.loss_weights;
    let student = &state.student;
    let mut grads: Vec<Tensor> = student.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();

    let mut sup = 0.0;
    let scale = 1.0 / labeled.len() as f64;
    for s in labeled {
        let gt = s.gt_bev.as_ref().ok_or(Error::EmptyDataset("labeled sample without ground truth"))?;
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let out = forward(student, &bound, &mut tape, &s.image, &s.intrinsics)?;
        let gt = tape.constant(gt.values().clone());
        let dice = dice_loss(&mut tape, out.segmentation, gt)?;
        let scaled = tape.mul_scalar(dice, scale);
        sup += tape.value(dice).data()[0];
        add_grads(&mut grads, bound.gradients(&tape.backward(scaled)?, student));
    }
    sup *= scale;

    let (mut sc, mut fc) = (0.0, 0.0);
    if !w.is_supervised_only() && !unlabeled.is_empty() {
        let scale = 1.0 / unlabeled.len() as f64;
        for s in unlabeled {
            let (f_teacher, y_teacher) = predict(&state.teacher, &s.image, &s.intrinsics)?;
            let flipped = flip_pair(s);
            let mut tape = Tape::new();
            let bound = student.bind(&mut tape, true);
            let out = forward(student, &bound, &mut tape, &flipped.image, &flipped.intrinsics)?;
            let y_back = tape.flip_last(out.segmentation);
            let f_back = tape.flip_last(out.bev_feature);
            let y_teacher = tape.constant(y_teacher);
            let f_teacher = tape.constant(f_teacher);
            let l_sc = seg_consistency(&mut tape, y_teacher, y_back)?;
            let l_fc = feat_consistency(&mut tape, f_teacher, f_back)?;
            sc += tape.value(l_sc).data()[0];
            fc += tape.value(l_fc).data()[0];
            let a = tape.mul_scalar(l_sc, w.lambda1 * scale);
            let b = tape.mul_scalar(l_fc, w.lambda2 * scale);
            let weighted = tape.add(a, b)?;
            add_grads(&mut grads, bound.gradients(&tape.backward(weighted)?, student));
        }
        sc *= scale;
        fc *= scale;
    }

    let losses = LossBreakdown::new(sup, sc, fc, w);
    let step = state.step + 1;
    if !losses.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("{losses:?}"),
        });
    }
    if let Some((name, _)) = student.tensors().iter().zip(&grads).find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("non-finite gradient for {}", name.0),
        });
    }
    state.adam.step(state.student.iter_mut(), &grads, lr)?;
    ema_update(&mut state.teacher, &state.student, cfg.ema_decay)?;
    state.step = step;
    Ok(losses)
}

/// Labeled, unlabeled and evaluation samples.
#[derive(Clone, Copy, Debug)]
pub struct Datasets<'a> {
    pub labeled: &'a [Sample],
    pub unlabeled: &'a [Sample],
    pub eval: &'a [Sample],
}

/// Summary of one finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's steps.
    pub losses: LossBreakdown,
    /// Teacher evaluation, on evaluation epochs with a non-empty eval set.
    pub eval: Option<EvalReport>,
}

fn augment_all(samples: &[&Sample], cfg: &TrainConfig, step: u64, half: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .enumerate()
        .map(|(slot, s)| {
            if cfg.augment.is_disabled() {
                return Ok((*s).clone());
            }
            let mut r = rng::stream(cfg.seed, &[tag::AUGMENT, step, half, slot as u64]);
            augment_sample(&mut r, s, &cfg.augment).map(|(s, _)| s)
        })
        .collect()
}

/// Trains from a fresh state, calling `on_epoch` after every epoch.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: Datasets<'_>,
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    model.validate()?;
    let mut state = TrainState::init(model, cfg.seed)?;
    let consistency = !cfg.loss_weights.is_supervised_only();
    let mut pool: Vec<Sample> = Vec::new();
    if consistency {
        pool.extend(data.unlabeled.iter().cloned());
        if cfg.unlabeled_includes_labeled {
            pool.extend(data.labeled.iter().map(|s| Sample {
                gt_bev: None,
                ..s.clone()
            }));
        }
        if pool.is_empty() {
            return Err(Error::EmptyDataset("unlabeled"));
        }
    }
    // supervised-only runs keep the same schedule as their semi-supervised
    // counterparts: the epoch length still follows the unlabeled set
    let schedule_unlabeled = if consistency { pool.len() } else { data.unlabeled.len() };
    let mut sampler = BatchSampler::new(data.labeled.len(), schedule_unlabeled, cfg.batch_size, cfg.seed)?;
    let steps = sampler.steps_per_epoch();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch - 1);
        let mut sum = LossBreakdown::default();
        for _ in 0..steps {
            let (li, ui) = sampler.make_batch();
            let labeled: Vec<&Sample> = li.iter().map(|&i| &data.labeled[i]).collect();
            let unlabeled: Vec<&Sample> = if consistency { ui.iter().map(|&i| &pool[i]).collect() } else { Vec::new() };
            let labeled = augment_all(&labeled, cfg, state.step, 0)?;
            let unlabeled = augment_all(&unlabeled, cfg, state.step, 1)?;
            let l = train_step(&mut state, &labeled, &unlabeled, cfg, lr)?;
            sum.sup += l.sup;
            sum.sc += l.sc;
            sum.fc += l.fc;
        }
        let n = steps as f64;
        let losses = LossBreakdown::new(sum.sup / n, sum.sc / n, sum.fc / n, cfg.loss_weights);
        let eval = if cfg.evaluates_after(epoch) && !data.eval.is_empty() {
            Some(evaluate_model(&state.teacher, data.eval, cfg.threshold)?)
        } else {
            None
        };
        on_epoch(&state, &EpochRecord { epoch, lr, losses, eval })?;
    }
    Ok(state)
}
