//! Adam, k-fold splitting, the training loop and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{volume_order, SliceSample};
use crate::error::{invalid, Error, Result};
use crate::metrics::{probs_to_mask, ClassWeights, ConfusionCounts, EvalAccumulator, EvalReport};
use crate::model::{ModelSpec, Network};
use crate::params::{apply_updates, Mode, ParamId, ParamStore, Session};
use crate::preprocess::{augment, AugmentSpec};
use crate::rng::{Rng, StreamKind};
use crate::tensor::Tensor;

/// Adam moments and hyper-parameters for every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments for the learnable tensors of `store`, in store order.
    pub fn new(store: &ParamStore<f32>, lr: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = store
            .learnable_ids()
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `grads` pairs each learnable id with its
/// gradient, in the order the state was created with.
pub fn adam_step(store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)], state: &mut AdamState) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(invalid("adam_step", format!("{} gradients for {} moments", grads.len(), state.m.len())));
    }
    for (k, (id, g)) in grads.iter().enumerate() {
        if g.shape() != store.get(*id).shape() || g.shape() != state.m[k].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: store.get(*id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {}", store.name(*id)),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, (id, g)) in grads.iter().enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = store.get_mut(*id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = state.lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            p[i] = (p[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Volume ids of the `(train, validation)` sides of fold `fold` out of
/// `folds`. Ids are sorted, shuffled with the `Split` substream of `seed`,
/// and dealt round-robin into folds.
pub fn kfold_volumes(ids: &[String], folds: usize, fold: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let mut unique: Vec<String> = ids.to_vec();
    unique.sort_by(|a, b| volume_order(a, b));
    unique.dedup();
    if folds < 2 || fold >= folds {
        return Err(invalid("kfold_split", format!("fold {fold} of {folds}: need folds >= 2 and fold < folds")));
    }
    if unique.len() < folds {
        return Err(invalid(
            "kfold_split",
            format!("{} volumes cannot fill {folds} folds", unique.len()),
        ));
    }
    Rng::substream(seed, StreamKind::Split, 0).shuffle(&mut unique);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (pos, id) in unique.into_iter().enumerate() {
        if pos % folds == fold {
            val.push(id);
        } else {
            train.push(id);
        }
    }
    train.sort_by(|a, b| volume_order(a, b));
    val.sort_by(|a, b| volume_order(a, b));
    Ok((train, val))
}

/// Split samples at volume granularity; see [`kfold_volumes`].
pub fn kfold_split(
    samples: &[SliceSample],
    folds: usize,
    fold: usize,
    seed: u64,
) -> Result<(Vec<SliceSample>, Vec<SliceSample>)> {
    let ids: Vec<String> = samples.iter().map(|s| s.volume_id.clone()).collect();
    let (_, val_ids) = kfold_volumes(&ids, folds, fold, seed)?;
    Ok(samples.iter().cloned().partition(|s| !val_ids.contains(&s.volume_id)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub clip_norm: f64,
    /// `None` applies no augmentation.
    pub augment: Option<AugmentSpec>,
    /// `None` derives inverse-frequency weights from the training split.
    pub class_weights: Option<Vec<f64>>,
    pub lesion_class: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            batch_size: 16,
            lr: 0.001,
            seed: 0,
            eval_every: 500,
            clip_norm: 5.0,
            augment: Some(AugmentSpec::default()),
            class_weights: None,
            lesion_class: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(invalid("train_config", m));
        if self.batch_size == 0 || self.iterations == 0 || self.eval_every == 0 {
            return bad("iterations, batch size and eval-every must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One log row. Validation columns are present only at evaluation points.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Dice of the training batch prediction.
    pub train_dice: f64,
    pub val_dice: Option<f64>,
    pub val_paper_score: Option<f64>,
    pub wall_time: f64,
}

pub const LOG_HEADER: &str = "iteration,loss,train_dice,val_dice,val_paper_score";

/// Deterministic log: every column except wall time.
pub fn log_csv(log: &[RunRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            r.loss,
            r.train_dice,
            opt(r.val_dice),
            opt(r.val_paper_score)
        );
    }
    out
}

/// `iteration,wall_time_s` rows, kept apart from the deterministic log.
pub fn timing_csv(log: &[RunRecord]) -> String {
    let mut out = String::from("iteration,wall_time_s\n");
    for r in log {
        let _ = writeln!(out, "{},{:.3}", r.iteration, r.wall_time);
    }
    out
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    /// Parameters at the best validation point (final parameters when there
    /// is no validation data).
    pub best_params: ParamStore<f32>,
    pub best_iteration: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub class_weights: ClassWeights,
    pub log: Vec<RunRecord>,
}

/// Stack samples into a `[B, 1, S, S]` batch and `[B, S, S]` labels.
pub fn stack_batch(samples: &[&SliceSample]) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let first = samples.first().ok_or_else(|| invalid("batch", "empty batch".to_string()))?;
    let s = first.size();
    let mut images = Vec::with_capacity(samples.len() * s * s);
    let mut labels = Vec::with_capacity(samples.len() * s * s);
    for sample in samples {
        if sample.image.shape() != [1, s, s] || sample.mask.shape() != [s, s] {
            return Err(invalid(
                "batch",
                format!("{}:{} does not match size {s}", sample.volume_id, sample.slice_index),
            ));
        }
        images.extend_from_slice(sample.image.data());
        labels.extend_from_slice(sample.mask.data());
    }
    let b = samples.len();
    Ok((Tensor::new(&[b, 1, s, s], images)?, Tensor::new(&[b, s, s], labels)?))
}

/// Indices drawn uniformly with replacement; if none carries the lesion
/// class, the first draw is replaced by a random lesion-bearing sample.
pub fn sample_batch(samples: &[SliceSample], lesion_pool: &[usize], batch: usize, rng: &mut Rng) -> Vec<usize> {
    let mut picks: Vec<usize> = (0..batch).map(|_| rng.below(samples.len())).collect();
    if !lesion_pool.is_empty() && !picks.iter().any(|i| lesion_pool.contains(i)) {
        picks[0] = lesion_pool[rng.below(lesion_pool.len())];
    }
    picks
}

struct StepResult {
    loss: f64,
    dice: f64,
}

fn train_step(
    net: &mut Network<f32>,
    adam: &mut AdamState,
    images: &Tensor<f32>,
    labels: &Tensor<u8>,
    weights: &[f32],
    dropout_rng: Rng,
    config: &TrainConfig,
) -> Result<StepResult> {
    let (loss, dice, mut grads, updates) = {
        let mut s = Session::new(&net.params, Mode::Train, dropout_rng);
        let x = s.tape.constant(images.clone());
        let out = net.forward(&mut s, x)?;
        let loss = s.tape.weighted_cross_entropy(out.probs, labels, weights)?;
        let value = s.tape.value(loss).item() as f64;
        let pred = probs_to_mask(s.tape.value(out.probs), config.lesion_class as usize)?;
        let truth = labels.map(|l| u8::from(l == config.lesion_class));
        let dice = ConfusionCounts::from_masks(&pred, &truth)?.dice();
        if !value.is_finite() {
            return Ok(StepResult { loss: value, dice });
        }
        let grads = s.tape.backward(loss)?;
        let updates = s.take_updates();
        (value, dice, s.param_grads(&grads), updates)
    };
    clip_global_norm(&mut grads, config.clip_norm);
    adam_step(&mut net.params, &grads, adam)?;
    apply_updates(&mut net.params, updates);
    Ok(StepResult { loss, dice })
}

fn class_weights_for(config: &TrainConfig, spec: &ModelSpec, train: &[SliceSample]) -> Result<ClassWeights> {
    match &config.class_weights {
        Some(w) if w.len() == spec.num_classes => ClassWeights::new(w.clone()),
        Some(w) => Err(invalid(
            "train",
            format!("{} class weights for {} classes", w.len(), spec.num_classes),
        )),
        None => ClassWeights::inverse_frequency(&ClassWeights::count_labels(
            spec.num_classes,
            train.iter().map(|s| &s.mask),
        )),
    }
}

/// Train `spec` from scratch on `train`, validating on `val` every
/// `eval_every` iterations and after the last one.
pub fn train(spec: &ModelSpec, config: &TrainConfig, train: &[SliceSample], val: &[SliceSample]) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(invalid("train", "training split is empty".to_string()));
    }
    let mut net = Network::<f32>::build(spec, config.seed)?;
    net.check_input(&[1, spec.input_channels, train[0].size(), train[0].size()])?;
    let weights = class_weights_for(config, spec, train)?;
    let wf: Vec<f32> = weights.as_slice().iter().map(|&w| w as f32).collect();
    let lesion_pool: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].has_label(config.lesion_class))
        .collect();
    let mut adam = AdamState::new(&net.params, config.lr);
    let mut log = Vec::with_capacity(config.iterations);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let start = Instant::now();
    for it in 0..config.iterations {
        let picks = sample_batch(
            train,
            &lesion_pool,
            config.batch_size,
            &mut Rng::substream(config.seed, StreamKind::Sampling, it as u64),
        );
        let augmented: Vec<SliceSample> = match &config.augment {
            None => picks.iter().map(|&i| train[i].clone()).collect(),
            Some(a) => picks
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let stream = (it * config.batch_size + j) as u64;
                    let mut rng = Rng::substream(config.seed, StreamKind::Augment, stream);
                    let (image, mask) = augment(&train[i].image, &train[i].mask, a, &mut rng)?;
                    Ok(SliceSample {
                        image,
                        mask,
                        ..train[i].clone()
                    })
                })
                .collect::<Result<_>>()?,
        };
        let (images, labels) = stack_batch(&augmented.iter().collect::<Vec<_>>())?;
        let dropout_rng = Rng::substream(config.seed, StreamKind::Dropout, it as u64);
        let step = train_step(&mut net, &mut adam, &images, &labels, &wf, dropout_rng, config)?;
        if !step.loss.is_finite() {
            let provenance: Vec<String> = picks
                .iter()
                .map(|&i| format!("{}:{}", train[i].volume_id, train[i].slice_index))
                .collect();
            return Err(Error::NonFinite {
                context: format!("loss {} at iteration {} on batch [{}]", step.loss, it + 1, provenance.join(", ")),
            });
        }
        let mut record = RunRecord {
            iteration: it + 1,
            loss: step.loss,
            train_dice: step.dice,
            val_dice: None,
            val_paper_score: None,
            wall_time: 0.0,
        };
        let last = it + 1 == config.iterations;
        if !val.is_empty() && ((it + 1) % config.eval_every == 0 || last) {
            let report = evaluate(&net, val, config.lesion_class, config.batch_size)?;
            let scores = report.mean.unwrap_or(report.global);
            record.val_dice = Some(scores.dice);
            record.val_paper_score = Some(scores.paper_score);
            if best.as_ref().is_none_or(|b| scores.dice > b.1) {
                best = Some((it + 1, scores.dice, net.params.clone()));
            }
        }
        record.wall_time = start.elapsed().as_secs_f64();
        log.push(record);
    }
    let (best_iteration, best_val_dice, best_params) = match best {
        Some((it, d, p)) => (Some(it), Some(d), p),
        None => (None, None, net.params.clone()),
    };
    Ok(TrainOutcome {
        network: net,
        best_params,
        best_iteration,
        best_val_dice,
        class_weights: weights,
        log,
    })
}

/// Inference-mode scores of `net` on `samples`, aggregated per volume.
pub fn evaluate(net: &Network<f32>, samples: &[SliceSample], lesion_class: u8, batch: usize) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let (images, labels) = stack_batch(&refs)?;
        let probs = net.predict(&images)?;
        let pred = probs_to_mask(&probs, lesion_class as usize)?;
        let s = chunk[0].size();
        for (k, sample) in chunk.iter().enumerate() {
            let p = Tensor::new(&[s, s], pred.data()[k * s * s..(k + 1) * s * s].to_vec())?;
            let t = labels.data()[k * s * s..(k + 1) * s * s]
                .iter()
                .map(|&l| u8::from(l == lesion_class))
                .collect();
            acc.add_slice(&sample.volume_id, &p, &Tensor::new(&[s, s], t)?)?;
        }
    }
    Ok(acc.finish())
}

/// Losses of `steps` consecutive Adam steps on one fixed batch in train
/// mode with a fixed dropout mask; entry `i` is the loss before step `i`.
pub fn descent_probe(
    net: &mut Network<f32>,
    config: &TrainConfig,
    batch: &[SliceSample],
    weights: &ClassWeights,
    steps: usize,
) -> Result<Vec<f64>> {
    let (images, labels) = stack_batch(&batch.iter().collect::<Vec<_>>())?;
    let wf: Vec<f32> = weights.as_slice().iter().map(|&w| w as f32).collect();
    let mut adam = AdamState::new(&net.params, config.lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let rng = Rng::substream(config.seed, StreamKind::Dropout, 0);
        losses.push(train_step(net, &mut adam, &images, &labels, &wf, rng, config)?.loss);
    }
    Ok(losses)
}
