use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AblationMode, Classifier, DiscriminatorVars, DomainDiscriminator, RelationGate, WeightSet};
use crate::encoder::{Encoder, FeaturizedInstance};
use crate::error::{Error, Result};
use crate::tensor::{Adam, Tape, Tensor, Var};

/// Reversal strength over training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant,
    /// `lambda · (2 / (1 + exp(-10 p)) - 1)` with `p` the training progress.
    Warmup,
}

impl std::str::FromStr for LambdaSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LambdaSchedule::Constant),
            "warmup" => Ok(LambdaSchedule::Warmup),
            _ => Err(Error::config(format!("unknown lambda schedule {s:?} (constant|warmup)"))),
        }
    }
}

impl std::fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LambdaSchedule::Constant => "constant",
            LambdaSchedule::Warmup => "warmup",
        })
    }
}

/// Optimization settings shared by every training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// One batch holding the whole set, no shuffling.
    pub full_batch: bool,
    pub source_epochs: usize,
    pub aux_epochs: usize,
    pub adapt_epochs: usize,
    pub finetune_epochs: usize,
    /// Epochs without source-dev improvement before stopping; 0 disables.
    pub patience: usize,
    pub lambda: f64,
    pub lambda_schedule: LambdaSchedule,
    pub bce_eps: f64,
    /// Alpha used by the `no_gate` ablation.
    pub fixed_alpha: f64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 50,
            full_batch: false,
            source_epochs: 20,
            aux_epochs: 3,
            adapt_epochs: 10,
            finetune_epochs: 5,
            patience: 0,
            lambda: 1.0,
            lambda_schedule: LambdaSchedule::Warmup,
            bce_eps: 1e-7,
            fixed_alpha: 0.5,
            hidden: 100,
        }
    }
}

impl TrainConfig {
    fn lambda_at(&self, step: usize, total: usize) -> f64 {
        match self.lambda_schedule {
            LambdaSchedule::Constant => self.lambda,
            LambdaSchedule::Warmup => {
                let p = step as f64 / total.max(1) as f64;
                self.lambda * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
            }
        }
    }

    fn batches<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        if self.full_batch {
            return vec![idx];
        }
        idx.shuffle(rng);
        idx.chunks(self.batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

/// One line of a stage's training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub step: String,
    pub epoch: usize,
    pub loss: f64,
    pub metric: Option<f64>,
}

fn labels_of(data: &[FeaturizedInstance], classes: usize) -> Result<Vec<usize>> {
    data.iter()
        .enumerate()
        .map(|(i, x)| match x.label {
            Some(l) if l < classes => Ok(l),
            Some(l) => Err(Error::Data(format!("instance {i}: label {l} outside {classes} classes"))),
            None => Err(Error::Data(format!("instance {i} has no label"))),
        })
        .collect()
}

fn stack_constant(tape: &mut Tape, feats: &[Tensor], rows: &[usize]) -> Result<Var> {
    let dim = feats.first().map(|f| f.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        data.extend_from_slice(feats[r].data());
    }
    tape.input(vec![rows.len(), dim], data)
}

fn encode_rows(tape: &mut Tape, enc: &Encoder, vars: &crate::encoder::EncoderVars, data: &[FeaturizedInstance], rows: &[usize]) -> Result<Var> {
    let feats = rows
        .iter()
        .map(|&r| enc.forward(tape, vars, &data[r]))
        .collect::<Result<Vec<_>>>()?;
    tape.stack_rows(&feats)
}

fn finite(stage: &str, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite loss during {stage}")))
    }
}

/// Features of every instance, in order, without recording gradients.
pub fn encode_all(enc: &Encoder, data: &[FeaturizedInstance]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(128) {
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape, false);
        for inst in chunk {
            let f = enc.forward(&mut tape, &vars, inst)?;
            out.push(tape.to_tensor(f));
        }
    }
    Ok(out)
}

fn class_probabilities(enc: &Encoder, cls: &Classifier, data: &[FeaturizedInstance]) -> Result<Vec<Vec<f64>>> {
    encode_all(enc, data)?
        .iter()
        .map(|f| cls.probabilities(f))
        .collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over a labeled set.
pub fn classification_loss(enc: &Encoder, cls: &Classifier, data: &[FeaturizedInstance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("classification loss of an empty set"));
    }
    let labels = labels_of(data, cls.classes())?;
    let probs = class_probabilities(enc, cls, data)?;
    let total: f64 = probs
        .iter()
        .zip(&labels)
        .map(|(p, &l)| -p[l].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / data.len() as f64)
}

/// Fraction of labeled instances whose argmax prediction matches.
pub fn evaluate_accuracy(enc: &Encoder, cls: &Classifier, data: &[FeaturizedInstance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let labels = labels_of(data, cls.classes())?;
    let probs = class_probabilities(enc, cls, data)?;
    let hits = probs.iter().zip(&labels).filter(|(p, &l)| argmax(p) == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Label and probability vector over the full source label space.
pub fn predict_target(inst: &FeaturizedInstance, enc: &Encoder, cls: &Classifier) -> Result<(usize, Vec<f64>)> {
    let f = enc.encode(inst)?;
    let p = cls.probabilities(&f)?;
    Ok((argmax(&p), p))
}

#[allow(clippy::too_many_arguments)]
fn train_classifier<R: Rng + ?Sized>(
    step: &str,
    data: &[FeaturizedInstance],
    dev: &[FeaturizedInstance],
    enc: &mut Encoder,
    cls: &mut Classifier,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochLog>> {
    let labels = labels_of(data, cls.classes())?;
    labels_of(dev, cls.classes())?;
    let mut enc_opt = Adam::new(cfg.lr);
    let mut cls_opt = Adam::new(cfg.lr);
    let mut logs = Vec::with_capacity(epochs);
    let mut best: Option<(f64, Encoder, Classifier)> = None;
    let mut stale = 0;
    for epoch in 1..=epochs {
        let mut total = 0.0;
        for batch in cfg.batches(data.len(), rng) {
            let mut tape = Tape::new();
            let ev = enc.bind(&mut tape, true);
            let cv = cls.bind(&mut tape, true);
            let feats = encode_rows(&mut tape, enc, &ev, data, &batch)?;
            let logits = cls.logits(&mut tape, &cv, feats)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let ce = tape.softmax_cross_entropy(logits, &batch_labels)?;
            let loss = tape.mean(ce);
            let value = tape.scalar(loss);
            finite(step, value)?;
            total += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            enc.accumulate(&ev, &grads);
            cls.accumulate(&cv, &grads);
            enc_opt.step(&mut enc.params_mut());
            cls_opt.step(&mut cls.params_mut());
        }
        let metric = if dev.is_empty() { None } else { Some(evaluate_accuracy(enc, cls, dev)?) };
        log::info!("{step} epoch {epoch}: loss {:.6}", total / data.len() as f64);
        logs.push(EpochLog {
            step: step.to_string(),
            epoch,
            loss: total / data.len() as f64,
            metric,
        });
        if let (Some(acc), true) = (metric, cfg.patience > 0) {
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, enc.clone(), cls.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, e, c)) = best {
        *enc = e;
        *cls = c;
    }
    Ok(logs)
}

/// Outcome of supervised source training.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub dev_accuracy: Option<f64>,
    pub logs: Vec<EpochLog>,
}

/// Trains `enc` and `cls` on labeled source data, then freezes both.
pub fn pretrain_source<R: Rng + ?Sized>(
    train: &[FeaturizedInstance],
    dev: &[FeaturizedInstance],
    enc: &mut Encoder,
    cls: &mut Classifier,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::contract("source training set is empty"));
    }
    let logs = train_classifier("pretrain_source", train, dev, enc, cls, cfg.source_epochs, cfg, rng)?;
    enc.freeze();
    cls.freeze();
    let dev_accuracy = if dev.is_empty() { None } else { Some(evaluate_accuracy(enc, cls, dev)?) };
    Ok(PretrainReport { dev_accuracy, logs })
}

/// Mean of the predicted class distributions over the target set.
pub fn compute_category_weights(target: &[FeaturizedInstance], enc_s: &Encoder, cls: &Classifier) -> Result<Vec<f64>> {
    if target.is_empty() {
        return Err(Error::contract("category weights need at least one target instance"));
    }
    let probs = class_probabilities(enc_s, cls, target)?;
    Ok(mean_rows(&probs))
}

pub(crate) fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter().map(|a| a / n).collect()
}

/// Unweighted domain log-loss: mean source term plus mean target term.
pub fn domain_loss(
    tape: &mut Tape,
    d: &DomainDiscriminator,
    vars: &DiscriminatorVars,
    source: Var,
    target: Var,
    eps: f64,
) -> Result<Var> {
    let ps = d.forward(tape, vars, source)?;
    let ones = vec![1.0; tape.value(ps).len()];
    let ls = tape.binary_cross_entropy(ps, &ones, eps)?;
    let ls = tape.mean(ls);
    target_term(tape, d, vars, target, eps, ls)
}

/// Domain log-loss with per-source-instance weights on the source term.
pub fn weighted_domain_loss(
    tape: &mut Tape,
    d: &DomainDiscriminator,
    vars: &DiscriminatorVars,
    source: Var,
    target: Var,
    weights: Var,
    eps: f64,
) -> Result<Var> {
    let ps = d.forward(tape, vars, source)?;
    let ones = vec![1.0; tape.value(ps).len()];
    let ls = tape.binary_cross_entropy(ps, &ones, eps)?;
    let ls = tape.mul(weights, ls)?;
    let ls = tape.mean(ls);
    target_term(tape, d, vars, target, eps, ls)
}

fn target_term(
    tape: &mut Tape,
    d: &DomainDiscriminator,
    vars: &DiscriminatorVars,
    target: Var,
    eps: f64,
    source_term: Var,
) -> Result<Var> {
    let pt = d.forward(tape, vars, target)?;
    let zeros = vec![0.0; tape.value(pt).len()];
    let lt = tape.binary_cross_entropy(pt, &zeros, eps)?;
    let lt = tape.mean(lt);
    tape.add(source_term, lt)
}

/// Source rows to pair with each target batch, cycling a shuffled order.
fn paired_source<R: Rng + ?Sized>(n_s: usize, sizes: &[usize], rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_s).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    sizes
        .iter()
        .map(|&b| {
            (0..b)
                .map(|_| {
                    let i = order[cursor % n_s];
                    cursor += 1;
                    i
                })
                .collect()
        })
        .collect()
}

/// Adversarial training of `d` against the target encoder, then freezes `d`.
/// Returns the per-epoch log; the metric is the discriminator's batch accuracy.
pub fn pretrain_aux_discriminator<R: Rng + ?Sized>(
    source: &[FeaturizedInstance],
    target: &[FeaturizedInstance],
    enc_s: &Encoder,
    enc_t: &mut Encoder,
    d: &mut DomainDiscriminator,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochLog>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("auxiliary discriminator needs both domains"));
    }
    let src_feats = encode_all(enc_s, source)?;
    let mut d_opt = Adam::new(cfg.lr);
    let mut t_opt = Adam::new(cfg.lr);
    let per_epoch = cfg.batches(target.len(), &mut ChaCha8Rng::seed_from_u64(0)).len();
    let total_steps = per_epoch * cfg.aux_epochs;
    let mut step = 0;
    let mut logs = Vec::new();
    for epoch in 1..=cfg.aux_epochs {
        let tgt_batches = cfg.batches(target.len(), rng);
        let sizes: Vec<usize> = tgt_batches.iter().map(Vec::len).collect();
        let src_batches = paired_source(source.len(), &sizes, rng);
        let (mut total, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for (sb, tb) in src_batches.iter().zip(&tgt_batches) {
            let lambda = cfg.lambda_at(step, total_steps);
            step += 1;
            // Discriminator step against the current target features.
            let mut tape = Tape::new();
            let dv = d.bind(&mut tape, true);
            let ev = enc_t.bind(&mut tape, false);
            let s = stack_constant(&mut tape, &src_feats, sb)?;
            let t = encode_rows(&mut tape, enc_t, &ev, target, tb)?;
            let loss = domain_loss(&mut tape, d, &dv, s, t, cfg.bce_eps)?;
            let value = tape.scalar(loss);
            finite("pretrain_aux_discriminator", value)?;
            total += value;
            hits += batch_hits(&mut tape, d, &dv, s, t)?;
            seen += sb.len() + tb.len();
            let grads = tape.backward(loss)?;
            d.accumulate(&dv, &grads);
            d_opt.step(&mut d.params_mut());

            // Encoder step against the updated discriminator.
            let mut tape = Tape::new();
            let dv = d.bind(&mut tape, false);
            let ev = enc_t.bind(&mut tape, true);
            let s = stack_constant(&mut tape, &src_feats, sb)?;
            let t = encode_rows(&mut tape, enc_t, &ev, target, tb)?;
            let t = tape.grad_reverse(t, lambda);
            let loss = domain_loss(&mut tape, d, &dv, s, t, cfg.bce_eps)?;
            finite("pretrain_aux_discriminator", tape.scalar(loss))?;
            let grads = tape.backward(loss)?;
            enc_t.accumulate(&ev, &grads);
            t_opt.step(&mut enc_t.params_mut());
        }
        logs.push(EpochLog {
            step: "pretrain_aux_discriminator".into(),
            epoch,
            loss: total / tgt_batches.len() as f64,
            metric: Some(hits as f64 / seen as f64),
        });
    }
    d.freeze();
    Ok(logs)
}

fn batch_hits(tape: &mut Tape, d: &DomainDiscriminator, dv: &DiscriminatorVars, s: Var, t: Var) -> Result<usize> {
    let ps = d.forward(tape, dv, s)?;
    let pt = d.forward(tape, dv, t)?;
    Ok(tape.value(ps).iter().filter(|&&p| p > 0.5).count() + tape.value(pt).iter().filter(|&&p| p < 0.5).count())
}

/// Held-out accuracy of a discriminator on precomputed features.
pub fn discriminator_accuracy(d: &DomainDiscriminator, source: &[Tensor], target: &[Tensor]) -> Result<f64> {
    if source.is_empty() && target.is_empty() {
        return Err(Error::contract("discriminator accuracy of empty sets"));
    }
    let mut hits = 0;
    for f in source {
        if d.probability(f)? > 0.5 {
            hits += 1;
        }
    }
    for f in target {
        if d.probability(f)? < 0.5 {
            hits += 1;
        }
    }
    Ok(hits as f64 / (source.len() + target.len()) as f64)
}

/// `1 - D(f)` with the discriminator output clamped to `[eps, 1 - eps]`.
pub fn instance_weight(d_out: f64, eps: f64) -> f64 {
    1.0 - d_out.clamp(eps, 1.0 - eps)
}

/// Instance weights of source examples under a frozen discriminator.
pub fn compute_instance_weights(
    source: &[FeaturizedInstance],
    enc_s: &Encoder,
    d: &DomainDiscriminator,
    eps: f64,
) -> Result<Vec<f64>> {
    encode_all(enc_s, source)?
        .iter()
        .map(|f| d.probability(f).map(|p| instance_weight(p, eps)))
        .collect()
}

/// Gate output for one feature vector.
pub fn gate_alpha(feature: &Tensor, gate: &RelationGate) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = gate.bind(&mut tape, false);
    let f = tape.input(vec![1, feature.len()], feature.data().to_vec())?;
    let a = gate.forward(&mut tape, &vars, f)?;
    Ok(tape.scalar(a))
}

fn blend_value(alpha: f64, instance: f64, category: f64) -> f64 {
    alpha * instance + (1.0 - alpha) * category
}

fn normalize(values: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = values.iter().sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let n = values.len() as f64;
    Ok(values.iter().map(|x| n * x / sum).collect())
}

/// Blends instance and category weights by alpha, then rescales to mean one.
pub fn combine_and_normalize(weights: &WeightSet, labels: &[usize]) -> Result<Vec<f64>> {
    let n = labels.len();
    if weights.instance.len() != n || weights.alpha.len() != n {
        return Err(Error::contract(format!(
            "weight vectors of length {} and {} for {n} instances",
            weights.instance.len(),
            weights.alpha.len()
        )));
    }
    let raw = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let c = *weights
                .category
                .get(l)
                .ok_or(Error::Index { index: l, bound: weights.category.len() })?;
            Ok(blend_value(weights.alpha[i], weights.instance[i], c))
        })
        .collect::<Result<Vec<_>>>()?;
    normalize(&raw)
}

/// Frozen inputs of the weighted adversarial stage.
#[derive(Clone, Copy, Debug)]
pub struct AdaptInputs<'a> {
    pub source: &'a [FeaturizedInstance],
    pub target: &'a [FeaturizedInstance],
    /// Frozen source-encoder features of `source`, row-aligned.
    pub source_features: &'a [Tensor],
    pub category: &'a [f64],
    pub instance: &'a [f64],
}

/// Weighted adversarial adaptation of the target encoder.
///
/// Every batch recomputes alpha and the normalized totals from the live gate.
/// The discriminator, target encoder and gate move together from one backward
/// pass: the reversal layers on target features and on the weights make the
/// encoder and the gate ascend the discriminator's loss.
pub fn adversarial_adapt<R: Rng + ?Sized>(
    inputs: &AdaptInputs<'_>,
    enc_t: &mut Encoder,
    d_a: &mut DomainDiscriminator,
    gate: &mut RelationGate,
    mode: AblationMode,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochLog>> {
    let AdaptInputs { source, target, source_features, category, instance } = *inputs;
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("adaptation needs both domains"));
    }
    if instance.len() != source.len() || source_features.len() != source.len() {
        return Err(Error::contract(format!(
            "{} instance weights and {} features for {} source instances",
            instance.len(),
            source_features.len(),
            source.len()
        )));
    }
    let labels = labels_of(source, category.len())?;
    let cat_of: Vec<f64> = labels.iter().map(|&l| category[l]).collect();
    let mut d_opt = Adam::new(cfg.lr);
    let mut t_opt = Adam::new(cfg.lr);
    let mut g_opt = Adam::new(cfg.lr);
    let per_epoch = cfg.batches(target.len(), &mut ChaCha8Rng::seed_from_u64(0)).len();
    let total_steps = per_epoch * cfg.adapt_epochs;
    let mut step = 0;
    let mut logs = Vec::new();
    for epoch in 1..=cfg.adapt_epochs {
        let tgt_batches = cfg.batches(target.len(), rng);
        let sizes: Vec<usize> = tgt_batches.iter().map(Vec::len).collect();
        let src_batches = paired_source(source.len(), &sizes, rng);
        let (mut total, mut alpha_sum, mut alpha_n) = (0.0, 0.0, 0usize);
        for (sb, tb) in src_batches.iter().zip(&tgt_batches) {
            let lambda = cfg.lambda_at(step, total_steps);
            step += 1;
            let inst_b: Vec<f64> = sb.iter().map(|&i| instance[i]).collect();
            let cat_b: Vec<f64> = sb.iter().map(|&i| cat_of[i]).collect();
            let mut tape = Tape::new();
            let dv = d_a.bind(&mut tape, true);
            let ev = enc_t.bind(&mut tape, true);
            let mut gate_vars = None;
            let weights = match mode.fixed_alpha(cfg.fixed_alpha) {
                _ if mode == AblationMode::NoBoth => tape.input(vec![sb.len()], vec![1.0; sb.len()])?,
                Some(a) => {
                    let raw: Vec<f64> = inst_b.iter().zip(&cat_b).map(|(&x, &c)| blend_value(a, x, c)).collect();
                    alpha_sum += a * sb.len() as f64;
                    alpha_n += sb.len();
                    tape.input(vec![sb.len()], normalize(&raw)?)?
                }
                None => {
                    let gv = gate.bind(&mut tape, true);
                    gate_vars = Some(gv);
                    let f = encode_rows(&mut tape, enc_t, &ev, source, sb)?;
                    let alpha = gate.forward(&mut tape, &gv, f)?;
                    alpha_sum += tape.value(alpha).iter().sum::<f64>();
                    alpha_n += sb.len();
                    let raw = tape.blend(alpha, &inst_b, &cat_b)?;
                    let w = tape.normalize_mean(raw)?;
                    tape.grad_reverse(w, lambda)
                }
            };
            let s = stack_constant(&mut tape, source_features, sb)?;
            let t = encode_rows(&mut tape, enc_t, &ev, target, tb)?;
            let t = tape.grad_reverse(t, lambda);
            let loss = weighted_domain_loss(&mut tape, d_a, &dv, s, t, weights, cfg.bce_eps)?;
            let value = tape.scalar(loss);
            finite("adversarial_adapt", value)?;
            total += value;
            let grads = tape.backward(loss)?;
            d_a.accumulate(&dv, &grads);
            enc_t.accumulate(&ev, &grads);
            d_opt.step(&mut d_a.params_mut());
            t_opt.step(&mut enc_t.params_mut());
            if let Some(gv) = gate_vars {
                gate.accumulate(&gv, &grads);
                g_opt.step(&mut gate.params_mut());
            }
        }
        logs.push(EpochLog {
            step: "adversarial_adapt".into(),
            epoch,
            loss: total / tgt_batches.len() as f64,
            metric: (alpha_n > 0).then(|| alpha_sum / alpha_n as f64),
        });
    }
    Ok(logs)
}

/// Final alpha and normalized totals for every source instance.
pub fn final_weights(
    inputs: &AdaptInputs<'_>,
    enc_t: &Encoder,
    gate: &RelationGate,
    mode: AblationMode,
    fixed_alpha: f64,
) -> Result<WeightSet> {
    let labels = labels_of(inputs.source, inputs.category.len())?;
    let n = inputs.source.len();
    let alpha = match mode.fixed_alpha(fixed_alpha) {
        Some(a) => vec![a; n],
        None if mode == AblationMode::NoBoth => vec![fixed_alpha; n],
        None => encode_all(enc_t, inputs.source)?
            .iter()
            .map(|f| gate_alpha(f, gate))
            .collect::<Result<_>>()?,
    };
    let mut ws = WeightSet {
        category: inputs.category.to_vec(),
        instance: inputs.instance.to_vec(),
        alpha,
        total: Vec::new(),
    };
    ws.total = if mode == AblationMode::NoBoth {
        vec![1.0; n]
    } else {
        combine_and_normalize(&ws, &labels)?
    };
    Ok(ws)
}

/// Indices of a seeded `fraction` of `n` items, sorted.
pub fn sample_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("fine-tuning fraction {fraction} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate((fraction * n as f64).round() as usize);
    idx.sort_unstable();
    Ok(idx)
}

/// Supervised training of the adapted encoder and a classifier copy on a
/// seeded labeled fraction of the target set.
pub fn fine_tune(
    target: &[FeaturizedInstance],
    fraction: f64,
    enc_t: &mut Encoder,
    cls: &mut Classifier,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    let subset = sample_fraction(target.len(), fraction, seed)?;
    if subset.is_empty() {
        return Ok(Vec::new());
    }
    let data: Vec<FeaturizedInstance> = subset.iter().map(|&i| target[i].clone()).collect();
    *enc_t = enc_t.unfrozen();
    *cls = cls.unfrozen();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    train_classifier("fine_tune", &data, &[], enc_t, cls, cfg.finetune_epochs, cfg, &mut rng)
}

/// Class distribution predicted for each instance.
pub fn probability_rows(enc: &Encoder, cls: &Classifier, data: &[FeaturizedInstance]) -> Result<Vec<Vec<f64>>> {
    class_probabilities(enc, cls, data)
}
