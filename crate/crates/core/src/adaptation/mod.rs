//! Source classifier, domain discriminators, relation gate and the
//! transferability weights that tie them together.

mod train;

pub use train::{
    adversarial_adapt, classification_loss, combine_and_normalize, compute_category_weights,
    compute_instance_weights, discriminator_accuracy, domain_loss, encode_all, evaluate_accuracy,
    final_weights, fine_tune, gate_alpha, instance_weight, predict_target, pretrain_aux_discriminator,
    pretrain_source, probability_rows, sample_fraction, weighted_domain_loss, AdaptInputs, EpochLog,
    LambdaSchedule, PretrainReport, TrainConfig,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

fn bind_one(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable && t.requires_grad {
        tape.leaf(t)
    } else {
        tape.constant(t)
    }
}

fn freeze_all(ts: Vec<&mut Tensor>) {
    for t in ts {
        t.requires_grad = false;
        t.zero_grad();
    }
}

fn thaw_all(ts: Vec<&mut Tensor>) {
    for t in ts {
        t.requires_grad = true;
    }
}

/// Linear softmax classifier over the source label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    weight: Var,
    bias: Var,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(classes: usize, feat_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (classes + feat_dim) as f64).sqrt();
        Classifier {
            weight: Tensor::uniform(&[classes, feat_dim], bound, rng).into_param(),
            bias: Tensor::zeros(&[classes]).into_param(),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn freeze(&mut self) {
        freeze_all(self.params_mut());
    }

    pub fn unfrozen(&self) -> Self {
        let mut c = self.clone();
        thaw_all(c.params_mut());
        c
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            weight: bind_one(tape, &self.weight, trainable),
            bias: bind_one(tape, &self.bias, trainable),
        }
    }

    pub fn accumulate(&mut self, vars: &ClassifierVars, grads: &Gradients) {
        grads.accumulate_into(vars.weight, &mut self.weight);
        grads.accumulate_into(vars.bias, &mut self.bias);
    }

    /// Logits for a `B×feat` feature matrix.
    pub fn logits(&self, tape: &mut Tape, vars: &ClassifierVars, feats: Var) -> Result<Var> {
        let wt = tape.transpose(vars.weight)?;
        let z = tape.matmul(feats, wt)?;
        tape.add_row(z, vars.bias)
    }

    /// Class probabilities of one feature vector.
    pub fn probabilities(&self, feature: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = tape.input(vec![1, feature.len()], feature.data().to_vec())?;
        let z = self.logits(&mut tape, &vars, f)?;
        Ok(crate::tensor::softmax(tape.value(z)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("weight", self.weight.clone());
        c.insert("bias", self.bias.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cls = Classifier {
            weight: c.require("weight")?.clone().into_param(),
            bias: c.require("bias")?.clone().into_param(),
        };
        if cls.weight.shape().len() != 2 || cls.bias.shape() != [cls.weight.shape()[0]] {
            return Err(Error::Checkpoint("classifier tensors have inconsistent shapes".into()));
        }
        Ok(cls)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscriminatorRole {
    /// Estimates instance weights before adaptation.
    Auxiliary,
    /// Trained against the target encoder during weighted adaptation.
    Adversarial,
}

/// One-hidden-layer relu scorer with a logistic output.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDiscriminator {
    pub role: DiscriminatorRole,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl DomainDiscriminator {
    pub fn new<R: Rng + ?Sized>(role: DiscriminatorRole, feat_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let b1 = (6.0 / (feat_dim + hidden) as f64).sqrt();
        let b2 = (6.0 / (hidden + 1) as f64).sqrt();
        DomainDiscriminator {
            role,
            w1: Tensor::uniform(&[hidden, feat_dim], b1, rng).into_param(),
            b1: Tensor::zeros(&[hidden]).into_param(),
            w2: Tensor::uniform(&[1, hidden], b2, rng).into_param(),
            b2: Tensor::zeros(&[1]).into_param(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn freeze(&mut self) {
        freeze_all(self.params_mut());
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            w1: bind_one(tape, &self.w1, trainable),
            b1: bind_one(tape, &self.b1, trainable),
            w2: bind_one(tape, &self.w2, trainable),
            b2: bind_one(tape, &self.b2, trainable),
        }
    }

    pub fn accumulate(&mut self, vars: &DiscriminatorVars, grads: &Gradients) {
        grads.accumulate_into(vars.w1, &mut self.w1);
        grads.accumulate_into(vars.b1, &mut self.b1);
        grads.accumulate_into(vars.w2, &mut self.w2);
        grads.accumulate_into(vars.b2, &mut self.b2);
    }

    /// Probability of the source domain for each row of `B×feat` features.
    pub fn forward(&self, tape: &mut Tape, vars: &DiscriminatorVars, feats: Var) -> Result<Var> {
        let rows = tape.shape(feats)[0];
        let w1t = tape.transpose(vars.w1)?;
        let h = tape.matmul(feats, w1t)?;
        let h = tape.add_row(h, vars.b1)?;
        let h = tape.relu(h);
        let w2t = tape.transpose(vars.w2)?;
        let s = tape.matmul(h, w2t)?;
        let s = tape.add_row(s, vars.b2)?;
        let s = tape.reshape(s, vec![rows])?;
        Ok(tape.sigmoid(s))
    }

    pub fn probability(&self, feature: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = tape.input(vec![1, feature.len()], feature.data().to_vec())?;
        let p = self.forward(&mut tape, &vars, f)?;
        Ok(tape.scalar(p))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w1", self.w1.clone());
        c.insert("b1", self.b1.clone());
        c.insert("w2", self.w2.clone());
        c.insert("b2", self.b2.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, role: DiscriminatorRole) -> Result<Self> {
        let get = |n: &str| c.require(n).map(|t| t.clone().into_param());
        let d = DomainDiscriminator {
            role,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        };
        let h = d.w1.shape()[0];
        if d.b1.shape() != [h] || d.w2.shape() != [1, h] || d.b2.shape() != [1] {
            return Err(Error::Checkpoint("discriminator tensors have inconsistent shapes".into()));
        }
        Ok(d)
    }
}

/// Sigmoid gate blending instance and category weights per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationGate {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    weight: Var,
    bias: Var,
}

impl RelationGate {
    /// Zero-initialized, so every instance starts at alpha = 0.5.
    pub fn new(feat_dim: usize) -> Self {
        RelationGate {
            weight: Tensor::zeros(&[1, feat_dim]).into_param(),
            bias: Tensor::zeros(&[1]).into_param(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GateVars {
        GateVars {
            weight: bind_one(tape, &self.weight, trainable),
            bias: bind_one(tape, &self.bias, trainable),
        }
    }

    pub fn accumulate(&mut self, vars: &GateVars, grads: &Gradients) {
        grads.accumulate_into(vars.weight, &mut self.weight);
        grads.accumulate_into(vars.bias, &mut self.bias);
    }

    /// Alpha for each row of a `B×feat` feature matrix.
    pub fn forward(&self, tape: &mut Tape, vars: &GateVars, feats: Var) -> Result<Var> {
        let rows = tape.shape(feats)[0];
        let wt = tape.transpose(vars.weight)?;
        let s = tape.matmul(feats, wt)?;
        let s = tape.add_row(s, vars.bias)?;
        let s = tape.reshape(s, vec![rows])?;
        Ok(tape.sigmoid(s))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("weight", self.weight.clone());
        c.insert("bias", self.bias.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let g = RelationGate {
            weight: c.require("weight")?.clone().into_param(),
            bias: c.require("bias")?.clone().into_param(),
        };
        if g.weight.shape().len() != 2 || g.weight.shape()[0] != 1 || g.bias.shape() != [1] {
            return Err(Error::Checkpoint("gate tensors have inconsistent shapes".into()));
        }
        Ok(g)
    }
}

/// Per-class and per-source-instance transferability weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet {
    pub category: Vec<f64>,
    pub instance: Vec<f64>,
    pub alpha: Vec<f64>,
    pub total: Vec<f64>,
}

/// How the combined weights are formed during adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Learned gate.
    Full,
    /// Alpha fixed to the configured constant.
    NoGate,
    /// Alpha = 1: instance weights only.
    NoCategory,
    /// Alpha = 0: category weights only.
    NoInstance,
    /// Every total weight is 1.
    NoBoth,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoGate,
        AblationMode::NoCategory,
        AblationMode::NoInstance,
        AblationMode::NoBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoGate => "no_gate",
            AblationMode::NoCategory => "no_category",
            AblationMode::NoInstance => "no_instance",
            AblationMode::NoBoth => "no_both",
        }
    }

    /// The constant alpha a mode imposes, if any.
    pub fn fixed_alpha(self, configured: f64) -> Option<f64> {
        match self {
            AblationMode::Full | AblationMode::NoBoth => None,
            AblationMode::NoGate => Some(configured),
            AblationMode::NoCategory => Some(1.0),
            AblationMode::NoInstance => Some(0.0),
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown ablation mode {s:?} (full|no_gate|no_category|no_instance|no_both)"
                ))
            })
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
