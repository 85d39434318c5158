//! The four training stages wired to datasets, checkpoints and run artifacts.
//!
//! Every stage draws its randomness from `stage_rng(seed, stage)`, so running
//! the stages one command at a time reproduces the one-shot pipeline exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::adaptation::{
    adversarial_adapt, compute_category_weights, compute_instance_weights, encode_all,
    final_weights, fine_tune, predict_target, pretrain_aux_discriminator, pretrain_source,
    AblationMode, AdaptInputs, Classifier, DiscriminatorRole, DomainDiscriminator, EpochLog,
    PretrainReport, RelationGate, WeightSet,
};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    build_vocab, choose_classes, class_counts, generate_synthetic, label_set, load_jsonl, split,
    to_jsonl, write_jsonl, InstanceRecord, SyntheticSpec, Vocabulary,
};
use crate::encoder::{featurize, Encoder, FeaturizedInstance};
use crate::error::{Error, Result};
use crate::eval::{predictions_csv, to_csv, Metrics, Prediction, pr_curve, round6};
use crate::tensor::Tensor;

pub const STAGE_PRETRAIN: u64 = 1;
pub const STAGE_WEIGHTS: u64 = 2;
pub const STAGE_ADAPT: u64 = 3;

pub const SPLIT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Independent random stream for one stage of one run.
pub fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// The six record files of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub source_train: Vec<InstanceRecord>,
    pub source_dev: Vec<InstanceRecord>,
    pub source_test: Vec<InstanceRecord>,
    pub target_train: Vec<InstanceRecord>,
    pub target_dev: Vec<InstanceRecord>,
    /// Carries generating (gold) labels.
    pub target_test: Vec<InstanceRecord>,
}

pub const SPLIT_FILES: [&str; 6] = [
    "source_train.jsonl",
    "source_dev.jsonl",
    "source_test.jsonl",
    "target_train.jsonl",
    "target_dev.jsonl",
    "target_test.jsonl",
];

impl Dataset {
    pub fn parts(&self) -> [(&'static str, &Vec<InstanceRecord>); 6] {
        [
            (SPLIT_FILES[0], &self.source_train),
            (SPLIT_FILES[1], &self.source_dev),
            (SPLIT_FILES[2], &self.source_test),
            (SPLIT_FILES[3], &self.target_train),
            (SPLIT_FILES[4], &self.target_dev),
            (SPLIT_FILES[5], &self.target_test),
        ]
    }

    /// Generates a corpus and splits both domains 80/10/10. The target test
    /// split is relabeled with the generating classes.
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
        let data = generate_synthetic(spec)?;
        let source = split(&data.source, &SPLIT_FRACTIONS, spec.seed)?;
        let paired: Vec<(InstanceRecord, String)> =
            data.target.into_iter().zip(data.target_gold).collect();
        let target = split(&paired, &SPLIT_FRACTIONS, spec.seed.wrapping_add(1))?;
        let records = |v: &[(InstanceRecord, String)]| v.iter().map(|(r, _)| r.clone()).collect();
        let [s_train, s_dev, s_test]: [Vec<InstanceRecord>; 3] = source.try_into().expect("three parts");
        Ok(Dataset {
            source_train: s_train,
            source_dev: s_dev,
            source_test: s_test,
            target_train: records(&target[0]),
            target_dev: records(&target[1]),
            target_test: target[2]
                .iter()
                .map(|(r, gold)| InstanceRecord { relation: Some(gold.clone()), ..r.clone() })
                .collect(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, records) in self.parts() {
            write_jsonl(dir.join(name), records)?;
        }
        Ok(())
    }

    /// Reads the six files from `dir`. Malformed lines are skipped and counted.
    pub fn read(dir: &Path) -> Result<(Dataset, usize)> {
        let mut rejected = 0;
        let mut load = |name: &str| -> Result<Vec<InstanceRecord>> {
            let report = load_jsonl(dir.join(name))?;
            for e in &report.rejected {
                log::warn!("{name} line {}: {}", e.line, e.reason);
            }
            rejected += report.rejected.len();
            Ok(report.records)
        };
        let ds = Dataset {
            source_train: load(SPLIT_FILES[0])?,
            source_dev: load(SPLIT_FILES[1])?,
            source_test: load(SPLIT_FILES[2])?,
            target_train: load(SPLIT_FILES[3])?,
            target_dev: load(SPLIT_FILES[4])?,
            target_test: load(SPLIT_FILES[5])?,
        };
        Ok((ds, rejected))
    }

    /// Keeps target records of `count` seeded classes drawn from the target labels.
    pub fn restrict_target(&self, count: usize, seed: u64) -> Result<Dataset> {
        let observed = label_set(self.target_test.iter().chain(&self.target_train));
        let kept = choose_classes(&observed, count, seed)?;
        let keep = |v: &[InstanceRecord]| -> Vec<InstanceRecord> {
            v.iter()
                .filter(|r| r.relation.as_ref().map_or(true, |l| kept.binary_search(l).is_ok()))
                .cloned()
                .collect()
        };
        Ok(Dataset {
            target_train: keep(&self.target_train),
            target_dev: keep(&self.target_dev),
            target_test: keep(&self.target_test),
            ..self.clone()
        })
    }

    /// `(file, sha256)` of each serialized part.
    pub fn hashes(&self) -> Vec<(String, String)> {
        self.parts()
            .iter()
            .map(|(n, r)| (n.to_string(), sha256_hex(to_jsonl(r).as_bytes())))
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Manifest of a generated dataset: spec, seed, spec hash and counts.
pub fn dataset_manifest(spec: &SyntheticSpec, ds: &Dataset) -> Result<serde_json::Value> {
    let spec_json = serde_json::to_string(spec)?;
    let all: Vec<InstanceRecord> = ds.parts().iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let files: BTreeMap<String, serde_json::Value> = ds
        .parts()
        .iter()
        .zip(ds.hashes())
        .map(|((n, r), (_, h))| (n.to_string(), json!({ "records": r.len(), "sha256": h })))
        .collect();
    Ok(json!({
        "seed": spec.seed,
        "spec": serde_json::from_str::<serde_json::Value>(&spec_json)?,
        "spec_sha256": sha256_hex(spec_json.as_bytes()),
        "class_counts": class_counts(&all),
        "files": files,
    }))
}

/// Records featurized against a shared vocabulary and source label space.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    /// Sorted source label space.
    pub labels: Vec<String>,
    pub na: Option<usize>,
    pub source_train: Vec<FeaturizedInstance>,
    pub source_dev: Vec<FeaturizedInstance>,
    /// Labels, when present, are the (possibly noisy) distant labels.
    pub target_train: Vec<FeaturizedInstance>,
    pub target_test: Vec<FeaturizedInstance>,
}

impl Prepared {
    pub fn build(ds: &Dataset, cfg: &RunConfig) -> Result<Prepared> {
        if ds.source_train.is_empty() || ds.target_train.is_empty() || ds.target_test.is_empty() {
            return Err(Error::Data("source train, target train and target test must be non-empty".into()));
        }
        let labels = label_set(ds.source_train.iter().chain(&ds.source_dev));
        let mut vocab_records = ds.source_train.clone();
        vocab_records.extend(ds.target_train.iter().cloned());
        let vocab = build_vocab(&vocab_records, cfg.min_count)?;
        let index = |l: &str| labels.binary_search_by(|x| x.as_str().cmp(l)).ok();
        let feat = |records: &[InstanceRecord], what: &str, strict: bool| -> Result<Vec<FeaturizedInstance>> {
            let mut out = Vec::with_capacity(records.len());
            let mut skipped = 0;
            for r in records {
                let mut f = match featurize(r, &vocab, cfg.max_len, cfg.encoder.max_distance) {
                    Ok(f) => f,
                    Err(Error::Rejected(reason)) => {
                        log::warn!("{what}: {reason}");
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                f.label = match r.relation.as_deref() {
                    Some(l) => match index(l) {
                        Some(i) => Some(i),
                        None if strict => {
                            return Err(Error::Data(format!("{what}: label {l:?} not in the source label space")))
                        }
                        None => None,
                    },
                    None if strict => return Err(Error::Data(format!("{what}: unlabeled record"))),
                    None => None,
                };
                out.push(f);
            }
            if skipped > 0 {
                log::warn!("{what}: skipped {skipped} records");
            }
            Ok(out)
        };
        let prepared = Prepared {
            na: index(crate::data::NA_RELATION),
            source_train: feat(&ds.source_train, "source_train", true)?,
            source_dev: feat(&ds.source_dev, "source_dev", true)?,
            target_train: feat(&ds.target_train, "target_train", false)?,
            target_test: feat(&ds.target_test, "target_test", true)?,
            vocab,
            labels,
        };
        if prepared.target_test.is_empty() || prepared.source_train.is_empty() {
            return Err(Error::Data("no usable records after featurization".into()));
        }
        Ok(prepared)
    }

    pub fn source_labels(&self) -> Vec<usize> {
        self.source_train.iter().map(|x| x.label.expect("source labels checked")).collect()
    }
}

/// Source encoder and classifier after stage one, both frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceModel {
    pub encoder: Encoder,
    pub classifier: Classifier,
}

impl SourceModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.merge_prefixed("encoder", &self.encoder.to_checkpoint());
        c.merge_prefixed("classifier", &self.classifier.to_checkpoint());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let mut encoder = Encoder::from_checkpoint(&c.extract_prefixed("encoder"), cfg.encoder.kind, cfg.encoder.window)?;
        let mut classifier = Classifier::from_checkpoint(&c.extract_prefixed("classifier"))?;
        encoder.freeze();
        classifier.freeze();
        Ok(SourceModel { encoder, classifier })
    }
}

/// Stage one: supervised source training.
pub fn run_pretrain(prep: &Prepared, cfg: &RunConfig, seed: u64) -> Result<(SourceModel, PretrainReport)> {
    let mut rng = stage_rng(seed, STAGE_PRETRAIN);
    let mut encoder = Encoder::new(&cfg.encoder, prep.vocab.len(), &mut rng)?;
    if let Some(path) = &cfg.embeddings {
        let n = encoder.load_pretrained(path, &prep.vocab)?;
        log::info!("loaded {n} pretrained embedding rows");
    }
    let mut classifier = Classifier::new(prep.labels.len(), encoder.feature_dim(), &mut rng);
    let report = pretrain_source(&prep.source_train, &prep.source_dev, &mut encoder, &mut classifier, &cfg.train, &mut rng)?;
    Ok((SourceModel { encoder, classifier }, report))
}

/// Output of stages two and three: frozen component weights plus the
/// warm-started target encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsStage {
    pub category: Vec<f64>,
    pub instance: Vec<f64>,
    pub discriminator: DomainDiscriminator,
    pub target_encoder: Encoder,
    pub logs: Vec<EpochLog>,
}

impl WeightsStage {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("category", Tensor::from_vec(self.category.clone()));
        c.insert("instance", Tensor::from_vec(self.instance.clone()));
        c.merge_prefixed("aux_discriminator", &self.discriminator.to_checkpoint());
        c.merge_prefixed("target_encoder", &self.target_encoder.to_checkpoint());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let mut discriminator =
            DomainDiscriminator::from_checkpoint(&c.extract_prefixed("aux_discriminator"), DiscriminatorRole::Auxiliary)?;
        discriminator.freeze();
        Ok(WeightsStage {
            category: c.require("category")?.data().to_vec(),
            instance: c.require("instance")?.data().to_vec(),
            discriminator,
            target_encoder: Encoder::from_checkpoint(&c.extract_prefixed("target_encoder"), cfg.encoder.kind, cfg.encoder.window)?,
            logs: Vec::new(),
        })
    }
}

/// Stages two and three: category weights, then the auxiliary discriminator
/// and instance weights.
pub fn run_weights(prep: &Prepared, src: &SourceModel, cfg: &RunConfig, seed: u64) -> Result<WeightsStage> {
    let category = compute_category_weights(&prep.target_train, &src.encoder, &src.classifier)?;
    let mut rng = stage_rng(seed, STAGE_WEIGHTS);
    let mut target_encoder = src.encoder.unfrozen();
    let mut discriminator =
        DomainDiscriminator::new(DiscriminatorRole::Auxiliary, src.encoder.feature_dim(), cfg.train.hidden, &mut rng);
    let logs = pretrain_aux_discriminator(
        &prep.source_train,
        &prep.target_train,
        &src.encoder,
        &mut target_encoder,
        &mut discriminator,
        &cfg.train,
        &mut rng,
    )?;
    let instance = compute_instance_weights(&prep.source_train, &src.encoder, &discriminator, cfg.train.bce_eps)?;
    Ok(WeightsStage { category, instance, discriminator, target_encoder, logs })
}

/// Output of stage four.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptStage {
    pub mode: AblationMode,
    pub encoder: Encoder,
    pub discriminator: DomainDiscriminator,
    pub gate: RelationGate,
    pub weights: WeightSet,
    pub logs: Vec<EpochLog>,
}

impl AdaptStage {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.merge_prefixed("target_encoder", &self.encoder.to_checkpoint());
        c.merge_prefixed("adversarial_discriminator", &self.discriminator.to_checkpoint());
        c.merge_prefixed("gate", &self.gate.to_checkpoint());
        c.insert("alpha", Tensor::from_vec(self.weights.alpha.clone()));
        c.insert("total", Tensor::from_vec(self.weights.total.clone()));
        c
    }

    /// Restores the adapted encoder; the weight vectors come from `ws`.
    pub fn from_checkpoint(c: &Checkpoint, ws: &WeightsStage, cfg: &RunConfig) -> Result<Self> {
        Ok(AdaptStage {
            mode: cfg.mode,
            encoder: Encoder::from_checkpoint(&c.extract_prefixed("target_encoder"), cfg.encoder.kind, cfg.encoder.window)?,
            discriminator: DomainDiscriminator::from_checkpoint(
                &c.extract_prefixed("adversarial_discriminator"),
                DiscriminatorRole::Adversarial,
            )?,
            gate: RelationGate::from_checkpoint(&c.extract_prefixed("gate"))?,
            weights: WeightSet {
                category: ws.category.clone(),
                instance: ws.instance.clone(),
                alpha: c.require("alpha")?.data().to_vec(),
                total: c.require("total")?.data().to_vec(),
            },
            logs: Vec::new(),
        })
    }
}

/// Stage four: weighted adversarial adaptation under `mode`.
pub fn run_adapt(
    prep: &Prepared,
    src: &SourceModel,
    ws: &WeightsStage,
    mode: AblationMode,
    cfg: &RunConfig,
    seed: u64,
) -> Result<AdaptStage> {
    let mut rng = stage_rng(seed, STAGE_ADAPT);
    let feat = src.encoder.feature_dim();
    let mut encoder = ws.target_encoder.unfrozen();
    let mut discriminator = DomainDiscriminator::new(DiscriminatorRole::Adversarial, feat, cfg.train.hidden, &mut rng);
    let mut gate = RelationGate::new(feat);
    let source_features = encode_all(&src.encoder, &prep.source_train)?;
    let inputs = AdaptInputs {
        source: &prep.source_train,
        target: &prep.target_train,
        source_features: &source_features,
        category: &ws.category,
        instance: &ws.instance,
    };
    let logs = adversarial_adapt(&inputs, &mut encoder, &mut discriminator, &mut gate, mode, &cfg.train, &mut rng)?;
    let weights = final_weights(&inputs, &encoder, &gate, mode, cfg.train.fixed_alpha)?;
    Ok(AdaptStage { mode, encoder, discriminator, gate, weights, logs })
}

/// Predictions of `(encoder, classifier)` on labeled instances; ids are positions.
pub fn predict_all(data: &[FeaturizedInstance], encoder: &Encoder, classifier: &Classifier) -> Result<Vec<Prediction>> {
    data.iter()
        .enumerate()
        .map(|(id, inst)| {
            let (predicted, probs) = predict_target(inst, encoder, classifier)?;
            Ok(Prediction {
                id,
                gold: inst.label.ok_or_else(|| Error::Data(format!("instance {id} has no gold label")))?,
                predicted,
                confidence: probs[predicted],
            })
        })
        .collect()
}

pub fn evaluate_predictions(prep: &Prepared, preds: &[Prediction], cfg: &RunConfig) -> Result<Metrics> {
    Metrics::compute(preds, prep.na, cfg.eval_k)
}

/// Stage-four model evaluated on the target test split.
pub fn evaluate_adapted(prep: &Prepared, src: &SourceModel, adapted: &AdaptStage, cfg: &RunConfig) -> Result<Metrics> {
    let preds = predict_all(&prep.target_test, &adapted.encoder, &src.classifier)?;
    evaluate_predictions(prep, &preds, cfg)
}

/// Fine-tunes copies of the adapted encoder and the classifier on a labeled
/// target fraction and evaluates them.
pub fn run_finetune(
    prep: &Prepared,
    src: &SourceModel,
    adapted: &AdaptStage,
    fraction: f64,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Metrics, Vec<EpochLog>)> {
    let labeled: Vec<FeaturizedInstance> = prep.target_train.iter().filter(|x| x.label.is_some()).cloned().collect();
    let mut encoder = adapted.encoder.clone();
    let mut classifier = src.classifier.clone();
    let logs = fine_tune(&labeled, fraction, &mut encoder, &mut classifier, &cfg.train, seed)?;
    let preds = predict_all(&prep.target_test, &encoder, &classifier)?;
    Ok((evaluate_predictions(prep, &preds, cfg)?, logs))
}

/// `instance_id,label,category_w,instance_w,alpha,total_w`.
pub fn weight_audit_csv(prep: &Prepared, ws: &WeightSet) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["instance_id", "label", "category_w", "instance_w", "alpha", "total_w"])?;
    for (i, l) in prep.source_labels().into_iter().enumerate() {
        w.write_record([
            i.to_string(),
            prep.labels[l].clone(),
            format!("{:.6}", ws.category[l]),
            format!("{:.6}", ws.instance[i]),
            format!("{:.6}", ws.alpha[i]),
            format!("{:.6}", ws.total[i]),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
        .map_err(|e| Error::Data(e.to_string()))
}

/// `relation,mean_alpha,count`, grouped by source label.
pub fn alpha_summary_csv(prep: &Prepared, ws: &WeightSet) -> String {
    let mut sums = vec![(0.0, 0usize); prep.labels.len()];
    for (i, l) in prep.source_labels().into_iter().enumerate() {
        sums[l].0 += ws.alpha[i];
        sums[l].1 += 1;
    }
    let mut out = String::from("relation,mean_alpha,count\n");
    for (name, (s, n)) in prep.labels.iter().zip(sums) {
        if n > 0 {
            out.push_str(&format!("{name},{:.6},{n}\n", s / n as f64));
        }
    }
    out
}

/// Mean of a per-class statistic over classes present and absent in the
/// target test labels: `(shared_mean, outlier_mean)`.
pub fn shared_outlier_means(prep: &Prepared, per_class: &[f64]) -> (f64, f64) {
    let present: std::collections::BTreeSet<usize> = prep.target_test.iter().filter_map(|x| x.label).collect();
    let (mut s, mut ns, mut o, mut no) = (0.0, 0, 0.0, 0);
    for (c, &v) in per_class.iter().enumerate() {
        if present.contains(&c) {
            s += v;
            ns += 1;
        } else {
            o += v;
            no += 1;
        }
    }
    let mean = |a: f64, n: usize| if n == 0 { f64::NAN } else { a / n as f64 };
    (mean(s, ns), mean(o, no))
}

/// Where a run reads its inputs from.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => {
            let (ds, rejected) = Dataset::read(dir)?;
            if rejected > 0 {
                log::warn!("{rejected} malformed input lines skipped");
            }
            Ok(ds)
        }
        None => Dataset::synthetic(&cfg.synth),
    }
}

/// Output directory of a run and the names of its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const PRETRAIN: &'static str = "pretrain_source.ckpt";
    pub const WEIGHTS: &'static str = "weights.ckpt";
    pub const ADAPT: &'static str = "adapt.ckpt";
    pub const PREDICTIONS: &'static str = "predictions.csv";
    pub const METRICS: &'static str = "metrics.csv";
    pub const PR_CURVE: &'static str = "pr_curve.csv";
    pub const AUDIT: &'static str = "weight_audit.csv";
    pub const ALPHA: &'static str = "alpha_by_relation.csv";
    pub const FINETUNE: &'static str = "finetune.csv";
    pub const ABLATION: &'static str = "ablation.csv";
    pub const SWEEP: &'static str = "sweep_classes.csv";

    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path(name), text)?;
        Ok(())
    }

    /// Loads a checkpoint produced by `command`, naming it when absent.
    pub fn require_checkpoint(&self, name: &str, command: &str) -> Result<Checkpoint> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} not found; run `{command}` first",
                path.display()
            )));
        }
        Checkpoint::load(path)
    }

    pub fn write_log(&self, step: &str, logs: &[EpochLog]) -> Result<()> {
        let mut text = String::new();
        for l in logs {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        self.write(&format!("{step}.log.jsonl"), &text)
    }

    /// Reproducibility manifest of one command.
    pub fn write_manifest(&self, command: &str, cfg: &RunConfig, ds: &Dataset) -> Result<()> {
        let config: BTreeMap<&str, String> = cfg.entries().into_iter().collect();
        let inputs: BTreeMap<String, String> = ds.hashes().into_iter().collect();
        let source = match &cfg.data_dir {
            Some(d) => d.display().to_string(),
            None => "synthetic".to_string(),
        };
        let manifest = json!({
            "command": command,
            "code_version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "data_source": source,
            "inputs_sha256": inputs,
            "config": config,
        });
        self.write(
            &format!("manifest.{command}.json"),
            &(serde_json::to_string_pretty(&manifest)? + "\n"),
        )
    }
}

/// Shared state of every stage command: config, data and output directory.
pub struct Session {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub prep: Prepared,
    pub dir: RunDir,
}

impl Session {
    pub fn open(cfg: &RunConfig, command: &str) -> Result<Session> {
        let dataset = load_dataset(cfg)?;
        let prep = Prepared::build(&dataset, cfg)?;
        let dir = RunDir::create(&cfg.output_dir)?;
        dir.write_manifest(command, cfg, &dataset)?;
        Ok(Session { cfg: cfg.clone(), dataset, prep, dir })
    }

    fn seed(&self) -> Result<u64> {
        self.cfg.require_seed()
    }

    pub fn pretrain(&self) -> Result<SourceModel> {
        let (model, report) = run_pretrain(&self.prep, &self.cfg, self.seed()?)?;
        self.prep.vocab.save(self.dir.path("vocab.txt"))?;
        self.dir.write("labels.txt", &(self.prep.labels.join("\n") + "\n"))?;
        model.to_checkpoint().save(self.dir.path(RunDir::PRETRAIN))?;
        self.dir.write_log("pretrain_source", &report.logs)?;
        if let Some(acc) = report.dev_accuracy {
            log::info!("source dev accuracy {acc:.4}");
        }
        Ok(model)
    }

    pub fn load_source(&self) -> Result<SourceModel> {
        let c = self.dir.require_checkpoint(RunDir::PRETRAIN, "pretrain-source")?;
        SourceModel::from_checkpoint(&c, &self.cfg)
    }

    pub fn weights(&self, src: &SourceModel) -> Result<WeightsStage> {
        let ws = run_weights(&self.prep, src, &self.cfg, self.seed()?)?;
        ws.to_checkpoint().save(self.dir.path(RunDir::WEIGHTS))?;
        self.dir.write_log("weights", &ws.logs)?;
        Ok(ws)
    }

    pub fn load_weights(&self) -> Result<WeightsStage> {
        let c = self.dir.require_checkpoint(RunDir::WEIGHTS, "weights")?;
        WeightsStage::from_checkpoint(&c, &self.cfg)
    }

    pub fn adapt(&self, src: &SourceModel, ws: &WeightsStage) -> Result<AdaptStage> {
        let out = run_adapt(&self.prep, src, ws, self.cfg.mode, &self.cfg, self.seed()?)?;
        out.to_checkpoint().save(self.dir.path(RunDir::ADAPT))?;
        self.dir.write_log("adapt", &out.logs)?;
        self.dir.write(RunDir::AUDIT, &weight_audit_csv(&self.prep, &out.weights)?)?;
        self.dir.write(RunDir::ALPHA, &alpha_summary_csv(&self.prep, &out.weights))?;
        Ok(out)
    }

    pub fn load_adapted(&self, ws: &WeightsStage) -> Result<AdaptStage> {
        let c = self.dir.require_checkpoint(RunDir::ADAPT, "adapt")?;
        AdaptStage::from_checkpoint(&c, ws, &self.cfg)
    }

    pub fn predict(&self, src: &SourceModel, adapted: &AdaptStage) -> Result<Vec<Prediction>> {
        let preds = predict_all(&self.prep.target_test, &adapted.encoder, &src.classifier)?;
        self.dir.write(RunDir::PREDICTIONS, &predictions_csv(&preds, &self.prep.labels)?)?;
        Ok(preds)
    }

    /// Reads back `predictions.csv`.
    pub fn load_predictions(&self) -> Result<Vec<Prediction>> {
        let path = self.dir.path(RunDir::PREDICTIONS);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("{} not found; run `predict` first", path.display())));
        }
        let text = fs::read_to_string(path)?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let index = |l: &str| {
            self.prep
                .labels
                .binary_search_by(|x| x.as_str().cmp(l))
                .map_err(|_| Error::Data(format!("unknown label {l:?} in predictions")))
        };
        r.records()
            .map(|rec| {
                let rec = rec?;
                Ok(Prediction {
                    id: crate::eval::field(&rec, 0)?,
                    gold: index(&rec[1])?,
                    predicted: index(&rec[2])?,
                    confidence: crate::eval::field(&rec, 3)?,
                })
            })
            .collect()
    }

    pub fn evaluate(&self, preds: &[Prediction]) -> Result<Metrics> {
        let metrics = evaluate_predictions(&self.prep, preds, &self.cfg)?;
        let curve: Vec<_> = pr_curve(preds, self.prep.na);
        self.dir.write(RunDir::PR_CURVE, &to_csv(&curve)?)?;
        self.dir.write(RunDir::METRICS, &metrics.to_csv())?;
        Ok(metrics)
    }

    /// One row per configured fraction, each from the same adapted checkpoint.
    pub fn finetune(&self, src: &SourceModel, adapted: &AdaptStage) -> Result<Vec<crate::eval::FinetuneRow>> {
        let seed = self.seed()?;
        let mut rows = Vec::new();
        let mut all_logs = Vec::new();
        for &fraction in &self.cfg.fractions {
            let (m, logs) = run_finetune(&self.prep, src, adapted, fraction, &self.cfg, seed)?;
            all_logs.extend(logs);
            rows.push(crate::eval::FinetuneRow {
                fraction: round6(fraction),
                accuracy: m.accuracy,
                f1: m.micro_f1_excl_na,
                p100: m.precision_at_k,
            });
        }
        self.dir.write_log("finetune", &all_logs)?;
        self.dir.write(RunDir::FINETUNE, &to_csv(&rows)?)?;
        Ok(rows)
    }

    /// All four stages followed by prediction and evaluation.
    pub fn pipeline(&self) -> Result<Metrics> {
        let src = self.pretrain()?;
        let ws = self.weights(&src)?;
        let adapted = self.adapt(&src, &ws)?;
        let preds = self.predict(&src, &adapted)?;
        self.evaluate(&preds)
    }
}
