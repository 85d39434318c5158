//! Seeded generator for small partial-domain-adaptation relation corpora.
//!
//! Every class owns a pool of trigger words and a few templates that place
//! the trigger between the two entities. Both domains share the class
//! triggers and the entity pool but draw filler words from disjoint
//! domain-style vocabularies, so a source model transfers imperfectly and
//! the feature distributions of the two domains differ.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{choose_classes, InstanceRecord, SOURCE, TARGET};
use crate::error::{Error, Result};

pub const RELATION_NAMES: &[&str] = &[
    "founded_by",
    "located_in",
    "born_in",
    "educated_at",
    "director",
    "capital_of",
    "member_of",
    "spouse",
    "employer",
    "subsidiary",
    "citizen_of",
    "parent_of",
];

pub const NA_RELATION: &str = "NA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_source_classes: usize,
    pub n_target_classes: usize,
    pub per_class: usize,
    pub noise_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Adds an `NA` class without a trigger to both domains.
    pub include_na: bool,
    pub triggers_per_class: usize,
    pub templates_per_class: usize,
    /// Filler words owned by each domain.
    pub style_vocab: usize,
    /// Filler words used by both domains.
    pub shared_filler: usize,
    /// Probability that a filler slot draws a shared word instead of a
    /// domain-style word.
    pub shared_filler_rate: f64,
    pub entity_pool: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_source_classes: 6,
            n_target_classes: 3,
            per_class: 200,
            noise_rate: 0.1,
            min_len: 8,
            max_len: 20,
            seed: 0,
            include_na: false,
            triggers_per_class: 4,
            templates_per_class: 2,
            style_vocab: 60,
            shared_filler: 20,
            shared_filler_rate: 0.3,
            entity_pool: 200,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_source_classes == 0 {
            return fail("n_source_classes must be at least 1".into());
        }
        if self.n_target_classes == 0 || self.n_target_classes > self.n_source_classes {
            return fail(format!(
                "n_target_classes ({}) must be between 1 and n_source_classes ({}): target classes are a subset of source classes",
                self.n_target_classes, self.n_source_classes
            ));
        }
        if self.per_class == 0 {
            return fail("per_class must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.shared_filler_rate) {
            return fail("rates must lie in [0, 1]".into());
        }
        if self.min_len < 6 || self.min_len > self.max_len {
            return fail(format!(
                "sentence length range [{}, {}] must satisfy 6 <= min_len <= max_len",
                self.min_len, self.max_len
            ));
        }
        if self.triggers_per_class == 0 || self.templates_per_class == 0 {
            return fail("triggers_per_class and templates_per_class must be positive".into());
        }
        if self.style_vocab == 0 || self.entity_pool < 2 {
            return fail("style_vocab must be positive and entity_pool at least 2".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_source_classes)
            .map(|k| match RELATION_NAMES.get(k) {
                Some(n) => n.to_string(),
                None => format!("relation_{k}"),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub source: Vec<InstanceRecord>,
    /// Target records carrying the (possibly corrupted) distant label.
    pub target: Vec<InstanceRecord>,
    /// Generating class of each target record.
    pub target_gold: Vec<String>,
    pub target_classes: Vec<String>,
}

#[derive(Clone, Debug)]
struct Template {
    head_first: bool,
    trigger_len: usize,
}

struct Lexicon {
    triggers: Vec<Vec<String>>,
    templates: Vec<Vec<Template>>,
    source_style: Vec<String>,
    target_style: Vec<String>,
    shared: Vec<String>,
    entities: Vec<String>,
}

fn lexicon(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Lexicon {
    let classes = spec.n_source_classes + usize::from(spec.include_na);
    let triggers = (0..classes)
        .map(|c| (0..spec.triggers_per_class).map(|k| format!("t{c}_{k}")).collect())
        .collect();
    let templates = (0..classes)
        .map(|_| {
            (0..spec.templates_per_class)
                .map(|_| Template {
                    head_first: rng.gen_bool(0.5),
                    trigger_len: rng.gen_range(1..=2),
                })
                .collect()
        })
        .collect();
    Lexicon {
        triggers,
        templates,
        source_style: (0..spec.style_vocab).map(|k| format!("s{k}")).collect(),
        target_style: (0..spec.style_vocab).map(|k| format!("g{k}")).collect(),
        shared: (0..spec.shared_filler).map(|k| format!("w{k}")).collect(),
        entities: (0..spec.entity_pool).map(|k| format!("E{k}")).collect(),
    }
}

fn sentence(
    spec: &SyntheticSpec,
    lex: &Lexicon,
    class: usize,
    is_na: bool,
    domain: &str,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, (usize, usize), (usize, usize)) {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let template = lex.templates[class].choose(rng).expect("templates");
    let trigger: Vec<String> = if is_na {
        Vec::new()
    } else {
        (0..template.trigger_len)
            .map(|_| lex.triggers[class].choose(rng).unwrap().clone())
            .collect()
    };
    let head_len = rng.gen_range(1..=2);
    let tail_len = rng.gen_range(1..=2);
    let head: Vec<String> = (0..head_len).map(|_| lex.entities.choose(rng).unwrap().clone()).collect();
    let tail: Vec<String> = (0..tail_len).map(|_| lex.entities.choose(rng).unwrap().clone()).collect();

    let fixed = head_len + tail_len + trigger.len();
    let fill = len.saturating_sub(fixed);
    // four gaps: before, between first entity and trigger, between trigger and second entity, after
    let mut gaps = [0usize; 4];
    for _ in 0..fill {
        gaps[rng.gen_range(0..4)] += 1;
    }
    let style = if domain == SOURCE { &lex.source_style } else { &lex.target_style };
    let filler = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..n)
            .map(|_| {
                if !lex.shared.is_empty() && rng.gen_bool(spec.shared_filler_rate) {
                    lex.shared.choose(rng).unwrap().clone()
                } else {
                    style.choose(rng).unwrap().clone()
                }
            })
            .collect()
    };

    let (first, second) = if template.head_first { (&head, &tail) } else { (&tail, &head) };
    let mut tokens = filler(gaps[0], rng);
    let first_span = (tokens.len(), tokens.len() + first.len());
    tokens.extend(first.iter().cloned());
    tokens.extend(filler(gaps[1], rng));
    tokens.extend(trigger);
    tokens.extend(filler(gaps[2], rng));
    let second_span = (tokens.len(), tokens.len() + second.len());
    tokens.extend(second.iter().cloned());
    tokens.extend(filler(gaps[3], rng));

    let (h, t) = if template.head_first {
        (first_span, second_span)
    } else {
        (second_span, first_span)
    };
    (tokens, h, t)
}

/// Generates source and target corpora, fully determined by `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lex = lexicon(spec, &mut rng);
    let names = spec.class_names();
    let target_classes = choose_classes(&names, spec.n_target_classes, rng.gen())?;

    let mut classes: Vec<(usize, String, bool)> = names
        .iter()
        .enumerate()
        .map(|(k, n)| (k, n.clone(), false))
        .collect();
    if spec.include_na {
        classes.push((spec.n_source_classes, NA_RELATION.to_string(), true));
    }

    let mut source = Vec::new();
    for (k, name, na) in &classes {
        for _ in 0..spec.per_class {
            let (tokens, head, tail) = sentence(spec, &lex, *k, *na, SOURCE, &mut rng);
            source.push(InstanceRecord {
                tokens,
                head,
                tail,
                relation: Some(name.clone()),
                domain: SOURCE.into(),
            });
        }
    }

    let mut label_pool: Vec<String> = target_classes.clone();
    if spec.include_na {
        label_pool.push(NA_RELATION.to_string());
    }
    let mut target = Vec::new();
    let mut target_gold = Vec::new();
    for (k, name, na) in classes.iter().filter(|(_, n, _)| label_pool.contains(n)) {
        for _ in 0..spec.per_class {
            let (tokens, head, tail) = sentence(spec, &lex, *k, *na, TARGET, &mut rng);
            let mut label = name.clone();
            if label_pool.len() > 1 && rng.gen_bool(spec.noise_rate) {
                let others: Vec<&String> = label_pool.iter().filter(|c| *c != name).collect();
                label = (*others.choose(&mut rng).unwrap()).clone();
            }
            target.push(InstanceRecord {
                tokens,
                head,
                tail,
                relation: Some(label),
                domain: TARGET.into(),
            });
            target_gold.push(name.clone());
        }
    }

    Ok(SyntheticData {
        source,
        target,
        target_gold,
        target_classes,
    })
}
