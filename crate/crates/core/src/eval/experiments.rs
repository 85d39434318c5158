use crate::adaptation::AblationMode;
use crate::config::RunConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate_adapted, run_adapt, run_pretrain, run_weights, run_finetune, Dataset, Prepared};

use super::{field, fmt6, round6, CsvRow};

/// Data for repeated runs: a fixed dataset, or a fresh synthetic draw per seed.
#[derive(Clone, Debug)]
pub enum DataSource {
    Fixed(Dataset),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(match &cfg.data_dir {
            Some(_) => DataSource::Fixed(crate::pipeline::load_dataset(cfg)?),
            None => DataSource::Synthetic(cfg.synth.clone()),
        })
    }

    /// The dataset of one seed; synthetic draws use `seed` as generator seed.
    pub fn for_seed(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Fixed(ds) => Ok(ds.clone()),
            DataSource::Synthetic(spec) => Dataset::synthetic(&SyntheticSpec { seed, ..spec.clone() }),
        }
    }
}

/// `mode,seed,accuracy,f1,p100`; mean rows carry seed `mean`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: String,
    pub seed: String,
    pub accuracy: f64,
    pub f1: f64,
    pub p100: f64,
}

impl CsvRow for AblationRow {
    const HEADER: &'static [&'static str] = &["mode", "seed", "accuracy", "f1", "p100"];
    fn fields(&self) -> Vec<String> {
        vec![
            self.mode.clone(),
            self.seed.clone(),
            fmt6(self.accuracy),
            fmt6(self.f1),
            fmt6(self.p100),
        ]
    }
    fn from_fields(rec: &csv::StringRecord) -> Result<Self> {
        Ok(AblationRow {
            mode: field(rec, 0)?,
            seed: field(rec, 1)?,
            accuracy: field(rec, 2)?,
            f1: field(rec, 3)?,
            p100: field(rec, 4)?,
        })
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs every mode on every seed. The source model and component weights of
/// a seed are shared by all its modes, so modes differ only in stage four.
pub fn run_ablations(
    source: &DataSource,
    cfg: &RunConfig,
    modes: &[AblationMode],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one mode and one seed"));
    }
    let mut per_mode: Vec<Vec<AblationRow>> = vec![Vec::new(); modes.len()];
    for &seed in seeds {
        let ds = source.for_seed(seed)?;
        let prep = Prepared::build(&ds, cfg)?;
        let (src, _) = run_pretrain(&prep, cfg, seed)?;
        let ws = run_weights(&prep, &src, cfg, seed)?;
        for (m, &mode) in modes.iter().enumerate() {
            let adapted = run_adapt(&prep, &src, &ws, mode, cfg, seed)?;
            let metrics = evaluate_adapted(&prep, &src, &adapted, cfg)?;
            log::info!("ablation {mode} seed {seed}: accuracy {:.4}", metrics.accuracy);
            per_mode[m].push(AblationRow {
                mode: mode.to_string(),
                seed: seed.to_string(),
                accuracy: metrics.accuracy,
                f1: metrics.micro_f1_excl_na,
                p100: metrics.precision_at_k,
            });
        }
    }
    let mut rows: Vec<AblationRow> = per_mode.iter().flatten().cloned().collect();
    for (m, mode) in modes.iter().enumerate() {
        let r = &per_mode[m];
        let col = |f: fn(&AblationRow) -> f64| round6(mean(&r.iter().map(f).collect::<Vec<_>>()));
        rows.push(AblationRow {
            mode: mode.to_string(),
            seed: "mean".into(),
            accuracy: col(|x| x.accuracy),
            f1: col(|x| x.f1),
            p100: col(|x| x.p100),
        });
    }
    Ok(rows)
}

/// `n_target_classes,weighted_accuracy,unweighted_accuracy,weighted_f1,unweighted_f1`,
/// each averaged over the seeded class samples of that count.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_target_classes: usize,
    pub weighted_accuracy: f64,
    pub unweighted_accuracy: f64,
    pub weighted_f1: f64,
    pub unweighted_f1: f64,
}

impl CsvRow for SweepRow {
    const HEADER: &'static [&'static str] = &[
        "n_target_classes",
        "weighted_accuracy",
        "unweighted_accuracy",
        "weighted_f1",
        "unweighted_f1",
    ];
    fn fields(&self) -> Vec<String> {
        vec![
            self.n_target_classes.to_string(),
            fmt6(self.weighted_accuracy),
            fmt6(self.unweighted_accuracy),
            fmt6(self.weighted_f1),
            fmt6(self.unweighted_f1),
        ]
    }
    fn from_fields(rec: &csv::StringRecord) -> Result<Self> {
        Ok(SweepRow {
            n_target_classes: field(rec, 0)?,
            weighted_accuracy: field(rec, 1)?,
            unweighted_accuracy: field(rec, 2)?,
            weighted_f1: field(rec, 3)?,
            unweighted_f1: field(rec, 4)?,
        })
    }
}

/// For each class count, `samples` seeded target label spaces, each run with
/// the learned gate and without any weighting.
pub fn sweep_target_classes(
    source: &DataSource,
    cfg: &RunConfig,
    counts: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if samples == 0 {
        return Err(Error::config("sweep.samples must be positive"));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let (mut wa, mut ua, mut wf, mut uf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for s in 0..samples as u64 {
            let run_seed = seed.wrapping_add(s);
            let ds = match source {
                DataSource::Synthetic(spec) => {
                    if count == 0 || count > spec.n_source_classes {
                        return Err(Error::config(format!(
                            "class count {count} outside 1..={}",
                            spec.n_source_classes
                        )));
                    }
                    Dataset::synthetic(&SyntheticSpec { n_target_classes: count, seed: run_seed, ..spec.clone() })?
                }
                DataSource::Fixed(ds) => ds.restrict_target(count, run_seed)?,
            };
            let prep = Prepared::build(&ds, cfg)?;
            let (src, _) = run_pretrain(&prep, cfg, run_seed)?;
            let ws = run_weights(&prep, &src, cfg, run_seed)?;
            for (mode, acc, f1) in [
                (AblationMode::Full, &mut wa, &mut wf),
                (AblationMode::NoBoth, &mut ua, &mut uf),
            ] {
                let adapted = run_adapt(&prep, &src, &ws, mode, cfg, run_seed)?;
                let m = evaluate_adapted(&prep, &src, &adapted, cfg)?;
                acc.push(m.accuracy);
                f1.push(m.micro_f1_excl_na);
            }
        }
        rows.push(SweepRow {
            n_target_classes: count,
            weighted_accuracy: round6(mean(&wa)),
            unweighted_accuracy: round6(mean(&ua)),
            weighted_f1: round6(mean(&wf)),
            unweighted_f1: round6(mean(&uf)),
        });
    }
    Ok(rows)
}

/// `fraction,accuracy,f1,p100`.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRow {
    pub fraction: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub p100: f64,
}

impl CsvRow for FinetuneRow {
    const HEADER: &'static [&'static str] = &["fraction", "accuracy", "f1", "p100"];
    fn fields(&self) -> Vec<String> {
        vec![fmt6(self.fraction), fmt6(self.accuracy), fmt6(self.f1), fmt6(self.p100)]
    }
    fn from_fields(rec: &csv::StringRecord) -> Result<Self> {
        Ok(FinetuneRow {
            fraction: field(rec, 0)?,
            accuracy: field(rec, 1)?,
            f1: field(rec, 2)?,
            p100: field(rec, 3)?,
        })
    }
}

/// Mean fine-tuned accuracy per fraction over `seeds`, one adapted model per seed.
pub fn finetune_curve(
    source: &DataSource,
    cfg: &RunConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<FinetuneRow>> {
    let mut acc = vec![Vec::new(); fractions.len()];
    let mut f1 = vec![Vec::new(); fractions.len()];
    let mut p = vec![Vec::new(); fractions.len()];
    for &seed in seeds {
        let ds = source.for_seed(seed)?;
        let prep = Prepared::build(&ds, cfg)?;
        let (src, _) = run_pretrain(&prep, cfg, seed)?;
        let ws = run_weights(&prep, &src, cfg, seed)?;
        let adapted = run_adapt(&prep, &src, &ws, cfg.mode, cfg, seed)?;
        for (i, &fraction) in fractions.iter().enumerate() {
            let (m, _) = run_finetune(&prep, &src, &adapted, fraction, cfg, seed)?;
            acc[i].push(m.accuracy);
            f1[i].push(m.micro_f1_excl_na);
            p[i].push(m.precision_at_k);
        }
    }
    Ok(fractions
        .iter()
        .enumerate()
        .map(|(i, &fraction)| FinetuneRow {
            fraction: round6(fraction),
            accuracy: round6(mean(&acc[i])),
            f1: round6(mean(&f1[i])),
            p100: round6(mean(&p[i])),
        })
        .collect())
}
