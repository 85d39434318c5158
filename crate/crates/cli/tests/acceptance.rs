//! Acceptance report. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../../core/tests/support/encoder_cases.rs"]
mod encoder_cases;
#[path = "../../core/tests/support/gradient_cases.rs"]
mod gradient_cases;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgated::adaptation::{
    combine_and_normalize, compute_category_weights, compute_instance_weights, domain_loss, encode_all, gate_alpha,
    instance_weight, weighted_domain_loss, Classifier, DiscriminatorRole, DomainDiscriminator, RelationGate,
    WeightSet,
};
use rgated::config::RunConfig;
use rgated::encoder::{Encoder, EncoderConfig, EncoderKind};
use rgated::eval::{finetune_curve, from_csv, AblationRow, DataSource};
use rgated::pipeline::{run_pretrain, run_weights, shared_outlier_means, Prepared};
use rgated::tensor::{Tape, Tensor};

const SEEDS: u64 = 50;
const EPS: f64 = 1e-7;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn desk(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(Some(&desk_config()), &o).expect("desk config")
}

/// Runs the binary with the desk config; returns stdout.
fn rgated(out: &Path, args: &[&str]) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rgated"));
    cmd.env_remove("RGATED_OUTPUT_ROOT")
        .arg("--config")
        .arg(desk_config())
        .arg("--set")
        .arg(format!("output.dir={}", out.display()))
        .args(args);
    let res = cmd.output().map_err(|e| e.to_string())?;
    if !res.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&res.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&res.stdout).into_owned())
}

fn mean_rows(csv: &str) -> Result<Vec<(String, f64)>, String> {
    let rows = from_csv::<AblationRow>(csv).map_err(|e| e.to_string())?;
    Ok(rows.into_iter().filter(|r| r.seed == "mean").map(|r| (r.mode, r.accuracy)).collect())
}

fn mode_mean(means: &[(String, f64)], mode: &str) -> f64 {
    means.iter().find(|m| m.0 == mode).map(|m| m.1).unwrap_or(f64::NAN)
}

fn small_encoder(rng: &mut ChaCha8Rng, kind: EncoderKind) -> Encoder {
    let cfg = EncoderConfig {
        kind,
        word_dim: 4,
        pos_dim: 2,
        filters: 5,
        window: 3,
        max_distance: 5,
    };
    Encoder::new(&cfg, 9, rng).unwrap()
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let outcomes = gradient_cases::all_outcomes();
    let elapsed = start.elapsed();
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} ({:e} at seed {})", o.name, o.worst, o.worst_seed))
        .collect();
    let worst = outcomes.iter().map(|o| o.worst).fold(0.0, f64::max);
    let fast = elapsed < Duration::from_secs(60);
    verdict(
        failed.is_empty() && fast && gradient_cases::SEEDS >= 50,
        format!(
            "{} checks x {} seeds, worst relative error {worst:.2e}, {:.2}s{}",
            outcomes.len(),
            gradient_cases::SEEDS,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn weight_identities() -> Verdict {
    let mut problems = Vec::new();
    let mut worst_cat: f64 = 0.0;
    let mut worst_total: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if seed % 2 == 0 { EncoderKind::Cnn } else { EncoderKind::Pcnn };
        let enc = small_encoder(&mut rng, kind);
        let k = rng.gen_range(2..7);
        let cls = Classifier::new(k, enc.feature_dim(), &mut rng);
        let data: Vec<_> = (0..rng.gen_range(1..20)).map(|_| encoder_cases::random_instance(&mut rng, 9, 5)).collect();

        let cat = compute_category_weights(&data, &enc, &cls).unwrap();
        worst_cat = worst_cat.max((cat.iter().sum::<f64>() - 1.0).abs());

        let d = DomainDiscriminator::new(DiscriminatorRole::Auxiliary, enc.feature_dim(), 6, &mut rng);
        let inst = compute_instance_weights(&data, &enc, &d, EPS).unwrap();
        let feats = encode_all(&enc, &data).unwrap();
        for (w, f) in inst.iter().zip(&feats) {
            if *w != 1.0 - d.probability(f).unwrap() {
                problems.push(format!("instance weight seed {seed}"));
            }
        }

        let n = data.len();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ws = WeightSet { category: cat.clone(), instance: inst.clone(), alpha, total: Vec::new() };
        let total = combine_and_normalize(&ws, &labels).unwrap();
        worst_total = worst_total.max((total.iter().sum::<f64>() - n as f64).abs());

        // Single-component endpoints: n * x / sum(x) of the chosen component.
        let single = |xs: &[f64]| {
            let s: f64 = xs.iter().sum();
            xs.iter().map(|x| n as f64 * x / s).collect::<Vec<_>>()
        };
        let only_instance = WeightSet { alpha: vec![1.0; n], ..ws.clone() };
        if combine_and_normalize(&only_instance, &labels).unwrap() != single(&inst) {
            problems.push(format!("alpha=1 endpoint seed {seed}"));
        }
        let only_category = WeightSet { alpha: vec![0.0; n], ..ws.clone() };
        let per_instance: Vec<f64> = labels.iter().map(|&l| cat[l]).collect();
        if combine_and_normalize(&only_category, &labels).unwrap() != single(&per_instance) {
            problems.push(format!("alpha=0 endpoint seed {seed}"));
        }

        let gate = RelationGate::new(enc.feature_dim());
        if feats.iter().any(|f| gate_alpha(f, &gate).unwrap() != 0.5) {
            problems.push(format!("zero gate seed {seed}"));
        }
    }
    if !(instance_weight(1.0, EPS) < 1e-6 && instance_weight(0.0, EPS) > 1.0 - 1e-6) {
        problems.push("instance weight endpoints".into());
    }
    if worst_cat > 1e-9 {
        problems.push(format!("category sum off by {worst_cat:e}"));
    }
    if worst_total > 1e-9 {
        problems.push(format!("normalized total off by {worst_total:e}"));
    }
    verdict(
        problems.is_empty(),
        format!(
            "{SEEDS} seeds, |sum(category)-1| <= {worst_cat:.1e}, |sum(total)-n| <= {worst_total:.1e}, \
             endpoints and zero gate exact{}",
            if problems.is_empty() { String::new() } else { format!("; failed: {}", problems.join(", ")) }
        ),
    )
}

fn reversal() -> Verdict {
    match gradient_cases::grad_reverse_exact() {
        None => verdict(true, format!("{} seeds, forward and backward bit-exact", gradient_cases::SEEDS)),
        Some(seed) => verdict(false, format!("mismatch at seed {seed}")),
    }
}

fn oracles() -> Verdict {
    let cnn = encoder_cases::first_mismatch(EncoderKind::Cnn);
    let pcnn = encoder_cases::first_mismatch(EncoderKind::Pcnn);
    let pool = encoder_cases::first_pool_mismatch();
    verdict(
        cnn.is_none() && pcnn.is_none() && pool.is_none() && encoder_cases::INSTANCES >= 100,
        format!(
            "{} instances each; first mismatch cnn {cnn:?}, pcnn {pcnn:?}, piecewise pool {pool:?}",
            encoder_cases::INSTANCES
        ),
    )
}

fn degeneracy() -> Verdict {
    let mut bad = Vec::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.gen_range(1..8);
        let (ns, nt) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let d = DomainDiscriminator::new(DiscriminatorRole::Adversarial, dim, rng.gen_range(1..8), &mut rng);
        let src = Tensor::uniform(&[ns, dim], 1.0, &mut rng);
        let tgt = Tensor::uniform(&[nt, dim], 1.0, &mut rng);
        let mut tape = Tape::new();
        let dv = d.bind(&mut tape, false);
        let s = tape.constant(&src);
        let t = tape.constant(&tgt);
        let w = tape.input(vec![ns], vec![1.0; ns]).unwrap();
        let a = weighted_domain_loss(&mut tape, &d, &dv, s, t, w, EPS).unwrap();
        let b = domain_loss(&mut tape, &d, &dv, s, t, EPS).unwrap();
        if tape.scalar(a).to_bits() != tape.scalar(b).to_bits() {
            bad.push(seed);
        }
    }
    verdict(bad.is_empty(), format!("{SEEDS} seeds, unit-weight loss bit-equal to unweighted; mismatches {bad:?}"))
}

/// Category weights of every ablation seed after source pretraining.
fn category_separation(cfg: &RunConfig) -> Verdict {
    let source = DataSource::from_config(cfg).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for &seed in &cfg.ablate_seeds {
        let ds = source.for_seed(seed).unwrap();
        let prep = Prepared::build(&ds, cfg).unwrap();
        let (src, report) = run_pretrain(&prep, cfg, seed).unwrap();
        let dev = report.dev_accuracy.unwrap_or(f64::NAN);
        let ws = run_weights(&prep, &src, cfg, seed).unwrap();
        let (shared, outlier) = shared_outlier_means(&prep, &ws.category);
        pass &= dev >= 0.95 && outlier < 0.5 * shared;
        lines.push(format!("seed {seed} dev {dev:.3} shared {shared:.3} outlier {outlier:.3}"));
    }
    verdict(pass, lines.join("; "))
}

fn main() {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, v: Verdict| {
        println!("{} {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failures += 1;
        }
    };

    report(1, "gradient checks", gradients());
    report(2, "weight identities", weight_identities());
    report(3, "gradient reversal", reversal());
    report(4, "encoder oracles", oracles());
    report(5, "unit-weight degeneracy", degeneracy());

    let work = tempfile::tempdir().unwrap();
    let cfg = desk(&[]);

    let start = Instant::now();
    let separation = category_separation(&cfg);
    let ablate_dir = work.path().join("ablate");
    let ablation = rgated(&ablate_dir, &["ablate"]).and_then(|csv| mean_rows(&csv));
    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(600);

    let six = match &ablation {
        Ok(means) => {
            let (full, none) = (mode_mean(means, "full"), mode_mean(means, "no_both"));
            verdict(
                separation.pass && full - none >= 0.05 && in_time,
                format!(
                    "(a) {}; (b) full {full:.4} vs no_both {none:.4} ({:+.1} points); experiment {:.0}s",
                    separation.detail,
                    100.0 * (full - none),
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => verdict(false, format!("(a) {}; (b) {e}", separation.detail)),
    };
    report(6, "partial adaptation", six);

    let no_outlier = rgated(
        &work.path().join("no_outlier"),
        &["--set", "synth.n_target_classes=6", "ablate", "--modes", "full,no_both"],
    )
    .and_then(|csv| mean_rows(&csv));
    match no_outlier {
        Ok(means) => {
            let (full, none) = (mode_mean(&means, "full"), mode_mean(&means, "no_both"));
            report(
                7,
                "no-outlier safety",
                verdict(
                    (full - none).abs() <= 0.02,
                    format!("full {full:.4} vs no_both {none:.4} ({:+.1} points)", 100.0 * (full - none)),
                ),
            );
        }
        Err(e) => report(7, "no-outlier safety", verdict(false, e)),
    }

    match &ablation {
        Ok(means) => {
            let full = mode_mean(means, "full");
            let none = mode_mean(means, "no_both");
            let singles: Vec<(&str, f64)> =
                ["no_gate", "no_category", "no_instance"].iter().map(|m| (*m, mode_mean(means, m))).collect();
            let ordered = singles.iter().all(|(_, a)| full >= *a && *a >= none);
            let listing: Vec<String> = means.iter().map(|(m, a)| format!("{m} {a:.4}")).collect();
            report(8, "ablation ordering", verdict(ordered, listing.join(", ")));
        }
        Err(e) => report(8, "ablation ordering", verdict(false, e.clone())),
    }

    let first = rgated(&work.path().join("run_a"), &["pipeline"]);
    let second = rgated(&work.path().join("run_b"), &["pipeline"]);
    let same_file = |name: &str| {
        let a = std::fs::read(work.path().join("run_a").join(name));
        let b = std::fs::read(work.path().join("run_b").join(name));
        matches!((a, b), (Ok(a), Ok(b)) if a == b)
    };
    match (first, second) {
        (Ok(a), Ok(b)) => {
            let files = ["metrics.csv", "predictions.csv", "pr_curve.csv", "weight_audit.csv", "alpha_by_relation.csv"];
            let differing: Vec<&str> = files.iter().copied().filter(|f| !same_file(f)).collect();
            report(
                9,
                "determinism",
                verdict(
                    a == b && differing.is_empty(),
                    format!("pipeline rerun: stdout identical {}, differing artifacts {differing:?}", a == b),
                ),
            );
        }
        (a, b) => report(9, "determinism", verdict(false, format!("{:?} / {:?}", a.err(), b.err()))),
    }

    let noiseless = desk(&["synth.noise_rate=0"]);
    let source = DataSource::from_config(&noiseless).unwrap();
    match finetune_curve(&source, &noiseless, &[0.0, 0.25, 1.0], &noiseless.ablate_seeds) {
        Ok(rows) => {
            let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let monotone = acc.windows(2).all(|w| w[1] >= w[0]);
            report(
                10,
                "fine-tuning monotonicity",
                verdict(monotone, format!("accuracy at 0 / 25% / 100%: {acc:.4?}")),
            );
        }
        Err(e) => report(10, "fine-tuning monotonicity", verdict(false, e.to_string())),
    }

    if failures > 0 {
        eprintln!("{failures} acceptance line(s) failed");
        std::process::exit(1);
    }
}
