//! Loop-by-loop reference implementations of the encoders and pooling,
//! shared by the oracle tests and the acceptance report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgated::data::PAD_INDEX;
use rgated::encoder::{Domain, Encoder, EncoderConfig, EncoderKind, FeaturizedInstance};
use rgated::tensor::Tape;

pub const INSTANCES: u64 = 200;

pub fn random_instance(rng: &mut ChaCha8Rng, vocab: usize, maxd: usize) -> FeaturizedInstance {
    let n = rng.gen_range(1..12);
    let head = rng.gen_range(0..n);
    let tail = rng.gen_range(0..n);
    let pos = |s: usize| (0..n).map(|i| ((i as i64 - s as i64).clamp(-(maxd as i64), maxd as i64) + maxd as i64) as usize).collect();
    FeaturizedInstance {
        words: (0..n).map(|_| rng.gen_range(0..vocab)).collect(),
        head_pos: pos(head),
        tail_pos: pos(tail),
        p1: head.min(tail),
        p2: head.max(tail),
        domain: Domain::Source,
        label: None,
    }
}

fn row(t: &rgated::tensor::Tensor, r: usize) -> &[f64] {
    let c = t.shape()[1];
    &t.data()[r * c..(r + 1) * c]
}

/// Loop-by-loop reference encoder.
fn brute_force(enc: &Encoder, x: &FeaturizedInstance) -> Vec<f64> {
    let w = enc.window;
    let top = enc.head_pos.shape()[0] - 1;
    let (mut words, mut head, mut tail) = (x.words.clone(), x.head_pos.clone(), x.tail_pos.clone());
    while words.len() < w {
        words.push(PAD_INDEX);
        head.push((head.last().copied().unwrap_or(top / 2) + 1).min(top));
        tail.push((tail.last().copied().unwrap_or(top / 2) + 1).min(top));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for i in 0..words.len() {
        let mut r = row(&enc.word, words[i]).to_vec();
        r.extend_from_slice(row(&enc.head_pos, head[i]));
        r.extend_from_slice(row(&enc.tail_pos, tail[i]));
        rows.push(r);
    }
    let nf = enc.filters.shape()[0];
    let steps = rows.len() - w + 1;
    let mut conv = vec![vec![0.0; nf]; steps];
    for t in 0..steps {
        for f in 0..nf {
            let filt = row(&enc.filters, f);
            let mut acc = 0.0;
            let mut k = 0;
            for r in &rows[t..t + w] {
                for v in r {
                    acc += filt[k] * v;
                    k += 1;
                }
            }
            conv[t][f] = acc + enc.bias.data()[f];
        }
    }
    let seg_max = |lo: usize, hi: usize| -> Vec<f64> {
        (0..nf)
            .map(|f| {
                let mut m = conv[lo][f];
                for c in &conv[lo + 1..hi] {
                    if c[f] > m {
                        m = c[f];
                    }
                }
                m
            })
            .collect()
    };
    let pooled = match enc.kind {
        EncoderKind::Cnn => seg_max(0, steps),
        EncoderKind::Pcnn if steps < 3 => {
            let g = seg_max(0, steps);
            [g.clone(), g.clone(), g].concat()
        }
        EncoderKind::Pcnn => {
            // Segments end after the last token of each entity, kept non-empty.
            let s1 = x.p1.min(steps - 1).max(1).min(steps - 2);
            let s2 = x.p2.min(steps - 1).max(s1 + 1).min(steps - 1);
            [seg_max(0, s1), seg_max(s1, s2), seg_max(s2, steps)].concat()
        }
    };
    pooled.iter().map(|v| v.tanh()).collect()
}

/// First seed whose encoding differs from the loop reference in any bit.
pub fn first_mismatch(kind: EncoderKind) -> Option<u64> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            kind,
            word_dim: rng.gen_range(1..5),
            pos_dim: rng.gen_range(1..3),
            filters: rng.gen_range(1..5),
            window: rng.gen_range(1..4),
            max_distance: rng.gen_range(1..6),
        };
        let enc = Encoder::new(&cfg, 9, &mut rng).unwrap();
        let x = random_instance(&mut rng, 9, cfg.max_distance);
        let got = enc.encode(&x).unwrap();
        let want = brute_force(&enc, &x);
        if got.len() != want.len() || got.data().iter().zip(&want).any(|(g, w)| g.to_bits() != w.to_bits()) {
            return Some(seed);
        }
    }
    None
}

/// First seed whose piecewise pooling differs from three explicit loops.
pub fn first_pool_mismatch() -> Option<u64> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = rng.gen_range(3..10);
        let nf = rng.gen_range(1..5);
        let data: Vec<f64> = (0..steps * nf).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p1 = rng.gen_range(1..steps - 1);
        let p2 = rng.gen_range(p1 + 1..steps);
        let mut tape = Tape::new();
        let v = tape.input(vec![steps, nf], data.clone()).unwrap();
        let out = tape.piecewise_max_pool(v, p1, p2).unwrap();
        let mut want = Vec::new();
        for (lo, hi) in [(0, p1), (p1, p2), (p2, steps)] {
            for f in 0..nf {
                let mut m = f64::NEG_INFINITY;
                for t in lo..hi {
                    m = m.max(data[t * nf + f]);
                }
                want.push(m);
            }
        }
        let got: Vec<u64> = tape.value(out).iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = want.iter().map(|v| v.to_bits()).collect();
        if got != want {
            return Some(seed);
        }
    }
    None
}

