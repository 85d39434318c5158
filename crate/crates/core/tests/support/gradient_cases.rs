//! Gradient checks against central finite differences, shared by the
//! gradient tests and the acceptance report.
// Each including test target uses a different subset.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgated::adaptation::{Classifier, DiscriminatorRole, DomainDiscriminator, RelationGate};
use rgated::encoder::{Domain, Encoder, EncoderConfig, EncoderKind, FeaturizedInstance};
use rgated::tensor::{finite_diff_gradient, max_relative_error, Tape, Tensor, Var};

pub const SEEDS: u64 = 50;
const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
pub const SMOOTH_TOL: f64 = 1e-6;
pub const KINK_TOL: f64 = 1e-4;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Contracts the op output with fixed random coefficients so every output
/// element contributes to the scalar being differentiated.
fn contract(tape: &mut Tape, out: Var, coeffs: &[f64]) -> Var {
    let c = tape
        .input(tape.shape(out).to_vec(), coeffs[..tape.value(out).len()].to_vec())
        .unwrap();
    let m = tape.mul(out, c).unwrap();
    tape.sum(m)
}

fn scalar_of(inputs: &[Tensor], build: &Build, coeffs: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = build(&mut tape, &vars);
    let s = contract(&mut tape, out, coeffs);
    tape.scalar(s)
}

/// Worst relative error over all inputs for one random instance.
fn check(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let coeffs: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let params: Vec<Tensor> = inputs.iter().map(|t| t.clone().into_param()).collect();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    let s = contract(&mut tape, out, &coeffs);
    let grads = tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = finite_diff_gradient(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                scalar_of(&xs, build, &coeffs)
            },
            &inputs[i],
            H,
        );
        worst = worst.max(max_relative_error(&analytic, numeric.data(), FLOOR));
    }
    worst
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error of one check over all seeds.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub tol: f64,
    pub worst: f64,
    pub worst_seed: u64,
}

impl Outcome {
    fn new(name: &'static str, tol: f64) -> Self {
        Outcome {
            name,
            tol,
            worst: 0.0,
            worst_seed: 0,
        }
    }

    fn record(&mut self, seed: u64, err: f64) {
        if err > self.worst || err.is_nan() {
            self.worst = err;
            self.worst_seed = seed;
        }
    }

    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

pub type Maker = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>);

fn case(name: &'static str, tol: f64, make: Maker) -> (&'static str, f64, Maker) {
    (name, tol, make)
}

/// Runs one primitive check on every seed.
pub fn run_primitive(name: &'static str, tol: f64, make: Maker) -> Outcome {
    let mut out = Outcome::new(name, tol);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, build) = make(&mut rng);
        out.record(seed, check(&inputs, build.as_ref(), &mut rng));
    }
    out
}

/// Every differentiable primitive with its tolerance; max and relu kinks get
/// the looser one.
pub fn primitive_cases() -> Vec<(&'static str, f64, Maker)> {
    vec![
        case("matmul", SMOOTH_TOL, |rng| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            (
                vec![rand_t(rng, &[m, k], -1.0, 1.0), rand_t(rng, &[k, n], -1.0, 1.0)],
                Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap()),
            )
        }),
        case("transpose", SMOOTH_TOL, |rng| {
            let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
            (
                vec![rand_t(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let x = t.transpose(v[0]).unwrap();
                    t.reshape(x, vec![m * n]).unwrap()
                }),
            )
        }),
        case("add/mul/scale", SMOOTH_TOL, |rng| {
            let n = rng.gen_range(1..8);
            let f = rng.gen_range(-2.0..2.0);
            (
                vec![rand_t(rng, &[n], -1.0, 1.0), rand_t(rng, &[n], -1.0, 1.0)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let a = t.add(v[0], v[1]).unwrap();
                    let b = t.mul(a, v[1]).unwrap();
                    t.scale(b, f)
                }),
            )
        }),
        case("add_row", SMOOTH_TOL, |rng| {
            let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
            (
                vec![rand_t(rng, &[m, n], -1.0, 1.0), rand_t(rng, &[n], -1.0, 1.0)],
                Box::new(|t: &mut Tape, v: &[Var]| t.add_row(v[0], v[1]).unwrap()),
            )
        }),
        case("tanh", SMOOTH_TOL, |rng| {
            let n = rng.gen_range(1..8);
            (
                vec![rand_t(rng, &[n], -3.0, 3.0)],
                Box::new(|t: &mut Tape, v: &[Var]| t.tanh(v[0])),
            )
        }),
        case("sigmoid", SMOOTH_TOL, |rng| {
            let n = rng.gen_range(1..8);
            (
                vec![rand_t(rng, &[n], -6.0, 6.0)],
                Box::new(|t: &mut Tape, v: &[Var]| t.sigmoid(v[0])),
            )
        }),
        case("relu", KINK_TOL, |rng| {
            let n = rng.gen_range(1..8);
            (
                vec![rand_t(rng, &[n], -1.0, 1.0)],
                Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0])),
            )
        }),
        case("sum/mean", SMOOTH_TOL, |rng| {
            let n = rng.gen_range(1..8);
            (
                vec![rand_t(rng, &[n], -1.0, 1.0)],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let s = t.sum(v[0]);
                    let m = t.mean(v[0]);
                    t.concat(&[s, m]).unwrap()
                }),
            )
        }),
        case("gather/concat", SMOOTH_TOL, |rng| {
            let (v, d) = (rng.gen_range(2..6), rng.gen_range(1..4));
            let rows: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..v)).collect();
            let r = rows.len();
            (
                vec![rand_t(rng, &[v, d], -1.0, 1.0), rand_t(rng, &[r, 2], -1.0, 1.0)],
                Box::new(move |t: &mut Tape, x: &[Var]| {
                    let g = t.gather_rows(x[0], &rows).unwrap();
                    let c = t.concat_cols(&[g, x[1]]).unwrap();
                    let a = t.reshape(c, vec![r * (d + 2)]).unwrap();
                    let b = t.sum(x[1]);
                    let f = t.concat(&[a, b]).unwrap();
                    let s = t.stack_rows(&[f, f]).unwrap();
                    t.reshape(s, vec![2 * (r * (d + 2) + 1)]).unwrap()
                }),
            )
        }),
        case("conv1d", SMOOTH_TOL, |rng| {
            let w = rng.gen_range(1..4);
            let len = rng.gen_range(w..w + 5);
            let (d, f) = (rng.gen_range(1..4), rng.gen_range(1..4));
            (
                vec![
                    rand_t(rng, &[len, d], -1.0, 1.0),
                    rand_t(rng, &[f, w * d], -1.0, 1.0),
                    rand_t(rng, &[f], -1.0, 1.0),
                ],
                Box::new(move |t: &mut Tape, v: &[Var]| t.conv1d(v[0], v[1], v[2], w).unwrap()),
            )
        }),
        case("max_over_time", KINK_TOL, |rng| {
            let (steps, f) = (rng.gen_range(1..7), rng.gen_range(1..4));
            (
                vec![rand_t(rng, &[steps, f], -1.0, 1.0)],
                Box::new(|t: &mut Tape, v: &[Var]| t.max_over_time(v[0]).unwrap()),
            )
        }),
        case("piecewise_max_pool", KINK_TOL, |rng| {
            let (steps, f) = (rng.gen_range(3..9), rng.gen_range(1..4));
            let p1 = rng.gen_range(1..steps - 1);
            let p2 = rng.gen_range(p1 + 1..steps);
            (
                vec![rand_t(rng, &[steps, f], -1.0, 1.0)],
                Box::new(move |t: &mut Tape, v: &[Var]| t.piecewise_max_pool(v[0], p1, p2).unwrap()),
            )
        }),
        case("softmax_cross_entropy", SMOOTH_TOL, |rng| {
            let (b, k) = (rng.gen_range(1..4), rng.gen_range(2..6));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
            (
                vec![rand_t(rng, &[b, k], -3.0, 3.0)],
                Box::new(move |t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &labels).unwrap()),
            )
        }),
        case("binary_cross_entropy", SMOOTH_TOL, |rng| {
            let n = rng.gen_range(1..8);
            let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            (
                vec![rand_t(rng, &[n], 0.05, 0.95)],
                Box::new(move |t: &mut Tape, v: &[Var]| t.binary_cross_entropy(v[0], &targets, 1e-7).unwrap()),
            )
        }),
        case("blend/normalize_mean", SMOOTH_TOL, |rng| {
            let n = rng.gen_range(1..8);
            let first: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let second: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            (
                vec![rand_t(rng, &[n], 0.01, 0.99)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let b = t.blend(v[0], &first, &second).unwrap();
                    t.normalize_mean(b).unwrap()
                }),
            )
        }),
    ]
}

/// Every primitive check followed by the composed paths.
pub fn all_outcomes() -> Vec<Outcome> {
    let mut v: Vec<Outcome> = primitive_cases()
        .into_iter()
        .map(|(n, t, m)| run_primitive(n, t, m))
        .collect();
    v.push(encoder_to_classifier());
    v.push(encoder_through_reversal_to_discriminator());
    v.push(gate_through_weights_to_weighted_loss());
    v
}

/// Reversal forward is the identity and backward is exactly `-lambda` times
/// the plain gradient, bit for bit. Returns the first failing seed.
pub fn grad_reverse_exact() -> Option<u64> {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        let lambda = rng.gen_range(0.0..3.0);
        let x = rand_t(&mut rng, &[n], -2.0, 2.0).into_param();
        let coeffs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut plain = Tape::new();
        let a = plain.leaf(&x);
        let s = contract(&mut plain, a, &coeffs);
        let g_plain = plain.backward(s).unwrap().get(a).unwrap().to_vec();

        let mut rev = Tape::new();
        let b = rev.leaf(&x);
        let r = rev.grad_reverse(b, lambda);
        if !rev
            .value(r)
            .iter()
            .zip(x.data())
            .all(|(p, q)| p.to_bits() == q.to_bits())
        {
            return Some(seed);
        }
        let s = contract(&mut rev, r, &coeffs);
        let g_rev = rev.backward(s).unwrap().get(b).unwrap().to_vec();
        if g_plain
            .iter()
            .zip(&g_rev)
            .any(|(p, q)| q.to_bits() != (-lambda * p).to_bits())
        {
            return Some(seed);
        }
    }
    None
}

fn instance(rng: &mut ChaCha8Rng, vocab: usize, maxd: usize) -> FeaturizedInstance {
    let n = rng.gen_range(4..8);
    let head = rng.gen_range(0..n - 2);
    let tail = rng.gen_range(head + 2..n);
    let pos = |s: usize| {
        (0..n)
            .map(|i| ((i as i64 - s as i64).clamp(-(maxd as i64), maxd as i64) + maxd as i64) as usize)
            .collect()
    };
    FeaturizedInstance {
        words: (0..n).map(|_| rng.gen_range(0..vocab)).collect(),
        head_pos: pos(head),
        tail_pos: pos(tail),
        p1: head,
        p2: tail,
        domain: Domain::Source,
        label: None,
    }
}

fn tiny_encoder(rng: &mut ChaCha8Rng, kind: EncoderKind) -> Encoder {
    let cfg = EncoderConfig {
        kind,
        word_dim: 3,
        pos_dim: 2,
        filters: 3,
        window: 3,
        max_distance: 4,
    };
    let mut e = Encoder::new(&cfg, 6, rng).unwrap();
    // Larger weights than the default init keep the features away from zero.
    for p in e.params_mut() {
        for v in p.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    e
}

/// Parameter tensors of a composed model, in a fixed order.
trait Params: Clone {
    fn tensors(&mut self) -> Vec<&mut Tensor>;
}

#[derive(Clone)]
struct EncCls(Encoder, Classifier);

impl Params for EncCls {
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.0.params_mut();
        v.extend(self.1.params_mut());
        v
    }
}

#[derive(Clone)]
struct EncDisc(Encoder, DomainDiscriminator);

impl Params for EncDisc {
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.0.params_mut();
        v.extend(self.1.params_mut());
        v
    }
}

/// Compares accumulated parameter gradients with finite differences of
/// `loss`. Entries flagged in `reversed` pass through a reversal layer of
/// strength `lambda` and must equal `-lambda` times the finite difference.
fn composed_check<M: Params>(model: &M, reversed: &[bool], lambda: f64, loss: impl Fn(&mut M, bool) -> f64) -> f64 {
    let mut m = model.clone();
    loss(&mut m, true);
    let analytic: Vec<Vec<f64>> = m
        .tensors()
        .into_iter()
        .map(|t| t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut base = model.clone();
    let originals: Vec<Tensor> = base.tensors().into_iter().map(|t| t.clone()).collect();
    let mut worst: f64 = 0.0;
    for (i, orig) in originals.iter().enumerate() {
        let numeric = finite_diff_gradient(
            |probe| {
                let mut p = model.clone();
                p.tensors()[i].data_mut().copy_from_slice(probe.data());
                loss(&mut p, false)
            },
            orig,
            H,
        );
        let expected: Vec<f64> = if reversed[i] {
            numeric.data().iter().map(|g| -lambda * g).collect()
        } else {
            numeric.data().to_vec()
        };
        worst = worst.max(max_relative_error(&analytic[i], &expected, FLOOR));
    }
    worst
}

fn encode_batch(
    tape: &mut Tape,
    enc: &Encoder,
    train: bool,
    batch: &[FeaturizedInstance],
) -> (Var, rgated::encoder::EncoderVars) {
    let ev = enc.bind(tape, train);
    let rows: Vec<Var> = batch.iter().map(|x| enc.forward(tape, &ev, x).unwrap()).collect();
    (tape.stack_rows(&rows).unwrap(), ev)
}

pub fn encoder_to_classifier() -> Outcome {
    let mut out = Outcome::new("encoder->classifier", KINK_TOL);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if seed % 2 == 0 {
            EncoderKind::Cnn
        } else {
            EncoderKind::Pcnn
        };
        let enc = tiny_encoder(&mut rng, kind);
        let cls = Classifier::new(3, enc.feature_dim(), &mut rng);
        let batch: Vec<FeaturizedInstance> = (0..3).map(|_| instance(&mut rng, 6, 4)).collect();
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();

        let loss = |m: &mut EncCls, train: bool| {
            let mut tape = Tape::new();
            let (f, ev) = encode_batch(&mut tape, &m.0, train, &batch);
            let cv = m.1.bind(&mut tape, train);
            let z = m.1.logits(&mut tape, &cv, f).unwrap();
            let ce = tape.softmax_cross_entropy(z, &labels).unwrap();
            let l = tape.mean(ce);
            if train {
                let g = tape.backward(l).unwrap();
                m.0.accumulate(&ev, &g);
                m.1.accumulate(&cv, &g);
            }
            tape.scalar(l)
        };
        let err = composed_check(&EncCls(enc, cls), &[false; 7], 0.0, loss);
        out.record(seed, err);
    }
    out
}

pub fn encoder_through_reversal_to_discriminator() -> Outcome {
    let mut out = Outcome::new("encoder->reversal->discriminator", KINK_TOL);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let kind = if seed % 2 == 0 {
            EncoderKind::Pcnn
        } else {
            EncoderKind::Cnn
        };
        let enc = tiny_encoder(&mut rng, kind);
        let d = DomainDiscriminator::new(DiscriminatorRole::Adversarial, enc.feature_dim(), 4, &mut rng);
        let source = rand_t(&mut rng, &[3, enc.feature_dim()], -0.9, 0.9);
        let batch: Vec<FeaturizedInstance> = (0..2).map(|_| instance(&mut rng, 6, 4)).collect();
        let lambda = rng.gen_range(0.1..2.0);

        let loss = |m: &mut EncDisc, train: bool| {
            let mut tape = Tape::new();
            let (f, ev) = encode_batch(&mut tape, &m.0, train, &batch);
            let f = tape.grad_reverse(f, lambda);
            let dv = m.1.bind(&mut tape, train);
            let s = tape.constant(&source);
            let ps = m.1.forward(&mut tape, &dv, s).unwrap();
            let pt = m.1.forward(&mut tape, &dv, f).unwrap();
            let ls = tape.binary_cross_entropy(ps, &[1.0; 3], 1e-7).unwrap();
            let lt = tape.binary_cross_entropy(pt, &[0.0; 2], 1e-7).unwrap();
            let ls = tape.mean(ls);
            let lt = tape.mean(lt);
            let l = tape.add(ls, lt).unwrap();
            if train {
                let g = tape.backward(l).unwrap();
                m.0.accumulate(&ev, &g);
                m.1.accumulate(&dv, &g);
            }
            tape.scalar(l)
        };
        let reversed = [true, true, true, true, true, false, false, false, false];
        let err = composed_check(&EncDisc(enc, d), &reversed, lambda, loss);
        out.record(seed, err);
    }
    out
}

impl Params for RelationGate {
    fn tensors(&mut self) -> Vec<&mut Tensor> {
        self.params_mut()
    }
}

pub fn gate_through_weights_to_weighted_loss() -> Outcome {
    let mut out = Outcome::new("gate->weights->loss", SMOOTH_TOL);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let feat = rng.gen_range(2..6);
        let n = rng.gen_range(2..6);
        let mut gate = RelationGate::new(feat);
        gate.weight
            .data_mut()
            .copy_from_slice(rand_t(&mut rng, &[1, feat], -1.0, 1.0).data());
        gate.bias.data_mut()[0] = rng.gen_range(-0.5..0.5);
        let feats = rand_t(&mut rng, &[n, feat], -1.0, 1.0);
        let inst: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let cat: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let bces: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
        let lambda = rng.gen_range(0.1..2.0);

        let loss = |g: &mut RelationGate, train: bool| {
            let mut tape = Tape::new();
            let gv = g.bind(&mut tape, train);
            let f = tape.constant(&feats);
            let a = g.forward(&mut tape, &gv, f).unwrap();
            let raw = tape.blend(a, &inst, &cat).unwrap();
            let w = tape.normalize_mean(raw).unwrap();
            let w = tape.grad_reverse(w, lambda);
            let c = tape.input(vec![n], bces.clone()).unwrap();
            let l = tape.mul(w, c).unwrap();
            let l = tape.mean(l);
            if train {
                let grads = tape.backward(l).unwrap();
                g.accumulate(&gv, &grads);
            }
            tape.scalar(l)
        };
        let err = composed_check(&gate, &[true, true], lambda, loss);
        out.record(seed, err);
    }
    out
}
