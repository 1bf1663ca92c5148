//! Finite-difference sweeps shared by the gradient tests and the acceptance run.

use augnerf_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-6;

/// Build a scalar loss from leaves holding `inputs`; returns (loss, leaves).
type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn eval(inputs: &[Tensor], build: &Builder) -> f64 {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &leaves);
    tape.value(loss).item().unwrap()
}

fn analytic(inputs: &[Tensor], build: &Builder) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &leaves);
    tape.backward(loss).unwrap();
    leaves
        .iter()
        .map(|&v| tape.grad_tensor(v).into_data())
        .collect()
}

fn numeric(inputs: &[Tensor], build: &Builder) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::new();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            g.push((eval(&plus, build) - eval(&minus, build)) / (2.0 * H));
        }
        out.push(g);
    }
    out
}

fn assert_close(inputs: &[Tensor], build: &Builder, label: &str) {
    let a = analytic(inputs, build);
    let n = numeric(inputs, build);
    for (i, (ga, gn)) in a.iter().zip(&n).enumerate() {
        for (j, (x, y)) in ga.iter().zip(gn).enumerate() {
            assert!(
                (x - y).abs() <= ATOL + RTOL * y.abs(),
                "{label}: leaf {i} elem {j}: analytic {x} vs numeric {y}"
            );
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero by `margin` so kinks stay outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum so every output element carries a distinct cotangent.
fn weighted_loss(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// Every primitive over 100 seeds; panics on the first mismatch.
pub fn every_primitive_over_100_seeds() {
    type Unary = fn(&mut Tape, Var) -> Var;
    let unaries: Vec<(&str, Unary, f64)> = vec![
        ("neg", |t, x| t.neg(x), 0.0),
        ("exp", |t, x| t.exp(x), 0.0),
        (
            "log",
            |t, x| {
                let s = t.square(x);
                let p = t.offset(s, 0.5);
                t.log(p)
            },
            0.0,
        ),
        ("sin", |t, x| t.sin(x), 0.0),
        ("cos", |t, x| t.cos(x), 0.0),
        (
            "sqrt",
            |t, x| {
                let s = t.square(x);
                let p = t.offset(s, 0.25);
                t.sqrt(p)
            },
            0.0,
        ),
        ("abs", |t, x| t.abs(x), 1e-2),
        ("relu", |t, x| t.relu(x), 1e-2),
        ("sigmoid", |t, x| t.sigmoid(x), 0.0),
        ("square", |t, x| t.square(x), 0.0),
        ("scale", |t, x| t.scale(x, -2.5), 0.0),
        ("offset", |t, x| t.offset(x, 0.75), 0.0),
        (
            "clamp",
            |t, x| {
                let y = t.offset(x, 0.005);
                t.clamp(y, -0.5, 0.5).unwrap()
            },
            1e-2,
        ),
        ("mean", |t, x| t.mean(x), 0.0),
        ("sum_last", |t, x| t.sum_last(x).unwrap(), 0.0),
        ("sum_axis0", |t, x| t.sum_axis(x, 0).unwrap(), 0.0),
        (
            "sum_axis_mid",
            |t, x| {
                let e = t.expand(x, 2, 2).unwrap();
                let y = t.sin(e);
                t.sum_axis(y, 1).unwrap()
            },
            0.0,
        ),
        ("cumsum", |t, x| t.cumsum_exclusive(x).unwrap(), 0.0),
        ("expand", |t, x| t.expand(x, 1, 3).unwrap(), 0.0),
        ("reshape", |t, x| t.reshape(x, &[3, 2]).unwrap(), 0.0),
        ("slice", |t, x| t.slice(x, 1, 1, 3).unwrap(), 0.0),
        (
            "fourier",
            |t, x| t.fourier(x, &[1.0, 2.0, 8.0]).unwrap(),
            0.0,
        ),
    ];
    for (name, f, margin) in &unaries {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = away_from_zero(&mut rng, &[2, 3], margin.max(1e-3));
            // keep clamp inputs away from its bounds too
            let x = if *name == "clamp" {
                let d = x
                    .data()
                    .iter()
                    .map(|v| {
                        if (v.abs() - 0.495).abs() < 1e-2 {
                            v * 0.8
                        } else {
                            *v
                        }
                    })
                    .collect();
                Tensor::new(vec![2, 3], d).unwrap()
            } else {
                x
            };
            let build = |t: &mut Tape, l: &[Var]| {
                let y = f(t, l[0]);
                weighted_loss(t, y, seed)
            };
            assert_close(&[x], &build, name);
        }
    }

    type Binary = fn(&mut Tape, Var, Var) -> Var;
    let binaries: Vec<(&str, Binary)> = vec![
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("div", |t, a, b| {
            let s = t.square(b);
            let d = t.offset(s, 0.5);
            t.div(a, d).unwrap()
        }),
        ("minimum", |t, a, b| t.minimum(a, b).unwrap()),
        ("maximum", |t, a, b| t.maximum(a, b).unwrap()),
        ("concat", |t, a, b| t.concat(&[a, b], 1).unwrap()),
    ];
    for (name, f) in &binaries {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let a = random_tensor(&mut rng, &[2, 3], -1.5, 1.5);
            let mut b = random_tensor(&mut rng, &[2, 3], -1.5, 1.5);
            // separate operands for min/max so the selection is unambiguous
            for (bv, av) in b.data_mut().iter_mut().zip(a.data()) {
                if (*bv - av).abs() < 1e-2 {
                    *bv += 0.05;
                }
            }
            let build = |t: &mut Tape, l: &[Var]| {
                let y = f(t, l[0], l[1]);
                weighted_loss(t, y, seed)
            };
            assert_close(&[a, b], &build, name);
        }
    }

    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3000);
        let x = random_tensor(&mut rng, &[2, 3], -1.5, 1.5);
        let b = random_tensor(&mut rng, &[3], -1.5, 1.5);
        let build = |t: &mut Tape, l: &[Var]| {
            let y = t.add_bias(l[0], l[1]).unwrap();
            weighted_loss(t, y, seed)
        };
        assert_close(&[x, b], &build, "add_bias");
    }

    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let a = random_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let v = random_tensor(&mut rng, &[4], -1.0, 1.0);
        let s = random_tensor(&mut rng, &[], -1.0, 1.0);
        let build = |t: &mut Tape, l: &[Var]| {
            let y = t.matmul(l[0], l[1]).unwrap();
            let yv = t.matmul(l[0], l[2]).unwrap();
            let vy = t.matmul(l[2], l[1]).unwrap();
            let ys = t.mul(y, l[3]).unwrap();
            let a = weighted_loss(t, ys, seed);
            let b = weighted_loss(t, yv, seed + 1);
            let c = weighted_loss(t, vy, seed + 2);
            let ab = t.add(a, b).unwrap();
            t.add(ab, c).unwrap()
        };
        assert_close(&[a, b, v, s], &build, "matmul");
    }
}

/// One instruction of a randomly generated program over `[2,3]` tensors.
/// Stop-gradient is excluded: finite differences see through it by construction.
#[derive(Clone, Copy, Debug)]
enum Instr {
    Exp(usize),
    Sin(usize),
    Cos(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    LogSoft(usize),
    SqrtSoft(usize),
    Clamp(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    DivSoft(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    MatMul(usize),
    ConcatSlice(usize, usize, usize),
    ExpandSum(usize),
    Cumsum(usize),
    Reshape(usize),
    ScalarMul(usize),
    Neg(usize),
}

fn random_program(rng: &mut ChaCha8Rng, depth: usize) -> Vec<Instr> {
    let mut prog = Vec::new();
    // slots 0 and 1 are the [2,3] leaves
    let mut live = 2;
    for _ in 0..depth {
        let a = rng.random_range(0..live);
        let b = rng.random_range(0..live);
        let op = match rng.random_range(0..23) {
            0 => Instr::Exp(a),
            1 => Instr::Sin(a),
            2 => Instr::Cos(a),
            3 => Instr::Sigmoid(a),
            4 => Instr::Relu(a),
            5 => Instr::Abs(a),
            6 => Instr::Square(a),
            7 => Instr::LogSoft(a),
            8 => Instr::SqrtSoft(a),
            9 => Instr::Clamp(a),
            10 => Instr::Add(a, b),
            11 => Instr::Sub(a, b),
            12 => Instr::Mul(a, b),
            13 => Instr::DivSoft(a, b),
            14 => Instr::Min(a, b),
            15 => Instr::Max(a, b),
            16 => Instr::MatMul(a),
            17 => Instr::ConcatSlice(a, b, rng.random_range(0..4)),
            18 => Instr::ExpandSum(a),
            19 => Instr::Cumsum(a),
            20 => Instr::Reshape(a),
            21 => Instr::ScalarMul(a),
            _ => Instr::Neg(a),
        };
        prog.push(op);
        live += 1;
    }
    prog
}

/// Runs the program; `kinks` collects distances of kink inputs from their kink.
fn run_program(t: &mut Tape, leaves: &[Var], prog: &[Instr], kinks: &mut Vec<f64>) -> Var {
    // leaves: x0, x1 ([2,3]), w ([3,3]), s (scalar)
    let mut slots = vec![leaves[0], leaves[1]];
    let (w, s) = (leaves[2], leaves[3]);
    let record = |t: &Tape, v: Var, at: f64, kinks: &mut Vec<f64>| {
        kinks.extend(t.value(v).data().iter().map(|x| (x - at).abs()));
    };
    for ins in prog {
        let out = match *ins {
            Instr::Exp(a) => {
                let bounded = t.sin(slots[a]);
                t.exp(bounded)
            }
            Instr::Sin(a) => t.sin(slots[a]),
            Instr::Cos(a) => t.cos(slots[a]),
            Instr::Sigmoid(a) => t.sigmoid(slots[a]),
            Instr::Relu(a) => {
                record(t, slots[a], 0.0, kinks);
                t.relu(slots[a])
            }
            Instr::Abs(a) => {
                record(t, slots[a], 0.0, kinks);
                t.abs(slots[a])
            }
            Instr::Square(a) => t.square(slots[a]),
            Instr::LogSoft(a) => {
                let q = t.square(slots[a]);
                let p = t.offset(q, 1.0);
                t.log(p)
            }
            Instr::SqrtSoft(a) => {
                let q = t.square(slots[a]);
                let p = t.offset(q, 1.0);
                t.sqrt(p)
            }
            Instr::Clamp(a) => {
                record(t, slots[a], -0.5, kinks);
                record(t, slots[a], 0.5, kinks);
                t.clamp(slots[a], -0.5, 0.5).unwrap()
            }
            Instr::Add(a, b) => t.add(slots[a], slots[b]).unwrap(),
            Instr::Sub(a, b) => t.sub(slots[a], slots[b]).unwrap(),
            Instr::Mul(a, b) => t.mul(slots[a], slots[b]).unwrap(),
            Instr::DivSoft(a, b) => {
                let q = t.square(slots[b]);
                let d = t.offset(q, 1.0);
                t.div(slots[a], d).unwrap()
            }
            Instr::Min(a, b) | Instr::Max(a, b) => {
                let diff = t.sub(slots[a], slots[b]).unwrap();
                record(t, diff, 0.0, kinks);
                if matches!(ins, Instr::Min(..)) {
                    t.minimum(slots[a], slots[b]).unwrap()
                } else {
                    t.maximum(slots[a], slots[b]).unwrap()
                }
            }
            Instr::MatMul(a) => t.matmul(slots[a], w).unwrap(),
            Instr::ConcatSlice(a, b, start) => {
                let c = t.concat(&[slots[a], slots[b]], 1).unwrap();
                t.slice(c, 1, start, start + 3).unwrap()
            }
            Instr::ExpandSum(a) => {
                let e = t.expand(slots[a], 2, 2).unwrap();
                t.sum_last(e).unwrap()
            }
            Instr::Cumsum(a) => t.cumsum_exclusive(slots[a]).unwrap(),
            Instr::Reshape(a) => {
                let r = t.reshape(slots[a], &[6]).unwrap();
                let n = t.neg(r);
                t.reshape(n, &[2, 3]).unwrap()
            }
            Instr::ScalarMul(a) => t.mul(s, slots[a]).unwrap(),
            Instr::Neg(a) => t.neg(slots[a]),
        };
        slots.push(out);
    }
    // mix every slot into the loss so dead branches still count
    let mut acc = t.mean(slots[0]);
    for (i, &v) in slots.iter().enumerate().skip(1) {
        let l = weighted_loss(t, v, i as u64);
        acc = t.add(acc, l).unwrap();
    }
    acc
}

/// 200 random programs of depth 1 to 8; panics on the first mismatch.
pub fn random_graphs_up_to_depth_8() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 200 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = rng.random_range(1..=8);
        let prog = random_program(&mut rng, depth);
        let inputs = vec![
            random_tensor(&mut rng, &[2, 3], -1.2, 1.2),
            random_tensor(&mut rng, &[2, 3], -1.2, 1.2),
            random_tensor(&mut rng, &[3, 3], -0.8, 0.8),
            random_tensor(&mut rng, &[], -1.5, 1.5),
        ];
        let mut kinks = Vec::new();
        {
            let mut t = Tape::new();
            let leaves: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), false)).collect();
            run_program(&mut t, &leaves, &prog, &mut kinks);
        }
        // a kink inside the stencil makes the finite difference meaningless
        if kinks.iter().any(|&d| d < 1e-3) {
            continue;
        }
        let build = |t: &mut Tape, l: &[Var]| run_program(t, l, &prog, &mut Vec::new());
        assert_close(&inputs, &build, &format!("seed {seed} {prog:?}"));
        checked += 1;
    }
}
