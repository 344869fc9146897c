//! Independent f64 reference implementations of every tape op, and a
//! generator of random gradient-check cases built from them.
//!
//! The reference side never calls into the library's kernels. Gradients of
//! the reference are central differences at `EPS` in f64.

#![allow(dead_code)]

use dprune::tape::{Tape, Var};
use dprune::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so coordinates whose true
/// derivative is near zero are compared absolutely at `REL_TOL * FLOOR`.
pub const FLOOR: f64 = 1e-2;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn bias_add(x: &[f64], b: &[f64], shape: &[usize]) -> Vec<f64> {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    x.iter()
        .enumerate()
        .map(|(i, v)| v + b[(i / inner) % c])
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Stride-1 cross-correlation with zero padding.
pub fn conv2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y + dy) as isize - pad as isize;
                                let ix = (xo + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * ci + c) * k + dy) * k + dx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

pub fn avg_pool(x: &[f64], xs: [usize; 4], s: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += x[(p * h + y * s + dy) * w + xo * s + dx];
                    }
                }
                out[(p * oh + y) * ow + xo] = acc / (s * s) as f64;
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn softmax(z: &[f64], c: usize) -> Vec<f64> {
    z.chunks(c)
        .flat_map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Mean negative log-likelihood of `labels` under row softmax.
pub fn cross_entropy(z: &[f64], labels: &[usize], c: usize) -> f64 {
    let total: f64 = z
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

type EvalFn = Box<dyn Fn(&[Vec<f64>]) -> f64>;
type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> dprune::Result<Var>>;

/// A scalar function of several tensor inputs, given twice: as an f64
/// reference and as a tape graph.
pub struct Case {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    /// Input values, already rounded to f32.
    pub inputs: Vec<Vec<f64>>,
    pub eval: EvalFn,
    pub build: BuildFn,
}

#[derive(Debug)]
pub struct CaseResult {
    pub name: String,
    pub coords: usize,
    pub max_err: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_err <= REL_TOL
    }
}

fn fd_grad(eval: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut x = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = x[i][j];
            x[i][j] = orig + EPS;
            let up = eval(&x);
            x[i][j] = orig - EPS;
            let down = eval(&x);
            x[i][j] = orig;
            g[j] = (up - down) / (2.0 * EPS);
        }
        out.push(g);
    }
    out
}

/// Tape gradient against the central-difference gradient of the reference.
pub fn check(case: &Case) -> dprune::Result<CaseResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.shapes)
        .map(|(v, s)| tape.leaf(Tensor::new(s.clone(), v.iter().map(|&x| x as f32).collect()).unwrap()))
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let grads = tape.grad(out, &vars)?;
    let fd = fd_grad(&*case.eval, &case.inputs);
    let mut max_err = 0.0f64;
    let mut coords = 0;
    for (g, f) in grads.iter().zip(&fd) {
        for (&a, &b) in tape.value(*g).data().iter().zip(f) {
            let err = (a as f64 - b).abs() / b.abs().max(FLOOR);
            max_err = max_err.max(err);
            coords += 1;
        }
    }
    Ok(CaseResult {
        name: case.name.clone(),
        coords,
        max_err,
    })
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect()
}

/// Uniform on [-1, 1] with |x| >= 0.05, so ReLU kinks stay out of FD reach.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(0.05f32..1.0);
            if rng.random::<bool>() {
                v as f64
            } else {
                -v as f64
            }
        })
        .collect()
}

fn weights_const(t: &mut Tape, w: &[f64], shape: &[usize]) -> Tensor {
    let _ = t;
    Tensor::new(shape.to_vec(), w.iter().map(|&x| x as f32).collect()).unwrap()
}

/// `Σ w ⊙ y` on the tape.
fn contract(t: &mut Tape, y: Var, w: &[f64]) -> dprune::Result<Var> {
    let shape = t.shape(y).to_vec();
    let c = weights_const(t, w, &shape);
    let p = t.mul_const(y, c)?;
    Ok(t.sum(p))
}

fn case(
    name: &str,
    shapes: Vec<Vec<usize>>,
    inputs: Vec<Vec<f64>>,
    eval: impl Fn(&[Vec<f64>]) -> f64 + 'static,
    build: impl Fn(&mut Tape, &[Var]) -> dprune::Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        shapes,
        inputs,
        eval: Box::new(eval),
        build: Box::new(build),
    }
}

pub const KINDS: usize = 20;

/// One random case of kind `kind % KINDS`.
pub fn random_case(kind: usize, rng: &mut ChaCha8Rng) -> Case {
    let d = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.random_range(lo..=hi);
    match kind % KINDS {
        0 => {
            let (m, k, n) = (d(rng, 1, 5), d(rng, 1, 5), d(rng, 1, 5));
            let w = uniform(rng, m * n);
            let w2 = w.clone();
            case(
                "matmul",
                vec![vec![m, k], vec![k, n]],
                vec![uniform(rng, m * k), uniform(rng, k * n)],
                move |x| dot(&matmul(&x[0], &x[1], m, k, n), &w),
                move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    contract(t, y, &w2)
                },
            )
        }
        1 => {
            let (m, k, n) = (d(rng, 1, 5), d(rng, 1, 5), d(rng, 1, 5));
            let w = uniform(rng, m * n);
            let w2 = w.clone();
            case(
                "matmul_nt",
                vec![vec![m, k], vec![n, k]],
                vec![uniform(rng, m * k), uniform(rng, n * k)],
                move |x| dot(&matmul(&x[0], &transpose(&x[1], n, k), m, k, n), &w),
                move |t, v| {
                    let y = t.matmul_nt(v[0], v[1])?;
                    contract(t, y, &w2)
                },
            )
        }
        2 => {
            let (m, k, n) = (d(rng, 1, 5), d(rng, 1, 5), d(rng, 1, 5));
            let w = uniform(rng, m * n);
            let w2 = w.clone();
            case(
                "matmul_tn",
                vec![vec![k, m], vec![k, n]],
                vec![uniform(rng, k * m), uniform(rng, k * n)],
                move |x| dot(&matmul(&transpose(&x[0], k, m), &x[1], m, k, n), &w),
                move |t, v| {
                    let y = t.matmul_tn(v[0], v[1])?;
                    contract(t, y, &w2)
                },
            )
        }
        k @ 3..=5 => {
            let (r, c) = (d(rng, 1, 4), d(rng, 1, 6));
            let w = uniform(rng, r * c);
            let w2 = w.clone();
            let name = ["add", "sub", "mul"][k - 3];
            let f = [|a: f64, b: f64| a + b, |a, b| a - b, |a, b| a * b][k - 3];
            case(
                name,
                vec![vec![r, c], vec![r, c]],
                vec![uniform(rng, r * c), uniform(rng, r * c)],
                move |x| x[0].iter().zip(&x[1]).zip(&w).map(|((&a, &b), &wi)| f(a, b) * wi).sum(),
                move |t, v| {
                    let y = match k {
                        3 => t.add(v[0], v[1])?,
                        4 => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    contract(t, y, &w2)
                },
            )
        }
        6 => {
            let n = d(rng, 1, 12);
            let c = rng.random_range(-2.0f32..2.0);
            let w = uniform(rng, n);
            let w2 = w.clone();
            case(
                "scale",
                vec![vec![n]],
                vec![uniform(rng, n)],
                move |x| x[0].iter().zip(&w).map(|(a, wi)| a * c as f64 * wi).sum(),
                move |t, v| {
                    let y = t.scale(v[0], c);
                    contract(t, y, &w2)
                },
            )
        }
        7 => {
            let n = d(rng, 1, 12);
            let w = uniform(rng, n);
            let w2 = w.clone();
            case(
                "scale_by",
                vec![vec![n], vec![1]],
                vec![uniform(rng, n), uniform(rng, 1)],
                move |x| x[0].iter().zip(&w).map(|(a, wi)| a * x[1][0] * wi).sum(),
                move |t, v| {
                    let y = t.scale_by(v[0], v[1])?;
                    contract(t, y, &w2)
                },
            )
        }
        8 => {
            let n = d(rng, 1, 12);
            let c = uniform(rng, n);
            let w = uniform(rng, n);
            let (c2, w2) = (c.clone(), w.clone());
            case(
                "mul_const",
                vec![vec![n]],
                vec![uniform(rng, n)],
                move |x| x[0].iter().zip(&c).zip(&w).map(|((a, ci), wi)| a * ci * wi).sum(),
                move |t, v| {
                    let ct = Tensor::new(vec![c2.len()], c2.iter().map(|&x| x as f32).collect())?;
                    let y = t.mul_const(v[0], ct)?;
                    contract(t, y, &w2)
                },
            )
        }
        9 => {
            let spatial = rng.random::<bool>();
            let (n, c) = (d(rng, 1, 3), d(rng, 1, 4));
            let shape = if spatial { vec![n, c, d(rng, 1, 3), d(rng, 1, 3)] } else { vec![n, c] };
            let len: usize = shape.iter().product();
            let w = uniform(rng, len);
            let (w2, s2) = (w.clone(), shape.clone());
            case(
                "bias_add",
                vec![shape.clone(), vec![c]],
                vec![uniform(rng, len), uniform(rng, c)],
                move |x| dot(&bias_add(&x[0], &x[1], &s2), &w),
                move |t, v| {
                    let y = t.bias_add(v[0], v[1])?;
                    contract(t, y, &w2)
                },
            )
        }
        10 => {
            let n = d(rng, 1, 16);
            let w = uniform(rng, n);
            let w2 = w.clone();
            case(
                "relu",
                vec![vec![n]],
                vec![off_kink(rng, n)],
                move |x| dot(&relu(&x[0]), &w),
                move |t, v| {
                    let y = t.relu(v[0]);
                    contract(t, y, &w2)
                },
            )
        }
        11 => {
            let (n, ci, co) = (d(rng, 1, 2), d(rng, 1, 3), d(rng, 1, 3));
            let k = [1, 3][rng.random_range(0..2)];
            let pad = if rng.random::<bool>() { k / 2 } else { 0 };
            let (h, wd) = (d(rng, k, 5), d(rng, k, 5));
            let xs = [n, ci, h, wd];
            let ws = [co, ci, k, k];
            let out_len = n * co * (h + 2 * pad - k + 1) * (wd + 2 * pad - k + 1);
            let w = uniform(rng, out_len);
            let w2 = w.clone();
            case(
                &format!("conv2d k{k} pad{pad}"),
                vec![xs.to_vec(), ws.to_vec()],
                vec![uniform(rng, xs.iter().product()), uniform(rng, ws.iter().product())],
                move |x| dot(&conv2d(&x[0], xs, &x[1], ws, pad).0, &w),
                move |t, v| {
                    let y = t.conv2d(v[0], v[1], pad)?;
                    contract(t, y, &w2)
                },
            )
        }
        12 => {
            let s = d(rng, 1, 3);
            let xs = [d(rng, 1, 2), d(rng, 1, 3), d(rng, s, 7), d(rng, s, 7)];
            let out_len = xs[0] * xs[1] * (xs[2] / s) * (xs[3] / s);
            let w = uniform(rng, out_len);
            let w2 = w.clone();
            case(
                "avg_pool",
                vec![xs.to_vec()],
                vec![uniform(rng, xs.iter().product())],
                move |x| dot(&avg_pool(&x[0], xs, s).0, &w),
                move |t, v| {
                    let y = t.avg_pool(v[0], s)?;
                    contract(t, y, &w2)
                },
            )
        }
        13 => {
            let (a, b) = (d(rng, 1, 4), d(rng, 1, 4));
            let w = uniform(rng, a * b);
            let w2 = w.clone();
            // Reshape then a nonlinear use, so the gradient is not constant.
            case(
                "reshape",
                vec![vec![a, b]],
                vec![uniform(rng, a * b)],
                move |x| x[0].iter().zip(&w).map(|(v, wi)| v * v * wi).sum(),
                move |t, v| {
                    let r = t.reshape(v[0], vec![b, a])?;
                    let sq = t.mul(r, r)?;
                    let flat = t.reshape(sq, vec![a * b])?;
                    contract(t, flat, &w2)
                },
            )
        }
        14 => {
            let n = d(rng, 2, 16);
            let off = rng.random_range(0..n);
            let len = rng.random_range(1..=n - off);
            let w = uniform(rng, len);
            let w2 = w.clone();
            case(
                "slice",
                vec![vec![n]],
                vec![uniform(rng, n)],
                move |x| x[0][off..off + len].iter().zip(&w).map(|(v, wi)| v * v * wi).sum(),
                move |t, v| {
                    let s = t.slice(v[0], off, vec![len])?;
                    let sq = t.mul(s, s)?;
                    contract(t, sq, &w2)
                },
            )
        }
        15 => {
            let n = d(rng, 1, 16);
            case(
                "sum",
                vec![vec![n]],
                vec![uniform(rng, n)],
                move |x| {
                    let s: f64 = x[0].iter().sum();
                    s * s
                },
                move |t, v| {
                    let s = t.sum(v[0]);
                    Ok(t.mul(s, s)?)
                },
            )
        }
        16 => {
            let (r, c) = (d(rng, 1, 4), d(rng, 1, 6));
            let w = uniform(rng, r * c);
            let w2 = w.clone();
            let z: Vec<f64> = uniform(rng, r * c).iter().map(|v| v * 3.0).collect();
            case(
                "softmax",
                vec![vec![r, c]],
                vec![z.iter().map(|&v| v as f32 as f64).collect()],
                move |x| dot(&softmax(&x[0], c), &w),
                move |t, v| {
                    let y = t.softmax(v[0])?;
                    contract(t, y, &w2)
                },
            )
        }
        17 => {
            let (r, c) = (d(rng, 1, 5), d(rng, 2, 6));
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let l2 = labels.clone();
            let z: Vec<f64> = uniform(rng, r * c).iter().map(|v| (v * 3.0) as f32 as f64).collect();
            case(
                "cross_entropy",
                vec![vec![r, c]],
                vec![z],
                move |x| cross_entropy(&x[0], &labels, c),
                move |t, v| t.cross_entropy(v[0], &l2),
            )
        }
        18 => mlp_case(rng),
        _ => conv_net_case(rng),
    }
}

/// Dense → bias → ReLU → dense → bias → cross-entropy, differentiated with
/// respect to the input and all weights. Resampled until no pre-activation
/// sits within 0.02 of the ReLU kink.
fn mlp_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let (n, din, hid, c) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(2..=4));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let inputs = vec![
            uniform(rng, n * din),
            uniform(rng, din * hid),
            uniform(rng, hid),
            uniform(rng, hid * c),
            uniform(rng, c),
        ];
        let pre = bias_add(&matmul(&inputs[0], &inputs[1], n, din, hid), &inputs[2], &[n, hid]);
        if pre.iter().any(|z| z.abs() < 0.02) {
            continue;
        }
        let l2 = labels.clone();
        let eval = move |x: &[Vec<f64>]| {
            let h = relu(&bias_add(&matmul(&x[0], &x[1], n, din, hid), &x[2], &[n, hid]));
            let z = bias_add(&matmul(&h, &x[3], n, hid, c), &x[4], &[n, c]);
            cross_entropy(&z, &labels, c)
        };
        return case(
            "mlp",
            vec![vec![n, din], vec![din, hid], vec![hid], vec![hid, c], vec![c]],
            inputs,
            eval,
            move |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.bias_add(h, v[2])?;
                let h = t.relu(h);
                let z = t.matmul(h, v[3])?;
                let z = t.bias_add(z, v[4])?;
                t.cross_entropy(z, &l2)
            },
        );
    }
}

/// Conv (same padding) → ReLU → 2×2 average pool → flatten → dense →
/// cross-entropy.
fn conv_net_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let (n, ci, co, hw, c) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2), 4, rng.random_range(2..=3));
        let xs = [n, ci, hw, hw];
        let ws = [co, ci, 3, 3];
        let flat = co * (hw / 2) * (hw / 2);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let inputs = vec![
            uniform(rng, xs.iter().product()),
            uniform(rng, ws.iter().product()),
            uniform(rng, flat * c),
        ];
        let (pre, _) = conv2d(&inputs[0], xs, &inputs[1], ws, 1);
        if pre.iter().any(|z| z.abs() < 0.02) {
            continue;
        }
        let l2 = labels.clone();
        let eval = move |x: &[Vec<f64>]| {
            let (y, ys) = conv2d(&x[0], xs, &x[1], ws, 1);
            let (p, _) = avg_pool(&relu(&y), ys, 2);
            cross_entropy(&matmul(&p, &x[2], n, flat, c), &labels, c)
        };
        return case(
            "convnet",
            vec![xs.to_vec(), ws.to_vec(), vec![flat, c]],
            inputs,
            eval,
            move |t, v| {
                let y = t.conv2d(v[0], v[1], 1)?;
                let y = t.relu(y);
                let p = t.avg_pool(y, 2)?;
                let p = t.reshape(p, vec![n, flat])?;
                let z = t.matmul(p, v[2])?;
                t.cross_entropy(z, &l2)
            },
        );
    }
}

/// Second-order variant: `Σ_i ⟨w_i, ∂f/∂x_i⟩` where the inner gradient is
/// itself taken on the tape (reference: nested central differences).
pub fn double_backward(inner: Case, rng: &mut ChaCha8Rng) -> Case {
    let ws: Vec<Vec<f64>> = inner.inputs.iter().map(|v| uniform(rng, v.len())).collect();
    let ws2 = ws.clone();
    let Case {
        name,
        shapes,
        inputs,
        eval,
        build,
    } = inner;
    let eval = std::rc::Rc::new(eval);
    let e2 = eval.clone();
    Case {
        name: format!("d2 {name}"),
        shapes,
        inputs,
        eval: Box::new(move |x| {
            let g = fd_grad(&**e2, x);
            g.iter().zip(&ws).map(|(gi, wi)| dot(gi, wi)).sum()
        }),
        build: Box::new(move |t, v| {
            let f = build(t, v)?;
            let gs = t.grad(f, v)?;
            let mut acc: Option<Var> = None;
            for (g, w) in gs.into_iter().zip(&ws2) {
                let term = contract(t, g, w)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, term)?,
                    None => term,
                });
            }
            Ok(acc.expect("at least one input"))
        }),
    }
}

/// Second-order kinds: those with nonzero curvature.
pub const SECOND_ORDER_KINDS: [usize; 8] = [0, 5, 7, 11, 16, 17, 18, 19];

/// `count` first-order cases cycling through every kind, followed by
/// `second` double-backward cases.
pub fn suite(seed: u64, count: usize, second: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Case> = (0..count).map(|i| random_case(i, &mut rng)).collect();
    for i in 0..second {
        let kind = SECOND_ORDER_KINDS[i % SECOND_ORDER_KINDS.len()];
        let inner = random_case(kind, &mut rng);
        out.push(double_backward(inner, &mut rng));
    }
    out
}
