mod support;

use dprune::data::{make_blobs, LabeledDataset, Role};
use dprune::distill::{
    distill, eval_distillate, initial_synthetic, match_step, record_teachers, student_accuracies, Classifier,
    DistillConfig, InitMode, StudentLoss,
};
use dprune::model::{Arch, ModelState};
use dprune::tape::{Tape, Var};
use dprune::tensor::Tensor;
use dprune::train::{evaluate, TrainRecipe};
use support::oracle;

/// Softmax regression trajectory in f64: `θ ← θ − lr ∇CE`, with θ laid out as
/// `[W (d×c), b (c)]`.
fn unrolled_f64(x: &[f64], labels: &[usize], d: usize, c: usize, theta: &[f64], lr: f64, steps: usize) -> Vec<f64> {
    let n = labels.len();
    let mut th = theta.to_vec();
    for _ in 0..steps {
        let (w, b) = th.split_at(d * c);
        let z = oracle::bias_add(&oracle::matmul(x, w, n, d, c), b, &[n, c]);
        let mut p = oracle::softmax(&z, c);
        for (r, &y) in labels.iter().enumerate() {
            p[r * c + y] -= 1.0;
        }
        let gw = oracle::matmul(&oracle::transpose(x, n, d), &p, d, n, c);
        let mut next = th.clone();
        for i in 0..d * c {
            next[i] -= lr * gw[i] / n as f64;
        }
        for j in 0..c {
            let gb: f64 = (0..n).map(|r| p[r * c + j]).sum::<f64>() / n as f64;
            next[d * c + j] -= lr * gb;
        }
        th = next;
    }
    th
}

fn matching_loss_f64(x: &[f64], labels: &[usize], d: usize, c: usize, start: &[f64], target: &[f64], lr: f64, k: usize) -> f64 {
    let end = unrolled_f64(x, labels, d, c, start, lr, k);
    let num: f64 = end.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = start.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    num / den
}

#[test]
fn unroll_gradient_matches_finite_differences() {
    let (n, d, c, k, lr) = (6, 3, 3, 4, 0.5f32);
    let arch = Arch::mlp(d, &[], c).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let data = make_blobs(1, n, d, 1.0, 3).unwrap();
    let x = data.features.clone();
    let start = ModelState::init(&arch, 1).params;
    let target: Vec<f32> = ModelState::init(&arch, 2).params;
    let student = Classifier { arch: &arch, labels: &labels };
    let got = match_step(&student, &x, &start, &target, lr, k).unwrap().unwrap();

    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let s64: Vec<f64> = start.iter().map(|&v| v as f64).collect();
    let t64: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let base = matching_loss_f64(&x64, &labels, d, c, &s64, &t64, lr as f64, k);
    assert!((got.loss - base).abs() <= 1e-5 * base, "{} vs {base}", got.loss);
    let mut xp = x64.clone();
    for i in 0..x64.len() {
        xp[i] = x64[i] + oracle::EPS;
        let up = matching_loss_f64(&xp, &labels, d, c, &s64, &t64, lr as f64, k);
        xp[i] = x64[i] - oracle::EPS;
        let down = matching_loss_f64(&xp, &labels, d, c, &s64, &t64, lr as f64, k);
        xp[i] = x64[i];
        let fd = (up - down) / (2.0 * oracle::EPS);
        let g = got.grad.data()[i] as f64;
        assert!((g - fd).abs() <= 1e-3 * fd.abs().max(oracle::FLOOR), "feature {i}: {g} vs {fd}");
    }
}

/// `½ mean((Xw − y)²)` over a fixed target vector.
struct LeastSquares {
    targets: Vec<f32>,
}

impl StudentLoss for LeastSquares {
    fn loss(&self, tape: &mut Tape, params: Var, features: Var) -> dprune::Result<Var> {
        let n = self.targets.len();
        let d = tape.shape(params)[0];
        let w = tape.reshape(params, vec![d, 1])?;
        let pred = tape.matmul(features, w)?;
        let y = tape.constant(Tensor::new(vec![n, 1], self.targets.clone())?);
        let r = tape.sub(pred, y)?;
        let sq = tape.mul(r, r)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 0.5 / n as f32))
    }
}

#[test]
fn least_squares_matching_loss_decreases_monotonically() {
    let (n_real, n_syn, d) = (40usize, 4usize, 3usize);
    let real = make_blobs(1, n_real, d, 1.0, 5).unwrap();
    let xr: Vec<f64> = real.features.data().iter().map(|&v| v as f64).collect();
    let w_true = [1.5, -2.0, 0.5];
    let yr: Vec<f64> = xr.chunks(d).map(|r| oracle::dot(r, &w_true)).collect();
    // Closed-form gradient-descent path of the real least-squares problem.
    let eta = 0.5;
    let mut path = vec![vec![0.0f64; d]];
    for _ in 0..6 {
        let w = path.last().unwrap();
        let mut g = vec![0.0; d];
        for (row, &y) in xr.chunks(d).zip(&yr) {
            let r = oracle::dot(row, w) - y;
            for j in 0..d {
                g[j] += r * row[j] / n_real as f64;
            }
        }
        path.push(w.iter().zip(&g).map(|(wi, gi)| wi - eta * gi).collect());
    }
    let start: Vec<f32> = path[0].iter().map(|&v| v as f32).collect();
    let target: Vec<f32> = path[4].iter().map(|&v| v as f32).collect();

    let mut x = real.features.gather_rows(&[0, 10, 20, 30]);
    let student = LeastSquares {
        targets: x.data().chunks(d).map(|r| r.iter().zip(&w_true).map(|(&a, &b)| a * b as f32).sum()).collect(),
    };
    assert_eq!(student.targets.len(), n_syn);
    let mut prev = f64::INFINITY;
    for step in 0..30 {
        let m = match_step(&student, &x, &start, &target, eta as f32, 2).unwrap().unwrap();
        assert!(m.loss < prev, "step {step}: {} after {prev}", m.loss);
        prev = m.loss;
        for (xi, gi) in x.data_mut().iter_mut().zip(m.grad.data()) {
            *xi -= 0.05 * gi;
        }
    }
}

fn ten_class_task() -> (LabeledDataset, LabeledDataset, Arch, TrainRecipe) {
    let all = make_blobs(10, 180, 20, 1.0, 7).unwrap();
    let train_set = all.take_per_class(0, 150, Role::RealTrain).unwrap();
    let test = all.take_per_class(150, 30, Role::Test).unwrap();
    let arch = Arch::mlp(20, &[64], 10).unwrap();
    let teacher = TrainRecipe {
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        epochs: 5,
        batch_size: 64,
        order_seed: 0,
        checkpoint_epochs: vec![],
        early_stop: None,
    };
    (train_set, test, arch, teacher)
}

#[test]
fn distillation_keeps_labels_and_pixel_range() {
    let (train_set, _, arch, teacher) = ten_class_task();
    let bank = record_teachers(&train_set, &arch, &teacher, &[1, 2], 5).unwrap();
    let cfg = DistillConfig {
        ipc: 3,
        outer_steps: 15,
        inner_unroll: 3,
        syn_lr: 5.0,
        syn_momentum: 0.5,
        match_horizon: 2,
        init_mode: InitMode::Noise,
        seed: 4,
    };
    let out = distill(&train_set, &bank, &teacher, &cfg).unwrap();
    let again = distill(&train_set, &bank, &teacher, &cfg).unwrap();
    assert_eq!(out.dataset.features.data(), again.dataset.features.data());
    assert_eq!(out.dataset.ipc, 3);
    assert_eq!(out.dataset.role, Role::Synthetic);
    assert_eq!(out.dataset.labels, initial_synthetic(&train_set, 3, InitMode::Noise, 4).unwrap().labels);
    assert!(out.dataset.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.losses.len() + out.skipped, 15);
}

#[test]
fn teachers_on_blobs_are_accurate() {
    let all = make_blobs(2, 600, 20, 1.0, 7).unwrap();
    let train_set = all.take_per_class(0, 500, Role::RealTrain).unwrap();
    let test = all.take_per_class(500, 100, Role::Test).unwrap();
    let arch = Arch::mlp(20, &[256], 2).unwrap();
    let recipe = TrainRecipe {
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        epochs: 8,
        batch_size: 64,
        order_seed: 0,
        checkpoint_epochs: vec![],
        early_stop: None,
    };
    let steps = 8 * 16;
    let bank = record_teachers(&train_set, &arch, &recipe, &[1, 2], steps / 4).unwrap();
    for t in &bank.trajectories {
        assert_eq!(t.snapshots.len(), 5);
        assert!(t.steps.windows(2).all(|w| w[0] < w[1]));
        let acc = evaluate(t.snapshots.last().unwrap(), &test).unwrap().accuracy;
        assert!(acc >= 0.95, "teacher {} accuracy {acc}", t.seed);
    }
}

#[test]
fn full_real_distillate_matches_real_training() {
    let (train_set, test, arch, teacher) = ten_class_task();
    let seeds = [1, 2];
    let syn = train_set.clone().with_role(Role::Synthetic);
    let a = eval_distillate(&syn, &test, &arch, &teacher, &seeds).unwrap();
    let b = student_accuracies(&train_set, &test, &arch, &teacher, &seeds).unwrap();
    assert_eq!(a, b);
    assert!(eval_distillate(&train_set, &test, &arch, &teacher, &seeds).is_err());
}

#[test]
fn more_images_per_class_help() {
    let (train_set, test, arch, teacher) = ten_class_task();
    let bank = record_teachers(&train_set, &arch, &teacher, &[1, 2], 4).unwrap();
    let student = TrainRecipe {
        epochs: 50,
        batch_size: 100,
        ..teacher.clone()
    };
    let seeds = [21, 22, 23, 24, 25];
    let mut means = Vec::new();
    for ipc in [1, 10] {
        let cfg = DistillConfig {
            ipc,
            outer_steps: 60,
            inner_unroll: 5,
            syn_lr: 1.0,
            syn_momentum: 0.5,
            match_horizon: 2,
            init_mode: InitMode::RandomReal,
            seed: 3,
        };
        let syn = distill(&train_set, &bank, &teacher, &cfg).unwrap().dataset;
        means.push(eval_distillate(&syn, &test, &arch, &student, &seeds).unwrap().mean);
    }
    assert!(means[1] >= means[0], "ipc 1: {}, ipc 10: {}", means[0], means[1]);
}
