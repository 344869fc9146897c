//! Instability toolkit: linear interpolation between trained branches, the
//! loss barrier, two-dimensional loss grids, Hessian-diagonal summaries and
//! synthetic-vs-IMP comparison points.
//!
//! Grid points and Hutchinson probes are evaluated on a rayon pool sized by
//! `DPRUNE_WORKERS` (unset means one worker). Results are always collected in
//! index order.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CompressionRatio, LabeledDataset};
use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::model::{full_gradient, hvp_with, ModelState};
use crate::prune::{nearest, PruneRunRecord};
use crate::rng::{self, domain};
use crate::train::{evaluate, train, TrainRecipe};

pub const DEFAULT_ALPHA_STEPS: usize = 21;
pub const EXACT_TINY_LIMIT: usize = 5000;
/// Barriers below this are treated as zero when forming ratios.
pub const BARRIER_EPS: f64 = 1e-6;
pub const STABILITY_SENTINEL: f64 = 100.0;

fn pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var("DPRUNE_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build().map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// `(1 − α)·a + α·b`, computed per coordinate in f64.
pub fn interpolate(a: &ModelState, b: &ModelState, alpha: f64) -> Result<ModelState> {
    a.check_compatible(b)?;
    let params = a
        .params
        .iter()
        .zip(&b.params)
        .map(|(&x, &y)| ((1.0 - alpha) * x as f64 + alpha * y as f64) as f32)
        .collect();
    Ok(a.with_params(params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Dense,
    Imp,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub alphas: Vec<f64>,
    /// Full training-set loss at each alpha.
    pub losses: Vec<f64>,
    /// Test accuracy of the two branches.
    pub endpoint_accs: [f64; 2],
    pub barrier_height: f64,
    pub sparsity: f64,
    pub method_tag: MethodTag,
}

impl InstabilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,loss\n");
        for (a, l) in self.alphas.iter().zip(&self.losses) {
            s.push_str(&format!("{a},{l}\n"));
        }
        s
    }
}

/// `steps` evenly spaced points on [0, 1], with 0.5 added when absent.
pub fn alpha_grid(steps: usize) -> Result<Vec<f64>> {
    if steps < 3 {
        return Err(Error::Config(format!("alpha_steps must be >= 3, got {steps}")));
    }
    let mut grid: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
    if !grid.contains(&0.5) {
        grid.push(0.5);
        grid.sort_by(f64::total_cmp);
    }
    Ok(grid)
}

/// `loss(0.5) − mean(loss(0), loss(1))`, floored at zero.
pub fn barrier_height(losses: &[f64], alphas: &[f64]) -> Result<f64> {
    if losses.len() != alphas.len() {
        return Err(Error::Shape {
            context: "barrier losses",
            expected: vec![alphas.len()],
            actual: vec![losses.len()],
        });
    }
    let at = |target: f64| {
        alphas
            .iter()
            .position(|&a| a == target)
            .map(|i| losses[i])
            .ok_or_else(|| Error::InvalidInput(format!("alpha grid lacks {target}")))
    };
    let (l0, lh, l1) = (at(0.0)?, at(0.5)?, at(1.0)?);
    Ok((lh - 0.5 * (l0 + l1)).max(0.0))
}

/// Trains `init ⊙ mask` under two data orders and measures the training loss
/// along the straight line between the results.
#[allow(clippy::too_many_arguments)]
pub fn lmc_study(
    init: &ModelState,
    mask: &SparsityMask,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    recipe: &TrainRecipe,
    order_seeds: [u64; 2],
    alpha_steps: usize,
    method_tag: MethodTag,
) -> Result<InstabilityReport> {
    let alphas = alpha_grid(alpha_steps)?;
    let mut branches = Vec::with_capacity(2);
    for (i, &seed) in order_seeds.iter().enumerate() {
        let out = train(init, mask, train_set, &recipe.with_order_seed(seed))
            .map_err(|e| Error::diverged(format!("lmc branch {i} (order seed {seed})"), e))?;
        branches.push(out.state);
    }
    let (a, b) = (&branches[0], &branches[1]);
    let losses = alphas
        .iter()
        .map(|&alpha| evaluate(&interpolate(a, b, alpha)?, train_set).map(|e| e.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(InstabilityReport {
        barrier_height: barrier_height(&losses, &alphas)?,
        endpoint_accs: [evaluate(a, test_set)?.accuracy, evaluate(b, test_set)?.accuracy],
        alphas,
        losses,
        sparsity: mask.sparsity(),
        method_tag,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub origin: ModelState,
    pub basis_u: Vec<f32>,
    pub basis_v: Vec<f32>,
    /// Distance between the two endpoints along `u`.
    pub span: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major: `losses[j * xs.len() + i]` is the loss at `(xs[i], ys[j])`.
    pub losses: Vec<f64>,
    /// Grid coordinates of the two endpoints and their losses.
    pub endpoints: [(f64, f64); 2],
    pub endpoint_losses: [f64; 2],
}

impl LandscapeGrid {
    pub fn loss_at(&self, i: usize, j: usize) -> f64 {
        self.losses[j * self.xs.len() + i]
    }

    /// Matrix CSV: header row of x coordinates, then one row per y.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("y\\x");
        for x in &self.xs {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
        for (j, y) in self.ys.iter().enumerate() {
            s.push_str(&y.to_string());
            for i in 0..self.xs.len() {
                s.push_str(&format!(",{}", self.loss_at(i, j)));
            }
            s.push('\n');
        }
        s
    }

    pub fn header(&self) -> GridHeader {
        use sha2::{Digest, Sha256};
        let hash = |v: &[f32]| {
            let mut h = Sha256::new();
            for x in v {
                h.update(x.to_le_bytes());
            }
            hex::encode(&h.finalize()[..8])
        };
        GridHeader {
            origin_digest: self.origin.digest(),
            basis_u_hash: hash(&self.basis_u),
            basis_v_hash: hash(&self.basis_v),
            span: self.span,
            grid_n: self.xs.len(),
            evaluations: self.losses.len(),
            endpoints: self.endpoints,
            endpoint_losses: self.endpoint_losses,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub origin_digest: String,
    pub basis_u_hash: String,
    pub basis_v_hash: String,
    pub span: f64,
    pub grid_n: usize,
    pub evaluations: usize,
    pub endpoints: [(f64, f64); 2],
    pub endpoint_losses: [f64; 2],
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn plane_point(origin: &[f32], u: &[f32], v: &[f32], x: f64, y: f64) -> Vec<f32> {
    origin
        .iter()
        .zip(u.iter().zip(v))
        .map(|(&o, (&du, &dv))| (o as f64 + x * du as f64 + y * dv as f64) as f32)
        .collect()
}

/// Loss grid on the plane through `a` and `b` with the train set as loss.
pub fn landscape_grid(
    a: &ModelState,
    b: &ModelState,
    train_set: &LabeledDataset,
    grid_n: usize,
    margin: f64,
    seed: u64,
) -> Result<LandscapeGrid> {
    a.check_compatible(b)?;
    landscape_grid_with(
        |p| evaluate(&a.with_params(p.to_vec()), train_set).map(|e| e.loss),
        a,
        &b.params,
        grid_n,
        margin,
        seed,
    )
}

/// As [`landscape_grid`] for an arbitrary loss of the flat parameters.
pub fn landscape_grid_with<F>(
    loss_fn: F,
    a: &ModelState,
    b: &[f32],
    grid_n: usize,
    margin: f64,
    seed: u64,
) -> Result<LandscapeGrid>
where
    F: Fn(&[f32]) -> Result<f64> + Sync,
{
    if grid_n < 2 {
        return Err(Error::Config(format!("grid_n must be >= 2, got {grid_n}")));
    }
    if !(margin >= 0.0) {
        return Err(Error::Config("landscape margin must be >= 0".into()));
    }
    let diff: Vec<f64> = a.params.iter().zip(b).map(|(&x, &y)| y as f64 - x as f64).collect();
    let span = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if span < 1e-9 {
        return Err(Error::Degenerate(format!(
            "endpoints are {span:e} apart; the plane is undefined"
        )));
    }
    let u: Vec<f64> = diff.iter().map(|d| d / span).collect();
    // Coordinates zero in both endpoints stay zero in v.
    let support: Vec<bool> = a.params.iter().zip(b).map(|(&x, &y)| x != 0.0 || y != 0.0).collect();
    let mut rng = rng::keyed(domain::LANDSCAPE, seed, 0);
    let mut v: Vec<f64> = support
        .iter()
        .map(|&s| {
            let g: f64 = rng.sample(StandardNormal);
            if s {
                g
            } else {
                0.0
            }
        })
        .collect();
    let dot: f64 = v.iter().zip(&u).map(|(x, y)| x * y).sum();
    for (vi, ui) in v.iter_mut().zip(&u) {
        *vi -= dot * ui;
    }
    let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vnorm < 1e-12 {
        return Err(Error::Degenerate("random direction collapsed onto u".into()));
    }
    v.iter_mut().for_each(|x| *x /= vnorm);
    let u: Vec<f32> = u.into_iter().map(|x| x as f32).collect();
    let v: Vec<f32> = v.into_iter().map(|x| x as f32).collect();

    let xs = linspace(-margin * span, (1.0 + margin) * span, grid_n);
    let half = (0.5 + margin) * span;
    let ys = linspace(-half, half, grid_n);
    let points: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let origin = &a.params;
    let losses = pool()?.install(|| {
        points
            .par_iter()
            .map(|&(x, y)| loss_fn(&plane_point(origin, &u, &v, x, y)))
            .collect::<Result<Vec<f64>>>()
    })?;
    let endpoints = [(0.0, 0.0), (span, 0.0)];
    let endpoint_losses = [loss_fn(origin)?, loss_fn(b)?];
    Ok(LandscapeGrid {
        origin: a.clone(),
        basis_u: u,
        basis_v: v,
        span,
        xs,
        ys,
        losses,
        endpoints,
        endpoint_losses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianEstimator {
    ExactTiny,
    Hutchinson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
    pub estimator: HessianEstimator,
    pub probe_count: usize,
    pub coordinates: usize,
}

impl HessianSummary {
    pub fn of(diag: &[f64], estimator: HessianEstimator, probe_count: usize) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::Degenerate("no surviving coordinates".into()));
        }
        let n = diag.len() as f64;
        let mean = diag.iter().sum::<f64>() / n;
        Ok(Self {
            min: diag.iter().copied().fold(f64::INFINITY, f64::min),
            max: diag.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: (diag.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt(),
            mean_abs: diag.iter().map(|d| d.abs()).sum::<f64>() / n,
            estimator,
            probe_count,
            coordinates: diag.len(),
        })
    }
}

/// Hessian diagonal of the full-data loss (accumulated over fixed batches of
/// `batch_size`) at the surviving coordinates of `mask`, in ascending index
/// order.
pub fn hessian_diag(
    state: &ModelState,
    mask: &SparsityMask,
    data: &LabeledDataset,
    estimator: HessianEstimator,
    probe_count: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    mask.check_aligned(state.params.len())?;
    let state = mask.apply_to(state);
    hessian_diag_with(
        |p| full_gradient(&state.with_params(p.to_vec()), &data.features, &data.labels, batch_size).map(|(_, g)| g),
        &state.params,
        mask.bits(),
        estimator,
        probe_count,
        seed,
    )
}

/// As [`hessian_diag`] for an arbitrary gradient function.
pub fn hessian_diag_with<F>(
    grad_fn: F,
    params: &[f32],
    keep: &[bool],
    estimator: HessianEstimator,
    probe_count: usize,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: Fn(&[f32]) -> Result<Vec<f32>> + Sync,
{
    let surviving: Vec<usize> = (0..params.len()).filter(|&i| keep[i]).collect();
    match estimator {
        HessianEstimator::ExactTiny => {
            if params.len() > EXACT_TINY_LIMIT {
                return Err(Error::Config(format!(
                    "exact-tiny Hessian needs <= {EXACT_TINY_LIMIT} parameters, model has {}; use hutchinson",
                    params.len()
                )));
            }
            pool()?.install(|| {
                surviving
                    .par_iter()
                    .map(|&i| {
                        let mut e = vec![0.0f32; params.len()];
                        e[i] = 1.0;
                        hvp_with(&grad_fn, params, &e).map(|h| h[i] as f64)
                    })
                    .collect()
            })
        }
        HessianEstimator::Hutchinson => {
            if probe_count == 0 {
                return Err(Error::Config("hutchinson needs probe_count >= 1".into()));
            }
            let probes = pool()?.install(|| {
                (0..probe_count)
                    .into_par_iter()
                    .map(|k| {
                        let mut rng = rng::keyed(domain::HUTCHINSON, seed, k as u64);
                        let mut z = vec![0.0f32; params.len()];
                        for &i in &surviving {
                            z[i] = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        }
                        let h = hvp_with(&grad_fn, params, &z)?;
                        Ok(surviving.iter().map(|&i| (z[i] * h[i]) as f64).collect::<Vec<f64>>())
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()
            })?;
            let mut acc = vec![0.0f64; surviving.len()];
            for p in &probes {
                for (a, x) in acc.iter_mut().zip(p) {
                    *a += x;
                }
            }
            Ok(acc.into_iter().map(|a| a / probe_count as f64).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonPoint {
    pub sparsity: f64,
    pub compression: Option<CompressionRatio>,
    pub syn_accuracy: f64,
    pub imp_accuracy: f64,
    pub performance_ratio: f64,
    pub syn_barrier: f64,
    pub imp_barrier: f64,
    pub stability_ratio: f64,
    /// Set when the IMP barrier is below `BARRIER_EPS` and the ratio is a
    /// sentinel.
    pub degenerate: bool,
}

fn mean_barrier(reports: &[InstabilityReport], sparsity: f64) -> Result<f64> {
    let hits: Vec<f64> = reports
        .iter()
        .filter(|r| (r.sparsity - sparsity).abs() < 1e-9)
        .map(|r| r.barrier_height)
        .collect();
    if hits.is_empty() {
        let avail: Vec<f64> = reports.iter().map(|r| r.sparsity).collect();
        return Err(Error::MissingCheckpoint {
            requested: sparsity,
            nearest: nearest(&avail, sparsity),
        });
    }
    Ok(hits.iter().sum::<f64>() / hits.len() as f64)
}

/// Synthetic-over-IMP accuracy and barrier ratios at one sparsity. Barriers
/// are averaged over the reports at that sparsity.
pub fn compare(
    syn_record: &PruneRunRecord,
    imp_record: &PruneRunRecord,
    syn_reports: &[InstabilityReport],
    imp_reports: &[InstabilityReport],
    sparsity: f64,
    compression: Option<CompressionRatio>,
) -> Result<ComparisonPoint> {
    let syn_accuracy = syn_record.at_sparsity(sparsity)?.test_acc;
    let imp_accuracy = imp_record.at_sparsity(sparsity)?.test_acc;
    if imp_accuracy <= 0.0 {
        return Err(Error::Degenerate(format!(
            "IMP accuracy is zero at sparsity {sparsity}"
        )));
    }
    let syn_barrier = mean_barrier(syn_reports, sparsity)?;
    let imp_barrier = mean_barrier(imp_reports, sparsity)?;
    let (stability_ratio, degenerate) = stability_ratio(syn_barrier, imp_barrier);
    Ok(ComparisonPoint {
        sparsity,
        compression,
        syn_accuracy,
        imp_accuracy,
        performance_ratio: syn_accuracy / imp_accuracy,
        syn_barrier,
        imp_barrier,
        stability_ratio,
        degenerate,
    })
}

/// `syn / imp` with the division guard: both flat gives `(1, true)`, only
/// IMP flat gives the capped sentinel.
pub fn stability_ratio(syn_barrier: f64, imp_barrier: f64) -> (f64, bool) {
    if imp_barrier < BARRIER_EPS {
        if syn_barrier < BARRIER_EPS {
            (1.0, true)
        } else {
            (STABILITY_SENTINEL, true)
        }
    } else {
        ((syn_barrier / imp_barrier).min(STABILITY_SENTINEL), false)
    }
}
