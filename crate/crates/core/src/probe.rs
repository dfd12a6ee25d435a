//! Elastic-net multinomial logistic probes over per-layer SAE features.
//!
//! Objective (sklearn-style scaling, bias unpenalized):
//!
//! ```text
//! sum_i NLL_i + (1/C) * ( l1_ratio * ||W||_1 + (1 - l1_ratio)/2 * ||W||_2^2 )
//! ```
//!
//! Solved by FISTA with soft-threshold proximal steps and adaptive restart;
//! all solver state is f64 so objective values are comparable to a long-run
//! reference at 1e-4.

use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, EMOTIONS};
use crate::error::{Error, Result};
use crate::flow::ActivationStore;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// L1/L2 mixing ratio (1 = pure lasso).
    pub l1_ratio: f64,
    /// Inverse regularization strength.
    pub c: f64,
    pub max_iterations: usize,
    /// Relative objective-change tolerance for early stopping.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { l1_ratio: 0.3, c: 0.002, max_iterations: 2000, tol: 1e-10 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(Error::config("l1_ratio must lie in [0, 1]"));
        }
        if self.c <= 0.0 {
            return Err(Error::config("C must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Probe {
    pub layer: usize,
    /// [6, d] row-major weights.
    pub weights: Vec<f64>,
    pub bias: [f64; 6],
    pub dim: usize,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub nonzero_weights: usize,
}

impl Probe {
    pub fn scores(&self, x: &[f32]) -> [f64; 6] {
        let mut s = [0.0f64; 6];
        for (c, sc) in s.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            let mut acc = self.bias[c];
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    acc += row[j] * xj as f64;
                }
            }
            *sc = acc;
        }
        s
    }

    pub fn predict(&self, x: &[f32]) -> Emotion {
        let s = self.scores(x);
        let mut best = 0;
        for c in 1..6 {
            if s[c] > s[best] {
                best = c;
            }
        }
        EMOTIONS[best]
    }
}

struct Dataset {
    x: Vec<f64>,
    y: Vec<usize>,
    n: usize,
    d: usize,
}

fn nll_and_grad(ds: &Dataset, w: &[f64], b: &[f64; 6]) -> (f64, Vec<f64>, [f64; 6]) {
    let (n, d) = (ds.n, ds.d);
    let mut nll = 0.0f64;
    let mut gw = vec![0.0f64; 6 * d];
    let mut gb = [0.0f64; 6];
    let mut scores = [0.0f64; 6];
    for i in 0..n {
        let xi = &ds.x[i * d..(i + 1) * d];
        for c in 0..6 {
            let row = &w[c * d..(c + 1) * d];
            let mut acc = b[c];
            for j in 0..d {
                acc += row[j] * xi[j];
            }
            scores[c] = acc;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let se: f64 = scores.iter().map(|&s| (s - mx).exp()).sum();
        let lse = mx + se.ln();
        nll += lse - scores[ds.y[i]];
        for c in 0..6 {
            let p = (scores[c] - lse).exp();
            let g = p - if c == ds.y[i] { 1.0 } else { 0.0 };
            gb[c] += g;
            let row = &mut gw[c * d..(c + 1) * d];
            for j in 0..d {
                row[j] += g * xi[j];
            }
        }
    }
    (nll, gw, gb)
}

fn objective(ds: &Dataset, w: &[f64], b: &[f64; 6], cfg: &ProbeConfig) -> f64 {
    let (nll, _, _) = nll_and_grad(ds, w, b);
    nll + penalty(w, cfg)
}

fn penalty(w: &[f64], cfg: &ProbeConfig) -> f64 {
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let l2: f64 = w.iter().map(|v| v * v).sum();
    (cfg.l1_ratio * l1 + (1.0 - cfg.l1_ratio) * 0.5 * l2) / cfg.c
}

/// Largest squared singular value of X by power iteration.
fn spectral_sq(ds: &Dataset) -> f64 {
    let (n, d) = (ds.n, ds.d);
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut est = 1.0f64;
    for _ in 0..30 {
        // u = X v ; v' = X^T u
        let mut u = vec![0.0f64; n];
        for i in 0..n {
            let xi = &ds.x[i * d..(i + 1) * d];
            u[i] = xi.iter().zip(&v).map(|(&a, &b)| a * b).sum();
        }
        let mut vn = vec![0.0f64; d];
        for i in 0..n {
            let xi = &ds.x[i * d..(i + 1) * d];
            for j in 0..d {
                vn[j] += xi[j] * u[i];
            }
        }
        est = vn.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm = est.sqrt().max(1e-12);
        for (dst, &src) in v.iter_mut().zip(&vn) {
            *dst = src / (norm * norm);
        }
        let vv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= vv;
        }
    }
    est
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub struct FitResult {
    pub weights: Vec<f64>,
    pub bias: [f64; 6],
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

/// FISTA with adaptive restart on the elastic-net multinomial objective.
pub fn fit_elastic_net(
    x: &[f64],
    y: &[usize],
    n: usize,
    d: usize,
    cfg: &ProbeConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let ds = Dataset { x: x.to_vec(), y: y.to_vec(), n, d };
    // Lipschitz bound of the smooth part: softmax Hessian spectral bound of
    // 1/2 times X^T X, plus the ridge term.
    let ridge = (1.0 - cfg.l1_ratio) / cfg.c;
    let step = 1.0 / (0.5 * spectral_sq(&ds) + ridge + 1e-9);
    let l1_t = step * cfg.l1_ratio / cfg.c;

    let mut w = vec![0.0f64; 6 * d];
    let mut b = [0.0f64; 6];
    let mut zw = w.clone();
    let mut zb = b;
    let mut t_mom = 1.0f64;
    let mut prev_obj = objective(&ds, &w, &b, cfg);
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 0..cfg.max_iterations {
        iterations = iter + 1;
        let (_, mut gw, gb) = nll_and_grad(&ds, &zw, &zb);
        for (g, &zv) in gw.iter_mut().zip(&zw) {
            *g += ridge * zv;
        }
        let mut w_new = vec![0.0f64; 6 * d];
        for j in 0..6 * d {
            w_new[j] = soft_threshold(zw[j] - step * gw[j], l1_t);
        }
        let mut b_new = zb;
        for c in 0..6 {
            b_new[c] -= step * gb[c];
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t_mom * t_mom).sqrt());
        let coef = (t_mom - 1.0) / t_new;
        for j in 0..6 * d {
            zw[j] = w_new[j] + coef * (w_new[j] - w[j]);
        }
        for c in 0..6 {
            zb[c] = b_new[c] + coef * (b_new[c] - b[c]);
        }
        w = w_new;
        b = b_new;
        t_mom = t_new;

        if (iter + 1) % 10 == 0 || iter + 1 == cfg.max_iterations {
            let obj = objective(&ds, &w, &b, cfg);
            if obj > prev_obj {
                // adaptive restart: drop momentum
                zw.copy_from_slice(&w);
                zb = b;
                t_mom = 1.0;
            }
            let rel = (prev_obj - obj).abs() / obj.abs().max(1.0);
            if rel < cfg.tol && iter > 20 {
                converged = true;
                break;
            }
            prev_obj = obj;
        }
    }
    let final_obj = objective(&ds, &w, &b, cfg);
    Ok(FitResult { weights: w, bias: b, converged, iterations, objective: final_obj })
}

/// Plain proximal gradient descent with a conservative step; the slow
/// reference used by acceptance checks.
pub fn reference_solve(
    x: &[f64],
    y: &[usize],
    n: usize,
    d: usize,
    cfg: &ProbeConfig,
    iterations: usize,
) -> f64 {
    let ds = Dataset { x: x.to_vec(), y: y.to_vec(), n, d };
    let ridge = (1.0 - cfg.l1_ratio) / cfg.c;
    let step = 0.5 / (0.5 * spectral_sq(&ds) + ridge + 1e-9);
    let l1_t = step * cfg.l1_ratio / cfg.c;
    let mut w = vec![0.0f64; 6 * d];
    let mut b = [0.0f64; 6];
    for _ in 0..iterations {
        let (_, mut gw, gb) = nll_and_grad(&ds, &w, &b);
        for (g, &wv) in gw.iter_mut().zip(&w) {
            *g += ridge * wv;
        }
        for j in 0..6 * d {
            w[j] = soft_threshold(w[j] - step * gw[j], l1_t);
        }
        for c in 0..6 {
            b[c] -= step * gb[c];
        }
    }
    objective(&ds, &w, &b, cfg)
}

/// Trains a probe on one layer's SAE features over a balanced id set.
pub fn train_probe(
    store: &ActivationStore,
    instances_labels: &[Emotion],
    layer: usize,
    ids: &[usize],
    cfg: &ProbeConfig,
) -> Result<Probe> {
    cfg.validate()?;
    // balanced training set expected
    let mut counts = [0usize; 6];
    for &id in ids {
        let row = store
            .row_of(id)
            .ok_or_else(|| Error::config(format!("instance {} not in store", id)))?;
        counts[store.labels()[row].index()] += 1;
    }
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::config(format!(
            "train_probe requires balanced labels, got {:?}",
            counts
        )));
    }
    let _ = instances_labels;
    let xm = store.dense_matrix(layer, ids)?;
    let d = store.d_sae();
    let x: Vec<f64> = xm.data().iter().map(|&v| v as f64).collect();
    let y: Vec<usize> = ids
        .iter()
        .map(|&id| store.labels()[store.row_of(id).unwrap()].index())
        .collect();
    let fit = fit_elastic_net(&x, &y, ids.len(), d, cfg)?;
    let nonzero = fit.weights.iter().filter(|&&w| w != 0.0).count();
    Ok(Probe {
        layer,
        weights: fit.weights,
        bias: fit.bias,
        dim: d,
        converged: fit.converged,
        iterations: fit.iterations,
        objective: fit.objective,
        nonzero_weights: nonzero,
    })
}

/// 6x6 confusion counts (rows = true labels) of a probe on the given ids.
pub fn probe_confusion(
    probe: &Probe,
    store: &ActivationStore,
    layer: usize,
    ids: &[usize],
) -> Result<[[usize; 6]; 6]> {
    if layer != probe.layer {
        return Err(Error::config("probe_confusion: probe trained on a different layer"));
    }
    let xm = store.dense_matrix(layer, ids)?;
    let mut m = [[0usize; 6]; 6];
    for (r, &id) in ids.iter().enumerate() {
        let truth = store.labels()[store.row_of(id).unwrap()];
        let pred = probe.predict(xm.row(r));
        m[truth.index()][pred.index()] += 1;
    }
    Ok(m)
}

pub fn probe_accuracy(
    probe: &Probe,
    store: &ActivationStore,
    layer: usize,
    ids: &[usize],
) -> Result<f64> {
    let m = probe_confusion(probe, store, layer, ids)?;
    let correct: usize = (0..6).map(|c| m[c][c]).sum();
    Ok(correct as f64 / ids.len() as f64)
}
