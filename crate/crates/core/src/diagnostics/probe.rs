//! Per-step linear probing of frozen features with the condition replaced by
//! the null class.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelConfig, ModelParams, TraceLevel};
use crate::rng::stream_rng;

/// Sequences per batched forward during feature extraction.
pub const EXTRACT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// 1-based generation steps; step `s` reads query row `s − 1`.
    pub steps: Vec<usize>,
    /// 1-based block whose output is probed.
    pub layer: usize,
    pub epochs: usize,
    pub l2: f64,
    pub momentum: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl ProbeConfig {
    /// Eight evenly spaced steps ending at `T`, read at the tap layer.
    pub fn for_model(config: &ModelConfig) -> Self {
        let t = config.seq_len;
        let steps = (1..=8).map(|i| (i * t / 8).max(1)).collect::<Vec<_>>();
        ProbeConfig { steps, layer: config.tap_depth, epochs: 90, l2: 1e-4, momentum: 0.9, train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub steps: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub layer: usize,
    pub epochs: usize,
    pub train: usize,
    pub test: usize,
}

/// Layer features `[step][sample][D]`, condition forced to the null class.
pub fn extract_features(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    seqs: &[TokenSequence],
    steps: &[usize],
    layer: usize,
) -> Result<Vec<Vec<Vec<f32>>>> {
    if layer == 0 || layer > config.layers {
        return Err(Error::invalid(format!("probe layer {layer} outside 1..={}", config.layers)));
    }
    if let Some(&s) = steps.iter().find(|&&s| s == 0 || s > config.seq_len) {
        return Err(Error::invalid(format!("probe step {s} outside 1..={}", config.seq_len)));
    }
    let mut out = vec![Vec::with_capacity(seqs.len()); steps.len()];
    for chunk in seqs.chunks(EXTRACT_CHUNK) {
        let nulled: Vec<_> = chunk.iter().map(|s| s.with_condition(config.null_class())).collect();
        for tr in forward_batch(params, config, &nulled, &[], TraceLevel::Full)? {
            for (k, &s) in steps.iter().enumerate() {
                out[k].push(tr.hidden[layer - 1].row(s - 1).to_vec());
            }
        }
    }
    Ok(out)
}

/// Top-1 test accuracy of a multinomial logistic regression trained by
/// full-batch gradient descent with heavy-ball momentum on standardized
/// features. The step size is the inverse curvature bound of the loss.
#[allow(clippy::too_many_arguments)]
pub fn fit_linear_probe(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    classes: usize,
    epochs: usize,
    l2: f64,
    momentum: f64,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::invalid("probe needs non-empty, labeled train and test splits"));
    }
    if let Some(&y) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("probe label {y} outside 0..{classes}")));
    }
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mut mean = vec![0.0f64; d];
    for x in train_x {
        for (m, &v) in mean.iter_mut().zip(x) {
            *m += f64::from(v) / n;
        }
    }
    let mut std = vec![0.0f64; d];
    for x in train_x {
        for ((s, &m), &v) in std.iter_mut().zip(&mean).zip(x) {
            *s += (f64::from(v) - m).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    // standardized rows with a trailing constant for the bias
    let prep = |xs: &[Vec<f32>]| -> Vec<Vec<f64>> {
        xs.iter()
            .map(|x| {
                let mut r: Vec<f64> = x.iter().zip(&mean).zip(&std).map(|((&v, m), s)| (f64::from(v) - m) / s).collect();
                r.push(1.0);
                r
            })
            .collect()
    };
    let (xtr, xte) = (prep(train_x), prep(test_x));
    let dd = d + 1;

    // largest eigenvalue of XᵀX/n by power iteration
    let mut v = vec![1.0 / (dd as f64).sqrt(); dd];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut w = vec![0.0; dd];
        for x in &xtr {
            let p: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wi, xi) in w.iter_mut().zip(x) {
                *wi += p * xi / n;
            }
        }
        lambda = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if lambda == 0.0 {
            break;
        }
        v = w.into_iter().map(|a| a / lambda).collect();
    }
    let lr = 1.0 / (0.5 * lambda + l2);

    let mut wts = vec![0.0f64; dd * classes];
    let mut vel = vec![0.0f64; dd * classes];
    let mut grad = vec![0.0f64; dd * classes];
    let mut logits = vec![0.0f64; classes];
    for _ in 0..epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in xtr.iter().zip(train_y) {
            softmax_into(x, &wts, classes, &mut logits);
            logits[y] -= 1.0;
            for (i, &xi) in x.iter().enumerate() {
                for c in 0..classes {
                    grad[i * classes + c] += xi * logits[c] / n;
                }
            }
        }
        for i in 0..d * classes {
            grad[i] += l2 * wts[i];
        }
        for i in 0..dd * classes {
            vel[i] = momentum * vel[i] - lr * grad[i];
            wts[i] += vel[i];
        }
    }
    let mut correct = 0usize;
    for (x, &y) in xte.iter().zip(test_y) {
        softmax_into(x, &wts, classes, &mut logits);
        let best = (0..classes).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
        correct += usize::from(best == y);
    }
    Ok(correct as f64 / test_x.len() as f64)
}

fn softmax_into(x: &[f64], w: &[f64], classes: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        for c in 0..classes {
            out[c] += xi * w[i * classes + c];
        }
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Deterministic train/test split of `0..n`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, "probe-split", 0));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}

/// Probes features at each configured step. Labels are the sequences'
/// stored conditions, which the model never sees here.
pub fn probe_per_step(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    dataset: &[TokenSequence],
    pc: &ProbeConfig,
) -> Result<ProbeReport> {
    let labels: Vec<usize> = dataset.iter().map(|s| s.condition).collect();
    probe_with_labels(params, config, dataset, &labels, pc)
}

pub fn probe_with_labels(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    dataset: &[TokenSequence],
    labels: &[usize],
    pc: &ProbeConfig,
) -> Result<ProbeReport> {
    let feats = extract_features(params, config, dataset, &pc.steps, pc.layer)?;
    let (tr, te) = split_indices(dataset.len(), pc.train_fraction, pc.seed);
    let pick = |f: &[Vec<f32>], ix: &[usize]| ix.iter().map(|&i| f[i].clone()).collect::<Vec<_>>();
    let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
    let accuracy = feats
        .iter()
        .map(|f| fit_linear_probe(&pick(f, &tr), &ytr, &pick(f, &te), &yte, config.classes, pc.epochs, pc.l2, pc.momentum))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport { steps: pc.steps.clone(), accuracy, layer: pc.layer, epochs: pc.epochs, train: tr.len(), test: te.len() })
}
