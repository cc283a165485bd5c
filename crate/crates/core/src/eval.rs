//! Zero-shot classification with prompt ensembles and the linear-probe
//! protocol (L-BFGS logistic regression with a logarithmic λ search).

use crate::data::{pack, Vocab, PAD};
use crate::error::{Error, Result};
use crate::nets::{encode_image, encode_text, project, Modality, ModelParams, TokenBatch};
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const LABEL_SLOT: &str = "{label}";
const FEATURE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotClassifier {
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
    /// `[K × d]`, unit rows.
    pub weights: Tensor<f32>,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Projected, unit-norm text embeddings of `captions`.
pub fn text_features(params: &ModelParams<f32>, vocab: &Vocab, captions: &[String]) -> Result<Tensor<f32>> {
    let ctx = params.config.context_length;
    let rows: Vec<Vec<usize>> = captions
        .iter()
        .map(|c| {
            let (ids, len) = pack(&vocab.encode_words(c), ctx);
            ids[..len].to_vec()
        })
        .collect();
    let len = rows.iter().map(Vec::len).max().unwrap_or(1);
    let g = Graph::new();
    let bp = params.bind(&g, false);
    let out = encode_text(&bp, &TokenBatch::from_rows(&rows, len, PAD))?;
    Ok(project(&bp, out.sent_feat, Modality::Text)?.value())
}

/// Encoder outputs (`projected = false`) or unit-norm projected embeddings
/// for a stack of images `[N × C × H × W]`.
pub fn image_features(params: &ModelParams<f32>, images: &[Tensor<f32>], projected: bool) -> Result<Tensor<f32>> {
    if images.is_empty() {
        let dim = if projected { params.config.embed_dim } else { params.config.d_img };
        return Ok(Tensor::zeros(&[0, dim]));
    }
    let chunks: Vec<Result<Tensor<f32>>> = images
        .par_chunks(FEATURE_CHUNK)
        .map(|chunk| {
            let g = Graph::new();
            let bp = params.bind(&g, false);
            let f = encode_image(&bp, g.constant(Tensor::stack(chunk)?))?;
            let out = if projected { project(&bp, f, Modality::Image)? } else { f };
            Ok(out.value())
        })
        .collect();
    let mut data = Vec::new();
    let mut dim = 0;
    for c in chunks {
        let c = c?;
        dim = c.row_len();
        data.extend_from_slice(c.data());
    }
    Tensor::new(vec![images.len(), dim], data)
}

/// One row per class: each filled template is embedded and normalized,
/// the embeddings are averaged, and the mean is normalized again.
pub fn build_zeroshot(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    class_names: &[String],
    templates: &[String],
) -> Result<ZeroShotClassifier> {
    if templates.is_empty() || class_names.is_empty() {
        return Err(Error::Config("zero-shot needs at least one class and one template".into()));
    }
    if let Some(t) = templates.iter().find(|t| !t.contains(LABEL_SLOT)) {
        return Err(Error::Config(format!("template {t:?} lacks {LABEL_SLOT}")));
    }
    let d = params.config.embed_dim;
    let mut weights = Vec::with_capacity(class_names.len() * d);
    for name in class_names {
        if vocab.encode_words(name).is_empty() {
            return Err(Error::Data(format!("class name {name:?} has no in-vocabulary words")));
        }
        let captions: Vec<String> = templates.iter().map(|t| t.replace(LABEL_SLOT, name)).collect();
        let emb = text_features(params, vocab, &captions)?;
        let mut mean = vec![0.0f64; d];
        for i in 0..emb.rows() {
            let mut row: Vec<f64> = emb.row(i).iter().map(|&x| x as f64).collect();
            normalize(&mut row);
            mean.iter_mut().zip(&row).for_each(|(m, r)| *m += r / emb.rows() as f64);
        }
        if normalize(&mut mean) == 0.0 {
            return Err(Error::DegenerateEmbedding { row: weights.len() / d, norm: 0.0 });
        }
        weights.extend(mean.iter().map(|&x| x as f32));
    }
    Ok(ZeroShotClassifier {
        class_names: class_names.to_vec(),
        templates: templates.to_vec(),
        weights: Tensor::new(vec![class_names.len(), d], weights)?,
    })
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in row.enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

/// Cosine-similarity argmax per image row; ties go to the lowest class id.
pub fn zeroshot_predict(clf: &ZeroShotClassifier, image_feats: &Tensor<f32>) -> Result<Vec<usize>> {
    let d = clf.weights.row_len();
    if image_feats.row_len() != d {
        return Err(Error::dim("zeroshot_predict", image_feats.shape(), clf.weights.shape()));
    }
    Ok((0..image_feats.rows())
        .map(|i| {
            let mut q: Vec<f64> = image_feats.row(i).iter().map(|&x| x as f64).collect();
            normalize(&mut q);
            argmax((0..clf.weights.rows()).map(|k| {
                clf.weights.row(k).iter().zip(&q).map(|(&w, &x)| w as f64 * x).sum::<f64>()
            }))
        })
        .collect())
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64
}

/// Average of per-class recalls over classes present in `labels`.
pub fn mean_per_class(pred: &[usize], labels: &[usize]) -> f64 {
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, l) in pred.iter().zip(labels) {
        let e = hits.entry(*l).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    if hits.is_empty() {
        return 0.0;
    }
    hits.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / hits.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    MeanPerClass,
}

impl Metric {
    pub fn score(self, pred: &[usize], labels: &[usize]) -> f64 {
        match self {
            Metric::Accuracy => accuracy(pred, labels),
            Metric::MeanPerClass => mean_per_class(pred, labels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    pub gtol: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iter: 1000,
            memory: 10,
            gtol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Probe {
    a: f64,
    f: f64,
    d: f64,
    g: Vec<f64>,
}

/// Evaluates the objective along `x + a·p`, rejecting non-finite values.
fn eval_at<F>(f: &mut F, x: &[f64], p: &[f64], a: f64) -> Result<Probe>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let xa: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect();
    let (fv, g) = f(&xa)?;
    if !fv.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("objective is not finite at step length {a}")));
    }
    Ok(Probe { a, f: fv, d: dot(&g, p), g })
}

fn cubic_min(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.a, hi.a);
    let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.d * hi.d;
    let (left, right) = (a.min(b), a.max(b));
    let margin = 0.1 * (right - left);
    if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        let t = b - (b - a) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
        if t.is_finite() && t >= left + margin && t <= right - margin {
            return t;
        }
    }
    0.5 * (a + b)
}

/// Line search satisfying the strong Wolfe conditions. `None` means no
/// acceptable step was found.
fn strong_wolfe<F>(f: &mut F, x: &[f64], p: &[f64], f0: f64, d0: f64, a0: f64, o: &LbfgsOptions) -> Result<Option<Probe>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let armijo = |pr: &Probe| pr.f <= f0 + o.c1 * pr.a * d0;
    let curvature = |pr: &Probe| pr.d.abs() <= -o.c2 * d0;
    let mut prev = Probe { a: 0.0, f: f0, d: d0, g: Vec::new() };
    let mut a = a0;
    for i in 0..25 {
        let cur = eval_at(f, x, p, a)?;
        let (lo, hi) = if !armijo(&cur) || (i > 0 && cur.f >= prev.f) {
            (prev, cur)
        } else if curvature(&cur) {
            return Ok(Some(cur));
        } else if cur.d >= 0.0 {
            (cur, prev)
        } else {
            a = 2.0 * cur.a;
            prev = cur;
            continue;
        };
        return zoom(f, x, p, lo, hi, f0, d0, o);
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(f: &mut F, x: &[f64], p: &[f64], mut lo: Probe, mut hi: Probe, f0: f64, d0: f64, o: &LbfgsOptions) -> Result<Option<Probe>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    for _ in 0..40 {
        if (hi.a - lo.a).abs() <= 1e-16 * lo.a.abs().max(1.0) {
            break;
        }
        let a = cubic_min(&lo, &hi);
        let cur = eval_at(f, x, p, a)?;
        if cur.f > f0 + o.c1 * a * d0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.d.abs() <= -o.c2 * d0 {
                return Ok(Some(cur));
            }
            if cur.d * (hi.a - lo.a) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // A sufficient decrease without the curvature condition still makes progress.
    Ok((lo.a > 0.0 && lo.f < f0).then_some(lo))
}

/// Limited-memory BFGS with a strong-Wolfe line search. Stops when
/// `‖∇f‖∞ ≤ gtol` or after `max_iter` iterations. A failed line search
/// falls back to a backtracking gradient step whose trust radius halves
/// on every failure.
pub fn lbfgs_minimize<F>(mut f: F, x0: Vec<f64>, o: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("objective is not finite at the starting point".into()));
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut trust = 1.0f64;
    let mut iterations = 0;
    while iterations < o.max_iter {
        if inf_norm(&g) <= o.gtol {
            break;
        }
        iterations += 1;
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = vec![0.0; s_hist.len()];
        for k in (0..s_hist.len()).rev() {
            alphas[k] = rho[k] * dot(&s_hist[k], &q);
            q.iter_mut().zip(&y_hist[k]).for_each(|(qi, yi)| *qi -= alphas[k] * yi);
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0,
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for k in 0..s_hist.len() {
            let beta = rho[k] * dot(&y_hist[k], &q);
            q.iter_mut().zip(&s_hist[k]).for_each(|(qi, si)| *qi += (alphas[k] - beta) * si);
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut d0 = dot(&g, &p);
        if !(d0 < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            p = g.iter().map(|v| -v).collect();
            d0 = dot(&g, &p);
        }
        let a0 = if s_hist.is_empty() { (1.0 / dot(&g, &g).sqrt()).min(1.0) } else { 1.0 };
        let accepted = match strong_wolfe(&mut f, &x, &p, fx, d0, a0, o)? {
            Some(pr) => Some(pr),
            None => {
                trust *= 0.5;
                log::warn!("line search failed at iteration {iterations}; gradient step with trust {trust}");
                s_hist.clear();
                y_hist.clear();
                rho.clear();
                p = g.iter().map(|v| -v).collect();
                let gn = dot(&g, &g).sqrt();
                let mut a = trust / gn.max(1.0);
                let mut found = None;
                for _ in 0..60 {
                    let pr = eval_at(&mut f, &x, &p, a)?;
                    if pr.f < fx {
                        found = Some(pr);
                        break;
                    }
                    a *= 0.5;
                }
                found
            }
        };
        let Some(pr) = accepted else { break };
        let s: Vec<f64> = p.iter().map(|v| pr.a * v).collect();
        let y: Vec<f64> = pr.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let stalled = fx - pr.f <= f64::EPSILON * fx.abs() && inf_norm(&s) <= f64::EPSILON * inf_norm(&x).max(1.0);
        fx = pr.f;
        g = pr.g;
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            s_hist.push(s);
            y_hist.push(y);
            rho.push(1.0 / sy);
            if s_hist.len() > o.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
        }
        if stalled {
            break;
        }
    }
    let grad_inf = inf_norm(&g);
    Ok(LbfgsResult {
        x,
        f: fx,
        grad_inf,
        iterations,
        converged: grad_inf <= o.gtol,
    })
}

/// Frozen features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    /// `[n × d]`.
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl LabeledFeatures {
    pub fn new(features: &Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!("{} feature rows for {} labels", features.rows(), labels.len())));
        }
        Ok(LabeledFeatures {
            x: features.to_f64_vec(),
            dim: features.row_len(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
        }
        LabeledFeatures {
            x,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
        }
    }
}

/// Multinomial logistic regression, `W` is `[d × K]` followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub dim: usize,
    pub classes: usize,
    pub params: Vec<f64>,
}

impl LogisticModel {
    fn logits(&self, row: &[f64], out: &mut [f64]) {
        let k = self.classes;
        out.copy_from_slice(&self.params[self.dim * k..]);
        for (j, &xj) in row.iter().enumerate() {
            let w = &self.params[j * k..(j + 1) * k];
            out.iter_mut().zip(w).for_each(|(o, wv)| *o += xj * wv);
        }
    }

    /// Ties go to the lowest class id.
    pub fn predict(&self, data: &LabeledFeatures) -> Vec<usize> {
        let mut z = vec![0.0; self.classes];
        (0..data.len())
            .map(|i| {
                self.logits(&data.x[i * self.dim..(i + 1) * self.dim], &mut z);
                argmax(z.iter().copied())
            })
            .collect()
    }
}

/// `(1/n)·(Σ cross-entropy + λ/2·‖W‖²)` and its gradient; the bias is not penalized.
pub fn logistic_objective(data: &LabeledFeatures, classes: usize, lambda: f64, params: &[f64]) -> (f64, Vec<f64>) {
    let (d, k) = (data.dim, classes);
    let model = LogisticModel {
        dim: d,
        classes: k,
        params: params.to_vec(),
    };
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; k];
    for i in 0..data.len() {
        let row = &data.x[i * d..(i + 1) * d];
        model.logits(row, &mut z);
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - z[data.labels[i]];
        for c in 0..k {
            let r = (z[c] - lse).exp() - f64::from(u8::from(c == data.labels[i]));
            grad[d * k + c] += r;
            for (j, &xj) in row.iter().enumerate() {
                grad[j * k + c] += xj * r;
            }
        }
    }
    let wsq: f64 = params[..d * k].iter().map(|w| w * w).sum();
    loss += 0.5 * lambda * wsq;
    for (gv, &w) in grad[..d * k].iter_mut().zip(&params[..d * k]) {
        *gv += lambda * w;
    }
    let n = data.len().max(1) as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    (loss / n, grad)
}

pub fn fit_logistic(data: &LabeledFeatures, classes: usize, lambda: f64, o: &LbfgsOptions) -> Result<(LogisticModel, LbfgsResult)> {
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} outside {classes} classes")));
    }
    let x0 = vec![0.0; (data.dim + 1) * classes];
    let res = lbfgs_minimize(|p| Ok(logistic_objective(data, classes, lambda, p)), x0, o)?;
    let model = LogisticModel {
        dim: data.dim,
        classes,
        params: res.x.clone(),
    };
    Ok((model, res))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub lambda: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_metric: f64,
}

/// Fits one probe at `lambda` and scores it on every split.
pub fn linear_probe(
    train: &LabeledFeatures,
    val: &LabeledFeatures,
    test: &LabeledFeatures,
    classes: usize,
    lambda: f64,
    metric: Metric,
) -> Result<ProbeEntry> {
    let (model, _) = fit_logistic(train, classes, lambda, &LbfgsOptions::default())?;
    Ok(ProbeEntry {
        lambda,
        train_acc: accuracy(&model.predict(train), &train.labels),
        val_acc: accuracy(&model.predict(val), &val.labels),
        test_metric: metric.score(&model.predict(test), &test.labels),
    })
}

/// λ is searched on `10^(k/8)` for integer `k` in this range.
pub const SWEEP_MIN_K: i32 = -48;
pub const SWEEP_MAX_K: i32 = 48;
pub const STEPS_PER_DECADE: i32 = 8;
const INITIAL_STEP: i32 = 2 * STEPS_PER_DECADE;

pub fn sweep_lambda(k: i32) -> f64 {
    10f64.powf(k as f64 / STEPS_PER_DECADE as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub chosen_lambda: f64,
    /// Every evaluated `(λ, validation accuracy)`, ascending in λ.
    pub evaluated: Vec<(f64, f64)>,
}

/// Starts from `{1e-6, 1e-4, …, 1e6}` and repeatedly probes the two
/// neighbors of the current best at half the previous spacing, down to
/// eight steps per decade. Ties go to the smaller λ.
pub fn lambda_sweep(mut score: impl FnMut(f64) -> Result<f64>) -> Result<SweepResult> {
    let mut seen: BTreeMap<i32, f64> = BTreeMap::new();
    let mut probe = |k: i32, seen: &mut BTreeMap<i32, f64>| -> Result<()> {
        if (SWEEP_MIN_K..=SWEEP_MAX_K).contains(&k) && !seen.contains_key(&k) {
            seen.insert(k, score(sweep_lambda(k))?);
        }
        Ok(())
    };
    let best = |seen: &BTreeMap<i32, f64>| -> i32 {
        let mut b = (SWEEP_MIN_K, f64::NEG_INFINITY);
        for (&k, &v) in seen {
            if v > b.1 {
                b = (k, v);
            }
        }
        b.0
    };
    for k in (SWEEP_MIN_K..=SWEEP_MAX_K).step_by(INITIAL_STEP as usize) {
        probe(k, &mut seen)?;
    }
    let mut step = INITIAL_STEP;
    while step > 1 {
        step /= 2;
        let k = best(&seen);
        probe(k - step, &mut seen)?;
        probe(k + step, &mut seen)?;
    }
    Ok(SweepResult {
        chosen_lambda: sweep_lambda(best(&seen)),
        evaluated: seen.iter().map(|(&k, &v)| (sweep_lambda(k), v)).collect(),
    })
}

/// Seeded split holding out `frac` of `n` indices; returns `(train, val)`.
pub fn validation_split(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let hold = ((n as f64) * frac).round() as usize;
    let mut val = idx[..hold].to_vec();
    let mut train = idx[hold..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub chosen_lambda: f64,
    pub test_metric: f64,
    pub metric: Metric,
    pub val_accuracies: Vec<(f64, f64)>,
}

impl ProbeReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("lambda,val_acc\n");
        for (l, a) in &self.val_accuracies {
            s.push_str(&format!("{l:e},{a}\n"));
        }
        s
    }
}

/// Sweeps λ on a seeded 20% validation split of `train`, refits on the
/// full training set at the chosen λ and scores `test`.
pub fn probe_protocol(
    train: &LabeledFeatures,
    test: &LabeledFeatures,
    classes: usize,
    metric: Metric,
    seed: u64,
) -> Result<ProbeReport> {
    let (tr, va) = validation_split(train.len(), 0.2, seed);
    let (fit, val) = (train.subset(&tr), train.subset(&va));
    let sweep = lambda_sweep(|lambda| Ok(linear_probe(&fit, &val, &val, classes, lambda, metric)?.val_acc))?;
    let entry = linear_probe(train, &val, test, classes, sweep.chosen_lambda, metric)?;
    Ok(ProbeReport {
        chosen_lambda: sweep.chosen_lambda,
        test_metric: entry.test_metric,
        metric,
        val_accuracies: sweep.evaluated,
    })
}
