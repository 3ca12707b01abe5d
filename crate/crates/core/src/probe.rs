//! Frozen-encoder linear probe.
//!
//! Embeddings are the encoder latents `h` (no projector). The probe is a
//! five-class multinomial logistic regression minimising
//! `sum_i CE_i + l2/2 * ||W||^2` (biases unpenalised) with L-BFGS and an
//! Armijo backtracking line search, so the recorded objective never rises.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Encoder, Graph, Mode};
use crate::signals::{Epoch, Stage};
use crate::spectral::Stft;
use crate::training::features_batch;

const K: usize = Stage::COUNT;
const EMBED_BATCH: usize = 64;

/// Labelled embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// Row-major `n x dim`.
    pub embeddings: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<Stage>,
    pub subject_ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Vec<f64>, dim: usize, labels: Vec<Stage>, subject_ids: Vec<String>) -> Result<Self> {
        let n = labels.len();
        if dim == 0 || embeddings.len() != n * dim || subject_ids.len() != n {
            return Err(Error::param(format!(
                "embedding set of {n} labels needs {n} ids and {n}x{dim} values"
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding contains a non-finite value".into()));
        }
        Ok(EmbeddingSet {
            embeddings,
            dim,
            labels,
            subject_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..][..self.dim]
    }
}

/// Encoder latents for labelled `epochs`, computed in eval mode.
pub fn embed(encoder: &Encoder<f32>, epochs: &[Epoch], stft: &Stft) -> Result<EmbeddingSet> {
    let mut enc = encoder.clone();
    let d = enc.config.latent_dim;
    let mut values = Vec::with_capacity(epochs.len() * d);
    for chunk in epochs.chunks(EMBED_BATCH) {
        let x = features_batch(stft, chunk)?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let h = enc.forward(&mut g, xv, Mode::Eval)?;
        values.extend(g.value(h).data().iter().map(|&v| v as f64));
    }
    let labels = epochs
        .iter()
        .map(|e| {
            e.label
                .ok_or_else(|| Error::DegenerateData(format!("epoch of subject {} has no label", e.subject_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = epochs.iter().map(|e| e.subject_id.clone()).collect();
    EmbeddingSet::new(values, d, labels, ids)
}

/// Per-dimension affine standardisation from training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(set: &EmbeddingSet) -> Self {
        let (n, d) = (set.len() as f64, set.dim);
        let mut mean = vec![0.0; d];
        for i in 0..set.len() {
            mean.iter_mut().zip(set.row(i)).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for i in 0..set.len() {
            for (j, v) in set.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2) / n;
            }
        }
        // Constant dimensions are centred but not scaled.
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Fitted probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `K x dim`, row-major.
    pub weights: Vec<f64>,
    pub biases: [f64; K],
    pub dim: usize,
    pub standardizer: Option<Standardizer>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted iterate, starting at the initial point.
    pub objective_trace: Vec<f64>,
}

impl ProbeModel {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap()
    }

    /// Class probabilities for one embedding.
    pub fn predict_proba(&self, row: &[f64]) -> [f64; K] {
        let x = match &self.standardizer {
            Some(s) => s.apply(row),
            None => row.to_vec(),
        };
        let mut logits = self.biases;
        for (k, l) in logits.iter_mut().enumerate() {
            *l += dot(&self.weights[k * self.dim..][..self.dim], &x);
        }
        softmax(&logits)
    }

    pub fn predict(&self, row: &[f64]) -> Stage {
        let p = self.predict_proba(row);
        let best = (0..K).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        Stage::from_index(best).unwrap()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64; K]) -> [f64; K] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; K];
    let mut s = 0.0;
    for k in 0..K {
        p[k] = (logits[k] - max).exp();
        s += p[k];
    }
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Objective and gradient over the packed parameters `[W (K x d), b (K)]`.
fn objective(x: &[f64], rows: &[Vec<f64>], labels: &[usize], d: usize, l2: f64, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let (w, b) = x.split_at(K * d);
    let mut f = 0.0;
    for (r, &y) in rows.iter().zip(labels) {
        let mut logits = [0.0; K];
        for k in 0..K {
            logits[k] = b[k] + dot(&w[k * d..][..d], r);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        f += lse - logits[y];
        for k in 0..K {
            let coef = (logits[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
            for (g, v) in grad[k * d..][..d].iter_mut().zip(r) {
                *g += coef * v;
            }
            grad[K * d + k] += coef;
        }
    }
    for (g, wv) in grad[..K * d].iter_mut().zip(w) {
        *g += l2 * wv;
    }
    f + 0.5 * l2 * dot(w, w)
}

const HISTORY: usize = 10;
const GRAD_TOL: f64 = 1e-6;

/// Fits the probe. Requires at least 10 samples and two classes.
pub fn fit_logistic(set: &EmbeddingSet, max_iter: usize, l2: f64, standardize: bool) -> Result<ProbeModel> {
    if set.len() < 10 {
        return Err(Error::DegenerateData(format!("probe needs at least 10 samples, got {}", set.len())));
    }
    let mut present = [false; K];
    set.labels.iter().for_each(|l| present[l.index()] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateData("probe training set has a single class".into()));
    }
    if !(l2 >= 0.0) {
        return Err(Error::param(format!("l2 must be nonnegative, got {l2}")));
    }
    let d = set.dim;
    let standardizer = standardize.then(|| Standardizer::fit(set));
    let rows: Vec<Vec<f64>> = (0..set.len())
        .map(|i| match &standardizer {
            Some(s) => s.apply(set.row(i)),
            None => set.row(i).to_vec(),
        })
        .collect();
    let labels: Vec<usize> = set.labels.iter().map(|l| l.index()).collect();

    let n_par = K * d + K;
    let mut x = vec![0.0; n_par];
    let mut g = vec![0.0; n_par];
    let mut f = objective(&x, &rows, &labels, d, l2, &mut g);
    let mut trace = vec![f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut x_new = vec![0.0; n_par];
    let mut g_new = vec![0.0; n_par];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        if g.iter().fold(0f64, |m, v| m.max(v.abs())) < GRAD_TOL {
            converged = true;
            break;
        }
        // Two-loop recursion for p = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qv, yv)| *qv -= a * yv);
            alphas.push(a);
        }
        let gamma = memory
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / g.iter().map(|v| v.abs()).sum::<f64>().max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qv, sv)| *qv += (a - b) * sv);
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            memory.clear();
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            x_new.iter_mut().zip(x.iter().zip(&p)).for_each(|(n, (xv, pv))| *n = xv + t * pv);
            let fv = objective(&x_new, &rows, &labels, d, l2, &mut g_new);
            if fv.is_finite() && fv <= f + 1e-4 * t * slope {
                accepted = Some(fv);
                break;
            }
            t *= 0.5;
        }
        let Some(f_new) = accepted else {
            converged = true;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if memory.len() == HISTORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        trace.push(f);
        if decrease <= 1e-12 * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let (w, b) = x.split_at(K * d);
    Ok(ProbeModel {
        weights: w.to_vec(),
        biases: b.try_into().unwrap(),
        dim: d,
        standardizer,
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// Accuracy and `confusion[true][predicted]` counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: [[usize; K]; K],
}

impl Evaluation {
    pub fn from_predictions(truth: &[Stage], predicted: &[Stage]) -> Self {
        let mut confusion = [[0; K]; K];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.index()][p.index()] += 1;
        }
        let total: usize = confusion.iter().flatten().sum();
        let hits: usize = (0..K).map(|k| confusion[k][k]).sum();
        Evaluation {
            accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            confusion,
        }
    }

    /// Precision of class `k` (NaN if never predicted).
    pub fn precision(&self, k: usize) -> f64 {
        let col: usize = (0..K).map(|i| self.confusion[i][k]).sum();
        self.confusion[k][k] as f64 / col as f64
    }

    /// Recall of class `k` (NaN if absent).
    pub fn recall(&self, k: usize) -> f64 {
        let row: usize = self.confusion[k].iter().sum();
        self.confusion[k][k] as f64 / row as f64
    }
}

pub fn evaluate(model: &ProbeModel, set: &EmbeddingSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::param("cannot evaluate on an empty set"));
    }
    if set.dim != model.dim {
        return Err(Error::shape("probe", format!("model width {} vs embeddings {}", model.dim, set.dim)));
    }
    let pred: Vec<Stage> = (0..set.len()).map(|i| model.predict(set.row(i))).collect();
    Ok(Evaluation::from_predictions(&set.labels, &pred))
}

fn ratio(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else {
        format!("{v:.6}")
    }
}

/// Flat `key: value` report. Undefined precision or recall prints as `n/a`.
pub fn report(model: &ProbeModel, eval: &Evaluation) -> String {
    let mut out = String::new();
    writeln!(out, "accuracy: {:.6}", eval.accuracy).unwrap();
    for s in Stage::ALL {
        let k = s.index();
        writeln!(out, "precision_{s}: {}", ratio(eval.precision(k))).unwrap();
        writeln!(out, "recall_{s}: {}", ratio(eval.recall(k))).unwrap();
    }
    for s in Stage::ALL {
        let row: Vec<String> = eval.confusion[s.index()].iter().map(|c| c.to_string()).collect();
        writeln!(out, "confusion_{s}: {}", row.join(",")).unwrap();
    }
    writeln!(out, "iterations: {}", model.iterations).unwrap();
    writeln!(out, "converged: {}", model.converged).unwrap();
    writeln!(out, "final_objective: {:.9e}", model.final_objective()).unwrap();
    out
}

pub fn embeddings_to_csv(set: &EmbeddingSet) -> String {
    let mut out = String::from("subject_id,label");
    for j in 0..set.dim {
        write!(out, ",e_{j}").unwrap();
    }
    out.push('\n');
    for i in 0..set.len() {
        write!(out, "{},{}", set.subject_ids[i], set.labels[i]).unwrap();
        for v in set.row(i) {
            write!(out, ",{v:.8e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn export_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    fs::write(path, embeddings_to_csv(set)).map_err(|e| Error::io(path, e))
}

pub fn parse_embeddings_csv(text: &str) -> Result<EmbeddingSet> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format_at("row 1", "missing header"))?;
    let dim = header.split(',').count().saturating_sub(2);
    if !header.starts_with("subject_id,label") || dim == 0 {
        return Err(Error::format_at("row 1", "expected 'subject_id,label,e_0,...'"));
    }
    let (mut values, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let at = || format!("row {}", n + 2);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::format_at(at(), format!("expected {} fields", dim + 2)));
        }
        ids.push(fields[0].to_string());
        labels.push(fields[1].parse::<Stage>().map_err(|e| Error::format_at(at(), e.to_string()))?);
        for f in &fields[2..] {
            values.push(f.parse::<f64>().map_err(|_| Error::format_at(at(), format!("bad number '{f}'")))?);
        }
    }
    EmbeddingSet::new(values, dim, labels, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_from(rows: &[(Vec<f64>, Stage)]) -> EmbeddingSet {
        let d = rows[0].0.len();
        EmbeddingSet::new(
            rows.iter().flat_map(|r| r.0.clone()).collect(),
            d,
            rows.iter().map(|r| r.1).collect(),
            (0..rows.len()).map(|i| format!("S{i:03}")).collect(),
        )
        .unwrap()
    }

    fn separable(n: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<_> = (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Stage::W } else { Stage::N3 };
                let side = if label == Stage::W { 1.0 } else { -1.0 };
                (vec![side * rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)], label)
            })
            .collect();
        set_from(&rows)
    }

    #[test]
    fn separable_without_penalty_is_perfect() {
        let s = separable(40, 1);
        let m = fit_logistic(&s, 500, 0.0, false).unwrap();
        assert_eq!(evaluate(&m, &s).unwrap().accuracy, 1.0);
    }

    #[test]
    fn objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<_> = (0..60)
            .map(|_| {
                let l = Stage::from_index(rng.random_range(0..5)).unwrap();
                let x = (0..6).map(|j| rng.random_range(-1.0..1.0) + if j == l.index() { 1.0 } else { 0.0 });
                (x.collect(), l)
            })
            .collect();
        let m = fit_logistic(&set_from(&rows), 500, 1.0, true).unwrap();
        assert!(m.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.iterations <= 500);
    }

    #[test]
    fn identical_embeddings_predict_majority() {
        let mut rows = vec![(vec![0.3, 0.3], Stage::N2); 7];
        rows.extend(vec![(vec![0.3, 0.3], Stage::R); 3]);
        let s = set_from(&rows);
        let m = fit_logistic(&s, 500, 1.0, true).unwrap();
        let e = evaluate(&m, &s).unwrap();
        assert!((e.accuracy - 0.7).abs() < 1e-12);
        let p = m.predict_proba(s.row(0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let rows = vec![(vec![1.0], Stage::W); 12];
        assert!(matches!(fit_logistic(&set_from(&rows), 10, 1.0, true), Err(Error::DegenerateData(_))));
        let few = separable(6, 3);
        assert!(fit_logistic(&few, 10, 1.0, true).is_err());
    }

    #[test]
    fn hand_built_confusion() {
        use Stage::*;
        let truth = [W, W, W, N1, N1, N2, N2, N2, N3, R];
        let pred = [W, W, N1, N1, W, N2, N2, N3, N3, R];
        let e = Evaluation::from_predictions(&truth, &pred);
        assert!((e.accuracy - 0.7).abs() < 1e-15);
        assert_eq!(e.confusion[0], [2, 1, 0, 0, 0]);
        let row_sums: Vec<usize> = e.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![3, 2, 3, 1, 1]);
        let perfect = Evaluation::from_predictions(&truth, &truth);
        assert_eq!(perfect.accuracy, 1.0);
        for i in 0..K {
            for j in 0..K {
                assert!(i == j || perfect.confusion[i][j] == 0);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<_> = (0..5)
            .map(|i| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1e3..1e3)).collect();
                (x, Stage::from_index(i).unwrap())
            })
            .collect();
        let s = set_from(&rows);
        let text = embeddings_to_csv(&s);
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("subject_id,label,e_0,e_1,e_2\n"));
        let back = parse_embeddings_csv(&text).unwrap();
        for (a, b) in s.embeddings.iter().zip(&back.embeddings) {
            assert!((a - b).abs() <= 1e-9 * a.abs());
        }
        assert_eq!(back.labels, s.labels);
    }
}
