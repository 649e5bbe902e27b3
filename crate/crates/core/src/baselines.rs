//! Biometric baselines on raw voxels: K-Means with cluster-to-subject
//! alignment, ridge least squares onto one-hot ids and a linear softmax
//! classifier.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::metrics::{self, argmax_rows};
use crate::optim::{adamw_step, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KMeansMetric {
    #[default]
    Euclidean,
    /// Spherical K-Means on unit-normalized rows, distance `1 − cos`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub metric: KMeansMetric,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid move.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, metric: KMeansMetric, seed: u64) -> Self {
        KMeansConfig {
            k,
            metric,
            max_iter: 300,
            tol: 1e-6,
            restarts: 10,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `[k, d]`.
    pub centroids: Tensor,
    pub objective: f64,
    /// Objective after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(metric: KMeansMetric, x: &[f64], c: &[f64]) -> f64 {
    match metric {
        KMeansMetric::Euclidean => sq_dist(x, c),
        KMeansMetric::Cosine => 1.0 - x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>(),
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = math::sqrt(v.iter().map(|x| x * x).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

fn nearest(metric: KMeansMetric, x: &[f64], cents: &[f64], d: usize) -> (usize, f64) {
    cents
        .chunks(d)
        .enumerate()
        .map(|(j, c)| (j, dist(metric, x, c)))
        .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
}

fn plus_plus(
    x: &[f64],
    n: usize,
    d: usize,
    k: usize,
    metric: KMeansMetric,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut cents = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    cents.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut best: Vec<f64> = (0..n)
        .map(|i| dist(metric, &x[i * d..(i + 1) * d], &cents[..d]).max(0.0))
        .collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in best.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = x[pick * d..(pick + 1) * d].to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist(metric, &x[i * d..(i + 1) * d], &c).max(0.0));
        }
        cents.extend_from_slice(&c);
    }
    cents
}

fn lloyd(x: &[f64], n: usize, d: usize, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> KMeansResult {
    let k = cfg.k;
    let mut cents = plus_plus(x, n, d, k, cfg.metric, rng);
    let mut assign = vec![0; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let mut obj = 0.0;
        let mut own = vec![0.0; n];
        for i in 0..n {
            let (j, dd) = nearest(cfg.metric, &x[i * d..(i + 1) * d], &cents, d);
            assign[i] = j;
            own[i] = dd;
            obj += dd;
        }
        history.push(obj);
        if converged || iterations == cfg.max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * d..(assign[i] + 1) * d]
                .iter_mut()
                .zip(&x[i * d..(i + 1) * d])
            {
                *s += v;
            }
        }
        let mut moved: f64 = 0.0;
        let mut taken = vec![false; n];
        for j in 0..k {
            let c = &mut sums[j * d..(j + 1) * d];
            let ok = counts[j] > 0
                && match cfg.metric {
                    KMeansMetric::Euclidean => {
                        c.iter_mut().for_each(|v| *v /= counts[j] as f64);
                        true
                    }
                    KMeansMetric::Cosine => normalize(c),
                };
            if !ok {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |b: Option<usize>, i| match b {
                        Some(b) if own[b] >= own[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap_or(0);
                taken[far] = true;
                c.copy_from_slice(&x[far * d..(far + 1) * d]);
            }
            moved = moved.max(math::sqrt(sq_dist(c, &cents[j * d..(j + 1) * d])));
        }
        cents = sums;
        converged = moved <= cfg.tol;
    }
    KMeansResult {
        assignments: assign,
        centroids: Tensor::new(vec![k, d], cents).expect("k·d centroids"),
        objective: *history.last().expect("at least one assignment"),
        history,
        iterations,
        converged,
    }
}

/// Best of `restarts` k-means++ initialized Lloyd runs.
pub fn kmeans(x: &Tensor, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let (n, d) = x.dims2()?;
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::Config(format!("k = {} must lie in [1, {n}]", cfg.k)));
    }
    if cfg.restarts == 0 {
        return Err(Error::Config("k-means needs at least one restart".into()));
    }
    let mut data = x.data().to_vec();
    if cfg.metric == KMeansMetric::Cosine {
        for (i, row) in data.chunks_mut(d).enumerate() {
            if !normalize(row) {
                return Err(Error::Data(format!(
                    "row {i} has zero norm under the cosine metric"
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts {
        let r = lloyd(&data, n, d, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| r.objective < b.objective) {
            best = Some(r);
        }
    }
    Ok(best.expect("restarts > 0"))
}

/// Minimum-cost assignment of rows to columns of an `n × m` cost matrix
/// (row-major). Returns the column of every row; rows beyond `m` get `None`.
pub fn hungarian(cost: &[f64], n: usize, m: usize) -> Result<Vec<Option<usize>>> {
    if cost.len() != n * m {
        return Err(Error::dim("hungarian", &[cost.len()], &[n, m]));
    }
    let sz = n.max(m);
    let c = |i: usize, j: usize| if i < n && j < m { cost[i * m + j] } else { 0.0 };
    // Potentials formulation, 1-based with a virtual column 0.
    let mut u = vec![0.0; sz + 1];
    let mut v = vec![0.0; sz + 1];
    let mut p = vec![0usize; sz + 1];
    let mut way = vec![0usize; sz + 1];
    for i in 1..=sz {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; sz + 1];
        let mut used = vec![false; sz + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=sz {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=sz {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=sz {
        let i = p[j];
        if i >= 1 && i <= n && j <= m {
            out[i - 1] = Some(j - 1);
        }
    }
    Ok(out)
}

/// Cluster → subject map maximizing the number of agreeing samples.
pub fn align_clusters(assign: &[usize], truth: &[usize], k: usize, s: usize) -> Result<Vec<usize>> {
    if assign.len() != truth.len() {
        return Err(Error::dim(
            "align_clusters",
            &[assign.len()],
            &[truth.len()],
        ));
    }
    let mut cost = vec![0.0; k * s];
    for (&a, &t) in assign.iter().zip(truth) {
        if a >= k || t >= s {
            return Err(Error::Index {
                what: "cluster or subject",
                index: a.max(t),
                bound: k.min(s),
            });
        }
        cost[a * s + t] -= 1.0;
    }
    let m = hungarian(&cost, k, s)?;
    // Clusters left over when k > s fall back to their majority subject.
    Ok((0..k)
        .map(|a| {
            m[a].unwrap_or_else(|| {
                (0..s).fold(0, |b, t| {
                    if cost[a * s + t] < cost[a * s + b] {
                        t
                    } else {
                        b
                    }
                })
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiometricReport {
    pub acc: f64,
    pub mcc: f64,
    pub mcc_degenerate: bool,
}

pub fn biometric_report(pred: &[usize], truth: &[usize], s: usize) -> Result<BiometricReport> {
    let mcc = metrics::matthews_corrcoef(pred, truth, s)?;
    Ok(BiometricReport {
        acc: metrics::accuracy(pred, truth)?,
        mcc: mcc.value,
        mcc_degenerate: mcc.degenerate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansBaseline {
    pub clustering: KMeansResult,
    /// Subject predicted for every sample after alignment.
    pub aligned: Vec<usize>,
    pub report: BiometricReport,
}

pub fn kmeans_subject_baseline(
    x: &Tensor,
    subjects: &[usize],
    num_subjects: usize,
    metric: KMeansMetric,
    seed: u64,
) -> Result<KMeansBaseline> {
    let clustering = kmeans(x, &KMeansConfig::new(num_subjects, metric, seed))?;
    let map = align_clusters(
        &clustering.assignments,
        subjects,
        num_subjects,
        num_subjects,
    )?;
    let aligned: Vec<usize> = clustering.assignments.iter().map(|&a| map[a]).collect();
    let report = biometric_report(&aligned, subjects, num_subjects)?;
    Ok(KMeansBaseline {
        clustering,
        aligned,
        report,
    })
}

fn one_hot(subjects: &[usize], s: usize) -> Result<Vec<f64>> {
    let mut y = vec![0.0; subjects.len() * s];
    for (i, &t) in subjects.iter().enumerate() {
        if t >= s {
            return Err(Error::Index {
                what: "subject",
                index: t,
                bound: s,
            });
        }
        y[i * s + t] = 1.0;
    }
    Ok(y)
}

fn with_bias(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut out = Vec::with_capacity(n * (d + 1));
    for i in 0..n {
        out.extend_from_slice(x.row(i));
        out.push(1.0);
    }
    Tensor::new(vec![n, d + 1], out)
}

/// Linear map `[x, 1] · W` onto class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearScorer {
    /// `[d + 1, S]`, bias in the last row.
    pub w: Tensor,
}

impl LinearScorer {
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        with_bias(x)?.matmul(&self.w)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.scores(x)?))
    }
}

/// Ridge least squares `(XᵀX + λI) W = XᵀY` with a bias column, via Cholesky.
pub fn ridge_regression(x: &Tensor, y: &Tensor, ridge: f64) -> Result<LinearScorer> {
    let xb = with_bias(x)?;
    let (n, d) = xb.dims2()?;
    let (ny, k) = y.dims2()?;
    if n == 0 || n != ny {
        return Err(Error::dim("ridge_regression", x.shape(), y.shape()));
    }
    let xt = xb.transpose()?;
    let mut gram = xt.matmul(&xb)?;
    for i in 0..d {
        let v = gram.at(i, i);
        gram.set(i, i, v + ridge);
    }
    let rhs = xt.matmul(y)?;
    let l = linalg::cholesky(gram.data(), d)?;
    let w = linalg::cholesky_solve(&l, d, rhs.data(), k);
    Ok(LinearScorer {
        w: Tensor::new(vec![d, k], w)?,
    })
}

/// Ridge regression onto one-hot subject ids.
pub fn fit_least_squares(
    x: &Tensor,
    subjects: &[usize],
    s: usize,
    ridge: f64,
) -> Result<LinearScorer> {
    let n = x.dims2()?.0;
    if n != subjects.len() {
        return Err(Error::dim("fit_least_squares", &[n], &[subjects.len()]));
    }
    ridge_regression(x, &Tensor::new(vec![n, s], one_hot(subjects, s)?)?, ridge)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            steps: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Single linear layer trained full-batch with Adam on cross-entropy.
pub fn fit_linear_classifier(
    x: &Tensor,
    subjects: &[usize],
    s: usize,
    cfg: &ClassifierConfig,
) -> Result<LinearScorer> {
    let xb = with_bias(x)?;
    let (n, d) = xb.dims2()?;
    if n == 0 || n != subjects.len() {
        return Err(Error::dim("fit_linear_classifier", &[n], &[subjects.len()]));
    }
    if let Some(&t) = subjects.iter().find(|&&t| t >= s) {
        return Err(Error::Index {
            what: "subject",
            index: t,
            bound: s,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = linalg::gaussian(&[d, s], 0.01, &mut rng);
    let mut state = AdamState::new(d * s);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let xv = g.constant(xb.clone());
        let wv = g.input(w.clone(), true);
        let logits = g.matmul(xv, wv)?;
        let loss = g.cross_entropy(logits, subjects)?;
        g.backward(loss)?;
        let grad = g.grad(wv).expect("weight requires grad");
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numerical(format!(
                "classifier loss diverged at step {step}"
            )));
        }
        adamw_step(
            w.data_mut(),
            grad.data(),
            &mut state,
            cfg.lr,
            0.0,
            (0.9, 0.999),
            1e-8,
        )?;
    }
    Ok(LinearScorer { w })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearBaselines {
    pub least_squares: BiometricReport,
    pub classifier: BiometricReport,
}

pub fn linear_subject_baselines(
    train_x: &Tensor,
    train_subjects: &[usize],
    test_x: &Tensor,
    test_subjects: &[usize],
    s: usize,
    cfg: &ClassifierConfig,
) -> Result<LinearBaselines> {
    let ls = fit_least_squares(train_x, train_subjects, s, 1e-8)?;
    let clf = fit_linear_classifier(train_x, train_subjects, s, cfg)?;
    Ok(LinearBaselines {
        least_squares: biometric_report(&ls.predict(test_x)?, test_subjects, s)?,
        classifier: biometric_report(&clf.predict(test_x)?, test_subjects, s)?,
    })
}
