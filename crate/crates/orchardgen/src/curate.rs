//! Dataset curation: PCA -> t-SNE -> k-means, keep the largest cluster.
//!
//! Generated images are flattened to pixel vectors, reduced to at most 50
//! principal components, embedded in 2D by exact t-SNE, clustered by
//! k-means, and only the most populous cluster survives. Off-distribution
//! generations land in the small clusters and are dropped.
//!
//! PCA switches to the Gram-matrix route when samples are fewer than
//! features (the usual case for images), so the eigenproblem is N x N, not
//! D x D. t-SNE is the exact O(N^2) algorithm: per-point bandwidths found
//! by binary search to match the target perplexity, symmetrized affinities,
//! Student-t low-dimensional kernel, gradient descent with momentum,
//! adaptive per-coordinate gains, and early exaggeration.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ImageTensor;
use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Settings for the whole curation filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub pca_dims: usize,
    pub tsne_dims: usize,
    pub tsne_perplexity: f64,
    pub tsne_iters: usize,
    pub kmeans_k: usize,
    pub kmeans_restarts: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            pca_dims: 50,
            tsne_dims: 2,
            tsne_perplexity: 30.0,
            tsne_iters: 1000,
            kmeans_k: 3,
            kmeans_restarts: 8,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pca_dims == 0 || self.tsne_dims == 0 || self.kmeans_k == 0 {
            return Err(Error::invalid("filter dimensions must be positive"));
        }
        if !(self.tsne_perplexity >= 1.0) {
            return Err(Error::invalid("perplexity must be at least 1"));
        }
        if self.tsne_iters == 0 || self.kmeans_restarts == 0 {
            return Err(Error::invalid("iteration counts must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- PCA

/// Projection onto the top principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// N x k coordinates in component space.
    pub projected: Vec<Vec<f64>>,
    /// k x D orthonormal components, eigenvalues descending.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (covariance eigenvalues).
    pub explained_variance: Vec<f64>,
    /// Trace of the covariance: total variance across all directions.
    pub total_variance: f64,
    /// Column means subtracted before projection.
    pub mean: Vec<f64>,
}

impl PcaResult {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|&v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// Map component coordinates back to data space.
    pub fn reconstruct(&self, projected_row: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (coord, comp) in projected_row.iter().zip(&self.components) {
            for (o, c) in out.iter_mut().zip(comp) {
                *o += coord * c;
            }
        }
        out
    }
}

/// Principal component analysis of row-major data.
pub fn pca(rows: &[Vec<f64>], k: usize) -> Result<PcaResult> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two samples"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("PCA rows must be non-empty and equal length"));
    }
    if k == 0 || k > n - 1 || k > d {
        return Err(Error::invalid(format!(
            "PCA dimension {k} exceeds min(samples-1, features) = {}",
            (n - 1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / denom;

    // Eigenvalue threshold below which a direction counts as null.
    let null_floor = 1e-12 * total_variance.max(1e-300);

    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::new();
    if d <= n {
        let cov = centered.transpose() * &centered / denom;
        let eig = cov.symmetric_eigen();
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            let v: Vec<f64> = eig.eigenvectors.column(i).iter().cloned().collect();
            pairs.push((lambda.max(0.0), v));
        }
    } else {
        // Gram route: eigenvectors v of X Xt / (n-1) lift to components
        // Xt v / sqrt((n-1) lambda).
        let gram = &centered * centered.transpose() / denom;
        let eig = gram.symmetric_eigen();
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            let lambda = lambda.max(0.0);
            if lambda > null_floor {
                let v = eig.eigenvectors.column(i);
                let lifted = centered.transpose() * v;
                let scale = 1.0 / (denom * lambda).sqrt();
                pairs.push((lambda, lifted.iter().map(|x| x * scale).collect()));
            } else {
                pairs.push((lambda, Vec::new())); // placeholder; filled below
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs.truncate(k);

    // Null directions get deterministic orthonormal fill-ins so the
    // component set stays orthonormal even on rank-deficient data.
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for (lambda, v) in pairs {
        explained_variance.push(lambda);
        if !v.is_empty() && lambda > null_floor {
            components.push(v);
        } else {
            components.push(orthonormal_fill(&components, d)?);
        }
    }
    for comp in &mut components {
        fix_sign(comp);
    }
    let projected: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|comp| {
                    comp.iter()
                        .enumerate()
                        .map(|(j, c)| c * centered[(i, j)])
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(PcaResult {
        projected,
        components,
        explained_variance,
        total_variance,
        mean,
    })
}

/// Flip a component so its largest-magnitude coordinate is positive.
fn fix_sign(comp: &mut [f64]) {
    let mut best = 0usize;
    for (i, v) in comp.iter().enumerate() {
        if v.abs() > comp[best].abs() {
            best = i;
        }
    }
    if comp[best] < 0.0 {
        for v in comp.iter_mut() {
            *v = -*v;
        }
    }
}

/// First standard basis vector orthogonalized against `existing`.
fn orthonormal_fill(existing: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    for axis in 0..d {
        let mut cand = vec![0.0; d];
        cand[axis] = 1.0;
        for comp in existing {
            let dot: f64 = cand.iter().zip(comp).map(|(a, b)| a * b).sum();
            for (c, v) in cand.iter_mut().zip(comp) {
                *c -= dot * v;
            }
        }
        let norm: f64 = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for c in cand.iter_mut() {
                *c /= norm;
            }
            return Ok(cand);
        }
    }
    Err(Error::invalid("could not complete an orthonormal basis"))
}

// ---------------------------------------------------------------- t-SNE

/// Exact t-SNE settings. Only `perplexity`, `iters`, and `out_dims` are
/// surfaced through [`FilterConfig`]; the rest are standard defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub out_dims: usize,
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            out_dims: 2,
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 10.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
        }
    }
}

/// Low-dimensional embedding with its KL bookends.
#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub embedding: Vec<Vec<f64>>,
    /// KL(P||Q) at the random initialization (plain P, no exaggeration).
    pub initial_kl: f64,
    /// KL(P||Q) at the final iterate.
    pub final_kl: f64,
}

fn pairwise_sq_dists(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i][j] = s;
            d[j][i] = s;
        }
    }
    d
}

/// Conditional distribution over `j != i` at inverse bandwidth `beta`,
/// returned with its Shannon entropy in nats.
fn conditional_row(dists: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let n = dists.len();
    let mut logits: Vec<f64> = (0..n)
        .map(|j| if j == i { f64::NEG_INFINITY } else { -beta * dists[j] })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    let mut entropy = 0.0;
    for l in logits.iter_mut() {
        *l /= sum;
        if *l > 0.0 {
            entropy -= *l * l.ln();
        }
    }
    (logits, entropy)
}

/// Symmetrized affinities matching `perplexity` per point.
fn joint_affinities(sq_dists: &[Vec<f64>], perplexity: f64) -> Vec<Vec<f64>> {
    let n = sq_dists.len();
    let target = perplexity.ln();
    let mut cond = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        let mut row = Vec::new();
        for _ in 0..64 {
            let (r, entropy) = conditional_row(&sq_dists[i], i, beta);
            row = r;
            let diff = entropy - target;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        cond[i] = row;
    }
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    p
}

fn student_t_q(y: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = y.len();
    let mut num = vec![vec![0.0; n]; n];
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = y[i].iter().zip(&y[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = 1.0 / (1.0 + d);
            num[i][j] = v;
            num[j][i] = v;
            z += 2.0 * v;
        }
    }
    let q = num
        .iter()
        .map(|row| row.iter().map(|&v| (v / z.max(1e-300)).max(1e-12)).collect())
        .collect();
    (q, num)
}

fn kl_divergence(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        for (&pij, &qij) in pi.iter().zip(qi) {
            if pij > 0.0 {
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE. Deterministic given the RNG state.
pub fn tsne(rows: &[Vec<f64>], config: &TsneConfig, rng: &mut Rng) -> Result<TsneResult> {
    let n = rows.len();
    if n < 4 {
        return Err(Error::invalid("t-SNE needs at least 4 samples"));
    }
    if config.out_dims == 0 || config.iters == 0 {
        return Err(Error::invalid("t-SNE dims and iterations must be positive"));
    }
    let max_perp = (n - 1) as f64 / 3.0;
    if !(config.perplexity >= 1.0 && config.perplexity <= max_perp) {
        return Err(Error::invalid(format!(
            "perplexity {} outside [1, {max_perp:.2}] for {n} samples",
            config.perplexity
        )));
    }
    let p = joint_affinities(&pairwise_sq_dists(rows), config.perplexity);

    let normal = rand_distr::Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..config.out_dims).map(|_| rng.sample(normal)).collect())
        .collect();
    let mut vel = vec![vec![0.0f64; config.out_dims]; n];
    let mut gains = vec![vec![1.0f64; config.out_dims]; n];

    let (q0, _) = student_t_q(&y);
    let initial_kl = kl_divergence(&p, &q0);

    for iter in 0..config.iters {
        let exaggerate = if iter < config.exaggeration_iters {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let (q, num) = student_t_q(&y);
        let mut grad = vec![vec![0.0; config.out_dims]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let coeff = 4.0 * (exaggerate * p[i][j] - q[i][j]) * num[i][j];
                for dim in 0..config.out_dims {
                    grad[i][dim] += coeff * (y[i][dim] - y[j][dim]);
                }
            }
        }
        for i in 0..n {
            for dim in 0..config.out_dims {
                let same_sign = (grad[i][dim] > 0.0) == (vel[i][dim] > 0.0);
                gains[i][dim] = if same_sign {
                    (gains[i][dim] * 0.8).max(0.01)
                } else {
                    gains[i][dim] + 0.2
                };
                vel[i][dim] =
                    momentum * vel[i][dim] - config.learning_rate * gains[i][dim] * grad[i][dim];
                y[i][dim] += vel[i][dim];
            }
        }
        // Re-center so the embedding cannot drift.
        for dim in 0..config.out_dims {
            let mean: f64 = y.iter().map(|r| r[dim]).sum::<f64>() / n as f64;
            for row in y.iter_mut() {
                row[dim] -= mean;
            }
        }
    }
    let (q_final, _) = student_t_q(&y);
    let final_kl = kl_divergence(&p, &q_final);
    Ok(TsneResult {
        embedding: y,
        initial_kl,
        final_kl,
    })
}

// ---------------------------------------------------------------- k-means

/// One clustering of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn kmeanspp_seed(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    let first = rng.gen_range(0..points.len());
    centroids.push(points[first].clone());
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| nearest_centroid(p, &centroids).1)
            .collect();
        let total: f64 = weights.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[idx].clone());
    }
    centroids
}

struct LloydOutcome {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    /// Inertia after every update step, for the monotonicity property.
    #[cfg_attr(not(test), allow(dead_code))]
    history: Vec<f64>,
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> LloydOutcome {
    let dims = points[0].len();
    let k = centroids.len();
    let mut labels = vec![0usize; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (label, d) = nearest_centroid(p, &centroids);
            inertia += d;
            if labels[i] != label {
                labels[i] = label;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed && history.len() > 1 {
            break;
        }
        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (p, &label) in points.iter().zip(&labels) {
            counts[label] += 1;
            for (s, v) in sums[label].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            } else {
                // Re-seed an empty cluster to the farthest point, unless
                // every point already sits on its centroid.
                let mut far_idx = None;
                let mut far_d = 0.0;
                for (i, p) in points.iter().enumerate() {
                    let d = sq_dist(p, &centroids[labels[i]]);
                    if d > far_d {
                        far_d = d;
                        far_idx = Some(i);
                    }
                }
                if let Some(i) = far_idx {
                    centroids[c] = points[i].clone();
                    labels[i] = c;
                }
            }
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (label, d) = nearest_centroid(p, &centroids);
        labels[i] = label;
        inertia += d;
    }
    history.push(inertia);
    LloydOutcome {
        labels,
        centroids,
        inertia,
        history,
    }
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts`.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut Rng,
) -> Result<KMeansResult> {
    if k == 0 || restarts == 0 {
        return Err(Error::invalid("k and restarts must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dims = points[0].len();
    if dims == 0 || points.iter().any(|p| p.len() != dims) {
        return Err(Error::invalid("points must be non-empty and equal length"));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts {
        let seeds = kmeanspp_seed(points, k, rng);
        let outcome = lloyd(points, seeds, 100);
        let better = best
            .as_ref()
            .map(|b| outcome.inertia < b.inertia)
            .unwrap_or(true);
        if better {
            best = Some(KMeansResult {
                labels: outcome.labels,
                centroids: outcome.centroids,
                inertia: outcome.inertia,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

// ---------------------------------------------------------------- filter

/// What the curation filter did and kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Indices of the kept images, ascending.
    pub kept: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub labels: Vec<usize>,
    /// 2D (or `tsne_dims`-D) embedding per image.
    pub embedding: Vec<Vec<f64>>,
    pub initial_kl: f64,
    pub final_kl: f64,
    /// Effective parameters after clamping to the sample count.
    pub pca_dims_used: usize,
    pub perplexity_used: f64,
    /// True when the inputs had no variance and clustering was skipped.
    pub degenerate: bool,
}

/// Flatten, reduce, embed, cluster, and keep the most populous cluster
/// (ties go to the lowest cluster index). `pca_dims` and `perplexity` are
/// clamped to what the sample count supports.
pub fn filter_largest_cluster(
    images: &[ImageTensor],
    config: &FilterConfig,
    rng: &mut Rng,
) -> Result<FilterReport> {
    config.validate()?;
    let n = images.len();
    if n < config.kmeans_k {
        return Err(Error::invalid(format!(
            "{n} images cannot form {} clusters",
            config.kmeans_k
        )));
    }
    let shape = images[0].shape();
    if images.iter().any(|img| img.shape() != shape) {
        return Err(Error::invalid("images must share one shape"));
    }
    let rows: Vec<Vec<f64>> = images.iter().map(|img| img.data().to_vec()).collect();
    let d = rows[0].len();
    let pca_dims_used = config.pca_dims.min(n - 1).min(d);
    let reduced = pca(&rows, pca_dims_used)?;
    if reduced.total_variance <= 1e-18 {
        // Identical images: nothing to separate, keep everything.
        return Ok(FilterReport {
            kept: (0..n).collect(),
            cluster_sizes: std::iter::once(n)
                .chain(std::iter::repeat(0).take(config.kmeans_k - 1))
                .collect(),
            labels: vec![0; n],
            embedding: vec![vec![0.0; config.tsne_dims]; n],
            initial_kl: 0.0,
            final_kl: 0.0,
            pca_dims_used,
            perplexity_used: 0.0,
            degenerate: true,
        });
    }
    let perplexity_used = config.tsne_perplexity.min((n - 1) as f64 / 3.0);
    let tsne_config = TsneConfig {
        out_dims: config.tsne_dims,
        perplexity: perplexity_used,
        iters: config.tsne_iters,
        ..Default::default()
    };
    let embedded = tsne(&reduced.projected, &tsne_config, rng)?;
    let clustering = kmeans(&embedded.embedding, config.kmeans_k, config.kmeans_restarts, rng)?;
    let mut cluster_sizes = vec![0usize; config.kmeans_k];
    for &label in &clustering.labels {
        cluster_sizes[label] += 1;
    }
    let largest = cluster_sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let kept: Vec<usize> = clustering
        .labels
        .iter()
        .enumerate()
        .filter(|&(_, &label)| label == largest)
        .map(|(i, _)| i)
        .collect();
    Ok(FilterReport {
        kept,
        cluster_sizes,
        labels: clustering.labels,
        embedding: embedded.embedding,
        initial_kl: embedded.initial_kl,
        final_kl: embedded.final_kl,
        pca_dims_used,
        perplexity_used,
        degenerate: false,
    })
}
