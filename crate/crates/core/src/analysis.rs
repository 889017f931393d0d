//! Distribution and agreement metrics: entropy, Jensen-Shannon divergence,
//! goal clustering, Fleiss' κ, the judge-noise bound, and review sampling.
//! Information measures are in nats.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::stable_hash;
use crate::relabel::RelabelDecision;
use crate::trajectory::{Step, Trajectory};

const SUM_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_CLUSTERS: usize = 18;
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("negative probability mass {0}")]
    NegativeMass(f64),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no goals to cluster")]
    NoGoals,
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("annotation matrix: {0}")]
    Annotation(String),
    #[error("judge precision must lie strictly between 0 and 1, got {0}")]
    Precision(f64),
    #[error("{field} must be non-negative, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("sample of {requested} requested from {available} accepted")]
    SampleTooLarge { requested: usize, available: usize },
}

fn check_distribution(p: &[f64]) -> Result<(), AnalysisError> {
    if p.is_empty() {
        return Err(AnalysisError::EmptyDistribution);
    }
    if let Some(&neg) = p.iter().find(|&&x| x < 0.0 || x.is_nan()) {
        return Err(AnalysisError::NegativeMass(neg));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(AnalysisError::NotNormalized(sum));
    }
    Ok(())
}

/// −Σ p ln p, with 0·ln 0 = 0.
pub fn entropy_nats(p: &[f64]) -> Result<f64, AnalysisError> {
    check_distribution(p)?;
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).ln())
        .sum()
}

/// ½KL(p‖m) + ½KL(q‖m) with m = (p+q)/2.
pub fn js_divergence_nats(p: &[f64], q: &[f64]) -> Result<f64, AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::DimensionMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    if p == q {
        return Ok(0.0);
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let d = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}

/// Text embedding provider.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Hashed bag of words, L2-normalized. Tokens are lowercase alphanumeric runs.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    pub dim: usize,
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder { dim: 256 }
    }
}

impl Embedder for HashedBowEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let dim = self.dim.max(1);
        let mut v = vec![0.0; dim];
        for tok in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = stable_hash(&[tok.to_lowercase().as_bytes()]);
            v[(h % dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalDistribution {
    /// Cluster of each goal, by position in the input list.
    pub cluster_assignments: Vec<usize>,
    /// Share of goals per cluster; length k.
    pub probabilities: Vec<f64>,
    pub entropy_nats: f64,
    /// Clusters holding at least one goal.
    pub coverage: usize,
}

impl GoalDistribution {
    fn from_assignments(assignments: Vec<usize>, k: usize) -> Self {
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let n = assignments.len() as f64;
        let probabilities: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let entropy = -probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
        GoalDistribution {
            coverage: counts.iter().filter(|&&c| c > 0).count(),
            cluster_assignments: assignments,
            probabilities,
            entropy_nats: entropy.max(0.0),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; the lowest index wins ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>, AnalysisError> {
    if points.is_empty() {
        return Err(AnalysisError::NoGoals);
    }
    if k == 0 {
        return Err(AnalysisError::ZeroClusters);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            // fewer distinct points than clusters; the rest stay empty
            centroids.push(centroids[0].clone());
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = d.len() - 1;
        for (i, &di) in d.iter().enumerate() {
            if di > 0.0 && target < di {
                pick = i;
                break;
            }
            target -= di;
        }
        centroids.push(points[pick].clone());
    }

    let dim = points[0].len();
    let mut assign: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(assign)
}

pub fn cluster_goals<S: AsRef<str> + Sync>(
    goals: &[S],
    k: usize,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<GoalDistribution, AnalysisError> {
    if goals.is_empty() {
        return Err(AnalysisError::NoGoals);
    }
    let points: Vec<Vec<f64>> = goals.par_iter().map(|g| embedder.embed(g.as_ref())).collect();
    let assign = kmeans(&points, k, seed)?;
    Ok(GoalDistribution::from_assignments(assign, k))
}

/// Items × categories vote counts with a constant number of raters per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u32>>", into = "Vec<Vec<u32>>")]
pub struct AnnotationMatrix {
    rows: Vec<Vec<u32>>,
    raters: u32,
}

impl AnnotationMatrix {
    pub fn new(rows: Vec<Vec<u32>>) -> Result<Self, AnalysisError> {
        let bad = |m: String| AnalysisError::Annotation(m);
        let first = rows.first().ok_or_else(|| bad("no items".into()))?;
        let cats = first.len();
        let raters: u32 = first.iter().sum();
        if cats == 0 {
            return Err(bad("no categories".into()));
        }
        if raters < 2 {
            return Err(bad(format!("need at least 2 raters per item, got {raters}")));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cats {
                return Err(bad(format!("item {} has {} categories, expected {cats}", i + 1, r.len())));
            }
            let s: u32 = r.iter().sum();
            if s != raters {
                return Err(bad(format!("item {} has {s} votes, expected {raters}", i + 1)));
            }
        }
        Ok(AnnotationMatrix { rows, raters })
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }
}

impl TryFrom<Vec<Vec<u32>>> for AnnotationMatrix {
    type Error = AnalysisError;
    fn try_from(rows: Vec<Vec<u32>>) -> Result<Self, Self::Error> {
        AnnotationMatrix::new(rows)
    }
}

impl From<AnnotationMatrix> for Vec<Vec<u32>> {
    fn from(m: AnnotationMatrix) -> Self {
        m.rows
    }
}

/// Fleiss' κ. When expected agreement is 1 (every vote in one category)
/// the statistic is undefined; observed agreement is then also 1 and 1 is returned.
pub fn fleiss_kappa(m: &AnnotationMatrix) -> f64 {
    let n = f64::from(m.raters);
    let items = m.rows.len() as f64;
    let cats = m.rows[0].len();
    let p_bar = m
        .rows
        .iter()
        .map(|r| (r.iter().map(|&c| f64::from(c) * f64::from(c)).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..cats)
        .map(|j| {
            let pj = m.rows.iter().map(|r| f64::from(r[j])).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        return 1.0;
    }
    (p_bar - p_e) / (1.0 - p_e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// p
    pub judge_precision: f64,
    /// Δ_perfect
    pub perfect_gain: f64,
    /// ε
    pub harm_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// p·Δ − (1−p)·ε
    pub lower_bound: f64,
    /// p/(1−p)
    pub max_harm_multiplier: f64,
    /// Largest ε that keeps the bound positive: multiplier·Δ.
    pub epsilon_threshold: f64,
    pub positive: bool,
}

pub fn noise_bound(b: BoundInputs) -> Result<BoundReport, AnalysisError> {
    let p = b.judge_precision;
    if !(p > 0.0 && p < 1.0) {
        return Err(AnalysisError::Precision(p));
    }
    if b.perfect_gain.is_nan() || b.perfect_gain < 0.0 {
        return Err(AnalysisError::Negative { field: "perfect_gain", value: b.perfect_gain });
    }
    if b.harm_bound.is_nan() || b.harm_bound < 0.0 {
        return Err(AnalysisError::Negative { field: "harm_bound", value: b.harm_bound });
    }
    let multiplier = p / (1.0 - p);
    let lower_bound = p * b.perfect_gain - (1.0 - p) * b.harm_bound;
    Ok(BoundReport {
        lower_bound,
        max_harm_multiplier: multiplier,
        epsilon_threshold: multiplier * b.perfect_gain,
        positive: b.harm_bound < multiplier * b.perfect_gain,
    })
}

/// Review export: what an annotator sees. The original goal and failure
/// reason are deliberately absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRecord {
    pub trajectory_id: String,
    pub hindsight_prompt: String,
    pub steps: Vec<ReviewStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewStep {
    pub thought: String,
    pub action: String,
    pub observation: String,
}

impl From<&Step> for ReviewStep {
    fn from(s: &Step) -> Self {
        ReviewStep {
            thought: s.thought.clone(),
            action: s.action.clone(),
            observation: s.observation.clone(),
        }
    }
}

/// Uniform sample without replacement, returned in input order.
pub fn sample_for_review(
    accepted: &[(&Trajectory, &RelabelDecision)],
    n: usize,
    seed: u64,
) -> Result<Vec<ReviewRecord>, AnalysisError> {
    if n > accepted.len() {
        return Err(AnalysisError::SampleTooLarge {
            requested: n,
            available: accepted.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, accepted.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| {
            let (t, d) = accepted[i];
            ReviewRecord {
                trajectory_id: t.id.clone(),
                hindsight_prompt: d.hindsight_prompt.clone(),
                steps: t.steps.iter().map(ReviewStep::from).collect(),
            }
        })
        .collect())
}

/// Metrics report written by the CLI.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entropy: Option<f64>,
    pub jsd: Option<f64>,
    pub coverage: Option<usize>,
    pub kappa: Option<f64>,
    pub bound: Option<BoundReport>,
}

/// Cluster two goal sets jointly and compare their cluster distributions.
pub fn compare_goal_sets<S: AsRef<str> + Sync>(
    goals: &[S],
    reference: &[S],
    k: usize,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<(GoalDistribution, GoalDistribution, f64), AnalysisError> {
    if goals.is_empty() || reference.is_empty() {
        return Err(AnalysisError::NoGoals);
    }
    let all: Vec<&str> = goals.iter().chain(reference).map(AsRef::as_ref).collect();
    let joint = cluster_goals(&all, k, embedder, seed)?;
    let (a, b) = joint.cluster_assignments.split_at(goals.len());
    let da = GoalDistribution::from_assignments(a.to_vec(), k);
    let db = GoalDistribution::from_assignments(b.to_vec(), k);
    let jsd = js_divergence_nats(&da.probabilities, &db.probabilities)?;
    Ok((da, db, jsd))
}
