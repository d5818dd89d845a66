//! Sample-selection strategies for the active-learning rounds.
//!
//! Score-based top-m selection (confidence / entropy / margin / Avg-KLD),
//! uniform sampling, k-Center-Greedy, CLUE (entropy-weighted k-means) and
//! BADGE (k-means++ seeding over gradient embeddings). All selectors draw
//! exclusively from the remaining pool and are deterministic given a seed;
//! score ties are broken by a seeded shuffle.

mod kmeans;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::deep_ensemble_probs;
use crate::error::{Error, Result};
use crate::nn::LOG_FLOOR;
use crate::rng;
use kmeans::{squared_distance, weighted_draw, weighted_kmeans};

/// Tracks labeled batches against the pool, budget and round structure.
#[derive(Debug, Clone)]
pub struct SelectionState {
    selected: Vec<bool>,
    n_selected: usize,
    budget: usize,
    rounds: usize,
}

impl SelectionState {
    pub fn new(pool_size: usize, budget: usize, rounds: usize) -> Result<Self> {
        if budget > pool_size {
            return Err(Error::Budget(format!(
                "budget {budget} exceeds pool size {pool_size}"
            )));
        }
        if budget > 0 && rounds == 0 {
            return Err(Error::Config("rounds must be >= 1 when budget > 0".into()));
        }
        Ok(Self {
            selected: vec![false; pool_size],
            n_selected: 0,
            budget,
            rounds,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.selected.len()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Per-round batch size: floor(M / T).
    pub fn per_round(&self) -> usize {
        self.budget.checked_div(self.rounds).unwrap_or(0)
    }

    pub fn n_selected(&self) -> usize {
        self.n_selected
    }

    pub fn is_selected(&self, index: usize) -> bool {
        self.selected[index]
    }

    pub fn selected_mask(&self) -> &[bool] {
        &self.selected
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&i| self.selected[i]).collect()
    }

    pub fn remaining(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&i| !self.selected[i]).collect()
    }

    pub fn remaining_len(&self) -> usize {
        self.selected.len() - self.n_selected
    }

    /// Record a labeled batch. Rejects duplicates, repeats across rounds,
    /// out-of-range indices, and budget overruns.
    pub fn mark_selected(&mut self, batch: &[usize]) -> Result<()> {
        if self.n_selected + batch.len() > self.budget {
            return Err(Error::Budget(format!(
                "marking {} more points would exceed budget {}",
                batch.len(),
                self.budget
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(batch.len());
        for &i in batch {
            if i >= self.selected.len() {
                return Err(Error::Budget(format!("index {i} outside pool")));
            }
            if self.selected[i] || !seen.insert(i) {
                return Err(Error::Protocol(format!("index {i} selected twice")));
            }
        }
        for &i in batch {
            self.selected[i] = true;
        }
        self.n_selected += batch.len();
        Ok(())
    }
}

/// Score family computed on an ensemble's member probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    Confidence,
    Entropy,
    Margin,
    AvgKld,
}

/// Per-point uncertainty scores on the mean member distribution. With one
/// member these reduce to the single-model softmax-response scores; Avg-KLD
/// of a single member is identically zero.
pub fn uncertainty_score(member_probs: &[Array2<f64>], rule: ScoreRule) -> Result<Vec<f64>> {
    let mean = deep_ensemble_probs(member_probs)?;
    let n = mean.nrows();
    let mut scores = Vec::with_capacity(n);
    match rule {
        ScoreRule::Confidence => {
            for row in mean.outer_iter() {
                scores.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
        ScoreRule::Entropy => {
            for row in mean.outer_iter() {
                let mut h = 0.0;
                for &p in row.iter() {
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
                scores.push(h);
            }
        }
        ScoreRule::Margin => {
            scores = crate::ensemble::predict_from_probs(&mean).margin;
        }
        ScoreRule::AvgKld => {
            let n_members = member_probs.len() as f64;
            for i in 0..n {
                let mut total = 0.0;
                for member in member_probs {
                    for k in 0..mean.ncols() {
                        let p = member[[i, k]];
                        if p > 0.0 {
                            total += p * (p.ln() - mean[[i, k]].max(LOG_FLOOR).ln());
                        }
                    }
                }
                scores.push(total / n_members);
            }
        }
    }
    Ok(scores)
}

/// Which extreme of the score to label first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Lowest,
    Highest,
}

fn check_batch_feasible(state: &SelectionState, m: usize) -> Result<()> {
    if m > state.remaining_len() {
        return Err(Error::Budget(format!(
            "batch of {m} exceeds remaining pool of {}",
            state.remaining_len()
        )));
    }
    Ok(())
}

/// The `m` pool points extremal in the given score direction. Ties are
/// broken by a seeded shuffle applied before the (stable) sort.
pub fn select_top_m(
    scores: &[f64],
    direction: Direction,
    state: &SelectionState,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if scores.len() != state.pool_size() {
        return Err(Error::Shape(format!(
            "{} scores for a pool of {}",
            scores.len(),
            state.pool_size()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite selection score".into()));
    }
    check_batch_feasible(state, m)?;
    let mut pool = state.remaining();
    pool.shuffle(&mut rng::stream_rng(seed, &[0x544f504d]));
    match direction {
        Direction::Lowest => pool.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap()),
        Direction::Highest => pool.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap()),
    }
    pool.truncate(m);
    Ok(pool)
}

/// `m` distinct pool indices drawn uniformly without replacement.
pub fn select_uniform(state: &SelectionState, m: usize, seed: u64) -> Result<Vec<usize>> {
    check_batch_feasible(state, m)?;
    let mut pool = state.remaining();
    pool.shuffle(&mut rng::stream_rng(seed, &[0x554e4946]));
    pool.truncate(m);
    Ok(pool)
}

/// Greedy k-center batch: each pick maximizes the Euclidean distance to
/// the nearest already-chosen center, where the centers start as the
/// already-labeled points. With no centers yet, the first pick is a
/// seeded-random pool point.
pub fn k_center_greedy(
    embeddings: &ArrayView2<f64>,
    state: &SelectionState,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if embeddings.nrows() != state.pool_size() {
        return Err(Error::Shape("embedding rows disagree with pool".into()));
    }
    check_batch_feasible(state, m)?;
    if m == 0 {
        return Ok(Vec::new());
    }

    let mut pool = state.remaining();
    pool.shuffle(&mut rng::stream_rng(seed, &[0x4b434752])); // tie order
    let centers = state.selected_indices();

    // min squared distance from each pool point to the current center set
    let mut min_d2: Vec<f64> = pool
        .iter()
        .map(|&i| {
            centers
                .iter()
                .map(|&c| squared_distance(embeddings.row(i), embeddings.row(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let mut picked = Vec::with_capacity(m);
    let mut taken = vec![false; pool.len()];
    for round in 0..m {
        let choice = if centers.is_empty() && round == 0 {
            0 // first element of the shuffled pool = seeded-random pick
        } else {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for (slot, &d) in min_d2.iter().enumerate() {
                if !taken[slot] && d > best_d {
                    best_d = d;
                    best = slot;
                }
            }
            best
        };
        taken[choice] = true;
        picked.push(pool[choice]);
        for (slot, &p) in pool.iter().enumerate() {
            if !taken[slot] {
                let d = squared_distance(embeddings.row(p), embeddings.row(pool[choice]));
                if d < min_d2[slot] {
                    min_d2[slot] = d;
                }
            }
        }
    }
    Ok(picked)
}

/// Entropy of each row of `probs` after temperature scaling
/// (`p^(1/T)` renormalized).
fn clue_weights(probs: &Array2<f64>, pool: &[usize], temperature: f64) -> Vec<f64> {
    pool.iter()
        .map(|&i| {
            let row = probs.row(i);
            let mut scaled: Vec<f64> =
                row.iter().map(|&p| p.max(0.0).powf(1.0 / temperature)).collect();
            let total: f64 = scaled.iter().sum();
            if total <= 0.0 {
                return 0.0;
            }
            for v in scaled.iter_mut() {
                *v /= total;
            }
            let mut h = 0.0;
            for &p in &scaled {
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
            h
        })
        .collect()
}

/// CLUE: weighted k-means over pool embeddings with uncertainty
/// (temperature-scaled entropy) as sample weights; returns the pool point
/// nearest each centroid, deduplicated by falling back to the next-nearest.
///
/// Degenerate all-identical embeddings fall back to a seeded-random batch.
pub fn clue_select(
    embeddings: &ArrayView2<f64>,
    probs: &Array2<f64>,
    temperature: f64,
    state: &SelectionState,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if embeddings.nrows() != state.pool_size() || probs.nrows() != state.pool_size() {
        return Err(Error::Shape("embedding/prob rows disagree with pool".into()));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    check_batch_feasible(state, m)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    let pool = state.remaining();
    if m == pool.len() {
        return Ok(pool);
    }

    let first = embeddings.row(pool[0]);
    let degenerate = pool
        .iter()
        .all(|&i| embeddings.row(i).iter().zip(first.iter()).all(|(a, b)| a == b));
    let mut krng = rng::stream_rng(seed, &[0x434c5545]);
    if degenerate {
        let mut fallback = pool;
        fallback.shuffle(&mut krng);
        fallback.truncate(m);
        return Ok(fallback);
    }

    let mut pool_emb = Array2::zeros((pool.len(), embeddings.ncols()));
    for (r, &i) in pool.iter().enumerate() {
        pool_emb.row_mut(r).assign(&embeddings.row(i));
    }
    let mut weights = clue_weights(probs, &pool, temperature);
    if weights.iter().all(|&w| w <= 0.0) {
        weights.iter_mut().for_each(|w| *w = 1.0);
    }

    let outcome = weighted_kmeans(&pool_emb.view(), &weights, m, &mut krng, 100);
    let mut taken = vec![false; pool.len()];
    let mut picked = Vec::with_capacity(m);
    for c in 0..m {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for r in 0..pool.len() {
            if taken[r] {
                continue;
            }
            let d = squared_distance(pool_emb.row(r), outcome.centroids.row(c));
            if d < best_d {
                best_d = d;
                best = r;
            }
        }
        taken[best] = true;
        picked.push(pool[best]);
    }
    Ok(picked)
}

/// BADGE: k-means++ seeding over pool gradient embeddings. The first pick
/// is seeded-random; every later pick is sampled with probability
/// proportional to the squared distance to the nearest pick so far.
///
/// All-zero embeddings (or exhausted distance mass) fall back to
/// seeded-random picks.
pub fn badge_select(
    grad_embeddings: &ArrayView2<f64>,
    state: &SelectionState,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if grad_embeddings.nrows() != state.pool_size() {
        return Err(Error::Shape("gradient-embedding rows disagree with pool".into()));
    }
    check_batch_feasible(state, m)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    let pool = state.remaining();
    if m == pool.len() {
        return Ok(pool);
    }
    let mut rng = rng::stream_rng(seed, &[0x42414447]);

    let mut picked_slots: Vec<usize> = Vec::with_capacity(m);
    let mut taken = vec![false; pool.len()];
    let first = rng.random_range(0..pool.len());
    picked_slots.push(first);
    taken[first] = true;

    let mut d2: Vec<f64> = pool
        .iter()
        .map(|&i| squared_distance(grad_embeddings.row(i), grad_embeddings.row(pool[first])))
        .collect();

    while picked_slots.len() < m {
        let mass: Vec<f64> = d2
            .iter()
            .enumerate()
            .map(|(slot, &d)| if taken[slot] { 0.0 } else { d })
            .collect();
        let total: f64 = mass.iter().sum();
        let choice = if total > 0.0 && total.is_finite() {
            weighted_draw(&mass, &mut rng)
        } else {
            // all remaining points coincide with a pick: uniform fallback
            let open: Vec<usize> = (0..pool.len()).filter(|&s| !taken[s]).collect();
            open[rng.random_range(0..open.len())]
        };
        taken[choice] = true;
        picked_slots.push(choice);
        for slot in 0..pool.len() {
            if !taken[slot] {
                let d = squared_distance(
                    grad_embeddings.row(pool[slot]),
                    grad_embeddings.row(pool[choice]),
                );
                if d < d2[slot] {
                    d2[slot] = d;
                }
            }
        }
    }
    Ok(picked_slots.into_iter().map(|s| pool[s]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn open_state(pool: usize) -> SelectionState {
        SelectionState::new(pool, pool, 1).unwrap()
    }

    fn state_with_centers(pool: usize, centers: &[usize]) -> SelectionState {
        let mut s = open_state(pool);
        s.mark_selected(centers).unwrap();
        s
    }

    #[test]
    fn per_round_is_floor_of_budget_over_rounds() {
        let s = SelectionState::new(100, 25, 10).unwrap();
        assert_eq!(s.per_round(), 2);
        let z = SelectionState::new(100, 0, 0).unwrap();
        assert_eq!(z.per_round(), 0);
    }

    #[test]
    fn mark_selected_enforces_protocol() {
        let mut s = SelectionState::new(5, 4, 2).unwrap();
        s.mark_selected(&[0, 3]).unwrap();
        assert!(s.mark_selected(&[3]).is_err(), "relabeling");
        assert!(s.mark_selected(&[1, 1]).is_err(), "duplicate in batch");
        assert!(s.mark_selected(&[9]).is_err(), "out of range");
        s.mark_selected(&[1, 2]).unwrap();
        assert!(s.mark_selected(&[4]).is_err(), "budget exceeded");
        assert_eq!(s.selected_indices(), vec![0, 1, 2, 3]);
        assert_eq!(s.remaining(), vec![4]);
    }

    #[test]
    fn uncertainty_score_examples() {
        let uniform = array![[0.25, 0.25, 0.25, 0.25]];
        let h = uncertainty_score(std::slice::from_ref(&uniform), ScoreRule::Entropy).unwrap();
        assert!((h[0] - 4.0f64.ln()).abs() < 1e-12);

        let member = array![[0.7, 0.3]];
        let same = uncertainty_score(&[member.clone(), member.clone()], ScoreRule::AvgKld).unwrap();
        assert!(same[0].abs() < 1e-12);

        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        let kld = uncertainty_score(&[a, b], ScoreRule::AvgKld).unwrap();
        assert!((kld[0] - std::f64::consts::LN_2).abs() < 1e-9, "got {}", kld[0]);

        let conf = uncertainty_score(std::slice::from_ref(&member), ScoreRule::Confidence).unwrap();
        assert!((conf[0] - 0.7).abs() < 1e-12);
        let margin = uncertainty_score(&[member], ScoreRule::Margin).unwrap();
        assert!((margin[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn score_ranges_hold_on_random_ensembles() {
        let mut rng = crate::rng::stream_rng(12, &[3]);
        let k = 5;
        for _ in 0..50 {
            let members: Vec<Array2<f64>> = (0..3)
                .map(|_| {
                    let mut m = Array2::from_shape_fn((8, k), |_| rng.random_range(0.01..1.0));
                    for mut row in m.outer_iter_mut() {
                        let s: f64 = row.sum();
                        row.mapv_inplace(|v| v / s);
                    }
                    m
                })
                .collect();
            let conf = uncertainty_score(&members, ScoreRule::Confidence).unwrap();
            let ent = uncertainty_score(&members, ScoreRule::Entropy).unwrap();
            let margin = uncertainty_score(&members, ScoreRule::Margin).unwrap();
            let kld = uncertainty_score(&members, ScoreRule::AvgKld).unwrap();
            for i in 0..8 {
                assert!(conf[i] >= 1.0 / k as f64 - 1e-12 && conf[i] <= 1.0 + 1e-12);
                assert!(ent[i] >= -1e-12 && ent[i] <= (k as f64).ln() + 1e-12);
                assert!((0.0..=1.0 + 1e-12).contains(&margin[i]));
                assert!(kld[i] >= -1e-12);
            }
        }
    }

    #[test]
    fn top_m_picks_the_extremes() {
        let s = open_state(3);
        let picked = select_top_m(&[0.9, 0.1, 0.5], Direction::Lowest, &s, 1, 0).unwrap();
        assert_eq!(picked, vec![1]);
        let picked = select_top_m(&[0.9, 0.1, 0.5], Direction::Highest, &s, 1, 0).unwrap();
        assert_eq!(picked, vec![0]);
    }

    #[test]
    fn top_m_ties_are_seeded() {
        let s = open_state(6);
        let scores = vec![0.5; 6];
        let a = select_top_m(&scores, Direction::Lowest, &s, 2, 9).unwrap();
        let b = select_top_m(&scores, Direction::Lowest, &s, 2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn top_m_matches_sort_oracle_on_distinct_scores() {
        let mut rng = crate::rng::stream_rng(4, &[0]);
        for _ in 0..200 {
            let n = rng.random_range(2..50);
            let m = rng.random_range(1..=n);
            let mut scores: Vec<f64> =
                (0..n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
            scores.shuffle(&mut rng);
            let s = open_state(n);
            let mut got = select_top_m(&scores, Direction::Lowest, &s, m, 1).unwrap();
            let mut expect: Vec<usize> = (0..n).collect();
            expect.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
            expect.truncate(m);
            got.sort_unstable();
            expect.sort_unstable();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn uniform_covers_whole_pool_when_m_equals_pool() {
        let s = open_state(4);
        let mut picked = select_uniform(&s, 4, 3).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 2, 3]);
    }

    #[test]
    fn uniform_is_seed_deterministic_and_roughly_unbiased() {
        let s = open_state(10);
        assert_eq!(select_uniform(&s, 1, 5).unwrap(), select_uniform(&s, 1, 5).unwrap());
        let mut counts = vec![0usize; 10];
        for trial in 0..10_000 {
            counts[select_uniform(&s, 1, trial).unwrap()[0]] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.1).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn budget_errors_when_m_exceeds_pool() {
        let s = state_with_centers(3, &[0, 1]);
        assert!(select_uniform(&s, 2, 0).is_err());
        assert!(select_top_m(&[0.1, 0.2, 0.3], Direction::Lowest, &s, 2, 0).is_err());
        assert!(badge_select(&Array2::zeros((3, 2)).view(), &s, 2, 0).is_err());
    }

    #[test]
    fn k_center_greedy_on_the_line() {
        // points 0,1,2,10 with center {0}: picks 10 (farthest), then 2
        let emb = array![[0.0], [1.0], [2.0], [10.0]];
        let s = state_with_centers(4, &[0]);
        let picked = k_center_greedy(&emb.view(), &s, 2, 0).unwrap();
        assert_eq!(picked, vec![3, 2]);
    }

    #[test]
    fn k_center_greedy_grabs_the_outlier() {
        let emb = array![[0.0, 0.0], [0.2, 0.1], [0.1, 0.2], [9.0, 9.0]];
        let s = state_with_centers(4, &[0]);
        let picked = k_center_greedy(&emb.view(), &s, 1, 4).unwrap();
        assert_eq!(picked, vec![3]);
    }

    #[test]
    fn k_center_greedy_satisfies_max_min_property() {
        let mut rng = crate::rng::stream_rng(8, &[2]);
        for _ in 0..50 {
            let n = rng.random_range(5..30usize);
            let emb = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            let n_centers = rng.random_range(1..3).min(n - 2);
            let m = rng.random_range(1..=3).min(n - n_centers);
            let centers: Vec<usize> = (0..n_centers).collect();
            let s = state_with_centers(n, &centers);
            let picked = k_center_greedy(&emb.view(), &s, m, 3).unwrap();

            // replay: every pick must maximize min-distance to the centers
            let mut current = centers.clone();
            for &p in &picked {
                let min_d = |q: usize, cs: &[usize]| {
                    cs.iter()
                        .map(|&c| squared_distance(emb.row(q), emb.row(c)))
                        .fold(f64::INFINITY, f64::min)
                };
                let best = (0..n)
                    .filter(|q| !current.contains(q))
                    .map(|q| min_d(q, &current))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(min_d(p, &current) >= best - 1e-12, "pick {p} not max-min");
                current.push(p);
            }
        }
    }

    #[test]
    fn clue_picks_one_point_per_planted_cluster() {
        let emb = array![
            [0.0, 0.0],
            [0.1, 0.0],
            [10.0, 10.0],
            [10.1, 10.0],
            [-10.0, 5.0],
            [-10.1, 5.0],
        ];
        let probs = Array2::from_elem((6, 2), 0.5);
        let s = open_state(6);
        let picked = clue_select(&emb.view(), &probs, 1.0, &s, 3, 2).unwrap();
        assert_eq!(picked.len(), 3);
        let mut clusters: Vec<usize> = picked.iter().map(|&i| i / 2).collect();
        clusters.sort_unstable();
        clusters.dedup();
        assert_eq!(clusters.len(), 3, "one pick per cluster, got {picked:?}");
    }

    #[test]
    fn clue_whole_pool_and_degenerate_fallback() {
        let emb = Array2::from_elem((4, 2), 1.0);
        let probs = Array2::from_elem((4, 3), 1.0 / 3.0);
        let s = open_state(4);
        let mut picked = clue_select(&emb.view(), &probs, 1.0, &s, 4, 0).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 2, 3]);
        let a = clue_select(&emb.view(), &probs, 1.0, &s, 2, 1).unwrap();
        let b = clue_select(&emb.view(), &probs, 1.0, &s, 2, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(clue_select(&emb.view(), &probs, 0.0, &s, 2, 1).is_err());
    }

    #[test]
    fn badge_prefers_the_distant_point() {
        // two coincident points and one far point: once the first pick
        // lands in the pair, the far point holds all the distance mass
        let emb = array![[0.0, 0.0], [0.0, 0.0], [100.0, 100.0]];
        let s = open_state(3);
        let mut pair_first = 0;
        for seed in 0..200 {
            let picked = badge_select(&emb.view(), &s, 2, seed).unwrap();
            if picked[0] == 0 || picked[0] == 1 {
                pair_first += 1;
                assert_eq!(picked[1], 2, "distant point must follow, got {picked:?}");
            }
        }
        assert!(pair_first > 50);
    }

    #[test]
    fn badge_full_pool_zero_fallback_and_determinism() {
        let emb = Array2::zeros((5, 4));
        let s = open_state(5);
        let mut picked = badge_select(&emb.view(), &s, 5, 3).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 2, 3, 4]);
        let a = badge_select(&emb.view(), &s, 3, 3).unwrap();
        let b = badge_select(&emb.view(), &s, 3, 3).unwrap();
        assert_eq!(a, b);
        let mut dedup = a.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 3, "picks must be distinct");
    }
}
