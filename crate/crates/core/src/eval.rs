//! Ranking metrics, negative sampling, ensembles and cross-validation splits.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfit::{self, MeanModel};
use crate::par;

/// Length of the precision and recall curves.
pub const CURVE_LEN: usize = 100;

/// Number of cross-validation folds.
pub const N_FOLDS: usize = 5;

/// Macro-averaged ranking metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub auc: f64,
    pub map100: f64,
    /// `precision_at[k-1]` is P@k.
    pub precision_at: Vec<f64>,
    pub recall_at: Vec<f64>,
    pub n_tasks_evaluated: usize,
    /// Tasks without a test positive outside the training positives.
    pub n_tasks_excluded: usize,
    /// Evaluated tasks left out of the AUC average because every candidate was relevant.
    pub n_tasks_excluded_auc: usize,
}

/// Fraction of correctly ordered positive/negative pairs, ties counting ½.
///
/// `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[i8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must have equal length");
    let n_pos = labels.iter().filter(|&&y| y > 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, with mid-ranks for ties.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] > 0).count() as u64;
        // ranks i+1..=j+1 averaged
        twice_rank_sum += pos_in_group * (i + j + 2) as u64;
        i = j + 1;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / 2.0 / (p * q) as f64)
}

/// `Σ_{l≤k} g_l / k`.
pub fn precision_at_k(sorted_labels: &[bool], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    hits(sorted_labels, k) as f64 / k as f64
}

/// `Σ_{l≤k} g_l / min(G_m, k)`; `None` when `G_m = 0`.
pub fn recall_at_k(sorted_labels: &[bool], k: usize, n_relevant: usize) -> Option<f64> {
    assert!(k >= 1, "k must be at least 1");
    (n_relevant > 0).then(|| hits(sorted_labels, k) as f64 / n_relevant.min(k) as f64)
}

/// `Σ_{l≤k} g_l·P@l / min(G_m, k)`; `None` when `G_m = 0`.
pub fn average_precision_at(sorted_labels: &[bool], k: usize, n_relevant: usize) -> Option<f64> {
    assert!(k >= 1, "k must be at least 1");
    if n_relevant == 0 {
        return None;
    }
    let mut found = 0usize;
    let mut acc = 0.0;
    for (l, &g) in sorted_labels.iter().take(k).enumerate() {
        if g {
            found += 1;
            acc += found as f64 / (l + 1) as f64;
        }
    }
    Some(acc / n_relevant.min(k) as f64)
}

fn hits(sorted_labels: &[bool], k: usize) -> usize {
    sorted_labels.iter().take(k).filter(|&&g| g).count()
}

/// Item indices ordered by descending score, ties to the lower index.
pub fn ranking_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

struct TaskMetrics {
    auc: Option<f64>,
    ap: f64,
    precision: Vec<f64>,
    recall: Vec<f64>,
}

fn task_metrics(scores: &[f64], relevant: &[bool]) -> TaskMetrics {
    let n_rel = relevant.iter().filter(|&&g| g).count();
    let order = ranking_order(scores);
    let sorted: Vec<bool> = order.iter().map(|&i| relevant[i]).collect();
    let ys: Vec<i8> = relevant.iter().map(|&g| if g { 1 } else { -1 }).collect();
    let mut precision = Vec::with_capacity(CURVE_LEN);
    let mut recall = Vec::with_capacity(CURVE_LEN);
    let mut found = 0usize;
    for k in 1..=CURVE_LEN {
        if sorted.get(k - 1).copied().unwrap_or(false) {
            found += 1;
        }
        precision.push(found as f64 / k as f64);
        recall.push(found as f64 / n_rel.min(k) as f64);
    }
    TaskMetrics {
        auc: auc(scores, &ys),
        ap: average_precision_at(&sorted, CURVE_LEN, n_rel).expect("task has relevant items"),
        precision,
        recall,
    }
}

/// Per-task metrics averaged over tasks.
///
/// For each row with test positives the candidates are all columns except
/// that row's training positives; the relevant items are the test positives
/// among them. Rows with no relevant candidate are excluded and counted.
pub fn evaluate(
    scores: &DMatrix<f64>,
    test_positives: &[(usize, usize)],
    train_positives: &[(usize, usize)],
    parallel: bool,
) -> Result<RankMetrics> {
    if test_positives.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let (rows, cols) = scores.shape();
    for &(m, n) in test_positives.iter().chain(train_positives) {
        if m >= rows || n >= cols {
            return Err(Error::invalid(format!(
                "cell ({m}, {n}) outside a {rows}x{cols} score matrix"
            )));
        }
    }
    let mut train: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(m, n) in train_positives {
        train.entry(m).or_default().insert(n);
    }
    let mut test: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(m, n) in test_positives {
        test.entry(m).or_default().insert(n);
    }
    let tasks: Vec<(usize, BTreeSet<usize>)> = test.into_iter().collect();
    let empty = BTreeSet::new();
    let per_task = par::map(&tasks, parallel, |(m, pos)| {
        let seen = train.get(m).unwrap_or(&empty);
        let candidates: Vec<usize> = (0..cols).filter(|n| !seen.contains(n)).collect();
        let relevant: Vec<bool> = candidates.iter().map(|n| pos.contains(n)).collect();
        if !relevant.iter().any(|&g| g) {
            return None;
        }
        let s: Vec<f64> = candidates.iter().map(|&n| scores[(*m, n)]).collect();
        Some(task_metrics(&s, &relevant))
    });
    let evaluated: Vec<&TaskMetrics> = per_task.iter().flatten().collect();
    let n_eval = evaluated.len();
    let n_excluded = per_task.len() - n_eval;
    if n_eval == 0 {
        return Err(Error::invalid(
            "no task has a test positive outside its training positives",
        ));
    }
    let aucs: Vec<f64> = evaluated.iter().filter_map(|t| t.auc).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| v.sum::<f64>() / n as f64;
    Ok(RankMetrics {
        auc: if aucs.is_empty() {
            f64::NAN
        } else {
            mean(&mut aucs.iter().copied(), aucs.len())
        },
        map100: mean(&mut evaluated.iter().map(|t| t.ap), n_eval),
        precision_at: (0..CURVE_LEN)
            .map(|k| mean(&mut evaluated.iter().map(|t| t.precision[k]), n_eval))
            .collect(),
        recall_at: (0..CURVE_LEN)
            .map(|k| mean(&mut evaluated.iter().map(|t| t.recall[k]), n_eval))
            .collect(),
        n_tasks_evaluated: n_eval,
        n_tasks_excluded: n_excluded,
        n_tasks_excluded_auc: n_eval - aucs.len(),
    })
}

/// `n_sets` samples of `per_set_size` cells, each drawn uniformly without
/// replacement from the cells not in `positives`. Each set is sorted.
pub fn sample_negatives(
    positives: &[(usize, usize)],
    n_rows: usize,
    n_cols: usize,
    n_sets: usize,
    per_set_size: usize,
    seed: u64,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let total = n_rows
        .checked_mul(n_cols)
        .ok_or_else(|| Error::invalid("grid too large"))?;
    let mut taken: Vec<usize> = positives
        .iter()
        .map(|&(m, n)| {
            if m >= n_rows || n >= n_cols {
                Err(Error::invalid(format!(
                    "positive ({m}, {n}) outside a {n_rows}x{n_cols} grid"
                )))
            } else {
                Ok(m * n_cols + n)
            }
        })
        .collect::<Result<_>>()?;
    taken.sort_unstable();
    taken.dedup();
    let free = total - taken.len();
    if per_set_size > free {
        return Err(Error::invalid(format!(
            "cannot sample {per_set_size} negatives from {free} unobserved cells"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::with_capacity(n_sets);
    for _ in 0..n_sets {
        let mut cells: Vec<(usize, usize)> = index::sample(&mut rng, free, per_set_size)
            .into_iter()
            .map(|k| {
                let lin = kth_free(&taken, k);
                (lin / n_cols, lin % n_cols)
            })
            .collect();
        cells.sort_unstable();
        sets.push(cells);
    }
    Ok(sets)
}

/// The `k`-th (0-based) linear index not present in the sorted `taken`.
fn kth_free(taken: &[usize], k: usize) -> usize {
    let mut c = k;
    loop {
        let below = taken.partition_point(|&t| t <= c);
        if k + below == c {
            return c;
        }
        c = k + below;
    }
}

/// Mean of the models' predictions without row biases.
pub fn ensemble_scores(models: &[MeanModel], queries: &[(usize, usize)]) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one model"))?;
    let mut acc = meanfit::predict(first, queries, false)?;
    for model in &models[1..] {
        for (a, p) in acc.iter_mut().zip(meanfit::predict(model, queries, false)?) {
            *a += p;
        }
    }
    let k = models.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Dense mean score matrix of an ensemble, without row biases.
pub fn ensemble_dense(models: &[MeanModel]) -> Result<DMatrix<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one model"))?;
    let mut acc = first.dense_scores();
    for model in &models[1..] {
        if (model.n_rows(), model.n_cols()) != (first.n_rows(), first.n_cols()) {
            return Err(Error::shape("ensemble members cover different grids"));
        }
        acc += model.dense_scores();
    }
    Ok(acc / models.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Entrywise,
    Rowwise,
}

/// Five disjoint folds of observation positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    /// Positions into the observation list, ascending within each fold.
    pub folds: Vec<Vec<usize>>,
    /// Rows owned by each fold (rowwise mode only).
    pub fold_rows: Option<Vec<Vec<usize>>>,
    pub seed: u64,
}

impl SplitPlan {
    /// `(train, test)` positions for `fold`.
    pub fn train_test(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let test = self.folds[fold].clone();
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        train.sort_unstable();
        (train, test)
    }
}

/// Splits observations (given by their row indices) into five folds.
///
/// Entrywise shuffles the observations; rowwise shuffles the distinct rows and
/// sends every observation of a row to that row's fold.
pub fn make_splits(obs_rows: &[usize], mode: SplitMode, seed: u64) -> Result<SplitPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deal = |items: &mut Vec<usize>, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        items.shuffle(rng);
        let mut folds = vec![Vec::new(); N_FOLDS];
        for (i, &v) in items.iter().enumerate() {
            folds[i % N_FOLDS].push(v);
        }
        folds.iter_mut().for_each(|f| f.sort_unstable());
        folds
    };
    match mode {
        SplitMode::Entrywise => {
            if obs_rows.len() < N_FOLDS {
                return Err(Error::invalid(format!(
                    "entrywise splitting needs at least {N_FOLDS} observations, got {}",
                    obs_rows.len()
                )));
            }
            let mut positions: Vec<usize> = (0..obs_rows.len()).collect();
            Ok(SplitPlan {
                mode,
                folds: deal(&mut positions, &mut rng),
                fold_rows: None,
                seed,
            })
        }
        SplitMode::Rowwise => {
            let mut rows: Vec<usize> = obs_rows.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            if rows.len() < N_FOLDS {
                return Err(Error::invalid(format!(
                    "rowwise splitting needs at least {N_FOLDS} distinct rows, got {}",
                    rows.len()
                )));
            }
            let fold_rows = deal(&mut rows, &mut rng);
            let owner: BTreeMap<usize, usize> = fold_rows
                .iter()
                .enumerate()
                .flat_map(|(f, rs)| rs.iter().map(move |&r| (r, f)))
                .collect();
            let mut folds = vec![Vec::new(); N_FOLDS];
            for (i, r) in obs_rows.iter().enumerate() {
                folds[owner[r]].push(i);
            }
            Ok(SplitPlan {
                mode,
                folds,
                fold_rows: Some(fold_rows),
                seed,
            })
        }
    }
}

/// Mean validation MAP@100 of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub alpha: f64,
    /// Regularization level (λ or its relative scale `s`).
    pub lambda: f64,
    pub map100: f64,
}

/// The cell with the largest MAP@100; ties go to larger `λ`, then larger `α`.
pub fn select_model(cells: &[GridResult]) -> Result<(f64, f64)> {
    cells
        .iter()
        .filter(|c| !c.map100.is_nan())
        .max_by(|a, b| {
            a.map100
                .total_cmp(&b.map100)
                .then(a.lambda.total_cmp(&b.lambda))
                .then(a.alpha.total_cmp(&b.alpha))
        })
        .map(|c| (c.alpha, c.lambda))
        .ok_or_else(|| Error::invalid("no grid results to select from"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelBasis;
    use rand::Rng;
    use std::sync::Arc;

    fn auc_pairs(scores: &[f64], labels: &[i8]) -> Option<f64> {
        let (mut good, mut ties, mut total) = (0u64, 0u64, 0u64);
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi > 0 && yj < 0 {
                    total += 1;
                    if scores[i] > scores[j] {
                        good += 1;
                    } else if scores[i] == scores[j] {
                        ties += 1;
                    }
                }
            }
        }
        (total > 0).then(|| (good as f64 + 0.5 * ties as f64) / total as f64)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[3.0, 2.0, 1.0], &[1, 1, -1]), Some(1.0));
        assert_eq!(auc(&[1.0, 1.0, 1.0, 1.0], &[1, -1, 1, -1]), Some(0.5));
        assert_eq!(auc(&[3.0, 1.0, 2.0], &[1, -1, 1]), Some(1.0));
        assert_eq!(auc(&[3.0, 1.0], &[1, 1]), None);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = rng.random_range(1..50);
            // coarse scores so that ties are frequent
            let s: Vec<f64> = (0..d).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
            let y: Vec<i8> = (0..d).map(|_| if rng.random_bool(0.4) { 1 } else { -1 }).collect();
            assert_eq!(auc(&s, &y), auc_pairs(&s, &y));
        }
    }

    #[test]
    fn cutoff_metric_examples() {
        let g = [true, false, true, false];
        assert_eq!(precision_at_k(&g, 2), 0.5);
        assert_eq!(recall_at_k(&[true, true, false], 2, 5), Some(1.0));
        assert_eq!(precision_at_k(&[false, false, true], 2), 0.0);
        assert_eq!(average_precision_at(&[false, false, true], 2, 1), Some(0.0));
        assert_eq!(recall_at_k(&g, 3, 0), None);
        // AP@4 = (1/1 + 2/3) / min(2, 4)
        assert!((average_precision_at(&g, 4, 2).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn recall_curve_is_monotone_and_ap_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let d = rng.random_range(1..150);
            let g: Vec<bool> = (0..d).map(|_| rng.random_bool(0.2)).collect();
            let n_rel = g.iter().filter(|&&v| v).count();
            if n_rel == 0 {
                continue;
            }
            let mut prev = 0.0;
            for k in 1..=100 {
                // the min(G, k) denominator only stops moving once k ≥ G
                let r = recall_at_k(&g, k, n_rel).unwrap();
                if k > n_rel {
                    assert!(r >= prev);
                }
                prev = r;
                let count = precision_at_k(&g, k) * k as f64;
                assert!((count - count.round()).abs() < 1e-9);
                let ap = average_precision_at(&g, k, n_rel).unwrap();
                assert!((0.0..=1.0 + 1e-12).contains(&ap));
                let top_all = g.iter().take(n_rel.min(k)).all(|&v| v);
                assert_eq!(top_all, (ap - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_scores_give_perfect_auc() {
        let z = DMatrix::from_fn(4, 10, |m, n| ((m * 7 + n * 3) % 10) as f64);
        let mut test = Vec::new();
        for m in 0..4 {
            test.extend((0..10).filter(|&n| z[(m, n)] >= 8.0).map(|n| (m, n)));
        }
        let metrics = evaluate(&z, &test, &[], true).unwrap();
        assert_eq!(metrics.auc, 1.0);
        assert_eq!(metrics.n_tasks_evaluated, 4);
        assert_eq!(metrics.map100, 1.0);
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = DMatrix::from_fn(200, 40, |_, _| rng.random::<f64>());
        let test: Vec<(usize, usize)> = (0..200)
            .flat_map(|m| (0..40).filter(move |&n| n % 2 == (m % 2)).map(move |n| (m, n)))
            .collect();
        let metrics = evaluate(&s, &test, &[], false).unwrap();
        assert!((metrics.auc - 0.5).abs() < 0.05, "auc {}", metrics.auc);
    }

    #[test]
    fn train_positives_are_filtered_and_tasks_excluded() {
        let s = DMatrix::from_fn(2, 5, |_, n| -(n as f64));
        // row 0: its only test positive also appears in training
        let test = vec![(0, 1), (1, 2)];
        let train = vec![(0, 1), (1, 0)];
        let m = evaluate(&s, &test, &train, false).unwrap();
        assert_eq!(m.n_tasks_evaluated, 1);
        assert_eq!(m.n_tasks_excluded, 1);
        // row 1 candidates 1,2,3,4 by score; item 2 ranks second
        assert_eq!(m.precision_at[0], 0.0);
        assert_eq!(m.precision_at[1], 0.5);
        assert_eq!(m.auc, 2.0 / 3.0);
        assert!(evaluate(&s, &[], &train, false).is_err());
    }

    #[test]
    fn metrics_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = DMatrix::from_fn(10, 30, |_, _| rng.random_range(-2.0..2.0));
        let t = s.map(|v: f64| v.exp() * 3.0 + 1.0);
        let test: Vec<(usize, usize)> = (0..10).flat_map(|m| [(m, m), (m, m + 10)]).collect();
        let train: Vec<(usize, usize)> = (0..10).map(|m| (m, 29 - m)).collect();
        assert_eq!(
            evaluate(&s, &test, &train, false).unwrap(),
            evaluate(&t, &test, &train, false).unwrap()
        );
    }

    #[test]
    fn negative_sampling_rules() {
        let all: Vec<(usize, usize)> = (0..2).flat_map(|m| (0..2).map(move |n| (m, n))).collect();
        assert!(sample_negatives(&all, 2, 2, 1, 1, 0).is_err());
        let pos = vec![(0, 0), (1, 1)];
        let a = sample_negatives(&pos, 3, 3, 10, 2, 5).unwrap();
        assert_eq!(a, sample_negatives(&pos, 3, 3, 10, 2, 5).unwrap());
        assert_eq!(a.len(), 10);
        for set in &a {
            assert_eq!(set.len(), 2);
            assert!(set.iter().all(|c| !pos.contains(c)));
        }
    }

    #[test]
    fn negative_sampling_is_uniform() {
        let pos: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let sets = sample_negatives(&pos, 10, 10, 10_000, 1, 6).unwrap();
        let mut counts = [[0usize; 10]; 10];
        for s in &sets {
            counts[s[0].0][s[0].1] += 1;
        }
        let p: f64 = 1.0 / 90.0;
        let expected = 10_000.0 * p;
        let sd = (10_000.0 * p * (1.0 - p)).sqrt();
        for m in 0..10 {
            for n in 0..10 {
                if m == n {
                    assert_eq!(counts[m][n], 0);
                } else {
                    // a 3σ band per cell would fail by chance on ~25% of seeds over 90 cells
                    assert!(
                        (counts[m][n] as f64 - expected).abs() < 4.0 * sd,
                        "cell ({m},{n}): {}",
                        counts[m][n]
                    );
                }
            }
        }
    }

    #[test]
    fn kth_free_skips_taken() {
        let taken = [0, 2, 3, 7];
        let free: Vec<usize> = (0..6).map(|k| kth_free(&taken, k)).collect();
        assert_eq!(free, vec![1, 4, 5, 6, 8, 9]);
    }

    #[test]
    fn ensembles_average() {
        let gm = Arc::new(KernelBasis::identity(2));
        let gn = Arc::new(KernelBasis::identity(3));
        let b = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let bias = nalgebra::DVector::from_vec(vec![10.0, 20.0]);
        let plus = MeanModel::new(b.clone(), gm.clone(), gn.clone(), bias.clone()).unwrap();
        let minus = MeanModel::new(-b, gm, gn, bias).unwrap();
        let q = vec![(0, 0), (1, 1), (1, 2)];
        let single = ensemble_scores(std::slice::from_ref(&plus), &q).unwrap();
        assert_eq!(single, vec![1.0, 3.0, 1.0]);
        assert_eq!(ensemble_scores(&[plus.clone(), plus.clone()], &q).unwrap(), single);
        assert_eq!(
            ensemble_scores(&[plus.clone(), minus.clone()], &q).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(ensemble_dense(&[plus, minus]).unwrap(), DMatrix::zeros(2, 3));
        assert!(ensemble_scores(&[], &q).is_err());
    }

    #[test]
    fn splits() {
        let rows: Vec<usize> = (0..10).collect();
        let plan = make_splits(&rows, SplitMode::Entrywise, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 2));
        assert_eq!(plan, make_splits(&rows, SplitMode::Entrywise, 1).unwrap());
        let mut all: Vec<usize> = plan.folds.concat();
        all.sort_unstable();
        assert_eq!(all, rows);
        assert!(make_splits(&rows[..4], SplitMode::Entrywise, 1).is_err());

        let obs_rows = vec![0, 0, 1, 2, 2, 2, 3, 4, 5, 5, 6];
        let plan = make_splits(&obs_rows, SplitMode::Rowwise, 2).unwrap();
        for f in 0..N_FOLDS {
            let (train, test) = plan.train_test(f);
            let test_rows: BTreeSet<usize> = test.iter().map(|&i| obs_rows[i]).collect();
            assert!(train.iter().all(|&i| !test_rows.contains(&obs_rows[i])));
            assert_eq!(train.len() + test.len(), obs_rows.len());
        }
        assert!(make_splits(&[0, 0, 1, 2, 3], SplitMode::Rowwise, 1).is_err());
    }

    #[test]
    fn model_selection_rules() {
        let one = [GridResult {
            alpha: 0.5,
            lambda: 0.1,
            map100: 0.3,
        }];
        assert_eq!(select_model(&one).unwrap(), (0.5, 0.1));
        let tied = [
            GridResult {
                alpha: 1.0,
                lambda: 0.1,
                map100: 0.3,
            },
            GridResult {
                alpha: 0.0,
                lambda: 0.5,
                map100: 0.3,
            },
            GridResult {
                alpha: 0.6,
                lambda: 0.5,
                map100: 0.3,
            },
        ];
        assert_eq!(select_model(&tied).unwrap(), (0.6, 0.5));
        let dominant = [
            GridResult {
                alpha: 1.0,
                lambda: 0.1,
                map100: 0.3,
            },
            GridResult {
                alpha: 0.0,
                lambda: 0.01,
                map100: 0.4,
            },
        ];
        assert_eq!(select_model(&dominant).unwrap(), (0.0, 0.01));
        assert!(select_model(&[]).is_err());
    }
}
