//! Detection metrics. Fakes are the positive class throughout.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{param_err, shape_err};
use crate::{rng, Error, Result};

/// Detector scores with their labels (1 = fake) and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
    ids: Vec<String>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, ids: Vec<String>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != ids.len() {
            return Err(shape_err!(
                "{} scores, {} labels, {} ids",
                scores.len(),
                labels.len(),
                ids.len()
            ));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(param_err!("scores must lie in [0, 1]"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(param_err!("labels must be 0 or 1"));
        }
        Ok(Self { scores, labels, ids })
    }

    /// Zero-padded positional ids, so ties break in input order.
    pub fn unnamed(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| alloc::format!("{i:08}")).collect();
        Self::new(scores, labels, ids)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Fraction of samples whose decision `score >= threshold` matches the label.
pub fn accuracy(set: &ScoredSet, threshold: f64) -> Result<f64> {
    if set.is_empty() {
        return Err(param_err!("accuracy of an empty set"));
    }
    let hits = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// Non-interpolated average precision: the mean, over positives, of the
/// precision at each positive's rank. Ranking is by descending score with
/// ties broken by ascending id.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let positives = set.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision without positives".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .total_cmp(&set.scores[a])
            .then_with(|| set.ids[a].cmp(&set.ids[b]))
    });
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if set.labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// `(ACC at 0.5, AP)`.
pub fn acc_ap(set: &ScoredSet) -> Result<(f64, f64)> {
    Ok((accuracy(set, 0.5)?, average_precision(set)?))
}

/// One evaluation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub train_tag: String,
    pub test_tag: String,
    pub acc: f64,
    pub ap: f64,
}

/// A complete train-tag x test-tag grid of results.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMatrix {
    train_tags: Vec<String>,
    test_tags: Vec<String>,
    cells: Vec<Cell>,
}

impl EvalMatrix {
    /// Cells must cover the grid exactly; they are stored row-major in the
    /// given tag orders whatever order they arrive in.
    pub fn new(train_tags: Vec<String>, test_tags: Vec<String>, cells: Vec<Cell>) -> Result<Self> {
        let mut grid: Vec<Option<Cell>> = (0..train_tags.len() * test_tags.len()).map(|_| None).collect();
        for cell in cells {
            let r = train_tags.iter().position(|t| *t == cell.train_tag);
            let c = test_tags.iter().position(|t| *t == cell.test_tag);
            let (Some(r), Some(c)) = (r, c) else {
                return Err(Error::Data(alloc::format!(
                    "cell {}/{} outside the grid",
                    cell.train_tag, cell.test_tag
                )));
            };
            let slot = &mut grid[r * test_tags.len() + c];
            if slot.is_some() {
                return Err(Error::Data(alloc::format!(
                    "duplicate cell {}/{}",
                    cell.train_tag, cell.test_tag
                )));
            }
            *slot = Some(cell);
        }
        let cells = grid
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Data("incomplete evaluation grid".into()))?;
        Ok(Self {
            train_tags,
            test_tags,
            cells,
        })
    }

    pub fn train_tags(&self) -> &[String] {
        &self.train_tags
    }

    pub fn test_tags(&self) -> &[String] {
        &self.test_tags
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn get(&self, train_tag: &str, test_tag: &str) -> Option<&Cell> {
        let r = self.train_tags.iter().position(|t| t == train_tag)?;
        let c = self.test_tags.iter().position(|t| t == test_tag)?;
        Some(&self.cells[r * self.test_tags.len() + c])
    }

    /// Mean `(acc, ap)` across a detector's row.
    pub fn row_mean(&self, train_tag: &str) -> Option<(f64, f64)> {
        let r = self.train_tags.iter().position(|t| t == train_tag)?;
        let row = &self.cells[r * self.test_tags.len()..(r + 1) * self.test_tags.len()];
        let n = row.len() as f64;
        Some((
            row.iter().map(|c| c.acc).sum::<f64>() / n,
            row.iter().map(|c| c.ap).sum::<f64>() / n,
        ))
    }

    /// Mean `(acc, ap)` over every cell.
    pub fn mean(&self) -> (f64, f64) {
        let n = self.cells.len() as f64;
        (
            self.cells.iter().map(|c| c.acc).sum::<f64>() / n,
            self.cells.iter().map(|c| c.ap).sum::<f64>() / n,
        )
    }
}

/// Fraction of `resamples` bootstrap replicates in which
/// `mean(a*) - mean(b*)` is positive, resampling each population
/// independently with replacement.
pub fn bootstrap_positive_fraction(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    if a.is_empty() || b.is_empty() || resamples == 0 {
        return Err(param_err!("bootstrap needs nonempty samples and resamples"));
    }
    let mut r = rng::seeded(seed);
    let mut positive = 0usize;
    for _ in 0..resamples {
        let ma = (0..a.len()).map(|_| a[r.random_range(0..a.len())]).sum::<f64>() / a.len() as f64;
        let mb = (0..b.len()).map(|_| b[r.random_range(0..b.len())]).sum::<f64>() / b.len() as f64;
        if ma > mb {
            positive += 1;
        }
    }
    Ok(positive as f64 / resamples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::unnamed(scores.to_vec(), labels.to_vec()).unwrap()
    }

    /// Precision of every prefix that ends on a positive, computed from
    /// scratch per prefix.
    fn brute_ap(s: &ScoredSet) -> f64 {
        let n = s.len();
        let mut idx: Vec<usize> = (0..n).collect();
        // selection sort with the documented ordering
        for i in 0..n {
            let mut best = i;
            for j in i + 1..n {
                let (a, b) = (idx[j], idx[best]);
                if s.scores[a] > s.scores[b] || (s.scores[a] == s.scores[b] && s.ids[a] < s.ids[b]) {
                    best = j;
                }
            }
            idx.swap(i, best);
        }
        let p = s.labels.iter().filter(|&&l| l == 1).count();
        let mut sum = 0.0;
        for k in 1..=n {
            if s.labels[idx[k - 1]] == 1 {
                let tp = idx[..k].iter().filter(|&&i| s.labels[i] == 1).count();
                sum += tp as f64 / k as f64;
            }
        }
        sum / p as f64
    }

    #[test]
    fn accuracy_hand_cases() {
        assert_eq!(accuracy(&set(&[0.9, 0.1], &[1, 0]), 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&set(&[0.9, 0.1], &[0, 1]), 0.5).unwrap(), 0.0);
        assert_eq!(accuracy(&set(&[0.6, 0.4, 0.7, 0.2], &[1, 1, 0, 0]), 0.5).unwrap(), 0.5);
        assert_eq!(accuracy(&set(&[0.5], &[1]), 0.5).unwrap(), 1.0);
        assert!(accuracy(&set(&[], &[]), 0.5).is_err());
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&set(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1])).unwrap(), 0.25);
        // ranks 1 and 3: (1 + 2/3) / 2
        let ap = average_precision(&set(&[0.9, 0.8, 0.7], &[1, 0, 1])).unwrap();
        assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
        assert!(matches!(
            average_precision(&set(&[0.3, 0.2], &[0, 0])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ties_are_broken_by_id() {
        let a = ScoredSet::new(vec![0.5, 0.5], vec![0, 1], vec!["a".into(), "b".into()]).unwrap();
        let b = ScoredSet::new(vec![0.5, 0.5], vec![0, 1], vec!["b".into(), "a".into()]).unwrap();
        assert_eq!(average_precision(&a).unwrap(), 0.5);
        assert_eq!(average_precision(&b).unwrap(), 1.0);
    }

    #[test]
    fn invalid_sets_are_rejected() {
        assert!(ScoredSet::unnamed(vec![1.2], vec![1]).is_err());
        assert!(ScoredSet::unnamed(vec![0.2], vec![2]).is_err());
        assert!(ScoredSet::unnamed(vec![0.2, 0.3], vec![1]).is_err());
    }

    #[test]
    fn ap_matches_brute_force_on_every_small_label_pattern() {
        let mut r = rng::seeded(1);
        use rand::Rng;
        for n in 1..=8usize {
            for pattern in 1u32..(1 << n) {
                let labels: Vec<u8> = (0..n).map(|i| ((pattern >> i) & 1) as u8).collect();
                // coarse scores so ties occur
                let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64 / 4.0).collect();
                let s = set(&scores, &labels);
                assert_eq!(average_precision(&s).unwrap(), brute_ap(&s));
            }
        }
    }

    #[test]
    fn matrix_orders_cells_and_rejects_gaps() {
        let tags = || vec![String::from("a"), String::from("b")];
        let cell = |r: &str, c: &str, acc| Cell {
            train_tag: r.into(),
            test_tag: c.into(),
            acc,
            ap: 1.0,
        };
        let m = EvalMatrix::new(
            tags(),
            tags(),
            vec![cell("b", "b", 0.4), cell("a", "b", 0.2), cell("a", "a", 0.1), cell("b", "a", 0.3)],
        )
        .unwrap();
        let accs: Vec<f64> = m.cells().iter().map(|c| c.acc).collect();
        assert_eq!(accs, vec![0.1, 0.2, 0.3, 0.4]);
        assert!((m.row_mean("b").unwrap().0 - 0.35).abs() < 1e-15);
        assert_eq!(m.get("b", "a").unwrap().acc, 0.3);
        assert!(EvalMatrix::new(tags(), tags(), vec![cell("a", "a", 0.1)]).is_err());
        assert!(EvalMatrix::new(tags(), tags(), vec![cell("a", "c", 0.1)]).is_err());
    }

    #[test]
    fn bootstrap_detects_a_clear_shift() {
        let a: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 0.01).collect();
        let b: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        assert_eq!(bootstrap_positive_fraction(&a, &b, 200, 3).unwrap(), 1.0);
        assert_eq!(bootstrap_positive_fraction(&b, &a, 200, 3).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_rank_only(
            raw in proptest::collection::vec((0.0f64..1.0, 0u8..2), 1..40),
            power in 0.2f64..5.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            labels[0] = 1;
            let s = set(&scores, &labels);
            let ap = average_precision(&s).unwrap();
            let acc = accuracy(&s, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap) && (0.0..=1.0).contains(&acc));
            // x^p is strictly increasing on [0, 1]
            let warped = set(&scores.iter().map(|v| v.powf(power)).collect::<Vec<_>>(), &labels);
            prop_assert_eq!(average_precision(&warped).unwrap(), ap);
        }

        #[test]
        fn accuracy_ignores_joint_permutation(
            raw in proptest::collection::vec((0.0f64..1.0, 0u8..2), 1..40),
            seed in any::<u64>(),
        ) {
            let s = set(&raw.iter().map(|r| r.0).collect::<Vec<_>>(), &raw.iter().map(|r| r.1).collect::<Vec<_>>());
            let perm = rng::permutation(&mut rng::seeded(seed), s.len());
            let p = ScoredSet::new(
                perm.iter().map(|&i| s.scores[i]).collect(),
                perm.iter().map(|&i| s.labels[i]).collect(),
                perm.iter().map(|&i| s.ids[i].clone()).collect(),
            ).unwrap();
            prop_assert_eq!(accuracy(&p, 0.5).unwrap(), accuracy(&s, 0.5).unwrap());
            if s.labels.contains(&1) {
                prop_assert_eq!(average_precision(&p).unwrap(), average_precision(&s).unwrap());
            }
        }
    }
}
