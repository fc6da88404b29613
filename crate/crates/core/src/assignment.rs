//! Group decoding as a rectangular linear sum assignment.

use serde::{Deserialize, Serialize};

use crate::corpus::IdiomId;
use crate::error::{Error, Result};
use crate::training::PROB_FLOOR;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Chosen column of each row; pairwise distinct.
    pub columns: Vec<usize>,
    pub total: f64,
}

/// Minimum-cost assignment of every row to a distinct column (Kuhn–Munkres).
///
/// A rectangular `m × n` matrix with `m < n` is padded to square with
/// `(max entry + 1) · m` rows. Among optimal assignments the scan order decides.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Assignment> {
    let m = cost.len();
    let n = cost.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(Error::Infeasible { rows: m, cols: n });
    }
    if let Some(r) = cost.iter().find(|r| r.len() != n) {
        return Err(Error::shape("solve_assignment", &[m, n], &[r.len()]));
    }
    if cost.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::numerical("solve_assignment", "non-finite cost"));
    }
    if m > n {
        return Err(Error::Infeasible { rows: m, cols: n });
    }
    let max = cost.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = (max + 1.0) * m as f64;
    let at = |i: usize, j: usize| if i < m { cost[i][j] } else { pad };

    // Shortest augmenting paths with row/column potentials, 1-based with a sentinel column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut columns = vec![0; m];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= m {
            columns[p[j] - 1] = j - 1;
        }
    }
    let total = columns.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment { columns, total })
}

/// One blank's distribution over its own candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct BlankScores<'a> {
    pub candidates: &'a [IdiomId],
    pub probs: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDecoding {
    /// Chosen idiom of each blank, in blank order.
    pub choices: Vec<IdiomId>,
    /// Index of each choice within the group candidate list.
    pub columns: Vec<usize>,
    pub log_likelihood: f64,
}

/// Log probability matrix of the blanks, columns in `group` order.
pub fn log_prob_matrix(group: &[IdiomId], blanks: &[BlankScores<'_>]) -> Result<Vec<Vec<f64>>> {
    blanks
        .iter()
        .enumerate()
        .map(|(b, s)| {
            if s.candidates.len() != group.len() || s.probs.len() != group.len() {
                return Err(Error::Group(format!(
                    "blank {b} has {} candidates, the group has {}",
                    s.candidates.len(),
                    group.len()
                )));
            }
            let sum: f64 = s.probs.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || s.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Group(format!("blank {b} scores are not a distribution")));
            }
            group
                .iter()
                .map(|c| {
                    let k = s.candidates.iter().position(|x| x == c).ok_or_else(|| {
                        Error::Group(format!("blank {b} lacks group candidate {c}"))
                    })?;
                    Ok(s.probs[k].max(PROB_FLOOR).ln())
                })
                .collect()
        })
        .collect()
}

/// Jointly picks distinct candidates for the blanks of a group, maximizing total log-likelihood.
pub fn decode_group(group: &[IdiomId], blanks: &[BlankScores<'_>]) -> Result<GroupDecoding> {
    let lp = log_prob_matrix(group, blanks)?;
    let cost: Vec<Vec<f64>> = lp.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
    let a = solve_assignment(&cost)?;
    Ok(GroupDecoding {
        choices: a.columns.iter().map(|&j| group[j]).collect(),
        log_likelihood: a.columns.iter().enumerate().map(|(i, &j)| lp[i][j]).sum(),
        columns: a.columns,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum over all injections of rows into columns.
    pub(crate) fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn small_examples() {
        let a = solve_assignment(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!((a.columns, a.total), (vec![0, 1], 2.0));
        let a = solve_assignment(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!((a.columns, a.total), (vec![1, 0], 3.0));
        let a = solve_assignment(&[vec![7.0]]).unwrap();
        assert_eq!((a.columns, a.total), (vec![0], 7.0));
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(matches!(
            solve_assignment(&[vec![1.0], vec![2.0]]),
            Err(Error::Infeasible { rows: 2, cols: 1 })
        ));
        assert!(solve_assignment(&[vec![1.0, f64::NAN]]).is_err());
        assert!(solve_assignment(&[]).is_err());
        assert!(solve_assignment(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    fn ids(n: usize) -> Vec<IdiomId> {
        (0..n).map(IdiomId).collect()
    }

    #[test]
    fn decode_examples() {
        let g = ids(2);
        let rows = [[0.9, 0.1], [0.8, 0.2]];
        let blanks: Vec<_> = rows.iter().map(|r| BlankScores { candidates: &g, probs: r }).collect();
        let d = decode_group(&g, &blanks).unwrap();
        assert_eq!(d.columns, vec![0, 1]);
        assert!((d.log_likelihood - (0.9f64.ln() + 0.2f64.ln())).abs() < 1e-12);

        let g = ids(3);
        let rows = [[0.98, 0.01, 0.01], [0.01, 0.98, 0.01]];
        let blanks: Vec<_> = rows.iter().map(|r| BlankScores { candidates: &g, probs: r }).collect();
        assert_eq!(decode_group(&g, &blanks).unwrap().columns, vec![0, 1]);

        let row = [0.1, 0.3, 0.6];
        let d = decode_group(&g, &[BlankScores { candidates: &g, probs: &row }]).unwrap();
        assert_eq!(d.columns, vec![2]);
    }

    #[test]
    fn decode_aligns_reordered_candidates() {
        let g = ids(2);
        let rev = [IdiomId(1), IdiomId(0)];
        let d = decode_group(
            &g,
            &[
                BlankScores { candidates: &g, probs: &[0.6, 0.4] },
                BlankScores { candidates: &rev, probs: &[0.3, 0.7] },
            ],
        )
        .unwrap();
        assert_eq!(d.choices, vec![IdiomId(1), IdiomId(0)]);
        let other = [IdiomId(0), IdiomId(5)];
        assert!(matches!(
            decode_group(&g, &[BlankScores { candidates: &other, probs: &[0.5, 0.5] }]),
            Err(Error::Group(_))
        ));
        assert!(decode_group(&g, &[BlankScores { candidates: &g, probs: &[0.5, 0.6] }]).is_err());
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=5, 0usize..=2).prop_flat_map(|(m, extra)| {
            prop::collection::vec(prop::collection::vec(-20i32..20, m + extra), m)
                .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(cost in matrix()) {
            let a = solve_assignment(&cost).unwrap();
            prop_assert_eq!(a.total, brute_force(&cost));
            let mut cols = a.columns.clone();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(cols.len(), cost.len());
        }

        #[test]
        fn constant_shift_adds_m_c(cost in matrix(), c in -10i32..10) {
            let c = f64::from(c);
            let shifted: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|x| x + c).collect()).collect();
            let a = solve_assignment(&cost).unwrap();
            let b = solve_assignment(&shifted).unwrap();
            prop_assert_eq!(b.total, a.total + c * cost.len() as f64);
            // The shifted optimum is still optimal for the original matrix.
            let back: f64 = b.columns.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            prop_assert_eq!(back, a.total);
        }

        #[test]
        fn decoding_beats_every_distinct_selection(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..=3)) {
            let g = ids(3);
            let rows: Vec<Vec<f64>> = raw.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect() }).collect();
            let blanks: Vec<_> = rows.iter().map(|r| BlankScores { candidates: &g, probs: r }).collect();
            let d = decode_group(&g, &blanks).unwrap();
            let lp: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| -x.ln()).collect()).collect();
            prop_assert!((-d.log_likelihood - brute_force(&lp)).abs() <= 1e-9);
        }
    }
}
