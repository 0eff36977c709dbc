//! Finite Markov chains: reachability, closed classes, stationary laws and
//! long-run average cost.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Chains up to this size are solved by dense elimination.
const DENSE_LIMIT: usize = 600;
const POWER_TOL: f64 = 1e-14;
const POWER_MAX_ITERS: usize = 2_000_000;
const BALANCE_TOL: f64 = 1e-10;

/// Row-compressed transition matrix.
#[derive(Debug, Clone, Default)]
pub struct SparseChain {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    probs: Vec<f64>,
}

impl SparseChain {
    pub fn new() -> Self {
        SparseChain { offsets: vec![0], cols: Vec::new(), probs: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<(usize, f64)>]) -> Self {
        let mut c = Self::new();
        for r in rows {
            c.push_row(r.iter().copied());
        }
        c
    }

    pub fn push_row(&mut self, row: impl IntoIterator<Item = (usize, f64)>) {
        for (j, p) in row {
            self.cols.push(j as u32);
            self.probs.push(p);
        }
        self.offsets.push(self.cols.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.cols[r.clone()].iter().zip(&self.probs[r]).map(|(&j, &p)| (j as usize, p))
    }

    /// Restriction to `states`, which must be closed under transitions.
    pub fn restrict(&self, states: &[usize]) -> SparseChain {
        let pos: HashMap<usize, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut c = SparseChain::new();
        for &s in states {
            c.push_row(self.row(s).filter_map(|(j, p)| pos.get(&j).map(|&i| (i, p))));
        }
        c
    }
}

/// Strongly connected components that no transition leaves.
pub fn closed_classes(chain: &SparseChain) -> Vec<Vec<usize>> {
    let comps = strongly_connected(chain);
    let mut comp_of = vec![0usize; chain.len()];
    for (c, members) in comps.iter().enumerate() {
        for &s in members {
            comp_of[s] = c;
        }
    }
    let mut out: Vec<Vec<usize>> = comps
        .into_iter()
        .enumerate()
        .filter(|(c, members)| members.iter().all(|&s| chain.row(s).all(|(j, p)| p <= 0.0 || comp_of[j] == *c)))
        .map(|(_, mut m)| {
            m.sort_unstable();
            m
        })
        .collect();
    out.sort_by_key(|m| m[0]);
    out
}

/// Iterative Tarjan.
fn strongly_connected(chain: &SparseChain) -> Vec<Vec<usize>> {
    let n = chain.len();
    const UNSEEN: usize = usize::MAX;
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut next = 0usize;
    let mut work: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        work.push((root, chain.offsets[root]));
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut edge)) = work.last_mut() {
            if *edge < chain.offsets[v + 1] {
                let w = chain.cols[*edge] as usize;
                let p = chain.probs[*edge];
                *edge += 1;
                if p <= 0.0 {
                    continue;
                }
                if index[w] == UNSEEN {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, chain.offsets[w]));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                work.pop();
                if let Some(&(parent, _)) = work.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comps.push(comp);
                }
            }
        }
    }
    comps
}

/// Stationary distribution of an irreducible chain.
///
/// Small chains are solved directly from the balance equations; larger ones
/// by power iteration on the lazy chain `(P + I) / 2`, which also handles
/// periodic classes.
pub fn stationary_distribution(chain: &SparseChain) -> Result<Vec<f64>> {
    let n = chain.len();
    if n == 0 {
        return Err(Error::SingularSystem("empty chain".into()));
    }
    let pi = if n <= DENSE_LIMIT { dense_balance(chain)? } else { lazy_power(chain)? };
    let residual = balance_residual(chain, &pi);
    if residual > BALANCE_TOL {
        return Err(Error::SingularSystem(format!("balance residual {residual:e} after solve")));
    }
    Ok(pi)
}

fn balance_residual(chain: &SparseChain, pi: &[f64]) -> f64 {
    let mut next = vec![0.0; pi.len()];
    for (i, &w) in pi.iter().enumerate() {
        for (j, p) in chain.row(i) {
            next[j] += w * p;
        }
    }
    next.iter().zip(pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn dense_balance(chain: &SparseChain) -> Result<Vec<f64>> {
    let n = chain.len();
    // Rows 0..n-1 of (P^T - I); the last row is replaced by the normalization.
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        for (j, p) in chain.row(i) {
            a[j * n + i] += p;
        }
        a[i * n + i] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1) * n + j] = 1.0;
    }
    b[n - 1] = 1.0;

    for col in 0..n {
        let pivot =
            (col..n).max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs())).expect("non-empty range");
        if a[pivot * n + col].abs() < 1e-13 {
            return Err(Error::SingularSystem(format!("zero pivot in column {col}")));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
            }
            b.swap(pivot, col);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f != 0.0 {
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[r * n + j] * x[j]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    for v in &mut x {
        if *v < 0.0 && *v > -1e-12 {
            *v = 0.0;
        }
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::SingularSystem("balance solve produced a negative mass".into()));
    }
    let total: f64 = x.iter().sum();
    Ok(x.into_iter().map(|v| v / total).collect())
}

fn lazy_power(chain: &SparseChain) -> Result<Vec<f64>> {
    let n = chain.len();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..POWER_MAX_ITERS {
        next.iter_mut().zip(&pi).for_each(|(a, &b)| *a = 0.5 * b);
        for (i, &w) in pi.iter().enumerate() {
            let half = 0.5 * w;
            for (j, p) in chain.row(i) {
                next[j] += half * p;
            }
        }
        let total: f64 = next.iter().sum();
        let mut change = 0.0;
        for (a, b) in next.iter_mut().zip(&pi) {
            *a /= total;
            change += (*a - b).abs();
        }
        std::mem::swap(&mut pi, &mut next);
        if change < POWER_TOL {
            return Ok(pi);
        }
    }
    Err(Error::SingularSystem(format!("power iteration did not settle in {POWER_MAX_ITERS} sweeps")))
}

/// Long-run behaviour of a chain started from a fixed state.
#[derive(Debug, Clone)]
pub struct ChainEvaluation {
    /// Long-run average cost.
    pub theta: f64,
    /// States reachable from the start, in discovery order.
    pub reachable: Vec<usize>,
    /// The recurrent class, as global state ids.
    pub recurrent: Vec<usize>,
    pub stationary: Vec<f64>,
}

/// Explores the chain reachable from `start` and returns its average cost.
///
/// `successors(s, out)` appends the transitions of global state `s`. Fails
/// with `MultichainDetected` if more than one recurrent class is reachable.
pub fn evaluate_average_cost(
    start: usize,
    mut successors: impl FnMut(usize, &mut Vec<(usize, f64)>) -> Result<()>,
    cost: impl Fn(usize) -> f64,
) -> Result<ChainEvaluation> {
    let mut local: HashMap<usize, u32> = HashMap::new();
    let mut reachable = vec![start];
    local.insert(start, 0);
    let mut chain = SparseChain::new();
    let mut buf = Vec::new();
    let mut row = Vec::new();
    let mut head = 0;
    while head < reachable.len() {
        let s = reachable[head];
        head += 1;
        buf.clear();
        successors(s, &mut buf)?;
        row.clear();
        for &(t, p) in &buf {
            if p <= 0.0 {
                continue;
            }
            let id = *local.entry(t).or_insert_with(|| {
                reachable.push(t);
                (reachable.len() - 1) as u32
            });
            row.push((id as usize, p));
        }
        chain.push_row(row.iter().copied());
    }
    let classes = closed_classes(&chain);
    if classes.len() != 1 {
        return Err(Error::MultichainDetected { classes: classes.len() });
    }
    let class = &classes[0];
    let sub = chain.restrict(class);
    let stationary = stationary_distribution(&sub)?;
    let recurrent: Vec<usize> = class.iter().map(|&i| reachable[i]).collect();
    let theta = recurrent.iter().zip(&stationary).map(|(&s, &w)| w * cost(s)).sum();
    Ok(ChainEvaluation { theta, reachable, recurrent, stationary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_state() {
        let c = SparseChain::from_rows(&[vec![(0, 1.0)]]);
        assert_eq!(stationary_distribution(&c).unwrap(), vec![1.0]);
    }

    #[test]
    fn symmetric_pair() {
        let c = SparseChain::from_rows(&[vec![(0, 0.5), (1, 0.5)], vec![(0, 0.5), (1, 0.5)]]);
        let pi = stationary_distribution(&c).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-14 && (pi[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn deterministic_cycle() {
        let c = SparseChain::from_rows(&[vec![(1, 1.0)], vec![(0, 1.0)]]);
        let pi = stationary_distribution(&c).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-14 && (pi[1] - 0.5).abs() < 1e-14);
        assert!((lazy_power(&c).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dense_and_power_agree() {
        // Birth-death chain on 40 states.
        let n = 40;
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                let mut r = Vec::new();
                if i > 0 {
                    r.push((i - 1, 0.6));
                } else {
                    r.push((0, 0.6));
                }
                if i + 1 < n {
                    r.push((i + 1, 0.4));
                } else {
                    r.push((i, 0.4));
                }
                r
            })
            .collect();
        let c = SparseChain::from_rows(&rows);
        let a = dense_balance(&c).unwrap();
        let b = lazy_power(&c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
        // Detailed balance: pi_{i+1} / pi_i = 0.4 / 0.6.
        assert!((a[1] / a[0] - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn closed_classes_found() {
        // 0 -> {1, 2}; 1 absorbing; 2 <-> 3.
        let c = SparseChain::from_rows(&[vec![(1, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![(3, 1.0)], vec![(2, 1.0)]]);
        assert_eq!(closed_classes(&c), vec![vec![1], vec![2, 3]]);
    }

    #[test]
    fn multichain_is_reported() {
        let rows = [vec![(1, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![(2, 1.0)]];
        let r = evaluate_average_cost(
            0,
            |s, out| {
                out.extend_from_slice(&rows[s]);
                Ok(())
            },
            |s| s as f64,
        );
        assert!(matches!(r, Err(Error::MultichainDetected { classes: 2 })));
    }

    #[test]
    fn average_cost_of_transient_start() {
        let rows = [vec![(1, 1.0)], vec![(2, 1.0)], vec![(1, 1.0)]];
        let e = evaluate_average_cost(
            0,
            |s, out| {
                out.extend_from_slice(&rows[s]);
                Ok(())
            },
            |s| s as f64,
        )
        .unwrap();
        assert!((e.theta - 1.5).abs() < 1e-14);
        assert_eq!(e.recurrent, vec![1, 2]);
    }
}
