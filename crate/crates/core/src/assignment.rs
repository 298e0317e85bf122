//! Optimal and k-best linear assignment.
//!
//! Cost matrices are `rows x cols` with `rows <= cols`; every row must be
//! assigned to a distinct column. `f64::INFINITY` marks a forbidden pair.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;

/// A complete assignment: `columns[row]` is the column chosen for `row`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub columns: Vec<usize>,
    pub cost: f64,
}

fn total_cost(cost: &DMatrix<f64>, columns: &[usize]) -> f64 {
    columns.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum()
}

/// Minimum-cost assignment via shortest augmenting paths with potentials.
/// Returns `None` if no finite-cost assignment exists.
pub fn solve(cost: &DMatrix<f64>) -> Option<Assignment> {
    let (n, m) = cost.shape();
    if n == 0 {
        return Some(Assignment { columns: Vec::new(), cost: 0.0 });
    }
    if n > m || cost.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
        return None;
    }
    // 1-based arrays; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = usize::MAX;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let c = cost[(i0 - 1, j - 1)];
                if c.is_finite() {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == usize::MAX {
                return None;
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut columns = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            columns[owner[j] - 1] = j - 1;
        }
    }
    let c = total_cost(cost, &columns);
    c.is_finite().then_some(Assignment { columns, cost: c })
}

struct Node {
    sol: Assignment,
    matrix: DMatrix<f64>,
    /// Rows `0..fixed` are already pinned to `sol.columns`.
    fixed: usize,
}

fn cmp_solutions(a: &Assignment, b: &Assignment) -> Ordering {
    a.cost.total_cmp(&b.cost).then_with(|| a.columns.cmp(&b.columns))
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        cmp_solutions(&self.sol, &other.sol) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_solutions(&other.sol, &self.sol)
    }
}

const TIE_EXTENSION_LIMIT: usize = 4096;

/// The `k` lowest-cost assignments in ascending cost, ties ordered by the
/// lexicographic column vector. Fewer are returned if fewer exist.
pub fn murty_kbest(cost: &DMatrix<f64>, k: usize) -> Vec<Assignment> {
    if k == 0 {
        return Vec::new();
    }
    let Some(first) = solve(cost) else {
        return Vec::new();
    };
    let mut heap = BinaryHeap::new();
    heap.push(Node { sol: first, matrix: cost.clone(), fixed: 0 });
    let mut out: Vec<Assignment> = Vec::new();
    while let Some(node) = heap.pop() {
        if out.len() >= k {
            // keep collecting exact ties so the cut at k is deterministic
            if node.sol.cost > out[k - 1].cost || out.len() >= k + TIE_EXTENSION_LIMIT {
                break;
            }
        }
        let Node { sol, matrix, fixed } = node;
        let rows = matrix.nrows();
        let mut constrained = matrix;
        for r in 0..fixed {
            pin(&mut constrained, r, sol.columns[r]);
        }
        for i in fixed..rows {
            let mut child = constrained.clone();
            child[(i, sol.columns[i])] = f64::INFINITY;
            if let Some(s) = solve(&child) {
                let s = Assignment { cost: total_cost(cost, &s.columns), columns: s.columns };
                heap.push(Node { sol: s, matrix: child, fixed: i });
            }
            pin(&mut constrained, i, sol.columns[i]);
        }
        out.push(sol);
    }
    out.sort_by(cmp_solutions);
    out.truncate(k);
    out
}

/// Per-row lists of finite `(column, cost)` entries.
pub type SparseRows = Vec<Vec<(usize, f64)>>;

pub fn to_sparse(cost: &DMatrix<f64>) -> SparseRows {
    (0..cost.nrows())
        .map(|r| (0..cost.ncols()).filter(|&c| cost[(r, c)].is_finite()).map(|c| (c, cost[(r, c)])).collect())
        .collect()
}

fn sparse_cost(options: &[Vec<(usize, f64)>], columns: &[usize]) -> f64 {
    options
        .iter()
        .zip(columns)
        .map(|(o, &c)| o.iter().find(|x| x.0 == c).map_or(f64::INFINITY, |x| x.1))
        .sum()
}

/// Row groups that share no column, each with its sorted columns.
fn independent_blocks(options: &[Vec<(usize, f64)>], m: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = options.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut first_row = vec![usize::MAX; m];
    for (r, o) in options.iter().enumerate() {
        for &(c, _) in o {
            if first_row[c] == usize::MAX {
                first_row[c] = r;
            } else {
                let (a, b) = (find(&mut parent, first_row[c]), find(&mut parent, r));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut blocks: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut root_block = vec![usize::MAX; n];
    for r in 0..n {
        let root = find(&mut parent, r);
        if root_block[root] == usize::MAX {
            root_block[root] = blocks.len();
            blocks.push((Vec::new(), Vec::new()));
        }
        blocks[root_block[root]].0.push(r);
    }
    for (rows, cols) in &mut blocks {
        let mut c: Vec<usize> = rows.iter().flat_map(|&r| options[r].iter().map(|x| x.0)).collect();
        c.sort_unstable();
        c.dedup();
        *cols = c;
    }
    blocks
}

/// Ranked assignments of a block: exact for small blocks, Gibbs-sampled
/// for large ones.
fn block_kbest(options: &[Vec<(usize, f64)>], m: usize, k: usize, seed: u64) -> Vec<Assignment> {
    if k == 1 {
        return solve_sparse(options, m)
            .map(|columns| {
                let cost = sparse_cost(options, &columns);
                vec![Assignment { columns, cost }]
            })
            .unwrap_or_default();
    }
    if options.len() == 1 {
        let mut single: Vec<(usize, f64)> = options[0].iter().copied().filter(|o| o.1.is_finite()).collect();
        single.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        return single.into_iter().take(k).map(|(c, v)| Assignment { columns: vec![c], cost: v }).collect();
    }
    if options.len() <= EXACT_MAX_ROWS {
        let mut dense = DMatrix::from_element(options.len(), m, f64::INFINITY);
        for (r, o) in options.iter().enumerate() {
            for &(c, v) in o {
                dense[(r, c)] = v;
            }
        }
        murty_kbest(&dense, k)
    } else {
        gibbs_kbest(options, m, k, seed)
    }
}

/// Rows above which a block is ranked by Gibbs sampling instead of Murty.
pub const EXACT_MAX_ROWS: usize = 12;

/// Optimal assignment over per-row lists of finite `(column, cost)`
/// options by successive shortest augmenting paths.
pub fn solve_sparse(options: &[Vec<(usize, f64)>], m: usize) -> Option<Vec<usize>> {
    #[derive(PartialEq)]
    struct Item(f64, usize);
    impl Eq for Item {}
    impl PartialOrd for Item {
        fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for Item {
        fn cmp(&self, o: &Self) -> Ordering {
            o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
        }
    }
    let n = options.len();
    let mut u: Vec<f64> = options.iter().map(|o| o.iter().map(|x| x.1).fold(f64::INFINITY, f64::min)).collect();
    if u.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let mut v = vec![0.0; m];
    let mut columns = vec![usize::MAX; n];
    let mut owner = vec![usize::MAX; m];
    let mut dist = vec![f64::INFINITY; m];
    let mut pred = vec![usize::MAX; m];
    let mut done = vec![false; m];
    let mut touched: Vec<usize> = Vec::new();
    let mut heap = BinaryHeap::new();
    for (r, o) in options.iter().enumerate() {
        if let Some(&(j, _)) = o.iter().find(|x| x.1 == u[r] && owner[x.0] == usize::MAX) {
            columns[r] = j;
            owner[j] = r;
        }
    }
    let mut finished: Vec<usize> = Vec::new();
    for start in 0..n {
        if columns[start] != usize::MAX {
            continue;
        }
        for &j in &touched {
            dist[j] = f64::INFINITY;
            done[j] = false;
        }
        touched.clear();
        heap.clear();
        let relax = |r: usize, base: f64, dist: &mut [f64], pred: &mut [usize], touched: &mut Vec<usize>, heap: &mut BinaryHeap<Item>, u: &[f64], v: &[f64], done: &[bool]| {
            for &(j, c) in &options[r] {
                if done[j] {
                    continue;
                }
                let d = base + (c - u[r] - v[j]).max(0.0);
                if d < dist[j] {
                    if dist[j].is_infinite() {
                        touched.push(j);
                    }
                    dist[j] = d;
                    pred[j] = r;
                    heap.push(Item(d, j));
                }
            }
        };
        relax(start, 0.0, &mut dist, &mut pred, &mut touched, &mut heap, &u, &v, &done);
        finished.clear();
        let free = loop {
            let Item(d, j) = heap.pop()?;
            if done[j] || d > dist[j] {
                continue;
            }
            done[j] = true;
            finished.push(j);
            if owner[j] == usize::MAX {
                break j;
            }
            relax(owner[j], d, &mut dist, &mut pred, &mut touched, &mut heap, &u, &v, &done);
        };
        let total = dist[free];
        for &j in &finished {
            let shift = total - dist[j];
            v[j] -= shift;
            if owner[j] != usize::MAX {
                u[owner[j]] += shift;
            }
        }
        u[start] += total;
        let mut j = free;
        loop {
            let r = pred[j];
            let prev = columns[r];
            columns[r] = j;
            owner[j] = r;
            if r == start {
                break;
            }
            j = prev;
        }
    }
    Some(columns)
}

/// Distinct low-cost assignments found by Gibbs sampling over rows,
/// started from the optimal assignment. Costs are exact; the ranking is
/// exact among the solutions visited.
pub fn gibbs_kbest(options: &[Vec<(usize, f64)>], m: usize, k: usize, seed: u64) -> Vec<Assignment> {
    use rand::{Rng, SeedableRng};
    let n = options.len();
    if n == 0 {
        return vec![Assignment { columns: Vec::new(), cost: 0.0 }];
    }
    let Some(mut columns) = solve_sparse(options, m) else {
        return Vec::new();
    };
    let mut owner = vec![usize::MAX; m];
    for (r, &c) in columns.iter().enumerate() {
        owner[c] = r;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut seen: std::collections::BTreeMap<Vec<usize>, f64> = std::collections::BTreeMap::new();
    seen.insert(columns.clone(), sparse_cost(options, &columns));
    let sweeps = k + 4;
    let mut free: Vec<(usize, f64)> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for _ in 0..sweeps {
        for r in 0..n {
            if options[r].len() < 2 {
                continue;
            }
            free.clear();
            free.extend(options[r].iter().copied().filter(|&(c, _)| owner[c] == usize::MAX || owner[c] == r));
            let lo = free.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
            weights.clear();
            weights.extend(free.iter().map(|o| (lo - o.1).exp()));
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = free.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            owner[columns[r]] = usize::MAX;
            columns[r] = free[pick].0;
            owner[columns[r]] = r;
        }
        if !seen.contains_key(&columns) {
            seen.insert(columns.clone(), sparse_cost(options, &columns));
        }
    }
    let mut out: Vec<Assignment> = seen.into_iter().map(|(columns, cost)| Assignment { columns, cost }).collect();
    out.sort_by(cmp_solutions);
    out.truncate(k);
    out
}

/// Same contract as [`murty_kbest`] for blocks of at most
/// [`EXACT_MAX_ROWS`] rows: independent row blocks are ranked separately
/// and their lists combined lazily.
pub fn kbest_decomposed(cost: &DMatrix<f64>, k: usize, seed: u64) -> Vec<Assignment> {
    kbest_sparse(&to_sparse(cost), cost.ncols(), k, seed)
}

/// [`kbest_decomposed`] over per-row option lists with `m` columns.
pub fn kbest_sparse(options: &[Vec<(usize, f64)>], m: usize, k: usize, seed: u64) -> Vec<Assignment> {
    if k == 0 {
        return Vec::new();
    }
    let n = options.len();
    if n == 0 {
        return vec![Assignment { columns: Vec::new(), cost: 0.0 }];
    }
    if k == 1 {
        return block_kbest(options, m, 1, seed);
    }
    let blocks = independent_blocks(options, m);
    if blocks.len() == 1 {
        return block_kbest(options, m, k, seed);
    }
    let mut lists: Vec<(Vec<usize>, Vec<Assignment>)> = Vec::with_capacity(blocks.len());
    for (rows, cols) in &blocks {
        if cols.len() < rows.len() {
            return Vec::new();
        }
        let local: Vec<Vec<(usize, f64)>> = rows
            .iter()
            .map(|&r| options[r].iter().map(|&(c, v)| (cols.binary_search(&c).expect("block column"), v)).collect())
            .collect();
        let best = block_kbest(&local, cols.len(), k, seed ^ (rows[0] as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        if best.is_empty() {
            return Vec::new();
        }
        let mapped = best
            .into_iter()
            .map(|a| Assignment { columns: a.columns.iter().map(|&j| cols[j]).collect(), cost: a.cost })
            .collect();
        lists.push((rows.clone(), mapped));
    }
    let base: f64 = lists.iter().map(|l| l.1[0].cost).sum();
    // blocks with alternatives, ordered by the gap to their second solution
    let mut alt: Vec<usize> = (0..lists.len()).filter(|&b| lists[b].1.len() > 1).collect();
    alt.sort_by(|&a, &b| {
        let ga = lists[a].1[1].cost - lists[a].1[0].cost;
        let gb = lists[b].1[1].cost - lists[b].1[0].cost;
        ga.total_cmp(&gb).then(a.cmp(&b))
    });
    let delta = |p: usize, i: usize| lists[alt[p]].1[i].cost - lists[alt[p]].1[0].cost;

    // states are deviations (position in `alt`, rank >= 1), positions increasing
    #[derive(PartialEq)]
    struct State {
        cost: f64,
        seq: u64,
        dev: Vec<(usize, usize)>,
    }
    impl Eq for State {}
    impl PartialOrd for State {
        fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for State {
        fn cmp(&self, o: &Self) -> Ordering {
            o.cost.total_cmp(&self.cost).then(o.seq.cmp(&self.seq))
        }
    }
    let mut seq = 0u64;
    let mut heap = BinaryHeap::new();
    heap.push(State { cost: base, seq, dev: Vec::new() });
    let mut chosen: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    while let Some(st) = heap.pop() {
        if chosen.len() >= k && (st.cost > chosen[k - 1].0 || chosen.len() >= k + TIE_EXTENSION_LIMIT) {
            break;
        }
        let mut push = |dev: Vec<(usize, usize)>, c: f64| {
            seq += 1;
            heap.push(State { cost: c, seq, dev });
        };
        match st.dev.last().copied() {
            None => {
                if !alt.is_empty() {
                    push(vec![(0, 1)], st.cost + delta(0, 1));
                }
            }
            Some((p, i)) => {
                if i + 1 < lists[alt[p]].1.len() {
                    let mut d = st.dev.clone();
                    d.last_mut().expect("non-empty").1 = i + 1;
                    push(d, st.cost - delta(p, i) + delta(p, i + 1));
                }
                if p + 1 < alt.len() {
                    if i == 1 {
                        let mut d = st.dev.clone();
                        *d.last_mut().expect("non-empty") = (p + 1, 1);
                        push(d, st.cost - delta(p, 1) + delta(p + 1, 1));
                    }
                    let mut d = st.dev.clone();
                    d.push((p + 1, 1));
                    push(d, st.cost + delta(p + 1, 1));
                }
            }
        }
        chosen.push((st.cost, st.dev));
    }
    let mut out: Vec<Assignment> = chosen
        .into_iter()
        .map(|(_, dev)| {
            let mut columns = vec![0; n];
            let mut rank = vec![0usize; lists.len()];
            for (p, i) in dev {
                rank[alt[p]] = i;
            }
            for ((rows, sols), &r) in lists.iter().zip(&rank) {
                for (&row, &col) in rows.iter().zip(&sols[r].columns) {
                    columns[row] = col;
                }
            }
            let c = sparse_cost(options, &columns);
            Assignment { columns, cost: c }
        })
        .collect();
    out.sort_by(cmp_solutions);
    out.truncate(k);
    out
}

fn pin(m: &mut DMatrix<f64>, row: usize, col: usize) {
    for c in 0..m.ncols() {
        if c != col {
            m[(row, c)] = f64::INFINITY;
        }
    }
    for r in 0..m.nrows() {
        if r != row {
            m[(r, col)] = f64::INFINITY;
        }
    }
}
