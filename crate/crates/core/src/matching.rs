//! Clone groups on the linear propensity scale.
//!
//! Every focal unit is paired with up to `k` units from the opposite arm,
//! the distance being `|lp_focal - lp_clone|`. Two methods:
//!
//! * greedy: focal units in descending `lp` order (ties by unit id) each take
//!   their `k` nearest still-available units within the caliper, distance
//!   ties broken by unit id;
//! * optimal: the assignment with the most pairs and, among those, the least
//!   total distance, found as a minimum-cost flow with the focal side
//!   replicated `k` times and the caliper applied by deleting edges.
//!
//! The optimal solver is exact but builds one edge per focal/pool pair
//! within the caliper, so it is meant for designs of up to a few thousand
//! units; greedy scales to hundreds of thousands.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::design::{retained_scores, DesignReport};
use crate::error::{Error, Result};
use crate::propensity::ScoreTable;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Greedy,
    Optimal,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "greedy" => Ok(Method::Greedy),
            "optimal" => Ok(Method::Optimal),
            other => Err(Error::Config(format!("unknown matching method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    TreatedFocal,
    ControlFocal,
    #[default]
    Both,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Direction> {
        match s {
            "treated-focal" => Ok(Direction::TreatedFocal),
            "control-focal" => Ok(Direction::ControlFocal),
            "both" => Ok(Direction::Both),
            other => Err(Error::Config(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Caliper {
    None,
    Absolute(f64),
    /// Multiple of the pooled standard deviation of `lp`,
    /// `sqrt((var_t + var_c) / 2)`, over the units being matched.
    SdMultiple(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchSpec {
    pub method: Method,
    pub k: usize,
    pub caliper: Caliper,
    pub replacement: bool,
    pub direction: Direction,
    /// Only match units that share a propensity bin.
    #[serde(default)]
    pub within_bins: bool,
}

impl Default for MatchSpec {
    fn default() -> Self {
        MatchSpec {
            method: Method::Greedy,
            k: 10,
            caliper: Caliper::SdMultiple(0.2),
            replacement: false,
            direction: Direction::Both,
            within_bins: false,
        }
    }
}

impl MatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("matching ratio k must be at least 1".into()));
        }
        match self.caliper {
            Caliper::Absolute(c) | Caliper::SdMultiple(c) if !(c.is_finite() && c > 0.0) => {
                Err(Error::Config(format!("caliper must be finite and positive, got {c}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneGroup {
    pub group_index: usize,
    pub focal_id: String,
    pub focal_z: u8,
    pub focal_lp: f64,
    pub clone_ids: Vec<String>,
    pub distances: Vec<f64>,
}

impl CloneGroup {
    pub fn size(&self) -> usize {
        self.clone_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnmatchedReason {
    /// No opposite-arm unit lies within the caliper at all.
    Caliper,
    /// Units within the caliper exist but all were used by other groups.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unmatched {
    pub focal_id: String,
    pub focal_z: u8,
    pub reason: UnmatchedReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub spec: MatchSpec,
    /// Caliper actually applied on the lp scale.
    pub caliper: Option<f64>,
    pub groups: Vec<CloneGroup>,
    pub unmatched: Vec<Unmatched>,
    pub total_distance: f64,
    pub design_digest: String,
    pub dataset_digest: String,
}

impl MatchSet {
    pub fn n_pairs(&self) -> usize {
        self.groups.iter().map(CloneGroup::size).sum()
    }

    pub fn groups_for(&self, focal_z: u8) -> impl Iterator<Item = &CloneGroup> {
        self.groups.iter().filter(move |g| g.focal_z == focal_z)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["focal_id", "clone_id", "distance", "group_index"])?;
        for g in &self.groups {
            for (c, d) in g.clone_ids.iter().zip(&g.distances) {
                out.write_record([g.focal_id.as_str(), c, &d.to_string(), &g.group_index.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_unmatched_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["focal_id", "z", "reason"])?;
        for u in &self.unmatched {
            let reason = match u.reason {
                UnmatchedReason::Caliper => "caliper",
                UnmatchedReason::Exhausted => "exhausted",
            };
            out.write_record([u.focal_id.as_str(), &u.focal_z.to_string(), reason])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Match the units a frozen design retained.
pub fn match_units(scores: &ScoreTable, design: &DesignReport, spec: &MatchSpec) -> Result<MatchSet> {
    if !design.frozen {
        return Err(Error::DesignNotReady("matching requires a frozen design".into()));
    }
    if scores.dataset_digest != design.dataset_digest || scores.model_digest != design.model_digest {
        return Err(Error::Provenance("scores do not come from the frozen design's model and dataset".into()));
    }
    let retained = retained_scores(scores, &design.trim);
    let bins = if spec.within_bins {
        let lookup = design.bin_plan.bin_of_id();
        let bins = retained
            .ids
            .iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Provenance(format!("unit {id:?} has no bin in the design")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(bins)
    } else {
        None
    };
    let mut ms = match_scores(&retained, spec, bins.as_deref())?;
    ms.design_digest = design.digest();
    Ok(ms)
}

/// Match every unit of a score table, optionally only within bins.
pub fn match_scores(scores: &ScoreTable, spec: &MatchSpec, bins: Option<&[usize]>) -> Result<MatchSet> {
    spec.validate()?;
    let treated: Vec<usize> = (0..scores.len()).filter(|&i| scores.z[i] == 1).collect();
    let control: Vec<usize> = (0..scores.len()).filter(|&i| scores.z[i] == 0).collect();
    let caliper = match spec.caliper {
        Caliper::None => None,
        Caliper::Absolute(c) => Some(c),
        Caliper::SdMultiple(m) => {
            let lt: Vec<f64> = treated.iter().map(|&i| scores.lp[i]).collect();
            let lc: Vec<f64> = control.iter().map(|&i| scores.lp[i]).collect();
            let pooled = ((stats::sample_variance(&lt) + stats::sample_variance(&lc)) / 2.0).sqrt();
            // a zero-spread population leaves only exact matches
            Some(if pooled.is_finite() { m * pooled } else { 0.0 })
        }
    };

    let directions: &[(u8, &[usize], &[usize])] = match spec.direction {
        Direction::TreatedFocal => &[(1, &treated, &control)],
        Direction::ControlFocal => &[(0, &control, &treated)],
        Direction::Both => &[(1, &treated, &control), (0, &control, &treated)],
    };
    for &(arm, focal, pool) in directions {
        if focal.is_empty() {
            let name = if arm == 1 { "treated" } else { "control" };
            return Err(Error::Support(format!("no {name} focal units to match")));
        }
        if pool.is_empty() {
            return Err(Error::Support("no opposite-arm units to match against".into()));
        }
    }

    let mut groups = Vec::new();
    let mut unmatched = Vec::new();
    for &(arm, focal, pool) in directions {
        let parts: Vec<(Vec<usize>, Vec<usize>)> = match bins {
            None => vec![(focal.to_vec(), pool.to_vec())],
            Some(b) => {
                let n_bins = b.iter().copied().max().map_or(0, |m| m + 1);
                let mut parts = vec![(Vec::new(), Vec::new()); n_bins];
                for &i in focal {
                    parts[b[i]].0.push(i);
                }
                for &i in pool {
                    parts[b[i]].1.push(i);
                }
                parts
            }
        };
        let mut side_groups = Vec::new();
        for (f, p) in parts {
            if f.is_empty() {
                continue;
            }
            let (g, u) = match_side(scores, &f, &p, spec, caliper);
            side_groups.extend(g);
            unmatched.extend(u.into_iter().map(|(i, reason)| Unmatched {
                focal_id: scores.ids[i].clone(),
                focal_z: arm,
                reason,
            }));
        }
        // report groups in greedy processing order
        side_groups.sort_by(|a: &(usize, Vec<(usize, f64)>), b| focal_order(scores, a.0, b.0));
        for (f, clones) in side_groups {
            groups.push(CloneGroup {
                group_index: groups.len(),
                focal_id: scores.ids[f].clone(),
                focal_z: arm,
                focal_lp: scores.lp[f],
                clone_ids: clones.iter().map(|&(c, _)| scores.ids[c].clone()).collect(),
                distances: clones.iter().map(|&(_, d)| d).collect(),
            });
        }
    }
    unmatched.sort_by(|a, b| b.focal_z.cmp(&a.focal_z).then_with(|| a.focal_id.cmp(&b.focal_id)));
    let total_distance = groups.iter().flat_map(|g| g.distances.iter()).sum();
    Ok(MatchSet {
        spec: *spec,
        caliper,
        groups,
        unmatched,
        total_distance,
        design_digest: String::new(),
        dataset_digest: scores.dataset_digest.clone(),
    })
}

/// Descending lp, then ascending unit id.
fn focal_order(scores: &ScoreTable, a: usize, b: usize) -> Ordering {
    scores.lp[b].total_cmp(&scores.lp[a]).then_with(|| scores.ids[a].cmp(&scores.ids[b]))
}

type SideResult = (Vec<(usize, Vec<(usize, f64)>)>, Vec<(usize, UnmatchedReason)>);

fn match_side(scores: &ScoreTable, focal: &[usize], pool: &[usize], spec: &MatchSpec, caliper: Option<f64>) -> SideResult {
    let mut pool = pool.to_vec();
    pool.sort_by(|&a, &b| scores.lp[a].total_cmp(&scores.lp[b]).then_with(|| scores.ids[a].cmp(&scores.ids[b])));
    let mut focal = focal.to_vec();
    focal.sort_by(|&a, &b| focal_order(scores, a, b));
    let pool_lp: Vec<f64> = pool.iter().map(|&i| scores.lp[i]).collect();

    let reason_for = |x: f64| -> UnmatchedReason {
        match caliper {
            None => UnmatchedReason::Exhausted,
            Some(c) => {
                let p = pool_lp.partition_point(|&v| v < x);
                let near_right = p < pool_lp.len() && pool_lp[p] - x <= c;
                let near_left = p > 0 && x - pool_lp[p - 1] <= c;
                if near_left || near_right {
                    UnmatchedReason::Exhausted
                } else {
                    UnmatchedReason::Caliper
                }
            }
        }
    };

    let raw = if spec.method == Method::Optimal && !spec.replacement {
        optimal_side(scores, &focal, &pool_lp, spec.k, caliper)
    } else {
        // with replacement the k nearest are optimal as well
        greedy_side(scores, &focal, &pool, &pool_lp, spec.k, caliper, spec.replacement)
    };

    let mut groups = Vec::new();
    let mut unmatched = Vec::new();
    for (f, picks) in focal.iter().zip(raw) {
        if picks.is_empty() {
            unmatched.push((*f, reason_for(scores.lp[*f])));
        } else {
            let mut clones: Vec<(usize, f64)> = picks.iter().map(|&p| (pool[p], (scores.lp[*f] - pool_lp[p]).abs())).collect();
            clones.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| scores.ids[a.0].cmp(&scores.ids[b.0])));
            groups.push((*f, clones));
        }
    }
    (groups, unmatched)
}

/// Skip lists over the sorted pool: `find_right(i)` is the first available
/// position `>= i`, `find_left(i)` the last available position `<= i`.
struct Availability {
    next: Vec<usize>,
    prev: Vec<usize>,
}

impl Availability {
    fn new(n: usize) -> Availability {
        Availability { next: (0..=n).collect(), prev: (0..=n).collect() }
    }

    fn find_right(&mut self, mut i: usize) -> Option<usize> {
        while self.next[i] != i {
            self.next[i] = self.next[self.next[i]];
            i = self.next[i];
        }
        (i < self.next.len() - 1).then_some(i)
    }

    /// `prev` is shifted by one so slot 0 means "none".
    fn find_left(&mut self, i: Option<usize>) -> Option<usize> {
        let mut s = i? + 1;
        while self.prev[s] != s {
            self.prev[s] = self.prev[self.prev[s]];
            s = self.prev[s];
        }
        s.checked_sub(1)
    }

    fn remove(&mut self, i: usize) {
        self.next[i] = i + 1;
        self.prev[i + 1] = i;
    }
}

fn greedy_side(
    scores: &ScoreTable,
    focal: &[usize],
    pool: &[usize],
    pool_lp: &[f64],
    k: usize,
    caliper: Option<f64>,
    replacement: bool,
) -> Vec<Vec<usize>> {
    let n = pool.len();
    let mut avail = Availability::new(n);
    let id = |p: usize| scores.ids[pool[p]].as_str();
    let within = |d: f64| caliper.is_none_or(|c| d <= c);
    let mut out = Vec::with_capacity(focal.len());

    for &f in focal {
        let x = scores.lp[f];
        let split = pool_lp.partition_point(|&v| v < x);
        let mut right = avail.find_right(split);
        let mut left = avail.find_left(split.checked_sub(1));
        // run of equal lp on the left, stored so that pop() yields the smallest id
        let mut left_run: Vec<usize> = Vec::new();
        let mut picks = Vec::new();
        while picks.len() < k {
            if left_run.is_empty() {
                if let Some(l) = left {
                    let v = pool_lp[l];
                    let mut cur = Some(l);
                    while let Some(c) = cur {
                        if pool_lp[c] != v {
                            break;
                        }
                        left_run.push(c);
                        cur = if replacement { c.checked_sub(1) } else { avail.find_left(c.checked_sub(1)) };
                    }
                    left = cur;
                }
            }
            let lc = left_run.last().map(|&p| (x - pool_lp[p], p));
            let rc = right.map(|p| (pool_lp[p] - x, p));
            let take_left = match (lc, rc) {
                (None, None) => break,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (Some((dl, pl)), Some((dr, pr))) => dl < dr || (dl == dr && id(pl) < id(pr)),
            };
            let (d, p) = if take_left { lc.unwrap() } else { rc.unwrap() };
            if !within(d) {
                break;
            }
            picks.push(p);
            if take_left {
                left_run.pop();
            } else {
                right = if replacement {
                    (p + 1 < n).then_some(p + 1)
                } else {
                    avail.find_right(p + 1)
                };
            }
        }
        if !replacement {
            for &p in &picks {
                avail.remove(p);
            }
        }
        out.push(picks);
    }
    out
}

#[derive(Clone, Copy)]
struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
    rev: usize,
}

struct FlowGraph {
    adj: Vec<Vec<Edge>>,
}

impl FlowGraph {
    fn new(n: usize) -> FlowGraph {
        FlowGraph { adj: vec![Vec::new(); n] }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: f64) {
        let rf = self.adj[to].len();
        let rt = self.adj[from].len();
        self.adj[from].push(Edge { to, cap, cost, rev: rf });
        self.adj[to].push(Edge { to: from, cap: 0, cost: -cost, rev: rt });
    }
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Successive shortest augmenting paths with Johnson potentials. Every
/// augmentation carries one unit of flow, so the result has maximum
/// cardinality and minimum cost for that cardinality.
fn min_cost_max_flow(g: &mut FlowGraph, s: usize, t: usize) {
    let n = g.adj.len();
    let mut potential = vec![0.0; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
    loop {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = None);
        dist[s] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapItem(0.0, s));
        while let Some(HeapItem(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (ei, e) in g.adj[u].iter().enumerate() {
                if e.cap <= 0 {
                    continue;
                }
                let reduced = (e.cost + potential[u] - potential[e.to]).max(0.0);
                let nd = d + reduced;
                if nd < dist[e.to] {
                    dist[e.to] = nd;
                    prev[e.to] = Some((u, ei));
                    heap.push(HeapItem(nd, e.to));
                }
            }
        }
        if !dist[t].is_finite() {
            return;
        }
        for v in 0..n {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }
        let mut v = t;
        while let Some((u, ei)) = prev[v] {
            let rev = g.adj[u][ei].rev;
            g.adj[u][ei].cap -= 1;
            g.adj[v][rev].cap += 1;
            v = u;
        }
    }
}

fn optimal_side(
    scores: &ScoreTable,
    focal: &[usize],
    pool_lp: &[f64],
    k: usize,
    caliper: Option<f64>,
) -> Vec<Vec<usize>> {
    let nf = focal.len();
    let np = pool_lp.len();
    let (s, t) = (0, 1);
    let focal_node = |i: usize| 2 + i;
    let pool_node = |j: usize| 2 + nf + j;
    let mut g = FlowGraph::new(2 + nf + np);
    for (i, &f) in focal.iter().enumerate() {
        g.add_edge(s, focal_node(i), k as i64, 0.0);
        let x = scores.lp[f];
        let (lo, hi) = match caliper {
            Some(c) => (pool_lp.partition_point(|&v| v < x - c), pool_lp.partition_point(|&v| v <= x + c)),
            None => (0, np),
        };
        for j in lo..hi {
            let d = (x - pool_lp[j]).abs();
            if caliper.is_none_or(|c| d <= c) {
                g.add_edge(focal_node(i), pool_node(j), 1, d);
            }
        }
    }
    for j in 0..np {
        g.add_edge(pool_node(j), t, 1, 0.0);
    }
    min_cost_max_flow(&mut g, s, t);
    (0..nf)
        .map(|i| {
            g.adj[focal_node(i)]
                .iter()
                .filter(|e| e.to >= 2 + nf && e.cap == 0)
                .map(|e| e.to - 2 - nf)
                .collect()
        })
        .collect()
}

/// Mean clone outcome per matched focal unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedOutcome {
    pub focal_id: String,
    pub focal_z: u8,
    pub k_used: usize,
    pub counterfactual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    pub rows: Vec<ImputedOutcome>,
    /// Focal units without any clone; they get no counterfactual.
    pub excluded: Vec<String>,
}

/// Check that `ds` was released under the design that produced `ms`.
pub(crate) fn check_release(ms: &MatchSet, ds: &Dataset) -> Result<()> {
    let audit = ds.escrow_audit().ok_or_else(|| {
        Error::Escrow("outcomes are sealed; release escrow under the frozen design first".into())
    })?;
    if !ms.design_digest.is_empty() && audit.design_digest != ms.design_digest {
        return Err(Error::Provenance("escrow was released under a different design than the matching".into()));
    }
    if ms.dataset_digest != ds.provenance() {
        return Err(Error::Provenance("matching was built on a different dataset".into()));
    }
    Ok(())
}

pub fn impute_clones(ms: &MatchSet, ds: &Dataset) -> Result<Imputation> {
    check_release(ms, ds)?;
    let y = ds.outcomes()?;
    let index = |id: &str| -> Result<usize> {
        ds.index_of(id).ok_or_else(|| Error::Provenance(format!("unit {id:?} missing from dataset")))
    };
    let mut rows = Vec::with_capacity(ms.groups.len());
    for g in &ms.groups {
        let mut sum = 0.0;
        for c in &g.clone_ids {
            sum += y[index(c)?];
        }
        rows.push(ImputedOutcome {
            focal_id: g.focal_id.clone(),
            focal_z: g.focal_z,
            k_used: g.size(),
            counterfactual: sum / g.size() as f64,
        });
    }
    let excluded = ms.unmatched.iter().map(|u| u.focal_id.clone()).collect();
    Ok(Imputation { rows, excluded })
}

/// Invariant check used by tests and the CLI: opposite arms, caliper
/// respected, no reuse without replacement, totals consistent.
pub fn validate_match_set(ms: &MatchSet, scores: &ScoreTable) -> Result<()> {
    let pos: HashMap<&str, usize> = scores.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let lookup = |id: &str| pos.get(id).copied().ok_or_else(|| Error::InvalidData(format!("unknown unit {id:?}")));
    let mut used: HashMap<u8, HashSet<&str>> = HashMap::new();
    let mut total = 0.0;
    for g in &ms.groups {
        let f = lookup(&g.focal_id)?;
        if g.clone_ids.is_empty() || g.clone_ids.len() > ms.spec.k {
            return Err(Error::InvalidData(format!("group {} has {} clones", g.group_index, g.clone_ids.len())));
        }
        for (c, &d) in g.clone_ids.iter().zip(&g.distances) {
            let ci = lookup(c)?;
            if scores.z[ci] == scores.z[f] {
                return Err(Error::InvalidData(format!("{} and {c} share an arm", g.focal_id)));
            }
            if (d - (scores.lp[f] - scores.lp[ci]).abs()).abs() > 0.0 {
                return Err(Error::InvalidData("recorded distance differs from |lp difference|".into()));
            }
            if ms.caliper.is_some_and(|cal| d > cal) {
                return Err(Error::InvalidData(format!("pair {} / {c} exceeds the caliper", g.focal_id)));
            }
            if !ms.spec.replacement && !used.entry(g.focal_z).or_default().insert(c.as_str()) {
                return Err(Error::InvalidData(format!("{c} reused without replacement")));
            }
            total += d;
        }
    }
    if (total - ms.total_distance).abs() > 1e-9 * (1.0 + total.abs()) {
        return Err(Error::InvalidData("total_distance is not the sum of pair distances".into()));
    }
    Ok(())
}
