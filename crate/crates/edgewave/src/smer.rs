//! Scheduling by (multiple) edge reversal: multigraph state, reversibility
//! management, demand normalization, deadlock prediction over simple cycles,
//! and synchronous period analysis.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VertexId = usize;

#[derive(Debug, Error)]
pub enum SmerError {
    #[error("reversibility must be at least 1")]
    ZeroReversibility,
    #[error("demands must contain a positive count")]
    ZeroDemand,
    #[error("demand lcm overflows u32")]
    LcmOverflow,
    #[error("unknown vertex {0}")]
    UnknownVertex(VertexId),
    #[error("no arc between {0} and {1}")]
    NoArc(VertexId, VertexId),
    #[error("invalid arc ({0},{1}): total {2}, toward {3}")]
    BadArc(VertexId, VertexId, u32, u32),
    #[error("vertex {0} is not a sink")]
    NotASink(VertexId),
    #[error("vertex list is not a simple cycle in the graph")]
    NotACycle,
    #[error("demands missing vertex {0}")]
    DemandMissing(VertexId),
}

/// Undirected multigraph with per-arc edge counts and orientation state.
/// An arc between i and j holds `total` parallel edges, `toward(i)` of which
/// currently point at i; the pair (i,j) and (j,i) name the same arc.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MultigraphRepr", into = "MultigraphRepr")]
pub struct Multigraph {
    vertices: Vec<VertexId>,
    /// keyed (min, max); value.toward_first counts edges toward the min vertex
    arcs: BTreeMap<(VertexId, VertexId), ArcState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ArcState {
    total: u32,
    toward_first: u32,
}

#[derive(Serialize, Deserialize)]
struct MultigraphRepr {
    vertices: Vec<VertexId>,
    arcs: Vec<ArcRepr>,
}

#[derive(Serialize, Deserialize)]
struct ArcRepr {
    a: VertexId,
    b: VertexId,
    total: u32,
    toward_first: u32,
}

impl From<Multigraph> for MultigraphRepr {
    fn from(g: Multigraph) -> Self {
        MultigraphRepr {
            vertices: g.vertices.clone(),
            arcs: g
                .arcs
                .iter()
                .map(|(&(a, b), s)| ArcRepr {
                    a,
                    b,
                    total: s.total,
                    toward_first: s.toward_first,
                })
                .collect(),
        }
    }
}

impl TryFrom<MultigraphRepr> for Multigraph {
    type Error = SmerError;
    fn try_from(repr: MultigraphRepr) -> Result<Self, SmerError> {
        let mut g = Multigraph::new();
        for v in repr.vertices {
            g.add_vertex(v);
        }
        for arc in repr.arcs {
            g.add_arc(arc.a, arc.b, arc.total, arc.toward_first)?;
        }
        Ok(g)
    }
}

impl Default for Multigraph {
    fn default() -> Self {
        Self::new()
    }
}

impl Multigraph {
    pub fn new() -> Self {
        Multigraph {
            vertices: Vec::new(),
            arcs: BTreeMap::new(),
        }
    }

    pub fn add_vertex(&mut self, v: VertexId) {
        if !self.vertices.contains(&v) {
            self.vertices.push(v);
            self.vertices.sort_unstable();
        }
    }

    pub fn has_vertex(&self, v: VertexId) -> bool {
        self.vertices.binary_search(&v).is_ok()
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.vertices.iter().copied()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Adds or replaces the arc between i and j. `toward_i` of the `total`
    /// edges start oriented toward i.
    pub fn add_arc(
        &mut self,
        i: VertexId,
        j: VertexId,
        total: u32,
        toward_i: u32,
    ) -> Result<(), SmerError> {
        if i == j || total == 0 || toward_i > total {
            return Err(SmerError::BadArc(i, j, total, toward_i));
        }
        if !self.has_vertex(i) {
            return Err(SmerError::UnknownVertex(i));
        }
        if !self.has_vertex(j) {
            return Err(SmerError::UnknownVertex(j));
        }
        let (key, toward_first) = if i < j {
            ((i, j), toward_i)
        } else {
            ((j, i), total - toward_i)
        };
        self.arcs.insert(key, ArcState { total, toward_first });
        Ok(())
    }

    pub fn arc_total(&self, i: VertexId, j: VertexId) -> Result<u32, SmerError> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.arcs
            .get(&key)
            .map(|s| s.total)
            .ok_or(SmerError::NoArc(i, j))
    }

    /// Edge count currently oriented toward v on the arc between v and u.
    pub fn toward(&self, v: VertexId, u: VertexId) -> Result<u32, SmerError> {
        let key = if v < u { (v, u) } else { (u, v) };
        let s = self.arcs.get(&key).ok_or(SmerError::NoArc(v, u))?;
        Ok(if v < u {
            s.toward_first
        } else {
            s.total - s.toward_first
        })
    }

    fn set_toward(&mut self, v: VertexId, u: VertexId, count: u32) {
        let key = if v < u { (v, u) } else { (u, v) };
        let s = self.arcs.get_mut(&key).expect("arc exists");
        debug_assert!(count <= s.total);
        s.toward_first = if v < u { count } else { s.total - count };
    }

    pub fn neighbors(&self, v: VertexId) -> Vec<VertexId> {
        self.arcs
            .keys()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn arcs(&self) -> impl Iterator<Item = (VertexId, VertexId, u32, u32)> + '_ {
        self.arcs
            .iter()
            .map(|(&(a, b), s)| (a, b, s.total, s.toward_first))
    }

    /// True iff every incident arc has at least r_v edges oriented toward v.
    /// A vertex with no arcs is vacuously a sink.
    pub fn is_sink(&self, v: VertexId, r: &Reversibilities) -> bool {
        let rv = r.get(v);
        self.neighbors(v)
            .iter()
            .all(|&u| self.toward(v, u).unwrap() >= rv)
    }

    /// Operates v: r_v edges flip away from v on every incident arc. Calling
    /// this at a vertex that is not a sink under r_v is a contract violation.
    pub fn reverse_edges(&mut self, v: VertexId, r_v: u32) -> Result<(), SmerError> {
        if r_v == 0 {
            return Err(SmerError::ZeroReversibility);
        }
        if !self.has_vertex(v) {
            return Err(SmerError::UnknownVertex(v));
        }
        let neighbors = self.neighbors(v);
        for &u in &neighbors {
            if self.toward(v, u)? < r_v {
                return Err(SmerError::NotASink(v));
            }
        }
        for &u in &neighbors {
            let t = self.toward(v, u)?;
            self.set_toward(v, u, t - r_v);
        }
        Ok(())
    }

    /// Points every edge on every arc incident to v away from v.
    pub fn reverse_all_edges(&mut self, v: VertexId) -> Result<(), SmerError> {
        if !self.has_vertex(v) {
            return Err(SmerError::UnknownVertex(v));
        }
        for u in self.neighbors(v) {
            self.set_toward(v, u, 0);
        }
        Ok(())
    }

    /// Points every edge on every arc incident to v toward v.
    pub fn orient_all_toward(&mut self, v: VertexId) -> Result<(), SmerError> {
        if !self.has_vertex(v) {
            return Err(SmerError::UnknownVertex(v));
        }
        for u in self.neighbors(v) {
            let total = self.arc_total(v, u)?;
            self.set_toward(v, u, total);
        }
        Ok(())
    }

    /// Orientation fingerprint in arc-key order, for repeat detection.
    pub fn orientation_key(&self) -> Vec<u32> {
        self.arcs.values().map(|s| s.toward_first).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reversibilities(BTreeMap<VertexId, u32>);

impl Reversibilities {
    pub fn new() -> Self {
        Reversibilities(BTreeMap::new())
    }

    pub fn set(&mut self, v: VertexId, r: u32) {
        assert!(r >= 1, "reversibility must be at least 1");
        self.0.insert(v, r);
    }

    pub fn get(&self, v: VertexId) -> u32 {
        *self
            .0
            .get(&v)
            .unwrap_or_else(|| panic!("reversibility missing for vertex {v}"))
    }

    pub fn known(&self, v: VertexId) -> bool {
        self.0.contains_key(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (VertexId, u32)> + '_ {
        self.0.iter().map(|(&v, &r)| (v, r))
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u32, b: u32) -> Option<u32> {
    (a / gcd(a, b)).checked_mul(b)
}

/// e_{i,j} = r_i + r_j - gcd(r_i, r_j)
pub fn arc_size(r_i: u32, r_j: u32) -> Result<u32, SmerError> {
    if r_i == 0 || r_j == 0 {
        return Err(SmerError::ZeroReversibility);
    }
    Ok(r_i + r_j - gcd(r_i, r_j))
}

/// r_i = lcm(d_1..d_n) / d_i; every demand must be positive here (callers map
/// zero-demand vertices to r = lcm beforehand, see reversibilities_from_normalized).
pub fn reversibilities_from_demands(demands: &[u32]) -> Result<Vec<u32>, SmerError> {
    if demands.iter().any(|&d| d == 0) {
        return Err(SmerError::ZeroDemand);
    }
    let l = demands
        .iter()
        .try_fold(1u32, |acc, &d| lcm(acc, d).ok_or(SmerError::LcmOverflow))?;
    Ok(demands.iter().map(|&d| l / d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demands {
    pub raw: BTreeMap<VertexId, f64>,
    pub normalized: BTreeMap<VertexId, u32>,
    pub lcm_value: u32,
}

/// d_i = floor(100 * D_i / sum(D) + 0.5), with the lcm taken over positive d_i.
pub fn compute_demands(raw: &BTreeMap<VertexId, f64>) -> Result<Demands, SmerError> {
    let sum: f64 = raw.values().sum();
    if !(sum > 0.0) || raw.values().any(|&d| d < 0.0) {
        return Err(SmerError::ZeroDemand);
    }
    let normalized: BTreeMap<VertexId, u32> = raw
        .iter()
        .map(|(&v, &d)| (v, (100.0 * d / sum + 0.5).floor() as u32))
        .collect();
    let mut l = 1u32;
    let mut any = false;
    for &d in normalized.values() {
        if d > 0 {
            any = true;
            l = lcm(l, d).ok_or(SmerError::LcmOverflow)?;
        }
    }
    if !any {
        return Err(SmerError::ZeroDemand);
    }
    Ok(Demands {
        raw: raw.clone(),
        normalized,
        lcm_value: l,
    })
}

impl Demands {
    /// Wraps already-normalized demand values (raw mirrors them as reals).
    pub fn from_normalized(normalized: BTreeMap<VertexId, u32>) -> Result<Demands, SmerError> {
        let raw = normalized.iter().map(|(&v, &d)| (v, d as f64)).collect();
        let mut l = 1u32;
        let mut any = false;
        for &d in normalized.values() {
            if d > 0 {
                any = true;
                l = lcm(l, d).ok_or(SmerError::LcmOverflow)?;
            }
        }
        if !any {
            return Err(SmerError::ZeroDemand);
        }
        Ok(Demands {
            raw,
            normalized,
            lcm_value: l,
        })
    }
}

/// Reversibility per vertex from normalized demands; zero-demand vertices get
/// r = lcm, everyone else lcm / d_i.
pub fn reversibilities_from_normalized(d: &Demands) -> Reversibilities {
    let mut r = Reversibilities::new();
    for (&v, &dv) in &d.normalized {
        r.set(v, if dv == 0 { d.lcm_value } else { d.lcm_value / dv });
    }
    r
}

/// Demand-driven retargeting at a sink: recomputes every reversibility from
/// `new_demands` and resizes each arc incident to v to the new formula size
/// with all edges toward v, so v keeps operating (its green continues) and
/// neighbours pick the change up from the broadcast that follows.
pub fn change_reversibility(
    g: &mut Multigraph,
    r: &mut Reversibilities,
    v: VertexId,
    new_demands: &Demands,
) -> Result<(), SmerError> {
    if !g.has_vertex(v) {
        return Err(SmerError::UnknownVertex(v));
    }
    if !g.is_sink(v, r) {
        return Err(SmerError::NotASink(v));
    }
    for u in g.vertices() {
        if !new_demands.normalized.contains_key(&u) {
            return Err(SmerError::DemandMissing(u));
        }
    }
    let new_r = reversibilities_from_normalized(new_demands);
    if new_r == *r {
        return Ok(());
    }
    *r = new_r;
    for u in g.neighbors(v) {
        let total = arc_size(r.get(v), r.get(u))?;
        g.add_arc(v, u, total, total)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodStats {
    /// global synchronous steps per period
    pub period: u64,
    /// operations per vertex within one period
    pub ops: BTreeMap<VertexId, u64>,
    /// m/p as a reduced fraction when every vertex operates m times
    pub gamma: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeriodOutcome {
    Periodic(PeriodStats),
    /// the dynamics reached an orientation with no sink
    Deadlock { step: u64 },
    /// no repeat within the step budget
    NoRepeat,
}

/// Steps the synchronous dynamics (all sinks operate, then reverse) until an
/// orientation repeats or no sink remains.
pub fn simulate_period(
    g: &Multigraph,
    r: &Reversibilities,
    max_steps: u64,
) -> Result<PeriodOutcome, SmerError> {
    let mut state = g.clone();
    let vertices: Vec<VertexId> = state.vertices().collect();
    let mut ops: BTreeMap<VertexId, u64> = vertices.iter().map(|&v| (v, 0)).collect();
    let mut seen: HashMap<Vec<u32>, (u64, BTreeMap<VertexId, u64>)> = HashMap::new();
    for step in 0..max_steps {
        let key = state.orientation_key();
        if let Some((first, ops_then)) = seen.get(&key) {
            let period = step - first;
            let window: BTreeMap<VertexId, u64> = ops
                .iter()
                .map(|(&v, &m)| (v, m - ops_then[&v]))
                .collect();
            let gamma = uniform_gamma(&window, period);
            return Ok(PeriodOutcome::Periodic(PeriodStats {
                period,
                ops: window,
                gamma,
            }));
        }
        seen.insert(key, (step, ops.clone()));
        let sinks: Vec<VertexId> = vertices
            .iter()
            .copied()
            .filter(|&v| state.is_sink(v, r))
            .collect();
        if sinks.is_empty() {
            return Ok(PeriodOutcome::Deadlock { step });
        }
        for &v in &sinks {
            *ops.get_mut(&v).unwrap() += 1;
            state.reverse_edges(v, r.get(v))?;
        }
    }
    Ok(PeriodOutcome::NoRepeat)
}

fn uniform_gamma(ops: &BTreeMap<VertexId, u64>, period: u64) -> Option<(u64, u64)> {
    let mut values = ops.values();
    let first = *values.next()?;
    if period == 0 || !ops.values().all(|&m| m == first) {
        return None;
    }
    fn gcd64(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd64(b, a % b)
        }
    }
    let d = gcd64(first, period).max(1);
    Some((first / d, period / d))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleCheck {
    pub cycle: Vec<VertexId>,
    pub rho: u64,
    pub sigma_cw: u64,
    pub sigma_ccw: u64,
    pub deadlock_predicted: bool,
}

/// Evaluates the cycle criterion on one simple cycle: rho = sum of
/// reversibilities, sigma = the larger directed edge sum; deadlock is
/// predicted unless max(sigma_cw, sigma_ccw) < rho.
pub fn detect_deadlock(
    g: &Multigraph,
    r: &Reversibilities,
    cycle: &[VertexId],
) -> Result<CycleCheck, SmerError> {
    if cycle.len() < 2 {
        return Err(SmerError::NotACycle);
    }
    let mut distinct = cycle.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != cycle.len() {
        return Err(SmerError::NotACycle);
    }
    for &v in cycle {
        if !g.has_vertex(v) {
            return Err(SmerError::NotACycle);
        }
    }
    let mut rho = 0u64;
    let mut sigma_cw = 0u64;
    let mut sigma_ccw = 0u64;
    for (idx, &v) in cycle.iter().enumerate() {
        let next = cycle[(idx + 1) % cycle.len()];
        let toward_next = g.toward(next, v).map_err(|_| SmerError::NotACycle)?;
        let toward_v = g.toward(v, next).map_err(|_| SmerError::NotACycle)?;
        sigma_cw += toward_next as u64;
        sigma_ccw += toward_v as u64;
        rho += r.get(v) as u64;
    }
    let sigma = sigma_cw.max(sigma_ccw);
    Ok(CycleCheck {
        cycle: cycle.to_vec(),
        rho,
        sigma_cw,
        sigma_ccw,
        deadlock_predicted: sigma >= rho,
    })
}

/// All simple cycles of length >= 3 in the underlying simple graph, each
/// reported once with its smallest vertex first. Intended for small graphs.
pub fn simple_cycles(g: &Multigraph) -> Vec<Vec<VertexId>> {
    let vertices: Vec<VertexId> = g.vertices().collect();
    let mut cycles = Vec::new();
    for &start in &vertices {
        let mut path = vec![start];
        dfs_cycles(g, start, start, &mut path, &mut cycles);
    }
    cycles
}

fn dfs_cycles(
    g: &Multigraph,
    start: VertexId,
    current: VertexId,
    path: &mut Vec<VertexId>,
    out: &mut Vec<Vec<VertexId>>,
) {
    for u in g.neighbors(current) {
        if u == start && path.len() >= 3 {
            // canonical orientation: second element smaller than last
            if path[1] < path[path.len() - 1] {
                out.push(path.clone());
            }
        } else if u > start && !path.contains(&u) {
            path.push(u);
            dfs_cycles(g, start, u, path, out);
            path.pop();
        }
    }
}

/// True iff no simple cycle of the graph predicts deadlock.
pub fn predict_deadlock_free(g: &Multigraph, r: &Reversibilities) -> bool {
    simple_cycles(g)
        .iter()
        .all(|cycle| !detect_deadlock(g, r, cycle).unwrap().deadlock_predicted)
}
