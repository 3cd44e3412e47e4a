//! Cluster bookkeeping for per-person-year volatility pairs.
//!
//! Every person-year points at a cluster holding a [`SigmaPair`]. The state
//! tracks population counts per cluster, per-individual counts, and the
//! backward run length `Q[i][t]`: how many consecutive years immediately
//! before `t` share the value held at `t-1`.

use crate::error::{Error, Result};
use crate::model::SigmaPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterId(pub u32);

impl ClusterId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cluster {
    pub sigma: SigmaPair,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VolatilityState {
    clusters: Vec<Option<Cluster>>,
    free: Vec<u32>,
    assignment: Vec<Vec<Option<ClusterId>>>,
    /// Per individual: (cluster, number of that individual's years in it).
    local: Vec<Vec<(ClusterId, usize)>>,
    run_length: Vec<Vec<usize>>,
    assigned: usize,
}

impl VolatilityState {
    /// All person-years unassigned and no clusters.
    pub fn empty(shape: &[usize]) -> Self {
        VolatilityState {
            clusters: Vec::new(),
            free: Vec::new(),
            assignment: shape.iter().map(|&n| vec![None; n]).collect(),
            local: vec![Vec::new(); shape.len()],
            run_length: shape.iter().map(|&n| vec![0; n]).collect(),
            assigned: 0,
        }
    }

    /// Every person-year in one cluster.
    pub fn single_cluster(shape: &[usize], sigma: SigmaPair) -> Self {
        let mut v = Self::empty(shape);
        let c = v.create_cluster(sigma);
        for (i, &n) in shape.iter().enumerate() {
            for t in 0..n {
                v.assign(i, t, c);
            }
        }
        v
    }

    /// Builds a state from a value table and per-person-year labels.
    pub fn from_labels(values: &[SigmaPair], labels: &[Vec<usize>]) -> Result<Self> {
        let shape: Vec<usize> = labels.iter().map(|l| l.len()).collect();
        let mut v = Self::empty(&shape);
        let ids: Vec<ClusterId> = values.iter().map(|&s| v.create_cluster(s)).collect();
        for (i, row) in labels.iter().enumerate() {
            for (t, &l) in row.iter().enumerate() {
                let c = *ids
                    .get(l)
                    .ok_or_else(|| Error::InvalidInput(format!("label {l} out of range")))?;
                v.assign(i, t, c);
            }
        }
        // drop table entries nobody uses
        for c in ids {
            if v.cluster(c).count == 0 {
                v.release(c);
            }
        }
        Ok(v)
    }

    pub fn n_individuals(&self) -> usize {
        self.assignment.len()
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.assignment[i].len()
    }

    pub fn assignment(&self, i: usize, t: usize) -> Option<ClusterId> {
        self.assignment[i][t]
    }

    pub fn sigma(&self, i: usize, t: usize) -> Option<SigmaPair> {
        self.assignment[i][t].map(|c| self.cluster(c).sigma)
    }

    pub fn cluster(&self, c: ClusterId) -> &Cluster {
        self.clusters[c.idx()]
            .as_ref()
            .expect("cluster id refers to a live cluster")
    }

    /// Live clusters in id order.
    pub fn clusters(&self) -> impl Iterator<Item = (ClusterId, &Cluster)> {
        self.clusters
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.as_ref().map(|c| (ClusterId(k as u32), c)))
    }

    /// Number of occupied clusters (L).
    pub fn n_clusters(&self) -> usize {
        self.clusters().filter(|(_, c)| c.count > 0).count()
    }

    /// Distinct values held by individual `i` (L_i).
    pub fn n_local(&self, i: usize) -> usize {
        self.local[i].len()
    }

    /// Individual `i`'s count in cluster `c` (n_{l_i}).
    pub fn local_count(&self, i: usize, c: ClusterId) -> usize {
        self.local[i]
            .iter()
            .find(|(k, _)| *k == c)
            .map_or(0, |(_, n)| *n)
    }

    pub fn local_counts(&self, i: usize) -> &[(ClusterId, usize)] {
        &self.local[i]
    }

    pub fn run_length(&self, i: usize, t: usize) -> usize {
        self.run_length[i][t]
    }

    pub fn assigned(&self) -> usize {
        self.assigned
    }

    /// Adds an empty cluster, reusing a released slot if any.
    pub fn create_cluster(&mut self, sigma: SigmaPair) -> ClusterId {
        let cl = Some(Cluster { sigma, count: 0 });
        match self.free.pop() {
            Some(k) => {
                self.clusters[k as usize] = cl;
                ClusterId(k)
            }
            None => {
                self.clusters.push(cl);
                ClusterId(self.clusters.len() as u32 - 1)
            }
        }
    }

    fn release(&mut self, c: ClusterId) {
        debug_assert_eq!(self.cluster(c).count, 0);
        self.clusters[c.idx()] = None;
        self.free.push(c.0);
    }

    /// Removes person-year `(i, t)` from its cluster; empty clusters are
    /// released. Run lengths of `i` are rebuilt.
    pub fn unassign(&mut self, i: usize, t: usize) -> Option<ClusterId> {
        let c = self.assignment[i][t].take()?;
        self.assigned -= 1;
        let cl = self.clusters[c.idx()].as_mut().expect("live cluster");
        cl.count -= 1;
        if cl.count == 0 {
            self.release(c);
        }
        let pos = self.local[i]
            .iter()
            .position(|(k, _)| *k == c)
            .expect("local count present");
        self.local[i][pos].1 -= 1;
        if self.local[i][pos].1 == 0 {
            self.local[i].remove(pos);
        }
        self.rebuild_run_lengths(i);
        Some(c)
    }

    /// Points person-year `(i, t)` at cluster `c`, replacing any previous
    /// assignment.
    pub fn assign(&mut self, i: usize, t: usize, c: ClusterId) {
        match self.assignment[i][t] {
            Some(cur) if cur == c => return,
            Some(_) => {
                self.unassign(i, t);
            }
            None => {}
        }
        self.clusters[c.idx()]
            .as_mut()
            .expect("assigning to a live cluster")
            .count += 1;
        self.assignment[i][t] = Some(c);
        self.assigned += 1;
        match self.local[i].iter_mut().find(|(k, _)| *k == c) {
            Some(e) => e.1 += 1,
            None => self.local[i].push((c, 1)),
        }
        self.rebuild_run_lengths(i);
    }

    fn rebuild_run_lengths(&mut self, i: usize) {
        let q = compute_run_lengths(&self.assignment[i]);
        self.run_length[i] = q;
    }

    /// Verifies counts, run lengths, and cluster occupancy against the
    /// assignments.
    pub fn check_invariants(&self) -> Result<()> {
        let mut counts = vec![0usize; self.clusters.len()];
        let mut total = 0;
        for (i, row) in self.assignment.iter().enumerate() {
            let mut local: Vec<(ClusterId, usize)> = Vec::new();
            for (t, a) in row.iter().enumerate() {
                let Some(c) = *a else { continue };
                if self.clusters.get(c.idx()).and_then(|c| c.as_ref()).is_none() {
                    return Err(Error::InvariantViolation(format!(
                        "({i}, {t}) points at dead cluster {}",
                        c.0
                    )));
                }
                counts[c.idx()] += 1;
                total += 1;
                match local.iter_mut().find(|(k, _)| *k == c) {
                    Some(e) => e.1 += 1,
                    None => local.push((c, 1)),
                }
            }
            let mut stored = self.local[i].clone();
            stored.sort();
            local.sort();
            if stored != local {
                return Err(Error::InvariantViolation(format!(
                    "individual {i}: local counts {stored:?} != recomputed {local:?}"
                )));
            }
            if compute_run_lengths(row) != self.run_length[i] {
                return Err(Error::InvariantViolation(format!(
                    "individual {i}: stored run lengths disagree with assignments"
                )));
            }
        }
        for (k, cl) in self.clusters.iter().enumerate() {
            match cl {
                Some(cl) if cl.count != counts[k] => {
                    return Err(Error::InvariantViolation(format!(
                        "cluster {k}: stored count {} != {}",
                        cl.count, counts[k]
                    )))
                }
                Some(cl) if cl.count == 0 => {
                    return Err(Error::InvariantViolation(format!("cluster {k} is live but empty")))
                }
                Some(cl) if !(cl.sigma.omega > 0.0 && cl.sigma.epsilon > 0.0) => {
                    return Err(Error::InvariantViolation(format!(
                        "cluster {k} has nonpositive variance"
                    )))
                }
                None if counts[k] > 0 => {
                    return Err(Error::InvariantViolation(format!("dead cluster {k} is referenced")))
                }
                _ => {}
            }
        }
        if total != self.assigned {
            return Err(Error::InvariantViolation(format!(
                "assigned total {} != recomputed {total}",
                self.assigned
            )));
        }
        Ok(())
    }
}

/// `Q[t]` = largest `q` such that years `t-1, ..., t-q` all hold the value
/// of year `t-1`. Zero when `t-1` does not exist or is unassigned.
pub fn compute_run_lengths(row: &[Option<ClusterId>]) -> Vec<usize> {
    let mut q = vec![0; row.len()];
    for t in 1..row.len() {
        q[t] = match (row[t - 1], t >= 2) {
            (None, _) => 0,
            (Some(_), false) => 1,
            (Some(prev), true) if row[t - 2] == Some(prev) => q[t - 1] + 1,
            (Some(_), true) => 1,
        };
    }
    q
}
