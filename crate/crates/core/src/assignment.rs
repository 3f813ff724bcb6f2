//! Request-to-vehicle matching.
//!
//! Two strategies share one instance type:
//! * [`assign_fcfs`] (S1) walks requests oldest first and hands each the nearest free vehicle.
//! * [`assign_optimal`] (S2) solves the min-cost bipartite problem exactly.
//!
//! When requests outnumber vehicles every vehicle is used and the cost of a
//! pair is `d_rv - alpha * w_r`, so long-waiting requests are preferred. Otherwise
//! every request is served and the cost is the pickup distance alone.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::domain::Position;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestCandidate {
    pub id: u32,
    pub origin: Position,
    /// Elapsed wait in seconds.
    pub wait: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleCandidate {
    pub id: u32,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentInstance {
    pub requests: Vec<RequestCandidate>,
    pub vehicles: Vec<VehicleCandidate>,
    /// Meters of pickup distance traded per second of wait.
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub request: u32,
    pub vehicle: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub matches: Vec<Match>,
    pub objective: f64,
}

impl AssignmentResult {
    fn empty() -> Self {
        AssignmentResult { matches: Vec::new(), objective: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStrategy {
    /// S1: first come first served, nearest available vehicle.
    #[default]
    Fcfs,
    /// S2: exact min-cost matching.
    Optimal,
}

impl AssignmentStrategy {
    pub fn solve(&self, instance: &AssignmentInstance) -> AssignmentResult {
        match self {
            AssignmentStrategy::Fcfs => assign_fcfs(instance),
            AssignmentStrategy::Optimal => assign_optimal(instance),
        }
    }
}

impl AssignmentInstance {
    /// True when requests outnumber vehicles (wait-weighted objective).
    pub fn vehicle_limited(&self) -> bool {
        self.requests.len() > self.vehicles.len()
    }

    /// Objective of a match set under the regime of this instance.
    pub fn objective_of(&self, matches: &[Match]) -> f64 {
        let weighted = self.vehicle_limited();
        matches
            .iter()
            .map(|m| {
                let r = self.requests.iter().find(|r| r.id == m.request).expect("unknown request id");
                let v = self.vehicles.iter().find(|v| v.id == m.vehicle).expect("unknown vehicle id");
                let d = r.origin.l1(&v.position);
                if weighted {
                    d - self.alpha * r.wait
                } else {
                    d
                }
            })
            .sum()
    }

    /// Checks the capacity constraints of both regimes.
    pub fn is_feasible(&self, matches: &[Match]) -> bool {
        let mut rs: Vec<u32> = matches.iter().map(|m| m.request).collect();
        let mut vs: Vec<u32> = matches.iter().map(|m| m.vehicle).collect();
        rs.sort_unstable();
        vs.sort_unstable();
        let unique = rs.windows(2).all(|w| w[0] != w[1]) && vs.windows(2).all(|w| w[0] != w[1]);
        let known = rs.iter().all(|id| self.requests.iter().any(|r| r.id == *id))
            && vs.iter().all(|id| self.vehicles.iter().any(|v| v.id == *id));
        unique && known && matches.len() == self.requests.len().min(self.vehicles.len())
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
///
/// Shortest augmenting paths with dual potentials; arbitrary real costs,
/// including negative ones. Ties resolve toward the lowest column index.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "min_cost_assignment needs rows <= cols");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
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
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn sorted_sides(instance: &AssignmentInstance) -> (Vec<RequestCandidate>, Vec<VehicleCandidate>) {
    let mut rs = instance.requests.clone();
    let mut vs = instance.vehicles.clone();
    rs.sort_by_key(|r| r.id);
    vs.sort_by_key(|v| v.id);
    (rs, vs)
}

/// S2: exact optimum of the matching program for the instance's regime.
pub fn assign_optimal(instance: &AssignmentInstance) -> AssignmentResult {
    if instance.requests.is_empty() || instance.vehicles.is_empty() {
        return AssignmentResult::empty();
    }
    let (rs, vs) = sorted_sides(instance);
    let mut matches = Vec::with_capacity(rs.len().min(vs.len()));
    if instance.vehicle_limited() {
        let cost: Vec<Vec<f64>> = vs
            .iter()
            .map(|v| rs.iter().map(|r| r.origin.l1(&v.position) - instance.alpha * r.wait).collect())
            .collect();
        for (vi, ri) in min_cost_assignment(&cost).into_iter().enumerate() {
            matches.push(Match { request: rs[ri].id, vehicle: vs[vi].id });
        }
    } else {
        let cost: Vec<Vec<f64>> =
            rs.iter().map(|r| vs.iter().map(|v| r.origin.l1(&v.position)).collect()).collect();
        for (ri, vi) in min_cost_assignment(&cost).into_iter().enumerate() {
            matches.push(Match { request: rs[ri].id, vehicle: vs[vi].id });
        }
    }
    matches.sort_by_key(|m| m.request);
    let objective = instance.objective_of(&matches);
    AssignmentResult { matches, objective }
}

/// S1: oldest request first (ties by id), each takes its nearest free vehicle (ties by id).
pub fn assign_fcfs(instance: &AssignmentInstance) -> AssignmentResult {
    let (mut rs, vs) = sorted_sides(instance);
    rs.sort_by(|a, b| b.wait.total_cmp(&a.wait).then(a.id.cmp(&b.id)));
    let mut taken = vec![false; vs.len()];
    let mut matches = Vec::new();
    for r in &rs {
        let best = vs
            .iter()
            .enumerate()
            .filter(|(k, _)| !taken[*k])
            .min_by(|(_, a), (_, b)| r.origin.l1(&a.position).total_cmp(&r.origin.l1(&b.position)));
        match best {
            Some((k, v)) => {
                taken[k] = true;
                matches.push(Match { request: r.id, vehicle: v.id });
            }
            None => break,
        }
    }
    let objective = instance.objective_of(&matches);
    AssignmentResult { matches, objective }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u32, x: f64, wait: f64) -> RequestCandidate {
        RequestCandidate { id, origin: Position::new(x, 0.0), wait }
    }

    fn veh(id: u32, x: f64) -> VehicleCandidate {
        VehicleCandidate { id, position: Position::new(x, 0.0) }
    }

    #[test]
    fn single_request_takes_nearest() {
        let inst = AssignmentInstance { requests: vec![req(0, 0.0, 0.0)], vehicles: vec![veh(0, 100.0), veh(1, 50.0)], alpha: 5.0 };
        let r = assign_optimal(&inst);
        assert_eq!(r.matches, vec![Match { request: 0, vehicle: 1 }]);
        assert_eq!(r.objective, 50.0);
        assert_eq!(assign_fcfs(&inst), r);
    }

    #[test]
    fn scarce_vehicle_goes_to_longest_wait() {
        // Enumerated: serving the 60 s request costs 100-300=-200, the 10 s one 100-50=50.
        let inst = AssignmentInstance {
            requests: vec![req(0, 100.0, 10.0), req(1, -100.0, 60.0)],
            vehicles: vec![veh(0, 0.0)],
            alpha: 5.0,
        };
        let r = assign_optimal(&inst);
        assert_eq!(r.matches, vec![Match { request: 1, vehicle: 0 }]);
        assert_eq!(r.objective, -200.0);
    }

    #[test]
    fn fcfs_first_arrival_wins_contested_vehicle() {
        // A (waited longer) and B share nearest vehicle 0.
        let inst = AssignmentInstance {
            requests: vec![req(7, 10.0, 30.0), req(3, 20.0, 90.0)],
            vehicles: vec![veh(0, 15.0), veh(1, 500.0)],
            alpha: 1.0,
        };
        let r = assign_fcfs(&inst);
        assert!(r.matches.contains(&Match { request: 3, vehicle: 0 }));
        assert!(r.matches.contains(&Match { request: 7, vehicle: 1 }));
    }

    #[test]
    fn fcfs_hand_trace_three_by_three() {
        // Request positions 0, 40, 100 with waits 30, 20, 10 (processed in that order).
        // Vehicles at 45, 60, 130.
        // r0 -> nearest 45 (v0), r1 -> nearest of {60,130} = 60 (v1), r2 -> 130 (v2).
        let inst = AssignmentInstance {
            requests: vec![req(0, 0.0, 30.0), req(1, 40.0, 20.0), req(2, 100.0, 10.0)],
            vehicles: vec![veh(0, 45.0), veh(1, 60.0), veh(2, 130.0)],
            alpha: 0.0,
        };
        let r = assign_fcfs(&inst);
        assert_eq!(
            r.matches,
            vec![Match { request: 0, vehicle: 0 }, Match { request: 1, vehicle: 1 }, Match { request: 2, vehicle: 2 }]
        );
        assert_eq!(r.objective, 45.0 + 20.0 + 30.0);
        // Swapping r0 and r1 also costs 95, so only dominance is asserted.
        assert!(assign_optimal(&inst).objective <= r.objective);
    }

    #[test]
    fn empty_side_is_noop() {
        let inst = AssignmentInstance { requests: vec![], vehicles: vec![veh(0, 0.0)], alpha: 1.0 };
        assert!(assign_optimal(&inst).matches.is_empty());
        assert!(assign_fcfs(&inst).matches.is_empty());
    }

    #[test]
    fn square_hungarian_known_optimum() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = min_cost_assignment(&cost);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn negative_costs_handled() {
        let cost = vec![vec![-5.0, -1.0, 0.0], vec![-4.0, -6.0, 2.0]];
        let a = min_cost_assignment(&cost);
        assert_eq!(a, vec![0, 1]);
    }
}
