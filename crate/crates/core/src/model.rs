//! The wireless benchmark model: mobile host entities on a toroidal plane
//! under Random Waypoint mobility, pinging every entity within a fixed radius
//! each step.
//!
//! Everything here is pure over entity state. Every random draw is keyed by
//! (global seed, entity, step, purpose), so results do not depend on which LP
//! hosts an entity — the property that makes a distributed run bit-identical
//! to a sequential one.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::rng::SimRng;

/// RNG purpose tags. Distinct tags give statistically independent streams for
/// the same (seed, entity, step).
pub const PURPOSE_INIT: u64 = 1;
pub const PURPOSE_ARRIVAL: u64 = 2;

/// A simulated mobile host. Serialization round-trips bit-exactly, which is
/// what lets migration preserve model semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct SmhEntity {
    pub entity_id: u32,
    pub pos: (f64, f64),
    pub waypoint: (f64, f64),
    pub speed: f64,
    pub pause_left: u32,
}

pub const ENTITY_BLOB_LEN: usize = 4 + 8 * 5 + 4;

impl SmhEntity {
    /// Fresh entity with position, waypoint and speed drawn from the entity's
    /// init stream.
    pub fn init(entity_id: u32, seed: u64, cfg: &ModelConfig) -> Self {
        let mut rng = entity_rng(seed, entity_id, 0, PURPOSE_INIT);
        let pos = (rng.range_f64(0.0, cfg.space_l), rng.range_f64(0.0, cfg.space_l));
        let waypoint = (rng.range_f64(0.0, cfg.space_l), rng.range_f64(0.0, cfg.space_l));
        let speed = rng.range_f64(cfg.v_min, cfg.v_max);
        Self { entity_id, pos, waypoint, speed, pause_left: 0 }
    }

    /// Bit-exact binary form used by the Migrate frame.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENTITY_BLOB_LEN);
        out.extend_from_slice(&self.entity_id.to_be_bytes());
        for v in [self.pos.0, self.pos.1, self.waypoint.0, self.waypoint.1, self.speed] {
            out.extend_from_slice(&v.to_bits().to_be_bytes());
        }
        out.extend_from_slice(&self.pause_left.to_be_bytes());
        out
    }

    pub fn from_blob(blob: &[u8]) -> Result<Self, ModelError> {
        if blob.len() != ENTITY_BLOB_LEN {
            return Err(ModelError::BadBlob(blob.len()));
        }
        let f = |i: usize| {
            f64::from_bits(u64::from_be_bytes(blob[i..i + 8].try_into().unwrap()))
        };
        Ok(Self {
            entity_id: u32::from_be_bytes(blob[0..4].try_into().unwrap()),
            pos: (f(4), f(12)),
            waypoint: (f(20), f(28)),
            speed: f(36),
            pause_left: u32::from_be_bytes(blob[44..48].try_into().unwrap()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_entities: u32,
    pub space_l: f64,
    pub radius: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub pause_max: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_entities: 300,
            space_l: 10_000.0,
            radius: 250.0,
            v_min: 1.0,
            v_max: 10.0,
            pause_max: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.radius > 0.0 && self.radius < self.space_l / 2.0) {
            return Err(ModelError::BadConfig(format!(
                "radius {} must be in (0, L/2) for L={}",
                self.radius, self.space_l
            )));
        }
        if self.v_min > self.v_max || self.v_min < 0.0 {
            return Err(ModelError::BadConfig(format!(
                "speed range [{}, {}] invalid",
                self.v_min, self.v_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("entity blob has {0} bytes, expected {ENTITY_BLOB_LEN}")]
    BadBlob(usize),
    #[error("duplicate entity id {0} in position set")]
    DuplicateEntity(u32),
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Deterministic per-(seed, entity, step, purpose) stream. Identical across
/// hosts and partitionings because the key excludes any host identity.
pub fn entity_rng(global_seed: u64, entity_id: u32, step: u64, purpose: u64) -> SimRng {
    SimRng::from_parts(&[global_seed, entity_id as u64, step, purpose])
}

/// Euclidean distance under per-axis wraparound on the [0, L)² torus.
pub fn toroidal_dist(a: (f64, f64), b: (f64, f64), space_l: f64) -> f64 {
    let dx = axis_gap(a.0, b.0, space_l);
    let dy = axis_gap(a.1, b.1, space_l);
    (dx * dx + dy * dy).sqrt()
}

fn axis_gap(a: f64, b: f64, space_l: f64) -> f64 {
    let d = (a - b).abs();
    d.min(space_l - d)
}

/// Signed shortest displacement from `from` toward `to` along one axis,
/// taking the wrap seam when it is shorter.
fn axis_delta(from: f64, to: f64, space_l: f64) -> f64 {
    let d = to - from;
    if d > space_l / 2.0 {
        d - space_l
    } else if d < -space_l / 2.0 {
        d + space_l
    } else {
        d
    }
}

fn wrap(v: f64, space_l: f64) -> f64 {
    let w = v.rem_euclid(space_l);
    // rem_euclid can return exactly L when v is a tiny negative number.
    if w >= space_l { 0.0 } else { w }
}

/// One Random Waypoint step. Paused entities count down; an entity within
/// `speed` of its waypoint snaps to it and redraws pause, waypoint and speed
/// from its (seed, entity, step) arrival stream; otherwise it advances `speed`
/// units along the shortest toroidal direction.
pub fn rwp_step(e: &mut SmhEntity, seed: u64, step: u64, cfg: &ModelConfig) {
    if e.pause_left > 0 {
        e.pause_left -= 1;
        return;
    }
    if toroidal_dist(e.pos, e.waypoint, cfg.space_l) <= e.speed {
        e.pos = e.waypoint;
        let mut rng = entity_rng(seed, e.entity_id, step, PURPOSE_ARRIVAL);
        e.pause_left = rng.range_u64_inclusive(cfg.pause_max as u64) as u32;
        e.waypoint = (rng.range_f64(0.0, cfg.space_l), rng.range_f64(0.0, cfg.space_l));
        e.speed = rng.range_f64(cfg.v_min, cfg.v_max);
        return;
    }
    let dx = axis_delta(e.pos.0, e.waypoint.0, cfg.space_l);
    let dy = axis_delta(e.pos.1, e.waypoint.1, cfg.space_l);
    let dist = (dx * dx + dy * dy).sqrt();
    e.pos.0 = wrap(e.pos.0 + e.speed * dx / dist, cfg.space_l);
    e.pos.1 = wrap(e.pos.1 + e.speed * dy / dist, cfg.space_l);
}

/// All directed pings for one step: (a, b) iff a ≠ b and the toroidal distance
/// is within the radius (boundary inclusive). Output is sorted.
///
/// Uses a uniform grid over the torus; candidate pairs are confirmed with the
/// same `toroidal_dist ≤ radius` predicate a brute-force check would use, so
/// the result set is identical.
pub fn compute_pings(
    all_positions: &[(u32, f64, f64)],
    cfg: &ModelConfig,
) -> Result<Vec<(u32, u32)>, ModelError> {
    let grid = PositionGrid::build(all_positions, cfg)?;
    let mut pings = Vec::new();
    for &(id, x, y) in all_positions {
        grid.neighbors_within_radius(id, (x, y), |other| pings.push((id, other)));
    }
    pings.sort_unstable();
    Ok(pings)
}

/// Uniform grid index over the torus with cell size ≥ radius, so all
/// within-radius neighbors sit in the 3×3 cell block around a point.
pub struct PositionGrid {
    cells: Vec<Vec<(u32, f64, f64)>>,
    cells_per_axis: usize,
    cell_size: f64,
    space_l: f64,
    radius: f64,
}

impl PositionGrid {
    pub fn build(positions: &[(u32, f64, f64)], cfg: &ModelConfig) -> Result<Self, ModelError> {
        let mut seen = BTreeMap::new();
        for &(id, _, _) in positions {
            if seen.insert(id, ()).is_some() {
                return Err(ModelError::DuplicateEntity(id));
            }
        }
        // Wrap adjacency only works with at least 3 cells per axis.
        let cells_per_axis = ((cfg.space_l / cfg.radius).floor() as usize).max(3).min(1 << 12);
        let cell_size = cfg.space_l / cells_per_axis as f64;
        let mut grid = Self {
            cells: vec![Vec::new(); cells_per_axis * cells_per_axis],
            cells_per_axis,
            cell_size,
            space_l: cfg.space_l,
            radius: cfg.radius,
        };
        for &(id, x, y) in positions {
            let idx = grid.cell_index(x, y);
            grid.cells[idx].push((id, x, y));
        }
        Ok(grid)
    }

    fn cell_coord(&self, v: f64) -> usize {
        ((v / self.cell_size) as usize).min(self.cells_per_axis - 1)
    }

    fn cell_index(&self, x: f64, y: f64) -> usize {
        self.cell_coord(y) * self.cells_per_axis + self.cell_coord(x)
    }

    /// Invoke `emit` with every other entity within the radius of `pos`.
    pub fn neighbors_within_radius(&self, id: u32, pos: (f64, f64), mut emit: impl FnMut(u32)) {
        let n = self.cells_per_axis as isize;
        let cx = self.cell_coord(pos.0) as isize;
        let cy = self.cell_coord(pos.1) as isize;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let gx = (cx + dx).rem_euclid(n) as usize;
                let gy = (cy + dy).rem_euclid(n) as usize;
                for &(other, ox, oy) in &self.cells[gy * self.cells_per_axis + gx] {
                    if other != id && toroidal_dist(pos, (ox, oy), self.space_l) <= self.radius {
                        emit(other);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn toroidal_dist_wraps_one_axis() {
        assert_eq!(toroidal_dist((0.0, 0.0), (9999.0, 0.0), 10_000.0), 1.0);
    }

    #[test]
    fn toroidal_dist_plain_triangle() {
        assert_eq!(toroidal_dist((1.0, 2.0), (4.0, 6.0), 10_000.0), 5.0);
    }

    #[test]
    fn toroidal_dist_wraps_both_axes() {
        let d = toroidal_dist((500.0, 500.0), (9500.0, 9500.0), 10_000.0);
        assert!((d - 1000.0 * 2.0f64.sqrt()).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn rwp_moves_along_unit_vector() {
        let mut e = SmhEntity {
            entity_id: 0,
            pos: (0.0, 0.0),
            waypoint: (3.0, 4.0),
            speed: 1.0,
            pause_left: 0,
        };
        rwp_step(&mut e, 1, 0, &cfg());
        assert!((e.pos.0 - 0.6).abs() < 1e-12);
        assert!((e.pos.1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rwp_arrival_redraws_from_entity_stream() {
        let mut e = SmhEntity {
            entity_id: 7,
            pos: (5.0, 5.0),
            waypoint: (5.0, 5.0),
            speed: 2.0,
            pause_left: 0,
        };
        rwp_step(&mut e, 99, 3, &cfg());
        assert_eq!(e.pos, (5.0, 5.0));
        assert_eq!(e.pause_left, 0); // pause_max = 0

        // The redraw must come from the (seed, entity, step) arrival stream.
        let mut rng = entity_rng(99, 7, 3, PURPOSE_ARRIVAL);
        let _pause = rng.range_u64_inclusive(0);
        let wp = (rng.range_f64(0.0, 10_000.0), rng.range_f64(0.0, 10_000.0));
        let speed = rng.range_f64(1.0, 10.0);
        assert_eq!(e.waypoint, wp);
        assert_eq!(e.speed, speed);
    }

    #[test]
    fn rwp_wraps_across_the_seam() {
        let mut e = SmhEntity {
            entity_id: 0,
            pos: (9999.0, 0.0),
            waypoint: (2.0, 0.0),
            speed: 1.0,
            pause_left: 0,
        };
        rwp_step(&mut e, 1, 0, &cfg());
        assert!((e.pos.0 - 0.0).abs() < 1e-9, "got {:?}", e.pos);
        assert_eq!(e.pos.1, 0.0);
    }

    #[test]
    fn rwp_pause_counts_down_without_moving() {
        let mut e = SmhEntity {
            entity_id: 0,
            pos: (1.0, 1.0),
            waypoint: (9.0, 9.0),
            speed: 1.0,
            pause_left: 2,
        };
        rwp_step(&mut e, 1, 0, &cfg());
        assert_eq!(e.pos, (1.0, 1.0));
        assert_eq!(e.pause_left, 1);
    }

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let e = SmhEntity {
            entity_id: 42,
            pos: (0.1 + 0.2, 9999.999999),
            waypoint: (f64::MIN_POSITIVE, 5000.0),
            speed: 3.7,
            pause_left: 11,
        };
        let back = SmhEntity::from_blob(&e.to_blob()).unwrap();
        assert_eq!(back.pos.0.to_bits(), e.pos.0.to_bits());
        assert_eq!(back, e);
        assert!(SmhEntity::from_blob(&[0u8; 5]).is_err());
    }

    #[test]
    fn pings_boundary_inclusive_and_symmetric() {
        let positions = vec![(0u32, 0.0, 0.0), (1u32, 250.0, 0.0)];
        let pings = compute_pings(&positions, &cfg()).unwrap();
        assert_eq!(pings, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn single_entity_has_no_pings() {
        let positions = vec![(0u32, 1.0, 2.0)];
        assert!(compute_pings(&positions, &cfg()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_entity_is_a_consistency_error() {
        let positions = vec![(3u32, 0.0, 0.0), (3u32, 5.0, 5.0)];
        assert!(matches!(
            compute_pings(&positions, &cfg()),
            Err(ModelError::DuplicateEntity(3))
        ));
    }

    /// Brute-force all-pairs oracle, kept independent of the grid path.
    pub fn brute_force_pings(
        positions: &[(u32, f64, f64)],
        cfg: &ModelConfig,
    ) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for &(a, ax, ay) in positions {
            for &(b, bx, by) in positions {
                if a != b && toroidal_dist((ax, ay), (bx, by), cfg.space_l) <= cfg.radius {
                    out.push((a, b));
                }
            }
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn pings_match_brute_force_on_random_configurations() {
        let mut rng = SimRng::new(2024);
        for case in 0..100 {
            let n = 2 + (rng.next_u64() % 199) as u32; // N ≤ 200
            let c = ModelConfig {
                n_entities: n,
                space_l: 1000.0,
                radius: 40.0 + rng.range_f64(0.0, 200.0),
                ..ModelConfig::default()
            };
            let positions: Vec<(u32, f64, f64)> = (0..n)
                .map(|id| (id, rng.range_f64(0.0, c.space_l), rng.range_f64(0.0, c.space_l)))
                .collect();
            let fast = compute_pings(&positions, &c).unwrap();
            let slow = brute_force_pings(&positions, &c);
            assert_eq!(fast, slow, "case {case} n={n} r={}", c.radius);
        }
    }

    #[test]
    fn entity_rng_is_reproducible_and_host_free() {
        let a: Vec<u64> = {
            let mut r = entity_rng(5, 10, 20, PURPOSE_ARRIVAL);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = entity_rng(5, 10, 20, PURPOSE_ARRIVAL);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn entity_rng_first_outputs_collision_scan() {
        use std::collections::HashSet;
        let mut seen = HashSet::new();
        for id in 0..10_000u32 {
            let first = entity_rng(1234, id, 0, PURPOSE_INIT).next_u64();
            assert!(seen.insert(first), "collision at entity {id}");
        }
    }

    #[test]
    fn positions_stay_in_bounds_over_many_steps() {
        let c = cfg();
        let mut e = SmhEntity::init(3, 77, &c);
        for step in 0..100_000u64 {
            rwp_step(&mut e, 77, step, &c);
            assert!(
                (0.0..c.space_l).contains(&e.pos.0) && (0.0..c.space_l).contains(&e.pos.1),
                "escaped at step {step}: {:?}",
                e.pos
            );
            assert!((0.0..c.space_l).contains(&e.waypoint.0));
            assert!((0.0..c.space_l).contains(&e.waypoint.1));
        }
    }

    #[test]
    fn toroidal_metric_properties_on_random_triples() {
        let mut rng = SimRng::new(99);
        let l = 1000.0;
        for _ in 0..10_000 {
            let p = (rng.range_f64(0.0, l), rng.range_f64(0.0, l));
            let q = (rng.range_f64(0.0, l), rng.range_f64(0.0, l));
            let r = (rng.range_f64(0.0, l), rng.range_f64(0.0, l));
            let pq = toroidal_dist(p, q, l);
            let qp = toroidal_dist(q, p, l);
            assert_eq!(pq.to_bits(), qp.to_bits(), "symmetry");
            assert!(pq <= l / 2.0f64.sqrt() + 1e-9, "diameter bound");
            let pr = toroidal_dist(p, r, l);
            let rq = toroidal_dist(r, q, l);
            assert!(pq <= pr + rq + 1e-9, "triangle inequality");
        }
    }

    #[test]
    fn mean_neighbor_degree_matches_uniform_density() {
        // Uniform-torus density: E[degree] = (N-1)·π·r²/L².
        let c = ModelConfig { n_entities: 2000, ..ModelConfig::default() };
        let seed = 4242;
        let mut entities: Vec<SmhEntity> =
            (0..c.n_entities).map(|id| SmhEntity::init(id, seed, &c)).collect();
        let mut total_pings = 0usize;
        let n_steps = 60u64;
        for step in 0..n_steps {
            let positions: Vec<(u32, f64, f64)> =
                entities.iter().map(|e| (e.entity_id, e.pos.0, e.pos.1)).collect();
            total_pings += compute_pings(&positions, &c).unwrap().len();
            for e in entities.iter_mut() {
                rwp_step(e, seed, step, &c);
            }
        }
        let mean_degree = total_pings as f64 / (n_steps as f64 * c.n_entities as f64);
        let expected = (c.n_entities - 1) as f64 * std::f64::consts::PI * c.radius * c.radius
            / (c.space_l * c.space_l);
        let rel = (mean_degree - expected).abs() / expected;
        assert!(rel < 0.10, "mean degree {mean_degree}, expected {expected}, rel {rel}");
    }
}
