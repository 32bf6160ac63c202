//! Self-clustering load balancer: watches where each local entity's pings go
//! and plans migrations toward the LP it talks to most.
//!
//! The heuristic is a majority-interaction rule over a sliding window of
//! recent steps, rate-capped per evaluation and damped with a per-entity
//! cooldown so entities sitting between clusters do not ping-pong.

use std::collections::{BTreeMap, VecDeque};

/// Per-entity ring buffer: the last W steps of per-destination ping counts.
/// Counts toward the hosting LP itself are included.
#[derive(Clone, Debug, Default)]
pub struct InteractionWindow {
    buckets: VecDeque<BTreeMap<u32, u64>>,
    current: BTreeMap<u32, u64>,
    /// Step of the entity's last migration, for cooldown.
    pub migrated_at: Option<u64>,
}

impl InteractionWindow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate pings into the current step's bucket.
    pub fn record(&mut self, dest_lp: u32, count: u64) {
        *self.current.entry(dest_lp).or_insert(0) += count;
    }

    /// Close the current step's bucket, evicting the oldest past `window`.
    pub fn roll_step(&mut self, window: usize) {
        let bucket = std::mem::take(&mut self.current);
        self.buckets.push_back(bucket);
        while self.buckets.len() > window {
            self.buckets.pop_front();
        }
    }

    /// Sum of counts per destination LP over the closed buckets.
    pub fn totals(&self) -> BTreeMap<u32, u64> {
        let mut totals = BTreeMap::new();
        for bucket in &self.buckets {
            for (&lp, &n) in bucket {
                *totals.entry(lp).or_insert(0) += n;
            }
        }
        totals
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalancerConfig {
    pub enabled: bool,
    /// Sliding window length in steps.
    pub window: usize,
    /// Evaluate a migration plan every this many steps.
    pub eval_period: u64,
    /// Migrate only when external pull exceeds factor × internal pull, strictly.
    pub migration_factor: f64,
    /// At most this fraction of local entities may migrate per evaluation.
    pub max_migrations_frac: f64,
    /// Steps an entity must stay put after migrating.
    pub cooldown: u64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            window: 10,
            eval_period: 10,
            migration_factor: 1.0,
            max_migrations_frac: 0.05,
            cooldown: 20,
        }
    }
}

/// Windows for all entities hosted by one LP.
pub type WindowSet = BTreeMap<u32, InteractionWindow>;

/// Plan migrations for one evaluation: for each entity not in cooldown, find
/// the foreign LP it pinged most over the window; migrate iff that pull
/// strictly exceeds `factor` × the pull toward the hosting LP. The plan is
/// truncated to `max_migrations_frac` × local entity count, keeping the
/// largest (external − internal) margins; ties break toward lower entity ids.
pub fn plan_migrations(
    windows: &WindowSet,
    cfg: &BalancerConfig,
    now_step: u64,
    self_lp: u32,
) -> Vec<(u32, u32)> {
    if !cfg.enabled {
        return Vec::new();
    }
    let mut candidates: Vec<(i128, u32, u32)> = Vec::new(); // (margin, entity, dest)
    for (&entity_id, window) in windows {
        if let Some(at) = window.migrated_at {
            if now_step.saturating_sub(at) < cfg.cooldown {
                continue;
            }
        }
        let totals = window.totals();
        let internal = totals.get(&self_lp).copied().unwrap_or(0);
        // Lowest lp_id wins an external tie, keeping plans deterministic.
        let best = totals
            .iter()
            .filter(|(&lp, _)| lp != self_lp)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
        let Some((&dest, &external)) = best else { continue };
        if external as f64 > cfg.migration_factor * internal as f64 {
            candidates.push((external as i128 - internal as i128, entity_id, dest));
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let cap = (cfg.max_migrations_frac * windows.len() as f64).floor() as usize;
    candidates.truncate(cap);
    candidates.into_iter().map(|(_, entity, dest)| (entity, dest)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enabled_cfg() -> BalancerConfig {
        BalancerConfig { enabled: true, ..BalancerConfig::default() }
    }

    fn window_with(counts: &[(u32, u64)]) -> InteractionWindow {
        let mut w = InteractionWindow::new();
        for &(lp, n) in counts {
            w.record(lp, n);
        }
        w.roll_step(10);
        w
    }

    #[test]
    fn record_accumulates_into_current_bucket() {
        let mut w = InteractionWindow::new();
        w.record(2, 3);
        w.roll_step(10);
        assert_eq!(w.totals().get(&2), Some(&3));
    }

    #[test]
    fn ring_evicts_oldest_step() {
        let mut w = InteractionWindow::new();
        for step in 0..11u64 {
            w.record(1, step + 1);
            w.roll_step(10);
        }
        assert_eq!(w.len(), 10);
        // Step 0 (count 1) evicted: 2+3+...+11 = 65.
        assert_eq!(w.totals().get(&1), Some(&65));
    }

    #[test]
    fn window_totals_equal_recorded_pings() {
        let mut w = InteractionWindow::new();
        let mut expected = 0u64;
        for step in 0..25u64 {
            let n = (step % 4) + 1;
            w.record((step % 3) as u32, n);
            if step >= 15 {
                expected += n;
            }
            w.roll_step(10);
        }
        let total: u64 = w.totals().values().sum();
        assert_eq!(total, expected);
    }

    #[test]
    fn majority_rule_migrates() {
        let mut windows = WindowSet::new();
        windows.insert(1, window_with(&[(0, 2), (2, 8)]));
        let plan = plan_migrations(&windows, &BalancerConfig {
            max_migrations_frac: 1.0,
            ..enabled_cfg()
        }, 100, 0);
        assert_eq!(plan, vec![(1, 2)]);
    }

    #[test]
    fn exact_tie_does_not_migrate() {
        let mut windows = WindowSet::new();
        windows.insert(1, window_with(&[(0, 5), (1, 5)]));
        let plan = plan_migrations(&windows, &BalancerConfig {
            max_migrations_frac: 1.0,
            ..enabled_cfg()
        }, 100, 0);
        assert!(plan.is_empty());
    }

    #[test]
    fn disabled_balancer_plans_nothing() {
        let mut windows = WindowSet::new();
        windows.insert(1, window_with(&[(0, 0), (2, 50)]));
        assert!(plan_migrations(&windows, &BalancerConfig::default(), 100, 0).is_empty());
    }

    #[test]
    fn plan_is_capped_to_largest_margins() {
        // 100 local entities; 12 candidates with distinct margins; cap 5.
        let mut windows = WindowSet::new();
        for id in 0..100u32 {
            if id < 12 {
                // margin = (10 + id) - 1
                windows.insert(id, window_with(&[(0, 1), (1, 10 + id as u64)]));
            } else {
                windows.insert(id, window_with(&[(0, 5)]));
            }
        }
        let plan = plan_migrations(&windows, &enabled_cfg(), 100, 0);
        assert_eq!(plan.len(), 5);
        // The five largest margins are entities 11, 10, 9, 8, 7.
        assert_eq!(plan, vec![(11, 1), (10, 1), (9, 1), (8, 1), (7, 1)]);
    }

    #[test]
    fn margin_ties_break_toward_lower_entity_id() {
        let mut windows = WindowSet::new();
        for id in [5u32, 3, 9] {
            windows.insert(id, window_with(&[(0, 1), (1, 7)]));
        }
        windows.insert(50, window_with(&[(0, 1)]));
        let plan = plan_migrations(&windows, &BalancerConfig {
            max_migrations_frac: 0.5, // floor(4 × 0.5) = 2
            ..enabled_cfg()
        }, 100, 0);
        assert_eq!(plan, vec![(3, 1), (5, 1)]);
    }

    #[test]
    fn cooldown_blocks_recent_migrants() {
        let mut w = window_with(&[(0, 0), (1, 9)]);
        w.migrated_at = Some(90);
        let mut windows = WindowSet::new();
        windows.insert(1, w);
        let cfg = BalancerConfig { max_migrations_frac: 1.0, ..enabled_cfg() };
        assert!(plan_migrations(&windows, &cfg, 100, 0).is_empty(), "90+20 > 100");
        assert_eq!(plan_migrations(&windows, &cfg, 110, 0).len(), 1, "cooldown elapsed");
    }

    #[test]
    fn external_tie_breaks_toward_lower_lp() {
        let mut windows = WindowSet::new();
        windows.insert(1, window_with(&[(0, 1), (3, 6), (2, 6)]));
        let plan = plan_migrations(&windows, &BalancerConfig {
            max_migrations_frac: 1.0,
            ..enabled_cfg()
        }, 100, 0);
        assert_eq!(plan, vec![(1, 2)]);
    }
}
