//! Per-run counters and timings. In ledger mode the clocks are virtual, so
//! two runs with the same seed produce identical metrics, down to the bit.

/// Counters for a single step, summed across LPs when runs are merged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub pings_total: u64,
    pub pings_remote: u64,
    pub digest_frames: u64,
    pub ping_frames: u64,
    pub migrate_frames: u64,
    pub migrations: u64,
}

impl StepMetrics {
    pub fn add(&mut self, other: &StepMetrics) {
        self.pings_total += other.pings_total;
        self.pings_remote += other.pings_remote;
        self.digest_frames += other.digest_frames;
        self.ping_frames += other.ping_frames;
        self.migrate_frames += other.migrate_frames;
        self.migrations += other.migrations;
    }
}

/// One run's totals: wall clock of the simulation phase, bootstrap time
/// (reported separately), message counters, and the per-step breakdown.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub wct_s: f64,
    pub init_s: f64,
    pub pings_total: u64,
    pub pings_remote: u64,
    pub digest_frames: u64,
    pub ping_frames: u64,
    pub migrate_frames: u64,
    pub migrations: u64,
    pub per_step: Vec<StepMetrics>,
}

impl RunMetrics {
    /// Merge per-LP metrics into a run-level record: counters sum, clocks
    /// take the slowest LP.
    pub fn merge(lp_metrics: &[RunMetrics]) -> RunMetrics {
        let mut merged = RunMetrics::default();
        for m in lp_metrics {
            merged.wct_s = merged.wct_s.max(m.wct_s);
            merged.init_s = merged.init_s.max(m.init_s);
            merged.pings_total += m.pings_total;
            merged.pings_remote += m.pings_remote;
            merged.digest_frames += m.digest_frames;
            merged.ping_frames += m.ping_frames;
            merged.migrate_frames += m.migrate_frames;
            merged.migrations += m.migrations;
            if merged.per_step.len() < m.per_step.len() {
                merged.per_step.resize(m.per_step.len(), StepMetrics::default());
            }
            for (acc, step) in merged.per_step.iter_mut().zip(&m.per_step) {
                acc.add(step);
            }
        }
        merged
    }

    pub fn record_step(&mut self, step: StepMetrics) {
        self.pings_total += step.pings_total;
        self.pings_remote += step.pings_remote;
        self.digest_frames += step.digest_frames;
        self.ping_frames += step.ping_frames;
        self.migrate_frames += step.migrate_frames;
        self.migrations += step.migrations;
        self.per_step.push(step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_sums_counters_and_takes_max_clock() {
        let a = RunMetrics {
            wct_s: 1.5,
            init_s: 0.2,
            pings_total: 10,
            pings_remote: 4,
            per_step: vec![StepMetrics { pings_total: 10, ..Default::default() }],
            ..Default::default()
        };
        let b = RunMetrics {
            wct_s: 2.0,
            init_s: 0.1,
            pings_total: 6,
            pings_remote: 6,
            per_step: vec![StepMetrics { pings_total: 6, ..Default::default() }],
            ..Default::default()
        };
        let m = RunMetrics::merge(&[a, b]);
        assert_eq!(m.wct_s, 2.0);
        assert_eq!(m.init_s, 0.2);
        assert_eq!(m.pings_total, 16);
        assert_eq!(m.pings_remote, 10);
        assert_eq!(m.per_step[0].pings_total, 16);
    }
}
