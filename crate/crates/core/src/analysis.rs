//! Post-processing of platoon logs: spacing profiles, string stability,
//! smoothness and same-kind similarity. Everything here is pure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scenario::{PlatoonRow, RunOutput};
use crate::world::{VehicleId, VehicleKind};

/// Amplitude ratio at or below which a follower counts as string-stable.
pub const STRING_STABLE_RATIO: f64 = 1.05;

/// Arc spacing to the predecessor over time, per follower.
pub fn spacing_profile(log: &[PlatoonRow]) -> BTreeMap<VehicleId, Vec<(f64, f64)>> {
    let mut out: BTreeMap<VehicleId, Vec<(f64, f64)>> = BTreeMap::new();
    for r in log {
        if let Some(s) = r.spacing_to_pred_m {
            out.entry(r.vehicle_id).or_default().push((r.time_s, s));
        }
    }
    out
}

/// Speed trace of every vehicle, in log order.
pub fn speed_traces(log: &[PlatoonRow]) -> BTreeMap<VehicleId, Vec<(f64, f64)>> {
    let mut out: BTreeMap<VehicleId, Vec<(f64, f64)>> = BTreeMap::new();
    for r in log {
        out.entry(r.vehicle_id)
            .or_default()
            .push((r.time_s, r.speed_mps));
    }
    out
}

/// Rows at or after `from_s`.
pub fn after(log: &[PlatoonRow], from_s: f64) -> Vec<PlatoonRow> {
    log.iter().filter(|r| r.time_s >= from_s).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowerRatio {
    pub follower: VehicleId,
    pub predecessor: VehicleId,
    pub follower_amplitude_mps: f64,
    pub predecessor_amplitude_mps: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StringStability {
    /// The leader is not periodic or the log is shorter than one period
    /// past the warm-up.
    NotApplicable { reason: String },
    Evaluated {
        window_start_s: f64,
        window_end_s: f64,
        /// Sorted by follower.
        ratios: Vec<FollowerRatio>,
    },
}

impl StringStability {
    pub fn is_stable(&self) -> Option<bool> {
        match self {
            StringStability::NotApplicable { .. } => None,
            StringStability::Evaluated { ratios, .. } => {
                Some(ratios.iter().all(|r| r.ratio <= STRING_STABLE_RATIO))
            }
        }
    }

    pub fn max_ratio(&self) -> Option<f64> {
        match self {
            StringStability::NotApplicable { .. } => None,
            StringStability::Evaluated { ratios, .. } => {
                ratios.iter().map(|r| r.ratio).reduce(f64::max)
            }
        }
    }
}

fn peak_to_peak(samples: impl Iterator<Item = f64>) -> Option<f64> {
    let (lo, hi) = samples.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    (lo <= hi).then_some(hi - lo)
}

/// Ratio of each follower's speed peak-to-peak over the last full leader
/// period to that of its predecessor. Predecessors are taken from the last
/// logged row of each follower.
pub fn string_stability(
    log: &[PlatoonRow],
    period_s: Option<f64>,
    warmup_s: f64,
) -> StringStability {
    let na = |reason: &str| StringStability::NotApplicable {
        reason: reason.into(),
    };
    let Some(period) = period_s.filter(|p| *p > 0.0) else {
        return na("leader profile is not periodic");
    };
    let Some(end) = log.iter().map(|r| r.time_s).reduce(f64::max) else {
        return na("empty log");
    };
    let start = end - period;
    if start < warmup_s {
        return na("log shorter than warm-up plus one period");
    }
    let window: Vec<&PlatoonRow> = log.iter().filter(|r| r.time_s >= start).collect();
    let amplitude = |id: VehicleId| {
        peak_to_peak(
            window
                .iter()
                .filter(|r| r.vehicle_id == id)
                .map(|r| r.speed_mps),
        )
    };
    let mut last_pred: BTreeMap<VehicleId, Option<VehicleId>> = BTreeMap::new();
    for r in &window {
        last_pred.insert(r.vehicle_id, r.predecessor);
    }
    let mut ratios = Vec::new();
    for (id, pred) in last_pred {
        let Some(pred) = pred else { continue };
        let (Some(af), Some(ap)) = (amplitude(id), amplitude(pred)) else {
            continue;
        };
        let ratio = if ap > 0.0 {
            af / ap
        } else if af == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        ratios.push(FollowerRatio {
            follower: id,
            predecessor: pred,
            follower_amplitude_mps: af,
            predecessor_amplitude_mps: ap,
            ratio,
        });
    }
    StringStability::Evaluated {
        window_start_s: start,
        window_end_s: end,
        ratios,
    }
}

/// RMS of the discrete speed second difference divided by dt², i.e. RMS
/// jerk in m/s³. Absent with fewer than three samples.
pub fn rms_jerk(trace: &[(f64, f64)]) -> Option<f64> {
    if trace.len() < 3 {
        return None;
    }
    let sum: f64 = trace
        .windows(3)
        .map(|w| {
            let dt = 0.5 * (w[2].0 - w[0].0);
            let j = (w[2].1 - 2.0 * w[1].1 + w[0].1) / (dt * dt);
            j * j
        })
        .sum();
    Some((sum / (trace.len() - 2) as f64).sqrt())
}

/// RMS jerk of one vehicle over the whole log.
pub fn smoothness_metric(log: &[PlatoonRow], vehicle: VehicleId) -> Option<f64> {
    let trace: Vec<(f64, f64)> = log
        .iter()
        .filter(|r| r.vehicle_id == vehicle)
        .map(|r| (r.time_s, r.speed_mps))
        .collect();
    rms_jerk(&trace)
}

/// RMS difference of two speed traces over their common samples.
pub fn trace_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return None;
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x.1 - y.1).powi(2)).sum();
    Some((sum / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub mean_within_kind: f64,
    pub mean_across_kind: f64,
}

/// Mean pairwise speed-trace distance within and across vehicle kinds.
/// Absent unless both kinds of pair exist.
pub fn same_kind_similarity(
    log: &[PlatoonRow],
    kinds: &BTreeMap<VehicleId, VehicleKind>,
) -> Option<Similarity> {
    let traces = speed_traces(log);
    let ids: Vec<VehicleId> = traces
        .keys()
        .copied()
        .filter(|id| kinds.contains_key(id))
        .collect();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let Some(d) = trace_distance(&traces[a], &traces[b]) else {
                continue;
            };
            if kinds.get(a) == kinds.get(b) {
                within.push(d);
            } else {
                across.push(d);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Some(Similarity {
        mean_within_kind: mean(&within)?,
        mean_across_kind: mean(&across)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonMetrics {
    pub warmup_s: f64,
    pub collision: bool,
    pub min_spacing_m: Option<f64>,
    pub max_spacing_m: Option<f64>,
    pub max_speed_physical_mps: Option<f64>,
    pub max_speed_virtual_mps: Option<f64>,
    pub string_stability: StringStability,
    pub rms_jerk: BTreeMap<VehicleId, f64>,
    pub mean_rms_jerk_physical: Option<f64>,
    pub mean_rms_jerk_virtual: Option<f64>,
    pub similarity: Option<Similarity>,
}

impl PlatoonMetrics {
    /// Virtual vehicles strictly smoother than physical ones.
    pub fn smoothness_ordering_holds(&self) -> Option<bool> {
        Some(self.mean_rms_jerk_virtual? < self.mean_rms_jerk_physical?)
    }
}

/// Metrics of a finished run. Speed caps cover the whole log; everything
/// else is measured after the warm-up.
pub fn analyze(out: &RunOutput) -> PlatoonMetrics {
    let sc = &out.config.scenario;
    let steady = after(&out.platoon_log, sc.warmup_s);
    let spacings = steady.iter().filter_map(|r| r.spacing_to_pred_m);
    let min_spacing_m = spacings.clone().reduce(f64::min);
    let max_spacing_m = spacings.reduce(f64::max);
    let max_speed = |kind: VehicleKind| {
        out.platoon_log
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.speed_mps)
            .reduce(f64::max)
    };
    let mut jerk = BTreeMap::new();
    for id in out.kinds.keys() {
        if let Some(j) = smoothness_metric(&steady, *id) {
            jerk.insert(*id, j);
        }
    }
    let mean_jerk = |kind: VehicleKind| {
        let v: Vec<f64> = jerk
            .iter()
            .filter(|(id, _)| out.kinds.get(id) == Some(&kind))
            .map(|(_, j)| *j)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    PlatoonMetrics {
        warmup_s: sc.warmup_s,
        collision: out.abort.is_some(),
        min_spacing_m,
        max_spacing_m,
        max_speed_physical_mps: max_speed(VehicleKind::Physical),
        max_speed_virtual_mps: max_speed(VehicleKind::Virtual),
        string_stability: string_stability(&steady, sc.leader_profile.period_s(), sc.warmup_s),
        mean_rms_jerk_physical: mean_jerk(VehicleKind::Physical),
        mean_rms_jerk_virtual: mean_jerk(VehicleKind::Virtual),
        rms_jerk: jerk,
        similarity: same_kind_similarity(&steady, &out.kinds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(
        t: f64,
        id: u32,
        kind: VehicleKind,
        v: f64,
        pred: Option<u32>,
        s: Option<f64>,
    ) -> PlatoonRow {
        PlatoonRow {
            time_s: t,
            vehicle_id: VehicleId(id),
            kind,
            arc_pos_m: 0.0,
            speed_mps: v,
            predecessor: pred.map(VehicleId),
            spacing_to_pred_m: s,
            gap_m: s.map(|s| s - 0.2),
        }
    }

    fn platoon(speed: impl Fn(u32, f64) -> f64, n: u32, secs: f64) -> Vec<PlatoonRow> {
        let mut log = vec![];
        for k in 0..(secs * 8.0) as usize {
            let t = k as f64 / 8.0;
            for id in 1..=n {
                let pred = (id > 1).then(|| id - 1);
                log.push(row(
                    t,
                    id,
                    VehicleKind::Physical,
                    speed(id, t),
                    pred,
                    pred.map(|_| 0.5),
                ));
            }
        }
        log
    }

    #[test]
    fn stationary_pair_has_constant_spacing() {
        let log = platoon(|_, _| 0.0, 2, 5.0);
        let prof = spacing_profile(&log);
        assert_eq!(prof.len(), 1);
        assert!(prof[&VehicleId(2)].iter().all(|(_, s)| *s == 0.5));
    }

    #[test]
    fn perfect_tracking_has_unit_ratio() {
        let log = platoon(
            |_, t| 0.18 + 0.08 * (t * std::f64::consts::TAU / 30.0).sin(),
            4,
            90.0,
        );
        let ss = string_stability(&log, Some(30.0), 30.0);
        let StringStability::Evaluated { ratios, .. } = &ss else {
            panic!("{ss:?}")
        };
        assert_eq!(ratios.len(), 3);
        assert!(ratios.iter().all(|r| (r.ratio - 1.0).abs() < 1e-12));
        assert_eq!(ss.is_stable(), Some(true));
    }

    #[test]
    fn amplifying_platoon_is_flagged() {
        let log = platoon(
            |id, t| 0.18 + 0.02 * id as f64 * (t * std::f64::consts::TAU / 30.0).sin(),
            3,
            90.0,
        );
        let ss = string_stability(&log, Some(30.0), 30.0);
        assert_eq!(ss.is_stable(), Some(false));
        assert!((ss.max_ratio().unwrap() - 2.0).abs() < 0.01);
        let json = serde_json::to_string(&ss).unwrap();
        assert_eq!(serde_json::from_str::<StringStability>(&json).unwrap(), ss);
    }

    #[test]
    fn non_periodic_or_short_runs_are_not_applicable() {
        let log = platoon(|_, _| 0.2, 2, 40.0);
        assert!(matches!(
            string_stability(&log, None, 30.0),
            StringStability::NotApplicable { .. }
        ));
        assert!(matches!(
            string_stability(&log, Some(30.0), 30.0),
            StringStability::NotApplicable { .. }
        ));
        assert_eq!(string_stability(&log, None, 0.0).is_stable(), None);
    }

    #[test]
    fn jerk_of_constant_and_degenerate_traces() {
        let trace: Vec<(f64, f64)> = (0..50).map(|k| (k as f64 * 0.125, 0.2)).collect();
        assert_eq!(rms_jerk(&trace), Some(0.0));
        assert_eq!(rms_jerk(&trace[..1]), None);
        assert_eq!(rms_jerk(&trace[..2]), None);
    }

    #[test]
    fn jerk_of_parabola_matches_oracle() {
        // v = c t² has second derivative 2c everywhere.
        let c = 0.3;
        let trace: Vec<(f64, f64)> = (0..40)
            .map(|k| (k as f64 * 0.125, c * (k as f64 * 0.125).powi(2)))
            .collect();
        assert!((rms_jerk(&trace).unwrap() - 2.0 * c).abs() < 1e-9);
    }

    #[test]
    fn similarity_separates_kinds() {
        let kinds: BTreeMap<VehicleId, VehicleKind> = [
            (VehicleId(1), VehicleKind::Physical),
            (VehicleId(2), VehicleKind::Physical),
            (VehicleId(3), VehicleKind::Virtual),
            (VehicleId(4), VehicleKind::Virtual),
        ]
        .into();
        let mut log = vec![];
        for k in 0..80 {
            let t = k as f64 / 8.0;
            for (id, kind) in &kinds {
                let v = match kind {
                    VehicleKind::Physical => 0.2 + 0.001 * id.0 as f64,
                    VehicleKind::Virtual => 0.1,
                };
                log.push(row(t, id.0, *kind, v, None, None));
            }
        }
        let s = same_kind_similarity(&log, &kinds).unwrap();
        assert!(s.mean_within_kind < s.mean_across_kind);
        let one_kind: BTreeMap<_, _> = kinds.iter().take(2).map(|(a, b)| (*a, *b)).collect();
        assert!(same_kind_similarity(&log, &one_kind).is_none());
    }
}
