//! Displacement metrics, best-of-K evaluation, reports and latency measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::dataio::Trajectory;
use crate::error::{ensure, Result};

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean error over all steps.
pub fn ade(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ensure!(
        pred.len() == gt.len() && !gt.is_empty(),
        "ADE needs equal non-empty lengths, got {} and {}",
        pred.len(),
        gt.len()
    );
    let total: f64 = pred.points().iter().zip(gt.points()).map(|(a, b)| dist(*a, *b)).sum();
    Ok(total / gt.len() as f64)
}

/// Euclidean error at the final step.
pub fn fde(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ensure!(
        pred.len() == gt.len() && !gt.is_empty(),
        "FDE needs equal non-empty lengths, got {} and {}",
        pred.len(),
        gt.len()
    );
    Ok(dist(pred.points()[pred.len() - 1], gt.points()[gt.len() - 1]))
}

/// Best-of-K ADE and FDE, minimized independently.
pub fn min_over_k(preds: &[Trajectory], gt: &Trajectory) -> Result<(f64, f64)> {
    ensure!(!preds.is_empty(), "best-of-K needs at least one prediction");
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in preds {
        best.0 = best.0.min(ade(p, gt)?);
        best.1 = best.1.min(fde(p, gt)?);
    }
    Ok(best)
}

/// Extrapolates the last observed step displacement for `t_fut` steps.
pub fn constant_velocity(history: &Trajectory, t_fut: usize) -> Trajectory {
    let p = history.points();
    let last = p[p.len() - 1];
    let v = if p.len() >= 2 {
        let prev = p[p.len() - 2];
        [last[0] - prev[0], last[1] - prev[1]]
    } else {
        [0.0, 0.0]
    };
    Trajectory(
        (1..=t_fut)
            .map(|t| [last[0] + v[0] * t as f64, last[1] + v[1] * t as f64])
            .collect(),
    )
}

/// Per-agent outcome feeding a report.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentResult {
    pub scene: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub ade_1: f64,
    pub fde_1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneMetrics {
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    pub ade_1: f64,
    pub fde_1: f64,
    pub n_agents: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    pub ade_1: f64,
    pub fde_1: f64,
    pub n_agents: usize,
    pub params_m: f64,
    pub latency_ms_per_agent: f64,
    pub latency_variance: f64,
    pub scenes: BTreeMap<String, SceneMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Unweighted per-scene means over agents; top-level values are
    /// unweighted means over scenes.
    pub fn from_results(results: &[AgentResult], k: usize) -> EvalReport {
        let mut by_scene: BTreeMap<String, Vec<&AgentResult>> = BTreeMap::new();
        for r in results {
            by_scene.entry(r.scene.clone()).or_default().push(r);
        }
        let scenes: BTreeMap<String, SceneMetrics> = by_scene
            .into_iter()
            .map(|(name, rs)| {
                let m = SceneMetrics {
                    min_ade_k: mean(rs.iter().map(|r| r.min_ade)),
                    min_fde_k: mean(rs.iter().map(|r| r.min_fde)),
                    ade_1: mean(rs.iter().map(|r| r.ade_1)),
                    fde_1: mean(rs.iter().map(|r| r.fde_1)),
                    n_agents: rs.len(),
                };
                (name, m)
            })
            .collect();
        EvalReport {
            k,
            min_ade_k: mean(scenes.values().map(|s| s.min_ade_k)),
            min_fde_k: mean(scenes.values().map(|s| s.min_fde_k)),
            ade_1: mean(scenes.values().map(|s| s.ade_1)),
            fde_1: mean(scenes.values().map(|s| s.fde_1)),
            n_agents: results.len(),
            scenes,
            ..EvalReport::default()
        }
    }

    /// Element-wise mean of reports over repeated runs (same scenes).
    pub fn average(runs: &[EvalReport]) -> EvalReport {
        let Some(first) = runs.first() else {
            return EvalReport::default();
        };
        let avg = |f: &dyn Fn(&EvalReport) -> f64| mean(runs.iter().map(f));
        let scenes = first
            .scenes
            .keys()
            .map(|name| {
                let pick =
                    |f: &dyn Fn(&SceneMetrics) -> f64| mean(runs.iter().filter_map(|r| r.scenes.get(name)).map(f));
                let m = SceneMetrics {
                    min_ade_k: pick(&|s| s.min_ade_k),
                    min_fde_k: pick(&|s| s.min_fde_k),
                    ade_1: pick(&|s| s.ade_1),
                    fde_1: pick(&|s| s.fde_1),
                    n_agents: first.scenes[name].n_agents,
                };
                (name.clone(), m)
            })
            .collect();
        EvalReport {
            k: first.k,
            min_ade_k: avg(&|r| r.min_ade_k),
            min_fde_k: avg(&|r| r.min_fde_k),
            ade_1: avg(&|r| r.ade_1),
            fde_1: avg(&|r| r.fde_1),
            n_agents: first.n_agents,
            params_m: first.params_m,
            latency_ms_per_agent: avg(&|r| r.latency_ms_per_agent),
            latency_variance: avg(&|r| r.latency_variance),
            scenes,
        }
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let k = self.k;
        let _ = writeln!(s, "k={k}");
        let _ = writeln!(s, "min_ade_{k}={:.6}", self.min_ade_k);
        let _ = writeln!(s, "min_fde_{k}={:.6}", self.min_fde_k);
        let _ = writeln!(s, "ade_1={:.6}", self.ade_1);
        let _ = writeln!(s, "fde_1={:.6}", self.fde_1);
        let _ = writeln!(s, "n_agents={}", self.n_agents);
        let _ = writeln!(s, "params_m={:.6}", self.params_m);
        let _ = writeln!(s, "latency_ms_per_agent={:.6}", self.latency_ms_per_agent);
        let _ = writeln!(s, "latency_variance={:.6}", self.latency_variance);
        for (name, m) in &self.scenes {
            let _ = writeln!(s, "scene.{name}.min_ade_{k}={:.6}", m.min_ade_k);
            let _ = writeln!(s, "scene.{name}.min_fde_{k}={:.6}", m.min_fde_k);
            let _ = writeln!(s, "scene.{name}.ade_1={:.6}", m.ade_1);
            let _ = writeln!(s, "scene.{name}.fde_1={:.6}", m.fde_1);
            let _ = writeln!(s, "scene.{name}.n_agents={}", m.n_agents);
        }
        s
    }

    /// Aligned table with one row per scene and an `Average` row.
    pub fn table(&self) -> String {
        let k = self.k;
        let mut s = format!(
            "{:<12} {:>10} {:>10} {:>8} {:>8} {:>8}\n",
            "scene",
            format!("minADE_{k}"),
            format!("minFDE_{k}"),
            "ADE_1",
            "FDE_1",
            "agents"
        );
        let row = |s: &mut String, name: &str, a: f64, b: f64, c: f64, d: f64, n: usize| {
            let _ = writeln!(s, "{name:<12} {a:>10.3} {b:>10.3} {c:>8.3} {d:>8.3} {n:>8}");
        };
        for (name, m) in &self.scenes {
            row(&mut s, name, m.min_ade_k, m.min_fde_k, m.ade_1, m.fde_1, m.n_agents);
        }
        row(
            &mut s,
            "Average",
            self.min_ade_k,
            self.min_fde_k,
            self.ade_1,
            self.fde_1,
            self.n_agents,
        );
        let _ = writeln!(
            s,
            "params: {:.3} M   latency: {:.3} ms/agent (variance {:.4})",
            self.params_m, self.latency_ms_per_agent, self.latency_variance
        );
        s
    }
}

/// Median per-agent wall-clock time over 5 timed repeats after 2 warmups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latency {
    pub median_ms_per_agent: f64,
    pub variance: f64,
    pub samples: [f64; 5],
}

pub fn measure_latency(agents: usize, mut run: impl FnMut() -> Result<()>) -> Result<Latency> {
    ensure!(agents > 0, "latency needs at least one agent");
    for _ in 0..2 {
        run()?;
    }
    let mut samples = [0.0; 5];
    for s in samples.iter_mut() {
        let start = Instant::now();
        run()?;
        *s = start.elapsed().as_secs_f64() * 1e3 / agents as f64;
    }
    let mut sorted = samples;
    sorted.sort_by(f64::total_cmp);
    let m = samples.iter().sum::<f64>() / 5.0;
    let variance = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0;
    Ok(Latency {
        median_ms_per_agent: sorted[2],
        variance,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(points: &[[f64; 2]]) -> Trajectory {
        Trajectory(points.to_vec())
    }

    #[test]
    fn offsets() {
        let gt = Trajectory((0..12).map(|t| [t as f64, 0.0]).collect());
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        let shifted = gt.translated([0.3, 0.4]);
        assert!((ade(&shifted, &gt).unwrap() - 0.5).abs() < 1e-12);
        let mut last = gt.clone();
        last.0[11] = [11.0 + 3.0, 4.0];
        assert!((fde(&last, &gt).unwrap() - 5.0).abs() < 1e-12);
        assert!((ade(&last, &gt).unwrap() - 5.0 / 12.0).abs() < 1e-12);
        assert!(ade(&traj(&[[0.0, 0.0]]), &gt).is_err());
    }

    #[test]
    fn best_of_k_cases() {
        let gt = traj(&[[0.0, 0.0], [1.0, 1.0]]);
        let far = traj(&[[5.0, 0.0], [5.0, 5.0]]);
        assert_eq!(min_over_k(&[far.clone(), gt.clone()], &gt).unwrap(), (0.0, 0.0));
        let single = min_over_k(std::slice::from_ref(&far), &gt).unwrap();
        assert_eq!(single, (ade(&far, &gt).unwrap(), fde(&far, &gt).unwrap()));
        assert!(min_over_k(&[], &gt).is_err());
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let h = traj(&[[0.0, 0.0], [0.5, 0.25]]);
        let cv = constant_velocity(&h, 3);
        assert_eq!(cv.points(), &[[1.0, 0.5], [1.5, 0.75], [2.0, 1.0]]);
    }

    #[test]
    fn report_averages_scenes_unweighted() {
        let r = |scene: &str, v: f64| AgentResult {
            scene: scene.into(),
            min_ade: v,
            min_fde: v,
            ade_1: v,
            fde_1: v,
        };
        let rep = EvalReport::from_results(&[r("a", 1.0), r("a", 3.0), r("b", 0.0)], 20);
        assert_eq!(rep.scenes["a"].min_ade_k, 2.0);
        assert_eq!(rep.min_ade_k, 1.0);
        assert_eq!(rep.n_agents, 3);
        assert!(rep.to_kv().contains("min_ade_20=1.000000"));
        assert!(rep.table().contains("Average"));
    }

    #[test]
    fn latency_protocol_runs_seven_times() {
        let mut calls = 0;
        let l = measure_latency(4, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 7);
        assert!(l.variance >= 0.0 && l.median_ms_per_agent >= 0.0);
    }

    fn arb_traj(n: usize) -> impl Strategy<Value = Trajectory> {
        prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), n)
            .prop_map(|v| Trajectory(v.into_iter().map(|(x, y)| [x, y]).collect()))
    }

    proptest! {
        #[test]
        fn ade_matches_loop(a in arb_traj(12), b in arb_traj(12)) {
            let mut s = 0.0;
            for t in 0..12 {
                s += ((a.0[t][0] - b.0[t][0]).powi(2) + (a.0[t][1] - b.0[t][1]).powi(2)).sqrt();
            }
            prop_assert!((ade(&a, &b).unwrap() - s / 12.0).abs() < 1e-12);
            prop_assert!(fde(&a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn rigid_motion_invariance(a in arb_traj(12), b in arb_traj(12), th in 0.0..6.28f64, dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let (c, s) = (th.cos(), th.sin());
            let tf = |t: &Trajectory| Trajectory(t.0.iter().map(|p| [c * p[0] - s * p[1] + dx, s * p[0] + c * p[1] + dy]).collect());
            prop_assert!((ade(&tf(&a), &tf(&b)).unwrap() - ade(&a, &b).unwrap()).abs() < 1e-9);
            prop_assert!((fde(&tf(&a), &tf(&b)).unwrap() - fde(&a, &b).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn best_of_k_is_monotone(preds in prop::collection::vec(arb_traj(12), 20), gt in arb_traj(12)) {
            let full = min_over_k(&preds, &gt).unwrap();
            for start in [0, 5, 10] {
                let sub = min_over_k(&preds[start..start + 10], &gt).unwrap();
                prop_assert!(full.0 <= sub.0 && full.1 <= sub.1);
            }
        }
    }
}
