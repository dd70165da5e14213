//! Acceptance criteria 1-10 at full scale. Each criterion prints one
//! PASS/FAIL line; the target fails if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use ra_marl::consensus::{rounds_for_accuracy, ConsensusTopology, Graph, RoundsSpec, WeightRule};
use ra_marl::harness::{
    decentralized_cost, default_links, episodes_csv, overhead_table, run_experiment, run_single, summarize,
    timeseries_csv, Algorithm, Campaign, ExperimentConfig, OverheadSpec, Summary,
};
use ra_marl::learn::{critic_update, td_error, Actor, Critic, CriticSign, NetShape};
use ra_marl::seed::rng_from;
use ra_marl::sim::Action;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn full(algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        ..ExperimentConfig::default()
    }
}

fn campaign_summary(algorithm: Algorithm) -> Result<(Campaign, Summary), String> {
    let c = run_experiment(&full(algorithm)).map_err(|e| format!("{algorithm} campaign failed: {e}"))?;
    let s = summarize(&c);
    Ok((c, s))
}

fn mean_dist(x: &[f64]) -> (f64, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>().sqrt())
}

fn consensus_suite() -> Outcome {
    let mut rng = rng_from(1);
    let mut worst_mean: f64 = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    for n in [4, 8] {
        let t = ConsensusTopology::from_graph(Graph::ring_lattice(n, 1), WeightRule::EqualNeighbor, RoundsSpec::Fixed(3))
            .map_err(|e| e.to_string())?;
        for k in 0..100 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let g = k % 10;
            let y = t.gossip(&x, g).map_err(|e| e.to_string())?;
            let (mx, dx) = mean_dist(&x);
            let (my, _) = mean_dist(&y);
            let dy = y.iter().map(|v| (v - mx).powi(2)).sum::<f64>().sqrt();
            worst_mean = worst_mean.max((my - mx).abs());
            worst_excess = worst_excess.max(dy - t.lambda2().powi(g as i32) * dx);
        }
    }
    let cycle = ConsensusTopology::from_graph(Graph::ring_lattice(4, 1), WeightRule::EqualNeighbor, RoundsSpec::Fixed(1))
        .map_err(|e| e.to_string())?;
    let g = rounds_for_accuracy(cycle.weights(), 0.005).map_err(|e| e.to_string())?;
    check(
        worst_mean <= 1e-10 && worst_excess <= 1e-9 && g == 3,
        format!("mean drift {worst_mean:.1e}, worst contraction excess {worst_excess:.1e}, G(4-cycle, 0.005) = {g}"),
    )
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

fn central_difference(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    const STEP: f64 = 1e-5;
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + STEP;
            let up = f(&p);
            p[k] = orig - STEP;
            let down = f(&p);
            p[k] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let shape = NetShape {
        feature_dim: 6,
        hidden_width: 8,
        hidden_layers: 2,
    };
    let (mut actor_err, mut critic_err): (f64, f64) = (0.0, 0.0);
    for seed in 0..50 {
        let mut rng = rng_from(seed);
        let mut actor = Actor::new(shape, &mut rng);
        let n = actor.net.params().len();
        let params: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        actor.net.set_params(&params).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..shape.feature_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let action = if seed % 2 == 0 { Action::Wait } else { Action::Transmit };
        let analytic = actor.log_prob_gradient(&x, action).map_err(|e| e.to_string())?;
        let mut probe = actor.clone();
        let numeric = central_difference(&params, |p| {
            probe.net.set_params(p).expect("same shape");
            probe.log_prob(&x, action).expect("finite")
        });
        actor_err = actor_err.max(relative_error(&analytic, &numeric));

        let mut critic = Critic::deep_linear(shape, &mut rng);
        let m = critic.params().len();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        critic.set_params(&w).map_err(|e| e.to_string())?;
        let analytic = critic.value_gradient(&x).map_err(|e| e.to_string())?;
        let mut probe = critic.clone();
        let numeric = central_difference(&w, |p| {
            probe.set_params(p).expect("same shape");
            probe.value(&x).expect("finite")
        });
        critic_err = critic_err.max(relative_error(&analytic, &numeric));
    }
    check(
        actor_err <= 1e-4 && critic_err <= 1e-4,
        format!("worst relative error: actor {actor_err:.1e}, critic {critic_err:.1e}"),
    )
}

fn conservation_suite() -> Outcome {
    let mut rng = rng_from(3);
    let mut episodes = 0;
    let mut violations = 0;
    for (k, algo) in Algorithm::ALL.iter().cycle().take(200).enumerate() {
        let cfg = ExperimentConfig {
            algorithm: *algo,
            n_devices: rng.random_range(2..=8),
            horizon_slots: rng.random_range(50..=600),
            arrival_rate: rng.random_range(0.0..0.2),
            q_max: rng.random_range(1..=10),
            hidden_width: 16,
            hidden_layers: 2,
            episodes: 5,
            runs: 1,
            seed: k as u64,
            summary_window: 5,
            ..ExperimentConfig::default()
        };
        let (rec, _) = run_single(&cfg, 0).map_err(|e| format!("{algo}: {e}"))?;
        episodes += rec.episodes.len();
        violations += rec.episodes.iter().filter(|e| !e.conserved).count();
    }
    check(
        violations == 0 && episodes == 1000,
        format!("{episodes} episodes, {violations} conservation violations"),
    )
}

fn baseline_regression(baselines: &[(Algorithm, Summary)]) -> Outcome {
    let reference = [(Algorithm::RaP, 39.783), (Algorithm::RaFcw, 50.006), (Algorithm::RaAcw, 45.639)];
    let mut ok = true;
    let mut parts = Vec::new();
    for ((algo, s), (ref_algo, target)) in baselines.iter().zip(reference) {
        assert_eq!(*algo, ref_algo);
        let t = s.performance.tput.mean;
        let within = (t - target).abs() <= 0.15 * target;
        ok &= within;
        parts.push(format!("{algo} {t:.3} (ref {target})"));
    }
    let d = |i: usize| baselines[i].1.performance.delay.mean;
    let ordered = d(1) < d(0) && d(0) < d(2);
    ok &= ordered;
    parts.push(format!("delay FCW {:.3} < P {:.3} < ACW {:.3}: {ordered}", d(1), d(0), d(2)));
    check(ok, parts.join(", "))
}

fn learning_outcome(proposed: &Result<(Campaign, Summary), String>) -> Outcome {
    let (c, s) = proposed.as_ref().map_err(Clone::clone)?;
    let p = &s.performance;
    let first = s.first_window.tput.mean;
    let gain = p.tput.mean / first - 1.0;
    check(
        p.tput.mean >= 55.0 && p.pkt_c.mean <= 1.0 && p.delay.mean <= 0.85 && gain >= 0.30,
        format!(
            "{} runs: TPut {:.3} Mbps, collisions {:.3}, delay {:.3} ms, gain over first window {:.1}%",
            c.runs.len(),
            p.tput.mean,
            p.pkt_c.mean,
            p.delay.mean,
            100.0 * gain
        ),
    )
}

fn fairness(proposed: &Result<(Campaign, Summary), String>, baselines: &[(Algorithm, Summary)]) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (algo, s) in baselines {
        let (t, d) = (s.fairness.tput.n_gap, s.fairness.delay.n_gap);
        ok &= t >= 0.55 && d >= 0.55;
        parts.push(format!("{algo} {t:.3}/{d:.3}"));
    }
    match proposed {
        Ok((_, s)) => {
            let (t, d) = (s.fairness.tput.n_gap, s.fairness.delay.n_gap);
            ok &= t <= 0.20 && d <= 0.20;
            parts.insert(0, format!("Proposed {t:.3}/{d:.3}"));
        }
        Err(e) => {
            ok = false;
            parts.insert(0, format!("Proposed unavailable ({e})"));
        }
    }
    check(ok, format!("TPut/Delay N-Gap: {}", parts.join(", ")))
}

fn ctde_parity(
    proposed: &Result<(Campaign, Summary), String>,
    ctde: &Result<(Campaign, Summary), String>,
) -> Outcome {
    let (_, p) = proposed.as_ref().map_err(Clone::clone)?;
    let (_, c) = ctde.as_ref().map_err(Clone::clone)?;
    let (tp, tc) = (p.performance.tput.mean, c.performance.tput.mean);
    let rel = (tc - tp).abs() / tp;
    check(
        rel <= 0.05,
        format!("Proposed {tp:.3} vs RA-CTDE {tc:.3} Mbps, relative gap {:.1}%", 100.0 * rel),
    )
}

fn overhead() -> Outcome {
    let guo = OverheadSpec::guo(4).ctde_cost(4, 4);
    let dec = decentralized_cost(4, 1, 3, 1);
    let rows = overhead_table(2..=64, 4, 0.005).map_err(|e| e.to_string())?;
    let dominated = rows.iter().all(|r| r.guo > r.decentralized && r.yu > r.decentralized);
    let links_ok = rows.iter().all(|r| r.k == default_links(r.n));
    check(
        guo == 120 && dec == 12 && dominated && links_ok,
        format!("Guo(4, 4) = {guo}, decentralized(4, 1, 3) = {dec}, centralized above gossip for N = 2..64: {dominated}"),
    )
}

fn td_oracle() -> Outcome {
    const GAMMA: f64 = 0.9;
    const P: [[f64; 2]; 2] = [[0.7, 0.3], [0.4, 0.6]];
    const R: [f64; 2] = [1.0, -2.0];
    let mu = [4.0 / 7.0, 3.0 / 7.0];
    let phi = |s: usize| [s as f64];
    let det = (1.0 - GAMMA * P[0][0]) * (1.0 - GAMMA * P[1][1]) - GAMMA * P[0][1] * GAMMA * P[1][0];
    let v0 = ((1.0 - GAMMA * P[1][1]) * R[0] + GAMMA * P[0][1] * R[1]) / det;
    let v1 = ((1.0 - GAMMA * P[0][0]) * R[1] + GAMMA * P[1][0] * R[0]) / det;
    let target = [v1 - v0, v0];
    let mut critic = Critic::linear(1);
    for _ in 0..100_000 {
        let mut steps = Vec::with_capacity(4);
        for s in 0..2 {
            for (next, &prob) in P[s].iter().enumerate() {
                let td = td_error(&critic, R[s], &phi(next), &phi(s), GAMMA).map_err(|e| e.to_string())?;
                steps.push((s, td.delta, mu[s] * prob));
            }
        }
        for (s, delta, weight) in steps {
            critic_update(&mut critic, delta, &phi(s), 0.003 * weight, CriticSign::SemiGradient)
                .map_err(|e| e.to_string())?;
        }
    }
    let w = critic.params();
    let err = w.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(err <= 1e-3, format!("max |w - w*| = {err:.1e} after 1e5 updates"))
}

fn determinism() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for algo in Algorithm::ALL {
        let cfg = ExperimentConfig {
            episodes: 10,
            runs: 2,
            summary_window: 10,
            ..full(algo)
        };
        let a = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let b = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let same = episodes_csv(&a) == episodes_csv(&b) && timeseries_csv(&a) == timeseries_csv(&b);
        ok &= same;
        parts.push(format!("{algo} {}", if same { "identical" } else { "DIFFERENT" }));
    }
    check(ok, format!("10 episodes x 2 runs, default config: {}", parts.join(", ")))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {tag} {name} [{secs:.1}s]: {detail}");
        results.push((id, name, out, secs));
    };

    run(1, "consensus suite", &mut consensus_suite);
    run(2, "gradient suite", &mut gradient_suite);
    run(3, "simulator conservation", &mut conservation_suite);

    let mut baselines = Vec::new();
    for algo in [Algorithm::RaP, Algorithm::RaFcw, Algorithm::RaAcw] {
        match campaign_summary(algo) {
            Ok((_, s)) => baselines.push((algo, s)),
            Err(e) => println!("{algo} baseline campaign failed: {e}"),
        }
    }
    let baselines_ok = baselines.len() == 3;
    let proposed = campaign_summary(Algorithm::Proposed);
    let ctde = campaign_summary(Algorithm::RaCtde);

    run(4, "baseline regression", &mut || {
        if baselines_ok {
            baseline_regression(&baselines)
        } else {
            Err("a baseline campaign failed".into())
        }
    });
    run(5, "learning outcome", &mut || learning_outcome(&proposed));
    run(6, "fairness", &mut || fairness(&proposed, &baselines));
    run(7, "CTDE parity", &mut || ctde_parity(&proposed, &ctde));
    run(8, "overhead table", &mut overhead);
    run(9, "TD fixed point", &mut td_oracle);
    run(10, "determinism", &mut determinism);

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
