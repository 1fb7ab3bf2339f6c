//! Cross-module checks against plain-loop reference computations.

use proptest::prelude::*;

use spederlab::io;
use spederlab::learner::svd_oracle_fit;
use spederlab::linalg::{Matrix, Vector};
use spederlab::mdp::{self, generate_random_mdp, gridworld, LowRankMdp, Policy};

/// Truncated power series `sum_t gamma^t P_pi^t r_pi`, written with loops.
fn reference_values(m: &LowRankMdp, pi: &Policy) -> Vec<f64> {
    let (ns, na) = (m.num_states(), m.num_actions());
    let p = m.kernel();
    let r = m.reward();
    let mut v = vec![0.0; ns];
    for _ in 0..4000 {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let row = s * na + a;
                let cont: f64 = (0..ns).map(|t| p[(row, t)] * v[t]).sum();
                next[s] += pi.prob(s, a) * (r[(s, a)] + m.gamma() * cont);
            }
        }
        v = next;
    }
    v
}

/// `(1-gamma) sum_t gamma^t rho^T P_pi^t`, spread over actions by `pi`.
fn reference_occupancy(m: &LowRankMdp, pi: &Policy) -> Vec<f64> {
    let (ns, na) = (m.num_states(), m.num_actions());
    let mut state = m.rho().iter().cloned().collect::<Vec<_>>();
    let mut d = vec![0.0; ns * na];
    let mut weight = 1.0 - m.gamma();
    for _ in 0..4000 {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let mass = state[s] * pi.prob(s, a);
                d[s * na + a] += weight * mass;
                for t in 0..ns {
                    next[t] += mass * m.kernel()[(s * na + a, t)];
                }
            }
        }
        state = next;
        weight *= m.gamma();
    }
    d
}

#[test]
fn values_match_the_power_series() {
    let m = generate_random_mdp(15, 3, 4, 11).unwrap();
    let (_, opt) = m.solve().unwrap();
    for pi in [Policy::uniform(15, 3), opt.epsilon_mix(0.2)] {
        let v = m.evaluate(&pi).unwrap().v;
        let want = reference_values(&m, &pi);
        for (x, y) in v.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn optimal_policy_beats_every_deterministic_policy() {
    let m = generate_random_mdp(4, 2, 2, 3).unwrap();
    let best = m.solve().unwrap().0.value_at(m.rho());
    for code in 0..16usize {
        let actions: Vec<usize> = (0..4).map(|s| (code >> s) & 1).collect();
        let v = m.policy_value(&Policy::deterministic(&actions, 2).unwrap()).unwrap();
        assert!(v <= best + 1e-9, "{actions:?}: {v} > {best}");
    }
}

#[test]
fn occupancy_samples_match_the_discounted_occupancy() {
    let m = gridworld(3, 0.2, 0.8).unwrap();
    let pi = Policy::uniform(9, 4);
    let want = reference_occupancy(&m, &pi);
    let exact = mdp::occupancy(&m, &pi).unwrap().d_sa;
    for (x, y) in exact.iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
    let n = 40_000;
    let data = mdp::sample_occupancy_dataset(&m, &pi, n, 5).unwrap();
    let mut counts = vec![0.0; want.len()];
    for t in &data.primary {
        counts[t.s * 4 + t.a] += 1.0 / n as f64;
    }
    let tv: f64 = counts.iter().zip(&want).map(|(c, w)| (c - w).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.03, "tv {tv}");
}

#[test]
fn single_state_dataset_is_all_self_loops() {
    let m = gridworld(1, 0.0, 0.9).unwrap();
    let data = mdp::sample_occupancy_dataset(&m, &Policy::uniform(1, 4), 50, 1).unwrap();
    assert_eq!(data.len(), 50);
    assert!(data.primary.iter().all(|t| t.s == 0 && t.s_next == 0));
}

#[test]
fn files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_random_mdp(10, 3, 3, 2).unwrap();
    let path = dir.path().join("m.json");
    io::write_mdp(&path, &m).unwrap();
    let back = io::read_mdp(&path).unwrap();
    assert_eq!(back.kernel(), m.kernel());
    assert_eq!(io::mdp_to_json(&back).unwrap(), io::mdp_to_json(&m).unwrap());

    let data = mdp::sample_occupancy_dataset(&m, &Policy::uniform(10, 3), 200, 4).unwrap();
    let dpath = dir.path().join("d.csv");
    io::write_dataset(&dpath, &data).unwrap();
    assert_eq!(io::read_dataset(&dpath).unwrap(), data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_at_true_rank_reproduces_the_kernel(seed in 0u64..10_000, ns in 4usize..12, na in 1usize..4, rank in 1usize..4) {
        let rank = rank.min(ns);
        let m = generate_random_mdp(ns, na, rank, seed).unwrap();
        let w = Vector::from_element(ns * na, 1.0 / (ns * na) as f64);
        let model = svd_oracle_fit(&m, &w, rank).unwrap();
        let k: Matrix = model.phi_hat() * model.mu_hat().transpose();
        let err = (&k - m.kernel()).abs().max();
        prop_assert!(err < 1e-9, "max entry error {}", err);
    }

    #[test]
    fn kernel_rows_are_distributions(seed in 0u64..10_000, ns in 2usize..10, na in 1usize..4) {
        let m = generate_random_mdp(ns, na, 2.min(ns), seed).unwrap();
        for i in 0..ns * na {
            let row = m.kernel().row(i);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
