//! Each closed form against its dense brute-force counterpart.

use cedd_core::losses::{sedd_log_score_gradient, sedd_loss_position};
use cedd_core::oracle::{
    brute_force_loss_row, brute_force_score_row, dense_analytic_weights, dense_rate_matrix, dense_transition,
    distribution_at_sigma, exact_scores, j2_constant_check, simulate_mask_hit, ExactPosteriorModel, ExactScoreModel,
    JointDist, ORACLE_MANIFEST,
};
use cedd_core::samplers::{analytic_weights, euler_probabilities};
use cedd_core::scores::{probs_to_scores, sedd_scale_factor, CeddScores, ScoreModel};
use cedd_core::util::stream_rng;
use cedd_core::{corrupt_sequence, Error, Family, MatrixSpec, NoiseSchedule, TokenSequence};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_spec(rng: &mut ChaCha8Rng, family: usize, v: usize) -> MatrixSpec {
    match family {
        0 => MatrixSpec::uniform(v),
        1 => MatrixSpec::absorb(v),
        2 => MatrixSpec::roulette(v, rng.random_range(0.01..0.99)),
        _ => MatrixSpec::eroulette(v, rng.random_range(0.3..3.0)),
    }
    .unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..v).map(|_| rng.random_range(0.001..1.0)).collect();
    let z: f64 = f.iter().sum();
    f.iter_mut().for_each(|p| *p /= z);
    f
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn closed_form_exponentials_match_dense() {
    let mut rng = stream_rng(1, 0);
    for family in 0..4 {
        for v in [2, 4, 7] {
            for _ in 0..200 {
                let spec = random_spec(&mut rng, family, v);
                let sigma = rng.random_range(0.001..10.0);
                let t = rng.random_range(0.01..0.99);
                let dense = dense_transition(&spec, sigma, t).unwrap();
                for from in 0..spec.n() {
                    let mut col = 0.0;
                    for to in 0..spec.n() {
                        let p = spec.transition_prob(sigma, t, to, from);
                        col += p;
                        assert!((p - dense[(to, from)]).abs() <= 1e-9, "{spec:?} sigma={sigma} t={t}");
                    }
                    assert!((col - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn conditional_ratios_match_dense() {
    let mut rng = stream_rng(2, 0);
    for family in 0..4 {
        for _ in 0..100 {
            let spec = random_spec(&mut rng, family, 5);
            let sigma = rng.random_range(0.01..8.0);
            let t = rng.random_range(0.01..0.99);
            let k = dense_transition(&spec, sigma, t).unwrap();
            let h = rng.random_range(0..spec.data_tokens());
            let xt = rng.random_range(0..spec.n());
            let y = rng.random_range(0..spec.n());
            match spec.conditional_ratio(sigma, t, y, xt, h) {
                Ok(r) => {
                    let expect = if y == xt { 1.0 } else { k[(y, h)] / k[(xt, h)] };
                    assert!(close(r, expect, 1e-9), "{spec:?} {r} vs {expect}");
                }
                Err(Error::Unreachable { .. }) => assert!(k[(xt, h)].abs() < 1e-15),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn mask_hit_probability_matches_simulation() {
    for (p_m, sigma) in [(0.5, 2.0), (0.95, 7.0), (0.2, 0.8)] {
        let spec = MatrixSpec::roulette(4, p_m).unwrap();
        let closed = spec.mask_hit_probability(sigma).unwrap();
        let (mean, se) = simulate_mask_hit(&spec, sigma, 200_000, 9).unwrap();
        assert!((closed - mean).abs() <= 4.0 * se, "p_m={p_m}: {closed} vs {mean} +- {se}");
    }
}

#[test]
fn corruption_frequencies_match_dense_column() {
    let schedule = NoiseSchedule::loglinear(1e-3).unwrap();
    let mut rng = stream_rng(3, 0);
    for family in 0..4 {
        let spec = random_spec(&mut rng, family, 4);
        let t = 0.4;
        let sigma = schedule.sigma(t).unwrap();
        let col = dense_transition(&spec, sigma, t).unwrap();
        let n = 40_000;
        let x0 = TokenSequence::new(vec![1; n]);
        let xt = corrupt_sequence(&x0, t, &spec, &schedule, &mut rng).unwrap();
        for to in 0..spec.n() {
            let freq = xt.ids().iter().filter(|&&x| x == to).count() as f64 / n as f64;
            let p = col[(to, 1)];
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
            assert!((freq - p).abs() <= 5.0 * se, "{spec:?} token {to}: {freq} vs {p}");
        }
    }
}

#[test]
fn score_reconstruction_matches_mixture() {
    let mut rng = stream_rng(4, 0);
    for family in 0..4 {
        for _ in 0..200 {
            let v = rng.random_range(2..=8);
            let spec = random_spec(&mut rng, family, v);
            let sigma = rng.random_range(0.01..8.0);
            let t = rng.random_range(0.01..0.99);
            let f = random_simplex(&mut rng, v);
            let xt = rng.random_range(0..spec.n());
            let rescale = rng.random_bool(0.5);
            let a = probs_to_scores(&f, &spec, sigma, t, xt, rescale).unwrap();
            let b = brute_force_score_row(&f, &spec, sigma, t, xt, rescale).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(close(*x, *y, 1e-9), "{spec:?} xt={xt}: {a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn score_reconstruction_collapses_on_one_hot() {
    let spec = MatrixSpec::roulette(4, 0.6).unwrap();
    let (sigma, t, xt, h) = (1.3, 0.5, 2, 0);
    let mut f = vec![0.0; 4];
    f[h] = 1.0;
    let row = brute_force_score_row(&f, &spec, sigma, t, xt, false).unwrap();
    for (y, s) in row.iter().enumerate() {
        assert!(close(*s, spec.conditional_ratio(sigma, t, y, xt, h).unwrap(), 1e-12));
    }
}

#[test]
fn scale_factor_matches_average_ratio() {
    let mut rng = stream_rng(5, 0);
    for family in 0..4 {
        for _ in 0..100 {
            let v = rng.random_range(2..=8);
            let spec = random_spec(&mut rng, family, v);
            let sigma = rng.random_range(0.01..8.0);
            let t = rng.random_range(0.05..0.99);
            let k = dense_transition(&spec, sigma, t).unwrap();
            let xt = rng.random_range(0..spec.n());
            let y = rng.random_range(0..spec.n());
            let factor = sedd_scale_factor(&spec, sigma, t, xt, y).unwrap();
            let neutral = Some(y) == spec.mask() || y == xt || (spec.family() == Family::Absorb && Some(xt) != spec.mask());
            if neutral {
                assert_eq!(factor, 1.0);
                continue;
            }
            let avg = (0..v).map(|h| k[(y, h)] / k[(xt, h)]).sum::<f64>() / v as f64;
            assert!(close(factor, avg, 1e-9), "{spec:?} xt={xt} y={y}: {factor} vs {avg}");
        }
    }
}

#[test]
fn grouped_loss_matches_full_sum() {
    let mut rng = stream_rng(6, 0);
    let schedule = NoiseSchedule::loglinear(1e-3).unwrap();
    for family in 0..4 {
        let mut checked = 0;
        while checked < 200 {
            let v = rng.random_range(2..=8);
            let spec = random_spec(&mut rng, family, v);
            let t = rng.random_range(0.01..0.99);
            let (sigma, sigma_prime) = schedule.eval(t).unwrap();
            let x0 = rng.random_range(0..v);
            let col = spec.transition_column(sigma, t, x0);
            let xt = cedd_core::util::sample_categorical(&col, &mut rng).unwrap();
            let s: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
            let include_k = rng.random_bool(0.5);
            match sedd_loss_position(&spec, sigma, sigma_prime, t, &s, x0, xt, include_k) {
                Ok(a) => {
                    let b = brute_force_loss_row(&spec, sigma, sigma_prime, t, &s, x0, xt, include_k).unwrap();
                    assert!(close(a, b, 1e-9), "{spec:?} x0={x0} xt={xt}: {a} vs {b}");
                    checked += 1;
                }
                Err(Error::Domain(_)) => {
                    let q = dense_rate_matrix(&spec, sigma, sigma_prime, t);
                    assert!((0..spec.n()).any(|i| (0..spec.n()).any(|j| i != j && q[(i, j)] < 0.0)));
                }
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn log_score_gradient_matches_finite_differences() {
    let mut rng = stream_rng(7, 0);
    let schedule = NoiseSchedule::loglinear(1e-3).unwrap();
    for family in 0..3 {
        for _ in 0..50 {
            let spec = random_spec(&mut rng, family, 4);
            let t = rng.random_range(0.05..0.95);
            let (sigma, sigma_prime) = schedule.eval(t).unwrap();
            let x0 = rng.random_range(0..4);
            let col = spec.transition_column(sigma, t, x0);
            let xt = cedd_core::util::sample_categorical(&col, &mut rng).unwrap();
            let s: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
            let g = sedd_log_score_gradient(&spec, sigma, sigma_prime, t, &s, x0, xt).unwrap();
            for y in 0..spec.n() {
                let h = 1e-6f64;
                let mut up = s.clone();
                let mut down = s.clone();
                up[y] *= h.exp();
                down[y] *= (-h).exp();
                let f = |row: &[f64]| brute_force_loss_row(&spec, sigma, sigma_prime, t, row, x0, xt, false).unwrap();
                let fd = (f(&up) - f(&down)) / (2.0 * h);
                assert!((g[y] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{spec:?} y={y}: {} vs {fd}", g[y]);
            }
        }
    }
}

#[test]
fn j2_constant_matches_monte_carlo() {
    let ll = NoiseSchedule::loglinear(1e-3).unwrap();
    let cases = [
        (MatrixSpec::absorb(5).unwrap(), ll),
        (MatrixSpec::uniform(5).unwrap(), ll),
        (MatrixSpec::roulette(5, 0.35).unwrap(), NoiseSchedule::roulette_loglinear(0.35, 1e-3).unwrap()),
    ];
    for (spec, schedule) in cases {
        let (closed, mean, se) = j2_constant_check(&spec, &schedule, 4, 40_000, 11).unwrap();
        assert!((closed - mean).abs() <= 3.5 * se, "{spec:?}: {closed} vs {mean} +- {se}");
    }
}

#[test]
fn analytic_weights_match_dense() {
    let mut rng = stream_rng(8, 0);
    let schedule = NoiseSchedule::loglinear(1e-3).unwrap();
    for family in 0..4 {
        for _ in 0..200 {
            let v = rng.random_range(2..=6);
            let spec = random_spec(&mut rng, family, v);
            let t = rng.random_range(0.05..0.98);
            let t_prev = t - rng.random_range(0.0..0.05f64).min(t);
            let (st, sp) = (schedule.sigma(t).unwrap(), schedule.sigma(t_prev).unwrap());
            let x = rng.random_range(0..spec.n());
            let mut s: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(0.0..3.0)).collect();
            s[x] = 1.0;
            let a = analytic_weights(&s, &spec, spec.level(st, t), spec.level(sp, t_prev), x);
            let b = dense_analytic_weights(&s, &spec, (st, t), (sp, t_prev), x).unwrap();
            let scale = b.iter().fold(1.0f64, |m, w| m.max(w.abs()));
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-9 * scale, "{spec:?} x={x} t={t}: {a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn euler_probabilities_match_dense_rates() {
    let mut rng = stream_rng(9, 0);
    let schedule = NoiseSchedule::loglinear(1e-3).unwrap();
    for family in 0..4 {
        for _ in 0..100 {
            let spec = random_spec(&mut rng, family, 5);
            let t = rng.random_range(0.05..0.98);
            let (sigma, sigma_prime) = schedule.eval(t).unwrap();
            let dt = rng.random_range(0.0001..0.05);
            let x = rng.random_range(0..spec.n());
            let s: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(0.0..3.0)).collect();
            let q = dense_rate_matrix(&spec, sigma, sigma_prime, t);
            let mut w: Vec<f64> = (0..spec.n()).map(|y| if y == x { 0.0 } else { q[(x, y)] * s[y] * dt }).collect();
            w[x] = 1.0 - w.iter().sum::<f64>();
            w.iter_mut().for_each(|p| *p = p.max(0.0));
            let z: f64 = w.iter().sum();
            w.iter_mut().for_each(|p| *p /= z);
            let got = euler_probabilities(&s, &spec, sigma, sigma_prime, t, dt, x);
            for (a, b) in got.iter().zip(&w) {
                assert!((a - b).abs() <= 1e-12, "{spec:?}: {got:?} vs {w:?}");
            }
        }
    }
}

#[test]
fn posterior_scores_match_joint_ratios() {
    let mut rng = stream_rng(10, 0);
    let schedule = NoiseSchedule::loglinear(1e-3).unwrap();
    for family in 0..4 {
        let spec = random_spec(&mut rng, family, 3);
        let p0 = JointDist::random(3, 2, &mut rng).unwrap();
        let post = ExactPosteriorModel { p0: p0.clone(), spec, schedule };
        let direct = ExactScoreModel::new(&p0, spec);
        let mixture = CeddScores::new(&post, spec, false);
        for &t in &[0.1, 0.5, 0.9] {
            let sigma = schedule.sigma(t).unwrap();
            let pt = distribution_at_sigma(&p0, &spec, sigma, t).unwrap();
            for idx in 0..pt.probs().len() {
                if pt.probs()[idx] < 1e-300 {
                    continue;
                }
                let x = TokenSequence::new(pt.sequence(idx));
                let joint = exact_scores(&pt, &x).unwrap();
                let a = mixture.scores(&x, t, sigma).unwrap();
                let b = direct.scores(&x, t, sigma).unwrap();
                let k = dense_transition(&spec, sigma, t).unwrap();
                let n = spec.n();
                for (cell, ((j, m), d)) in joint.as_slice().iter().zip(a.as_slice()).zip(b.as_slice()).enumerate() {
                    assert!(close(*d, *j, 1e-9), "{spec:?} {x:?}: {d} vs {j}");
                    // the mixture only sees clean tokens that can produce x_t^i
                    let (i, y) = (cell / n, cell % n);
                    let nested = (0..3).all(|h| k[(x[i], h)] > 0.0 || k[(y, h)] == 0.0);
                    if nested {
                        assert!(close(*m, *j, 1e-9), "{spec:?} {x:?}: {m} vs {j}");
                    }
                }
            }
        }
    }
}

#[test]
fn manifest_binds_every_closed_form_once() {
    let sources = [include_str!("oracle_bindings.rs"), include_str!("properties.rs")];
    let mut seen = std::collections::HashSet::new();
    for b in ORACLE_MANIFEST {
        assert!(seen.insert(b.closed_form), "{} listed twice", b.closed_form);
        let needle = format!("fn {}(", b.test);
        let hits: usize = sources.iter().map(|s| s.matches(needle.as_str()).count()).sum();
        assert_eq!(hits, 1, "binding test {} for {}", b.test, b.closed_form);
    }
}
