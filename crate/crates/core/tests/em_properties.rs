//! Property tests for the EM building blocks on small random problems.

use proptest::prelude::*;

use efumi_bcg::em;
use efumi_bcg::model::{
    complete_objective, expected_objective, gamma_terms, reconstruct, ConceptModel, EmConfig, Posterior,
    TrainingSet,
};
use efumi_bcg::parallel::Execution;

/// Random bag layout: 2–4 positive bags of 1–4 points plus 3–10 negatives,
/// in dimension `d`, coordinates in [-2, 2].
fn training_set() -> impl Strategy<Value = TrainingSet> {
    (2usize..=6).prop_flat_map(|d| {
        let point = prop::collection::vec(-2.0f64..2.0, d);
        let bag = prop::collection::vec(point.clone(), 1..=4);
        (
            prop::collection::vec(bag, 2..=4),
            prop::collection::vec(point, 3..=10),
        )
            .prop_map(|(pos, neg)| TrainingSet::from_points(pos, neg).unwrap())
    })
}

fn problem() -> impl Strategy<Value = (TrainingSet, EmConfig)> {
    (training_set(), 1usize..=3, any::<u64>(), 0.01f64..0.5, 0.5f64..8.0).prop_map(
        |(set, m, seed, u, beta)| {
            let cfg = EmConfig {
                m_init: m,
                seed,
                u,
                beta,
                ..EmConfig::default()
            };
            (set, cfg)
        },
    )
}

fn slack(f: f64) -> f64 {
    1e-9 * f.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn m_steps_never_increase_the_objective((set, cfg) in problem()) {
        let (mut model, mut p) = em::initialize(&set, &cfg).unwrap();
        for _ in 0..6 {
            let gamma = gamma_terms(&p, cfg.gamma);
            let post = em::e_step(&set, &model, &p, cfg.beta).unwrap();
            for i in 0..set.n() {
                let z1 = post.p_z1(i);
                prop_assert!((0.0..=1.0).contains(&z1));
                if !set.is_positive(i) {
                    prop_assert_eq!(z1, 0.0);
                }
            }
            let f0 = expected_objective(&set, &model, &p, &post, &gamma, &cfg).unwrap();
            let next = em::m_step_concepts(&set, &p, &post, &cfg).unwrap();
            let f1 = expected_objective(&set, &next, &p, &post, &gamma, &cfg).unwrap();
            prop_assert!(f1 <= f0 + slack(f0), "concepts: {} -> {}", f0, f1);
            let p_next = em::m_step_proportions(&set, &next, &post, &p, &gamma, &cfg).unwrap();
            let f2 = expected_objective(&set, &next, &p_next, &post, &gamma, &cfg).unwrap();
            prop_assert!(f2 <= f1 + slack(f1), "proportions: {} -> {}", f1, f2);
            prop_assert!(f2 >= 0.0);
            prop_assert!(p_next.validate(&set).is_ok());
            model = next;
            p = p_next;
        }
    }

    #[test]
    fn concept_step_beats_random_probes((set, cfg) in problem(), probe_seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let (model, p) = em::initialize(&set, &cfg).unwrap();
        let gamma = gamma_terms(&p, cfg.gamma);
        let post = em::e_step(&set, &model, &p, cfg.beta).unwrap();
        let best = em::m_step_concepts(&set, &p, &post, &cfg).unwrap();
        let f_best = expected_objective(&set, &best, &p, &post, &gamma, &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(probe_seed);
        for _ in 0..200 {
            let scale = 10f64.powi(rng.random_range(-4..=0));
            let mut jitter = |v: &[f64]| -> Vec<f64> {
                v.iter().map(|x| x + scale * rng.random_range(-1.0..1.0)).collect()
            };
            let probe = ConceptModel::new(
                jitter(&best.target),
                best.background.iter().map(|b| jitter(b)).collect(),
            ).unwrap();
            let f = expected_objective(&set, &probe, &p, &post, &gamma, &cfg).unwrap();
            prop_assert!(f >= f_best - slack(f_best), "probe {} < optimum {}", f, f_best);
        }
    }

    #[test]
    fn hard_labels_match_complete_objective(
        (set, cfg) in problem(),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let (model, p) = em::initialize(&set, &cfg).unwrap();
        let z: Vec<bool> = (0..set.n()).map(|i| set.is_positive(i) && flips[i % flips.len()]).collect();
        let post = Posterior::hard(&z);
        let gamma = gamma_terms(&p, cfg.gamma);
        let expected = expected_objective(&set, &model, &p, &post, &gamma, &cfg).unwrap();
        let complete = complete_objective(&set, &model, &p, &z, &gamma, &cfg).unwrap();
        prop_assert!((expected - complete).abs() <= 1e-9 * complete.abs().max(1.0));

        // With the labels fixed, both M-steps are block-coordinate descent
        // steps on the complete objective.
        let next = em::m_step_concepts(&set, &p, &post, &cfg).unwrap();
        let p_next = em::m_step_proportions(&set, &next, &post, &p, &gamma, &cfg).unwrap();
        let c1 = complete_objective(&set, &next, &p, &z, &gamma, &cfg).unwrap();
        let c2 = complete_objective(&set, &next, &p_next, &z, &gamma, &cfg).unwrap();
        prop_assert!(c1 <= complete + slack(complete));
        prop_assert!(c2 <= c1 + slack(c1));
    }

    #[test]
    fn fit_is_deterministic_and_execution_independent((set, cfg) in problem()) {
        let cfg = EmConfig { max_iters: 15, ..cfg };
        let a = em::fit(&set, &cfg).unwrap();
        let b = em::fit(&set, &cfg).unwrap();
        let s = em::fit(&set, &EmConfig { execution: Execution::Sequential, ..cfg.clone() }).unwrap();
        prop_assert_eq!(&a.model, &b.model);
        prop_assert_eq!(&a.p, &b.p);
        prop_assert_eq!(&a.objective_trace, &b.objective_trace);
        prop_assert_eq!(&a.model, &s.model);
        prop_assert_eq!(&a.objective_trace, &s.objective_trace);
        prop_assert!(a.p.validate(&set).is_ok());
        prop_assert!(a.model.n_background() >= 1);
    }

    #[test]
    fn reconstruction_is_linear_in_the_row(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 2),
        t in 0.0f64..1.0,
    ) {
        let normalize = |r: &Vec<f64>| -> Vec<f64> {
            let s: f64 = r.iter().sum::<f64>().max(1e-9);
            r.iter().map(|v| v / s).collect()
        };
        let (a, b) = (normalize(&rows[0]), normalize(&rows[1]));
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let model = ConceptModel::new(
            vec![1.0, -2.0, 0.5],
            vec![vec![0.0, 1.0, 1.0], vec![3.0, 0.0, -1.0]],
        ).unwrap();
        for z in [false, true] {
            let ra = reconstruct(&a, &model, z).unwrap();
            let rb = reconstruct(&b, &model, z).unwrap();
            let rm = reconstruct(&mix, &model, z).unwrap();
            for j in 0..3 {
                prop_assert!((rm[j] - (t * ra[j] + (1.0 - t) * rb[j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn separable_spikes_recover_the_target() {
    let d = 6;
    let spike = |j: usize, s: f64| -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[j] = s;
        v
    };
    let positive: Vec<Vec<Vec<f64>>> = (0..8).map(|_| vec![spike(0, 1.0), spike(0, -1.0)]).collect();
    let negatives: Vec<Vec<f64>> = (0..16).map(|_| spike(0, -1.0)).collect();
    let set = TrainingSet::from_points(positive, negatives).unwrap();
    let fit = em::fit(&set, &EmConfig { m_init: 1, ..EmConfig::default() }).unwrap();
    let t = &fit.model.target;
    let cos = t[0] / t.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(cos > 0.999, "cosine {cos}, target {t:?}");
    assert!(fit.p.validate(&set).is_ok());
}
