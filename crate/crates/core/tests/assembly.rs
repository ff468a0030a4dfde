use cfjoint_core::config::ModelConfig;
use cfjoint_core::geom::V2;
use cfjoint_core::nn::{softmax, Graph, ParamStore, Tensor};
use cfjoint_core::predictor::{
    argmax, exposure_value, AssemblyInput, BeamAssembler, ExhaustiveAssembler, MarginalSet, SceneAssembler,
};
use cfjoint_core::synth::{generate_episode, EpisodeSpec, WorldConfig};
use cfjoint_core::tokenizer::{diversity, stage1_loss, winner_index, Stage1Config, TokenBank, TokenOutputs, Tokenizer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// N agents, M modes, two-step trajectories close enough to overlap.
fn marginals() -> impl Strategy<Value = (MarginalSet, Vec<f64>)> {
    (1usize..=4, 1usize..=4).prop_flat_map(|(n, m)| {
        (
            proptest::collection::vec(proptest::collection::vec((-4.0f64..4.0, -4.0f64..4.0), m), n),
            proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, m), n),
            proptest::collection::vec(0.2f64..1.5, n),
        )
            .prop_map(move |(pts, logits, radii)| {
                let trajs = pts
                    .iter()
                    .map(|modes| modes.iter().map(|&(x, y)| vec![V2::new(x, y), V2::new(x + 0.5, y)]).collect())
                    .collect();
                let mode_scores = logits.iter().map(|l| softmax(l)).collect();
                (
                    MarginalSet {
                        trajs,
                        mode_scores,
                        mode_feats: Tensor::zeros(n * m, 1),
                    },
                    radii,
                )
            })
    })
}

fn outputs(g: &mut Graph, endpoints: &[V2], logits: &[f64]) -> TokenOutputs {
    let k = endpoints.len();
    let e = g.constant(Tensor::from_vec(k, 2, endpoints.iter().flat_map(|p| [p.x, p.y]).collect()));
    let l = g.constant(Tensor::from_vec(1, k, logits.to_vec()));
    TokenOutputs { endpoints: e, logits: l }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn wide_beam_equals_exhaustive((m, radii) in marginals(), k_scene in 1usize..8, perm_seed in any::<u64>(), w in 0.0f64..3.0) {
        let n = m.num_agents();
        let modes = m.num_modes();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (perm_seed.rotate_left(i as u32 * 7) % 101, i));
        let input = AssemblyInput {
            marginals: &m,
            radii: &radii,
            order: &order,
            top_r: modes,
            k_scene,
            beam_width: modes.pow(n as u32).max(k_scene),
            w_beam: w,
            seed: 0,
        };
        prop_assert_eq!(BeamAssembler.assemble(&input).unwrap(), ExhaustiveAssembler.assemble(&input).unwrap());
    }

    #[test]
    fn exposure_is_a_monotone_probability(
        p in (-30.0f64..30.0, -30.0f64..30.0),
        tok in (-30.0f64..30.0, -30.0f64..30.0),
        a in 0.01f64..2.0,
        b in 0.01f64..2.0,
        rp in 0.0f64..6.0,
        re in 0.0f64..6.0,
        grow in 0.0f64..2.0,
    ) {
        let (p, tok) = (V2::new(p.0, p.1), V2::new(tok.0, tok.1));
        let e = |a: f64, b: f64, rp: f64, re: f64| exposure_value(p, tok, V2::ZERO, a, b, rp, re);
        let base = e(a, b, rp, re);
        prop_assert!(base > 0.0 && base < 1.0);
        prop_assert!(e(a, b, rp + grow, re) >= base);
        prop_assert!(e(a, b, rp, re + grow) >= base);
        prop_assert!(e(a + grow, b, rp, re) >= base);
        prop_assert!(e(a, b + grow, rp, re) >= base);
    }

    #[test]
    fn selector_probabilities_ignore_score_shift(scores in proptest::collection::vec(-5.0f64..5.0, 1..8), c in -50.0f64..50.0) {
        let p = softmax(&scores);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        prop_assert_eq!(argmax(&shifted), argmax(&scores));
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage1_loss_is_shift_invariant_and_bounded_by_diversity(
        pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..7),
        logits_seed in proptest::collection::vec(-3.0f64..3.0, 7),
        gt in (-10.0f64..10.0, -10.0f64..10.0),
        c in -20.0f64..20.0,
    ) {
        let endpoints: Vec<V2> = pts.iter().map(|&(x, y)| V2::new(x, y)).collect();
        let k = endpoints.len();
        let logits = &logits_seed[..k];
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let gt = V2::new(gt.0, gt.1);
        let cfg = Stage1Config::default();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let o1 = outputs(&mut g, &endpoints, logits);
        let o2 = outputs(&mut g, &endpoints, &shifted);
        let (l1, k1) = stage1_loss(&mut g, o1, gt, &cfg);
        let (l2, k2) = stage1_loss(&mut g, o2, gt, &cfg);
        prop_assert_eq!(k1, winner_index(&endpoints, gt));
        prop_assert_eq!(k1, k2);
        let (v1, v2) = (g.value(l1).data[0], g.value(l2).data[0]);
        prop_assert!((v1 - v2).abs() < 1e-9 * v1.abs().max(1.0));
        let div = if k > 1 {
            let d = diversity(&mut g, o1.endpoints, cfg.sigma_div);
            g.value(d).data[0]
        } else {
            0.0
        };
        prop_assert!(div >= 0.0);
        prop_assert!(v1 >= cfg.lambda_div * div - 1e-12);
    }
}

#[test]
fn single_intent_bank_is_certain() {
    let bank = TokenBank::from_raw(&[V2::new(3.0, 1.0)], &[-7.5]);
    assert_eq!(bank.len(), 1);
    assert_eq!(bank.tokens[0].prob, 1.0);

    let cfg = ModelConfig {
        k_intent: 1,
        d: 16,
        d_e: 8,
        d_tau: 8,
        hidden: 16,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let tok = Tokenizer::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let ep = generate_episode(&WorldConfig::default(), 0, &EpisodeSpec::default()).unwrap();
    let bank = tok.propose(&store, &ep.scene);
    assert_eq!(bank.len(), 1);
    assert_eq!(bank.tokens[0].prob, 1.0);
}
