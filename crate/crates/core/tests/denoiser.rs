use std::sync::OnceLock;

use cfjoint_core::config::RunConfig;
use cfjoint_core::denoiser::{pretrain_denoiser, validation_loss, RefineInput};
use cfjoint_core::geom::{Futures, V2};
use cfjoint_core::model::{constant_velocity, Model};
use cfjoint_core::potentials::composite;
use cfjoint_core::predictor::futures_tensor;
use cfjoint_core::synth::{generate_episodes, Episode, Intent};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Fixture {
    model: Model,
    val: Vec<Episode>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.model.d = 16;
        cfg.model.d_e = 8;
        cfg.model.d_tau = 8;
        cfg.model.d_m = 8;
        cfg.model.hidden = 32;
        cfg.denoiser.hidden = 64;
        cfg.denoiser.epochs = 6;
        cfg.denoiser.lr = 2e-3;
        let train = generate_episodes(&cfg.world, 0..800).unwrap();
        let val = generate_episodes(&cfg.world, 50_000..50_100).unwrap();
        let mut model = Model::new(&cfg);
        let den = model.den.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        pretrain_denoiser(&mut model.store, &den, &train, &val[..20], &cfg.denoiser, &mut rng).unwrap();
        Fixture { model, val }
    })
}

fn c(ep: &Episode, y: &Futures, token: V2, m: &Model) -> f64 {
    composite(y, &ep.scene, token, &m.cfg.potentials).total
}

#[test]
fn pretrained_network_beats_zero_predictor() {
    let f = fixture();
    let (val, zero) = validation_loss(&f.model.store, &f.model.den, &f.val, &f.model.cfg.denoiser.schedule(), 11);
    assert!(val < zero, "val {val} zero {zero}");
}

#[test]
fn projection_moves_noisy_ground_truth_closer() {
    let f = fixture();
    let m = &f.model;
    let sched = m.cfg.denoiser.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut better, mut total) = (0, 0);
    for ep in &f.val {
        let ctx = m.context(&ep.scene);
        let input = RefineInput {
            scene: &ep.scene,
            context: &ctx,
            token: ep.gt_endpoint,
        };
        for &sigma in &sched.sigmas {
            let clean = futures_tensor(&ep.gt_futures);
            let mut y = clean.clone();
            for v in &mut y.data {
                *v += sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
            let eps = m.den.eps_value(&m.store, &input, &y, sigma);
            let mut proj = y.clone();
            for (v, e) in proj.data.iter_mut().zip(&eps.data) {
                *v -= e;
            }
            let dist = |t: &cfjoint_core::nn::Tensor| t.data.iter().zip(&clean.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            better += (dist(&proj) < dist(&y)) as usize;
            total += 1;
        }
    }
    assert!(better * 10 >= total * 8, "{better}/{total}");
}

#[test]
fn refinement_lowers_mean_potential_and_is_deterministic() {
    let f = fixture();
    let m = &f.model;
    let (mut raw, mut refined) = (0.0, 0.0);
    for ep in &f.val {
        let ctx = m.context(&ep.scene);
        let y = constant_velocity(&ep.scene, m.cfg.model.t_f);
        let r = m.refine(&ep.scene, &ctx, ep.gt_endpoint, &y).unwrap();
        assert_eq!(r, m.refine(&ep.scene, &ctx, ep.gt_endpoint, &y).unwrap());
        assert!(r.iter().flatten().all(|p| p.is_finite()));
        raw += c(ep, &y, ep.gt_endpoint, m);
        refined += c(ep, &r, ep.gt_endpoint, m);
    }
    assert!(refined < raw, "refined {refined} raw {raw}");
}

#[test]
fn second_pass_changes_potential_less() {
    let f = fixture();
    let m = &f.model;
    let mut ok = 0;
    for ep in &f.val {
        let ctx = m.context(&ep.scene);
        let tok = ep.gt_endpoint;
        let y0 = constant_velocity(&ep.scene, m.cfg.model.t_f);
        let y1 = m.refine(&ep.scene, &ctx, tok, &y0).unwrap();
        let y2 = m.refine(&ep.scene, &ctx, tok, &y1).unwrap();
        let (c0, c1, c2) = (c(ep, &y0, tok, m), c(ep, &y1, tok, m), c(ep, &y2, tok, m));
        ok += ((c2 - c1).abs() < (c1 - c0).abs()) as usize;
    }
    assert!(ok * 10 >= f.val.len() * 9, "{ok}/{}", f.val.len());
}

#[test]
fn ego_endpoint_follows_the_conditioning_token() {
    let f = fixture();
    let m = &f.model;
    let mut checked = 0;
    for ep in &f.val {
        let (Some(a), Some(b)) = (ep.endpoint_for(Intent::ParkLeft), ep.endpoint_for(Intent::DriveThrough)) else {
            continue;
        };
        let ctx = m.context(&ep.scene);
        let y = constant_velocity(&ep.scene, m.cfg.model.t_f);
        let ya = m.refine(&ep.scene, &ctx, a, &y).unwrap();
        let yb = m.refine(&ep.scene, &ctx, b, &y).unwrap();
        let (ea, eb) = (*ya[0].last().unwrap(), *yb[0].last().unwrap());
        assert!(ea.dist(a) < eb.dist(a), "token A pulls ego toward A");
        assert!(eb.dist(b) < ea.dist(b), "token B pulls ego toward B");
        checked += 1;
    }
    assert!(checked > 20);
}
