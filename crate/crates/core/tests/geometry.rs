use cfjoint_core::geom::{
    point_in_polygon, point_segment_distance, rect_segment_distance, segments_intersect, wrap_angle, Futures,
    OrientedRect, Scene, Segment, V2,
};
use cfjoint_core::metrics::{scene_overlap, EvalRecord, MetricsTable, ZeroPositive};
use cfjoint_core::synth::{generate_episode, EpisodeSpec, WorldConfig};
use proptest::prelude::*;

fn v2() -> impl Strategy<Value = V2> {
    (-20.0f64..20.0, -20.0f64..20.0).prop_map(|(x, y)| V2::new(x, y))
}

fn seg() -> impl Strategy<Value = Segment> {
    (v2(), v2()).prop_map(|(a, b)| Segment::new(a, b))
}

fn rect() -> impl Strategy<Value = OrientedRect> {
    (v2(), -3.2f64..3.2, 0.2f64..6.0, 0.2f64..3.0).prop_map(|(center, heading, length, width)| OrientedRect {
        center,
        heading,
        length,
        width,
    })
}

/// Rotation by `theta` about the origin followed by translation.
fn rigid(theta: f64, by: V2) -> impl Fn(V2) -> V2 {
    move |p| p.rotate(theta) + by
}

fn transform_scene(scene: &Scene, f: &Futures, theta: f64, by: V2) -> (Scene, Futures) {
    let m = rigid(theta, by);
    let mut s = scene.clone();
    for a in &mut s.agents {
        for st in &mut a.history {
            st.position = m(st.position);
            st.heading = wrap_angle(st.heading + theta);
            st.velocity = st.velocity.rotate(theta);
            st.acceleration = st.acceleration.rotate(theta);
        }
    }
    s.map = scene.map.transformed(&m, theta);
    (s, f.iter().map(|a| a.iter().map(|&p| m(p)).collect()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn point_segment_distance_is_rigid_invariant(p in v2(), s in seg(), theta in -3.2f64..3.2, by in v2()) {
        let m = rigid(theta, by);
        let d0 = point_segment_distance(p, &s);
        let d1 = point_segment_distance(m(p), &Segment::new(m(s.a), m(s.b)));
        prop_assert!((d0 - d1).abs() <= 1e-9);
    }

    #[test]
    fn point_segment_distance_is_one_lipschitz(p in v2(), s in seg(), delta in v2()) {
        let delta = delta * 0.05;
        let d0 = point_segment_distance(p, &s);
        let d1 = point_segment_distance(p + delta, &s);
        prop_assert!((d0 - d1).abs() <= delta.norm() + 1e-12);
    }

    #[test]
    fn rect_segment_zero_iff_polygon_contact(r in rect(), s in seg()) {
        let corners = r.corners();
        let contact = point_in_polygon(s.a, &corners)
            || point_in_polygon(s.b, &corners)
            || r.edges().iter().any(|e| segments_intersect(e, &s));
        let d = rect_segment_distance(&r, &s);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d == 0.0, contact, "distance {}", d);
    }

    #[test]
    fn overlap_flag_ignores_agent_order_and_rigid_motion(
        i in 0u64..5_000,
        shift in -3.0f64..3.0,
        theta in -3.2f64..3.2,
        by in v2(),
    ) {
        let ep = generate_episode(&WorldConfig::default(), i, &EpisodeSpec::default()).unwrap();
        // push agent 1 toward the ego so flags of both polarities occur
        let mut f = ep.gt_futures.clone();
        if f.len() > 1 {
            let target = f[0].clone();
            for (p, q) in f[1].iter_mut().zip(&target) {
                *p = *q + (*p - *q) * (0.5 + 0.2 * shift);
            }
        }
        let flag = scene_overlap(&ep.scene, &f);
        let mut s = ep.scene.clone();
        s.agents.reverse();
        let rf: Futures = f.iter().rev().cloned().collect();
        prop_assert_eq!(scene_overlap(&s, &rf), flag);
        let (ts, tf) = transform_scene(&ep.scene, &f, theta, by);
        prop_assert_eq!(scene_overlap(&ts, &tf), flag);
    }

    #[test]
    fn records_bound_final_by_oracle_metrics(
        i in 0u64..5_000,
        noise in proptest::collection::vec(-3.0f64..3.0, 6),
        probs in proptest::collection::vec(0.0f64..1.0, 6),
    ) {
        let ep = generate_episode(&WorldConfig::default(), i, &EpisodeSpec::default()).unwrap();
        let cands: Vec<Futures> = noise
            .iter()
            .map(|&k| ep.gt_futures.iter().map(|a| a.iter().map(|&p| p + V2::new(k, -0.5 * k)).collect()).collect())
            .collect();
        let r = EvalRecord::new(&ep.scene, &cands, &probs, &ep.gt_futures, 2.0);
        prop_assert!(r.min_ade <= r.f_ade && r.min_fde <= r.f_fde);
        prop_assert!(!r.miss || r.f_miss);
        prop_assert!(!r.min_or || r.f_or);
        let t = MetricsTable::aggregate(&[r.clone(), r], ZeroPositive::Zero);
        for v in [t.mr, t.or, t.map, t.f_mr, t.f_or] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
