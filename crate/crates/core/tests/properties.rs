use proptest::prelude::*;

use switchwatch::baselines::bocpd::{BocpdConfig, RunLengthPosterior};
use switchwatch::config::Config;
use switchwatch::detector::Trigger;
use switchwatch::metrics::{hard_detection, reliability};
use switchwatch::sim::{run_episode, safety_accounting, PartnerType, Transition, WorkspaceConfig};
use switchwatch::uatom::{fuse, Uatom, UatomConfig};

fn trace() -> impl Strategy<Value = (Vec<(usize, f64)>, usize)> {
    (prop::collection::vec(0.0f64..=1.0, 20..120), 0usize..120).prop_map(|(p, ts)| {
        let ts = ts % p.len();
        (p.into_iter().enumerate().collect(), ts)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn detection_monotone_in_tolerance(
        (tr, ts) in trace(),
        threshold in 0.05f64..0.95,
        debounce in 1usize..4,
    ) {
        let trig = Trigger { threshold, debounce };
        let ks = [0, 1, 3, 5, 15, 40];
        let rec = hard_detection(0, &tr, ts, &ks, &trig).unwrap();
        prop_assert!(rec.is_consistent());
        for w in rec.hits.windows(2) {
            prop_assert!(!w[0].1 || w[1].1, "{:?}", rec.hits);
        }
        // Scoring one tolerance alone agrees with the joint record.
        for &(k, hit) in &rec.hits {
            let alone = hard_detection(0, &tr, ts, &[k], &trig).unwrap();
            prop_assert_eq!(alone.hits[0].1, hit);
        }
    }

    #[test]
    fn reliability_is_a_ratio_in_unit_interval(rates in prop::collection::vec(0.0f64..100.0, 1..8)) {
        let r = reliability(&rates).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.r));
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().copied().fold(0.0, f64::max);
        if lo > 0.0 {
            prop_assert!((r.r - lo / hi).abs() < 1e-15);
            let scaled: Vec<f64> = rates.iter().map(|x| x * 3.0).collect();
            prop_assert!((reliability(&scaled).unwrap().r - r.r).abs() < 1e-12);
        } else {
            prop_assert!(r.degenerate && r.r == 0.0);
        }
    }

    #[test]
    fn run_length_posterior_normalized(
        xs in prop::collection::vec(-6.0f64..6.0, 1..60),
        hazard in 0.001f64..0.5,
        max_run in 4usize..80,
    ) {
        let mut post = RunLengthPosterior::new(BocpdConfig { hazard, max_run, ..BocpdConfig::default() });
        for &x in &xs {
            let score = post.update(x).unwrap();
            let p = post.probs();
            prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.len() <= max_run + 1);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&score));
        }
    }

    #[test]
    fn fusion_is_a_convex_combination(seed in 0u64..1000, scale in 0.1f64..5.0) {
        let cfg = UatomConfig::default();
        let m = Uatom::new(cfg.clone(), seed).unwrap();
        let u: Vec<f64> = (0..cfg.fuse_in()).map(|i| scale * ((i as f64 + seed as f64) * 0.37).sin()).collect();
        let h_prev: Vec<f64> = (0..cfg.state_dim).map(|i| ((i * 7 + 3) as f64).cos()).collect();
        let (h, g, ht) = fuse(&u, &h_prev, &m.fuse_view());
        for i in 0..h.len() {
            prop_assert!((0.0..=1.0).contains(&g[i]));
            let (lo, hi) = (ht[i].min(h_prev[i]), ht[i].max(h_prev[i]));
            prop_assert!(h[i] >= lo - 1e-12 && h[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn config_roundtrips_through_toml(
        len in 60usize..400,
        width in 0.3f64..2.0,
        lr in 1e-5f64..1e-1,
        seeds in prop::collection::btree_set(0u64..1000, 1..6),
    ) {
        let mut c = Config::default();
        c.workspace.episode_len = len;
        c.workspace.switch_hi = len / 2;
        c.workspace.switch_lo = len / 4;
        c.workspace.width = width;
        c.train.lr = lr;
        c.run.seeds = seeds.into_iter().collect();
        let back = Config::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back.to_toml(), c.to_toml());

        let mut d = Config::default();
        d.set(&format!("train.lr={lr:e}")).unwrap();
        prop_assert_eq!(d.train.lr, lr);
    }

    #[test]
    fn collisions_count_run_starts(ds in prop::collection::vec(0.0f64..0.4, 1..80), ts in 0usize..80) {
        let cfg = WorkspaceConfig::default();
        let ts = ts % ds.len();
        let (col, crt) = safety_accounting(&ds, ts, &cfg);
        // Each collision run lies entirely within close range.
        prop_assert!(col <= crt);
        let entries = (ts..ds.len())
            .filter(|&t| ds[t] < cfg.collision_dist && (t == 0 || ds[t - 1] >= cfg.collision_dist))
            .count();
        prop_assert_eq!(col, entries);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn episodes_stay_in_the_workspace(seed in 0u64..10_000, from in 0usize..4, step in 1usize..4) {
        let cfg = WorkspaceConfig::default();
        let tr = Transition::new(PartnerType::from_index(from), PartnerType::from_index((from + step) % 4)).unwrap();
        let log = run_episode(tr, seed, &cfg, None).unwrap();
        prop_assert_eq!(log.distances.len(), cfg.episode_len);
        prop_assert!((cfg.switch_lo..=cfg.switch_hi).contains(&log.t_switch));
        for o in &log.observations {
            let p = o.partner_pos();
            prop_assert!(p.x >= 0.0 && p.x <= cfg.width && p.y >= 0.0 && p.y <= cfg.depth);
        }
        prop_assert!(log.collisions_post <= log.collisions_total);
        prop_assert!(log.distances.iter().all(|d| d.is_finite() && *d >= 0.0));
    }
}
