use proptest::prelude::*;

use gaitbo::bo::{canonicalize, enumerate_actions, update_fsrr, FsrrState};
use gaitbo::config::RunConfig;
use gaitbo::eval::smooth_merits;
use gaitbo::gp::{GpState, KernelParams};
use gaitbo::terrain::{Heightmap, TerrainModel};

fn heights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.2f64..0.2, 3..25)
}

fn model(zs: &[f64]) -> (Vec<f64>, TerrainModel) {
    let xs: Vec<f64> = (0..zs.len()).map(|i| -0.5 + 0.1 * i as f64).collect();
    let m = TerrainModel::new(Heightmap::new(xs.clone(), zs.to_vec()).unwrap());
    (xs, m)
}

proptest! {
    #[test]
    fn terrain_stays_within_segment_bounds(zs in heights(), t in 0.0f64..1.0, k in 0usize..24) {
        let (xs, m) = model(&zs);
        let k = k % (zs.len() - 1);
        let x = xs[k] + t * (xs[k + 1] - xs[k]);
        let z = m.height_at(x).unwrap();
        prop_assert!(z >= zs[k].min(zs[k + 1]) - 1e-12);
        prop_assert!(z <= zs[k].max(zs[k + 1]) + 1e-12);
    }

    #[test]
    fn monotone_data_gives_monotone_terrain(mut zs in heights(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        zs.sort_by(f64::total_cmp);
        let (xs, m) = model(&zs);
        let span = xs[xs.len() - 1] - xs[0];
        let (lo, hi) = (xs[0] + a.min(b) * span, xs[0] + a.max(b) * span);
        prop_assert!(m.height_at(lo).unwrap() <= m.height_at(hi).unwrap() + 1e-12);
        prop_assert!(m.gradient_at(lo).unwrap().slope >= -1e-12);
    }

    #[test]
    fn canonicalization_is_idempotent(raw in prop::array::uniform5(prop::sample::select(vec![0u8, 3, 4, 5, 6]))) {
        if let Ok(a) = canonicalize(raw) {
            prop_assert_eq!(canonicalize(a.slots()).unwrap(), a);
            prop_assert!(enumerate_actions().contains(&a));
            prop_assert!([1, 3, 5].contains(&a.phase_count()));
        }
    }

    #[test]
    fn incremental_gp_matches_batch(
        data in prop::collection::vec((0.0f64..1.0, prop::array::uniform5(0u8..7), -0.9f64..0.9), 1..40),
        q in (0.0f64..1.0, prop::array::uniform5(0u8..7)),
    ) {
        let params = KernelParams::with_defaults(0);
        let inputs: Vec<Vec<f64>> = data
            .iter()
            .map(|(g, a, _)| std::iter::once(*g).chain(a.iter().map(|v| *v as f64)).collect())
            .collect();
        let merits: Vec<f64> = data.iter().map(|d| d.2).collect();
        let batch = GpState::from_data(params.clone(), inputs.clone(), merits.clone()).unwrap();
        let mut inc = GpState::new(params.clone()).unwrap();
        for (x, m) in inputs.iter().zip(&merits) {
            inc.add_observation(x, *m).unwrap();
        }
        let query: Vec<f64> = std::iter::once(q.0).chain(q.1.iter().map(|v| *v as f64)).collect();
        let a = batch.posterior(std::slice::from_ref(&query)).unwrap();
        let b = inc.posterior(&[query]).unwrap();
        prop_assert!((a.mean[0] - b.mean[0]).abs() < 1e-8);
        prop_assert!((a.std[0] - b.std[0]).abs() < 1e-6);
        prop_assert!(a.std[0] <= params.signal_variance.sqrt() + 1e-12);
    }

    #[test]
    fn smoothing_stays_within_range(series in prop::collection::vec(-1.0f64..1.0, 1..60), half in 0usize..6) {
        let s = smooth_merits(&series, 2 * half + 1).unwrap();
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s.len(), series.len());
        prop_assert!(s.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn fsrr_stays_nonnegative(prev in 0.0f64..5.0, obs in -1.0f64..1.0, pred in -1.0f64..1.0, rho in 0.01f64..1.0) {
        let s = update_fsrr(FsrrState { value: prev, k: 3 }, obs, pred, rho);
        prop_assert!(s.value >= 0.0);
        prop_assert_eq!(s.k, 4);
        if obs == pred {
            prop_assert!((s.value - (1.0 - rho) * prev).abs() < 1e-15);
        }
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), rho in 0.01f64..1.0, sigma in 0.01f64..0.3, rounds in 1usize..2000) {
        let mut c = RunConfig::default();
        c.bo.seed = seed;
        c.bo.rho = rho;
        c.terrain.sigma = sigma;
        c.eval.rounds = rounds;
        let text = c.to_toml().unwrap();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }
}
