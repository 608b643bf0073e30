use proptest::prelude::*;

use ect_core::cmodel::{CmConfig, ConsistencyModel};
use ect_core::eval::{fit_power_law, mmd_rbf, sliced_wasserstein};
use ect_core::nnkit::{ForwardCtx, Mlp, NetSpec};
use ect_core::oracle::{gaussian_consistency, gaussian_denoiser, gaussian_score, GaussianWorld};
use ect_core::schedule::{map_r, ScheduleConfig};
use ect_core::store::{decode_tensor, encode_tensor, payload_checksum, read_csv, write_csv, Checkpoint};
use ect_core::trainer::{ema_update, TrainState};
use ect_core::weighting::{adaptive_weight, pseudo_huber_grad, timestep_weight, AdaptiveKind, TimestepKind};
use ect_core::Batch;

fn batch(rows: usize, dim: usize) -> impl Strategy<Value = Batch> {
    prop::collection::vec(-5.0f64..5.0, rows * dim).prop_map(move |v| Batch::new(rows, dim, v).unwrap())
}

fn schedule() -> impl Strategy<Value = ScheduleConfig> {
    (1.1f64..300.0, 1u64..5000, 100u64..50_000, any::<bool>()).prop_map(|(q, d, total, ceil)| ScheduleConfig {
        q,
        d,
        total_iters: total,
        ceil_mode: ceil,
        ..ScheduleConfig::default()
    })
}

fn noise_level() -> impl Strategy<Value = f64> {
    (-6.0f64..4.5).prop_map(f64::exp)
}

const TIMESTEP_KINDS: [TimestepKind; 8] = [
    TimestepKind::Uniform,
    TimestepKind::InvT,
    TimestepKind::InvDt,
    TimestepKind::InvTPlusInvSigma,
    TimestepKind::Snr,
    TimestepKind::SnrPlus1,
    TimestepKind::SnrPlusInvVar,
    TimestepKind::SoftMinSnr,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn map_r_stays_below_t(cfg in schedule(), t in noise_level(), iters in 0u64..60_000) {
        let r = map_r(t, iters, &cfg);
        prop_assert!(r >= 0.0 && r < t, "r={r} t={t}");
    }

    #[test]
    fn map_r_tightens_with_iterations(cfg in schedule(), t in noise_level(), a in 0u64..60_000, b in 0u64..60_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(map_r(t, lo, &cfg) <= map_r(t, hi, &cfg));
    }

    #[test]
    fn floor_mode_first_stage_is_diffusion(cfg in schedule(), t in noise_level()) {
        let cfg = ScheduleConfig { ceil_mode: false, ..cfg };
        prop_assert_eq!(map_r(t, 0, &cfg), 0.0);
    }

    #[test]
    fn pseudo_huber_gradient_decomposes(delta in prop::collection::vec(-10.0f64..10.0, 1..8), c in 0.0f64..1.0) {
        let sq: f64 = delta.iter().map(|d| d * d).sum();
        prop_assume!(sq + c * c > 1e-12);
        let scale = (sq + c * c).powf(-0.5);
        for (g, d) in pseudo_huber_grad(&delta, c).iter().zip(&delta) {
            prop_assert!((g - scale * d).abs() <= 1e-10);
        }
    }

    #[test]
    fn inv_l2_weight_shrinks_with_error(delta in prop::collection::vec(-3.0f64..3.0, 1..6), grow in 1.0f64..10.0, c in 0.0f64..0.5) {
        prop_assume!(delta.iter().any(|d| d.abs() > 1e-6));
        let bigger: Vec<f64> = delta.iter().map(|d| d * grow).collect();
        let w1 = adaptive_weight(&delta, c, 0.5, AdaptiveKind::InvL2).unwrap();
        let w2 = adaptive_weight(&bigger, c, 0.5, AdaptiveKind::InvL2).unwrap();
        prop_assert!(w1 > 0.0 && w1.is_finite());
        prop_assert!(w1 >= w2);
    }

    #[test]
    fn timestep_weights_positive_and_finite(t in noise_level(), frac in 0.0f64..0.999, sd in 0.1f64..2.0) {
        let r = t * frac;
        for kind in TIMESTEP_KINDS {
            let w = timestep_weight(kind, t, r, sd).unwrap();
            prop_assert!(w > 0.0 && w.is_finite(), "{kind:?} {w}");
        }
    }

    #[test]
    fn sliced_wasserstein_is_a_symmetric_divergence(a in batch(40, 2), b in batch(40, 2), seed in any::<u64>()) {
        let ab = sliced_wasserstein(&a, &b, 16, seed).unwrap();
        let ba = sliced_wasserstein(&b, &a, 16, seed).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert_eq!(sliced_wasserstein(&a, &a, 16, seed).unwrap(), 0.0);
    }

    #[test]
    fn mmd_is_a_symmetric_divergence(a in batch(30, 3), b in batch(30, 3), bw in 0.1f64..5.0) {
        let ab = mmd_rbf(&a, &b, bw).unwrap();
        let ba = mmd_rbf(&b, &a, bw).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(mmd_rbf(&a, &a, bw).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn power_law_fit_is_scale_covariant(
        alpha in -1.0f64..1.0,
        k in 0.1f64..1000.0,
        noise in prop::collection::vec(-0.1f64..0.1, 6),
        lambda in 1e-3f64..1e3,
    ) {
        let pts: Vec<(f64, f64)> = noise
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let c = 2f64.powi(i as i32);
                (c, k * c.powf(alpha) * e.exp())
            })
            .collect();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(c, y)| (c * lambda, y)).collect();
        let f = fit_power_law(&pts).unwrap();
        let g = fit_power_law(&scaled).unwrap();
        prop_assert!((g.alpha - f.alpha).abs() <= 1e-10);
        prop_assert!((g.pearson_loglog - f.pearson_loglog).abs() <= 1e-10);
        let expect = f.k * lambda.powf(-f.alpha);
        prop_assert!((g.k - expect).abs() <= 1e-10 * expect.max(1.0));
    }

    #[test]
    fn tensor_roundtrip_is_lossless_at_f32(x in batch(7, 3)) {
        let bytes = encode_tensor(&x);
        let y = decode_tensor(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!((y.rows(), y.dim()), (7, 3));
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            prop_assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn consistency_boundary_is_identity(seed in any::<u64>(), x in batch(9, 2), sd in 0.2f64..2.0) {
        let model = ConsistencyModel::new(&CmConfig { sigma_data: sd, net: NetSpec::new(2, &[8, 8], 2) }).unwrap();
        let params = model.init(seed);
        let f = model.apply(&params, &x, &[0.0; 9], &ForwardCtx::eval()).unwrap();
        prop_assert_eq!(f.as_slice(), x.as_slice());
    }

    #[test]
    fn dropout_masks_depend_only_on_the_seed(seed in any::<u64>(), x in batch(5, 2), t1 in noise_level(), t2 in noise_level()) {
        let mut spec = NetSpec::new(2, &[12, 12], 2);
        spec.dropout_rate = 0.3;
        let net = Mlp::new(spec).unwrap();
        let params = net.init(1);
        let ctx = ForwardCtx::train(seed);
        let (_, a) = net.forward_cached(&params, &x, &[t1; 5], &ctx).unwrap();
        let (_, b) = net.forward_cached(&params, &x, &[t2; 5], &ctx).unwrap();
        prop_assert_eq!(a.dropout_masks(), b.dropout_masks());
    }

    #[test]
    fn ema_matches_closed_form(seed in any::<u64>(), beta in 0.0f64..0.999, steps in 1usize..50) {
        let net = Mlp::new(NetSpec::new(1, &[4], 1)).unwrap();
        let target = net.init(seed);
        let mut e = target.zeros_like();
        for _ in 0..steps {
            e = ema_update(&e, &target, beta).unwrap();
        }
        let w = 1.0 - beta.powi(steps as i32);
        for (a, p) in e.values().iter().zip(target.values()) {
            prop_assert!((a - w * p).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn tweedie_and_idempotence(mu in -3.0f64..3.0, s in 0.1f64..3.0, x in -10.0f64..10.0, t in noise_level()) {
        let world = GaussianWorld::new(vec![mu], s).unwrap();
        let score = gaussian_score(&[x], t, &world)[0];
        let d = gaussian_denoiser(&[x], t, &world)[0];
        prop_assert!((d - (x + t * t * score)).abs() <= 1e-12 * (1.0 + d.abs()));
        let f = gaussian_consistency(&[x], t, &world);
        prop_assert_eq!(gaussian_consistency(&f, 0.0, &world), f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_roundtrip_is_lossless_at_f32(x in batch(6, 2)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_csv(&path, &x).unwrap();
        let y = read_csv(&path).unwrap();
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            prop_assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_state(seed in any::<u64>(), iters in 0u64..1_000_000) {
        let cm = CmConfig { sigma_data: 0.5, net: NetSpec::new(2, &[6], 2) };
        let model = ConsistencyModel::new(&cm).unwrap();
        let mut state = TrainState::fresh(model.init(seed));
        state.iters = iters;
        let ckpt = Checkpoint::from_state(&state, &cm, &ScheduleConfig::default(), seed).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let restored = back.state(&model).unwrap();
        prop_assert_eq!(back.header.seed, seed);
        prop_assert_eq!(restored.iters, iters);
        for (a, b) in state.params.values().iter().zip(restored.params.values()) {
            prop_assert_eq!(*a as f32 as f64, *b);
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        prop_assert_eq!(back.header.checksum, ckpt.header.checksum);
        let payload_start = bytes.len() - 4 * back.payload.len();
        prop_assert_eq!(payload_checksum(&bytes[payload_start..]), ckpt.header.checksum);
    }
}
