use nudiff_core::dataset::{kmeans, proportional_quotas, window_origins};
use nudiff_core::diffusion::{cfg_combine, q_sample, NoiseSchedule};
use nudiff_core::metrics::{aji, binary_dice, dice, relabel};
use nudiff_core::rng::{normal_raster, stream_rng};
use nudiff_core::structure::{encode_structure, reconstruct_instances, NucleiStructure, WatershedParams};
use nudiff_core::toy::random_blob_map;
use nudiff_core::{FeatureMap, ImageRaster, InstanceMap, Raster};
use proptest::prelude::*;

fn instance_map(max_h: usize, max_w: usize, max_id: u32) -> impl Strategy<Value = InstanceMap> {
    (1..=max_h, 1..=max_w).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0..=max_id, h * w).prop_map(move |labels| InstanceMap::from_vec(h, w, labels).unwrap())
    })
}

fn map_pair() -> impl Strategy<Value = (InstanceMap, InstanceMap)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        let side = move || prop::collection::vec(0u32..6, h * w).prop_map(move |l| InstanceMap::from_vec(h, w, l).unwrap());
        (side(), side())
    })
}

/// A bijection on ids 0..=max that fixes background.
fn id_permutation(max: u32) -> impl Strategy<Value = Vec<u32>> {
    Just((1..=max).collect::<Vec<u32>>()).prop_shuffle().prop_map(|rest| {
        let mut p = vec![0];
        p.extend(rest);
        p
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoded_structures_are_valid(m in instance_map(12, 12, 5)) {
        let ns = encode_structure(&m);
        prop_assert!(ns.check_invariants().is_ok());
        for (i, &l) in m.labels.iter().enumerate() {
            prop_assert_eq!(l != 0, ns.semantic()[i] > 0.0);
        }
    }

    #[test]
    fn every_nucleus_straddles_its_center(m in instance_map(10, 10, 4)) {
        let ns = encode_structure(&m);
        for id in 1..=m.max_id() {
            let px: Vec<usize> = (0..m.labels.len()).filter(|&i| m.labels[i] == id).collect();
            if px.is_empty() {
                continue;
            }
            for plane in [ns.hdist(), ns.vdist()] {
                prop_assert!(px.iter().any(|&i| plane[i] <= 0.0));
                prop_assert!(px.iter().any(|&i| plane[i] >= 0.0));
                prop_assert!(px.iter().all(|&i| plane[i].abs() <= 1.0));
            }
        }
    }

    #[test]
    fn separated_blobs_round_trip(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let m = random_blob_map(&mut rng, 40, 40, 1..=5, 3..=6, 2);
        let back = reconstruct_instances(&encode_structure(&m), &WatershedParams::default()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn reconstruction_is_canonical(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 1);
        let raw = NucleiStructure::new(normal_raster(&mut rng, (3, 12, 12))).unwrap().sanitize();
        let inst = reconstruct_instances(&raw, &WatershedParams::default()).unwrap();
        prop_assert!(inst.is_canonical());
    }

    #[test]
    fn sanitize_is_idempotent_and_valid(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 2);
        let s = NucleiStructure::new(normal_raster(&mut rng, (3, 6, 7))).unwrap().sanitize();
        prop_assert!(s.check_invariants().is_ok());
        prop_assert_eq!(s.sanitize(), s);
    }

    #[test]
    fn metrics_lie_in_unit_interval((p, g) in map_pair()) {
        let a = aji(&p, &g).unwrap();
        let d = binary_dice(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(a <= d + 1e-12);
    }

    #[test]
    fn metrics_are_one_on_identical_inputs(m in instance_map(10, 10, 6)) {
        prop_assert_eq!(aji(&m, &m).unwrap(), 1.0);
        prop_assert_eq!(binary_dice(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn aji_ignores_id_permutations((p, g) in map_pair(), pp in id_permutation(5), gp in id_permutation(5)) {
        let a = aji(&p, &g).unwrap();
        prop_assert_eq!(aji(&relabel(&p, &pp), &relabel(&g, &gp)).unwrap(), a);
    }

    #[test]
    fn dice_is_symmetric(a in prop::collection::vec(any::<bool>(), 1..40), seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 3);
        let b: Vec<bool> = a.iter().map(|_| rand::Rng::random(&mut rng)).collect();
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    }

    #[test]
    fn guidance_is_affine_in_w(seed in any::<u64>(), w in -1.0f64..10.0) {
        let mut rng = stream_rng(seed, 4);
        let c: FeatureMap<f64> = normal_raster(&mut rng, (3, 4, 4)).cast();
        let u: FeatureMap<f64> = normal_raster(&mut rng, (3, 4, 4)).cast();
        let f = cfg_combine(&c, &u, w).unwrap();
        for i in 0..f.data.len() {
            prop_assert!((f.data[i] - ((1.0 + w) * c.data[i] - w * u.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn schedules_decrease(steps in 2usize..400, b1 in 1e-5f64..1e-3, bt in 1e-3f64..0.05) {
        let s = NoiseSchedule::linear(steps, b1, bt).unwrap();
        for t in 2..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn noiseless_q_sample_scales_the_input(t in 1usize..=1000, v in -1.0f32..1.0) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let y = q_sample(&Raster::filled(1, 1, 1, v), t, &Raster::zeros(1, 1, 1), &s).unwrap();
        prop_assert!((f64::from(y.data[0]) - s.alpha_bar(t).sqrt() * f64::from(v)).abs() < 1e-6);
    }

    #[test]
    fn windows_cover_the_axis(size in 1usize..64, extra in 0usize..200, stride in 1usize..64) {
        let dim = size + extra;
        let stride = stride.min(size);
        let o = window_origins(dim, size, stride);
        prop_assert_eq!(o[0], 0);
        prop_assert_eq!(*o.last().unwrap(), dim - size);
        prop_assert!(o.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= stride));
    }

    #[test]
    fn quotas_sum_to_target(sizes in prop::collection::vec(0usize..30, 1..8), frac in 0.0f64..=1.0) {
        let total: usize = sizes.iter().sum();
        let target = (frac * total as f64).round() as usize;
        let q = proportional_quotas(&sizes, target);
        prop_assert_eq!(q.iter().sum::<usize>(), target);
        prop_assert!(q.iter().zip(&sizes).all(|(a, b)| a <= b));
    }

    #[test]
    fn kmeans_objective_never_rises(seed in any::<u64>(), n in 3usize..40, k in 1usize..4) {
        let mut rng = stream_rng(seed, 5);
        let pts: Vec<Vec<f64>> =
            (0..n).map(|_| normal_raster(&mut rng, (1, 1, 3)).data.iter().map(|&v| f64::from(v)).collect()).collect();
        let k = k.min(n);
        let a = kmeans(&pts, k, seed, 100).unwrap();
        prop_assert!(a.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        prop_assert!(a.labels.iter().all(|&l| l < k));
        prop_assert_eq!(kmeans(&pts, k, seed, 100).unwrap(), a);
    }

    #[test]
    fn clamped_images_stay_in_range(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 6);
        let img = ImageRaster::clamped(normal_raster(&mut rng, (3, 4, 4))).unwrap();
        prop_assert!(img.raster().data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
