use proptest::prelude::*;

use hecnn::analyzer::analyze;
use hecnn::dataset::random_images;
use hecnn::executor::{plan_partitions, run_inference, ThreadPlan};
use hecnn::layers::{PolyActivation, PoolMode};
use hecnn::model::{encrypt_model, load_model, save_model, Manifest};
use hecnn::packing::{pack_batch, unpack_batch};
use hecnn::{derive_params, plaintext_forward, HeBackend, ModelDesc, OpCounts, RefBackend};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_tile_the_output(m in 3usize..64, p in 1usize..6, c in 1usize..20) {
        prop_assume!(p <= m);
        let parts = plan_partitions(m, p, c);
        let rows = m - p + 1;
        prop_assert_eq!(parts.len(), c.min(rows));
        let mut next = 0;
        for part in &parts {
            prop_assert_eq!(part.out_rows.start, next);
            prop_assert_eq!(part.in_rows.start, part.out_rows.start);
            prop_assert_eq!(part.in_rows.end, part.out_rows.end + p - 1);
            prop_assert!(part.in_rows.end <= m);
            next = part.out_rows.end;
        }
        prop_assert_eq!(next, rows);
        let sizes: Vec<usize> = parts.iter().map(|p| p.out_rows.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pooled_activation_of_equal_inputs_is_g(a in -2f64.sqrt()..=2f64.sqrt(), s in 0.25f64..4.0) {
        let act = PolyActivation::with_scale(s);
        let want = s * act.g(a / s);
        let y = a;
        for mode in [PoolMode::Explicit, PoolMode::Folded] {
            let (c2, c1, c0) = act.folded(mode);
            let one = c2 * y * y + c1 * y + c0;
            let pooled = match mode {
                PoolMode::Explicit => 0.25 * (4.0 * one),
                PoolMode::Folded => 4.0 * one,
            };
            prop_assert!((pooled - want).abs() < 1e-9);
        }
    }

    #[test]
    fn analyzer_totals_are_layer_sums(rows in 4usize..30, filters in 1usize..8, kernel in 1usize..4, classes in 1usize..12, bias in any::<bool>()) {
        prop_assume!(rows > kernel && (rows - kernel + 1) % 2 == 0);
        let m = Manifest::canonical(rows, rows, filters, kernel, classes, bias, bias, PolyActivation::default());
        let r = analyze(&m, &derive_params(1 << 12, 600, 35, 0).unwrap()).unwrap();
        let sum = r.layers.iter().fold(OpCounts::default(), |a, l| a + l.counts);
        prop_assert_eq!(sum, r.totals);
        prop_assert_eq!(r.deepest_path_levels, 5);
        prop_assert_eq!(r.recommended_l, 600);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_files_round_trip(half in 1usize..5, filters in 1usize..4, classes in 1usize..5, seed in any::<u64>()) {
        let rows = 2 * half + 2;
        let m = Manifest::canonical(rows, rows, filters, 3, classes, true, seed % 2 == 0, PolyActivation::default());
        let model = ModelDesc::random(&m, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        prop_assert_eq!(load_model(dir.path()).unwrap(), model);
    }

    #[test]
    fn logits_do_not_depend_on_the_plan(
        f in 1usize..4, c in 1usize..5, h in 1usize..4, j in 1usize..4, w in 1usize..5, seed in 0u64..1000,
    ) {
        let m = Manifest::canonical(6, 6, 2, 3, 3, true, true, PolyActivation::default());
        let model = ModelDesc::random(&m, seed).unwrap();
        let b = RefBackend::new(derive_params(64, 300, 30, seed).unwrap()).unwrap();
        let k = b.keygen().unwrap();
        let em = encrypt_model(&b, &k.public, &model, seed).unwrap();
        let imgs = random_images(6, 6, 3, seed);
        let x = pack_batch(&b, &k.public, &imgs, seed).unwrap();
        let plan = ThreadPlan::new(f.min(2), c, h.min(3), j, w);
        let run = run_inference(&b, &k.eval, &em, &x, plan).unwrap();
        prop_assert_eq!(unpack_batch(&b, &k.secret, &run.logits).unwrap(), plaintext_forward(&model, &imgs).unwrap());
        prop_assert!(run.report.hwm_stage1 <= w && run.report.hwm_stage2 <= w);
    }
}
