use atv_core::calibration::{PoolKind, PoolPolicy};
use atv_core::evalgen::{evaluate_outputs, generate, toy_model, SynthSpec, ToyModelSpec};
use atv_core::io::checkpoint::{decode, encode};
use atv_core::model::{BlockTrace, LayerKind, Model, ModelConfig};
use atv_core::mot::{decouple, mask_iou, prune_pathway, Pathway, PathwayPruneConfig, PATHWAY_LAYERS};
use atv_core::numerics::{Matrix, Rng};
use atv_core::pruner::{
    mask_nm, mask_unstructured, run_atv_pipeline, ComparisonGroup, ImportanceScores, PipelineConfig, PruneMask,
    Propagation, SparsityPattern,
};
use atv_core::saliency::{drift_at, SaliencySignal};
use proptest::prelude::*;

fn scores(rows: usize, cols: usize, seed: u64) -> (ImportanceScores, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.next_f64()).collect();
    (ImportanceScores::from_vec(rows, cols, data.clone()).unwrap(), data)
}

fn small_setup(seed: u64) -> (Model, Vec<atv_core::TokenSequence>) {
    let cfg = ModelConfig {
        d_model: 8,
        n_blocks: 2,
        n_heads: 2,
        d_ffn: 16,
    };
    let data = generate(&SynthSpec {
        seed,
        n_samples: 5,
        n_visual: 6,
        n_text: 3,
        d_model: 8,
        ..SynthSpec::default()
    })
    .unwrap();
    (toy_model(&ToyModelSpec::new(cfg, seed)), data.all())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_row_masks_prune_the_lowest(rows in 1usize..12, cols in 1usize..40, milli in 0usize..=1000, seed: u64) {
        let (s, data) = scores(rows, cols, seed);
        let mask = mask_unstructured(&s, milli as f64 / 1000.0, ComparisonGroup::PerOutputRow).unwrap();
        for i in 0..rows {
            let row = &mask.keep()[i * cols..(i + 1) * cols];
            prop_assert_eq!(row.iter().filter(|&&k| !k).count(), milli * cols / 1000);
            let vals = &data[i * cols..(i + 1) * cols];
            let hi = row.iter().zip(vals).filter(|p| !*p.0).map(|p| *p.1).fold(f64::MIN, f64::max);
            let lo = row.iter().zip(vals).filter(|p| *p.0).map(|p| *p.1).fold(f64::MAX, f64::min);
            prop_assert!(hi <= lo);
        }
    }

    #[test]
    fn nm_masks_keep_exactly_n(rows in 1usize..10, groups in 1usize..8, nm in prop::sample::select(vec![(1usize, 2usize), (2, 4), (4, 8), (3, 4)]), seed: u64) {
        let (n, m) = nm;
        let (s, _) = scores(rows, groups * m, seed);
        let mask = mask_nm(&s, n, m).unwrap();
        prop_assert!(mask.keep().chunks(m).all(|g| g.iter().filter(|&&k| k).count() == n));
        prop_assert_eq!(mask.sparsity(), 1.0 - n as f64 / m as f64);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(len in 1usize..200, seed: u64) {
        let mut rng = Rng::new(seed);
        let a = PruneMask::from_keep(1, len, (0..len).map(|_| rng.below(2) == 1).collect()).unwrap();
        let b = PruneMask::from_keep(1, len, (0..len).map(|_| rng.below(2) == 1).collect()).unwrap();
        let ab = mask_iou(&a, &b).unwrap().value;
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap().value);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(mask_iou(&a, &a).unwrap().value, 1.0);
    }

    #[test]
    fn drift_is_scale_invariant(n in 1usize..10, d in 1usize..16, c in 0.01f32..100.0, seed: u64) {
        let mut rng = Rng::new(seed);
        let x = Matrix::from_fn(n, d, |_, _| rng.normal() as f32);
        let y = Matrix::from_fn(n, d, |_, _| rng.normal() as f32);
        let trace = |x: Matrix, y: Matrix| BlockTrace { input: x, output: y, activations: None, attention: None };
        let pos: Vec<usize> = (0..n).collect();
        let base = drift_at(&trace(x.clone(), y.clone()), &pos);
        let scaled = drift_at(&trace(x.scale(c), y.scale(c)), &pos);
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a.1 - b.1).abs() < 1e-5, "{} vs {}", a.1, b.1);
            prop_assert!((0.0..=2.0).contains(&a.1));
        }
    }

    #[test]
    fn checkpoints_round_trip(d_head in 1usize..4, heads in 1usize..3, blocks in 1usize..3, ffn in 1usize..9, seed: u64) {
        let cfg = ModelConfig { d_model: d_head * heads, n_blocks: blocks, n_heads: heads, d_ffn: ffn };
        let m = toy_model(&ToyModelSpec::new(cfg, seed));
        let back = decode(&encode(&m).unwrap()).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), encode(&m).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pipeline_is_deterministic_and_exact(seed in 0u64..1000, milli in 0usize..=1000) {
        let (model, data) = small_setup(seed);
        let rho = milli as f64 / 1000.0;
        let cfg = PipelineConfig::new(PoolPolicy::atv(2.0, SaliencySignal::Drift), SparsityPattern::Unstructured { rho });
        let a = run_atv_pipeline(&model, &data, &cfg).unwrap();
        let b = run_atv_pipeline(&model, &data, &cfg).unwrap();
        prop_assert_eq!(&a.masks, &b.masks);
        for l in &a.report.layers {
            prop_assert_eq!(l.pruned, l.rows * (milli * l.cols / 1000));
        }
        for (block, masks) in a.model.blocks.iter().zip(&a.masks) {
            for kind in LayerKind::ALL {
                let w = block.layer(kind);
                let mask = &masks[&kind];
                prop_assert!(w.data().iter().zip(mask.keep()).all(|(&x, &k)| k || x == 0.0));
            }
        }
    }

    #[test]
    fn pathway_pruning_is_scoped(seed in 0u64..1000, visual in any::<bool>()) {
        let (model, data) = small_setup(seed);
        let dm = decouple(&model);
        let target = if visual { Pathway::Visual } else { Pathway::Textual };
        let cfg = PathwayPruneConfig {
            target,
            pool: PoolKind::MixedAll,
            pattern: SparsityPattern::Unstructured { rho: 0.5 },
            group: ComparisonGroup::PerOutputRow,
            propagation: Propagation::Sequential,
        };
        let out = prune_pathway(&dm, &data, &cfg).unwrap();
        let other = if visual { Pathway::Textual } else { Pathway::Visual };
        for (before, after) in dm.blocks.iter().zip(&out.model.blocks) {
            prop_assert_eq!(before.pathway(other), after.pathway(other));
            prop_assert_eq!(&before.w_o, &after.w_o);
            prop_assert_eq!(&before.norm1, &after.norm1);
            prop_assert_eq!(&before.norm2, &after.norm2);
            for l in PATHWAY_LAYERS {
                prop_assert_ne!(before.pathway(target).layer(l), after.pathway(target).layer(l));
            }
        }
        let same = evaluate_outputs(&out.model, &out.model, &data).unwrap();
        prop_assert_eq!((same.text, same.visual, same.all), (0.0, 0.0, 0.0));
    }
}
