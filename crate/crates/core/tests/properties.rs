use infoneat::data::{decode_csv, decode_native, encode_csv, encode_native, synth_traces, SynthSpec};
use infoneat::entropy::{gram_matrix_1d, joint_entropy, label_gram, renyi_entropy, KernelSpec, DEFAULT_ALPHA};
use infoneat::evaluation::{key_scores, rank, LeakageModelSpec};
use infoneat::evolution::{mutate, EvolutionConfig, InnovationRegistry};
use infoneat::network::{assign_layers, forward, forward_collect, Genome, GenomeRecord, InitSpec, NodeKind};
use infoneat::rng::{seeded, Rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn grown_genome(seed: u64, steps: usize) -> Genome {
    let mut rng: Rng = seeded(seed);
    let init = InitSpec::xavier(5, 2, 3);
    let cfg = EvolutionConfig { connection_add_prob: 0.7, node_add_prob: 0.4, ..Default::default() };
    let mut g = Genome::new_minimal(5, 2, 3, &init, &mut rng).unwrap();
    let mut registry = InnovationRegistry::from_genome(&g);
    for _ in 0..steps {
        g = mutate(&g, &cfg, &init, &mut registry, &mut rng);
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_entropy_ignores_operand_order(
        labels in prop::collection::vec(prop::collection::vec(0usize..4, 24), 2..5),
        seed in any::<u64>(),
    ) {
        let grams: Vec<_> = labels.iter().map(|l| label_gram(l).unwrap()).collect();
        let refs: Vec<_> = grams.iter().collect();
        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut seeded(seed));
        let a = joint_entropy(&refs, DEFAULT_ALPHA).unwrap();
        let b = joint_entropy(&shuffled, DEFAULT_ALPHA).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn entropy_lies_between_zero_and_log_n(values in prop::collection::vec(-5.0f64..5.0, 2..40), bw in 0.05f64..3.0) {
        let n = values.len() as f64;
        for kernel in [KernelSpec::Gaussian { bandwidth: bw }, KernelSpec::Partition] {
            let s = renyi_entropy(&gram_matrix_1d(&values, &kernel).unwrap(), DEFAULT_ALPHA).unwrap();
            prop_assert!(s >= -1e-9 && s <= n.log2() + 1e-9, "entropy {s} outside [0, log2 {n}]");
        }
    }

    #[test]
    fn joint_entropy_dominates_each_operand(a in prop::collection::vec(0usize..3, 30), b in prop::collection::vec(0usize..3, 30)) {
        let (ga, gb) = (label_gram(&a).unwrap(), label_gram(&b).unwrap());
        let joint = joint_entropy(&[&ga, &gb], DEFAULT_ALPHA).unwrap();
        prop_assert!(joint + 1e-9 >= renyi_entropy(&ga, DEFAULT_ALPHA).unwrap());
        prop_assert!(joint + 1e-9 >= renyi_entropy(&gb, DEFAULT_ALPHA).unwrap());
    }

    #[test]
    fn forward_yields_probability_vectors(seed in any::<u64>(), steps in 0usize..25, input in prop::collection::vec(-1.0f64..2.0, 5)) {
        let g = grown_genome(seed, steps);
        let p = forward(&g, &input).unwrap();
        prop_assert_eq!(p.len(), 2);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layers_are_strictly_graded(seed in any::<u64>(), steps in 0usize..30) {
        let g = grown_genome(seed, steps);
        let layers = assign_layers(&g).unwrap();
        for c in g.connections.iter().filter(|c| c.enabled) {
            prop_assert!(layers.layer_of[&c.from] < layers.layer_of[&c.to]);
        }
        for n in &g.nodes {
            let l = layers.layer_of[&n.id];
            match n.kind {
                NodeKind::Input => prop_assert_eq!(l, 0),
                NodeKind::Hidden => prop_assert!(l >= 1 && l <= layers.depth),
                NodeKind::Output => prop_assert_eq!(l, layers.output_layer()),
            }
        }
        let acts = forward_collect(&g, &[vec![0.5; 5]]).unwrap();
        prop_assert_eq!(acts.groups.len(), layers.depth + 1);
    }

    #[test]
    fn genome_json_round_trip_is_exact(seed in any::<u64>(), steps in 0usize..20) {
        let mut g = grown_genome(seed, steps);
        g.fitness = Some(0.1 + seed as f64 * 1e-20);
        let text = serde_json::to_string(&g.to_record()).unwrap();
        let back = serde_json::from_str::<GenomeRecord>(&text).unwrap().into_genome().unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn traceset_formats_round_trip(seed in any::<u64>(), n in 1usize..40, f in 1usize..12) {
        let spec = SynthSpec { n_features: f, informative: (0..f).collect(), ..Default::default() };
        let set = synth_traces(&spec, n, seed, &mut seeded(seed)).unwrap();
        let native = decode_native(&encode_native(&set).unwrap()).unwrap();
        prop_assert_eq!(&native, &set);
        let csv = decode_csv(&encode_csv(&set), Some(set.meta.m)).unwrap();
        prop_assert_eq!(&csv.traces, &set.traces);
        prop_assert_eq!(&csv.labels, &set.labels);
        prop_assert_eq!(&csv.plaintexts, &set.plaintexts);
    }

    #[test]
    fn rank_is_invariant_under_monotone_maps(scores in prop::collection::vec(-50.0f64..0.0, 256), key in any::<u8>()) {
        let mapped: Vec<f64> = scores.iter().map(|s| 3.0 * s + (s / 10.0).exp()).collect();
        prop_assert_eq!(rank(&scores, key), rank(&mapped, key));
    }

    #[test]
    fn key_scores_follow_trace_permutation(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = seeded(seed);
        let model = LeakageModelSpec::aes_id();
        let plaintexts: Vec<u8> = (0..n).map(|_| rand::Rng::random(&mut rng)).collect();
        let preds: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..256).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let base = key_scores(&preds, &plaintexts, &model).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let p2: Vec<_> = order.iter().map(|i| preds[*i].clone()).collect();
        let t2: Vec<_> = order.iter().map(|i| plaintexts[*i]).collect();
        let permuted = key_scores(&p2, &t2, &model).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
