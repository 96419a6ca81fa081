use proptest::prelude::*;

use pqs_bfl::fedcore::{aggregate, partition_dirichlet, ClientUpdate, Dataset, LayerShape, ModelParams};
use pqs_bfl::protocol::{init_phase, run_round_with, ChainMode, DatasetSource, Envelope, ExperimentConfig};
use pqs_bfl::fedcore::{SyntheticSpec, TrainConfig};
use pqs_bfl::sigsuite::{digest_model, keygen, sign, verify, SchemeId};

fn scheme() -> impl Strategy<Value = SchemeId> {
    prop_oneof![Just(SchemeId::Pqc), Just(SchemeId::Ecdsa), Just(SchemeId::None)]
}

fn layout(sizes: &[usize]) -> Vec<LayerShape> {
    sizes.iter().enumerate().map(|(i, &n)| LayerShape::new(&format!("layer{i}"), &[n])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sign_verify_roundtrip(s in scheme(), seed in any::<u64>(), msg in proptest::collection::vec(any::<u8>(), 0..256)) {
        let key = keygen(s, seed).unwrap();
        let sig = sign(&key, &msg).unwrap();
        prop_assert!(verify(&key.public_key, s, &msg, &sig).unwrap());
    }

    #[test]
    fn aggregate_stays_within_client_bounds(
        rows in proptest::collection::vec((proptest::collection::vec(-100.0f32..100.0, 6), 1usize..500), 1..8)
    ) {
        let shape = layout(&[6]);
        let updates: Vec<ClientUpdate> = rows
            .iter()
            .enumerate()
            .map(|(i, (values, n))| ClientUpdate {
                client_id: i as u64,
                params: ModelParams::new(shape.clone(), values.clone()).unwrap(),
                n_samples: *n,
                round: 1,
            })
            .collect();
        let agg = aggregate(&updates).unwrap();
        for j in 0..6 {
            let lo = rows.iter().map(|(v, _)| v[j]).fold(f32::INFINITY, f32::min);
            let hi = rows.iter().map(|(v, _)| v[j]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(lo <= agg.values()[j] && agg.values()[j] <= hi);
        }
    }

    #[test]
    fn equal_weights_give_plain_mean(a in proptest::collection::vec(-10.0f32..10.0, 4), b in proptest::collection::vec(-10.0f32..10.0, 4), n in 1usize..100) {
        let shape = layout(&[4]);
        let update = |id, v: &Vec<f32>| ClientUpdate { client_id: id, params: ModelParams::new(shape.clone(), v.clone()).unwrap(), n_samples: n, round: 1 };
        let agg = aggregate(&[update(0, &a), update(1, &b)]).unwrap();
        for j in 0..4 {
            let mean = ((f64::from(a[j]) + f64::from(b[j])) / 2.0) as f32;
            prop_assert_eq!(agg.values()[j], mean);
        }
    }

    #[test]
    fn partitions_cover_every_sample_once(
        labels in proptest::collection::vec(0u32..4, 20..200),
        clients in 1usize..8,
        alpha in 0.05f64..10.0,
        seed in any::<u64>(),
    ) {
        let n = labels.len();
        let data = Dataset::new(vec![0.0; n], 1, labels, 4).unwrap();
        let parts = partition_dirichlet(&data, clients, alpha, seed).unwrap();
        prop_assert_eq!(parts.len(), clients);
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.sample_indices.iter().copied()).collect();
        prop_assert!(parts.iter().all(|p| !p.sample_indices.is_empty()));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn layer_order_does_not_change_digest(values in proptest::collection::vec(-1.0f32..1.0, 9), rotate in 0usize..3) {
        let shape = layout(&[2, 3, 4]);
        let mut layers: Vec<(String, Vec<f32>)> = vec![
            ("layer0".into(), values[..2].to_vec()),
            ("layer1".into(), values[2..5].to_vec()),
            ("layer2".into(), values[5..].to_vec()),
        ];
        let canonical = ModelParams::from_layers(shape.clone(), layers.clone()).unwrap();
        layers.rotate_left(rotate);
        let permuted = ModelParams::from_layers(shape, layers).unwrap();
        prop_assert_eq!(digest_model(&canonical), digest_model(&permuted));
    }

    #[test]
    fn any_offchain_mutation_is_excluded(victim in 0u64..3, index in 0usize..1000, delta in prop_oneof![-1.0f32..-1e-3, 1e-3f32..1.0]) {
        let config = ExperimentConfig {
            dataset: DatasetSource::Synth(SyntheticSpec { n_samples: 200, ..SyntheticSpec::default() }),
            scheme: SchemeId::None,
            chain_mode: ChainMode::Bc,
            rounds: 1,
            train: TrainConfig { local_epochs: 1, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        };
        let mut state = init_phase(&config).unwrap();
        let mut mutate = |e: &mut Envelope| {
            if e.client_id == victim {
                let n = e.params.len();
                e.params.values_mut()[index % n] += delta;
            }
        };
        let m = run_round_with(&mut state, 1, &mut mutate).unwrap();
        prop_assert_eq!((m.verified_count, m.aggregated_count), (3, 2));
    }
}

#[test]
fn empty_params_digest_is_sha3_of_nothing() {
    assert_eq!(digest_model(&ModelParams::empty()).to_hex(), "a7ffc6f8bf1ed76651c14756a061d662f580ff4de43b49fa82d80a4b80f8434a");
}

#[test]
fn single_element_perturbations_change_digest() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let shape = layout(&[16, 8]);
    let values: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = ModelParams::new(shape.clone(), values.clone()).unwrap();
    let reference = digest_model(&base);
    for _ in 0..100 {
        let mut v = values.clone();
        let j = rng.gen_range(0..v.len());
        v[j] = f32::from_bits(v[j].to_bits() ^ (1 << rng.gen_range(0..32)));
        assert_ne!(digest_model(&ModelParams::new(shape.clone(), v).unwrap()), reference);
    }
}
