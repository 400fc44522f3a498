use mapcomm::{
    instantiate_operator, noiseless_observation, path_weights, select_abstraction, stream_rng,
    transmit, BeliefState, Codebook, Dims, EncoderParams, NoiseModel, OperatorSource, Pos,
    SensedMap, Stream,
};
use proptest::prelude::*;

#[test]
fn builtin_codebook_text_round_trips() {
    let book = Codebook::builtin_16();
    let again = Codebook::parse(&book.to_text()).unwrap();
    assert_eq!(again.to_text(), book.to_text());
    assert_eq!(again.len(), 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipping_only_removes_cells(rows in 3usize..20, cols in 3usize..20, r in 0usize..20, c in 0usize..20) {
        let dims = Dims::new(rows, cols);
        let pos = Pos::new(r % rows, c % cols);
        let book = Codebook::builtin_16();
        for t in book.templates() {
            let op = instantiate_operator(t, dims, pos).unwrap();
            prop_assert!(op.n_rows() <= t.k());
            let mut seen = std::collections::HashSet::new();
            for row in op.rows() {
                prop_assert!(!row.is_empty());
                for &cell in row {
                    prop_assert!(seen.insert(cell), "blocks overlap at {}", cell);
                }
            }
            let k = op.n_rows() as u64;
            prop_assert_eq!(book.bits_for(OperatorSource::Template(t.id()), op.n_rows()), 12 * k + 4);
            prop_assert_eq!(book.bits_for(OperatorSource::Raw, op.n_rows()), 12 * k);
        }
    }

    #[test]
    fn selection_is_the_exhaustive_minimum(
        seed in any::<u64>(),
        lambda in 0.0f64..0.1,
        pr in 7usize..13, pc in 7usize..13,
    ) {
        use rand::Rng;
        let dims = Dims::new(20, 20);
        let mut rng = stream_rng(seed, Stream::Map);
        let truth: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let sensor = Pos::new(pr, pc);
        let mut sensed = SensedMap::new(dims.len());
        let win = mapcomm::window_at(dims, sensor, 15, 15).unwrap();
        sensed.record(&win.cells, &truth);
        let belief = BeliefState::new(dims.len(), 0.5, 1.0).unwrap();
        let weights = path_weights(&[Pos::new(0, 0), Pos::new(19, 19)], dims, 5.0, false).unwrap();
        let params = EncoderParams { lambda_coefficient: lambda, ..EncoderParams::default() };
        let channel = NoiseModel::new(1e-4).unwrap();
        let book = Codebook::builtin_16();

        let sel = select_abstraction(&belief, &sensed, &weights, sensor, dims, &book, &params, &channel).unwrap();

        // Re-score every template by running the update on a copy.
        let mut best = (f64::INFINITY, 0);
        for (t, &(id, reported)) in book.templates().iter().zip(&sel.per_template) {
            let op = instantiate_operator(t, dims, sensor).unwrap();
            let obs = noiseless_observation(&sensed, &op).unwrap();
            let mut copy = belief.clone();
            copy.kalman_update(&op, &obs, &channel).unwrap();
            copy.project();
            let err: f64 = sensed
                .cells()
                .iter()
                .map(|&c| (weights.get(c) * (sensed.values()[c] - copy.projected()[c])).powi(2))
                .sum();
            let j = err + lambda * op.n_rows() as f64;
            prop_assert!((j - reported).abs() <= 1e-9 * j.max(1.0));
            if j < best.0 - 1e-12 {
                best = (j, id);
            }
        }
        prop_assert_eq!(sel.theta, Some(best.1));
    }

    #[test]
    fn channel_streams_are_reproducible(seed in any::<u64>(), var in 0.0f64..0.1) {
        let book = Codebook::builtin_16();
        let obs = vec![0.5; 9];
        let a = transmit(&obs, OperatorSource::Template(2), var, &book, &mut stream_rng(seed, Stream::Channel));
        let b = transmit(&obs, OperatorSource::Template(2), var, &book, &mut stream_rng(seed, Stream::Channel));
        prop_assert_eq!(&a.payload, &b.payload);
        for ((p, o), n) in a.payload.iter().zip(&obs).zip(&a.noise) {
            prop_assert_eq!(*p, o + n);
        }
        prop_assert_eq!(a.bits, 9 * 12 + 4);
    }
}
