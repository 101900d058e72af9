mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::fuzz::{apply, check_step, random_op, run_sequence};
use tracesim::digest::Digest;
use tracesim::state::{ContextData, Snapshot};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn lifecycle_invariants_hold(seed in any::<u64>(), len in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Err(msg) = run_sequence(&mut rng, len) {
            prop_assert!(false, "{}", msg);
        }
    }

    #[test]
    fn snapshot_round_trip_restores_state(seed in any::<u64>(), len in 0usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = run_sequence(&mut rng, len).unwrap();
        let snap = Snapshot::new(ctx.clone(), Digest::of(b"cfg"), Digest::of(b"trace"));
        let bytes = snap.to_bytes();
        let back = Snapshot::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.context, &ctx);
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.digest(), snap.digest());
    }

    #[test]
    fn forks_are_isolated(seed in any::<u64>(), len in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = ContextData::new();
        for i in 0..len {
            apply(&mut a, &random_op(&mut rng, i as u64));
        }
        let frozen = a.clone();
        let reader = a.clone();
        for i in 0..len {
            let op = random_op(&mut rng, (len + i) as u64);
            let before = a.clone();
            apply(&mut a, &op);
            check_step(&before, &a, &op).unwrap();
        }
        prop_assert_eq!(reader, frozen);
    }
}
