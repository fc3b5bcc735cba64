mod common;

use meshplan::mesh::{PartitionSpec, TensorKey};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = PartitionSpec> {
    let axis = prop::collection::vec(prop::sample::select(vec!["data", "model", "expert"]), 0..=2);
    prop::collection::vec(axis, 1..=4).prop_map(|axes| {
        PartitionSpec::new(
            axes.into_iter()
                .map(|mut a| {
                    a.dedup();
                    a.into_iter().map(String::from).collect()
                })
                .collect(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sharding_invariants((cfg, data, model) in common::sharded_case()) {
        common::check_sharding(&cfg, data, model)?;
    }

    #[test]
    fn heads_rule(heads in 1u64..=96, tp in 1u64..=32) {
        common::check_heads_rule(heads, tp)?;
    }

    #[test]
    fn spec_text_round_trip(s in spec()) {
        let back: PartitionSpec = s.to_string().parse().unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn key_text_round_trip(node in "[a-z][a-z0-9_]{0,8}", name in "[a-z][a-z.]{0,8}", edge in 0usize..1000) {
        for key in [TensorKey::Input(node.clone()), TensorKey::Edge(edge), TensorKey::param(node.clone(), name.clone())] {
            let back: TensorKey = key.to_string().parse().unwrap();
            prop_assert_eq!(back, key);
        }
    }
}
