mod common;

use proptest::prelude::*;

use common::{play_convergence, random_convergence_case, rng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn any_delivery_order_converges_to_distinct_sum(seed in any::<u64>()) {
        let case = random_convergence_case(&mut rng(seed));
        let (finals, expected) = play_convergence(&case);
        for (i, f) in finals.iter().enumerate() {
            prop_assert_eq!(f, &expected, "replica {}", i);
        }
    }
}

#[test]
fn duplicates_alone_change_nothing() {
    let mut case = random_convergence_case(&mut rng(42));
    let (before, _) = play_convergence(&case);
    for order in &mut case.deliveries {
        let copy = order.clone();
        order.extend(copy);
    }
    let (after, _) = play_convergence(&case);
    assert_eq!(before, after);
}
