use std::collections::HashMap;

use kvrefresh::tasks::chainkey::{
    evaluate_chain, generate_chain_instance, oracle_chain, oracle_output, parse_instance_line,
};
use proptest::prelude::*;

#[test]
fn truncated_oracle_scores_its_fraction() {
    let inst = generate_chain_instance(40, 2, 10, 3).unwrap();
    let gold = oracle_chain(&inst, &inst.keys[5], 10).unwrap();
    assert_eq!(evaluate_chain(&inst, &gold.join(", ")).score, 1.0);
    assert_eq!(evaluate_chain(&inst, &gold[..3].join(", ")).score, 0.3);
    // extra keys past T do not count
    let long = oracle_chain(&inst, &inst.keys[5], 14).unwrap();
    assert_eq!(evaluate_chain(&inst, &long.join(",")).valid_prefix_length, 10);
}

#[test]
fn corrupted_fifth_key_stops_the_chain() {
    let inst = generate_chain_instance(40, 3, 10, 4).unwrap();
    let mut gold = oracle_chain(&inst, &inst.keys[0], 10).unwrap();
    gold[4] = format!("{}x", gold[4]);
    assert_eq!(evaluate_chain(&inst, &gold.join(", ")).score, 0.4);
    // an in-context key that does not link also stops it
    let mut gold = oracle_chain(&inst, &inst.keys[0], 10).unwrap();
    gold[4] = gold[7].clone();
    assert_eq!(evaluate_chain(&inst, &gold.join(", ")).score, 0.4);
}

#[test]
fn whitespace_around_keys_is_ignored() {
    let inst = generate_chain_instance(20, 2, 4, 5).unwrap();
    let gold = oracle_chain(&inst, &inst.keys[2], 4).unwrap();
    let text = format!("  {} ,{},\n{} , {}\n", gold[0], gold[1], gold[2], gold[3]);
    assert_eq!(evaluate_chain(&inst, &text).score, 1.0);
    assert_eq!(evaluate_chain(&inst, "   ").score, 0.0);
}

#[test]
fn generation_is_deterministic_and_well_formed() {
    for seed in 0..20 {
        let a = generate_chain_instance(100, 2 + (seed as usize % 3), 10, seed).unwrap();
        let b = generate_chain_instance(100, 2 + (seed as usize % 3), 10, seed).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let line = serde_json::to_string(&a).unwrap();
        assert_eq!(parse_instance_line(&line).unwrap(), a);
        // each key appears in the prompt exactly once
        for k in &a.keys {
            assert_eq!(a.prompt.matches(&format!("Name of key: {k}\n")).count(), 1, "{k}");
        }
        let mut first_words: HashMap<&str, usize> = HashMap::new();
        for k in &a.keys {
            *first_words.entry(k.split('-').next().unwrap()).or_default() += 1;
        }
        assert!(first_words.values().all(|&n| n == 1));
        assert_eq!(evaluate_chain(&a, &oracle_output(&a).unwrap()).score, 1.0);
    }
    assert_ne!(
        generate_chain_instance(30, 2, 5, 1).unwrap().keys,
        generate_chain_instance(30, 2, 5, 2).unwrap().keys
    );
}

#[test]
fn prompt_ends_with_the_request() {
    let inst = generate_chain_instance(12, 2, 7, 0).unwrap();
    assert!(inst.prompt.ends_with("Chain of seven keys:"));
    assert!(inst.prompt.contains("\n\nContext:"));
}

#[test]
fn malformed_instances_are_rejected() {
    let inst = generate_chain_instance(12, 2, 3, 0).unwrap();
    let mut v: serde_json::Value = serde_json::to_value(&inst).unwrap();
    v["keys"].as_array_mut().unwrap().pop();
    assert!(parse_instance_line(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::to_value(&inst).unwrap();
    v["extra"] = serde_json::json!(1);
    assert!(parse_instance_line(&v.to_string()).is_err());
}

proptest! {
    #[test]
    fn text_after_the_first_invalid_key_is_irrelevant(
        seed in 0u64..200,
        valid in 0usize..8,
        start in 0usize..30,
        junk in "[a-z ,-]{1,12}",
        tail in "[a-z, -]{0,60}",
    ) {
        let inst = generate_chain_instance(30, 2, 8, seed).unwrap();
        let gold = oracle_chain(&inst, &inst.keys[start], valid).unwrap();
        let mut base = gold.clone();
        // a word never used as a key, so the chain breaks here
        base.push(format!("zz{junk}zz").replace(',', ""));
        let cut = base.join(", ");
        let with_tail = format!("{cut}, {tail}");
        let s = evaluate_chain(&inst, &cut);
        prop_assert_eq!(s.valid_prefix_length, valid);
        prop_assert_eq!(evaluate_chain(&inst, &with_tail), s);
    }

    #[test]
    fn score_is_a_fraction_of_t(seed in 0u64..50, text in "[a-z, -]{0,80}") {
        let inst = generate_chain_instance(25, 2, 5, seed).unwrap();
        let s = evaluate_chain(&inst, &text);
        prop_assert!(s.valid_prefix_length <= 5);
        prop_assert!((0.0..=1.0).contains(&s.score));
    }
}
