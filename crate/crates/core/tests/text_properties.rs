use fieldsync_core::text::{
    apply_fuzzy, apply_strict, compute_diff, map_position, to_patches, DEFAULT_CONTEXT_LEN,
    DEFAULT_FUZZY_WINDOW,
};
use proptest::prelude::*;

/// Insert/delete edit distance by the textbook O(n*m) table.
fn indel_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut row = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            row[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1]
            } else {
                1 + prev[j].min(row[j - 1])
            };
        }
        prev = row;
    }
    prev[b.len()]
}

fn small_alphabet() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[abcé\n ]{0,200}").unwrap()
}

#[test]
fn oracle_sanity() {
    assert_eq!(indel_distance("The cat sat", "The hat sat"), 2);
    assert_eq!(indel_distance("", "abc"), 3);
    assert_eq!(indel_distance("abcabba", "cbabac"), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn round_trip_and_canonical(a in small_alphabet(), b in small_alphabet()) {
        let script = compute_diff(&a, &b).unwrap();
        prop_assert!(script.is_canonical());
        prop_assert_eq!(apply_strict(&a, &script).unwrap(), b);
    }

    #[test]
    fn minimal_for_small_inputs(a in small_alphabet(), b in small_alphabet()) {
        let script = compute_diff(&a, &b).unwrap();
        prop_assert_eq!(script.edit_cost(), indel_distance(&a, &b));
    }

    #[test]
    fn fuzzy_degenerates_to_strict(a in small_alphabet(), b in small_alphabet()) {
        let script = compute_diff(&a, &b).unwrap();
        let patches = to_patches(&script, DEFAULT_CONTEXT_LEN);
        let (out, applied) = apply_fuzzy(&a, &patches, DEFAULT_FUZZY_WINDOW);
        prop_assert!(applied.iter().all(|&x| x));
        prop_assert_eq!(out, b);
    }

    #[test]
    fn mapping_is_monotone(a in small_alphabet(), b in small_alphabet(), p in 0usize..=200, q in 0usize..=200) {
        let script = compute_diff(&a, &b).unwrap();
        let len = a.chars().count();
        let (lo, hi) = (p.min(q).min(len), p.max(q).min(len));
        let mlo = map_position(&script, lo).unwrap();
        let mhi = map_position(&script, hi).unwrap();
        prop_assert!(mlo <= mhi);
        prop_assert!(mhi <= b.chars().count());
    }
}

#[test]
fn large_inputs_round_trip_with_coarsening() {
    let line = |i: usize| format!("line {i}: status report entry with some detail\n");
    let old: String = (0..400).map(line).collect();
    let mut new_lines: Vec<String> = (0..400).map(line).collect();
    new_lines[10] = "changed line\n".into();
    new_lines.remove(200);
    new_lines.insert(300, "added line\n".into());
    let new: String = new_lines.concat();
    assert!(old.chars().count() > 10_000);
    let script = compute_diff(&old, &new).unwrap();
    assert!(script.is_canonical());
    assert_eq!(apply_strict(&old, &script).unwrap(), new);
}
