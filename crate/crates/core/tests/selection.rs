use curate::selector::{reference_quality, select_single_turn, InstructionRecord, ReferenceScorer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stub scorer restated from its definition: c = distinct instruction tokens / 10,
/// q from response length buckets 0-4, 5-19, 20-49, 50+ -> 1, 2, 3, 4.
fn brute_force(r: &InstructionRecord) -> f64 {
    let words: std::collections::HashSet<&str> = r.instruction.split_whitespace().collect();
    let n = r.response.split_whitespace().count();
    let q = match n {
        0..=4 => 1.0,
        5..=19 => 2.0,
        20..=49 => 3.0,
        _ => 4.0,
    };
    words.len() as f64 / 10.0 * q
}

#[test]
fn kept_set_equals_threshold_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let records: Vec<InstructionRecord> = (0..100)
        .map(|k| {
            let instr =
                (0..rng.gen_range(0..25)).map(|_| format!("i{}", rng.gen_range(0..15))).collect::<Vec<_>>().join(" ");
            let resp =
                (0..rng.gen_range(0..80)).map(|_| format!("r{}", rng.gen_range(0..99))).collect::<Vec<_>>().join(" ");
            InstructionRecord::new(format!("rec{k}"), instr, resp)
        })
        .collect();
    assert_eq!([4, 5, 19, 20, 49, 50].map(reference_quality), [1, 2, 2, 3, 3, 4]);
    for threshold in [0.0, 1.0, 2.4, 5.0] {
        let out = select_single_turn(records.clone(), &ReferenceScorer::default(), &threshold);
        assert!(out.errors.is_empty());
        let kept: Vec<&str> = out.kept.iter().map(|s| s.record.id.as_str()).collect();
        let expect: Vec<&str> = records.iter().filter(|r| brute_force(r) >= threshold).map(|r| r.id.as_str()).collect();
        assert_eq!(kept, expect, "threshold {threshold}");
        for s in out.kept.iter().chain(&out.dropped) {
            assert!((s.score.combined - brute_force(&s.record)).abs() < 1e-12);
        }
    }
}
