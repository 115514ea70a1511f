use std::collections::BTreeMap;

use curate::rules::{filter_stream, RuleConfig, RuleId, RuleSet};
use curate::{Document, Domain, Language, TokenizerConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clean_text(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| format!("term{}", rng.gen_range(0..300))).collect::<Vec<_>>().join(" ")
}

#[test]
fn rejected_set_equals_planted_set() {
    let cfg = TokenizerConfig::default();
    let rules = RuleConfig {
        min_tokens: 20,
        check_toxicity: true,
        toxic_lexicon: vec!["slur".into(), "very bad phrase".into()],
        ..RuleConfig::default()
    };
    let set = RuleSet::new(rules).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut planted: BTreeMap<String, Vec<RuleId>> = BTreeMap::new();
    let mut docs = Vec::new();
    for k in 0..1_000 {
        let id = format!("d{k}");
        let mut text = clean_text(&mut rng, 40);
        let mut failed = Vec::new();
        if rng.gen_bool(0.1) {
            // Short enough to stay under the minimum after the toxic and PII insertions below.
            let n = rng.gen_range(1..9);
            text = clean_text(&mut rng, n);
            failed.push(RuleId::MinTokens);
        }
        if rng.gen_bool(0.1) {
            let n = text.chars().filter(|c| !c.is_whitespace()).count();
            text.push_str(&" #$%&".repeat(n / 4 + 1));
            failed.push(RuleId::SpecialCharRatio);
        }
        if rng.gen_bool(0.1) {
            let term = ["slur", "very bad phrase"].choose(&mut rng).unwrap();
            text = format!("{text} {term} end");
            failed.push(RuleId::Toxic);
        }
        if rng.gen_bool(0.1) {
            let pii =
                ["contact me at a@b.com", "call 13812345678 now", "phone (555) 123-4567"].choose(&mut rng).unwrap();
            text = format!("{pii} {text}");
            failed.push(RuleId::Pii);
        }
        if !failed.is_empty() {
            planted.insert(id.clone(), failed);
        }
        docs.push(Document::new(id, text, Language::En, Domain::Medical, "s", &cfg));
    }
    // Near misses that must pass: a word containing a lexicon term, digit runs too long for a phone.
    docs.push(Document::new(
        "near1",
        format!("{} slurry", clean_text(&mut rng, 30)),
        Language::En,
        Domain::Medical,
        "s",
        &cfg,
    ));
    docs.push(Document::new(
        "near2",
        format!("{} 123456789012345", clean_text(&mut rng, 30)),
        Language::En,
        Domain::Medical,
        "s",
        &cfg,
    ));

    let out = filter_stream(docs, &set);
    let got: BTreeMap<String, Vec<RuleId>> =
        out.rejected.iter().map(|r| (r.document.id.clone(), r.failed_rules.clone())).collect();
    assert!(planted.len() > 200);
    assert_eq!(got, planted);
    assert_eq!(out.passed.len() + out.rejected.len(), 1_002);
}
