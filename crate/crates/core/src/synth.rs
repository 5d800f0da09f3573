//! Planted-structure synthetic corpus generator.
//!
//! Each sentence holds 1-3 clauses of the shape `aspect verb opinion`,
//! joined by connective words. The record label is decided solely by the
//! opinion word inside the aspect's own clause; other clauses carry
//! different polarities, so aspect-blind classifiers hit a ceiling on
//! multi-clause sentences.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Polarity, SentenceRecord, POLARITIES};

pub const ASPECTS: [&str; 10] = [
    "battery", "screen", "keyboard", "camera", "speaker", "charger", "display", "trackpad",
    "memory", "processor",
];
pub const VERBS: [&str; 4] = ["is", "was", "seems", "feels"];
pub const OPINIONS_POSITIVE: [&str; 6] = [
    "great", "excellent", "fantastic", "wonderful", "superb", "delightful",
];
pub const OPINIONS_NEGATIVE: [&str; 6] = [
    "terrible", "awful", "horrible", "disappointing", "dreadful", "poor",
];
pub const OPINIONS_NEUTRAL: [&str; 6] = [
    "okay", "average", "ordinary", "acceptable", "standard", "plain",
];
pub const JOINERS: [&str; 3] = ["but", "and", "while"];

fn opinion_words(p: Polarity) -> &'static [&'static str] {
    match p {
        Polarity::Positive => &OPINIONS_POSITIVE,
        Polarity::Negative => &OPINIONS_NEGATIVE,
        Polarity::Neutral => &OPINIONS_NEUTRAL,
    }
}

/// Probability of a sentence holding 1, 2, or 3 clauses.
#[derive(Clone, Copy, Debug)]
pub struct GenProfile {
    pub clause_weights: [f64; 3],
}

impl GenProfile {
    /// Mostly single-clause sentences: every record's evidence is almost
    /// always the only opinion in the sentence.
    pub fn single_aspect() -> GenProfile {
        GenProfile {
            clause_weights: [0.9, 0.07, 0.03],
        }
    }

    /// Two or three clauses per sentence: distractor opinions everywhere,
    /// so the aspect span must be used to classify correctly.
    pub fn multi_aspect() -> GenProfile {
        GenProfile {
            clause_weights: [0.0, 0.5, 0.5],
        }
    }
}

/// Emits exactly `size` records, one per clause, deterministically per seed.
/// Global label counts are balanced greedily.
pub fn generate_synthetic(seed: u64, size: usize, profile: GenProfile) -> Vec<SentenceRecord> {
    assert!(size >= 1, "size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(size);
    let mut counts = [0usize; 3];
    while records.len() < size {
        let remaining = size - records.len();
        let clauses = sample_clause_count(&mut rng, profile).min(remaining);
        let sentence = build_sentence(&mut rng, clauses, &mut counts);
        records.extend(sentence);
    }
    records
}

fn sample_clause_count(rng: &mut ChaCha8Rng, profile: GenProfile) -> usize {
    let total: f64 = profile.clause_weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, &w) in profile.clause_weights.iter().enumerate() {
        if r < w {
            return i + 1;
        }
        r -= w;
    }
    profile.clause_weights.len()
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn build_sentence(
    rng: &mut ChaCha8Rng,
    clauses: usize,
    counts: &mut [usize; 3],
) -> Vec<SentenceRecord> {
    // Distinct aspects per sentence.
    let mut aspect_pool: Vec<&str> = ASPECTS.to_vec();
    for i in (1..aspect_pool.len()).rev() {
        aspect_pool.swap(i, rng.gen_range(0..=i));
    }

    // Distinct polarities per sentence, globally balanced: each clause takes
    // the rarest label not yet used in this sentence.
    let mut polarities = Vec::with_capacity(clauses);
    for _ in 0..clauses {
        let choice = POLARITIES
            .iter()
            .filter(|p| !polarities.contains(*p))
            .min_by_key(|p| (counts[p.index()], p.index()))
            .copied()
            .expect("at most 3 clauses");
        counts[choice.index()] += 1;
        polarities.push(choice);
    }

    let mut tokens: Vec<String> = Vec::new();
    let mut dep_head: Vec<usize> = Vec::new();
    let mut dep_label: Vec<String> = Vec::new();
    let mut parse = String::from("(S");
    // With clause c starting at token 4c, its opinion sits at 4c + 2.
    let opinion_pos = |c: usize| 4 * c + 2;
    for c in 0..clauses {
        let aspect = aspect_pool[c];
        let verb = pick(rng, &VERBS);
        let opinion = pick(rng, opinion_words(polarities[c]));
        tokens.push(aspect.to_string());
        dep_head.push(opinion_pos(c) + 1);
        dep_label.push("nsubj".to_string());
        tokens.push(verb.to_string());
        dep_head.push(opinion_pos(c) + 1);
        dep_label.push("cop".to_string());
        tokens.push(opinion.to_string());
        if c == 0 {
            dep_head.push(0);
            dep_label.push("root".to_string());
        } else {
            dep_head.push(opinion_pos(0) + 1);
            dep_label.push("conj".to_string());
        }
        parse.push_str(&format!(" (CL (NP {aspect}) (VP {verb} {opinion}))"));
        if c + 1 < clauses {
            let joiner = pick(rng, &JOINERS);
            tokens.push(joiner.to_string());
            dep_head.push(opinion_pos(c + 1) + 1);
            dep_label.push("cc".to_string());
            parse.push_str(&format!(" {joiner}"));
        }
    }
    parse.push(')');

    (0..clauses)
        .map(|c| SentenceRecord {
            tokens: tokens.clone(),
            aspect_from: 4 * c,
            aspect_to: 4 * c,
            polarity: polarities[c],
            dep_head: dep_head.clone(),
            dep_label: dep_label.clone(),
            constituency: parse.clone(),
        })
        .collect()
}

/// Label a record by looking only inside the aspect's clause, using the
/// generator's word lists. Returns None when the opinion word is foreign.
pub fn rule_based_label(record: &SentenceRecord) -> Option<Polarity> {
    let clause_start = record.aspect_from - record.aspect_from % 4;
    let opinion = record.tokens.get(clause_start + 2)?;
    for p in POLARITIES {
        if opinion_words(p).contains(&opinion.as_str()) {
            return Some(p);
        }
    }
    None
}

pub fn label_counts(records: &[SentenceRecord]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for r in records {
        counts[r.polarity.index()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_segment_signal, ConstituentTree};

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(0, 25, GenProfile::single_aspect());
        let b = generate_synthetic(0, 25, GenProfile::single_aspect());
        assert_eq!(a, b);
        let c = generate_synthetic(1, 25, GenProfile::single_aspect());
        assert_ne!(a, c);
    }

    #[test]
    fn records_validate_and_size_is_exact() {
        for profile in [GenProfile::single_aspect(), GenProfile::multi_aspect()] {
            let records = generate_synthetic(3, 57, profile);
            assert_eq!(records.len(), 57);
            for r in &records {
                r.validate().unwrap();
            }
        }
    }

    #[test]
    fn labels_are_near_balanced() {
        let records = generate_synthetic(0, 200, GenProfile::single_aspect());
        let counts = label_counts(&records);
        for &c in &counts {
            assert!(c >= 40, "class count {c} below 40 in {counts:?}");
            assert!(
                (c as f64 - 200.0 / 3.0).abs() <= 10.0,
                "class count {c} far from balanced in {counts:?}"
            );
        }
    }

    #[test]
    fn one_nsubj_edge_per_clause_touching_its_aspect() {
        let records = generate_synthetic(7, 60, GenProfile::multi_aspect());
        for r in &records {
            let clauses = (r.n() + 1) / 4;
            for c in 0..clauses {
                let lo = 4 * c;
                let hi = (4 * c + 3).min(r.n());
                let nsubj: Vec<usize> = (lo..hi)
                    .filter(|&i| r.dep_label[i] == "nsubj")
                    .collect();
                assert_eq!(nsubj, vec![lo], "clause {c} of {:?}", r.tokens);
            }
        }
    }

    #[test]
    fn rule_based_reader_recovers_every_label() {
        for profile in [GenProfile::single_aspect(), GenProfile::multi_aspect()] {
            let records = generate_synthetic(11, 90, profile);
            for r in &records {
                assert_eq!(rule_based_label(r), Some(r.polarity));
            }
        }
    }

    #[test]
    fn multi_clause_sentences_have_distinct_polarities() {
        let records = generate_synthetic(5, 80, GenProfile::multi_aspect());
        let mut i = 0;
        while i < records.len() {
            let mut group = vec![records[i].polarity];
            let tokens = records[i].tokens.clone();
            let mut j = i + 1;
            while j < records.len() && records[j].tokens == tokens && records[j].aspect_from > records[j - 1].aspect_from {
                group.push(records[j].polarity);
                j += 1;
            }
            let mut dedup = group.clone();
            dedup.dedup();
            dedup.sort_by_key(|p| p.index());
            dedup.dedup();
            assert_eq!(dedup.len(), group.len(), "repeated polarity in {tokens:?}");
            i = j;
        }
    }

    #[test]
    fn multi_aspect_profile_rarely_emits_single_clause_sentences() {
        let records = generate_synthetic(0, 40, GenProfile::multi_aspect());
        let singles = records.iter().filter(|r| r.n() == 3).count();
        assert!(singles <= 1, "found {singles} single-clause sentences");
    }

    #[test]
    fn constituents_put_clauses_at_layer_two_and_phrases_at_layer_three() {
        let records = generate_synthetic(2, 30, GenProfile::multi_aspect());
        let r = records.iter().find(|r| r.n() == 7).expect("a 2-clause record");
        let tree = ConstituentTree::parse(&r.constituency).unwrap();
        assert_eq!(tree.layer_segments(2), vec![(0, 2), (3, 3), (4, 6)]);
        assert_eq!(
            tree.layer_segments(3),
            vec![(0, 0), (1, 2), (3, 3), (4, 4), (5, 6)]
        );
        let signal = build_segment_signal(&tree, 4);
        assert_eq!(signal.layers.len(), 4);
        for slice in &signal.layers {
            for i in 0..slice.rows() {
                assert_eq!(slice.get(i, i), 1.0);
            }
        }
    }
}
