//! Small generated datasets for smoke runs and examples.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::qa::QaRecord;

const ADJ: &[&str] = &["quick", "lazy", "small", "large", "old", "young", "brown", "quiet"];
const NOUN: &[&str] = &["fox", "dog", "cat", "bird", "horse", "owl", "bear", "fish"];
const VERB: &[&str] = &["jumps over", "runs past", "sleeps near", "looks at", "follows", "waits for"];
const PLACE: &[&str] = &["the river", "the hill", "the barn", "the forest", "the lake", "the road"];
const COLOR: &[&str] = &[
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white", "pink", "gray",
];
const SIZE: &[&str] = &["tiny", "huge", "tall", "short", "heavy", "light"];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "the {} {} {} the {} {} near {}.",
        ADJ.choose(rng).unwrap(),
        NOUN.choose(rng).unwrap(),
        VERB.choose(rng).unwrap(),
        ADJ.choose(rng).unwrap(),
        NOUN.choose(rng).unwrap(),
        PLACE.choose(rng).unwrap(),
    )
}

/// Template-grammar text of roughly `bytes` bytes, documents separated by
/// blank lines.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let n = rng.random_range(4..10);
        let doc: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        out.push_str(&doc.join(" "));
        out.push_str("\n\n");
    }
    out
}

/// Records asking for the color of one animal. The context describes
/// several animals; exactly one sentence names a color, and that color is
/// the answer.
pub fn synthetic_qa(count: usize, seed: u64) -> Vec<QaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut animals = NOUN.to_vec();
            animals.shuffle(&mut rng);
            let animals = &animals[..rng.random_range(3..6)];
            let target = rng.random_range(0..animals.len());
            let color = *COLOR.choose(&mut rng).unwrap();
            let context = animals
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    let fact = if j == target {
                        format!("the {a} is {color}.")
                    } else {
                        format!("the {a} is {}.", SIZE.choose(&mut rng).unwrap())
                    };
                    vec![fact, format!("it lives near {}.", PLACE.choose(&mut rng).unwrap())]
                })
                .collect();
            QaRecord {
                id: format!("synthetic-{i}"),
                question: format!("what color is the {}?", animals[target]),
                answer: color.to_string(),
                kind: "bridge".into(),
                level: "easy".into(),
                context,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::qa::flatten_context;

    #[test]
    fn corpus_size_and_determinism() {
        let a = synthetic_corpus(10_000, 1);
        assert!(a.len() >= 10_000 && a.len() < 11_000);
        assert_eq!(a, synthetic_corpus(10_000, 1));
        assert!(a.contains("\n\n"));
    }

    #[test]
    fn answers_occur_in_context() {
        for r in synthetic_qa(50, 3) {
            assert!(flatten_context(&r.context).contains(&r.answer), "{r:?}");
        }
    }
}
