//! Seeded synthetic corpus: short templated English documents.
//!
//! The text is low-entropy at the character level (fixed word list, a few
//! sentence shapes), so a tiny target learns it quickly and long stretches
//! are predictable several tokens ahead.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBJECTS: &[&str] = &[
    "the cat", "the dog", "a small bird", "the old farmer", "my sister", "the teacher", "a young fox",
    "the baker", "our neighbour", "the captain",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "carries", "watches", "paints", "follows", "builds", "cleans", "visits",
];
const OBJECTS: &[&str] = &[
    "the red house", "a wooden boat", "the green garden", "a bright lamp", "the quiet river", "an old map",
    "the tall tree", "a warm loaf of bread", "the morning train", "a blue kite",
];
const PLACES: &[&str] = &[
    "in the village", "near the market", "by the sea", "on the hill", "after school", "before dinner",
];
const CLOSERS: &[&str] = &[
    "and then it was time to go home.",
    "and everyone was happy.",
    "because the day was long.",
    "while the sun was setting.",
];

fn sentence<R: Rng>(rng: &mut R) -> String {
    let s = SUBJECTS.choose(rng).expect("non-empty");
    let v = VERBS.choose(rng).expect("non-empty");
    let o = OBJECTS.choose(rng).expect("non-empty");
    match rng.gen_range(0..4) {
        0 => format!("{s} {v} {o}."),
        1 => format!("{s} {v} {o} {}.", PLACES.choose(rng).expect("non-empty")),
        2 => format!("{s} {v} {o} {}", CLOSERS.choose(rng).expect("non-empty")),
        _ => format!("every day {s} {v} {o}."),
    }
}

/// About `bytes` bytes of documents separated by blank lines.
pub fn generate(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let n = rng.gen_range(3..8);
        let mut doc: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        if let Some(first) = doc.first_mut() {
            let mut c = first.chars();
            if let Some(h) = c.next() {
                *first = h.to_uppercase().chain(c).collect();
            }
        }
        out.push_str(&doc.join(" "));
        out.push_str("\n\n");
    }
    out.truncate(bytes);
    out.into_bytes()
}

/// Prompts drawn from the same distribution as [`generate`].
pub fn prompts(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let s = sentence(&mut rng);
            let cut = rng.gen_range(s.len() / 3..s.len() * 2 / 3);
            s[..cut].to_string()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = generate(5000, 1);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, generate(5000, 1));
        assert_ne!(a, generate(5000, 2));
        assert!(a.is_ascii());
        assert!(crate::data::split_documents(&a).len() > 3);
    }

    #[test]
    fn prompts_are_nonempty() {
        let p = prompts(20, 3);
        assert_eq!(p.len(), 20);
        assert!(p.iter().all(|s| !s.is_empty()));
    }
}
