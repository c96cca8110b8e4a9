//! Seeded synthetic corpora over a closed word vocabulary.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::QARecord;
use crate::error::{Error, Result};

pub const KEYS: [&str; 48] = [
    "cat", "dog", "fox", "owl", "bee", "ant", "elk", "yak", "emu", "cow", "pig", "hen", "ram",
    "bat", "eel", "cod", "jay", "gnu", "ape", "asp", "boa", "cub", "doe", "ewe", "hog", "koi",
    "mole", "moth", "mule", "newt", "orca", "puma", "pony", "rat", "seal", "slug", "swan",
    "toad", "wasp", "wolf", "worm", "crab", "crow", "deer", "duck", "frog", "goat", "hare",
];

pub const VALUES: [&str; 48] = [
    "red", "blue", "green", "gold", "pink", "gray", "black", "white", "amber", "azure", "beige",
    "coral", "cyan", "ivory", "jade", "khaki", "lemon", "lilac", "lime", "mauve", "navy",
    "ochre", "olive", "peach", "plum", "rose", "ruby", "rust", "sage", "sand", "silver", "tan",
    "teal", "violet", "wine", "apple", "pear", "fig", "kiwi", "mango", "melon", "grape",
    "lychee", "cherry", "guava", "papaya", "quince", "date",
];

/// Held-out keys and values for the out-of-domain split.
pub const OOD_KEYS: [&str; 16] = [
    "lion", "tiger", "bear", "zebra", "camel", "llama", "otter", "panda", "rhino", "sloth",
    "hippo", "lemur", "moose", "bison", "raven", "eagle",
];

pub const OOD_VALUES: [&str; 16] = [
    "copper", "bronze", "steel", "iron", "tin", "zinc", "nickel", "cobalt", "chrome", "pewter",
    "brass", "quartz", "opal", "onyx", "topaz", "pearl",
];

pub const FUNCTION_WORDS: [&str; 7] = ["key", "is", ".", "what", "?", "recall", "has"];

/// Separates the facts of an LM document from their restatement.
pub const RECALL: &str = "recall";

pub fn all_words() -> Vec<&'static str> {
    FUNCTION_WORDS
        .iter()
        .chain(&KEYS)
        .chain(&VALUES)
        .chain(&OOD_KEYS)
        .chain(&OOD_VALUES)
        .copied()
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Training keys, values, and fact template.
    #[default]
    Id,
    /// Unseen keys and values with a different fact template.
    Ood,
}

fn pools(split: Split) -> (&'static [&'static str], &'static [&'static str]) {
    match split {
        Split::Id => (&KEYS, &VALUES),
        Split::Ood => (&OOD_KEYS, &OOD_VALUES),
    }
}

fn fact(split: Split, k: &str, v: &str) -> String {
    match split {
        Split::Id => format!("key {k} {v} ."),
        Split::Ood => format!("has {k} {v} ."),
    }
}

fn draw_facts<R: Rng>(rng: &mut R, split: Split, n: usize) -> Vec<(&'static str, &'static str)> {
    let (keys, values) = pools(split);
    let ks: Vec<&str> = keys.choose_multiple(rng, n).copied().collect();
    let vs: Vec<&str> = values.choose_multiple(rng, n).copied().collect();
    ks.into_iter().zip(vs).collect()
}

/// Shuffled key/value facts, a question about one key, and the fact's
/// `key value` span as the answer.
pub fn gen_kv_retrieval_qa(
    n_records: usize,
    facts_per_context: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<QARecord>> {
    let (keys, values) = pools(split);
    if facts_per_context == 0 || facts_per_context > keys.len().min(values.len()) {
        return Err(Error::Config(format!(
            "facts_per_context must be in 1..={}, got {facts_per_context}",
            keys.len().min(values.len())
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match split {
        Split::Id => "id",
        Split::Ood => "ood",
    };
    let records = (0..n_records)
        .map(|i| {
            let facts = draw_facts(&mut rng, split, facts_per_context);
            let (k, v) = facts[rng.random_range(0..facts.len())];
            let context = facts
                .iter()
                .map(|(k, v)| fact(split, k, v))
                .collect::<Vec<_>>()
                .join(" ");
            QARecord {
                id: format!("{tag}-{seed}-{i}"),
                context,
                question: format!("what is {k} ?"),
                answer: format!("{k} {v}"),
            }
        })
        .collect();
    Ok(records)
}

/// Documents of facts, then `recall`, then the facts restated in shuffled
/// order, cut to a length drawn uniformly from `len_range` (inclusive, in words).
pub fn gen_lm_corpus(n_docs: usize, len_range: (usize, usize), seed: u64) -> Result<Vec<String>> {
    let (lo, hi) = len_range;
    if lo < 2 || lo > hi {
        return Err(Error::Config(format!(
            "document length range {lo}..={hi} must satisfy 2 <= lo <= hi"
        )));
    }
    // 4 words per fact plus 3 per restatement plus the marker.
    let max_facts = KEYS.len().min(VALUES.len());
    if 7 * max_facts + 1 < hi {
        return Err(Error::Config(format!(
            "documents longer than {} words are not supported",
            7 * max_facts + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..n_docs)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let n = (len - 1).div_ceil(7).max(1);
            let facts = draw_facts(&mut rng, Split::Id, n);
            let mut words: Vec<&str> = Vec::with_capacity(7 * n + 1);
            for (k, v) in &facts {
                words.extend(["key", k, v, "."]);
            }
            words.push(RECALL);
            let mut order = facts.clone();
            order.shuffle(&mut rng);
            for (k, v) in &order {
                words.extend([*k, v, "."]);
            }
            words.truncate(len);
            words.join(" ")
        })
        .collect();
    Ok(docs)
}

/// Deterministic shuffle of records, e.g. before splitting.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}
