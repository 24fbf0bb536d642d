//! Seeded synthetic world with parallel reasoning chains.
//!
//! Each family shares one surface title `F` between two chains:
//!
//! ```text
//! film chain:  "F is a film directed by A."  ->  "A married C."
//! novel chain: "F is a novel written by B."  ->  "B married D."
//! ```
//!
//! plus two passages that mention `F` but lead nowhere. A *parallel* query
//! ("Who is the spouse of the film director of F?") names only `F`, so
//! the second hop is reachable only through the bridge's person. A *single-chain*
//! query names every entity, so the bridge adds nothing new.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{PassageRecord, QueryRecord, Subtype};

/// Hash-embedder dimension that keeps the world's vocabulary collision-free
/// for the default seed.
pub const SYNTH_DIM: usize = 1 << 16;

pub const DEFAULT_FAMILIES: usize = 10;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kl", "st", "th", "vr"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ae", "ou", "ei"];
const CODAS: &[&str] = &["", "n", "r", "l", "s", "th", "m", "x"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Family {
    pub title: String,
    pub director: String,
    pub novelist: String,
    pub director_spouse: String,
    pub novelist_spouse: String,
    pub river_town: String,
    pub singer: String,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub families: Vec<Family>,
    pub passages: Vec<PassageRecord>,
    pub queries: Vec<QueryRecord>,
}

impl SynthWorld {
    pub fn parallel_queries(&self) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(|q| q.subtype == Subtype::BridgeComparison)
    }

    pub fn single_chain_queries(&self) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(|q| q.subtype == Subtype::Compositional)
    }
}

fn pseudo_name(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            name.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
        }
        name.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        let mut chars = name.chars();
        let first = chars.next().expect("non-empty").to_ascii_uppercase();
        let name: String = std::iter::once(first).chain(chars).collect();
        if used.insert(name.to_lowercase()) {
            return name;
        }
    }
}

fn passage(id: String, text: String) -> PassageRecord {
    PassageRecord {
        id,
        title: String::new(),
        text,
    }
}

fn query(id: String, question: String, gold: [&str; 2], subtype: Subtype) -> QueryRecord {
    QueryRecord {
        id,
        question,
        gold_ids: gold.iter().map(|g| g.to_string()).collect(),
        subtype,
    }
}

/// Six passages and four queries per family.
pub fn generate_world(families: usize, seed: u64) -> SynthWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut out = SynthWorld {
        families: Vec::with_capacity(families),
        passages: Vec::with_capacity(families * 6),
        queries: Vec::with_capacity(families * 4),
    };
    for i in 0..families {
        let mut name = || pseudo_name(&mut rng, &mut used);
        let fam = Family {
            title: name(),
            director: name(),
            novelist: name(),
            director_spouse: name(),
            novelist_spouse: name(),
            river_town: name(),
            singer: name(),
        };
        let id = |s: &str| format!("f{i:02}-{s}");
        let Family {
            title: f,
            director: a,
            novelist: b,
            director_spouse: c,
            novelist_spouse: d,
            river_town: town,
            singer,
        } = &fam;
        out.passages.extend([
            passage(id("film"), format!("{f} is a film directed by {a}.")),
            passage(id("novel"), format!("{f} is a novel written by {b}.")),
            passage(id("river"), format!("{f} is a river flowing past {town}.")),
            passage(id("song"), format!("{f} is a song recorded by {singer}.")),
            passage(id("film-spouse"), format!("{a} married {c}.")),
            passage(id("novel-spouse"), format!("{b} married {d}.")),
        ]);
        let (film, film_spouse) = (id("film"), id("film-spouse"));
        let (novel, novel_spouse) = (id("novel"), id("novel-spouse"));
        out.queries.extend([
            query(
                id("q-film"),
                format!("Who is the spouse of the film director of {f}?"),
                [&film, &film_spouse],
                Subtype::BridgeComparison,
            ),
            query(
                id("q-novel"),
                format!("Who is the spouse of the novel writer of {f}?"),
                [&novel, &novel_spouse],
                Subtype::BridgeComparison,
            ),
            query(
                id("q-film-chain"),
                format!("Is {c} the spouse of {a}, the film director of {f}?"),
                [&film, &film_spouse],
                Subtype::Compositional,
            ),
            query(
                id("q-novel-chain"),
                format!("Is {d} the spouse of {b}, the novel writer of {f}?"),
                [&novel, &novel_spouse],
                Subtype::Compositional,
            ),
        ]);
        out.families.push(fam);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::HashEmbedder;
    use crate::text::normalized_tokens;

    #[test]
    fn shape_and_determinism() {
        let w = generate_world(DEFAULT_FAMILIES, 13);
        assert_eq!(w.passages.len(), 60);
        assert_eq!(w.parallel_queries().count(), 20);
        assert_eq!(w.single_chain_queries().count(), 20);
        let again = generate_world(DEFAULT_FAMILIES, 13);
        assert_eq!(w.passages, again.passages);
        assert_eq!(w.queries, again.queries);
        assert_ne!(w.passages, generate_world(DEFAULT_FAMILIES, 14).passages);
    }

    #[test]
    fn vocabulary_is_collision_free_at_synth_dim() {
        let w = generate_world(DEFAULT_FAMILIES, 13);
        let emb = HashEmbedder::new(SYNTH_DIM);
        let vocab: BTreeSet<String> = w
            .passages
            .iter()
            .map(|p| p.text.as_str())
            .chain(w.queries.iter().map(|q| q.question.as_str()))
            .flat_map(|t| normalized_tokens(t).collect::<Vec<_>>())
            .collect();
        let slots: BTreeSet<usize> = vocab.iter().map(|t| emb.slot(t)).collect();
        assert_eq!(slots.len(), vocab.len());
    }
}
