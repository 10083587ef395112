//! Template-generated paraphrase corpus with STS, pair and classification files.
//!
//! A template is a (family, skeleton) pair. Families own their slot words and
//! a place word; the five skeletons are shared. Gold STS scores: 1.0 for the
//! same template with one slot refilled, 0.5 for the same family with another
//! skeleton, 0.0 for different families.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::tokenize;

pub const TRAIN_FILE: &str = "train.txt";
pub const STS_FILE: &str = "sts.tsv";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const CLASSIFICATION_FILE: &str = "classification.tsv";

const TRAIN_SENTENCES: usize = 500;
const STS_PER_SCORE: usize = 100;
const PAIRS_PER_LABEL: usize = 100;
const CLASSIFICATION_PER_FAMILY: usize = 50;

struct Family {
    name: &'static str,
    place: &'static str,
    nouns: [&'static str; 8],
    verbs: [&'static str; 6],
    adjs: [&'static str; 6],
}

const FAMILIES: [Family; 8] = [
    Family {
        name: "kitchen",
        place: "kitchen",
        nouns: ["chef", "pan", "knife", "soup", "bread", "oven", "spoon", "onion"],
        verbs: ["stirs", "bakes", "slices", "tastes", "boils", "seasons"],
        adjs: ["hot", "crispy", "salty", "sweet", "greasy", "fresh"],
    },
    Family {
        name: "garden",
        place: "garden",
        nouns: ["gardener", "rose", "hose", "tulip", "shovel", "seed", "hedge", "weed"],
        verbs: ["waters", "prunes", "plants", "digs", "trims", "picks"],
        adjs: ["green", "leafy", "blooming", "thorny", "muddy", "wild"],
    },
    Family {
        name: "ocean",
        place: "harbor",
        nouns: ["sailor", "boat", "wave", "whale", "anchor", "net", "shell", "reef"],
        verbs: ["sails", "anchors", "dives", "fishes", "rows", "drifts"],
        adjs: ["salty", "stormy", "deep", "blue", "calm", "foamy"],
    },
    Family {
        name: "city",
        place: "street",
        nouns: ["driver", "taxi", "tower", "bridge", "crowd", "subway", "siren", "mayor"],
        verbs: ["honks", "crosses", "rushes", "parks", "commutes", "builds"],
        adjs: ["busy", "noisy", "urban", "crowded", "neon", "tall"],
    },
    Family {
        name: "music",
        place: "studio",
        nouns: ["singer", "guitar", "drum", "violin", "choir", "melody", "piano", "band"],
        verbs: ["plays", "sings", "strums", "hums", "tunes", "records"],
        adjs: ["loud", "melodic", "rhythmic", "soft", "jazzy", "harmonic"],
    },
    Family {
        name: "school",
        place: "classroom",
        nouns: ["teacher", "pupil", "book", "pencil", "exam", "lesson", "desk", "chalk"],
        verbs: ["reads", "writes", "studies", "grades", "teaches", "erases"],
        adjs: ["smart", "curious", "strict", "patient", "tired", "clever"],
    },
    Family {
        name: "space",
        place: "station",
        nouns: ["astronaut", "rocket", "planet", "comet", "moon", "orbit", "satellite", "star"],
        verbs: ["launches", "orbits", "lands", "explores", "docks", "scans"],
        adjs: ["distant", "lunar", "cosmic", "bright", "frozen", "silent"],
    },
    Family {
        name: "forest",
        place: "woods",
        nouns: ["hunter", "deer", "owl", "pine", "fox", "trail", "cabin", "moss"],
        verbs: ["tracks", "climbs", "hides", "gathers", "howls", "chops"],
        adjs: ["dark", "mossy", "ancient", "shady", "dense", "misty"],
    },
];

/// Shared skeletons; `{a}` adjective, `{n}` noun, `{v}` verb, `{p}` place.
const SKELETONS: [&str; 5] = [
    "the {a} {n} {v} the {n} near the {p}",
    "a {n} {v} every {n} in the {p}",
    "in the {p} the {n} was {a} and {v} a {n}",
    "every morning a {a} {n} {v} by the {p}",
    "why did the {n} {v} the {a} {n} at the {p}",
];

/// A template instance: chosen slot words in skeleton order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Filled {
    pub family: usize,
    pub skeleton: usize,
    pub slots: Vec<&'static str>,
}

impl Filled {
    pub fn render(&self) -> String {
        let fam = &FAMILIES[self.family];
        let mut slots = self.slots.iter();
        SKELETONS[self.skeleton]
            .split(' ')
            .map(|w| match w {
                "{p}" => fam.place,
                "{a}" | "{n}" | "{v}" => slots.next().expect("slot count matches skeleton"),
                other => other,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn family_name(&self) -> &'static str {
        FAMILIES[self.family].name
    }
}

fn slot_kinds(skeleton: usize) -> Vec<char> {
    SKELETONS[skeleton]
        .split(' ')
        .filter_map(|w| match w {
            "{a}" => Some('a'),
            "{n}" => Some('n'),
            "{v}" => Some('v'),
            _ => None,
        })
        .collect()
}

fn pick(family: usize, kind: char, rng: &mut ChaCha8Rng) -> &'static str {
    let fam = &FAMILIES[family];
    let list: &[&'static str] = match kind {
        'a' => &fam.adjs,
        'n' => &fam.nouns,
        _ => &fam.verbs,
    };
    list.choose(rng).expect("non-empty slot list")
}

fn fill(family: usize, skeleton: usize, rng: &mut ChaCha8Rng) -> Filled {
    let slots = slot_kinds(skeleton).into_iter().map(|k| pick(family, k, rng)).collect();
    Filled {
        family,
        skeleton,
        slots,
    }
}

fn random_fill(rng: &mut ChaCha8Rng) -> Filled {
    let family = rng.random_range(0..FAMILIES.len());
    let skeleton = rng.random_range(0..SKELETONS.len());
    fill(family, skeleton, rng)
}

/// Same template with exactly one slot replaced by a different word.
fn refill_one(base: &Filled, rng: &mut ChaCha8Rng) -> Filled {
    let kinds = slot_kinds(base.skeleton);
    let i = rng.random_range(0..kinds.len());
    let mut out = base.clone();
    loop {
        let w = pick(base.family, kinds[i], rng);
        if w != base.slots[i] {
            out.slots[i] = w;
            return out;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub a: Filled,
    pub b: Filled,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Vec<String>,
    pub sts: Vec<ScoredPair>,
    /// `score` is 1.0 or 0.0.
    pub pairs: Vec<ScoredPair>,
    pub classification: Vec<Filled>,
}

pub fn generate(seed: u64) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut train = Vec::with_capacity(TRAIN_SENTENCES);
    while train.len() < TRAIN_SENTENCES {
        let s = random_fill(&mut rng).render();
        if seen.insert(s.clone()) {
            train.push(s);
        }
    }
    // evaluation sentences never appear in the training corpus
    let held_out = |rng: &mut ChaCha8Rng, make: &dyn Fn(&mut ChaCha8Rng) -> Filled| loop {
        let f = make(rng);
        if !seen.contains(&f.render()) {
            return f;
        }
    };

    let mut sts = Vec::with_capacity(3 * STS_PER_SCORE);
    for i in 0..3 * STS_PER_SCORE {
        let a = held_out(&mut rng, &random_fill);
        let (b, score) = match i % 3 {
            0 => (held_out(&mut rng, &|r| refill_one(&a, r)), 1.0),
            1 => {
                let skel = (a.skeleton + rng.random_range(1..SKELETONS.len())) % SKELETONS.len();
                (held_out(&mut rng, &|r| fill(a.family, skel, r)), 0.5)
            }
            _ => {
                let fam = (a.family + rng.random_range(1..FAMILIES.len())) % FAMILIES.len();
                (held_out(&mut rng, &|r| fill(fam, r.random_range(0..SKELETONS.len()), r)), 0.0)
            }
        };
        sts.push(ScoredPair { a, b, score });
    }

    let mut pairs = Vec::with_capacity(2 * PAIRS_PER_LABEL);
    for i in 0..2 * PAIRS_PER_LABEL {
        let a = held_out(&mut rng, &random_fill);
        let (b, score) = if i % 2 == 0 {
            (held_out(&mut rng, &|r| refill_one(&a, r)), 1.0)
        } else {
            let fam = (a.family + rng.random_range(1..FAMILIES.len())) % FAMILIES.len();
            (held_out(&mut rng, &|r| fill(fam, r.random_range(0..SKELETONS.len()), r)), 0.0)
        };
        pairs.push(ScoredPair { a, b, score });
    }

    let mut classification = Vec::with_capacity(FAMILIES.len() * CLASSIFICATION_PER_FAMILY);
    for _ in 0..CLASSIFICATION_PER_FAMILY {
        for family in 0..FAMILIES.len() {
            classification.push(held_out(&mut rng, &|r| {
                let skel = r.random_range(0..SKELETONS.len());
                fill(family, skel, r)
            }));
        }
    }
    SynthData {
        train,
        sts,
        pairs,
        classification,
    }
}

/// Every distinct token the generator can emit.
pub fn vocabulary() -> BTreeSet<String> {
    let mut set: BTreeSet<String> = SKELETONS
        .iter()
        .flat_map(|s| tokenize(s))
        .filter(|w| !w.starts_with('{'))
        .collect();
    for f in &FAMILIES {
        set.insert(f.place.to_string());
        for w in f.nouns.iter().chain(&f.verbs).chain(&f.adjs) {
            set.insert(w.to_string());
        }
    }
    set
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthFiles {
    pub train: PathBuf,
    pub sts: PathBuf,
    pub pairs: PathBuf,
    pub classification: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        SynthFiles {
            train: dir.join(TRAIN_FILE),
            sts: dir.join(STS_FILE),
            pairs: dir.join(PAIRS_FILE),
            classification: dir.join(CLASSIFICATION_FILE),
        }
    }

    pub fn all(&self) -> [&PathBuf; 4] {
        [&self.train, &self.sts, &self.pairs, &self.classification]
    }
}

/// Writes the four files for `seed` into `dir` (created if missing).
pub fn write_suite(seed: u64, dir: &Path) -> Result<SynthFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = generate(seed);
    let files = SynthFiles::in_dir(dir);
    let mut train = String::new();
    for s in &data.train {
        train.push_str(s);
        train.push('\n');
    }
    let mut sts = String::new();
    for p in &data.sts {
        let _ = writeln!(sts, "{}\t{}\t{:.1}", p.a.render(), p.b.render(), p.score);
    }
    let mut pairs = String::new();
    for p in &data.pairs {
        let _ = writeln!(pairs, "{}\t{}\t{}", p.a.render(), p.b.render(), p.score as u8);
    }
    let mut cls = String::new();
    for f in &data.classification {
        let _ = writeln!(cls, "{}\t{}", f.render(), f.family_name());
    }
    for (path, text) in files.all().into_iter().zip([train, sts, pairs, cls]) {
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}
