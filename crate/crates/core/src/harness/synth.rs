use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Dialogue, Question};
use crate::attention::tokenize;
use crate::error::{KktError, Result};
use crate::knowledge::KnowledgeTriple;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    /// One turn states the answer; the rest is unrelated chit-chat.
    KeyturnSignal,
    /// The answer follows only from a located-at fact in the companion graph.
    KnowledgeSignal,
    /// Each example picks one of the two at random.
    Mixed,
}

impl SynthMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthMode::KeyturnSignal => "keyturn-signal",
            SynthMode::KnowledgeSignal => "knowledge-signal",
            SynthMode::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SynthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthMode {
    type Err = KktError;

    fn from_str(s: &str) -> Result<Self> {
        [SynthMode::KeyturnSignal, SynthMode::KnowledgeSignal, SynthMode::Mixed]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| KktError::Config(format!("unknown mode {s:?} (keyturn-signal|knowledge-signal|mixed)")))
    }
}

/// Knowledge-signal target entities are disjoint between the splits, so a
/// reader cannot memorise entity locations from training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Dev,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
        }
    }
}

impl FromStr for Split {
    type Err = KktError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            _ => Err(KktError::Config(format!("unknown split {s:?} (train|dev)"))),
        }
    }
}

/// Where the answer-bearing material was planted in one example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub id: String,
    pub mode: SynthMode,
    /// Turn stating the answer (keyturn mode) or naming the target entity.
    pub turn: usize,
    pub entity: Option<String>,
    pub location: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub planted: Vec<Planted>,
}

const LOCATIONS: [(&str, [&str; 8]); 12] = [
    (
        "kitchen",
        [
            "spoon", "kettle", "fridge", "toaster", "ladle", "blender", "skillet", "colander",
        ],
    ),
    (
        "garage",
        [
            "wrench",
            "car",
            "ladder",
            "toolbox",
            "jack",
            "tire",
            "drill",
            "workbench",
        ],
    ),
    (
        "library",
        [
            "novel",
            "bookshelf",
            "librarian",
            "atlas",
            "encyclopedia",
            "bookmark",
            "catalog",
            "manuscript",
        ],
    ),
    (
        "beach",
        [
            "sand",
            "seashell",
            "towel",
            "surfboard",
            "lifeguard",
            "crab",
            "sunscreen",
            "pebble",
        ],
    ),
    (
        "office",
        [
            "stapler",
            "printer",
            "desk",
            "laptop",
            "photocopier",
            "folder",
            "whiteboard",
            "receptionist",
        ],
    ),
    (
        "garden",
        [
            "tulip",
            "shovel",
            "hose",
            "gnome",
            "rake",
            "wheelbarrow",
            "sunflower",
            "earthworm",
        ],
    ),
    (
        "hospital",
        [
            "nurse",
            "stethoscope",
            "bandage",
            "wheelchair",
            "syringe",
            "surgeon",
            "stretcher",
            "thermometer",
        ],
    ),
    (
        "school",
        [
            "chalk",
            "blackboard",
            "pupil",
            "textbook",
            "teacher",
            "eraser",
            "backpack",
            "ruler",
        ],
    ),
    (
        "bakery",
        [
            "bread",
            "croissant",
            "oven",
            "flour",
            "baguette",
            "muffin",
            "dough",
            "baker",
        ],
    ),
    (
        "forest",
        [
            "pinecone",
            "owl",
            "moss",
            "deer",
            "squirrel",
            "mushroom",
            "fern",
            "woodpecker",
        ],
    ),
    (
        "station",
        [
            "train",
            "ticket",
            "platform",
            "luggage",
            "conductor",
            "timetable",
            "locomotive",
            "turnstile",
        ],
    ),
    (
        "museum",
        [
            "statue",
            "painting",
            "fossil",
            "curator",
            "sculpture",
            "exhibit",
            "mummy",
            "tapestry",
        ],
    ),
];

const COLORS: [&str; 12] = [
    "red", "blue", "green", "yellow", "black", "white", "pink", "purple", "orange", "brown", "gray", "silver",
];

const OBJECTS: [&str; 12] = [
    "hat", "scarf", "bag", "coat", "shirt", "pen", "cup", "bike", "phone", "wallet", "jacket", "shoes",
];

const CHITCHAT: [&str; 24] = [
    "i watched a movie last night .",
    "the weather is lovely today .",
    "did you finish the report ?",
    "my sister likes jazz music .",
    "we should order pizza for dinner .",
    "the traffic was terrible this morning .",
    "i am learning to play guitar .",
    "the concert starts at eight .",
    "let us go jogging on sunday .",
    "have you read the newspaper ?",
    "my neighbor adopted a puppy .",
    "the meeting ran very long .",
    "i need a haircut soon .",
    "the coffee here is great .",
    "tomorrow is my birthday .",
    "our team won the game .",
    "i forgot my password again .",
    "the soup tastes salty .",
    "she called me after lunch .",
    "the exam was quite hard .",
    "my cousin moved abroad .",
    "we are planning a holiday .",
    "the film had a sad ending .",
    "i slept badly after the party .",
];

const MENTIONS: [&str; 4] = [
    "i put the {} over there .",
    "have you seen the {} ?",
    "the {} looks quite old .",
    "i bought a new {} yesterday .",
];

const JUNK: [(&str, &str, f64); 20] = [
    ("movie", "film", 1.3),
    ("pizza", "dinner", 1.5),
    ("jazz", "music", 1.4),
    ("concert", "music", 1.2),
    ("coffee", "morning", 1.4),
    ("traffic", "morning", 1.1),
    ("exam", "report", 1.3),
    ("puppy", "neighbor", 1.5),
    ("birthday", "party", 1.5),
    ("game", "team", 1.1),
    ("guitar", "concert", 1.3),
    ("lunch", "soup", 1.2),
    ("sister", "cousin", 1.0),
    ("meeting", "report", 1.2),
    ("newspaper", "weather", 1.1),
    ("jogging", "sunday", 1.4),
    ("haircut", "birthday", 1.0),
    ("password", "report", 1.0),
    ("film", "ending", 1.1),
    ("weather", "holiday", 1.2),
];

pub const KNOWLEDGE_QUESTION: &str = "where can it usually be found ?";

/// The fixed commonsense graph shared by every generated dataset.
pub fn world_kg() -> Vec<KnowledgeTriple> {
    let t = |r: &str, h: &str, tl: &str, w: f64| KnowledgeTriple {
        relation: r.into(),
        head: h.into(),
        tail: tl.into(),
        weight: w,
    };
    let mut out = Vec::new();
    for (li, (loc, ents)) in LOCATIONS.iter().enumerate() {
        for e in ents {
            out.push(t("atlocation", e, loc, 2.0));
            let (wrong, _) = LOCATIONS[(li + 1) % LOCATIONS.len()];
            out.push(t("atlocation", e, wrong, 0.5));
        }
    }
    for (h, tl, w) in JUNK {
        out.push(t("relatedto", h, tl, w));
    }
    out.push(t("atlocation", "zeppelin", "hangar", 2.0));
    out.push(t("atlocation", "kayak", "lake", 2.0));
    out.push(t("isa", "platypus", "mammal", 2.0));
    out
}

pub fn kg_tsv(triples: &[KnowledgeTriple]) -> String {
    let mut s = String::from("# relation\thead\ttail\tweight\n");
    for t in triples {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", t.relation, t.head, t.tail, t.weight));
    }
    s
}

pub fn location_of(entity: &str) -> Option<&'static str> {
    LOCATIONS.iter().find(|(_, es)| es.contains(&entity)).map(|(l, _)| *l)
}

fn speaker(i: usize, first: usize) -> &'static str {
    if (i + first).is_multiple_of(2) {
        "M"
    } else {
        "W"
    }
}

/// Picks the first option whose tokens all occur in `turn`, else option 0.
pub fn rule_reader(turn: &str, options: &[String]) -> usize {
    let toks = tokenize(turn);
    options
        .iter()
        .position(|o| {
            let ot = tokenize(o);
            !ot.is_empty() && ot.iter().all(|t| toks.contains(t))
        })
        .unwrap_or(0)
}

/// Generates `n` single-question dialogues of 4–10 turns. Gold positions
/// are a shuffled balanced assignment over the three options.
pub fn gen_synthetic(seed: u64, n: usize, mode: SynthMode, split: Split) -> Result<SyntheticData> {
    if n == 0 {
        return Err(KktError::Validation("n must be positive".into()));
    }
    let stream = match split {
        Split::Train => 0x7261_696e,
        Split::Dev => 0x0064_6576,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream << 20));
    let mut golds: Vec<usize> = (0..n).map(|i| i % 3).collect();
    golds.shuffle(&mut rng);
    let targets: Vec<&str> = LOCATIONS
        .iter()
        .flat_map(|(_, es)| match split {
            Split::Train => &es[..4],
            Split::Dev => &es[4..],
        })
        .copied()
        .collect();
    let mut dialogues = Vec::with_capacity(n);
    let mut planted = Vec::with_capacity(n);
    for (i, &gold) in golds.iter().enumerate() {
        let m = match mode {
            SynthMode::Mixed => {
                if rng.gen_bool(0.5) {
                    SynthMode::KeyturnSignal
                } else {
                    SynthMode::KnowledgeSignal
                }
            }
            m => m,
        };
        let id = format!("syn-{}-{}-{seed}-{i}", mode.as_str(), split.as_str());
        let n_turns = rng.gen_range(4..=10);
        let first = rng.gen_range(0..2);
        let mut chat: Vec<&str> = CHITCHAT.choose_multiple(&mut rng, n_turns).copied().collect();
        let (turns, question, options, p) = match m {
            SynthMode::KeyturnSignal => {
                let at = rng.gen_range(0..n_turns);
                let obj = *OBJECTS.choose(&mut rng).expect("objects");
                let colors: Vec<&str> = COLORS.choose_multiple(&mut rng, 3).copied().collect();
                chat[at] = "";
                let who = speaker(at, first);
                let turns: Vec<String> = (0..n_turns)
                    .map(|t| {
                        if t == at {
                            format!("{who}: my {obj} is {} .", colors[0])
                        } else {
                            format!("{}: {}", speaker(t, first), chat[t])
                        }
                    })
                    .collect();
                let person = if who == "M" { "man" } else { "woman" };
                let q = format!("what color is the {person}'s {obj} ?");
                let opts = place(colors[0], &colors[1..], gold);
                let p = Planted {
                    id: id.clone(),
                    mode: m,
                    turn: at,
                    entity: None,
                    location: None,
                };
                (turns, q, opts, p)
            }
            _ => {
                let e1 = *targets.choose(&mut rng).expect("targets");
                let l1 = location_of(e1).expect("target has a location");
                let e2 = loop {
                    let (l, es) = LOCATIONS.choose(&mut rng).expect("locations");
                    if *l != l1 {
                        break *es.choose(&mut rng).expect("entities");
                    }
                };
                let l2 = location_of(e2).expect("entity has a location");
                let mut slots: Vec<usize> = (0..n_turns).collect();
                slots.shuffle(&mut rng);
                let (at1, at2) = (slots[0], slots[1]);
                let m1 = MENTIONS.choose(&mut rng).expect("mentions").replace("{}", e1);
                let m2 = MENTIONS.choose(&mut rng).expect("mentions").replace("{}", e2);
                let turns: Vec<String> = (0..n_turns)
                    .map(|t| {
                        let body = if t == at1 {
                            m1.as_str()
                        } else if t == at2 {
                            m2.as_str()
                        } else {
                            chat[t]
                        };
                        format!("{}: {body}", speaker(t, first))
                    })
                    .collect();
                let others: Vec<&str> = LOCATIONS
                    .iter()
                    .map(|(l, _)| *l)
                    .filter(|l| *l != l1 && *l != l2)
                    .collect();
                let wrong: Vec<&str> = others.choose_multiple(&mut rng, 2).copied().collect();
                let opts = place(l1, &wrong, gold);
                let p = Planted {
                    id: id.clone(),
                    mode: m,
                    turn: at1,
                    entity: Some(e1.to_string()),
                    location: Some(l1.to_string()),
                };
                (turns, KNOWLEDGE_QUESTION.to_string(), opts, p)
            }
        };
        let answer = options[gold].clone();
        dialogues.push(Dialogue(
            turns,
            vec![Question {
                question,
                choice: options,
                answer,
            }],
            id,
        ));
        planted.push(p);
    }
    Ok(SyntheticData {
        dataset: Dataset { dialogues },
        planted,
    })
}

fn place(gold_text: &str, wrong: &[&str], gold: usize) -> Vec<String> {
    let mut opts: Vec<String> = wrong.iter().map(|s| s.to_string()).collect();
    opts.insert(gold, gold_text.to_string());
    opts
}
