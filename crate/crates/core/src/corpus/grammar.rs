//! Seeded template grammar producing neutral sentences over a fixed vocabulary.
//!
//! The vocabulary deliberately avoids every styled form of the default suite
//! (no `alot`, no `purchase`, no `Regards`), proper nouns and the pronoun `I`,
//! so that neutral text never carries a style marker and content is
//! independent of style.

use rand::seq::IndexedRandom;
use rand::Rng;

const NOUNS: &[&str] = &[
    "cat", "dog", "farmer", "teacher", "doctor", "baker", "river", "garden", "window", "table",
    "letter", "book", "car", "bike", "train", "boat", "house", "kitchen", "market", "station",
    "bridge", "forest", "village", "city", "school", "office", "shop", "painter", "singer",
    "driver", "pilot", "nurse", "student", "neighbor", "brother", "sister", "mother", "father",
    "uncle", "aunt", "cousin", "boss", "player", "coach", "writer", "artist", "cook", "guard",
    "captain", "sailor", "clock", "lamp", "chair", "door", "roof", "wall", "fence", "road",
    "hill", "lake", "field", "barn", "horse", "bird", "fish", "rabbit", "mouse", "goat",
    "sheep", "cow", "engine", "radio", "camera", "phone", "computer", "printer", "bottle",
    "basket", "bucket", "ladder", "hammer", "rope", "blanket", "pillow", "jacket", "hat",
    "shoe", "ticket", "map", "coin", "key", "box", "bag", "cup", "plate", "spoon", "knife",
    "kettle", "oven", "stove", "carpet", "mirror", "poster", "picture", "song", "story",
    "movie", "game", "puzzle", "plan", "report", "package", "parcel", "gift", "cake",
    "sandwich", "apple", "orange", "lemon", "potato", "tomato", "carrot", "onion", "bean",
    "candle", "flower", "tree", "plant", "seed", "stone", "shell", "feather", "wheel",
    "tent", "tower", "castle", "museum", "library", "hotel", "hospital", "bakery", "cafe",
    "theater", "harbor", "island", "beach", "cloud", "storm", "garage", "drawer", "shelf",
];

const ADJECTIVES: &[&str] = &[
    "old", "young", "small", "large", "quiet", "loud", "happy", "tired", "busy", "lazy",
    "clever", "brave", "gentle", "strange", "friendly", "careful", "red", "blue", "green",
    "yellow", "white", "black", "brown", "bright", "dark", "warm", "cold", "wet", "dry",
    "new", "broken", "heavy", "light", "tall", "short", "clean", "dirty", "fresh", "empty",
    "full", "cheap", "expensive", "simple", "famous", "local", "tiny", "huge", "soft",
    "sharp", "round", "square", "wooden", "metal", "plastic", "golden", "silver", "noisy",
    "calm", "curious", "polite", "sleepy", "hungry", "lucky", "proud", "shy", "wild",
];

const VERBS: &[(&str, &str)] = &[
    ("see", "saw"),
    ("find", "found"),
    ("take", "took"),
    ("make", "made"),
    ("bring", "brought"),
    ("paint", "painted"),
    ("clean", "cleaned"),
    ("carry", "carried"),
    ("watch", "watched"),
    ("visit", "visited"),
    ("fix", "fixed"),
    ("cook", "cooked"),
    ("sell", "sold"),
    ("open", "opened"),
    ("close", "closed"),
    ("move", "moved"),
    ("read", "read"),
    ("write", "wrote"),
    ("draw", "drew"),
    ("keep", "kept"),
    ("lose", "lost"),
    ("hide", "hid"),
    ("wash", "washed"),
    ("check", "checked"),
    ("pack", "packed"),
    ("send", "sent"),
    ("borrow", "borrowed"),
    ("return", "returned"),
    ("order", "ordered"),
    ("choose", "chose"),
    ("build", "built"),
    ("repair", "repaired"),
    ("drop", "dropped"),
    ("catch", "caught"),
    ("throw", "threw"),
    ("follow", "followed"),
    ("like", "liked"),
    ("love", "loved"),
    ("hate", "hated"),
    ("miss", "missed"),
    ("get", "got"),
    ("buy", "bought"),
    ("help", "helped"),
    ("need", "needed"),
    ("show", "showed"),
    ("start", "started"),
    ("receive", "received"),
];

/// Verbs whose forms appear in a substitution table; sampled more often.
const TABLE_VERBS: &[(&str, &str)] = &[
    ("get", "got"),
    ("buy", "bought"),
    ("help", "helped"),
    ("need", "needed"),
    ("show", "showed"),
    ("start", "started"),
    ("receive", "received"),
];

const PLACES: &[&str] = &[
    "in the park", "at the station", "near the river", "behind the house", "in the kitchen",
    "at the market", "on the bridge", "in the garden", "at school", "at work", "in the city",
    "by the lake", "on the hill", "in the village", "at the harbor", "in the library",
    "at the cafe", "near the bakery", "in the forest", "on the beach", "at the museum",
    "in the garage", "on the roof", "under the table", "next to the window",
];

const TIMES: &[&str] = &[
    "yesterday", "today", "last week", "this morning", "last night", "in the evening",
    "after lunch", "before dinner", "at noon", "early", "late", "again", "twice", "once",
    "last year", "this week", "after school", "in the afternoon", "at dawn", "recently",
];

const SUBJECT_PRONOUNS: &[&str] = &["she", "he", "they", "we", "you"];
const OBJECT_PRONOUNS: &[&str] = &["her", "him", "them", "us", "you"];
const POSSESSIVES: &[&str] = &["my", "our", "her", "his", "their", "your"];
const ADVERBS: &[&str] = &[
    "really", "definitely", "probably", "quickly", "slowly", "quietly", "finally", "nearly",
    "almost", "gladly", "simply", "suddenly",
];
const CONNECTORS: &[&str] = &["then", "but", "and", "so"];
const FEELINGS: &[&str] = &["weird", "funny", "great", "sad", "nice", "odd", "boring", "fine"];

fn plural(noun: &str) -> String {
    match noun {
        "mouse" => "mice".into(),
        "sheep" | "fish" => noun.into(),
        "knife" => "knives".into(),
        "shelf" => "shelves".into(),
        "potato" => "potatoes".into(),
        "tomato" => "tomatoes".into(),
        n if n.ends_with("ch") || n.ends_with("sh") || n.ends_with('x') || n.ends_with('s') => {
            format!("{n}es")
        }
        n if n.ends_with('y') && !n.ends_with("ey") && !n.ends_with("oy") && !n.ends_with("ay") => {
            format!("{}ies", &n[..n.len() - 1])
        }
        n => format!("{n}s"),
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [&'a str]) -> &'a str {
    items.choose(rng).copied().expect("non-empty list")
}

fn verb<R: Rng>(rng: &mut R) -> (&'static str, &'static str) {
    let list = if rng.random_bool(0.35) {
        TABLE_VERBS
    } else {
        VERBS
    };
    *list.choose(rng).expect("non-empty list")
}

fn subject<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..6) {
        0 => pick(rng, SUBJECT_PRONOUNS).to_string(),
        1 => format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS)),
        2 => format!("{} friend", pick(rng, POSSESSIVES)),
        3 => format!("the {}", pick(rng, NOUNS)),
        4 => format!("{} kids", pick(rng, POSSESSIVES)),
        _ => format!("{} {}", pick(rng, POSSESSIVES), pick(rng, NOUNS)),
    }
}

fn object<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..6) {
        0 => format!("a lot of {}", plural(pick(rng, NOUNS))),
        1 => format!("the {}", pick(rng, NOUNS)),
        2 => format!("a {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS)),
        3 => format!("some {}", plural(pick(rng, NOUNS))),
        4 => pick(rng, OBJECT_PRONOUNS).to_string(),
        _ => format!("{} friends", pick(rng, POSSESSIVES)),
    }
}

fn capitalize(s: &str) -> String {
    let mut cs = s.chars();
    match cs.next() {
        Some(f) => f.to_uppercase().chain(cs).collect(),
        None => String::new(),
    }
}

/// Draws one neutral sentence (sentence case, `, ` commas, terminal period).
pub fn neutral_sentence<R: Rng>(rng: &mut R) -> String {
    let body = match rng.random_range(0..8) {
        0 => {
            let (_, past) = verb(rng);
            format!("{} {} {} {}", subject(rng), past, object(rng), pick(rng, TIMES))
        }
        1 => {
            let (_, p1) = verb(rng);
            let (_, p2) = verb(rng);
            format!(
                "{} {} {} {}, {} {} {} {}",
                subject(rng),
                p1,
                object(rng),
                pick(rng, PLACES),
                pick(rng, CONNECTORS),
                pick(rng, SUBJECT_PRONOUNS),
                p2,
                object(rng)
            )
        }
        2 => {
            let (_, past) = verb(rng);
            format!("{}, {} {} {}", pick(rng, TIMES), subject(rng), past, object(rng))
        }
        3 => {
            let (_, p1) = verb(rng);
            let (_, p2) = verb(rng);
            format!(
                "{} {} {} {} because {} {} {}",
                subject(rng),
                pick(rng, ADVERBS),
                p1,
                object(rng),
                pick(rng, SUBJECT_PRONOUNS),
                p2,
                object(rng)
            )
        }
        4 => {
            let (base, _) = verb(rng);
            format!(
                "{} will {} {} tomorrow, which is {}",
                subject(rng),
                base,
                object(rng),
                pick(rng, FEELINGS)
            )
        }
        5 => {
            let (_, past) = verb(rng);
            format!(
                "maybe {} {} {} until {}",
                subject(rng),
                past,
                object(rng),
                pick(rng, TIMES)
            )
        }
        6 => format!(
            "{} needed help with {}, so {} helped {}",
            subject(rng),
            object(rng),
            pick(rng, SUBJECT_PRONOUNS),
            pick(rng, OBJECT_PRONOUNS)
        ),
        _ => {
            let (base, _) = verb(rng);
            format!(
                "{} believe {} will {} {} {}",
                pick(rng, SUBJECT_PRONOUNS),
                subject(rng),
                base,
                object(rng),
                pick(rng, PLACES)
            )
        }
    };
    format!("{}.", capitalize(&body))
}

/// Every lemma the grammar can emit.
pub fn vocabulary() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut add = |s: &str| {
        for w in s.split_whitespace() {
            words.push(w.to_string());
        }
    };
    NOUNS.iter().for_each(|n| {
        add(n);
        add(&plural(n));
    });
    ADJECTIVES.iter().for_each(|w| add(w));
    VERBS.iter().for_each(|(b, p)| {
        add(b);
        add(p);
    });
    for list in [
        PLACES,
        TIMES,
        SUBJECT_PRONOUNS,
        OBJECT_PRONOUNS,
        POSSESSIVES,
        ADVERBS,
        CONNECTORS,
        FEELINGS,
    ] {
        list.iter().for_each(|w| add(w));
    }
    for w in [
        "a", "lot", "of", "the", "some", "friend", "friends", "kids", "because", "will",
        "tomorrow", "which", "is", "maybe", "until", "needed", "help", "with", "so", "helped",
        "believe",
    ] {
        add(w);
    }
    words.sort();
    words.dedup();
    words
}
