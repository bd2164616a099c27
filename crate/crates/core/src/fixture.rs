//! Deterministic synthetic corpora for building models with known training
//! data: grammatical English-like prose and Python-like source code, which
//! share an alphabet but differ sharply in n-gram statistics.

use crate::calib::Corpus;
use crate::error::Result;
use crate::rng::RngStream;

const NOUNS: &[&str] = &[
    "cat", "dog", "river", "garden", "teacher", "child", "city", "market", "farmer", "house",
    "window", "road", "forest", "bird", "boat", "letter", "story", "morning", "village", "friend",
    "doctor", "mountain", "table", "kitchen", "student", "horse", "bridge", "winter", "summer",
    "book",
];
const ADJECTIVES: &[&str] = &[
    "small", "old", "quiet", "bright", "young", "tired", "happy", "green", "cold", "warm", "busy",
    "gentle", "long", "early", "little", "strong",
];
const VERBS: &[&str] = &[
    "sees",
    "finds",
    "likes",
    "watches",
    "follows",
    "visits",
    "carries",
    "remembers",
    "helps",
    "opens",
    "reads",
    "paints",
    "builds",
    "leaves",
];
const INTRANSITIVE: &[&str] = &[
    "sleeps", "waits", "sings", "walks", "rests", "smiles", "listens", "works",
];
const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "beside", "across", "inside", "past",
];
const ADVERBS: &[&str] = &[
    "slowly", "quietly", "again", "often", "today", "together", "early",
];
const CONNECTIVES: &[&str] = &["and then", "but", "so", "while", "because"];

const IDENTS: &[&str] = &[
    "value", "count", "items", "result", "index", "total", "buffer", "node", "key", "data", "size",
    "offset", "left", "right", "acc", "tmp", "name", "config",
];
const FUNCS: &[&str] = &[
    "parse", "update", "compute", "load", "merge", "split", "reduce", "flatten", "lookup",
    "encode", "resolve", "check",
];
const OPS: &[&str] = &["+", "-", "*", "//", "%", "<<", ">>", "&", "|", "^"];
const CMPS: &[&str] = &["<", ">", "<=", ">=", "==", "!="];

fn pick<'a>(rng: &mut RngStream, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

fn noun_phrase(rng: &mut RngStream) -> String {
    if rng.uniform() < 0.5 {
        format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS))
    } else {
        format!("the {}", pick(rng, NOUNS))
    }
}

fn clause(rng: &mut RngStream) -> String {
    let subject = noun_phrase(rng);
    let mut s = if rng.uniform() < 0.7 {
        format!("{subject} {} {}", pick(rng, VERBS), noun_phrase(rng))
    } else {
        format!("{subject} {}", pick(rng, INTRANSITIVE))
    };
    if rng.uniform() < 0.5 {
        s = format!("{s} {} {}", pick(rng, PREPOSITIONS), noun_phrase(rng));
    }
    if rng.uniform() < 0.3 {
        s = format!("{s} {}", pick(rng, ADVERBS));
    }
    s
}

fn sentence(rng: &mut RngStream) -> String {
    let mut s = clause(rng);
    if rng.uniform() < 0.3 {
        s = format!("{s}, {} {}", pick(rng, CONNECTIVES), clause(rng));
    }
    let mut chars = s.chars();
    let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or(' ');
    format!("{first}{}.", chars.as_str())
}

/// One paragraph of English-like prose with roughly `target_bytes` bytes.
pub fn english_document(rng: &mut RngStream, target_bytes: usize) -> String {
    let mut out = String::new();
    while out.len() < target_bytes {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&sentence(rng));
    }
    out
}

fn expr(rng: &mut RngStream) -> String {
    let a = pick(rng, IDENTS);
    match rng.below(3) {
        0 => format!("{a} {} {}", pick(rng, OPS), rng.below(64)),
        1 => format!("{a} {} {}", pick(rng, OPS), pick(rng, IDENTS)),
        _ => format!("{}({a})", pick(rng, FUNCS)),
    }
}

fn statement(rng: &mut RngStream, indent: usize) -> String {
    let pad = "    ".repeat(indent);
    match rng.below(6) {
        0 if indent < 3 => format!(
            "{pad}if {} {} {}:\n{}",
            pick(rng, IDENTS),
            pick(rng, CMPS),
            rng.below(100),
            statement(rng, indent + 1)
        ),
        1 if indent < 3 => format!(
            "{pad}for {} in range({}):\n{}",
            pick(rng, &["i", "j", "k"]),
            pick(rng, IDENTS),
            statement(rng, indent + 1)
        ),
        2 => format!("{pad}{}.append({})\n", pick(rng, IDENTS), expr(rng)),
        3 => format!(
            "{pad}{}[{}] = {}\n",
            pick(rng, IDENTS),
            pick(rng, &["i", "j", "0", "-1"]),
            expr(rng)
        ),
        _ => format!("{pad}{} = {}\n", pick(rng, IDENTS), expr(rng)),
    }
}

/// One Python-like module with roughly `target_bytes` bytes.
pub fn code_document(rng: &mut RngStream, target_bytes: usize) -> String {
    let mut out = String::new();
    while out.len() < target_bytes {
        let args: Vec<&str> = (0..1 + rng.below(3)).map(|_| pick(rng, IDENTS)).collect();
        out.push_str(&format!(
            "def {}_{}({}):\n",
            pick(rng, FUNCS),
            pick(rng, IDENTS),
            args.join(", ")
        ));
        for _ in 0..2 + rng.below(4) {
            out.push_str(&statement(rng, 1));
        }
        out.push_str(&format!("    return {}\n\n", expr(rng)));
    }
    out
}

/// `n_docs` English-like documents.
pub fn english_corpus(n_docs: usize, doc_bytes: usize, seed: u64, label: &str) -> Result<Corpus> {
    let mut rng = RngStream::new(seed, 1);
    Corpus::new(
        (0..n_docs)
            .map(|_| english_document(&mut rng, doc_bytes))
            .collect(),
        label,
    )
}

/// `n_docs` code-like documents.
pub fn code_corpus(n_docs: usize, doc_bytes: usize, seed: u64, label: &str) -> Result<Corpus> {
    let mut rng = RngStream::new(seed, 2);
    Corpus::new(
        (0..n_docs)
            .map(|_| code_document(&mut rng, doc_bytes))
            .collect(),
        label,
    )
}

/// Documents whose bytes are uniform over printable ASCII.
pub fn random_byte_corpus(
    n_docs: usize,
    doc_bytes: usize,
    seed: u64,
    label: &str,
) -> Result<Corpus> {
    let mut rng = RngStream::new(seed, 3);
    Corpus::new(
        (0..n_docs)
            .map(|_| {
                (0..doc_bytes)
                    .map(|_| (b' ' + rng.below(95) as u8) as char)
                    .collect()
            })
            .collect(),
        label,
    )
}
