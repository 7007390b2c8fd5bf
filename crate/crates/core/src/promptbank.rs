//! Prompt synthesis from a slot grammar, ROUGE-L and embedding-cosine
//! diversity filtering, and the JSON-lines bank format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{Category, Domain};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::rng::{fnv1a64, SeededRng};

/// Width of the hashed trigram embedding.
pub const EMBED_DIM: usize = 64;
pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_DELTA: f64 = 0.9;

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).flat_map(char::to_lowercase).collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level ROUGE-L F1. `2PR/(P+R)` with `P = L/|a|`, `R = L/|b|`
/// simplifies to `2L/(|a|+|b|)`, which is what is computed.
pub fn rouge_l<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let l = lcs_len(a, b);
    2.0 * l as f64 / (a.len() + b.len()) as f64
}

/// L2-normalized bag of hashed character trigrams over the space-joined
/// tokens, padded with one space on each side. Trigrams hash with FNV-1a
/// 64-bit into `hash % 64`. Empty input gives the zero vector.
pub fn embed_prompt<S: AsRef<str>>(tokens: &[S]) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    if tokens.is_empty() {
        return v;
    }
    let joined = tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
    let padded: Vec<char> = format!(" {joined} ").chars().collect();
    let mut buf = [0u8; 12];
    for w in padded.windows(3) {
        let mut len = 0;
        for c in w {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        v[(fnv1a64(&buf[..len]) % EMBED_DIM as u64) as usize] += 1.0;
    }
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    dot(a, b) / denom
}

/// Why a prompt was dropped from the bank.
#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    Empty,
    Rouge { against: u64, score: f64 },
    Cosine { against: u64, score: f64 },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Empty => write!(f, "empty"),
            RejectReason::Rouge { against, score } => write!(f, "rouge_l vs {against} ({score:.4})"),
            RejectReason::Cosine { against, score } => write!(f, "cosine vs {against} ({score:.4})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pending,
    Retained,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub id: u64,
    pub text: String,
    pub category: Category,
    pub domain: Domain,
    pub tokens: Vec<String>,
    pub embedding: Vec<f64>,
    pub verdict: Verdict,
}

impl PromptRecord {
    pub fn new(id: u64, text: impl Into<String>, category: Category, domain: Domain) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        let embedding = embed_prompt(&tokens);
        Self { id, text, category, domain, tokens, embedding, verdict: Verdict::Pending }
    }

    pub fn is_retained(&self) -> bool {
        self.verdict == Verdict::Retained
    }
}

/// Greedy in-order diversity filter.
///
/// A record is kept iff, against every record kept before it, ROUGE-L is
/// below `tau` and embedding cosine is below `delta`. The first failing
/// comparison (ROUGE-L checked first) is recorded as the rejection reason.
pub fn filter_bank(mut records: Vec<PromptRecord>, tau: f64, delta: f64) -> Result<Vec<PromptRecord>> {
    if !(tau > 0.0 && tau <= 1.0 && delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid(format!("thresholds must lie in (0, 1], got tau={tau} delta={delta}")));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..records.len() {
        let verdict = if records[i].tokens.is_empty() {
            Verdict::Rejected(RejectReason::Empty)
        } else {
            let rec = &records[i];
            kept.iter()
                .find_map(|&j| {
                    let other = &records[j];
                    let r = rouge_l(&rec.tokens, &other.tokens);
                    if r >= tau {
                        return Some(RejectReason::Rouge { against: other.id, score: r });
                    }
                    let c = cosine(&rec.embedding, &other.embedding);
                    (c >= delta).then_some(RejectReason::Cosine { against: other.id, score: c })
                })
                .map_or(Verdict::Retained, Verdict::Rejected)
        };
        if verdict == Verdict::Retained {
            kept.push(i);
        }
        records[i].verdict = verdict;
    }
    Ok(records)
}

/// Slot grammar standing in for a prompt-writing language model.
///
/// Templates contain `{slot}` placeholders. A slot resolves to the vocabulary
/// `slot.<category>` when present, else `slot`. A `_lc` suffix
/// (`{damage_lc}`) uses the same vocabulary with the first letter lowercased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGrammar {
    pub templates: BTreeMap<Domain, Vec<String>>,
    pub slots: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Segment<'a> {
    Literal(&'a str),
    Slot { vocab: &'a str, lowercase: bool },
}

fn parse_template(template: &str) -> Result<Vec<Segment<'_>>> {
    let mut segments = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            segments.push(Segment::Literal(&rest[..open]));
        }
        let close = rest[open..].find('}').ok_or_else(|| Error::invalid(format!("unclosed slot in template `{template}`")))?;
        let name = &rest[open + 1..open + close];
        let (vocab, lowercase) = match name.strip_suffix("_lc") {
            Some(base) => (base, true),
            None => (name, false),
        };
        segments.push(Segment::Slot { vocab, lowercase });
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        segments.push(Segment::Literal(rest));
    }
    Ok(segments)
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

impl PromptGrammar {
    fn vocabulary(&self, slot: &str, category: Category) -> Result<(&[String], String)> {
        let keyed = format!("{slot}.{}", category.label());
        let (name, words) = match self.slots.get(&keyed) {
            Some(w) => (keyed, w),
            None => (slot.to_string(), self.slots.get(slot).ok_or_else(|| Error::EmptySlot(slot.to_string()))?),
        };
        if words.is_empty() {
            return Err(Error::EmptySlot(name));
        }
        Ok((words, name))
    }

    /// Expands one template, drawing every slot from `rng`.
    pub fn expand(&self, template: &str, category: Category, rng: &mut SeededRng) -> Result<String> {
        let mut out = String::new();
        for seg in parse_template(template)? {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot { vocab, lowercase } => {
                    let (words, _) = self.vocabulary(vocab, category)?;
                    let w = &words[rng.below(words.len())];
                    if lowercase {
                        out.push_str(&lowercase_first(w));
                    } else {
                        out.push_str(w);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Every slot reachable from a template resolves to a nonempty vocabulary
    /// for every category.
    pub fn validate(&self) -> Result<()> {
        for templates in self.templates.values() {
            if templates.is_empty() {
                return Err(Error::invalid("domain with no templates"));
            }
            for t in templates {
                for seg in parse_template(t)? {
                    if let Segment::Slot { vocab, .. } = seg {
                        for c in Category::ALL {
                            self.vocabulary(vocab, c)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// If some template of `domain` can expand to exactly `text`, the category
    /// that produces it.
    pub fn derivation_category(&self, domain: Domain, text: &str) -> Option<Category> {
        let templates = self.templates.get(&domain)?;
        Category::ALL.into_iter().find(|&c| templates.iter().any(|t| parse_template(t).map(|segs| self.matches(&segs, text, c)).unwrap_or(false)))
    }

    fn matches(&self, segs: &[Segment<'_>], text: &str, category: Category) -> bool {
        let Some((first, rest)) = segs.split_first() else {
            return text.is_empty();
        };
        match first {
            Segment::Literal(s) => text.strip_prefix(s).is_some_and(|t| self.matches(rest, t, category)),
            Segment::Slot { vocab, lowercase } => {
                let Ok((words, _)) = self.vocabulary(vocab, category) else {
                    return false;
                };
                words.iter().any(|w| {
                    let w = if *lowercase { lowercase_first(w) } else { w.clone() };
                    text.strip_prefix(w.as_str()).is_some_and(|t| self.matches(rest, t, category))
                })
            }
        }
    }

    /// Drops the templates of every domain not in `domains`.
    pub fn restricted_to(&self, domains: &[Domain]) -> Self {
        let mut g = self.clone();
        g.templates.retain(|d, _| domains.contains(d));
        g
    }

    /// Built-in grammar whose vocabularies are drawn from the showcase prompt
    /// tables (vehicles, parts, scenes, surreal effects).
    pub fn standard() -> Self {
        fn words(ws: &[&str]) -> Vec<String> {
            ws.iter().map(|s| s.to_string()).collect()
        }
        let mut templates = BTreeMap::new();
        templates.insert(
            Domain::TypicalParts,
            words(&[
                "{damage} on the {side} {part} of a {color} {vehicle}.",
                "{damage} across the {side} {part} of a {color} {vehicle}.",
                "The {side} {part} of a {color} {vehicle} shows {damage_lc}.",
                "{damage} near the {side} {part} of a {color} {vehicle} after {incident}.",
                "A {color} {vehicle} with {damage_lc} on its {side} {part}.",
            ]),
        );
        templates.insert(
            Domain::SceneNarratives,
            words(&[
                "A {color} {vehicle} with {damage_lc} on its {side} {part} sits {location} {weather}.",
                "The {side} {part} of a {color} {vehicle} shows {damage_lc}, as the car is parked {location} {weather}.",
                "A {color} {vehicle} is stopped {location} {weather}, its {side} {part} showing {damage_lc} after {incident}.",
                "Parked {location} {weather}, a {color} {vehicle} reveals {damage_lc} along the {side} {part}, suggesting {incident}.",
            ]),
        );
        templates.insert(
            Domain::Implausible,
            words(&[
                "A floating {part} hovers midair, {surreal_damage} despite never touching the ground.",
                "The {part} of a {vehicle} {surreal_motion} {surreal_setting}, {surreal_damage}.",
                "A {material} {vehicle} drifts {surreal_setting}, its {part} {surreal_motion} with {surreal_mark}.",
                "A suspended {part} {surreal_motion} {surreal_setting} while {surreal_damage}.",
            ]),
        );

        let mut slots = BTreeMap::new();
        let mut put = |k: &str, v: &[&str]| {
            slots.insert(k.to_string(), words(v));
        };
        put("damage.dent", &["A dent", "A large dent", "A shallow dent", "A deep crease dent", "A fist-sized dent"]);
        put("damage.scrape", &["A long scrape", "Deep key scratches", "Surface scuffs", "Gouged scrape marks", "Fine swirl scratches"]);
        put("damage.torn_bumper", &["A torn bumper cover", "A ripped bumper edge", "A detached bumper clip", "A split bumper panel"]);
        put("damage.cracked_paint", &["Cracked paint", "Peeling paint", "Flaking clear coat", "Chipped paint and rust", "Blistered paint"]);
        put("damage.broken_light", &["A cracked lens", "A shattered housing", "A broken lamp", "A smashed reflector", "A fogged and split lens"]);
        put("part.dent", &["bumper", "door", "fender", "hood", "trunk lid", "quarter panel", "roof"]);
        put("part.scrape", &["door", "bumper", "fender", "side skirt", "wheel arch", "side mirror"]);
        put("part.torn_bumper", &["bumper", "bumper cover", "lower valance", "bumper corner"]);
        put("part.cracked_paint", &["hood", "bumper", "door", "trunk lid", "roof", "fender"]);
        put("part.broken_light", &["headlight", "taillight", "fog light", "indicator lamp", "brake light"]);
        put("side", &["front", "rear", "left", "right", "front-left", "rear-right", "driver-side", "passenger-side"]);
        put("color", &["silver", "white", "black", "red", "blue", "gray", "green", "bronze"]);
        put(
            "vehicle",
            &[
                "Toyota Vios sedan",
                "Honda Civic",
                "Nissan Almera",
                "Mazda CX-5",
                "Ford Fiesta",
                "Isuzu D-Max pickup",
                "Toyota Camry",
                "BMW 3 Series",
                "Mitsubishi Mirage",
                "Honda Jazz",
                "Suzuki Swift",
                "Toyota Corolla Altis",
                "Hyundai Elantra",
                "Kia Picanto",
                "Toyota Revo",
                "MG ZS",
            ],
        );
        put("incident", &["a low-speed collision", "a parking lot bump", "a hailstorm", "a side swipe", "backing into a metal pole", "a minor rear-end crash"]);
        put(
            "location",
            &[
                "beneath a highway overpass",
                "on a gravel shoulder",
                "in a tight alley",
                "beside a broken traffic light",
                "on a flooded city street",
                "at a crowded shopping mall parking lot",
                "against a glassy storefront",
                "in gridlocked Bangkok traffic",
                "under dense tree cover",
                "at a suburban charging station",
                "inside a tight parking structure",
                "beside orange cones at an accident reporting station",
                "in a foggy mountain pass",
            ],
        );
        put(
            "weather",
            &["after heavy rain", "at dusk", "in early morning fog", "at night", "on a rainy evening", "under harsh midday sun", "during a thunderstorm"],
        );
        put("surreal_damage.dent", &["its surface denting inward on its own", "dents blooming across it like ripples"]);
        put("surreal_damage.scrape", &["its scratches glowing faintly", "scuffs crawling across its surface"]);
        put("surreal_damage.torn_bumper", &["its edges tearing like paper", "its cover unraveling into ribbons"]);
        put("surreal_damage.cracked_paint", &["its paint cracking and peeling", "its paint forming solid icicles", "its paint flaking into colorful pixels"]);
        put("surreal_damage.broken_light", &["its lens shattering in reverse", "hairline cracks glowing under starlight"]);
        put("surreal_mark.dent", &["dents that breathe", "a dent shaped like a handprint"]);
        put("surreal_mark.scrape", &["scratches that rearrange themselves", "fingerprint scuffs"]);
        put("surreal_mark.torn_bumper", &["a bumper sagging like fabric", "a torn bumper stitched with light"]);
        put("surreal_mark.cracked_paint", &["paint peeling upward", "cracks leaking bright red paint"]);
        put("surreal_mark.broken_light", &["a headlight beaming in reverse", "taillights cracked in a symmetric pattern"]);
        put(
            "surreal_motion",
            &[
                "disintegrates into colorful pixels",
                "rotates in place",
                "stretches and twists like rubber",
                "melts like wax",
                "folds inward like origami",
                "bends upward against gravity",
            ],
        );
        put(
            "surreal_setting",
            &[
                "above an endless highway",
                "over a glowing forest floor",
                "under two suns",
                "above a city skyline at midnight",
                "through a digital portal",
                "in zero gravity",
                "against a frozen backdrop",
            ],
        );
        put("material", &["translucent", "smoke-formed", "leather-stitched", "ice-carved", "melting", "glass"]);
        Self { templates, slots }
    }
}

/// `n_per_domain` unfiltered prompts per domain of the grammar, in domain
/// order. Each prompt draws a category, then a template, then its slots.
pub fn generate_prompts(grammar: &PromptGrammar, n_per_domain: usize, rng: &mut SeededRng) -> Result<Vec<PromptRecord>> {
    if n_per_domain == 0 {
        return Err(Error::invalid("n_per_domain must be at least 1"));
    }
    grammar.validate()?;
    let mut out = Vec::with_capacity(n_per_domain * grammar.templates.len());
    for (&domain, templates) in &grammar.templates {
        for _ in 0..n_per_domain {
            let category = Category::ALL[rng.below(Category::ALL.len())];
            let template = &templates[rng.below(templates.len())];
            let text = grammar.expand(template, category, rng)?;
            out.push(PromptRecord::new(out.len() as u64, text, category, domain));
        }
    }
    Ok(out)
}

/// One line of a prompt-bank JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLine {
    pub id: u64,
    pub text: String,
    pub category: Category,
    pub domain: Domain,
    pub retained: bool,
    pub reject_reason: Option<String>,
}

impl From<&PromptRecord> for PromptLine {
    fn from(r: &PromptRecord) -> Self {
        let (retained, reject_reason) = match &r.verdict {
            Verdict::Retained => (true, None),
            Verdict::Pending => (false, Some("pending".to_string())),
            Verdict::Rejected(reason) => (false, Some(reason.to_string())),
        };
        Self { id: r.id, text: r.text.clone(), category: r.category, domain: r.domain, retained, reject_reason }
    }
}

impl PromptLine {
    /// Rebuilds the record, recomputing tokens and embedding from the text.
    pub fn into_record(self) -> PromptRecord {
        let mut rec = PromptRecord::new(self.id, self.text, self.category, self.domain);
        rec.verdict = match (self.retained, self.reject_reason.as_deref()) {
            (true, _) => Verdict::Retained,
            (false, None | Some("pending")) => Verdict::Pending,
            (false, Some(reason)) => Verdict::Rejected(parse_reason(reason)),
        };
        rec
    }
}

fn parse_reason(s: &str) -> RejectReason {
    let parse = |rest: &str| -> Option<(u64, f64)> {
        let (id, score) = rest.split_once(" (")?;
        Some((id.parse().ok()?, score.strip_suffix(')')?.parse().ok()?))
    };
    if let Some((against, score)) = s.strip_prefix("rouge_l vs ").and_then(parse) {
        RejectReason::Rouge { against, score }
    } else if let Some((against, score)) = s.strip_prefix("cosine vs ").and_then(parse) {
        RejectReason::Cosine { against, score }
    } else {
        RejectReason::Empty
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[PromptRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &PromptLine::from(r))?;
        w.write_all(b"\n").map_err(|e| Error::io("<prompt bank>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<prompt bank>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<PromptLine>(&line)?.into_record());
    }
    Ok(out)
}

/// The 45 showcase prompts (15 per domain), marked retained.
pub fn appendix_prompts() -> Vec<PromptRecord> {
    read_jsonl(include_str!("../fixtures/appendix_prompts.jsonl").as_bytes()).expect("bundled fixture parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(tokenize("A dent, on the FRONT bumper!"), vec!["a", "dent", "on", "the", "front", "bumper"]);
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn rouge_examples() {
        let a = toks("rear bumper dent");
        assert_eq!(rouge_l(&a, &a), 1.0);
        assert_eq!(rouge_l(&a, &toks("scratched left door")), 0.0);
        let r = rouge_l(&a, &toks("front bumper dent"));
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l::<String>(&[], &a), 0.0);
    }

    #[test]
    fn embedding_properties() {
        let e = embed_prompt(&toks("a cracked left headlight"));
        assert!((dot(&e, &e).sqrt() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&e, &e.clone()), 1.0);
        assert_eq!(embed_prompt::<String>(&[]), vec![0.0; EMBED_DIM]);
    }

    #[test]
    fn embedding_cosine_fixture() {
        // Oracle: count trigrams of " dent " and " paint crack " by hand.
        let count = |s: &str| {
            let mut v = vec![0.0; EMBED_DIM];
            let cs: Vec<char> = s.chars().collect();
            for w in cs.windows(3) {
                let t: String = w.iter().collect();
                v[(fnv1a64(t.as_bytes()) % 64) as usize] += 1.0;
            }
            v
        };
        let (a, b) = (count(" dent "), count(" paint crack "));
        let oracle = dot(&a, &b) / (dot(&a, &a).sqrt() * dot(&b, &b).sqrt());
        let got = cosine(&embed_prompt(&toks("dent")), &embed_prompt(&toks("paint crack")));
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - DENT_VS_PAINT_CRACK).abs() < 1e-12, "{got}");
    }

    const DENT_VS_PAINT_CRACK: f64 = 0.15075567228888181;

    fn rec(id: u64, text: &str) -> PromptRecord {
        PromptRecord::new(id, text, Category::Dent, Domain::TypicalParts)
    }

    #[test]
    fn filter_rejects_duplicates_and_keeps_singletons() {
        let out = filter_bank(vec![rec(0, "a dent on the hood")], 0.7, 0.9).unwrap();
        assert!(out[0].is_retained());
        let out = filter_bank(vec![rec(0, "a dent on the hood"), rec(1, "A dent on the hood.")], 1.0, 1.0).unwrap();
        assert!(out[0].is_retained());
        assert_eq!(out[1].verdict, Verdict::Rejected(RejectReason::Rouge { against: 0, score: 1.0 }));
    }

    #[test]
    fn filter_rejects_empty_text() {
        let out = filter_bank(vec![rec(0, "!!!"), rec(1, "a dent")], 0.7, 0.9).unwrap();
        assert_eq!(out[0].verdict, Verdict::Rejected(RejectReason::Empty));
        assert!(out[1].is_retained());
    }

    /// Comparing only against retained predecessors means a lower τ can keep
    /// more prompts: here `b` survives at τ = 0.7 and then blocks `c` and `d`.
    #[test]
    fn greedy_filter_count_is_not_monotone_in_tau() {
        let words = |r: std::ops::RangeInclusive<usize>| r.map(|i| format!("w{i}")).collect::<Vec<_>>();
        let join = |parts: &[Vec<String>]| parts.concat().join(" ");
        let bank = vec![
            rec(0, &join(&[words(1..=5), words(16..=20)])),
            rec(1, &join(&[words(1..=20)])),
            rec(2, &join(&[words(1..=11)])),
            rec(3, &join(&[words(10..=20)])),
        ];
        let kept = |tau| filter_bank(bank.clone(), tau, 1.0).unwrap().iter().filter(|r| r.is_retained()).count();
        assert_eq!(kept(0.7), 2);
        assert_eq!(kept(0.5), 3);
    }

    #[test]
    fn filter_validates_thresholds() {
        assert!(filter_bank(vec![], 0.0, 0.5).is_err());
        assert!(filter_bank(vec![], 0.5, 1.5).is_err());
    }

    #[test]
    fn grammar_reproduces_showcase_prompts() {
        let g = PromptGrammar::standard();
        assert!(g.derivation_category(Domain::TypicalParts, "A dent on the front bumper of a silver Toyota Vios sedan.").is_some());
        assert_eq!(
            g.derivation_category(Domain::Implausible, "A floating bumper hovers midair, its paint cracking and peeling despite never touching the ground."),
            Some(Category::CrackedPaint)
        );
        assert!(g.derivation_category(Domain::TypicalParts, "Something else entirely.").is_none());
    }

    #[test]
    fn empty_slot_is_named() {
        let mut g = PromptGrammar::standard();
        g.slots.insert("color".into(), vec![]);
        let err = generate_prompts(&g, 1, &mut SeededRng::new(1)).unwrap_err();
        assert!(matches!(err, Error::EmptySlot(ref s) if s == "color"), "{err}");
        g.slots.remove("color");
        assert!(matches!(generate_prompts(&g, 1, &mut SeededRng::new(1)), Err(Error::EmptySlot(_))));
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let g = PromptGrammar::standard();
        let a = generate_prompts(&g, 10, &mut SeededRng::new(5)).unwrap();
        let b = generate_prompts(&g, 10, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
        for d in Domain::ALL {
            assert_eq!(a.iter().filter(|r| r.domain == d).count(), 10);
        }
        for r in &a {
            assert!(g.derivation_category(r.domain, &r.text).is_some(), "{}", r.text);
        }
    }

    #[test]
    fn seed_one_fixture() {
        let got: Vec<String> = generate_prompts(&PromptGrammar::standard(), 3, &mut SeededRng::new(1)).unwrap().into_iter().map(|r| r.text).collect();
        let expected = [
            "A cracked lens near the rear-right headlight of a blue MG ZS after a side swipe.",
            "A fist-sized dent on the left bumper of a red Honda Civic.",
            "The right roof of a gray Ford Fiesta shows a deep crease dent.",
            "The rear trunk lid of a white MG ZS shows a deep crease dent, as the car is parked at a suburban charging station on a rainy evening.",
            "A blue MG ZS is stopped on a flooded city street after heavy rain, its rear-right fender showing chipped paint and rust after a hailstorm.",
            "The driver-side lower valance of a blue Suzuki Swift shows a torn bumper cover, as the car is parked on a gravel shoulder after heavy rain.",
            "A smoke-formed Nissan Almera drifts above a city skyline at midnight, its door rotates in place with paint peeling upward.",
            "A floating bumper hovers midair, its scratches glowing faintly despite never touching the ground.",
            "The indicator lamp of a Kia Picanto bends upward against gravity through a digital portal, its lens shattering in reverse.",
        ];
        assert_eq!(got, expected);
    }

    #[test]
    fn jsonl_round_trip() {
        let g = PromptGrammar::standard();
        let bank = filter_bank(generate_prompts(&g, 8, &mut SeededRng::new(2)).unwrap(), 0.7, 0.9).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &bank).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_jsonl(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back.iter().filter(|r| r.is_retained()).count(), bank.iter().filter(|r| r.is_retained()).count());
    }

    #[test]
    fn appendix_fixture_loads() {
        let p = appendix_prompts();
        assert_eq!(p.len(), 45);
        assert_eq!(p[0].text, "A dent on the front bumper of a silver Toyota Vios sedan.");
        for d in Domain::ALL {
            assert_eq!(p.iter().filter(|r| r.domain == d).count(), 15);
        }
    }
}
