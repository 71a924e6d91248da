//! Prompt space: a toy word-level vocabulary, rule-based prompt augmentation,
//! token masking and the masked-token cross-entropy.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Result};
use crate::masking::floor_fraction;
use crate::seed::{derive_seed, Stream};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

const DEFAULT_VOCAB: &str = include_str!("../assets/vocab.txt");
const DEFAULT_RULES: &str = include_str!("../assets/rules.json");

const DEFAULT_FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "one", "is", "are", "there", "in", "on", "at", "of", "with", "through",
    "across", "along", "under", "over", "upon", "within", "and", "while", "his", "her", "their",
    "its", "currently",
];

/// Dense token <-> id mapping. `[PAD]`, `[UNK]` and `[MASK]` always occupy
/// ids 0, 1 and 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for special in [PAD, UNK, MASK] {
            v.push(special);
        }
        for tok in tokens {
            let tok = tok.as_ref().trim();
            if tok.is_empty() || [PAD, UNK, MASK].contains(&tok) {
                continue;
            }
            if v.ids.contains_key(tok) {
                return Err(validation(format!("duplicate vocabulary entry {tok:?}")));
            }
            v.push(tok);
        }
        Ok(v)
    }

    fn push(&mut self, tok: &str) {
        self.ids.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
    }

    /// Newline-delimited token list.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("bundled vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn mask_id(&self) -> usize {
        2
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < 3
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text)
            .map(|w| self.id(&w).unwrap_or(self.unk_id()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercased words split on whitespace and punctuation.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntaxTemplate {
    /// Words and `{slot}` placeholders, e.g. `"{a} in {b}"`.
    pub pattern: String,
    pub rewrite: String,
}

/// Rule tables behind the three augmentation techniques.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentationRules {
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub paraphrases: BTreeMap<String, String>,
    #[serde(default)]
    pub syntax: Vec<SyntaxTemplate>,
    /// Words ignored when comparing content. Defaults to a fixed list of
    /// articles, prepositions and auxiliaries.
    #[serde(default)]
    pub function_words: Option<Vec<String>>,
}

impl AugmentationRules {
    pub fn parse(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rules are valid")
    }

    pub fn is_empty(&self) -> bool {
        self.synonyms.is_empty() && self.paraphrases.is_empty() && self.syntax.is_empty()
    }

    /// Every word a rule can emit must be in the vocabulary.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let mut emitted: Vec<String> = Vec::new();
        for (k, vs) in &self.synonyms {
            emitted.extend(words(k));
            for v in vs {
                emitted.extend(words(v));
            }
        }
        for (k, v) in &self.paraphrases {
            emitted.extend(words(k).chain(words(v)));
        }
        for t in &self.syntax {
            for part in t.pattern.split_whitespace().chain(t.rewrite.split_whitespace()) {
                if !is_slot(part) {
                    emitted.extend(words(part));
                }
            }
        }
        match emitted.into_iter().find(|w| !vocab.contains(w)) {
            Some(w) => Err(validation(format!("rule word {w:?} is not in the vocabulary"))),
            None => Ok(()),
        }
    }

    fn synonym_class(&self, word: &str) -> Option<(String, Vec<String>)> {
        for (key, syns) in &self.synonyms {
            if key == word || syns.iter().any(|s| s == word) {
                let mut class = vec![key.clone()];
                class.extend(syns.iter().cloned());
                return Some((key.clone(), class));
            }
        }
        None
    }

    /// Canonical synonym-class representative for a word.
    pub fn canonical(&self, word: &str) -> String {
        self.synonym_class(word)
            .map(|(k, _)| k)
            .unwrap_or_else(|| word.to_string())
    }

    fn is_function_word(&self, word: &str) -> bool {
        match &self.function_words {
            Some(list) => list.iter().any(|w| w == word),
            None => DEFAULT_FUNCTION_WORDS.contains(&word),
        }
    }

    /// Sorted multiset of canonical content words.
    pub fn content_signature(&self, text: &str) -> Vec<String> {
        let mut sig: Vec<String> = words(text)
            .filter(|w| !self.is_function_word(w))
            .map(|w| self.canonical(&w))
            .collect();
        sig.sort();
        sig
    }
}

fn is_slot(part: &str) -> bool {
    part.len() > 2 && part.starts_with('{') && part.ends_with('}')
}

/// Round-trips a prompt through another language. The bundled implementation
/// is a deterministic paraphrase table.
pub trait BackTranslator {
    fn round_trip(&self, prompt: &str, seed: u64) -> Option<String>;
}

/// Replaces one seeded choice among the applicable table phrases.
pub struct ParaphraseTable<'a> {
    pub table: &'a BTreeMap<String, String>,
}

impl BackTranslator for ParaphraseTable<'_> {
    fn round_trip(&self, prompt: &str, seed: u64) -> Option<String> {
        let toks: Vec<String> = words(prompt).collect();
        let applicable: Vec<(usize, Vec<String>, &String)> = self
            .table
            .iter()
            .filter_map(|(from, to)| {
                let from: Vec<String> = words(from).collect();
                find_subsequence(&toks, &from).map(|at| (at, from, to))
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (at, from, to) = applicable.choose(&mut rng)?;
        let mut out: Vec<String> = toks[..*at].to_vec();
        out.extend(words(to));
        out.extend_from_slice(&toks[at + from.len()..]);
        Some(out.join(" "))
    }
}

fn find_subsequence(hay: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    SynonymSubstitution,
    BackTranslation,
    SyntacticReformation,
}

const TECHNIQUES: [Technique; 3] = [
    Technique::SynonymSubstitution,
    Technique::BackTranslation,
    Technique::SyntacticReformation,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub text: String,
    pub technique: Technique,
    /// The technique had no applicable rule and the source was kept.
    pub fallback: bool,
}

fn synonym_pass(prompt: &str, rules: &AugmentationRules, seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut changed = false;
    let out: Vec<String> = words(prompt)
        .map(|w| match rules.synonym_class(&w) {
            Some((_, class)) => {
                let others: Vec<&String> = class.iter().filter(|c| **c != w).collect();
                match others.choose(&mut rng) {
                    Some(s) => {
                        changed = true;
                        (*s).clone()
                    }
                    None => w,
                }
            }
            None => w,
        })
        .collect();
    changed.then(|| out.join(" "))
}

/// Matches `pattern` (literal words and `{slot}`s, each slot taking at least
/// one word) against `toks`, binding slots to the shortest leftmost spans.
fn match_template<'t>(
    pattern: &[&str],
    toks: &'t [String],
    bound: &mut Vec<(String, &'t [String])>,
) -> bool {
    let Some((&head, rest)) = pattern.split_first() else {
        return toks.is_empty();
    };
    if is_slot(head) {
        for take in 1..=toks.len() {
            bound.push((head.to_string(), &toks[..take]));
            if match_template(rest, &toks[take..], bound) {
                return true;
            }
            bound.pop();
        }
        false
    } else {
        match toks.split_first() {
            Some((t, tail)) if *t == head.to_lowercase() => match_template(rest, tail, bound),
            _ => false,
        }
    }
}

fn syntax_pass(prompt: &str, rules: &AugmentationRules, seed: u64) -> Option<String> {
    let toks: Vec<String> = words(prompt).collect();
    let mut rewrites = Vec::new();
    for t in &rules.syntax {
        let pattern: Vec<&str> = t.pattern.split_whitespace().collect();
        let mut bound = Vec::new();
        if match_template(&pattern, &toks, &mut bound) {
            let text = t
                .rewrite
                .split_whitespace()
                .map(|part| match bound.iter().find(|(slot, _)| slot == part) {
                    Some((_, span)) => span.join(" "),
                    None => part.to_string(),
                })
                .collect::<Vec<_>>()
                .join(" ")
                .replace(" ,", ",");
            rewrites.push(text);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rewrites.choose(&mut rng).cloned()
}

/// Produces `n` augmented prompts, cycling synonym substitution,
/// back-translation and syntactic reformation. A technique without an
/// applicable rule returns the source prompt flagged as a fallback.
pub fn augment_prompt(
    prompt: &str,
    rules: &AugmentationRules,
    n: usize,
    seed: u64,
) -> Vec<Augmentation> {
    let table = ParaphraseTable {
        table: &rules.paraphrases,
    };
    augment_prompt_with(prompt, rules, &table, n, seed)
}

pub fn augment_prompt_with(
    prompt: &str,
    rules: &AugmentationRules,
    translator: &dyn BackTranslator,
    n: usize,
    seed: u64,
) -> Vec<Augmentation> {
    const ATTEMPTS: u64 = 8;
    let normalized = words(prompt).collect::<Vec<_>>().join(" ");
    let mut out: Vec<Augmentation> = Vec::with_capacity(n);
    for slot in 0..n {
        let technique = TECHNIQUES[slot % 3];
        let mut first = None;
        let mut chosen = None;
        for attempt in 0..ATTEMPTS {
            let s = derive_seed(seed, Stream::PromptAugment, slot as u64, attempt);
            let candidate = match technique {
                Technique::SynonymSubstitution => synonym_pass(&normalized, rules, s),
                Technique::BackTranslation => translator.round_trip(&normalized, s),
                Technique::SyntacticReformation => syntax_pass(&normalized, rules, s),
            };
            let Some(c) = candidate else { break };
            if first.is_none() {
                first = Some(c.clone());
            }
            if c != normalized && out.iter().all(|a| a.text != c) {
                chosen = Some(c);
                break;
            }
        }
        let aug = match chosen.or(first) {
            Some(text) => Augmentation {
                text,
                technique,
                fallback: false,
            },
            None => Augmentation {
                text: normalized.clone(),
                technique,
                fallback: true,
            },
        };
        out.push(aug);
    }
    out
}

/// An augmented prompt with some tokens replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedPrompt {
    pub source: Vec<usize>,
    pub masked: Vec<usize>,
    /// Ascending.
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MaskedPrompt {
    /// Writes the targets back into the masked sequence.
    pub fn restore(&self) -> Vec<usize> {
        let mut out = self.masked.clone();
        for (&p, &t) in self.positions.iter().zip(&self.targets) {
            out[p] = t;
        }
        out
    }
}

/// Masks `max(1, floor(ratio * L))` non-special positions, chosen uniformly
/// without replacement.
pub fn mask_tokens(
    tokens: &[usize],
    ratio: f64,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<MaskedPrompt> {
    if tokens.is_empty() {
        return Err(validation("cannot mask an empty token sequence"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(validation(format!("mask ratio {ratio} is outside [0, 1]")));
    }
    let eligible: Vec<usize> = (0..tokens.len())
        .filter(|&i| !vocab.is_special(tokens[i]))
        .collect();
    if eligible.is_empty() {
        return Err(validation("no maskable tokens"));
    }
    let k = floor_fraction(ratio, tokens.len()).max(1).min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    positions.sort_unstable();
    let mut masked = tokens.to_vec();
    let targets = positions
        .iter()
        .map(|&p| std::mem::replace(&mut masked[p], vocab.mask_id()))
        .collect();
    Ok(MaskedPrompt {
        source: tokens.to_vec(),
        masked,
        positions,
        targets,
    })
}

/// Mean cross-entropy of `targets` under the per-position `logits` rows.
pub fn prompt_reconstruction_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(shape(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        if t >= row.len() {
            return Err(shape(format!("target {t} outside vocabulary of {}", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_basics() {
        let v = Vocabulary::builtin();
        let ids = v.tokenize("A man is surfing");
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|&i| i != v.unk_id()));
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("a zeppelin"), vec![v.id("a").unwrap(), v.unk_id()]);
        assert_eq!(v.detokenize(&v.tokenize("a man is surfing")), "a man is surfing");
    }

    #[test]
    fn vocabulary_specials_and_duplicates() {
        let v = Vocabulary::parse("hello\n[MASK]\nworld\n").unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(2), Some(MASK));
        assert_eq!(v.id("hello"), Some(3));
        assert!(Vocabulary::parse("x\nx\n").is_err());
    }

    #[test]
    fn builtin_rules_fit_builtin_vocab() {
        AugmentationRules::builtin()
            .validate(&Vocabulary::builtin())
            .unwrap();
        let mut rules = AugmentationRules::default();
        rules.synonyms.insert("man".into(), vec!["zeppelin".into()]);
        assert!(rules.validate(&Vocabulary::builtin()).is_err());
    }

    #[test]
    fn single_synonym_substitution() {
        let mut rules = AugmentationRules::default();
        rules.synonyms.insert("man".into(), vec!["guy".into()]);
        let out = augment_prompt("a man is surfing", &rules, 3, 0);
        assert_eq!(out.len(), 3);
        assert!(out.iter().any(|a| a.text == "a guy is surfing"));
        assert!(out[1].fallback && out[2].fallback);
    }

    #[test]
    fn empty_rules_fall_back() {
        let out = augment_prompt("a man is surfing", &AugmentationRules::default(), 3, 9);
        assert!(out.iter().all(|a| a.fallback && a.text == "a man is surfing"));
    }

    #[test]
    fn builtin_augmentation_is_distinct_and_content_preserving() {
        let rules = AugmentationRules::builtin();
        let prompt = "a man is surfing on the sea at sunset";
        for seed in 0..20 {
            let out = augment_prompt(prompt, &rules, 3, seed);
            assert!(out.iter().all(|a| !a.fallback), "{out:?}");
            for i in 0..3 {
                for j in 0..i {
                    assert_ne!(out[i].text, out[j].text);
                }
                assert_eq!(rules.content_signature(&out[i].text), rules.content_signature(prompt));
            }
        }
        assert_eq!(augment_prompt(prompt, &rules, 5, 3), augment_prompt(prompt, &rules, 5, 3));
    }

    #[test]
    fn syntax_template_reorders() {
        let rules = AugmentationRules::builtin();
        let out = syntax_pass("a man is running in the park", &rules, 0).unwrap();
        assert_eq!(out, "in the park, a man is running");
    }

    #[test]
    fn mask_counts() {
        let v = Vocabulary::builtin();
        let toks: Vec<usize> = (3..13).collect();
        assert_eq!(mask_tokens(&toks, 0.3, 1, &v).unwrap().positions.len(), 3);
        assert_eq!(mask_tokens(&toks[..1], 0.3, 1, &v).unwrap().positions, vec![0]);
        let mut with_special = toks.clone();
        with_special[4] = v.unk_id();
        let all = mask_tokens(&with_special, 1.0, 1, &v).unwrap();
        assert_eq!(all.positions.len(), 9);
        assert!(!all.positions.contains(&4));
        assert!(mask_tokens(&[], 0.3, 1, &v).is_err());
        assert!(mask_tokens(&[v.pad_id()], 0.3, 1, &v).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut row = vec![0.0; 8];
        row[3] = 50.0;
        assert!(prompt_reconstruction_loss(&[row], &[3]).unwrap() < 1e-3);
        let uniform = prompt_reconstruction_loss(&[vec![0.7; 8]], &[5]).unwrap();
        assert!((uniform - 8f64.ln()).abs() < 1e-12);
        assert_eq!(prompt_reconstruction_loss(&[], &[]).unwrap(), 0.0);
        assert!(prompt_reconstruction_loss(&[vec![0.0; 4]], &[]).is_err());
    }

    proptest! {
        #[test]
        fn masked_prompt_round_trip(len in 1usize..20, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
            let v = Vocabulary::builtin();
            let toks: Vec<usize> = (0..len).map(|i| 3 + (i * 7) % (v.len() - 3)).collect();
            let m = mask_tokens(&toks, ratio, seed, &v).unwrap();
            prop_assert_eq!(m.restore(), toks.clone());
            prop_assert_eq!(m.positions.len(), m.targets.len());
            for (i, (&a, &b)) in m.masked.iter().zip(&toks).enumerate() {
                if m.positions.contains(&i) {
                    prop_assert_eq!(a, v.mask_id());
                } else {
                    prop_assert_eq!(a, b);
                }
            }
            prop_assert_eq!(m, mask_tokens(&toks, ratio, seed, &v).unwrap());
        }

        #[test]
        fn cross_entropy_permutation_invariant(raw in proptest::collection::vec(-4.0f64..4.0, 15), rot in 0usize..3) {
            let rows: Vec<Vec<f64>> = raw.chunks(5).map(|c| c.to_vec()).collect();
            let targets = vec![0usize, 2, 4];
            let mut r2 = rows.clone();
            let mut t2 = targets.clone();
            r2.rotate_left(rot);
            t2.rotate_left(rot);
            let a = prompt_reconstruction_loss(&rows, &targets).unwrap();
            let b = prompt_reconstruction_loss(&r2, &t2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
