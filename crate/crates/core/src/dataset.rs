//! Syllogism prompt datasets: clean/corrupted token sequences generated from
//! fixed sentence templates over sampled capital letters and a binary
//! truth-value word pair.
//!
//! Every rendered prompt ends right before the answer token (after a final
//! "is"), all letters and value words are single tokens, and corruption swaps
//! each value word for its opposite, so clean and corrupted sequences align
//! position-for-position and every instance of a dataset has one length.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SyllogismFamily {
    SimpleSyllogism,
    OppositeSyllogism,
    ComplexSyllogism,
    ComplexOppositeSyllogism,
}

impl SyllogismFamily {
    pub fn short(&self) -> &'static str {
        match self {
            SyllogismFamily::SimpleSyllogism => "ss",
            SyllogismFamily::OppositeSyllogism => "os",
            SyllogismFamily::ComplexSyllogism => "cs",
            SyllogismFamily::ComplexOppositeSyllogism => "cos",
        }
    }

    pub fn template_count(&self) -> usize {
        match self {
            SyllogismFamily::SimpleSyllogism => 3,
            SyllogismFamily::OppositeSyllogism => 2,
            SyllogismFamily::ComplexSyllogism => 1,
            SyllogismFamily::ComplexOppositeSyllogism => 3,
        }
    }
}

/// A syllogism family plus a 1-based template variant index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SyllogismKind {
    pub family: SyllogismFamily,
    pub template_index: usize,
}

/// How the gold answer relates to the first stated truth value.
enum GoldRule {
    SameAsStated,
    NegationOfStated,
    /// The template text states no truth value, so no answer is derivable.
    Underdetermined,
}

struct Template {
    text: &'static str,
    n_letters: usize,
    n_values: usize,
    gold: GoldRule,
}

/// Placeholders: {a} {b} {c} are sampled letters, {v1} {v2} truth-value words.
/// The prompt stops immediately before the answer slot.
static TEMPLATES: &[(&SyllogismFamily, &[Template])] = &[
    (
        &SyllogismFamily::SimpleSyllogism,
        &[
            Template {
                text: "Statement {a} is {v1}. Statement {b} has the same truth value as {a}. Statement {b} is",
                n_letters: 2,
                n_values: 1,
                gold: GoldRule::SameAsStated,
            },
            Template {
                text: "Statement {a} is {v1}. Statement {b} matches statement {a}. Statement {b} is",
                n_letters: 2,
                n_values: 1,
                gold: GoldRule::SameAsStated,
            },
            Template {
                text: "Statement {a} is {v1}. Statement {b} must match {a}. Statement {c} doesn't matter. Statement {b} is",
                n_letters: 3,
                n_values: 1,
                gold: GoldRule::SameAsStated,
            },
        ],
    ),
    (
        &SyllogismFamily::OppositeSyllogism,
        &[
            Template {
                text: "Statement {b} has the opposite truth value of {a}. Statement {a} is {v1}. Statement {b} is",
                n_letters: 2,
                n_values: 1,
                gold: GoldRule::NegationOfStated,
            },
            Template {
                text: "Statement {a} and statement {b} are opposites. Statement {a} is {v1}. Statement {b} is",
                n_letters: 2,
                n_values: 1,
                gold: GoldRule::NegationOfStated,
            },
        ],
    ),
    (
        &SyllogismFamily::ComplexSyllogism,
        &[Template {
            text: "Statement {a} is {v1}. Statement {b} matches statement {a}. Statement {c} is {v2}. Statement {b} is",
            n_letters: 3,
            n_values: 2,
            gold: GoldRule::SameAsStated,
        }],
    ),
    (
        &SyllogismFamily::ComplexOppositeSyllogism,
        &[
            Template {
                text: "Statement {a} is {v1}. Statement {b} has the opposite truth value of {a}. Statement {c} is {v2}. Statement {b} is",
                n_letters: 3,
                n_values: 2,
                gold: GoldRule::NegationOfStated,
            },
            Template {
                text: "Statement {a} and {b} are opposites. Statement {c} has the same truth value as {a}. Statement {b} is",
                n_letters: 3,
                n_values: 0,
                gold: GoldRule::Underdetermined,
            },
            Template {
                text: "Statement {a} is {v1}. Statement {a} and {b} are opposites. Statement {c} is {v2}. Statement {b} is",
                n_letters: 3,
                n_values: 2,
                gold: GoldRule::NegationOfStated,
            },
        ],
    ),
];

impl SyllogismKind {
    pub fn new(family: SyllogismFamily, template_index: usize) -> Result<Self> {
        if template_index == 0 || template_index > family.template_count() {
            return Err(Error::InvalidArgument(format!(
                "{} has templates 1..={}, got {template_index}",
                family.short(),
                family.template_count()
            )));
        }
        Ok(SyllogismKind { family, template_index })
    }

    /// The variants whose phrasing matches the paper's worked examples.
    pub fn default_for(family: SyllogismFamily) -> Self {
        let template_index = match family {
            SyllogismFamily::SimpleSyllogism => 2,
            SyllogismFamily::OppositeSyllogism => 2,
            _ => 1,
        };
        SyllogismKind { family, template_index }
    }

    fn template(&self) -> &'static Template {
        let (_, list) = TEMPLATES
            .iter()
            .find(|(f, _)| **f == self.family)
            .expect("every family has templates");
        &list[self.template_index - 1]
    }

    pub fn n_letters(&self) -> usize {
        self.template().n_letters
    }
}

impl fmt::Display for SyllogismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.family.short(), self.template_index)
    }
}

impl FromStr for SyllogismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let split = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
        let family = match &s[..split] {
            "ss" => SyllogismFamily::SimpleSyllogism,
            "os" => SyllogismFamily::OppositeSyllogism,
            "cs" => SyllogismFamily::ComplexSyllogism,
            "cos" => SyllogismFamily::ComplexOppositeSyllogism,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown syllogism family `{other}` (expected ss/os/cs/cos)"
                )))
            }
        };
        if s[split..].is_empty() {
            return Ok(SyllogismKind::default_for(family));
        }
        let idx: usize = s[split..]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad template index in `{s}`")))?;
        SyllogismKind::new(family, idx)
    }
}

/// A pair of opposed single-token answer words, leading space included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryPair {
    pub positive_word: String,
    pub negative_word: String,
    pub positive_id: u32,
    pub negative_id: u32,
}

impl BinaryPair {
    pub fn new(vocab: &Vocabulary, positive_word: &str, negative_word: &str) -> Result<Self> {
        let positive_id = vocab.single_token_id(positive_word)?;
        let negative_id = vocab.single_token_id(negative_word)?;
        if positive_id == negative_id {
            return Err(Error::InvalidArgument(format!(
                "pair words `{positive_word}`/`{negative_word}` share one token id"
            )));
        }
        Ok(BinaryPair {
            positive_word: positive_word.to_string(),
            negative_word: negative_word.to_string(),
            positive_id,
            negative_id,
        })
    }

    /// "true/false" style label used in reports.
    pub fn name(&self) -> String {
        format!("{}/{}", self.positive_word.trim(), self.negative_word.trim())
    }

    fn word(&self, positive: bool) -> &str {
        if positive {
            self.positive_word.trim_start()
        } else {
            self.negative_word.trim_start()
        }
    }

    fn id(&self, positive: bool) -> u32 {
        if positive {
            self.positive_id
        } else {
            self.negative_id
        }
    }
}

/// The five pairs studied: (true, false) plus the transfer pairs.
pub fn standard_pairs(vocab: &Vocabulary) -> Result<Vec<BinaryPair>> {
    [
        (" true", " false"),
        (" right", " wrong"),
        (" good", " bad"),
        (" positive", " negative"),
        (" correct", " incorrect"),
    ]
    .iter()
    .map(|(p, n)| BinaryPair::new(vocab, p, n))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyllogismInstance {
    pub clean_tokens: Vec<u32>,
    pub corrupted_tokens: Vec<u32>,
    pub correct_id: u32,
    pub incorrect_id: u32,
    pub letters: Vec<char>,
    /// Stated truth values in template order; `true` means the positive word.
    pub truth_assignment: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyllogismDataset {
    pub kind: SyllogismKind,
    pub pair: BinaryPair,
    pub instances: Vec<SyllogismInstance>,
    pub seed: u64,
    pub eot_prepended: bool,
}

/// Per-instance corruption for patching baselines. `DatasetMean` has no
/// per-instance sequence; it directs downstream code to mean activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CorruptionStrategy {
    #[default]
    FlipTruthValues,
    ResampleLetters,
    DatasetMean,
}

#[derive(Clone, Copy, Debug)]
pub struct GenOptions {
    /// Prepend the end-of-text token to clean and corrupted sequences.
    pub prepend_eot: bool,
    /// Distractor clause states the incorrect answer (the hard constraint).
    /// When false it states the gold answer instead.
    pub distractor_opposes: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { prepend_eot: false, distractor_opposes: true }
    }
}

/// Capital letters whose leading-space form is a single token.
pub fn letter_pool(vocab: &Vocabulary) -> Vec<char> {
    ('A'..='Z')
        .filter(|c| vocab.single_token_id(&format!(" {c}")).is_ok())
        .collect()
}

fn render(template: &Template, letters: &[char], values: &[&str]) -> String {
    let mut text = template.text.to_string();
    for (placeholder, letter) in ["{a}", "{b}", "{c}"].iter().zip(letters) {
        text = text.replace(placeholder, &letter.to_string());
    }
    for (placeholder, value) in ["{v1}", "{v2}"].iter().zip(values) {
        text = text.replace(placeholder, value);
    }
    text
}

pub fn generate(
    vocab: &Vocabulary,
    kind: SyllogismKind,
    pair: &BinaryPair,
    n: usize,
    seed: u64,
) -> Result<SyllogismDataset> {
    generate_with(vocab, kind, pair, n, seed, GenOptions::default())
}

pub fn generate_with(
    vocab: &Vocabulary,
    kind: SyllogismKind,
    pair: &BinaryPair,
    n: usize,
    seed: u64,
    options: GenOptions,
) -> Result<SyllogismDataset> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let template = kind.template();
    if matches!(template.gold, GoldRule::Underdetermined) {
        return Err(Error::InvalidArgument(format!(
            "template {kind} states no truth value, so no gold answer exists"
        )));
    }
    let pool = letter_pool(vocab);
    if pool.len() < template.n_letters {
        return Err(Error::Vocab(format!(
            "letter pool has {} single-token letters, template needs {}",
            pool.len(),
            template.n_letters
        )));
    }
    let eot = match (options.prepend_eot, vocab.eot_id()) {
        (false, _) => None,
        (true, Some(id)) => Some(id),
        (true, None) => {
            return Err(Error::Vocab("no end-of-text token to prepend".into()))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // balanced gold classes, order shuffled
    let mut stated_positive: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    stated_positive.shuffle(&mut rng);

    let mut instances = Vec::with_capacity(n);
    for &v1 in &stated_positive {
        let letters: Vec<char> = pool
            .choose_multiple(&mut rng, template.n_letters)
            .copied()
            .collect();
        let gold = match template.gold {
            GoldRule::SameAsStated => v1,
            GoldRule::NegationOfStated => !v1,
            GoldRule::Underdetermined => unreachable!("rejected above"),
        };
        let mut truth_assignment = vec![v1];
        if template.n_values == 2 {
            truth_assignment.push(if options.distractor_opposes { !gold } else { gold });
        }
        let words: Vec<&str> = truth_assignment.iter().map(|&v| pair.word(v)).collect();
        let flipped: Vec<&str> = truth_assignment.iter().map(|&v| pair.word(!v)).collect();
        let clean_text = render(template, &letters, &words);
        let corrupted_text = render(template, &letters, &flipped);
        let mut clean_tokens = vocab.encode(&clean_text);
        let mut corrupted_tokens = vocab.encode(&corrupted_text);
        if let Some(id) = eot {
            clean_tokens.insert(0, id);
            corrupted_tokens.insert(0, id);
        }
        debug_assert_eq!(clean_tokens.len(), corrupted_tokens.len());
        instances.push(SyllogismInstance {
            clean_tokens,
            corrupted_tokens,
            correct_id: pair.id(gold),
            incorrect_id: pair.id(!gold),
            letters,
            truth_assignment,
        });
    }
    let dataset = SyllogismDataset {
        kind,
        pair: pair.clone(),
        instances,
        seed,
        eot_prepended: options.prepend_eot,
    };
    dataset.check_invariants()?;
    Ok(dataset)
}

impl SyllogismDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.instances.first().map_or(0, |i| i.clean_tokens.len())
    }

    /// Per-instance flag: the gold answer is the pair's positive word.
    pub fn gold_positive(&self) -> Vec<bool> {
        self.instances.iter().map(|i| i.correct_id == self.pair.positive_id).collect()
    }

    fn check_invariants(&self) -> Result<()> {
        let len = self.seq_len();
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.clean_tokens.len() != len || inst.corrupted_tokens.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "instance {i} breaks uniform length {len}"
                )));
            }
            let distinct: BTreeSet<char> = inst.letters.iter().copied().collect();
            if distinct.len() != inst.letters.len() {
                return Err(Error::InvalidArgument(format!("instance {i} repeats a letter")));
            }
            if inst.clean_tokens.last() == Some(&inst.correct_id) {
                return Err(Error::InvalidArgument(format!(
                    "instance {i} leaks the answer token"
                )));
            }
        }
        Ok(())
    }
}

/// Applies a corruption strategy to one instance's clean tokens.
pub fn corrupt(
    instance: &SyllogismInstance,
    pair: &BinaryPair,
    strategy: CorruptionStrategy,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<u32>> {
    match strategy {
        CorruptionStrategy::FlipTruthValues => Ok(flip_truth_values(&instance.clean_tokens, pair)),
        CorruptionStrategy::ResampleLetters => {
            let pool = letter_pool(vocab);
            let used: Vec<u32> = instance
                .letters
                .iter()
                .map(|c| vocab.single_token_id(&format!(" {c}")).expect("letter is single-token"))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fresh: Vec<u32> = pool
                .iter()
                .filter(|c| !instance.letters.contains(c))
                .map(|c| vocab.single_token_id(&format!(" {c}")).expect("pool is single-token"))
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, used.len())
                .copied()
                .collect();
            if fresh.len() < used.len() {
                return Err(Error::Vocab("letter pool too small to resample".into()));
            }
            Ok(instance
                .clean_tokens
                .iter()
                .map(|t| match used.iter().position(|u| u == t) {
                    Some(i) => fresh[i],
                    None => *t,
                })
                .collect())
        }
        CorruptionStrategy::DatasetMean => Err(Error::InvalidArgument(
            "dataset-mean corruption has no per-instance sequence; use mean activations".into(),
        )),
    }
}

/// Token-level involution: swap the pair's two ids everywhere.
pub fn flip_truth_values(tokens: &[u32], pair: &BinaryPair) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| {
            if t == pair.positive_id {
                pair.negative_id
            } else if t == pair.negative_id {
                pair.positive_id
            } else {
                t
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    clean: Vec<u32>,
    corrupted: Vec<u32>,
    correct: u32,
    incorrect: u32,
    letters: Vec<char>,
    truth: Vec<bool>,
    seed: u64,
    kind: String,
    pair: BinaryPair,
    eot_prepended: bool,
}

impl SyllogismDataset {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for inst in &self.instances {
            let record = JsonlRecord {
                clean: inst.clean_tokens.clone(),
                corrupted: inst.corrupted_tokens.clone(),
                correct: inst.correct_id,
                incorrect: inst.incorrect_id,
                letters: inst.letters.clone(),
                truth: inst.truth_assignment.clone(),
                seed: self.seed,
                kind: self.kind.to_string(),
                pair: self.pair.clone(),
                eot_prepended: self.eot_prepended,
            };
            serde_json::to_writer(&mut out, &record)
                .map_err(|e| Error::InvalidArgument(format!("serialize: {e}")))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut instances = Vec::new();
        let mut header: Option<(SyllogismKind, BinaryPair, u64, bool)> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidArgument(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            let kind: SyllogismKind = record.kind.parse()?;
            let meta = (kind, record.pair.clone(), record.seed, record.eot_prepended);
            match &header {
                None => header = Some(meta),
                Some(h) if *h != meta => {
                    return Err(Error::InvalidArgument(format!(
                        "{}:{}: mixed dataset metadata",
                        path.display(),
                        lineno + 1
                    )))
                }
                Some(_) => {}
            }
            instances.push(SyllogismInstance {
                clean_tokens: record.clean,
                corrupted_tokens: record.corrupted,
                correct_id: record.correct,
                incorrect_id: record.incorrect,
                letters: record.letters,
                truth_assignment: record.truth,
            });
        }
        let (kind, pair, seed, eot_prepended) =
            header.ok_or(Error::EmptyInput)?;
        let dataset = SyllogismDataset { kind, pair, instances, seed, eot_prepended };
        dataset.check_invariants()?;
        Ok(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::tests::test_vocab;

    fn pair(vocab: &Vocabulary) -> BinaryPair {
        BinaryPair::new(vocab, " true", " false").unwrap()
    }

    #[test]
    fn standard_pairs_are_single_tokens() {
        let vocab = test_vocab();
        let pairs = standard_pairs(vocab).unwrap();
        assert_eq!(pairs.len(), 5);
        assert_eq!(pairs[0].name(), "true/false");
        assert_eq!(letter_pool(vocab).len(), 26);
    }

    #[test]
    fn kind_parsing_round_trips() {
        for s in ["ss1", "ss2", "ss3", "os1", "os2", "cs1", "cos1", "cos2", "cos3"] {
            let kind: SyllogismKind = s.parse().unwrap();
            assert_eq!(kind.to_string(), s);
        }
        assert!("ss4".parse::<SyllogismKind>().is_err());
        assert!("cs2".parse::<SyllogismKind>().is_err());
        assert!("xx1".parse::<SyllogismKind>().is_err());
        let default: SyllogismKind = "ss".parse().unwrap();
        assert_eq!(default, SyllogismKind::default_for(SyllogismFamily::SimpleSyllogism));
    }

    #[test]
    fn renders_the_worked_examples() {
        let ss2 = SyllogismKind::default_for(SyllogismFamily::SimpleSyllogism);
        let text = render(ss2.template(), &['E', 'S'], &["true"]);
        assert_eq!(
            text,
            "Statement E is true. Statement S matches statement E. Statement S is"
        );
        let os2 = SyllogismKind::default_for(SyllogismFamily::OppositeSyllogism);
        let text = render(os2.template(), &['E', 'S'], &["true"]);
        assert_eq!(
            text,
            "Statement E and statement S are opposites. Statement E is true. Statement S is"
        );
    }

    #[test]
    fn generates_deterministic_balanced_uniform_datasets() {
        let vocab = test_vocab();
        let pair = pair(&vocab);
        let kind = SyllogismKind::default_for(SyllogismFamily::SimpleSyllogism);
        let a = generate(&vocab, kind, &pair, 100, 7).unwrap();
        let b = generate(&vocab, kind, &pair, 100, 7).unwrap();
        assert_eq!(a, b);
        let c = generate(&vocab, kind, &pair, 100, 8).unwrap();
        assert_ne!(a, c);
        let positive = a.instances.iter().filter(|i| i.correct_id == pair.positive_id).count();
        assert_eq!(positive, 50);
        let len = a.seq_len();
        assert!(a.instances.iter().all(|i| i.clean_tokens.len() == len));
        assert!(a.instances.iter().all(|i| i.corrupted_tokens.len() == len));
        let is_id = vocab.single_token_id(" is").unwrap();
        assert!(a.instances.iter().all(|i| *i.clean_tokens.last().unwrap() == is_id));
    }

    #[test]
    fn os_gold_is_negation() {
        let vocab = test_vocab();
        let pair = pair(&vocab);
        let kind = SyllogismKind::default_for(SyllogismFamily::OppositeSyllogism);
        let data = generate(&vocab, kind, &pair, 40, 1).unwrap();
        for inst in &data.instances {
            let stated = inst.truth_assignment[0];
            assert_eq!(inst.correct_id, pair.id(!stated));
        }
    }

    #[test]
    fn cs_distractor_states_the_incorrect_answer() {
        let vocab = test_vocab();
        let pair = pair(&vocab);
        let kind = SyllogismKind::default_for(SyllogismFamily::ComplexSyllogism);
        let data = generate(&vocab, kind, &pair, 40, 2).unwrap();
        for inst in &data.instances {
            assert_eq!(inst.truth_assignment.len(), 2);
            let gold_positive = inst.correct_id == pair.positive_id;
            assert_eq!(inst.truth_assignment[0], gold_positive);
            assert_eq!(inst.truth_assignment[1], !gold_positive);
            assert_eq!(inst.letters.len(), 3);
        }
    }

    #[test]
    fn corruption_flips_and_inverts() {
        let vocab = test_vocab();
        let pair = pair(&vocab);
        let kind = SyllogismKind::default_for(SyllogismFamily::ComplexSyllogism);
        let data = generate(&vocab, kind, &pair, 10, 3).unwrap();
        for inst in &data.instances {
            assert_eq!(flip_truth_values(&inst.clean_tokens, &pair), inst.corrupted_tokens);
            assert_eq!(
                flip_truth_values(&inst.corrupted_tokens, &pair),
                inst.clean_tokens
            );
            let diffs = inst
                .clean_tokens
                .iter()
                .zip(&inst.corrupted_tokens)
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(diffs, 2, "CS has two stated truth values");
        }
    }

    #[test]
    fn resample_letters_keeps_values_and_length() {
        let vocab = test_vocab();
        let pair = pair(&vocab);
        let kind = SyllogismKind::default_for(SyllogismFamily::SimpleSyllogism);
        let data = generate(&vocab, kind, &pair, 5, 4).unwrap();
        for inst in &data.instances {
            let resampled =
                corrupt(inst, &pair, CorruptionStrategy::ResampleLetters, &vocab, 9).unwrap();
            assert_eq!(resampled.len(), inst.clean_tokens.len());
            assert_ne!(resampled, inst.clean_tokens);
            for (a, b) in inst.clean_tokens.iter().zip(&resampled) {
                if a == b {
                    continue;
                }
                assert_ne!(*a, pair.positive_id);
                assert_ne!(*a, pair.negative_id);
            }
        }
        assert!(matches!(
            corrupt(&data.instances[0], &pair, CorruptionStrategy::DatasetMean, &vocab, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn eot_prepend_shifts_sequences() {
        let vocab = test_vocab();
        let pair = pair(&vocab);
        let kind = SyllogismKind::default_for(SyllogismFamily::SimpleSyllogism);
        let plain = generate(&vocab, kind, &pair, 5, 6).unwrap();
        let opts = GenOptions { prepend_eot: true, ..Default::default() };
        let eot = generate_with(&vocab, kind, &pair, 5, 6, opts).unwrap();
        assert_eq!(eot.seq_len(), plain.seq_len() + 1);
        let eot_id = vocab.eot_id().unwrap();
        for inst in &eot.instances {
            assert_eq!(inst.clean_tokens[0], eot_id);
            assert_eq!(inst.corrupted_tokens[0], eot_id);
        }
    }

    #[test]
    fn underdetermined_template_is_rejected() {
        let vocab = test_vocab();
        let pair = pair(&vocab);
        let kind = SyllogismKind::new(SyllogismFamily::ComplexOppositeSyllogism, 2).unwrap();
        assert!(matches!(
            generate(&vocab, kind, &pair, 10, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn jsonl_round_trips() {
        let vocab = test_vocab();
        let pair = pair(&vocab);
        let kind = SyllogismKind::default_for(SyllogismFamily::OppositeSyllogism);
        let data = generate(&vocab, kind, &pair, 12, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("os.jsonl");
        data.write_jsonl(&path).unwrap();
        let back = SyllogismDataset::read_jsonl(&path).unwrap();
        assert_eq!(data, back);
    }
}
