//! Byte-level BPE tokenizer compatible with the GPT-2 vocabulary files
//! (`vocab.json` + `merges.txt`).
//!
//! Encoding is lossless: text is mapped to bytes, bytes to a reserved unicode
//! alphabet, and merges applied greedily by rank, so `decode(encode(s)) == s`
//! for any UTF-8 input.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

const END_OF_TEXT: &str = "<|endoftext|>";

/// Contraction suffixes split off before any other rule (case-sensitive).
const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), u32>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    eot_id: Option<u32>,
}

/// The GPT-2 byte↔unicode permutation: printable latin-1 bytes map to
/// themselves, the rest to codepoints starting at U+0100, so every byte has a
/// visible single-char representation.
fn byte_unicode_table() -> ([char; 256], HashMap<char, u8>) {
    let mut byte_to_char = ['\0'; 256];
    let mut char_to_byte = HashMap::new();
    let printable = (b'!'..=b'~')
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect::<Vec<u8>>();
    let mut next = 0u32;
    for b in 0u16..256 {
        let b = b as u8;
        let c = if printable.contains(&b) {
            char::from_u32(b as u32).unwrap()
        } else {
            let c = char::from_u32(256 + next).unwrap();
            next += 1;
            c
        };
        byte_to_char[b as usize] = c;
        char_to_byte.insert(c, b);
    }
    (byte_to_char, char_to_byte)
}

impl Vocabulary {
    /// Loads `vocab.json` (token → id) and `merges.txt` (one merge per line,
    /// rank = line order; `#`-prefixed lines are comments).
    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text =
            std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let token_to_id: HashMap<String, u32> = serde_json::from_str(&vocab_text)
            .map_err(|e| Error::Vocab(format!("{}: {e}", vocab_path.display())))?;

        let merges_text =
            std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let mut merges = Vec::new();
        for (lineno, line) in merges_text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| {
                Error::Vocab(format!(
                    "{}:{}: merge line has no space",
                    merges_path.display(),
                    lineno + 1
                ))
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::from_parts(token_to_id, merges)
    }

    pub fn from_parts(
        token_to_id: HashMap<String, u32>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let n = token_to_id.len();
        let mut id_to_token = vec![String::new(); n];
        let mut seen = vec![false; n];
        for (token, &id) in &token_to_id {
            let slot = seen
                .get_mut(id as usize)
                .ok_or_else(|| Error::Vocab(format!("id {id} not dense in [0, {n})")))?;
            if *slot {
                return Err(Error::Vocab(format!("duplicate id {id}")));
            }
            *slot = true;
            id_to_token[id as usize] = token.clone();
        }

        let (byte_to_char, char_to_byte) = byte_unicode_table();
        for c in byte_to_char {
            if !token_to_id.contains_key(c.to_string().as_str()) {
                return Err(Error::Vocab(format!(
                    "missing single-byte token {c:?}; not a byte-level vocabulary"
                )));
            }
        }

        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.into_iter().enumerate() {
            let merged = format!("{a}{b}");
            if !token_to_id.contains_key(merged.as_str()) {
                return Err(Error::Vocab(format!(
                    "merge result `{merged}` missing from vocabulary"
                )));
            }
            merge_ranks.entry((a, b)).or_insert(rank as u32);
        }

        let eot_id = token_to_id.get(END_OF_TEXT).copied();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            merge_ranks,
            byte_to_char,
            char_to_byte,
            eot_id,
        })
    }

    pub fn n_vocab(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn eot_id(&self) -> Option<u32> {
        self.eot_id
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in pre_tokenize(text) {
            let mapped: String = piece.bytes().map(|b| self.byte_to_char[b as usize]).collect();
            self.bpe(&mapped, &mut ids);
        }
        ids
    }

    /// Greedy merge by rank, lowest first, all occurrences per round.
    fn bpe(&self, piece: &str, out: &mut Vec<u32>) {
        let mut word: Vec<String> = piece.chars().map(String::from).collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .copied()
                })
                .min();
            let Some(best_rank) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len()
                    && self
                        .merge_ranks
                        .get(&(word[i].clone(), word[i + 1].clone()))
                        == Some(&best_rank)
                {
                    merged.push(format!("{}{}", word[i], word[i + 1]));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        for symbol in word {
            // Loadable vocabularies cover all bytes and all merge results, so
            // every symbol resolves.
            out.push(self.token_to_id[&symbol]);
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self
                .id_to_token
                .get(id as usize)
                .ok_or(Error::TokenOutOfRange {
                    id,
                    n_vocab: self.n_vocab(),
                })?;
            for c in token.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => bytes.push(b),
                    // Token strings outside the byte alphabet (e.g. the
                    // end-of-text marker) pass through as UTF-8.
                    None => bytes.extend_from_slice(c.to_string().as_bytes()),
                }
            }
        }
        Ok(bytes)
    }

    /// Lossy on invalid UTF-8 (possible only for adversarial id sequences).
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Printable form of one token, for reports.
    pub fn token_display(&self, id: u32) -> String {
        self.decode(&[id]).unwrap_or_else(|_| format!("<{id}>"))
    }

    /// The id of `text` iff it encodes to exactly one token.
    pub fn single_token_id(&self, text: &str) -> Result<u32> {
        let ids = self.encode(text);
        match ids[..] {
            [id] => Ok(id),
            _ => Err(Error::NotSingleToken(text.to_string())),
        }
    }
}

// ---- pre-tokenizer ----

fn is_letter(c: char) -> bool {
    c.is_alphabetic()
}

fn is_number(c: char) -> bool {
    c.is_numeric()
}

fn is_punct(c: char) -> bool {
    !c.is_whitespace() && !is_letter(c) && !is_number(c)
}

/// Splits text into the pieces GPT-2's reference pattern produces:
/// contractions; optionally space-prefixed letter, number, or punctuation
/// runs; whitespace runs that donate their final space to a following word.
fn pre_tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < n {
        if chars[i] == '\'' {
            if let Some(c) = CONTRACTIONS.iter().find(|c| {
                let cc: Vec<char> = c.chars().collect();
                chars[i..].starts_with(&cc)
            }) {
                pieces.push(c.to_string());
                i += c.chars().count();
                continue;
            }
        }

        // A single literal space fuses with a following letter/number/punct run.
        let (start, class_at) = if chars[i] == ' ' && i + 1 < n && !chars[i + 1].is_whitespace() {
            (i, i + 1)
        } else {
            (i, i)
        };
        let c = chars[class_at];
        if !c.is_whitespace() {
            let pred: fn(char) -> bool = if is_letter(c) {
                is_letter
            } else if is_number(c) {
                is_number
            } else {
                is_punct
            };
            let mut j = class_at;
            while j < n && pred(chars[j]) {
                j += 1;
            }
            pieces.push(chars[start..j].iter().collect());
            i = j;
            continue;
        }

        // Whitespace run: all but the final char split off when a non-space
        // follows (the final char then prefixes the next piece or stands alone).
        let mut j = i;
        while j < n && chars[j].is_whitespace() {
            j += 1;
        }
        if j == n {
            pieces.push(chars[i..j].iter().collect());
            i = j;
        } else if j - i > 1 {
            pieces.push(chars[i..j - 1].iter().collect());
            i = j - 1;
        } else {
            // Single non-space-fusing whitespace char (never a plain ' ' here).
            pieces.push(chars[i].to_string());
            i += 1;
        }
    }
    pieces
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// The released GPT-2 vocabulary, loaded once from the committed copy.
    pub(crate) fn test_vocab() -> &'static Vocabulary {
        use std::sync::OnceLock;
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/gpt2");
            Vocabulary::load(&dir.join("vocab.json"), &dir.join("merges.txt"))
                .expect("committed vocabulary loads")
        })
    }

    #[test]
    fn splits_like_the_reference_pattern() {
        let cases: [(&str, &[&str]); 10] = [
            ("Statement E is true.", &["Statement", " E", " is", " true", "."]),
            ("don't stop", &["don", "'t", " stop"]),
            ("  leading", &[" ", " leading"]),
            ("trailing  ", &["trailing", "  "]),
            ("a  b", &["a", " ", " b"]),
            ("x\ty", &["x", "\t", "y"]),
            ("1234 5", &["1234", " 5"]),
            ("hi!!", &["hi", "!!"]),
            ("!!'s", &["!!'", "s"]),
            ("", &[]),
        ];
        for (text, want) in cases {
            assert_eq!(pre_tokenize(text), want, "splitting {text:?}");
        }
    }

    fn tiny_vocab() -> Vocabulary {
        let (bytes, _) = byte_unicode_table();
        let mut map = HashMap::new();
        for c in bytes {
            let id = map.len() as u32;
            map.insert(c.to_string(), id);
        }
        for tok in ["is", "Ġis", "Ġtrue", "tr", "ue", "true"] {
            let id = map.len() as u32;
            map.insert(tok.to_string(), id);
        }
        let merges = vec![
            ("i".into(), "s".into()),
            ("Ġ".into(), "is".into()),
            ("t".into(), "r".into()),
            ("u".into(), "e".into()),
            ("tr".into(), "ue".into()),
            ("Ġ".into(), "true".into()),
        ];
        Vocabulary::from_parts(map, merges).unwrap()
    }

    #[test]
    fn merges_by_rank_and_round_trips() {
        let v = tiny_vocab();
        let ids = v.encode(" is true");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.decode(&ids).unwrap(), " is true");
        assert_eq!(v.encode(""), Vec::<u32>::new());
    }

    #[test]
    fn single_token_id_rejects_multi_token_text() {
        let v = tiny_vocab();
        assert!(v.single_token_id(" is").is_ok());
        assert!(matches!(
            v.single_token_id(" is true"),
            Err(Error::NotSingleToken(_))
        ));
        assert!(matches!(v.single_token_id(""), Err(Error::NotSingleToken(_))));
    }

    #[test]
    fn round_trips_arbitrary_bytes() {
        let v = tiny_vocab();
        let text = "héllo wörld\u{1F600} mixé\t tabs";
        let ids = v.encode(text);
        assert_eq!(v.decode(&ids).unwrap(), text);
    }

    /// Reference encodings produced by the published GPT-2 tokenizer.
    #[test]
    fn matches_reference_golden_corpus() {
        #[derive(serde::Deserialize)]
        struct Case {
            text: String,
            ids: Vec<u32>,
        }
        let path =
            Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tokenizer_golden.json");
        let cases: Vec<Case> =
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert!(cases.len() >= 100);
        let v = test_vocab();
        for case in &cases {
            assert_eq!(v.encode(&case.text), case.ids, "encoding {:?}", case.text);
            if !case.ids.is_empty() {
                assert_eq!(v.decode(&case.ids).unwrap(), case.text);
            }
        }
    }
}
