//! Object vocabulary and caption matching.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vlm::{CLS_TOKEN, SEP_TOKEN};

/// Lowercase and strip everything but letters and digits. Marker tokens come
/// out as plain words (`"[CLS]"` → `"cls"`), which is fine: they are matched
/// like any other token and real vocabularies don't contain them.
pub fn normalize_token(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(|c| c.to_lowercase())
        .collect()
}

/// Whitespace-split and normalize a caption, wrapped in marker tokens so the
/// token indices line up with the encoder's attention rows. Tokens that
/// normalize to nothing (bare punctuation) are dropped.
pub fn tokenize_caption(caption: &str) -> Vec<String> {
    let mut tokens = vec![CLS_TOKEN.to_string()];
    tokens.extend(
        caption
            .split_whitespace()
            .map(normalize_token)
            .filter(|t| !t.is_empty()),
    );
    tokens.push(SEP_TOKEN.to_string());
    tokens
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabCategory {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// An alias as a normalized token sequence.
#[derive(Debug, Clone)]
struct AliasEntry {
    tokens: Vec<String>,
    category: usize,
}

/// Category list plus an alias table prepared for greedy longest-span
/// matching. Matching is independent of the order aliases were listed in:
/// longer aliases always win, and ties go to the earlier category.
#[derive(Debug, Clone)]
pub struct ObjectVocabulary {
    categories: Vec<VocabCategory>,
    entries: Vec<AliasEntry>,
}

impl ObjectVocabulary {
    pub fn new(categories: Vec<VocabCategory>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for cat in &categories {
            let norm = normalize_token(&cat.name);
            if norm.is_empty() {
                return Err(Error::invalid(format!(
                    "category name {:?} normalizes to nothing",
                    cat.name
                )));
            }
            if !seen.insert(cat.name.to_lowercase()) {
                return Err(Error::invalid(format!(
                    "duplicate category name {:?}",
                    cat.name
                )));
            }
        }
        let mut entries = Vec::new();
        for (idx, cat) in categories.iter().enumerate() {
            let mut alias_strings: Vec<&str> = vec![cat.name.as_str()];
            alias_strings.extend(cat.aliases.iter().map(|a| a.as_str()));
            let mut local = BTreeSet::new();
            for alias in alias_strings {
                let tokens: Vec<String> = alias
                    .split_whitespace()
                    .map(normalize_token)
                    .filter(|t| !t.is_empty())
                    .collect();
                if tokens.is_empty() {
                    return Err(Error::invalid(format!(
                        "alias {alias:?} of category {:?} normalizes to nothing",
                        cat.name
                    )));
                }
                if local.insert(tokens.clone()) {
                    entries.push(AliasEntry {
                        tokens,
                        category: idx,
                    });
                }
            }
        }
        // Longest alias first; ties by category registration order, keeping
        // matching independent of per-category alias order.
        entries.sort_by(|a, b| {
            b.tokens
                .len()
                .cmp(&a.tokens.len())
                .then(a.category.cmp(&b.category))
        });
        Ok(ObjectVocabulary {
            categories,
            entries,
        })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| VocabCategory {
                    name: n.as_ref().to_string(),
                    aliases: Vec::new(),
                })
                .collect(),
        )
    }

    pub fn categories(&self) -> &[VocabCategory] {
        &self.categories
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Sub-vocabulary with only the named categories (aliases kept).
    pub fn restrict<S: AsRef<str>>(&self, keep: &[S]) -> Result<ObjectVocabulary> {
        let keep: BTreeSet<String> = keep.iter().map(|s| s.as_ref().to_lowercase()).collect();
        let kept: Vec<VocabCategory> = self
            .categories
            .iter()
            .filter(|c| keep.contains(&c.name.to_lowercase()))
            .cloned()
            .collect();
        for name in &keep {
            if !kept.iter().any(|c| &c.name.to_lowercase() == name) {
                return Err(Error::invalid(format!(
                    "category {name:?} not in vocabulary"
                )));
            }
        }
        ObjectVocabulary::new(kept)
    }

    /// JSON-lines file, one `{"name": ..., "aliases": [...]}` per category.
    /// An optional leading `{"schema": ...}` line is skipped.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut categories = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
                    if v.get("schema").is_some() && v.get("name").is_none() {
                        continue;
                    }
                }
            }
            let cat: VocabCategory = serde_json::from_str(&line)
                .map_err(|e| Error::malformed(path, i + 1, e.to_string()))?;
            categories.push(cat);
        }
        ObjectVocabulary::new(categories)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        writeln!(
            out,
            "{}",
            serde_json::json!({ "schema": "capdet-vocab-v1" })
        )?;
        for cat in &self.categories {
            writeln!(out, "{}", serde_json::to_string(cat)?)?;
        }
        Ok(())
    }
}

/// One matched mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabularyMatch {
    pub category: String,
    /// `[start, end)` token indices.
    pub token_span: [usize; 2],
}

fn token_matches(caption_token: &str, alias_token: &str) -> bool {
    caption_token == alias_token || caption_token.strip_suffix('s') == Some(alias_token)
}

/// Greedy longest-span, left-to-right matching of normalized caption tokens
/// against the vocabulary. Every occurrence yields one match; shorter matches
/// overlapping an accepted span are suppressed. A trailing `'s'` on a caption
/// token is folded away when the singular form matches an alias token.
pub fn match_vocabulary(tokens: &[String], vocab: &ObjectVocabulary) -> Vec<VocabularyMatch> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut advanced = false;
        for entry in &vocab.entries {
            let len = entry.tokens.len();
            if i + len > tokens.len() {
                continue;
            }
            let hit = entry
                .tokens
                .iter()
                .zip(&tokens[i..i + len])
                .all(|(alias_tok, tok)| token_matches(tok, alias_tok));
            if hit {
                out.push(VocabularyMatch {
                    category: vocab.categories[entry.category].name.clone(),
                    token_span: [i, i + len],
                });
                i += len;
                advanced = true;
                break;
            }
        }
        if !advanced {
            i += 1;
        }
    }
    out
}
