//! Attribute vocabulary: raw dataset labels, their natural-language
//! expansions, and per-attribute prevalence statistics from the training
//! split.
//!
//! Raw labels such as `ub-TShirt` are not mechanically splittable, so each
//! dataset ships a schema file mapping every label to a (subject, value)
//! pair. Expansion fills the canonical two-slot template with that pair.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Canonical sentence template. `{subject}` and `{value}` are the two slots.
pub const CANONICAL_TEMPLATE: &str = "a pedestrian whose {subject} is {value}";

/// Subject used when a schema line omits the (subject, value) pair.
const DEFAULT_SUBJECT: &str = "action";

/// Optional region hint carried by a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RegionHint {
    Global,
    Region(usize),
}

/// (subject, value) slot pairs keyed by raw attribute label.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    entries: HashMap<String, (String, String)>,
}

impl Schema {
    pub fn insert(&mut self, label: &str, subject: &str, value: &str) {
        self.entries
            .insert(label.to_string(), (subject.to_string(), value.to_string()));
    }

    pub fn get(&self, label: &str) -> Option<&(String, String)> {
        self.entries.get(label)
    }
}

/// Ordered attribute vocabulary with expansions and prevalence ratios.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttributeSet {
    pub names: Vec<String>,
    pub expansions: Vec<String>,
    pub prevalence: Vec<f64>,
    pub groups: Vec<RegionHint>,
}

impl AttributeSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Checks the structural invariants of the set.
    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        if self.expansions.len() != n || self.prevalence.len() != n || self.groups.len() != n {
            return Err(Error::Schema(format!(
                "attribute set arity mismatch: {} names, {} expansions, {} prevalence",
                n,
                self.expansions.len(),
                self.prevalence.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.names {
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate attribute name {name:?}")));
            }
        }
        for (i, e) in self.expansions.iter().enumerate() {
            if e.trim().is_empty() {
                return Err(Error::Schema(format!(
                    "empty expansion for attribute {:?}",
                    self.names[i]
                )));
            }
        }
        for (i, r) in self.prevalence.iter().enumerate() {
            if !(0.0..=1.0).contains(r) {
                return Err(Error::Schema(format!(
                    "prevalence {} for attribute {:?} outside [0,1]",
                    r, self.names[i]
                )));
            }
        }
        Ok(())
    }
}

/// Lowercase a label and break hyphen/underscore/camel-case boundaries into
/// space-separated words.
pub fn normalize_label(label: &str) -> String {
    let mut words: Vec<String> = Vec::new();
    for chunk in label.split(['-', '_', ' ']) {
        if chunk.is_empty() {
            continue;
        }
        let mut current = String::new();
        let chars: Vec<char> = chunk.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            // Split aB|b and AB|b style boundaries: lower-to-upper
            // transitions, and the last capital of an acronym run.
            let boundary = c.is_uppercase()
                && i > 0
                && (chars[i - 1].is_lowercase()
                    || chars[i - 1].is_numeric()
                    || chars.get(i + 1).is_some_and(|n| n.is_lowercase()));
            if boundary && !current.is_empty() {
                words.push(current.to_lowercase());
                current = String::new();
            }
            current.push(c);
        }
        if !current.is_empty() {
            words.push(current.to_lowercase());
        }
    }
    words.join(" ")
}

fn template_prefix(template: &str) -> &str {
    template
        .split("{subject}")
        .next()
        .unwrap_or(template)
        .trim_end()
}

/// Expand one raw attribute label into a sentence.
///
/// Labels that already read as full sentences (they begin with the template
/// prefix) pass through unchanged apart from lowercasing, which makes the
/// expansion idempotent.
pub fn expand_attribute(phrase: &str, schema: &Schema, template: &str) -> Result<String> {
    let lowered = phrase.trim().to_lowercase();
    let prefix = template_prefix(template);
    if !prefix.is_empty() && lowered.starts_with(prefix) {
        return Ok(lowered);
    }
    let Some((subject, value)) = schema.get(phrase).or_else(|| schema.get(&lowered)) else {
        return Err(Error::UnmappedAttribute(phrase.to_string()));
    };
    Ok(template
        .replace("{subject}", &subject.to_lowercase())
        .replace("{value}", &value.to_lowercase()))
}

/// One parsed vocabulary file line.
#[derive(Debug, Clone)]
pub struct VocabEntry {
    pub label: String,
    pub subject: String,
    pub value: String,
    pub group: RegionHint,
}

/// Parse the line-oriented vocabulary file:
/// `raw_label<TAB>subject<TAB>value` with subject/value optional and an
/// optional trailing region-hint column (`global` or a region index).
pub fn parse_vocabulary(text: &str) -> Result<Vec<VocabEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let label = cols[0].trim();
        if label.is_empty() {
            return Err(Error::Schema(format!(
                "vocabulary line {}: empty label",
                lineno + 1
            )));
        }
        let (subject, value) = match (cols.get(1), cols.get(2)) {
            (Some(s), Some(v)) if !s.trim().is_empty() && !v.trim().is_empty() => {
                (s.trim().to_string(), v.trim().to_string())
            }
            _ => (DEFAULT_SUBJECT.to_string(), normalize_label(label)),
        };
        let group = match cols.get(3).map(|s| s.trim().to_lowercase()) {
            None => RegionHint::Global,
            Some(g) if g.is_empty() || g == "global" => RegionHint::Global,
            Some(g) => RegionHint::Region(g.parse::<usize>().map_err(|_| {
                Error::Schema(format!(
                    "vocabulary line {}: bad region hint {g:?}",
                    lineno + 1
                ))
            })?),
        };
        entries.push(VocabEntry {
            label: label.to_string(),
            subject,
            value,
            group,
        });
    }
    Ok(entries)
}

/// Build the [`AttributeSet`] from a vocabulary file and the binary training
/// label matrix (`labels[sample][attribute]`).
pub fn load_attribute_set(vocab_path: &Path, labels: &[Vec<u8>]) -> Result<AttributeSet> {
    let text = std::fs::read_to_string(vocab_path).map_err(|e| Error::Ingestion {
        path: vocab_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let entries = parse_vocabulary(&text)?;
    build_attribute_set(&entries, labels)
}

/// In-memory variant of [`load_attribute_set`].
pub fn build_attribute_set(entries: &[VocabEntry], labels: &[Vec<u8>]) -> Result<AttributeSet> {
    if labels.is_empty() {
        return Err(Error::Schema("empty training split".to_string()));
    }
    let n = entries.len();
    for (i, row) in labels.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Schema(format!(
                "label row {i} has {} columns, vocabulary has {n}",
                row.len()
            )));
        }
    }
    let mut schema = Schema::default();
    for e in entries {
        schema.insert(&e.label, &e.subject, &e.value);
    }
    let m = labels.len() as f64;
    let mut prevalence = vec![0.0; n];
    for row in labels {
        for (j, &v) in row.iter().enumerate() {
            if v != 0 {
                prevalence[j] += 1.0;
            }
        }
    }
    for p in &mut prevalence {
        *p /= m;
    }
    let expansions = entries
        .iter()
        .map(|e| expand_attribute(&e.label, &schema, CANONICAL_TEMPLATE))
        .collect::<Result<Vec<_>>>()?;
    let set = AttributeSet {
        names: entries.iter().map(|e| e.label.clone()).collect(),
        expansions,
        prevalence,
        groups: entries.iter().map(|e| e.group).collect(),
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        let mut s = Schema::default();
        s.insert("long hair", "hair", "long");
        s.insert("age31-45", "age", "31 to 45");
        s.insert("ub-TShirt", "upper body", "a t shirt");
        s
    }

    #[test]
    fn expands_paper_examples() {
        let s = schema();
        assert_eq!(
            expand_attribute("long hair", &s, CANONICAL_TEMPLATE).unwrap(),
            "a pedestrian whose hair is long"
        );
        assert_eq!(
            expand_attribute("age31-45", &s, CANONICAL_TEMPLATE).unwrap(),
            "a pedestrian whose age is 31 to 45"
        );
    }

    #[test]
    fn full_sentence_passes_through() {
        let s = schema();
        let sentence = "a pedestrian whose shoes are leather";
        assert_eq!(
            expand_attribute(sentence, &s, CANONICAL_TEMPLATE).unwrap(),
            sentence
        );
    }

    #[test]
    fn expansion_is_idempotent() {
        let s = schema();
        let once = expand_attribute("ub-TShirt", &s, CANONICAL_TEMPLATE).unwrap();
        let twice = expand_attribute(&once, &s, CANONICAL_TEMPLATE).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn unmapped_label_is_an_error() {
        let s = schema();
        let err = expand_attribute("hs-Glasses", &s, CANONICAL_TEMPLATE).unwrap_err();
        assert!(err.to_string().contains("hs-Glasses"));
    }

    #[test]
    fn normalizes_hyphen_and_camel_case() {
        assert_eq!(normalize_label("ub-TShirt"), "ub t shirt");
        assert_eq!(normalize_label("action_Gathering"), "action gathering");
        assert_eq!(normalize_label("BaldHead"), "bald head");
    }

    fn entries() -> Vec<VocabEntry> {
        parse_vocabulary("long hair\thair\tlong\nage31-45\tage\t31 to 45\nGathering\n").unwrap()
    }

    #[test]
    fn prevalence_from_label_columns() {
        let labels = vec![vec![1, 1, 1], vec![0, 1, 0], vec![0, 1, 1], vec![1, 1, 0]];
        let set = build_attribute_set(&entries(), &labels).unwrap();
        assert_eq!(set.prevalence, vec![0.5, 1.0, 0.5]);
        // Schema-less line falls back to the action subject.
        assert_eq!(set.expansions[2], "a pedestrian whose action is gathering");
    }

    #[test]
    fn empty_training_split_rejected() {
        let err = build_attribute_set(&entries(), &[]).unwrap_err();
        assert!(err.to_string().contains("empty training split"));
    }

    #[test]
    fn column_mismatch_rejected() {
        let labels = vec![vec![1, 0]];
        assert!(build_attribute_set(&entries(), &labels).is_err());
    }

    #[test]
    fn prevalence_is_order_invariant_and_conserving() {
        let labels = vec![vec![1, 0, 1], vec![0, 0, 1], vec![1, 1, 0], vec![0, 0, 0]];
        let mut shuffled = labels.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        let a = build_attribute_set(&entries(), &labels).unwrap();
        let b = build_attribute_set(&entries(), &shuffled).unwrap();
        assert_eq!(a.prevalence, b.prevalence);

        let total: f64 = a.prevalence.iter().map(|r| r * labels.len() as f64).sum();
        let positives: usize = labels.iter().flatten().filter(|&&v| v != 0).count();
        assert!((total - positives as f64).abs() < 1e-12);
    }
}
