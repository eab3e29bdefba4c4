use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use super::Lang;
use crate::schema::{label_to_index, vocabulary, CsfFrame, SlotName};

/// Placeholder whose lexicon carries the condition variants.
pub const CONDITION_PLACEHOLDER: &str = "condition";

const DEFAULT_BANK: &str = include_str!("../../assets/default_bank.toml");

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([A-Za-z0-9_]+)\}").unwrap());
static MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<([A-Za-z0-9_]+)>").unwrap());
static SPACES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+").unwrap());
static SPACE_BEFORE_PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+([.,!?;:。、])").unwrap());
static FR_ELISION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(j|m|t|s|l|d|n|qu|lorsqu|puisqu)e ([aeiouyhàâäéèêëîïôöùûü])").unwrap()
});
static FR_SI_IL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(s)i (ils?)\b").unwrap());

#[derive(Debug, Error)]
pub enum BankError {
    #[error("cannot parse template bank: {0}")]
    Parse(String),
    #[error("template bank ({lang}): {message}")]
    Invalid { lang: Lang, message: String },
    #[error("template bank I/O: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(lang: Lang, message: impl Into<String>) -> BankError {
    BankError::Invalid {
        lang,
        message: message.into(),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    language: Vec<LanguageFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LanguageFile {
    lang: Lang,
    #[serde(default)]
    tables: BTreeMap<String, BTreeMap<String, String>>,
    pattern: Vec<PatternFile>,
    lexicon: BTreeMap<String, Vec<EntryFile>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternFile {
    pattern: String,
    #[serde(default)]
    frame: BTreeMap<String, String>,
    #[serde(default)]
    holdout: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    #[serde(default)]
    frame: BTreeMap<String, String>,
    text: String,
    #[serde(default)]
    features: BTreeMap<String, String>,
    #[serde(default)]
    forbid: BTreeMap<String, String>,
    #[serde(default)]
    holdout: bool,
    #[serde(default = "one")]
    weight: u32,
}

fn one() -> u32 {
    1
}

/// A lexicon entry: surface text plus the slot labels and agreement
/// features it contributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub text: String,
    pub frame: Vec<(SlotName, usize)>,
    pub features: Vec<(String, String)>,
    pub forbid: Vec<(String, String)>,
    pub holdout: bool,
    /// Relative sampling weight; an entry of weight `w` is drawn as often
    /// as `w` distinct entries.
    pub weight: u32,
}

impl Entry {
    pub fn label(&self, slot: SlotName) -> Option<usize> {
        self.frame.iter().find(|(s, _)| *s == slot).map(|(_, i)| *i)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Part {
    Lit(String),
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub source: String,
    pub placeholders: Vec<String>,
    pub frame: Vec<(SlotName, usize)>,
    pub holdout: bool,
    parts: Vec<Part>,
}

impl Pattern {
    pub fn has_placeholder(&self, name: &str) -> bool {
        self.placeholders.iter().any(|p| p == name)
    }

    pub fn label(&self, slot: SlotName) -> Option<usize> {
        self.frame.iter().find(|(s, _)| *s == slot).map(|(_, i)| *i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageBank {
    pub lang: Lang,
    pub patterns: Vec<Pattern>,
    pub lexicon: BTreeMap<String, Vec<Entry>>,
    tables: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    languages: Vec<LanguageBank>,
}

fn parse_frame(lang: Lang, raw: &BTreeMap<String, String>) -> Result<Vec<(SlotName, usize)>, BankError> {
    raw.iter()
        .map(|(slot, label)| {
            let slot: SlotName = slot.parse().map_err(|e| invalid(lang, format!("{e}")))?;
            let idx = label_to_index(slot, label).map_err(|e| invalid(lang, format!("{e}")))?;
            Ok((slot, idx))
        })
        .collect()
}

fn pairs(map: BTreeMap<String, String>) -> Vec<(String, String)> {
    map.into_iter().collect()
}

impl TemplateBank {
    /// The bank shipped with the crate.
    pub fn default_bank() -> Self {
        Self::from_toml(DEFAULT_BANK).expect("embedded template bank is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, BankError> {
        let file: BankFile = toml::from_str(text).map_err(|e| BankError::Parse(e.to_string()))?;
        let mut languages: Vec<LanguageBank> = Vec::new();
        for raw in file.language {
            let lang = raw.lang;
            if languages.iter().any(|l| l.lang == lang) {
                return Err(invalid(lang, "language defined twice"));
            }
            languages.push(LanguageBank::build(raw)?);
        }
        Ok(TemplateBank { languages })
    }

    pub fn languages(&self) -> &[LanguageBank] {
        &self.languages
    }

    pub fn language(&self, lang: Lang) -> Option<&LanguageBank> {
        self.languages.iter().find(|l| l.lang == lang)
    }

    /// Drops every section for which `keep` is false.
    pub fn retain_languages(&mut self, keep: impl Fn(Lang) -> bool) {
        self.languages.retain(|l| keep(l.lang));
    }
}

impl LanguageBank {
    fn build(raw: LanguageFile) -> Result<Self, BankError> {
        let lang = raw.lang;
        let mut lexicon = BTreeMap::new();
        for (name, entries) in raw.lexicon {
            if entries.is_empty() {
                return Err(invalid(lang, format!("lexicon `{name}` is empty")));
            }
            if entries.iter().any(|e| e.weight == 0) {
                return Err(invalid(lang, format!("lexicon `{name}` has an entry of weight 0")));
            }
            let entries = entries
                .into_iter()
                .map(|e| {
                    Ok(Entry {
                        frame: parse_frame(lang, &e.frame)?,
                        text: e.text,
                        features: pairs(e.features),
                        forbid: pairs(e.forbid),
                        holdout: e.holdout,
                        weight: e.weight,
                    })
                })
                .collect::<Result<Vec<_>, BankError>>()?;
            lexicon.insert(name, entries);
        }

        let mut patterns = Vec::new();
        for p in raw.pattern {
            let mut parts = Vec::new();
            let mut placeholders: Vec<String> = Vec::new();
            let mut last = 0;
            for cap in PLACEHOLDER.captures_iter(&p.pattern) {
                let whole = cap.get(0).unwrap();
                let name = cap[1].to_string();
                if !lexicon.contains_key(&name) {
                    return Err(invalid(lang, format!("placeholder {{{name}}} has no lexicon")));
                }
                if placeholders.contains(&name) {
                    return Err(invalid(lang, format!("placeholder {{{name}}} used twice in one pattern")));
                }
                parts.push(Part::Lit(p.pattern[last..whole.start()].to_string()));
                parts.push(Part::Slot(placeholders.len()));
                placeholders.push(name);
                last = whole.end();
            }
            parts.push(Part::Lit(p.pattern[last..].to_string()));
            patterns.push(Pattern {
                frame: parse_frame(lang, &p.frame)?,
                source: p.pattern,
                placeholders,
                holdout: p.holdout,
                parts,
            });
        }
        if patterns.is_empty() {
            return Err(invalid(lang, "no patterns"));
        }

        let bank = LanguageBank {
            lang,
            patterns,
            lexicon,
            tables: raw.tables,
        };
        bank.check_markers()?;
        Ok(bank)
    }

    fn check_markers(&self) -> Result<(), BankError> {
        let texts = self
            .patterns
            .iter()
            .map(|p| p.source.as_str())
            .chain(self.lexicon.values().flatten().map(|e| e.text.as_str()));
        for text in texts {
            for cap in MARKER.captures_iter(text) {
                if !self.tables.contains_key(&cap[1]) {
                    return Err(invalid(self.lang, format!("marker <{}> has no table", &cap[1])));
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self, placeholder: &str) -> &[Entry] {
        self.lexicon.get(placeholder).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Builds the utterance for one pattern and one entry per placeholder.
    ///
    /// Returns `Ok(None)` when the chosen entries disagree on a slot or a
    /// feature, or an entry forbids a feature value that is present.
    pub fn assemble(&self, pattern: usize, choices: &[usize]) -> Result<Option<(String, CsfFrame)>, BankError> {
        let pattern = &self.patterns[pattern];
        assert_eq!(choices.len(), pattern.placeholders.len(), "one choice per placeholder");
        let entries: Vec<&Entry> = pattern
            .placeholders
            .iter()
            .zip(choices)
            .map(|(name, &c)| &self.lexicon[name][c])
            .collect();

        let mut slots: [Option<usize>; SlotName::COUNT] = [None; SlotName::COUNT];
        let assignments = pattern.frame.iter().chain(entries.iter().flat_map(|e| e.frame.iter()));
        for &(slot, idx) in assignments {
            match slots[slot.index()] {
                Some(prev) if prev != idx => return Ok(None),
                _ => slots[slot.index()] = Some(idx),
            }
        }
        let mut features: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in entries.iter().flat_map(|e| e.features.iter()) {
            match features.get(k.as_str()) {
                Some(prev) if *prev != v.as_str() => return Ok(None),
                _ => {
                    features.insert(k, v);
                }
            }
        }
        let forbidden = entries
            .iter()
            .flat_map(|e| e.forbid.iter())
            .any(|(k, v)| features.get(k.as_str()) == Some(&v.as_str()));
        if forbidden {
            return Ok(None);
        }
        if slots[SlotName::Event.index()].is_none() {
            return Err(invalid(
                self.lang,
                format!("pattern `{}` can produce a frame without an event", pattern.source),
            ));
        }
        let mut indices = [0usize; SlotName::COUNT];
        for (i, s) in slots.iter().enumerate() {
            indices[i] = s.unwrap_or(0);
        }
        let frame = CsfFrame::from_indices(indices).expect("indices come from label lookups");

        let mut raw = String::new();
        for part in &pattern.parts {
            match part {
                Part::Lit(s) => raw.push_str(s),
                Part::Slot(i) => raw.push_str(&entries[*i].text),
            }
        }
        let text = self.resolve_markers(&raw, &features, frame.label(SlotName::Agent))?;
        Ok(Some((finalize(self.lang, &text), frame)))
    }

    /// Surface form of `entry` for `agent` using only the entry's own
    /// features; `None` when a marker needs a feature from elsewhere.
    pub fn render_entry(&self, entry: &Entry, agent: &str) -> Option<String> {
        let features: BTreeMap<&str, &str> = entry.features.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let text = self.resolve_markers(&entry.text, &features, agent).ok()?;
        Some(tidy(self.lang, &text))
    }

    /// Finds a pattern and entry choice whose utterance is exactly `text`.
    ///
    /// Entries are pre-filtered to those whose surface form (for some agent)
    /// occurs in `text`, so the search stays small for real sentences.
    pub fn generates(&self, text: &str) -> Result<Option<CsfFrame>, BankError> {
        let haystack = text.to_lowercase();
        let agents = vocabulary(SlotName::Agent).values;
        let plausible = |e: &Entry| {
            agents.iter().any(|agent| match self.render_entry(e, agent) {
                Some(s) => {
                    let s = s.to_lowercase();
                    s.is_empty() || haystack.contains(&s)
                }
                None => true,
            })
        };
        for (pi, pattern) in self.patterns.iter().enumerate() {
            let choices: Vec<Vec<usize>> = pattern
                .placeholders
                .iter()
                .map(|name| {
                    self.lexicon[name]
                        .iter()
                        .enumerate()
                        .filter(|(_, e)| plausible(e))
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect();
            if choices.iter().any(Vec::is_empty) {
                continue;
            }
            let mut odometer = vec![0usize; choices.len()];
            loop {
                let picks: Vec<usize> = odometer.iter().zip(&choices).map(|(&k, c)| c[k]).collect();
                if let Some((s, frame)) = self.assemble(pi, &picks)? {
                    if s == text {
                        return Ok(Some(frame));
                    }
                }
                let mut d = 0;
                while d < odometer.len() {
                    odometer[d] += 1;
                    if odometer[d] < choices[d].len() {
                        break;
                    }
                    odometer[d] = 0;
                    d += 1;
                }
                if d == odometer.len() {
                    break;
                }
            }
        }
        Ok(None)
    }

    fn resolve_markers(&self, raw: &str, features: &BTreeMap<&str, &str>, agent: &str) -> Result<String, BankError> {
        let vform = features.get("vform").copied();
        let tense = features.get("tense").copied();
        let motion = features.get("motion").copied();
        let mut keys: Vec<String> = Vec::with_capacity(7);
        if let Some(v) = vform {
            keys.push(format!("{v}:{agent}"));
            keys.push(v.to_string());
        }
        if let Some(t) = tense {
            keys.push(format!("{t}:{agent}"));
            keys.push(t.to_string());
        }
        if let Some(m) = motion {
            keys.push(m.to_string());
        }
        keys.push(agent.to_string());
        keys.push("*".to_string());

        let mut out = String::with_capacity(raw.len());
        let mut last = 0;
        for cap in MARKER.captures_iter(raw) {
            let whole = cap.get(0).unwrap();
            let table = &self.tables[&cap[1]];
            let value = keys.iter().find_map(|k| table.get(k)).ok_or_else(|| {
                invalid(
                    self.lang,
                    format!("marker <{}> has no form for keys {keys:?} in `{raw}`", &cap[1]),
                )
            })?;
            out.push_str(&raw[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&raw[last..]);
        Ok(out)
    }
}

fn tidy(lang: Lang, text: &str) -> String {
    let collapsed = SPACES.replace_all(text.trim(), " ");
    let mut s = SPACE_BEFORE_PUNCT.replace_all(&collapsed, "$1").into_owned();
    if lang == Lang::Fr {
        s = FR_SI_IL.replace_all(&s, "$1'$2").into_owned();
        s = FR_ELISION.replace_all(&s, "$1'$2").into_owned();
    }
    s
}

/// Whitespace, punctuation spacing, French elision and initial capital.
pub(crate) fn finalize(lang: Lang, text: &str) -> String {
    let s = tidy(lang, text);
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => s,
    }
}

/// Distinct condition labels and their variant texts per holdout flag.
pub(crate) fn condition_variants(bank: &LanguageBank, condition: usize) -> (BTreeSet<&str>, BTreeSet<&str>) {
    let mut train = BTreeSet::new();
    let mut holdout = BTreeSet::new();
    for e in bank.entries(CONDITION_PLACEHOLDER) {
        if e.label(SlotName::Condition) == Some(condition) {
            if e.holdout {
                holdout.insert(e.text.as_str());
            } else {
                train.insert(e.text.as_str());
            }
        }
    }
    (train, holdout)
}
