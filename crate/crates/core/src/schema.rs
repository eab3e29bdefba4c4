//! The nine-slot frame schema and its closed label vocabularies.
//!
//! Every slot has a fixed, ordered vocabulary. Index 0 is the slot's default
//! value (`NONE` for optional slots, `ME` for agent, `GO` for event, which has
//! no default). Label strings are the canonical wire form used by dataset
//! files, label maps and GLOSS output.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("unknown slot name `{0}`")]
    UnknownSlot(String),
    #[error("unknown label `{label}` for slot {slot}")]
    UnknownLabel { slot: SlotName, label: String },
    #[error("index {index} out of range for slot {slot} ({size} classes)")]
    IndexOutOfRange {
        slot: SlotName,
        index: usize,
        size: usize,
    },
}

/// One of the nine semantic slots, in canonical head order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotName {
    Event,
    Condition,
    Agent,
    Location,
    Time,
    Object,
    Intent,
    Purpose,
    Modifier,
}

impl SlotName {
    pub const ALL: [SlotName; 9] = [
        SlotName::Event,
        SlotName::Condition,
        SlotName::Agent,
        SlotName::Location,
        SlotName::Time,
        SlotName::Object,
        SlotName::Intent,
        SlotName::Purpose,
        SlotName::Modifier,
    ];

    pub const COUNT: usize = 9;

    /// Position of this slot in the canonical head order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SlotName::Event => "event",
            SlotName::Condition => "condition",
            SlotName::Agent => "agent",
            SlotName::Location => "location",
            SlotName::Time => "time",
            SlotName::Object => "object",
            SlotName::Intent => "intent",
            SlotName::Purpose => "purpose",
            SlotName::Modifier => "modifier",
        }
    }

    pub fn num_classes(self) -> usize {
        labels(self).len()
    }
}

impl fmt::Display for SlotName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SlotName {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SlotName::ALL
            .iter()
            .copied()
            .find(|slot| slot.as_str() == s)
            .ok_or_else(|| SchemaError::UnknownSlot(s.to_string()))
    }
}

const EVENT: &[&str] = &["GO", "STAY", "BUY", "WORK", "MEET", "EAT", "LEARN"];

const CONDITION: &[&str] = &[
    "NONE",
    // weather
    "IF_RAIN",
    "IF_SUNNY",
    "IF_COLD",
    "IF_HOT",
    "IF_WINDY",
    // time
    "IF_LATE",
    "IF_EARLY",
    "IF_WEEKEND",
    "IF_NIGHT",
    "IF_MORNING",
    // health
    "IF_SICK",
    "IF_TIRED",
    "IF_HUNGRY",
    "IF_THIRSTY",
    "IF_FULL",
    // schedule
    "IF_BUSY",
    "IF_FREE",
    "IF_HOLIDAY",
    "IF_WORKING",
    // mood
    "IF_BORED",
    "IF_HAPPY",
    "IF_SAD",
    "IF_STRESSED",
    "IF_ANGRY",
    // social
    "IF_ALONE",
    "IF_WITH_FRIENDS",
    "IF_WITH_FAMILY",
    // activity
    "IF_FINISH_WORK",
    "IF_FINISH_SCHOOL",
    "IF_FINISH_EATING",
    "IF_WATCH_MOVIE",
    "IF_LISTEN_MUSIC",
    // financial
    "IF_HAVE_MONEY",
    "IF_NO_MONEY",
];

const AGENT: &[&str] = &["ME", "YOU", "HE", "SHE", "THEY"];
const LOCATION: &[&str] = &["NONE", "HOME", "SCHOOL", "HOSPITAL", "OFFICE", "STORE"];
const TIME: &[&str] = &["NONE", "TODAY", "TOMORROW", "YESTERDAY", "NOW"];
const OBJECT: &[&str] = &["NONE", "FOOD", "BOOK", "MEDICINE", "THING"];
const INTENT: &[&str] = &["NONE", "PLAN", "WANT", "DECIDE"];
const PURPOSE: &[&str] = &["NONE", "REST"];
const MODIFIER: &[&str] = &["NONE", "FAST", "SLOW", "ALONE"];

fn labels(slot: SlotName) -> &'static [&'static str] {
    match slot {
        SlotName::Event => EVENT,
        SlotName::Condition => CONDITION,
        SlotName::Agent => AGENT,
        SlotName::Location => LOCATION,
        SlotName::Time => TIME,
        SlotName::Object => OBJECT,
        SlotName::Intent => INTENT,
        SlotName::Purpose => PURPOSE,
        SlotName::Modifier => MODIFIER,
    }
}

/// The ordered label set of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotVocabulary {
    pub slot: SlotName,
    pub values: &'static [&'static str],
}

impl SlotVocabulary {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The value omitted from GLOSS output, if the slot has one.
    pub fn default_label(&self) -> Option<&'static str> {
        match self.slot {
            SlotName::Event => None,
            _ => Some(self.values[0]),
        }
    }
}

pub fn vocabulary(slot: SlotName) -> SlotVocabulary {
    SlotVocabulary {
        slot,
        values: labels(slot),
    }
}

/// Class counts per head in canonical order: `[7, 35, 5, 6, 5, 5, 4, 2, 4]`.
pub fn head_class_counts() -> [usize; 9] {
    SlotName::ALL.map(SlotName::num_classes)
}

pub fn total_classes() -> usize {
    head_class_counts().iter().sum()
}

pub fn label_to_index(slot: SlotName, label: &str) -> Result<usize, SchemaError> {
    labels(slot)
        .iter()
        .position(|&l| l == label)
        .ok_or_else(|| SchemaError::UnknownLabel {
            slot,
            label: label.to_string(),
        })
}

pub fn index_to_label(slot: SlotName, index: usize) -> Result<&'static str, SchemaError> {
    let values = labels(slot);
    values
        .get(index)
        .copied()
        .ok_or(SchemaError::IndexOutOfRange {
            slot,
            index,
            size: values.len(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionCategory {
    Weather,
    Time,
    Health,
    Schedule,
    Mood,
    Social,
    Activity,
    Financial,
}

impl ConditionCategory {
    pub const ALL: [ConditionCategory; 8] = [
        ConditionCategory::Weather,
        ConditionCategory::Time,
        ConditionCategory::Health,
        ConditionCategory::Schedule,
        ConditionCategory::Mood,
        ConditionCategory::Social,
        ConditionCategory::Activity,
        ConditionCategory::Financial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionCategory::Weather => "weather",
            ConditionCategory::Time => "time",
            ConditionCategory::Health => "health",
            ConditionCategory::Schedule => "schedule",
            ConditionCategory::Mood => "mood",
            ConditionCategory::Social => "social",
            ConditionCategory::Activity => "activity",
            ConditionCategory::Financial => "financial",
        }
    }

    /// Condition labels in this category, in vocabulary order.
    pub fn members(self) -> &'static [&'static str] {
        // CONDITION is laid out category by category after NONE.
        let (start, len) = match self {
            ConditionCategory::Weather => (1, 5),
            ConditionCategory::Time => (6, 5),
            ConditionCategory::Health => (11, 5),
            ConditionCategory::Schedule => (16, 4),
            ConditionCategory::Mood => (20, 5),
            ConditionCategory::Social => (25, 3),
            ConditionCategory::Activity => (28, 5),
            ConditionCategory::Financial => (33, 2),
        };
        &CONDITION[start..start + len]
    }
}

impl fmt::Display for ConditionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Owning category of a condition label; `Ok(None)` for `NONE`.
pub fn condition_category(label: &str) -> Result<Option<ConditionCategory>, SchemaError> {
    label_to_index(SlotName::Condition, label)?;
    Ok(ConditionCategory::ALL
        .into_iter()
        .find(|cat| cat.members().contains(&label)))
}

/// A complete assignment of one label to each of the nine slots.
///
/// Stored as vocabulary indices; the all-zero frame is every slot at its
/// default (with event `GO`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct CsfFrame {
    indices: [u8; 9],
}

impl CsfFrame {
    pub fn from_indices(indices: [usize; 9]) -> Result<Self, SchemaError> {
        let mut frame = CsfFrame::default();
        for (slot, &index) in SlotName::ALL.iter().zip(indices.iter()) {
            frame.set_index(*slot, index)?;
        }
        Ok(frame)
    }

    /// Builds a frame from `(slot, label)` pairs; unnamed slots stay at their default.
    pub fn from_labels(pairs: &[(SlotName, &str)]) -> Result<Self, SchemaError> {
        let mut frame = CsfFrame::default();
        for &(slot, label) in pairs {
            frame.set(slot, label)?;
        }
        Ok(frame)
    }

    pub fn set(&mut self, slot: SlotName, label: &str) -> Result<(), SchemaError> {
        let index = label_to_index(slot, label)?;
        self.indices[slot.index()] = index as u8;
        Ok(())
    }

    pub fn set_index(&mut self, slot: SlotName, index: usize) -> Result<(), SchemaError> {
        index_to_label(slot, index)?;
        self.indices[slot.index()] = index as u8;
        Ok(())
    }

    pub fn index(&self, slot: SlotName) -> usize {
        self.indices[slot.index()] as usize
    }

    pub fn label(&self, slot: SlotName) -> &'static str {
        labels(slot)[self.index(slot)]
    }

    pub fn indices(&self) -> [usize; 9] {
        self.indices.map(|i| i as usize)
    }

    pub fn is_default(&self, slot: SlotName) -> bool {
        slot != SlotName::Event && self.index(slot) == 0
    }

    /// `(slot, label)` pairs in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (SlotName, &'static str)> + '_ {
        SlotName::ALL.iter().map(move |&slot| (slot, self.label(slot)))
    }
}

impl fmt::Display for CsfFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (slot, label)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{slot}={label}")?;
        }
        Ok(())
    }
}

// Frames serialize as a map of all nine slots in canonical order.
impl Serialize for CsfFrame {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(SlotName::COUNT))?;
        for (slot, label) in self.iter() {
            map.serialize_entry(slot.as_str(), label)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for CsfFrame {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct FrameVisitor;

        impl<'de> Visitor<'de> for FrameVisitor {
            type Value = CsfFrame;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map from the nine slot names to labels")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<CsfFrame, A::Error> {
                let mut frame = CsfFrame::default();
                let mut seen = [false; 9];
                while let Some((key, value)) = access.next_entry::<String, String>()? {
                    let slot: SlotName = key.parse().map_err(de::Error::custom)?;
                    if seen[slot.index()] {
                        return Err(de::Error::custom(format!("duplicate slot `{slot}`")));
                    }
                    seen[slot.index()] = true;
                    frame.set(slot, &value).map_err(de::Error::custom)?;
                }
                if let Some(missing) = SlotName::ALL.iter().find(|s| !seen[s.index()]) {
                    return Err(de::Error::custom(format!("missing slot `{missing}`")));
                }
                Ok(frame)
            }
        }

        deserializer.deserialize_map(FrameVisitor)
    }
}

/// The `labels.json` document: slot name → ordered label list, canonical key order.
pub fn labels_json() -> String {
    struct Labels;
    impl Serialize for Labels {
        fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
            let mut map = serializer.serialize_map(Some(SlotName::COUNT))?;
            for slot in SlotName::ALL {
                map.serialize_entry(slot.as_str(), labels(slot))?;
            }
            map.end()
        }
    }
    let mut out = serde_json::to_string_pretty(&Labels).expect("static labels serialize");
    out.push('\n');
    out
}

/// Checks that a parsed `labels.json` matches the compiled-in schema exactly.
pub fn verify_labels_json(text: &str) -> Result<(), String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let map = value.as_object().ok_or("labels.json is not an object")?;
    if map.len() != SlotName::COUNT {
        return Err(format!("expected 9 slots, found {}", map.len()));
    }
    for slot in SlotName::ALL {
        let list = map
            .get(slot.as_str())
            .and_then(|v| v.as_array())
            .ok_or_else(|| format!("missing slot `{slot}`"))?;
        let found: Vec<&str> = list.iter().filter_map(|v| v.as_str()).collect();
        if found != labels(slot) {
            return Err(format!("label list for `{slot}` differs from the schema"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_match_table() {
        assert_eq!(head_class_counts(), [7, 35, 5, 6, 5, 5, 4, 2, 4]);
        assert_eq!(total_classes(), 73);
    }

    #[test]
    fn vocabulary_examples() {
        assert_eq!(
            vocabulary(SlotName::Event).values,
            &["GO", "STAY", "BUY", "WORK", "MEET", "EAT", "LEARN"]
        );
        assert_eq!(vocabulary(SlotName::Purpose).values, &["NONE", "REST"]);
        assert_eq!(vocabulary(SlotName::Event).default_label(), None);
        assert_eq!(vocabulary(SlotName::Agent).default_label(), Some("ME"));
    }

    #[test]
    fn label_index_examples() {
        assert_eq!(label_to_index(SlotName::Condition, "NONE").unwrap(), 0);
        assert_eq!(label_to_index(SlotName::Agent, "ME").unwrap(), 0);
        assert_eq!(label_to_index(SlotName::Event, "LEARN").unwrap(), 6);
        let err = label_to_index(SlotName::Time, "LATER").unwrap_err();
        assert!(err.to_string().contains("time"));
        assert!(err.to_string().contains("LATER"));
        assert!(index_to_label(SlotName::Purpose, 2).is_err());
    }

    #[test]
    fn round_trip_every_index() {
        for slot in SlotName::ALL {
            for i in 0..slot.num_classes() {
                let label = index_to_label(slot, i).unwrap();
                assert_eq!(label_to_index(slot, label).unwrap(), i);
            }
        }
    }

    #[test]
    fn none_defaults_at_index_zero() {
        for slot in SlotName::ALL {
            let v = vocabulary(slot);
            match slot {
                SlotName::Event => assert!(!v.values.contains(&"NONE")),
                SlotName::Agent => assert_eq!(v.values[0], "ME"),
                _ => assert_eq!(v.values[0], "NONE"),
            }
        }
    }

    #[test]
    fn categories_partition_conditions() {
        let sizes: Vec<usize> = ConditionCategory::ALL
            .iter()
            .map(|c| c.members().len())
            .collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 5, 3, 5, 2]);
        let mut all: Vec<&str> = ConditionCategory::ALL
            .iter()
            .flat_map(|c| c.members().iter().copied())
            .collect();
        all.sort_unstable();
        let mut expected: Vec<&str> = CONDITION[1..].to_vec();
        expected.sort_unstable();
        assert_eq!(all, expected);
        for label in &CONDITION[1..] {
            assert!(label.starts_with("IF_"));
        }
    }

    #[test]
    fn category_lookup() {
        assert_eq!(
            condition_category("IF_RAIN").unwrap(),
            Some(ConditionCategory::Weather)
        );
        assert_eq!(
            condition_category("IF_HAVE_MONEY").unwrap(),
            Some(ConditionCategory::Financial)
        );
        assert_eq!(
            condition_category("IF_WITH_FAMILY").unwrap(),
            Some(ConditionCategory::Social)
        );
        assert_eq!(condition_category("NONE").unwrap(), None);
        assert!(condition_category("IF_SNOW").is_err());
    }

    #[test]
    fn frame_serde_uses_canonical_order() {
        let frame = CsfFrame::from_labels(&[
            (SlotName::Event, "STAY"),
            (SlotName::Condition, "IF_RAIN"),
            (SlotName::Location, "HOME"),
        ])
        .unwrap();
        let json = serde_json::to_string(&frame).unwrap();
        assert_eq!(
            json,
            r#"{"event":"STAY","condition":"IF_RAIN","agent":"ME","location":"HOME","time":"NONE","object":"NONE","intent":"NONE","purpose":"NONE","modifier":"NONE"}"#
        );
        let back: CsfFrame = serde_json::from_str(&json).unwrap();
        assert_eq!(back, frame);
    }

    #[test]
    fn frame_deserialize_rejects_bad_input() {
        let missing = r#"{"event":"GO"}"#;
        assert!(serde_json::from_str::<CsfFrame>(missing).is_err());
        let bad = r#"{"event":"NONE","condition":"NONE","agent":"ME","location":"NONE","time":"NONE","object":"NONE","intent":"NONE","purpose":"NONE","modifier":"NONE"}"#;
        assert!(serde_json::from_str::<CsfFrame>(bad).is_err());
    }

    #[test]
    fn labels_json_is_canonical() {
        let text = labels_json();
        let first = text.find("\"event\"").unwrap();
        let last = text.find("\"modifier\"").unwrap();
        assert!(first < last);
        verify_labels_json(&text).unwrap();
        assert!(verify_labels_json(&text.replace("IF_RAIN", "IF_SNOW")).is_err());
    }
}
