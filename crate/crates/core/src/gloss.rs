//! Frame → GLOSS transduction in topic-comment order.

use std::fmt;

use serde::Serialize;

use crate::schema::{CsfFrame, SlotName};

/// Slot order of emitted tokens. Intent has no position and is never rendered.
pub const GLOSS_ORDER: [SlotName; 8] = [
    SlotName::Modifier,
    SlotName::Time,
    SlotName::Condition,
    SlotName::Agent,
    SlotName::Location,
    SlotName::Object,
    SlotName::Event,
    SlotName::Purpose,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct GlossSequence {
    tokens: Vec<&'static str>,
}

impl GlossSequence {
    pub fn tokens(&self) -> &[&'static str] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn render(&self) -> String {
        self.tokens.join(" ")
    }
}

impl fmt::Display for GlossSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Emits each positioned slot's label, skipping defaults (`NONE`, agent `ME`).
///
/// Frames are validated on construction, so this cannot fail.
pub fn frame_to_gloss(frame: &CsfFrame) -> GlossSequence {
    let tokens = GLOSS_ORDER
        .iter()
        .filter(|&&slot| !frame.is_default(slot))
        .map(|&slot| frame.label(slot))
        .collect();
    GlossSequence { tokens }
}

/// Structured output record: the frame and its rendered GLOSS.
#[derive(Debug, Clone, Serialize)]
pub struct GlossRecord {
    pub frame: CsfFrame,
    pub gloss: String,
}

impl GlossRecord {
    pub fn new(frame: CsfFrame) -> Self {
        let gloss = frame_to_gloss(&frame).render();
        GlossRecord { frame, gloss }
    }
}
