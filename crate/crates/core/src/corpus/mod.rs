//! Multilingual template corpus: the template bank, stratified expansion
//! into train/val splits, and the JSONL dataset format.

mod bank;
mod dataset;
mod expand;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::schema::CsfFrame;

pub use bank::{BankError, Entry, LanguageBank, Pattern, TemplateBank, CONDITION_PLACEHOLDER};
pub use dataset::{
    read_dataset, read_samples, write_dataset, write_samples, DatasetError, TRAIN_FILE, VAL_FILE,
};
pub use expand::{expand, stratum_quotas, CorpusError, ExpandConfig, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    En,
    Vi,
    Ja,
    Fr,
}

impl Lang {
    pub const ALL: [Lang; 4] = [Lang::En, Lang::Vi, Lang::Ja, Lang::Fr];

    pub fn code(self) -> &'static str {
        match self {
            Lang::En => "en",
            Lang::Vi => "vi",
            Lang::Ja => "ja",
            Lang::Fr => "fr",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Lang {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Lang::ALL
            .into_iter()
            .find(|l| l.code() == s)
            .ok_or_else(|| format!("unknown language code `{s}`"))
    }
}

/// One labelled utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Sample {
    pub text: String,
    pub lang: Lang,
    pub labels: CsfFrame,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Reference utterances with their expected GLOSS, used for smoke checks.
pub const REFERENCE_SENTENCES: [(Lang, &str, &str); 7] = [
    (Lang::En, "I go to school tomorrow.", "TOMORROW SCHOOL GO"),
    (Lang::En, "If it rains, I stay home.", "IF_RAIN HOME STAY"),
    (Lang::En, "If I'm bored, I watch Netflix.", "IF_BORED HOME STAY"),
    (Lang::En, "After work, I go home.", "IF_FINISH_WORK HOME GO"),
    (Lang::En, "If I have money, I go shopping.", "IF_HAVE_MONEY STORE BUY"),
    (Lang::Vi, "Nếu mưa thì tôi ở nhà.", "IF_RAIN HOME STAY"),
    (Lang::Fr, "Si je suis fatigué, je me repose.", "IF_TIRED HOME STAY REST"),
];
