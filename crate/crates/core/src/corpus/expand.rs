use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::bank::{condition_variants, BankError, LanguageBank, CONDITION_PLACEHOLDER};
use super::{DatasetSplit, Lang, Sample, TemplateBank};
use crate::schema::{index_to_label, CsfFrame, SlotName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("invalid expansion parameters: {0}")]
    InvalidParams(String),
    #[error("coverage: no usable {split} variant for {condition} in language {lang}")]
    Coverage {
        lang: Lang,
        condition: &'static str,
        split: Split,
    },
    #[error("infeasible target: {split} stratum {condition}/{lang} yielded {got} of {want} distinct samples")]
    Infeasible {
        lang: Lang,
        condition: &'static str,
        split: Split,
        got: usize,
        want: usize,
    },
    #[error("text `{0}` is generated with two different frames")]
    Ambiguous(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandConfig {
    pub target_train: usize,
    pub target_val: usize,
    pub none_fraction: f64,
    pub seed: u64,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        ExpandConfig {
            target_train: 16_996,
            target_val: 1_889,
            none_fraction: 0.226,
            seed: 42,
        }
    }
}

/// Per-(condition, language) sample counts for a split of `total` samples.
///
/// NONE gets `round(total * none_fraction)` spread over the languages; the
/// rest is spread evenly over the 34 x 4 condition strata, remainders going
/// to the earliest strata.
pub fn stratum_quotas(total: usize, none_fraction: f64) -> Vec<(usize, Lang, usize)> {
    let langs = Lang::ALL.len();
    let none = (total as f64 * none_fraction).round() as usize;
    let mut out = Vec::new();
    for (i, lang) in Lang::ALL.into_iter().enumerate() {
        out.push((0, lang, none / langs + usize::from(i < none % langs)));
    }
    let rest = total - none;
    let strata = (SlotName::Condition.num_classes() - 1) * langs;
    let mut k = 0;
    for c in 1..SlotName::Condition.num_classes() {
        for lang in Lang::ALL {
            out.push((c, lang, rest / strata + usize::from(k < rest % strata)));
            k += 1;
        }
    }
    out
}

// One pattern with the eligible entry indices for each of its placeholders.
struct Layout {
    pattern: usize,
    choices: Vec<Vec<usize>>,
    size: u128,
}

fn stratum_options(bank: &LanguageBank, condition: usize, split: Split) -> Vec<Layout> {
    let mut out = Vec::new();
    for (pi, pattern) in bank.patterns.iter().enumerate() {
        let has_condition = pattern.has_placeholder(CONDITION_PLACEHOLDER);
        let pattern_ok = if condition == 0 {
            !has_condition
                && pattern.label(SlotName::Condition).unwrap_or(0) == 0
                && pattern.holdout == (split == Split::Val)
        } else {
            has_condition && (split == Split::Val || !pattern.holdout)
        };
        if !pattern_ok {
            continue;
        }
        let choices: Vec<Vec<usize>> = pattern
            .placeholders
            .iter()
            .map(|name| {
                bank.entries(name)
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| {
                        if name == CONDITION_PLACEHOLDER {
                            e.label(SlotName::Condition) == Some(condition)
                                && e.holdout == (split == Split::Val)
                        } else {
                            split == Split::Val || !e.holdout
                        }
                    })
                    .flat_map(|(i, e)| std::iter::repeat_n(i, e.weight as usize))
                    .collect()
            })
            .collect();
        let size = choices.iter().map(|c| c.len() as u128).product::<u128>();
        if size > 0 {
            out.push(Layout {
                pattern: pi,
                choices,
                size,
            });
        }
    }
    out
}

fn decode(options: &[Layout], mut index: u128) -> (usize, Vec<usize>) {
    for opt in options {
        if index < opt.size {
            let mut picks = Vec::with_capacity(opt.choices.len());
            for c in &opt.choices {
                let radix = c.len() as u128;
                picks.push(c[(index % radix) as usize]);
                index /= radix;
            }
            return (opt.pattern, picks);
        }
        index -= opt.size;
    }
    unreachable!("index within total size")
}

struct Sampler<'a> {
    rng: ChaCha8Rng,
    seen: HashMap<String, CsfFrame>,
    bank: &'a TemplateBank,
}

impl Sampler<'_> {
    fn fill(
        &mut self,
        lang: Lang,
        condition: usize,
        split: Split,
        want: usize,
        out: &mut Vec<Sample>,
    ) -> Result<(), CorpusError> {
        let condition_label = index_to_label(SlotName::Condition, condition).expect("condition index");
        let coverage = || CorpusError::Coverage {
            lang,
            condition: condition_label,
            split,
        };
        let bank = self.bank.language(lang).ok_or_else(coverage)?;
        let options = stratum_options(bank, condition, split);
        if options.is_empty() {
            return Err(coverage());
        }
        let total: u128 = options.iter().map(|o| o.size).sum();
        if total < want as u128 {
            return Err(CorpusError::Infeasible {
                lang,
                condition: condition_label,
                split,
                got: total as usize,
                want,
            });
        }
        let max_attempts = 200 * want as u64 + 10_000;
        let mut tried: HashSet<u128> = HashSet::new();
        let mut got = 0;
        let mut attempts = 0u64;
        while got < want {
            if attempts >= max_attempts || tried.len() as u128 >= total {
                return Err(CorpusError::Infeasible {
                    lang,
                    condition: condition_label,
                    split,
                    got,
                    want,
                });
            }
            attempts += 1;
            let index = self.rng.gen_range(0..total);
            if !tried.insert(index) {
                continue;
            }
            let (pattern, picks) = decode(&options, index);
            let Some((text, frame)) = bank.assemble(pattern, &picks)? else {
                continue;
            };
            if let Some(prev) = self.seen.get(&text) {
                if *prev != frame {
                    return Err(CorpusError::Ambiguous(text));
                }
                continue;
            }
            self.seen.insert(text.clone(), frame);
            out.push(Sample {
                text,
                lang,
                labels: frame,
            });
            got += 1;
        }
        Ok(())
    }
}

/// Expands the bank into stratified, deduplicated train and val splits.
///
/// Train uses no holdout pattern or entry. Val draws each non-NONE sample
/// from a holdout condition variant and each NONE sample from a holdout
/// pattern, so it measures paraphrase generalization.
pub fn expand(bank: &TemplateBank, config: &ExpandConfig) -> Result<DatasetSplit, CorpusError> {
    if config.target_train == 0 || config.target_val == 0 {
        return Err(CorpusError::InvalidParams("targets must be positive".into()));
    }
    if !(config.none_fraction > 0.0 && config.none_fraction < 1.0) {
        return Err(CorpusError::InvalidParams(format!(
            "none_fraction must lie in (0, 1), got {}",
            config.none_fraction
        )));
    }
    for lang in Lang::ALL {
        let Some(lb) = bank.language(lang) else {
            return Err(CorpusError::Coverage {
                lang,
                condition: "any condition",
                split: Split::Train,
            });
        };
        for c in 1..SlotName::Condition.num_classes() {
            let (train, holdout) = condition_variants(lb, c);
            let condition = index_to_label(SlotName::Condition, c).expect("condition index");
            if train.is_empty() || holdout.is_empty() {
                let split = if train.is_empty() { Split::Train } else { Split::Val };
                return Err(CorpusError::Coverage { lang, condition, split });
            }
        }
    }

    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        seen: HashMap::new(),
        bank,
    };
    let mut split = DatasetSplit::default();
    for (which, target) in [(Split::Train, config.target_train), (Split::Val, config.target_val)] {
        let mut samples = Vec::with_capacity(target.min(1 << 16));
        for (condition, lang, want) in stratum_quotas(target, config.none_fraction) {
            sampler.fill(lang, condition, which, want, &mut samples)?;
        }
        samples.shuffle(&mut sampler.rng);
        match which {
            Split::Train => split.train = samples,
            Split::Val => split.val = samples,
        }
    }
    Ok(split)
}
