use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::LazyLock;

use csf_core::corpus::{
    expand, read_dataset, stratum_quotas, write_dataset, CorpusError, DatasetSplit, ExpandConfig, Lang, Sample,
    TemplateBank, CONDITION_PLACEHOLDER, REFERENCE_SENTENCES,
};
use csf_core::gloss::frame_to_gloss;
use csf_core::schema::{vocabulary, SlotName};
use proptest::prelude::*;

static DEFAULT: LazyLock<DatasetSplit> =
    LazyLock::new(|| expand(&TemplateBank::default_bank(), &ExpandConfig::default()).expect("default expansion"));

fn splits() -> [(&'static str, &'static [Sample]); 2] {
    [("train", &DEFAULT.train), ("val", &DEFAULT.val)]
}

#[test]
fn default_sizes_and_none_fraction() {
    assert_eq!(DEFAULT.train.len(), 16_996);
    assert_eq!(DEFAULT.val.len(), 1_889);
    for (name, samples) in splits() {
        let none = samples.iter().filter(|s| s.labels.index(SlotName::Condition) == 0).count();
        let frac = none as f64 / samples.len() as f64;
        assert!((frac - 0.226).abs() <= 0.005, "{name}: NONE fraction {frac}");
    }
}

#[test]
fn languages_and_conditions_are_balanced() {
    for (name, samples) in splits() {
        let mut per_lang: HashMap<Lang, usize> = HashMap::new();
        let mut per_cond: BTreeMap<usize, usize> = BTreeMap::new();
        for s in samples {
            *per_lang.entry(s.lang).or_default() += 1;
            let c = s.labels.index(SlotName::Condition);
            if c != 0 {
                *per_cond.entry(c).or_default() += 1;
            }
        }
        let quarter = samples.len() as f64 / 4.0;
        for lang in Lang::ALL {
            let n = per_lang[&lang] as f64;
            assert!((n - quarter).abs() <= 0.05 * quarter, "{name}: {lang} has {n}");
        }
        let hi = *per_cond.values().max().unwrap() as f64;
        let lo = *per_cond.values().min().unwrap() as f64;
        assert!(hi / lo <= 1.5, "{name}: condition imbalance {hi}/{lo}");
    }
}

#[test]
fn every_condition_and_event_in_both_splits() {
    for (name, samples) in splits() {
        for slot in [SlotName::Condition, SlotName::Event] {
            let seen: HashSet<usize> = samples.iter().map(|s| s.labels.index(slot)).collect();
            assert_eq!(seen.len(), vocabulary(slot).len(), "{name}: {slot} coverage");
        }
    }
}

#[test]
fn stratum_counts_match_quotas() {
    for (name, samples) in splits() {
        let mut got: HashMap<(usize, Lang), usize> = HashMap::new();
        for s in samples {
            *got.entry((s.labels.index(SlotName::Condition), s.lang)).or_default() += 1;
        }
        for (c, lang, want) in stratum_quotas(samples.len(), 0.226) {
            assert_eq!(got.get(&(c, lang)).copied().unwrap_or(0), want, "{name}: {c}/{lang}");
        }
    }
}

// Lower-cased surface forms of every condition variant, split by holdout flag.
fn condition_forms(bank: &TemplateBank, lang: Lang) -> HashMap<(usize, bool), Vec<String>> {
    let lb = bank.language(lang).unwrap();
    let mut out: HashMap<(usize, bool), Vec<String>> = HashMap::new();
    for e in lb.entries(CONDITION_PLACEHOLDER) {
        let c = e.label(SlotName::Condition).unwrap();
        for agent in vocabulary(SlotName::Agent).values {
            if let Some(s) = lb.render_entry(e, agent) {
                out.entry((c, e.holdout)).or_default().push(s.to_lowercase());
            }
        }
    }
    out
}

#[test]
fn val_conditions_come_from_holdout_variants_only() {
    let bank = TemplateBank::default_bank();
    let forms: HashMap<Lang, _> = Lang::ALL.into_iter().map(|l| (l, condition_forms(&bank, l))).collect();
    for s in &DEFAULT.val {
        let c = s.labels.index(SlotName::Condition);
        if c == 0 {
            continue;
        }
        let text = s.text.to_lowercase();
        let holdout = &forms[&s.lang][&(c, true)];
        assert!(holdout.iter().any(|f| text.contains(f.as_str())), "val `{}` lacks a holdout variant", s.text);
    }
    for s in &DEFAULT.train {
        let c = s.labels.index(SlotName::Condition);
        if c == 0 {
            continue;
        }
        let text = s.text.to_lowercase();
        let holdout = &forms[&s.lang][&(c, true)];
        assert!(!holdout.iter().any(|f| text.contains(f.as_str())), "train `{}` uses a holdout variant", s.text);
    }
}

#[test]
fn splits_are_disjoint_and_unambiguous() {
    let mut seen: HashMap<&str, &Sample> = HashMap::new();
    for s in DEFAULT.train.iter().chain(&DEFAULT.val) {
        assert!(seen.insert(&s.text, s).is_none(), "duplicate text `{}`", s.text);
    }
}

#[test]
fn texts_are_clean() {
    for s in DEFAULT.train.iter().chain(&DEFAULT.val) {
        assert!(!s.text.contains(['<', '>', '{', '}']), "unresolved marker in `{}`", s.text);
        assert!(!s.text.contains("  ") && s.text.trim() == s.text, "spacing in `{}`", s.text);
        assert!(!s.text.contains(" ,") && !s.text.contains(" ."), "punctuation spacing in `{}`", s.text);
        let first = s.text.chars().next().unwrap();
        assert!(!first.is_lowercase(), "lower-case start in `{}`", s.text);
    }
}

#[test]
fn reference_sentences_are_generatable() {
    let bank = TemplateBank::default_bank();
    for (lang, text, gloss) in REFERENCE_SENTENCES {
        let frame = bank
            .language(lang)
            .unwrap()
            .generates(text)
            .unwrap()
            .unwrap_or_else(|| panic!("`{text}` is not generated by the bank"));
        assert_eq!(frame_to_gloss(&frame).render(), gloss, "{text}");
    }
}

#[test]
fn missing_language_is_a_coverage_error() {
    let mut bank = TemplateBank::default_bank();
    bank.retain_languages(|l| l != Lang::Ja);
    match expand(&bank, &ExpandConfig::default()) {
        Err(CorpusError::Coverage { lang, .. }) => assert_eq!(lang, Lang::Ja),
        other => panic!("expected coverage error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn oversized_target_is_infeasible() {
    let cfg = ExpandConfig {
        target_train: 1_000_000_000_000_000,
        ..ExpandConfig::default()
    };
    let bank = TemplateBank::default_bank();
    assert!(matches!(expand(&bank, &cfg), Err(CorpusError::Infeasible { .. })));
}

#[test]
fn dataset_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let small = DatasetSplit {
        train: DEFAULT.train[..200].to_vec(),
        val: DEFAULT.val[..50].to_vec(),
    };
    write_dataset(&small, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), small);
}

fn small(seed: u64) -> ExpandConfig {
    ExpandConfig {
        target_train: 1_200,
        target_val: 300,
        none_fraction: 0.226,
        seed,
    }
}

#[test]
fn seeded_expansion_is_deterministic() {
    let bank = TemplateBank::default_bank();
    let a = expand(&bank, &small(1)).unwrap();
    let b = expand(&bank, &small(1)).unwrap();
    let c = expand(&bank, &small(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn any_seed_meets_quotas(seed in any::<u64>(), train in 400usize..1500, val in 150usize..400) {
        let bank = TemplateBank::default_bank();
        let cfg = ExpandConfig { target_train: train, target_val: val, none_fraction: 0.226, seed };
        let split = expand(&bank, &cfg).unwrap();
        prop_assert_eq!(split.train.len(), train);
        prop_assert_eq!(split.val.len(), val);
        let texts: HashSet<&str> = split.train.iter().chain(&split.val).map(|s| s.text.as_str()).collect();
        prop_assert_eq!(texts.len(), train + val);
    }
}

#[test]
fn holdout_variants_are_not_substrings_of_train_variants() {
    let bank = TemplateBank::default_bank();
    for lang in Lang::ALL {
        let lb = bank.language(lang).unwrap();
        let entries = lb.entries(CONDITION_PLACEHOLDER);
        for h in entries.iter().filter(|e| e.holdout) {
            for t in entries.iter().filter(|e| !e.holdout) {
                for agent in vocabulary(SlotName::Agent).values {
                    if let (Some(hs), Some(ts)) = (lb.render_entry(h, agent), lb.render_entry(t, agent)) {
                        assert!(!ts.to_lowercase().contains(&hs.to_lowercase()), "{lang}: `{hs}` inside `{ts}`");
                    }
                }
            }
        }
    }
}
