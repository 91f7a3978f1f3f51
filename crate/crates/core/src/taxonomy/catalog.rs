//! Built-in registry of the moderation tasks used in the cross-task analysis,
//! with their harm-subcategory marks.
//!
//! Mask bits follow [`Subcategory::ALL`] coordinate order. `classes` is 0 for
//! binary tasks; multi-class counts not fixed by the source annotations use 3
//! as a conservative floor.

use std::collections::BTreeSet;

use super::{Distribution, Subcategory, TaskSpec};
use crate::label::LabelKind;

const ILLEGAL: u8 = 1 << 0;
const UNETHICAL: u8 = 1 << 1;
const SOCIAL: u8 = 1 << 2;
const TOXIC: u8 = 1 << 3;
const ADULT: u8 = 1 << 4;
const PRIVATE: u8 = 1 << 5;
const FALSEINFO: u8 = 1 << 6;
const MATERIALHARM: u8 = 1 << 7;
const ALL8: u8 = 0xff;

// (dataset_id, task, mark mask, classes (0 = binary), in_distribution, language)
#[rustfmt::skip]
const ROWS: &[(&str, &str, u8, u32, bool, &str)] = &[
    ("anatomy-of-online-hate", "hate", TOXIC, 14, false, "en"),
    ("big-bench-de", "gender-inclusive", SOCIAL, 0, false, "de"),
    ("big-bench-hinglish", "toxic", TOXIC, 0, false, "hi-en"),
    ("call-me-sexist", "sexism", SOCIAL, 0, false, "en"),
    ("civil-comments", "insult", TOXIC, 0, false, "en"),
    ("civil-comments", "obscenity", TOXIC, 0, false, "en"),
    ("civil-comments", "severe-toxicity", TOXIC, 0, false, "en"),
    ("civil-comments", "sexually-explicit", ADULT, 0, false, "en"),
    ("civil-comments", "threat", ILLEGAL, 0, false, "en"),
    ("civil-comments", "toxicity", TOXIC, 0, false, "en"),
    ("commonsense-morality", "ethics", UNETHICAL, 0, false, "en"),
    ("covid-hate", "hate", TOXIC | FALSEINFO, 4, false, "en"),
    ("crows-pairs", "bias", SOCIAL, 0, false, "en"),
    ("decodingtrust", "stereotype", SOCIAL, 0, false, "en"),
    ("dynahate", "hate", TOXIC, 0, false, "en"),
    ("exaggerated-safety", "safety", ILLEGAL | UNETHICAL | SOCIAL | PRIVATE, 0, false, "en"),
    ("germeval", "offensive", TOXIC, 0, false, "de"),
    ("hasoc-en", "hate-offensive", TOXIC, 0, false, "en"),
    ("hasoc-de", "hate-offensive", TOXIC, 0, false, "de"),
    ("hate-speech-and-offensive-language", "hate-offensive", TOXIC, 3, false, "en"),
    ("hate-speech-towards-foreigners", "hate", TOXIC, 3, false, "de"),
    ("hatecheck", "hate", TOXIC, 0, false, "en"),
    ("hateeval", "hate", TOXIC, 0, false, "en"),
    ("hatemojicheck", "hate", TOXIC, 0, false, "en"),
    ("hatexplain", "hate", ILLEGAL | TOXIC, 0, false, "en"),
    ("jigsaw", "identity-hate", SOCIAL | TOXIC, 0, false, "en"),
    ("jigsaw", "insult", TOXIC, 0, false, "en"),
    ("jigsaw", "obscene", TOXIC, 0, false, "en"),
    ("jigsaw", "severe-toxic", TOXIC, 0, false, "en"),
    ("jigsaw", "threat", ILLEGAL, 0, false, "en"),
    ("jigsaw", "toxic", TOXIC, 0, false, "en"),
    ("jiminy-cricket", "ethics", UNETHICAL, 3, false, "en"),
    ("korean-hate-speech", "hate", SOCIAL | TOXIC, 0, false, "ko"),
    ("korean-hate-speech", "aggressiveness", TOXIC, 3, false, "ko"),
    ("korean-hate-speech", "bias", SOCIAL, 3, false, "ko"),
    ("offcombr3", "offensive", SOCIAL | TOXIC, 0, false, "pt"),
    ("openai-cm", "harassment", UNETHICAL, 0, false, "en"),
    ("openai-cm", "hateful", ILLEGAL | TOXIC, 3, false, "en"),
    ("openai-cm", "self-harm", UNETHICAL, 0, false, "en"),
    ("openai-cm", "sexual", ADULT, 3, false, "en"),
    ("openai-cm", "violence", ILLEGAL | ADULT, 3, false, "en"),
    ("safe-rlhf", "unsafe", ALL8, 0, true, "en"),
    ("beavertails", "animal-abuse", ILLEGAL, 0, true, "en"),
    ("beavertails", "child-abuse", ILLEGAL, 0, true, "en"),
    ("beavertails", "controversial-topics-politics", FALSEINFO, 0, true, "en"),
    ("beavertails", "discrimination-stereotype", SOCIAL, 0, true, "en"),
    ("beavertails", "drug-abuse-weapons", ILLEGAL, 0, true, "en"),
    ("beavertails", "financial-property-crime", ILLEGAL, 0, true, "en"),
    ("beavertails", "hateful-offensive-language", TOXIC, 0, true, "en"),
    ("beavertails", "misinformation", ILLEGAL | UNETHICAL | FALSEINFO | MATERIALHARM, 0, true, "en"),
    ("beavertails", "non-violent-unethical-behavior", UNETHICAL, 0, true, "en"),
    ("beavertails", "privacy-violation", PRIVATE, 0, true, "en"),
    ("beavertails", "self-harm", UNETHICAL, 0, true, "en"),
    ("beavertails", "sexually-explicit", ADULT, 0, true, "en"),
    ("beavertails", "terrorism-organized-crime", ILLEGAL, 0, true, "en"),
    ("beavertails", "violence", ILLEGAL, 0, true, "en"),
    ("beavertails-eval", "unsafe", ALL8, 15, false, "en"),
    ("private", "hate", TOXIC, 0, true, "en"),
    ("private", "self-harm", UNETHICAL, 0, true, "en"),
    ("private", "sexual", ADULT, 0, true, "en"),
    ("private", "violence", ILLEGAL, 0, true, "en"),
    ("private", "jailbreak", UNETHICAL, 0, true, "en"),
    ("reddit-content-moderation", "rule-moderation", ALL8 & !MATERIALHARM, 0, false, "en"),
    ("rp-mod-rp-crowd", "offensive", ILLEGAL | SOCIAL | TOXIC | FALSEINFO, 0, false, "de"),
    ("scruples-anecdotes", "ethics", UNETHICAL, 0, false, "en"),
    ("sbic", "intentionally-offensive", TOXIC, 0, false, "en"),
    ("sbic", "potentially-offensive", TOXIC, 0, false, "en"),
    ("sbic", "sexually-offensive", TOXIC, 0, false, "en"),
    ("swad", "swear", TOXIC, 0, false, "en"),
    ("swsr", "sexism", SOCIAL, 0, false, "zh"),
    ("told-br", "offensive", SOCIAL | TOXIC, 0, false, "pt"),
    ("told-br", "homophobia", SOCIAL, 0, false, "pt"),
    ("told-br", "misogyny", SOCIAL, 0, false, "pt"),
    ("told-br", "racism", SOCIAL, 0, false, "pt"),
    ("toxigen", "toxic", TOXIC, 0, false, "en"),
    ("trustworthyllm", "safety", ILLEGAL | UNETHICAL | ADULT | PRIVATE, 0, false, "en"),
    ("tweeteval", "hate", TOXIC, 0, false, "en"),
    ("tweeteval", "irony", UNETHICAL, 0, false, "en"),
    ("tweeteval", "offensive", TOXIC, 0, false, "en"),
    ("us-election-hate", "hate", ILLEGAL | SOCIAL | TOXIC, 0, false, "en"),
    ("white-supremacist", "hate", SOCIAL | TOXIC, 0, false, "en"),
];

fn marks_from_mask(mask: u8) -> BTreeSet<Subcategory> {
    Subcategory::ALL
        .iter()
        .copied()
        .filter(|s| mask & (1 << s.bit()) != 0)
        .collect()
}

/// All built-in tasks, in table order.
pub fn tasks() -> Vec<TaskSpec> {
    ROWS.iter()
        .map(|&(dataset, task, mask, classes, in_dist, lang)| TaskSpec {
            task_id: format!("{dataset}/{task}"),
            dataset_id: dataset.to_owned(),
            label_kind: if classes == 0 {
                LabelKind::Binary
            } else {
                LabelKind::MultiClass { classes }
            },
            subcategory_marks: marks_from_mask(mask),
            distribution: if in_dist {
                Distribution::InDistribution
            } else {
                Distribution::OutOfDistribution
            },
            language_tag: lang.to_owned(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::TaskRegistry;

    #[test]
    fn catalog_size_and_uniqueness() {
        let reg = TaskRegistry::builtin();
        assert_eq!(reg.len(), 81);
        let in_dist = reg
            .tasks()
            .iter()
            .filter(|t| t.distribution == Distribution::InDistribution)
            .count();
        assert_eq!(in_dist, 20);
    }

    #[test]
    fn spot_check_marks() {
        let reg = TaskRegistry::builtin();
        let unsafe_task = reg.get("safe-rlhf/unsafe").unwrap();
        assert_eq!(unsafe_task.subcategory_marks.len(), 8);

        let hatexplain = reg.get("hatexplain/hate").unwrap();
        let marks: Vec<_> = hatexplain.subcategory_marks.iter().copied().collect();
        assert_eq!(
            marks,
            vec![
                Subcategory::IllegalActivities,
                Subcategory::ToxicLanguageHateSpeech
            ]
        );

        let reddit = reg.get("reddit-content-moderation/rule-moderation").unwrap();
        assert_eq!(reddit.subcategory_marks.len(), 7);
        assert!(!reddit.subcategory_marks.contains(
            &Subcategory::CausingMaterialHarmByDisseminatingUnverifiedInformation
        ));

        let covid = reg.get("covid-hate/hate").unwrap();
        assert!(covid
            .subcategory_marks
            .contains(&Subcategory::DisseminateFalseOrMisleadingInformation));
        assert_eq!(covid.subcategory_marks.len(), 2);
    }

    #[test]
    fn language_tags_cover_non_english_sets() {
        let reg = TaskRegistry::builtin();
        assert_eq!(reg.get("swsr/sexism").unwrap().language_tag, "zh");
        assert_eq!(reg.get("told-br/racism").unwrap().language_tag, "pt");
        assert_eq!(reg.get("hasoc-de/hate-offensive").unwrap().language_tag, "de");
        assert_eq!(
            reg.get("korean-hate-speech/bias").unwrap().language_tag,
            "ko"
        );
    }
}
