//! Strict extraction of `Label: N` predictions from raw completions.
//!
//! The parser is total: every input maps to either a valid label or a schema
//! violation with a reason code. Violations are scored as incorrect by the
//! metrics layer, never as a predicted class.

use serde::{Deserialize, Serialize};

const TOKEN: &str = "Label:";

/// Why a completion failed to yield a label. Variant names appear verbatim in
/// reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationReason {
    /// No `Label:` token anywhere in the text.
    NoLabelToken,
    /// Token present but never followed by digits.
    NonNumeric,
    /// A single numeric value, but outside `0..k`.
    OutOfRange,
    /// Multiple `Label:` occurrences with different numeric values.
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Valid(u32),
    SchemaViolation(ViolationReason),
}

/// Parse result plus the raw completion retained for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub outcome: Outcome,
    pub raw: String,
}

impl ParsedPrediction {
    pub fn valid_label(&self) -> Option<u32> {
        match self.outcome {
            Outcome::Valid(v) => Some(v),
            Outcome::SchemaViolation(_) => None,
        }
    }

    pub fn is_violation(&self) -> bool {
        matches!(self.outcome, Outcome::SchemaViolation(_))
    }
}

/// Parser switches. `case_insensitive` also accepts `label:` etc.; off by
/// default and recorded in run fingerprints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParserOptions {
    #[serde(default)]
    pub case_insensitive: bool,
}

/// Parses with default options: case-sensitive `Label`, zero or more spaces
/// after the colon, maximal digit run, first occurrence wins. Total over all
/// inputs and all `k >= 2`.
pub fn parse_label(raw_text: &str, k: u32) -> ParsedPrediction {
    parse_label_with(raw_text, k, ParserOptions::default())
}

pub fn parse_label_with(raw_text: &str, k: u32, opts: ParserOptions) -> ParsedPrediction {
    let mut any_token = false;
    // Normalized digit strings of every numeric occurrence, leading zeros
    // stripped so `007` and `7` agree.
    let mut values: Vec<String> = Vec::new();

    for pos in token_positions(raw_text, opts) {
        any_token = true;
        let rest = &raw_text[pos + TOKEN.len()..];
        let after_spaces = rest.trim_start_matches(' ');
        let digits: &str = {
            let end = after_spaces
                .find(|c: char| !c.is_ascii_digit())
                .unwrap_or(after_spaces.len());
            &after_spaces[..end]
        };
        if digits.is_empty() {
            continue;
        }
        let normalized = digits.trim_start_matches('0');
        values.push(if normalized.is_empty() {
            "0".to_owned()
        } else {
            normalized.to_owned()
        });
    }

    let outcome = if !any_token {
        Outcome::SchemaViolation(ViolationReason::NoLabelToken)
    } else if values.is_empty() {
        Outcome::SchemaViolation(ViolationReason::NonNumeric)
    } else if values.windows(2).any(|w| w[0] != w[1]) {
        Outcome::SchemaViolation(ViolationReason::Ambiguous)
    } else {
        match values[0].parse::<u64>() {
            Ok(v) if v < u64::from(k) => Outcome::Valid(v as u32),
            // Parse failure means the digit run exceeds u64: certainly >= k.
            _ => Outcome::SchemaViolation(ViolationReason::OutOfRange),
        }
    };

    ParsedPrediction {
        outcome,
        raw: raw_text.to_owned(),
    }
}

fn token_positions(hay: &str, opts: ParserOptions) -> Vec<usize> {
    if !opts.case_insensitive {
        return hay.match_indices(TOKEN).map(|(i, _)| i).collect();
    }
    let bytes = hay.as_bytes();
    let needle = TOKEN.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i + needle.len() <= bytes.len() {
        if bytes[i..i + needle.len()].eq_ignore_ascii_case(needle) {
            out.push(i);
            i += needle.len();
        } else {
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(s: &str, k: u32) -> Outcome {
        parse_label(s, k).outcome
    }

    #[test]
    fn plain_label_with_rationale() {
        assert_eq!(outcome("Label: 2\nBecause the text targets a group.", 3), Outcome::Valid(2));
    }

    #[test]
    fn case_sensitivity_default_and_flag() {
        assert_eq!(
            outcome("label: 2", 3),
            Outcome::SchemaViolation(ViolationReason::NoLabelToken)
        );
        let opts = ParserOptions { case_insensitive: true };
        assert_eq!(parse_label_with("label: 2", 3, opts).outcome, Outcome::Valid(2));
        assert_eq!(parse_label_with("LABEL: 1", 3, opts).outcome, Outcome::Valid(1));
    }

    #[test]
    fn out_of_range_value() {
        assert_eq!(
            outcome("Label: 7", 3),
            Outcome::SchemaViolation(ViolationReason::OutOfRange)
        );
        assert_eq!(outcome("Label: 2", 3), Outcome::Valid(2));
    }

    #[test]
    fn no_token_and_non_numeric() {
        assert_eq!(
            outcome("I think it is hateful", 2),
            Outcome::SchemaViolation(ViolationReason::NoLabelToken)
        );
        assert_eq!(
            outcome("Label: one", 2),
            Outcome::SchemaViolation(ViolationReason::NonNumeric)
        );
    }

    #[test]
    fn repeated_agreeing_occurrences_win() {
        assert_eq!(outcome("Label: 1 because ... so Label: 1", 2), Outcome::Valid(1));
        assert_eq!(outcome("Label: 007 then Label: 7", 13), Outcome::Valid(7));
    }

    #[test]
    fn conflicting_occurrences_are_ambiguous() {
        assert_eq!(
            outcome("Label: 1 hmm, actually Label: 2", 3),
            Outcome::SchemaViolation(ViolationReason::Ambiguous)
        );
        // Conflict detection precedes range checking.
        assert_eq!(
            outcome("Label: 9 or Label: 2", 3),
            Outcome::SchemaViolation(ViolationReason::Ambiguous)
        );
    }

    #[test]
    fn maximal_digit_run() {
        assert_eq!(outcome("Label: 12", 13), Outcome::Valid(12));
        assert_eq!(
            outcome("Label: 12", 3),
            Outcome::SchemaViolation(ViolationReason::OutOfRange)
        );
    }

    #[test]
    fn zero_or_more_spaces_after_colon() {
        assert_eq!(outcome("Label:3", 4), Outcome::Valid(3));
        assert_eq!(outcome("Label:   3", 4), Outcome::Valid(3));
        // A tab is not a space: the run after the colon is non-numeric.
        assert_eq!(
            outcome("Label:\t3", 4),
            Outcome::SchemaViolation(ViolationReason::NonNumeric)
        );
    }

    #[test]
    fn later_non_numeric_occurrence_is_ignored() {
        assert_eq!(outcome("Label: 1, see Label: above", 2), Outcome::Valid(1));
    }

    #[test]
    fn huge_digit_runs_are_out_of_range() {
        assert_eq!(
            outcome("Label: 99999999999999999999999999", 3),
            Outcome::SchemaViolation(ViolationReason::OutOfRange)
        );
    }

    #[test]
    fn raw_text_is_retained() {
        let p = parse_label("garbage", 2);
        assert_eq!(p.raw, "garbage");
        assert!(p.is_violation());
        assert_eq!(p.valid_label(), None);
    }

    #[test]
    fn round_trip_small_k() {
        for k in 2..=20u32 {
            for v in 0..k {
                assert_eq!(outcome(&format!("Label: {v}"), k), Outcome::Valid(v));
            }
        }
    }

    proptest! {
        // Totality: no input panics, and the result is always one of the two
        // outcome shapes with a retained raw fragment.
        #[test]
        fn parser_is_total(s in ".*", k in 2u32..500) {
            let p = parse_label(&s, k);
            prop_assert_eq!(p.raw, s);
        }

        // Appending text that carries no further label token never changes a
        // valid parse.
        #[test]
        fn prefix_stability(v in 0u32..50, k in 50u32..100, suffix in ".*") {
            prop_assume!(!suffix.to_lowercase().contains("label"));
            let base = format!("Label: {v}");
            prop_assert_eq!(outcome(&base, k), Outcome::Valid(v));
            prop_assert_eq!(outcome(&format!("{base} {suffix}"), k), Outcome::Valid(v));
        }

        // Agreeing duplicate tokens never flip a valid parse to Ambiguous.
        #[test]
        fn agreeing_duplicates_stay_valid(v in 0u32..50, k in 50u32..100, n in 1usize..4) {
            let s = vec![format!("Label: {v}"); n + 1].join(" and ");
            prop_assert_eq!(outcome(&s, k), Outcome::Valid(v));
        }
    }
}
