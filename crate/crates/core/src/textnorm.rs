//! Arabic-aware text normalization used before WER/CER scoring.
//!
//! Three modes are supported:
//!
//! * [`NormalizationMode::Orthographic`]: the raw transcript, only whitespace is canonicalized.
//! * [`NormalizationMode::Normalized`]: Latin letters and special characters removed, Arabic-Indic
//!   digits transliterated to ASCII, alef variants folded onto bare alef. Diacritics are kept.
//! * [`NormalizationMode::NormalizedNoDiacritics`]: `Normalized` followed by diacritic removal.
//!
//! Every mode collapses whitespace runs to a single ASCII space and trims both ends, so the output
//! can be tokenized by splitting on `' '`.

use std::fmt;
use std::str::FromStr;

use unicode_general_category::{get_general_category, GeneralCategory};

/// Bare alef, the target of alef folding.
pub const BARE_ALEF: char = '\u{0627}';

/// Tatweel (kashida), a purely typographic elongation mark.
pub const TATWEEL: char = '\u{0640}';

/// Alef forms that fold onto [`BARE_ALEF`]: madda, hamza above, hamza below, wasla.
pub const ALEF_VARIANTS: [char; 4] = ['\u{0622}', '\u{0623}', '\u{0625}', '\u{0671}'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormalizationMode {
    Orthographic,
    Normalized,
    NormalizedNoDiacritics,
}

impl NormalizationMode {
    pub const ALL: [NormalizationMode; 3] = [
        NormalizationMode::Orthographic,
        NormalizationMode::Normalized,
        NormalizationMode::NormalizedNoDiacritics,
    ];

    /// Short name used on the command line and in report files.
    pub fn as_str(&self) -> &'static str {
        match self {
            NormalizationMode::Orthographic => "ortho",
            NormalizationMode::Normalized => "norm",
            NormalizationMode::NormalizedNoDiacritics => "norm-nd",
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown normalization mode {0:?} (expected ortho, norm or norm-nd)")]
pub struct ParseModeError(String);

impl FromStr for NormalizationMode {
    type Err = ParseModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ortho" | "orthographic" => Ok(NormalizationMode::Orthographic),
            "norm" | "normalized" => Ok(NormalizationMode::Normalized),
            "norm-nd" | "nd" | "normalized-no-diacritics" => {
                Ok(NormalizationMode::NormalizedNoDiacritics)
            }
            other => Err(ParseModeError(other.to_string())),
        }
    }
}

impl serde::Serialize for NormalizationMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for NormalizationMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What the rule table does with a single codepoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleAction {
    Keep,
    /// Arabic harakat, tanwin, shadda, sukun and superscript alef. Only removed in the
    /// no-diacritics mode.
    DeleteDiacritic,
    DeleteLatin,
    DeleteSpecial,
    FoldAlef,
    /// Transliterate to the given ASCII digit.
    Digit(char),
    /// Collapsed to a single space.
    Whitespace,
}

impl RuleAction {
    fn label(&self) -> String {
        match self {
            RuleAction::Keep => "keep".to_string(),
            RuleAction::DeleteDiacritic => "delete-diacritic".to_string(),
            RuleAction::DeleteLatin => "delete-latin".to_string(),
            RuleAction::DeleteSpecial => "delete-special".to_string(),
            RuleAction::FoldAlef => format!("map:{:04X}", BARE_ALEF as u32),
            RuleAction::Digit(d) => format!("map:{:04X}", *d as u32),
            RuleAction::Whitespace => "whitespace".to_string(),
        }
    }
}

/// Arabic combining diacritics: U+064B..=U+065F and U+0670.
pub fn is_diacritic(c: char) -> bool {
    matches!(c, '\u{064B}'..='\u{065F}' | '\u{0670}')
}

pub fn is_alef_variant(c: char) -> bool {
    ALEF_VARIANTS.contains(&c)
}

/// Arabic-Indic (U+0660..) and Eastern Arabic-Indic (U+06F0..) digits to ASCII.
pub fn arabic_digit(c: char) -> Option<char> {
    let offset = match c {
        '\u{0660}'..='\u{0669}' => c as u32 - 0x0660,
        '\u{06F0}'..='\u{06F9}' => c as u32 - 0x06F0,
        _ => return None,
    };
    char::from_digit(offset, 10)
}

/// Letters of the Latin script, including the extended blocks and fullwidth forms.
pub fn is_latin_letter(c: char) -> bool {
    let in_latin_block = matches!(c as u32,
        0x0041..=0x005A
        | 0x0061..=0x007A
        | 0x00AA
        | 0x00BA
        | 0x00C0..=0x024F
        | 0x0250..=0x02AF
        | 0x1D00..=0x1D7F
        | 0x1D80..=0x1DBF
        | 0x1E00..=0x1EFF
        | 0x2C60..=0x2C7F
        | 0xA720..=0xA7FF
        | 0xAB30..=0xAB6F
        | 0xFB00..=0xFB06
        | 0xFF21..=0xFF3A
        | 0xFF41..=0xFF5A);
    in_latin_block && c.is_alphabetic()
}

/// Punctuation, symbols, tatweel and invisible control/format characters.
pub fn is_special(c: char) -> bool {
    if c == TATWEEL {
        return true;
    }
    if c.is_whitespace() {
        return false;
    }
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
            | MathSymbol
            | CurrencySymbol
            | ModifierSymbol
            | OtherSymbol
            | Control
            | Format
    )
}

/// The rule table. Each codepoint falls in at most one rule set; `classify` reports which.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizationRules;

impl NormalizationRules {
    pub fn classify(&self, c: char) -> RuleAction {
        if c.is_whitespace() {
            RuleAction::Whitespace
        } else if is_diacritic(c) {
            RuleAction::DeleteDiacritic
        } else if is_alef_variant(c) {
            RuleAction::FoldAlef
        } else if let Some(d) = arabic_digit(c) {
            RuleAction::Digit(d)
        } else if is_latin_letter(c) {
            RuleAction::DeleteLatin
        } else if is_special(c) {
            RuleAction::DeleteSpecial
        } else {
            RuleAction::Keep
        }
    }

    /// Writes every non-`keep` codepoint as `U+XXXX\taction`, in codepoint order.
    pub fn dump_tsv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "codepoint\taction")?;
        for cp in 0..=0x10FFFFu32 {
            let Some(c) = char::from_u32(cp) else { continue };
            let action = self.classify(c);
            if action != RuleAction::Keep {
                writeln!(out, "U+{:04X}\t{}", cp, action.label())?;
            }
        }
        Ok(())
    }
}

/// Normalizes `text` under `mode`. Total and idempotent.
pub fn normalize(text: &str, mode: NormalizationMode) -> String {
    let rules = NormalizationRules;
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    // Leading whitespace is dropped, trailing whitespace never gets flushed.
    let mut at_start = true;
    for c in text.chars() {
        let mapped = match (mode, rules.classify(c)) {
            (_, RuleAction::Whitespace) => {
                pending_space = true;
                continue;
            }
            (NormalizationMode::Orthographic, _) => c,
            (_, RuleAction::Keep) => c,
            (NormalizationMode::Normalized, RuleAction::DeleteDiacritic) => c,
            (NormalizationMode::NormalizedNoDiacritics, RuleAction::DeleteDiacritic) => continue,
            (_, RuleAction::DeleteLatin | RuleAction::DeleteSpecial) => continue,
            (_, RuleAction::FoldAlef) => BARE_ALEF,
            (_, RuleAction::Digit(d)) => d,
        };
        if pending_space && !at_start {
            out.push(' ');
        }
        pending_space = false;
        at_start = false;
        out.push(mapped);
    }
    out
}

/// Removes the diacritic set from already-normalized text, then re-canonicalizes whitespace
/// (a token made only of diacritics disappears entirely).
pub fn strip_diacritics(text: &str) -> String {
    let stripped: String = text.chars().filter(|c| !is_diacritic(*c)).collect();
    collapse_whitespace(&stripped)
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits normalized text into word tokens.
pub fn tokens(normalized: &str) -> Vec<&str> {
    if normalized.is_empty() {
        Vec::new()
    } else {
        normalized.split(' ').collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use NormalizationMode::*;

    #[test]
    fn spec_examples() {
        assert_eq!(normalize("٣ كتب", NormalizedNoDiacritics), "3 كتب");
        assert_eq!(normalize("أَهْلاً", NormalizedNoDiacritics), "اهلا");
        for m in NormalizationMode::ALL {
            assert_eq!(normalize("", m), "");
        }
        assert_eq!(normalize("hello مرحبا", Normalized), "مرحبا");
    }

    #[test]
    fn orthographic_only_touches_whitespace() {
        assert_eq!(normalize("  أَهْلاً،\t\thello\n", Orthographic), "أَهْلاً، hello");
    }

    #[test]
    fn normalized_keeps_diacritics() {
        assert_eq!(normalize("أَهْلاً", Normalized), "اَهْلاً");
    }

    #[test]
    fn eastern_digits() {
        assert_eq!(normalize("۱۲۳ و ١٢٣", Normalized), "123 و 123");
    }

    #[test]
    fn token_made_of_latin_disappears() {
        assert_eq!(normalize("كتب ABC قلم", Normalized), "كتب قلم");
    }

    #[test]
    fn rule_sets_are_disjoint() {
        for cp in 0..=0x10FFFFu32 {
            let Some(c) = char::from_u32(cp) else { continue };
            let hits = [
                c.is_whitespace(),
                is_diacritic(c),
                is_alef_variant(c),
                arabic_digit(c).is_some(),
                is_latin_letter(c),
                is_special(c),
            ]
            .iter()
            .filter(|b| **b)
            .count();
            assert!(hits <= 1, "U+{cp:04X} falls in {hits} rule sets");
        }
    }

    #[test]
    fn digit_map_is_a_bijection_per_block() {
        for base in [0x0660u32, 0x06F0] {
            let got: String = (0..10)
                .map(|i| arabic_digit(char::from_u32(base + i).unwrap()).unwrap())
                .collect();
            assert_eq!(got, "0123456789");
        }
    }

    #[test]
    fn dump_contains_every_fixed_rule() {
        let mut buf = Vec::new();
        NormalizationRules.dump_tsv(&mut buf).unwrap();
        let dump = String::from_utf8(buf).unwrap();
        assert!(dump.starts_with("codepoint\taction\n"));
        assert!(dump.contains("U+0623\tmap:0627\n"));
        assert!(dump.contains("U+0663\tmap:0033\n"));
        assert!(dump.contains("U+06F9\tmap:0039\n"));
        assert!(dump.contains("U+0640\tdelete-special\n"));
        assert!(dump.contains("U+064E\tdelete-diacritic\n"));
        assert!(dump.contains("U+0041\tdelete-latin\n"));
        assert!(!dump.contains("U+0627\t"));
    }

    fn any_mode() -> impl Strategy<Value = NormalizationMode> {
        prop_oneof![Just(Orthographic), Just(Normalized), Just(NormalizedNoDiacritics)]
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC*", m in any_mode()) {
            let once = normalize(&s, m);
            prop_assert_eq!(normalize(&once, m), once);
        }

        #[test]
        fn nd_factors_through_normalized(s in "[\\u{0600}-\\u{06FF} a-zA-Z0-9.,!\\t]*") {
            prop_assert_eq!(
                normalize(&s, NormalizedNoDiacritics),
                strip_diacritics(&normalize(&s, Normalized))
            );
        }

        #[test]
        fn token_count_never_grows(s in "\\PC*") {
            let n_in = s.split_whitespace().count();
            for m in [Normalized, NormalizedNoDiacritics] {
                let out = normalize(&s, m);
                prop_assert!(tokens(&out).len() <= n_in);
            }
        }
    }
}
