//! Character-level vocabulary with three reserved ids.

use std::collections::HashMap;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const N_SPECIAL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    /// Builds a vocabulary from the given characters, dropping duplicates but keeping first-seen
    /// order.
    pub fn new<I: IntoIterator<Item = char>>(chars: I) -> Self {
        let mut symbols = Vec::new();
        let mut index = HashMap::new();
        for c in chars {
            if let std::collections::hash_map::Entry::Vacant(e) = index.entry(c) {
                e.insert((symbols.len() + N_SPECIAL) as u32);
                symbols.push(c);
            }
        }
        Self { symbols, index }
    }

    /// Space, printable ASCII and the Arabic block U+0600..=U+06FF.
    pub fn byte_level_arabic() -> Self {
        let ascii = (0x20u8..0x7F).map(char::from);
        let arabic = (0x0600u32..=0x06FF).filter_map(char::from_u32);
        Self::new(ascii.chain(arabic))
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.symbols.len() + N_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Reserved ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&i| {
                (i as usize)
                    .checked_sub(N_SPECIAL)
                    .and_then(|k| self.symbols.get(k).copied())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let v = Vocab::new("ابت ".chars());
        assert_eq!(v.len(), 7);
        let ids = v.encode("اب x");
        assert_eq!(ids, vec![3, 4, 6, UNK]);
        assert_eq!(v.decode(&[BOS, 3, 4, EOS]), "اب");
    }

    #[test]
    fn default_vocab_size() {
        assert_eq!(Vocab::byte_level_arabic().len(), 3 + 95 + 256);
    }
}
