//! Character-level vocabulary with a handful of special tokens.

use serde::{Deserialize, Serialize};

use super::LmError;
use crate::dataset::BACKTRACK_TEXT;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const BACKTRACK: TokenId = 3;
const FIRST_CHAR: TokenId = 4;

/// Newline followed by printable ASCII.
fn alphabet() -> Vec<char> {
    std::iter::once('\n').chain((b' '..=b'~').map(char::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { chars: alphabet() }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        FIRST_CHAR as usize + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn char_id(&self, c: char) -> Option<TokenId> {
        // the alphabet is '\n' then a contiguous ASCII block
        let idx = if c == '\n' {
            0
        } else if (' '..='~').contains(&c) {
            1 + (c as u32 - ' ' as u32) as usize
        } else {
            return None;
        };
        debug_assert_eq!(self.chars[idx], c);
        Some(FIRST_CHAR + idx as TokenId)
    }

    /// Encodes text; every `<backtrack>` occurrence becomes one token.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if rest.starts_with(BACKTRACK_TEXT) {
                ids.push(BACKTRACK);
                rest = &rest[BACKTRACK_TEXT.len()..];
                continue;
            }
            ids.push(self.char_id(c).ok_or(LmError::UnknownSymbol(c))?);
            rest = &rest[c.len_utf8()..];
        }
        Ok(ids)
    }

    /// Decodes ids; `PAD`, `BOS` and `EOS` produce no text.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                BACKTRACK => s.push_str(BACKTRACK_TEXT),
                _ => {
                    if let Some(&c) = self.chars.get((id - FIRST_CHAR) as usize) {
                        s.push(c);
                    }
                }
            }
        }
        s
    }

    pub fn token_text(&self, id: TokenId) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            _ => self.decode(&[id]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn special_token_contract() {
        let v = Vocab::default();
        assert_eq!(v.encode("<backtrack>").unwrap(), vec![BACKTRACK]);
        assert_eq!(v.encode("").unwrap(), Vec::<TokenId>::new());
        assert_eq!(v.encode("1+1=2 (left: 2)\n<backtrack>").unwrap().last(), Some(&BACKTRACK));
        assert!(matches!(v.encode("é"), Err(LmError::UnknownSymbol('é'))));
        assert_eq!(v.len(), 4 + 96);
    }

    #[test]
    fn partial_special_is_plain_text() {
        let v = Vocab::default();
        let ids = v.encode("<backtr").unwrap();
        assert_eq!(ids.len(), 7);
        assert_eq!(v.decode(&ids), "<backtr");
    }

    proptest! {
        #[test]
        fn round_trip(s in "[ -~\n]{0,64}") {
            let v = Vocab::default();
            prop_assert_eq!(v.decode(&v.encode(&s).unwrap()), s);
        }
    }
}
