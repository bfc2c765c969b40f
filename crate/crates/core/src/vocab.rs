//! Character vocabulary. Id 0 is reserved (blank for CTC, sos/eos for the
//! decoder); characters take ids `1..=len`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(chars: &str) -> Result<Self> {
        let list: Vec<char> = chars.chars().collect();
        if list.is_empty() {
            return Err(Error::Invalid("empty vocabulary".into()));
        }
        for (i, c) in list.iter().enumerate() {
            if list[..i].contains(c) {
                return Err(Error::Invalid(format!("duplicate vocabulary character {c:?}")));
            }
        }
        Ok(Vocabulary { chars: list })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.chars.iter().position(|&x| x == c).map(|p| p as u32 + 1)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                i.checked_sub(1)
                    .and_then(|k| self.chars.get(k as usize))
                    .copied()
                    .ok_or(Error::UnknownLabel(i))
            })
            .collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

impl TryFrom<String> for Vocabulary {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Vocabulary::new(&s)
    }
}

impl From<Vocabulary> for String {
    fn from(v: Vocabulary) -> String {
        v.chars.into_iter().collect()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new("abcdefgh ").expect("valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_reserved_zero() {
        let v = Vocabulary::default();
        assert_eq!(v.len(), 9);
        let ids = v.encode("ab h").unwrap();
        assert_eq!(ids, vec![1, 2, 9, 8]);
        assert_eq!(v.decode(&ids).unwrap(), "ab h");
        assert!(v.decode(&[0]).is_err());
        assert!(v.encode("z").is_err());
        assert!(Vocabulary::new("aa").is_err());
    }
}
