use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
/// Bytes plus the two specials.
pub const VOCAB_SIZE: usize = 258;

/// One token per byte, wrapped in `BOS … EOS`. Only ASCII is accepted.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    for (offset, &byte) in text.as_bytes().iter().enumerate() {
        if !byte.is_ascii() {
            return Err(Error::Tokenization { byte, offset });
        }
        ids.push(usize::from(byte));
    }
    ids.push(EOS);
    Ok(ids)
}

/// Inverse of [`tokenize`]; specials are dropped.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            BOS | EOS => {}
            b if b < BYTE_VOCAB => bytes.push(b as u8),
            other => return Err(Error::Contract(format!("token id {other} out of vocabulary"))),
        }
    }
    String::from_utf8(bytes).map_err(|e| Error::Contract(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_bytes() {
        assert_eq!(tokenize("").unwrap(), vec![BOS, EOS]);
        assert_eq!(tokenize("ab").unwrap(), vec![BOS, 97, 98, EOS]);
    }

    #[test]
    fn round_trip() {
        let s = "This series spans 2017-01-01 00:00:00 to 2017-01-02 23:00:00. Sampling granularity: hourly.";
        assert_eq!(detokenize(&tokenize(s).unwrap()).unwrap(), s);
    }

    #[test]
    fn non_ascii_is_rejected() {
        match tokenize("a\u{e9}").unwrap_err() {
            Error::Tokenization { byte, offset } => assert_eq!((byte, offset), (0xc3, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
