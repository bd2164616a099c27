//! Byte-level tokenization. Ids 0..=255 are raw bytes; 256 marks the start of
//! a text and only exists in models whose vocabulary is larger than 256.

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const BYTE_VOCAB: usize = 256;

pub fn encode(text: &str, add_bos: bool) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(text.len() + usize::from(add_bos));
    if add_bos {
        ids.push(BOS);
    }
    ids.extend(text.bytes().map(TokenId::from));
    ids
}

/// Drops BOS (and any other non-byte id) and decodes lossily.
pub fn decode(ids: &[TokenId]) -> String {
    String::from_utf8_lossy(&to_bytes(ids)).into_owned()
}

pub fn to_bytes(ids: &[TokenId]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| (id as usize) < BYTE_VOCAB)
        .map(|&id| id as u8)
        .collect()
}
