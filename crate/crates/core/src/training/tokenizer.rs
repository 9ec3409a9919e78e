/// 256 byte values plus a BOS marker.
pub const VOCAB_SIZE: usize = 257;

/// Id of the beginning-of-sequence marker.
pub const BOS: usize = 256;

/// `[BOS, b0, b1, …]`: every byte maps to its own value.
pub fn tokenize_bytes(text: &[u8]) -> Vec<usize> {
    std::iter::once(BOS).chain(text.iter().map(|&b| b as usize)).collect()
}

/// Inverse of [`tokenize_bytes`]; BOS markers are dropped.
///
/// # Panics
/// If an id is outside the vocabulary.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id != BOS)
        .map(|&id| u8::try_from(id).unwrap_or_else(|_| panic!("token id {id} is not a byte")))
        .collect()
}
