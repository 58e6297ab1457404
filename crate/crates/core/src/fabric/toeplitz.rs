use crate::wire::FourTuple;

pub const RSS_KEY_LEN: usize = 40;

/// Toeplitz hash over the 12-byte IPv4 four-tuple.
///
/// For every set input bit, XOR in the 32-bit window of the key that starts at
/// that bit position. The window is kept in a 64-bit register and refilled a
/// byte at a time.
pub fn toeplitz_hash(key: &[u8; RSS_KEY_LEN], tuple: &FourTuple) -> u32 {
    toeplitz_bytes(key, &tuple.rss_input())
}

pub(crate) fn toeplitz_bytes(key: &[u8; RSS_KEY_LEN], input: &[u8]) -> u32 {
    debug_assert!(input.len() + 4 <= RSS_KEY_LEN);
    let mut window = u64::from_be_bytes(key[..8].try_into().unwrap());
    let mut next = 8;
    let mut hash = 0u32;
    for &byte in input {
        for bit in 0..8 {
            if byte & (0x80 >> bit) != 0 {
                hash ^= (window >> (32 - bit)) as u32;
            }
        }
        // Slide by one byte once the top byte has been consumed.
        window <<= 8;
        if next < RSS_KEY_LEN {
            window |= key[next] as u64;
            next += 1;
        }
    }
    hash
}
