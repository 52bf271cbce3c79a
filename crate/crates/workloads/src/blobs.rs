//! Stand-in for per-image detection: repeated MD5 over a blob's image
//! bytes, with the final digest written into the blob's detection slot.

use md5::{Digest, Md5};

/// Leading payload bytes that hold the detection digest.
pub const SLOT: usize = 16;

/// Digest after `rounds` passes over `image`, each pass chaining the
/// previous digest in front of the image bytes.
pub fn detect(image: &[u8], rounds: u32) -> [u8; 16] {
    let mut d = [0u8; 16];
    for _ in 0..rounds {
        let mut h = Md5::new();
        h.update(d);
        h.update(image);
        d = h.finalize().into();
    }
    d
}

/// Runs detection on one blob payload in place. The slot is excluded from
/// the hashed bytes, so running twice leaves the payload unchanged.
pub fn detect_in_place(payload: &mut [u8], rounds: u32) {
    let d = detect(&payload[SLOT..], rounds);
    payload[..SLOT].copy_from_slice(&d);
}

/// Work units for one blob: bytes hashed.
pub fn work(blob_bytes: u32, rounds: u32) -> f64 {
    (blob_bytes as usize - SLOT) as f64 * rounds as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_round_is_plain_md5_with_zero_prefix() {
        let mut buf = vec![0u8; 16];
        buf.extend_from_slice(b"abc");
        let want: [u8; 16] = Md5::digest(&buf).into();
        assert_eq!(detect(b"abc", 1), want);
    }

    #[test]
    fn rounds_chain() {
        let one = detect(b"xyz", 1);
        let mut h = Md5::new();
        h.update(one);
        h.update(b"xyz");
        let two: [u8; 16] = h.finalize().into();
        assert_eq!(detect(b"xyz", 2), two);
    }

    #[test]
    fn idempotent_in_place() {
        let mut p = vec![7u8; 64];
        detect_in_place(&mut p, 3);
        let once = p.clone();
        detect_in_place(&mut p, 3);
        assert_eq!(p, once);
        assert_ne!(&once[..SLOT], &[7u8; SLOT]);
    }
}
