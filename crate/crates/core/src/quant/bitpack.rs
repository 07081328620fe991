//! LSB-first bit packing for sub-byte weight and scale codes.
//!
//! Code `i` of width `bits` occupies bit positions `[i*bits, (i+1)*bits)`
//! of the output stream, least-significant bit of byte 0 first. Signed
//! codes are stored as `bits`-wide two's complement.

/// Packed byte length for `count` codes of `bits` width.
pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Pack unsigned codes, LSB-first. Each value must fit in `bits`.
pub fn pack_unsigned(values: &[u32], bits: u32) -> Vec<u8> {
    debug_assert!((1..=8).contains(&bits));
    let mask = (1u32 << bits) - 1;
    let mut out = vec![0u8; packed_len(values.len(), bits)];
    for (i, &v) in values.iter().enumerate() {
        debug_assert!(v <= mask, "code {v} does not fit in {bits} bits");
        let bit = i * bits as usize;
        let byte = bit / 8;
        let shift = bit % 8;
        let v = (v & mask) as u16;
        out[byte] |= (v << shift) as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (v >> (8 - shift)) as u8;
        }
    }
    out
}

/// Unpack `count` unsigned codes.
pub fn unpack_unsigned(bytes: &[u8], bits: u32, count: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(read_unsigned(bytes, bits, i));
    }
    out
}

/// Read the unsigned code at index `i`.
#[inline]
pub fn read_unsigned(bytes: &[u8], bits: u32, i: usize) -> u32 {
    let mask = (1u32 << bits) - 1;
    let bit = i * bits as usize;
    let byte = bit / 8;
    let shift = bit % 8;
    let mut v = (bytes[byte] >> shift) as u32;
    if shift + bits as usize > 8 {
        v |= (bytes[byte + 1] as u32) << (8 - shift);
    }
    v & mask
}

/// Pack signed codes as `bits`-wide two's complement.
pub fn pack_signed(values: &[i32], bits: u32) -> Vec<u8> {
    let mask = (1u32 << bits) - 1;
    let unsigned: Vec<u32> = values.iter().map(|&v| (v as u32) & mask).collect();
    pack_unsigned(&unsigned, bits)
}

/// Read the signed code at index `i`, sign-extending from `bits`.
#[inline]
pub fn read_signed(bytes: &[u8], bits: u32, i: usize) -> i32 {
    let v = read_unsigned(bytes, bits, i);
    let sign_bit = 1u32 << (bits - 1);
    if v & sign_bit != 0 {
        (v | !((1u32 << bits) - 1)) as i32
    } else {
        v as i32
    }
}

/// Unpack `count` signed codes into `out`.
#[inline]
pub fn unpack_signed_into(bytes: &[u8], bits: u32, out: &mut [i32]) {
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = read_signed(bytes, bits, i);
    }
}
