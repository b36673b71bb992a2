//! Scalar codecs: FP8 E4M3 (saturating, OCP "FN" flavour), FP4 E2M1 and the
//! E8M0 power-of-two scale byte.

/// Largest finite E4M3 magnitude.
pub const E4M3_MAX: f64 = 448.0;
/// Largest E2M1 magnitude.
pub const E2M1_MAX: f64 = 6.0;
/// Non-negative E2M1 magnitudes indexed by their 3-bit code.
pub const E2M1_VALUES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
/// E8M0 byte reserved for NaN.
pub const E8M0_INVALID: u8 = 255;

/// `2^e` for exponents inside the normal f64 range.
pub fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// `floor(log2(a))` for a positive finite normal f64.
pub fn floor_log2(a: f64) -> i32 {
    debug_assert!(a > 0.0 && a.is_normal());
    ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Round-to-nearest-even E4M3 with saturation at ±448. Results that round
/// to zero are encoded as +0.
pub fn encode_e4m3(v: f64) -> u8 {
    debug_assert!(v.is_finite());
    let a = v.abs();
    let mag: u8 = if a >= E4M3_MAX {
        0x7e
    } else if a < pow2(-6) {
        // subnormals: quantum 2^-9; m == 8 carries into the smallest normal
        (a * pow2(9)).round_ties_even() as u8
    } else {
        let mut e = floor_log2(a);
        let mut m = (a * pow2(3 - e)).round_ties_even() as i32;
        if m == 16 {
            e += 1;
            m = 8;
        }
        (((e + 7) << 3) | (m - 8)) as u8
    };
    if mag == 0 {
        0
    } else if v < 0.0 {
        mag | 0x80
    } else {
        mag
    }
}

/// `None` for the NaN encodings.
pub fn decode_e4m3(b: u8) -> Option<f64> {
    let exp = (b >> 3) & 0x0f;
    let mant = (b & 0x07) as f64;
    if exp == 0x0f && mant == 7.0 {
        return None;
    }
    let mag = if exp == 0 {
        mant * pow2(-9)
    } else {
        (8.0 + mant) * pow2(exp as i32 - 10)
    };
    Some(if b & 0x80 != 0 { -mag } else { mag })
}

/// Round-to-nearest-even E2M1 nibble (sign in bit 3) with saturation at ±6.
pub fn encode_e2m1(v: f64) -> u8 {
    debug_assert!(!v.is_nan());
    let a = v.abs();
    let mag = if a >= E2M1_MAX {
        7
    } else {
        let mut best = 0usize;
        for (i, &c) in E2M1_VALUES.iter().enumerate().skip(1) {
            let (d, db) = ((a - c).abs(), (a - E2M1_VALUES[best]).abs());
            // ties go to the even code (mantissa bit clear)
            if d < db || (d == db && i % 2 == 0) {
                best = i;
            }
        }
        best as u8
    };
    if mag == 0 {
        0
    } else if v < 0.0 {
        mag | 0x8
    } else {
        mag
    }
}

pub fn decode_e2m1(n: u8) -> f64 {
    let mag = E2M1_VALUES[(n & 0x7) as usize];
    if n & 0x8 != 0 {
        -mag
    } else {
        mag
    }
}

/// Scale exponent clamped to the E8M0 range `[-127, 127]`.
pub fn encode_e8m0(exponent: i32) -> u8 {
    (exponent.clamp(-127, 127) + 127) as u8
}

/// `None` for the reserved NaN byte.
pub fn decode_e8m0(b: u8) -> Option<i32> {
    (b != E8M0_INVALID).then_some(b as i32 - 127)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Every finite E4M3 value with its code, positive half.
    fn e4m3_table() -> Vec<(u8, f64)> {
        (0u8..0x7f).map(|b| (b, decode_e4m3(b).unwrap())).collect()
    }

    /// Nearest table entry, ties to the even code; saturates.
    fn e4m3_oracle(v: f64) -> u8 {
        let a = v.abs().min(E4M3_MAX);
        let table = e4m3_table();
        let mut best = table[0];
        for &(b, x) in &table[1..] {
            let (d, db) = ((a - x).abs(), (a - best.1).abs());
            if d < db || (d == db && b % 2 == 0) {
                best = (b, x);
            }
        }
        if best.0 != 0 && v < 0.0 {
            best.0 | 0x80
        } else {
            best.0
        }
    }

    #[test]
    fn e4m3_key_values() {
        assert_eq!(decode_e4m3(0x7e), Some(448.0));
        assert_eq!(decode_e4m3(0x7f), None);
        assert_eq!(decode_e4m3(0xff), None);
        assert_eq!(decode_e4m3(0x01), Some(pow2(-9)));
        assert_eq!(decode_e4m3(0x08), Some(pow2(-6)));
        assert_eq!(encode_e4m3(448.0), 0x7e);
        assert_eq!(encode_e4m3(1e9), 0x7e);
        assert_eq!(encode_e4m3(-1e9), 0xfe);
        assert_eq!(decode_e4m3(encode_e4m3(256.0)), Some(256.0));
        assert_eq!(encode_e4m3(-0.0), 0);
        assert_eq!(encode_e4m3(pow2(-11)), 0);
    }

    #[test]
    fn e4m3_round_trip_all_codes() {
        for (b, x) in e4m3_table() {
            assert_eq!(encode_e4m3(x), b);
            if b != 0 {
                assert_eq!(encode_e4m3(-x), b | 0x80);
            }
        }
    }

    #[test]
    fn e4m3_midpoints_round_to_even() {
        let t = e4m3_table();
        for w in t.windows(2) {
            let mid = (w[0].1 + w[1].1) / 2.0;
            let even = if w[0].0 % 2 == 0 { w[0].0 } else { w[1].0 };
            assert_eq!(encode_e4m3(mid), even, "midpoint {mid}");
        }
    }

    proptest! {
        #[test]
        fn e4m3_matches_table_oracle(v in -600.0f64..600.0, scale in -12i32..4) {
            let x = v * pow2(scale);
            prop_assert_eq!(encode_e4m3(x), e4m3_oracle(x));
        }

        #[test]
        fn e2m1_matches_definition(v in -8.0f64..8.0) {
            let n = encode_e2m1(v);
            let got = decode_e2m1(n).abs();
            let a = v.abs().min(6.0);
            let best = E2M1_VALUES.iter().map(|c| (a - c).abs()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!((a - got).abs(), best);
        }
    }

    #[test]
    fn e2m1_ties_to_even() {
        assert_eq!(decode_e2m1(encode_e2m1(2.5)), 2.0);
        assert_eq!(decode_e2m1(encode_e2m1(3.5)), 4.0);
        assert_eq!(decode_e2m1(encode_e2m1(5.0)), 4.0);
        assert_eq!(decode_e2m1(encode_e2m1(0.25)), 0.0);
        assert_eq!(decode_e2m1(encode_e2m1(0.75)), 1.0);
        assert_eq!(decode_e2m1(encode_e2m1(1.25)), 1.0);
        assert_eq!(decode_e2m1(encode_e2m1(1.75)), 2.0);
        assert_eq!(decode_e2m1(encode_e2m1(-2.5)), -2.0);
        assert_eq!(encode_e2m1(100.0), 7);
        for (i, v) in E2M1_VALUES.iter().enumerate() {
            assert_eq!(encode_e2m1(*v), i as u8);
        }
    }

    #[test]
    fn e8m0_range() {
        assert_eq!(encode_e8m0(0), 127);
        assert_eq!(encode_e8m0(-500), 0);
        assert_eq!(encode_e8m0(500), 254);
        assert_eq!(decode_e8m0(254), Some(127));
        assert_eq!(decode_e8m0(255), None);
    }
}
