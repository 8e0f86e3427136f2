//! sRGB transfer functions. Images live on disk as 8-bit sRGB and in
//! memory as linear floats in `[0, 1]`.

/// Decode one 8-bit sRGB channel to linear.
pub fn srgb_u8_to_linear(v: u8) -> f64 {
    let s = v as f64 / 255.0;
    if s <= 0.04045 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

/// Encode one linear channel to 8-bit sRGB, clamping to `[0, 1]`.
pub fn linear_to_srgb_u8(v: f64) -> u8 {
    let v = v.clamp(0.0, 1.0);
    let s = if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        assert_eq!(srgb_u8_to_linear(0), 0.0);
        assert!((srgb_u8_to_linear(255) - 1.0).abs() < 1e-12);
        assert_eq!(linear_to_srgb_u8(0.0), 0);
        assert_eq!(linear_to_srgb_u8(1.0), 255);
    }

    #[test]
    fn round_trip_is_identity_on_all_bytes() {
        for v in 0..=255u8 {
            assert_eq!(linear_to_srgb_u8(srgb_u8_to_linear(v)), v);
        }
    }

    #[test]
    fn encode_clamps_out_of_range() {
        assert_eq!(linear_to_srgb_u8(-0.5), 0);
        assert_eq!(linear_to_srgb_u8(1.5), 255);
    }

    #[test]
    fn mid_gray_reference_value() {
        // sRGB 128 decodes near 0.2159 in linear light
        assert!((srgb_u8_to_linear(128) - 0.21586).abs() < 1e-4);
    }
}
