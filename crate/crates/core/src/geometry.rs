//! Box normalization and the sinusoidal geometry embedding.

use crate::data::BoundingBox;
use crate::error::{Error, Result};

pub const GEOMETRY_DIM: usize = 256;
/// Frequencies per coordinate; each contributes a sin and a cos.
pub const FREQUENCIES: usize = 32;
pub const WAVELENGTH_BASE: f64 = 10_000.0;

/// `(x_lt/W, y_lt/H, x_rb/W, y_rb/H)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedBox(pub [f64; 4]);

pub fn normalize_box(b: &BoundingBox, width: f64, height: f64) -> Result<NormalizedBox> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(Error::Invalid(format!("image size {width}x{height} must be positive")));
    }
    b.check(width, height).map_err(Error::Invalid)?;
    Ok(NormalizedBox([
        b.x_lt / width,
        b.y_lt / height,
        b.x_rb / width,
        b.y_rb / height,
    ]))
}

/// Expands each normalized coordinate into 64 interleaved sin/cos values
/// with wavelengths `10000^(2i/64)`, concatenated in coordinate order.
pub fn sinusoidal_embed(nb: &NormalizedBox) -> [f64; GEOMETRY_DIM] {
    let block = 2 * FREQUENCIES;
    let mut out = [0.0; GEOMETRY_DIM];
    for (j, &v) in nb.0.iter().enumerate() {
        for i in 0..FREQUENCIES {
            let wavelength = WAVELENGTH_BASE.powf(2.0 * i as f64 / block as f64);
            let phase = v / wavelength;
            out[j * block + 2 * i] = phase.sin();
            out[j * block + 2 * i + 1] = phase.cos();
        }
    }
    out
}

pub fn embed_box(b: &BoundingBox, width: f64, height: f64) -> Result<[f64; GEOMETRY_DIM]> {
    Ok(sinusoidal_embed(&normalize_box(b, width, height)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_image_and_half_boxes() {
        let nb = normalize_box(&BoundingBox::new(0.0, 0.0, 640.0, 480.0), 640.0, 480.0).unwrap();
        assert_eq!(nb.0, [0.0, 0.0, 1.0, 1.0]);
        let nb = normalize_box(&BoundingBox::new(320.0, 240.0, 640.0, 480.0), 640.0, 480.0).unwrap();
        assert_eq!(nb.0, [0.5, 0.5, 1.0, 1.0]);
        assert!(normalize_box(&BoundingBox::new(0.0, 0.0, 1.0, 1.0), 0.0, 480.0).is_err());
        assert!(normalize_box(&BoundingBox::new(5.0, 0.0, 5.0, 1.0), 10.0, 10.0).is_err());
    }

    #[test]
    fn zero_coordinate_block() {
        let e = sinusoidal_embed(&NormalizedBox([0.0, 0.3, 0.5, 0.9]));
        for i in 0..FREQUENCIES {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn coordinates_are_independent_blocks() {
        let a = sinusoidal_embed(&NormalizedBox([0.1, 0.3, 0.5, 0.9]));
        let b = sinusoidal_embed(&NormalizedBox([0.2, 0.3, 0.5, 0.9]));
        assert_ne!(a[..64], b[..64]);
        assert_eq!(a[64..], b[64..]);
    }

    proptest! {
        #[test]
        fn bounded_and_separating(a in proptest::array::uniform4(0.0f64..1.0), d in proptest::array::uniform4(1e-3f64..0.5)) {
            let b = [a[0] + d[0], a[1] + d[1], a[2] + d[2], a[3] + d[3]];
            let ea = sinusoidal_embed(&NormalizedBox(a));
            let eb = sinusoidal_embed(&NormalizedBox(b));
            prop_assert!(ea.iter().all(|v| (-1.0..=1.0).contains(v)));
            let dist: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dist > 0.0);
        }
    }
}
