//! Small raster helpers shared by event construction and evaluation.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::roi::BoundingBox;

/// Bilinear resize of an `H x W x C` array using half-pixel centers.
///
/// When the output size equals the input size every sample lands exactly on
/// a source pixel, so the resize is the identity.
pub fn resize_bilinear(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (in_h, in_w, c) = src.dim();
    assert!(in_h > 0 && in_w > 0, "cannot resize an empty array");
    let ys = sample_positions(in_h, out_h);
    let xs = sample_positions(in_w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - fx) + src[[y0, x1, ch]] * fx;
                let bottom = src[[y1, x0, ch]] * (1.0 - fx) + src[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_2d(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    resize_bilinear(src.insert_axis(Axis(2)), out_h, out_w).remove_axis(Axis(2))
}

/// For each output index: the two source indices and the weight of the second.
fn sample_positions(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Crops `box` out of an `H x W x C` array.
pub fn crop<'a, T>(frame: &'a ArrayView3<'a, T>, b: &BoundingBox) -> ArrayView3<'a, T> {
    frame.slice(s![b.y1..b.y2, b.x1..b.x2, ..])
}

/// Crop then resize to `h x w`; intensities stay in their input range.
pub fn crop_resize_u8(frame: ArrayView3<u8>, b: &BoundingBox, h: usize, w: usize) -> Array3<u8> {
    let patch = crop(&frame, b).mapv(f32::from);
    resize_bilinear(patch.view(), h, w).mapv(|v| v.round().clamp(0.0, 255.0) as u8)
}

pub fn crop_resize_f32(frame: ArrayView3<f32>, b: &BoundingBox, h: usize, w: usize) -> Array3<f32> {
    let patch = crop(&frame, b);
    resize_bilinear(patch, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let a = Array3::from_shape_fn((5, 7, 2), |(y, x, c)| (y * 31 + x * 7 + c) as f32 * 0.37);
        assert_eq!(resize_bilinear(a.view(), 5, 7), a);
    }

    #[test]
    fn constant_field_is_resize_invariant() {
        let a = Array3::from_elem((9, 13, 2), 2.0f32);
        let r = resize_bilinear(a.view(), 32, 32);
        assert!(r.iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn resize_stays_in_range() {
        let a = Array3::from_shape_fn((6, 4, 1), |(y, x, _)| if (x + y) % 2 == 0 { 0.0 } else { 255.0 });
        let r = resize_bilinear(a.view(), 17, 3);
        assert!(r.iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn upsampled_ramp_is_linear_inside() {
        let a = Array3::from_shape_fn((1, 4, 1), |(_, x, _)| x as f32);
        let r = resize_bilinear(a.view(), 1, 8);
        // Interior samples sit at src = (o + 0.5) / 2 - 0.5.
        for o in 1..7 {
            let expect = (o as f32 + 0.5) / 2.0 - 0.5;
            assert!((r[[0, o, 0]] - expect).abs() < 1e-6);
        }
    }
}
