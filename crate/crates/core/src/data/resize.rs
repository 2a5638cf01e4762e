use rayon::prelude::*;

use crate::error::{Error, Result};

use super::Volume;

/// Source coordinate and weight pairs for one output axis, using the
/// half-pixel convention and edge clamping.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of one `dims` plane to `target`, same convention as
/// [`resize_volume`].
pub(crate) fn resize_plane(src: &[f64], dims: [usize; 2], target: [usize; 2]) -> Vec<f64> {
    let ([h, w], [th, tw]) = (dims, target);
    let (rows, cols) = (axis_taps(h, th), axis_taps(w, tw));
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let (fx, fy) = (fx as f64, fy as f64);
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    out
}

/// Bilinear per-slice resize to `target = [H, W]`.
pub fn resize_volume(volume: &Volume, target: [usize; 2]) -> Result<Volume> {
    let (s, h, w) = (volume.slices(), volume.height(), volume.width());
    let [th, tw] = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid(format!("resize target {th}x{tw} must be positive")));
    }
    if (th, tw) == (h, w) {
        return Ok(volume.clone());
    }
    let (rows, cols) = (axis_taps(h, th), axis_taps(w, tw));
    let mut out = vec![0.0f32; s * th * tw];
    out.par_chunks_mut(th * tw)
        .zip(volume.data.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                    let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
                    let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
                    dst[y * tw + x] = lerp(top, bottom, fy);
                }
            }
        });
    volume.with_data(out, [s, th, tw])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Orientation;
    use crate::tensor::Tensor;

    fn vol(s: usize, h: usize, w: usize) -> Volume {
        Volume::new("r", Orientation::Axial, Tensor::seeded_uniform([s, h, w], 0.0, 1.0, 3).unwrap()).unwrap()
    }

    #[test]
    fn same_size_is_identity() {
        let v = vol(2, 256, 256);
        assert_eq!(resize_volume(&v, [256, 256]).unwrap(), v);
    }

    #[test]
    fn non_square_inputs() {
        let out = resize_volume(&vol(2, 320, 320), [256, 256]).unwrap();
        assert_eq!(out.data.dims(), &[2, 256, 256]);
        let out = resize_volume(&vol(1, 290, 300), [256, 256]).unwrap();
        assert_eq!(out.data.dims(), &[1, 256, 256]);
    }

    #[test]
    fn constants_stay_constant() {
        let v = Volume::new("c", Orientation::Axial, Tensor::full([3, 64, 64], 100.0).unwrap()).unwrap();
        let out = resize_volume(&v, [256, 256]).unwrap();
        assert!(out.data.data().iter().all(|x| *x == 100.0));
    }

    #[test]
    fn linear_ramps_are_reproduced() {
        // a ramp sampled at pixel centers stays a ramp away from the clamped border
        let data: Vec<f32> = (0..8 * 8).map(|i| (i % 8) as f32).collect();
        let v = Volume::new("r", Orientation::Axial, Tensor::from_vec([1, 8, 8], data).unwrap()).unwrap();
        let out = resize_volume(&v, [8, 16]).unwrap();
        for x in 1..14 {
            let want = (x as f32 + 0.5) * 0.5 - 0.5;
            assert!((out.data.data()[x] - want).abs() < 1e-6);
        }
        assert!(resize_volume(&v, [0, 4]).is_err());
    }
}
