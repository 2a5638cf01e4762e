//! Randomized geometric augmentation.
//!
//! One transform is drawn per call and applied identically to every slice,
//! so the volume stays rigidly consistent. Flips and right-angle rotations
//! are exact index permutations; translation, scaling and small rotations
//! use bilinear sampling about the image center with zero fill.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Orientation, Volume};

/// Bound on the continuous rotation, in degrees.
pub const MAX_ROTATION: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Largest shift as a fraction of the image extent, per axis.
    pub max_translation: f64,
    /// Inclusive range of the isotropic scale factor.
    pub scale: [f64; 2],
    /// Largest continuous rotation in degrees.
    pub max_rotation: f64,
    pub flip_prob: f64,
    /// Random multiples of 90 degrees (axial and coronal, square images).
    pub right_angles: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            max_translation: 0.1,
            scale: [0.9, 1.1],
            max_rotation: MAX_ROTATION,
            flip_prob: 0.5,
            right_angles: true,
        }
    }
}

impl AugmentSpec {
    /// Draws only the identity transform.
    pub fn identity() -> Self {
        AugmentSpec {
            max_translation: 0.0,
            scale: [1.0, 1.0],
            max_rotation: 0.0,
            flip_prob: 0.0,
            right_angles: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.max_translation)
            && self.scale[0] > 0.0
            && self.scale[0] <= self.scale[1]
            && (0.0..=MAX_ROTATION).contains(&self.max_rotation)
            && (0.0..=1.0).contains(&self.flip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation spec {self:?}")))
        }
    }

    pub fn draw(&self, orientation: Orientation, square: bool, seed: u64) -> AugmentDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
        let dx = sym(self.max_translation);
        let dy = sym(self.max_translation);
        let angle = sym(self.max_rotation);
        let scale = if self.scale[0] < self.scale[1] {
            rng.random_range(self.scale[0]..=self.scale[1])
        } else {
            self.scale[0]
        };
        let flip = rng.random::<f64>() < self.flip_prob;
        let quarter_turns = if self.right_angles && square && orientation.allows_right_angles() {
            rng.random_range(0..4u8)
        } else {
            0
        };
        AugmentDraw {
            dx,
            dy,
            scale,
            angle,
            flip,
            quarter_turns,
        }
    }
}

/// One concrete transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Shift as a fraction of width and height.
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    /// Counter-clockwise, in degrees.
    pub angle: f64,
    /// Mirror left to right.
    pub flip: bool,
    /// Counter-clockwise quarter turns, applied after the flip.
    pub quarter_turns: u8,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        angle: 0.0,
        flip: false,
        quarter_turns: 0,
    };

    fn continuous_is_identity(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.scale == 1.0 && self.angle == 0.0
    }
}

fn transform_slice(src: &[f32], dst: &mut [f32], h: usize, w: usize, d: &AugmentDraw) {
    let mut cur = src.to_vec();
    if d.flip {
        for row in cur.chunks_mut(w) {
            row.reverse();
        }
    }
    for _ in 0..d.quarter_turns % 4 {
        // counter-clockwise: out[y][x] = in[x][n - 1 - y]
        let n = w;
        cur = (0..n * n).map(|i| cur[(i % n) * n + n - 1 - i / n]).collect();
    }
    if d.continuous_is_identity() {
        dst.copy_from_slice(&cur);
        return;
    }

    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (d.dx * w as f64, d.dy * h as f64);
    let (sin, cos) = d.angle.to_radians().sin_cos();
    let fetch = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            cur[y as usize * w + x as usize] as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            // invert q = s R (p - c) + c + t
            let (qx, qy) = (x as f64 - cx - tx, y as f64 - cy - ty);
            let px = (cos * qx + sin * qy) / d.scale + cx;
            let py = (-sin * qx + cos * qy) / d.scale + cy;
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = fetch(x0, y0) * (1.0 - fx) + fetch(x0 + 1, y0) * fx;
            let bottom = fetch(x0, y0 + 1) * (1.0 - fx) + fetch(x0 + 1, y0 + 1) * fx;
            dst[y * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
}

/// Applies `draw` to every slice. Quarter turns require square slices.
pub fn apply_draw(volume: &Volume, draw: &AugmentDraw) -> Result<Volume> {
    let (s, h, w) = (volume.slices(), volume.height(), volume.width());
    if draw.quarter_turns % 4 != 0 && h != w {
        return Err(Error::invalid(format!("right-angle rotation needs square slices, got {h}x{w}")));
    }
    let mut out = vec![0.0f32; s * h * w];
    out.par_chunks_mut(h * w)
        .zip(volume.data.data().par_chunks(h * w))
        .for_each(|(dst, src)| transform_slice(src, dst, h, w, draw));
    volume.with_data(out, [s, h, w])
}

/// Draws a transform from `spec` with `seed` and applies it.
pub fn augment(volume: &Volume, spec: &AugmentSpec, seed: u64) -> Result<Volume> {
    let draw = spec.draw(volume.orientation, volume.height() == volume.width(), seed);
    apply_draw(volume, &draw)
}
