//! Procedural articulated figures with exact keypoint annotations.
//!
//! A figure is an elliptical body with limbs ending in keypoint discs.
//! Mirrored keypoints (flip pairs) share a colour, so telling left from right
//! requires the body orientation cue (a head marker on the body's front).

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSpec, DatasetSplit, Image, ImageSample, Keypoint, Pose};
use crate::error::{Error, Result};

const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.98, 0.55, 0.10],
    [0.55, 0.30, 0.10],
];

/// Train samples are named `train_0000`, test samples `test_0000`. All
/// samples are labeled; hide labels with
/// [`split_labeled_unlabeled`](crate::data::split_labeled_unlabeled).
pub fn generate_synthetic_dataset(
    spec: &DatasetSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    spec.validate()?;
    if n_train < 2 {
        return Err(Error::Argument(format!("n_train must be at least 2, got {n_train}")));
    }
    if spec.k < 2 {
        return Err(Error::Argument(format!("synthetic figures need K >= 2, got {}", spec.k)));
    }
    if spec.image_size < 32 {
        return Err(Error::Argument(format!(
            "synthetic figures need image_size >= 32, got {}",
            spec.image_size
        )));
    }
    let layout = Layout::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |prefix: &str, n: usize| -> Vec<ImageSample> {
        (0..n)
            .map(|i| {
                let (image, pose) = render_figure(spec.image_size, &layout, &mut rng);
                ImageSample {
                    id: format!("{prefix}_{i:04}"),
                    image: Arc::new(image),
                    pose: Some(pose),
                }
            })
            .collect()
    };
    let labeled = make("train", n_train);
    let test = make("test", n_test);
    Ok(DatasetSplit {
        spec: spec.clone(),
        labeled,
        unlabeled: Vec::new(),
        test,
        held_back: None,
    })
}

/// Body-frame limb directions and colours per keypoint. The body faces -y;
/// pair members mirror each other across the body axis.
struct Layout {
    /// (angle from the facing direction in radians, relative length, colour)
    limbs: Vec<(f64, f64, usize)>,
}

impl Layout {
    fn new(spec: &DatasetSpec) -> Self {
        let k = spec.k;
        let mut partner = vec![None; k];
        for &[a, b] in &spec.flip_pairs {
            partner[a] = Some(b);
            partner[b] = Some(a);
        }
        let mut limbs = vec![(0.0, 1.0, 0); k];
        let mut colour = 0;
        let mut pair_slot = 0usize;
        let mut axis_slot = 0usize;
        let mut done = vec![false; k];
        for i in 0..k {
            if done[i] {
                continue;
            }
            match partner[i] {
                Some(j) => {
                    // left member at -angle, right member at +angle
                    let angle = PI * (0.3 + 0.25 * (pair_slot % 3) as f64);
                    let len = 1.0 - 0.15 * (pair_slot / 3) as f64;
                    limbs[i] = (-angle, len, colour % PALETTE.len());
                    limbs[j] = (angle, len, colour % PALETTE.len());
                    done[j] = true;
                    pair_slot += 1;
                }
                None => {
                    let angle = if axis_slot % 2 == 0 { 0.0 } else { PI };
                    let len = 1.0 - 0.2 * (axis_slot / 2) as f64;
                    limbs[i] = (angle, len.max(0.4), colour % PALETTE.len());
                    axis_slot += 1;
                }
            }
            done[i] = true;
            colour += 1;
        }
        Layout { limbs }
    }
}

struct Canvas {
    img: Image,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, colour: [f32; 3], alpha: f32) {
        if alpha <= 0.0 {
            return;
        }
        let a = alpha.min(1.0);
        for (c, &v) in colour.iter().enumerate() {
            let p = self.img.at_mut(c, y, x);
            *p = *p * (1.0 - a) + v * a;
        }
    }

    /// Antialiased shape given a signed-distance-like coverage function.
    fn paint(&mut self, bbox: (f64, f64, f64, f64), colour: [f32; 3], alpha: f32, dist: impl Fn(f64, f64) -> f64) {
        let (w, h) = (self.img.width as f64, self.img.height as f64);
        let x0 = bbox.0.floor().max(0.0) as usize;
        let y0 = bbox.1.floor().max(0.0) as usize;
        let x1 = bbox.2.ceil().min(w - 1.0).max(0.0) as usize;
        let y1 = bbox.3.ceil().min(h - 1.0).max(0.0) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let cover = (0.5 - dist(x as f64, y as f64)).clamp(0.0, 1.0) as f32;
                self.blend(x, y, colour, cover * alpha);
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, colour: [f32; 3], alpha: f32) {
        let b = (cx - r - 1.0, cy - r - 1.0, cx + r + 1.0, cy + r + 1.0);
        self.paint(b, colour, alpha, |x, y| (x - cx).hypot(y - cy) - r);
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), half_width: f64, colour: [f32; 3]) {
        let pad = half_width + 1.0;
        let bbox = (a.0.min(b.0) - pad, a.1.min(b.1) - pad, a.0.max(b.0) + pad, a.1.max(b.1) + pad);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        self.paint(bbox, colour, 1.0, |x, y| {
            let t = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
            (x - a.0 - t * dx).hypot(y - a.1 - t * dy) - half_width
        });
    }

    fn ellipse(&mut self, c: (f64, f64), axes: (f64, f64), angle: f64, colour: [f32; 3]) {
        let r = axes.0.max(axes.1) + 1.0;
        let (s, co) = angle.sin_cos();
        self.paint((c.0 - r, c.1 - r, c.0 + r, c.1 + r), colour, 1.0, |x, y| {
            let (dx, dy) = (x - c.0, y - c.1);
            let (u, v) = (co * dx + s * dy, -s * dx + co * dy);
            // approximate distance: scaled radial distance times the mean axis
            let q = ((u / axes.0).powi(2) + (v / axes.1).powi(2)).sqrt();
            (q - 1.0) * axes.0.min(axes.1)
        });
    }
}

fn random_colour<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn render_figure<R: Rng>(size: usize, layout: &Layout, rng: &mut R) -> (Image, Pose) {
    let s = size as f64;
    let margin = s * 3.0 / 16.0;
    let unit = s / 32.0;

    // Rejection-sample a pose that keeps every keypoint inside the margin.
    let (centre, heading, reach, kps) = loop {
        let centre = (rng.random_range(0.35 * s..0.65 * s), rng.random_range(0.35 * s..0.65 * s));
        let heading = rng.random_range(-PI..PI);
        let reach = rng.random_range(0.22 * s..0.32 * s);
        let lens: Vec<f64> = layout.limbs.iter().map(|_| rng.random_range(0.8..1.2)).collect();
        let kps: Vec<(f64, f64)> = layout
            .limbs
            .iter()
            .zip(&lens)
            .map(|(&(a, l, _), &jit)| {
                // facing direction is -y rotated by heading
                let ang = heading + a;
                let r = reach * l * jit;
                (centre.0 + r * ang.sin(), centre.1 - r * ang.cos())
            })
            .collect();
        let inside = kps
            .iter()
            .all(|&(x, y)| x >= margin && x <= s - 1.0 - margin && y >= margin && y <= s - 1.0 - margin);
        if inside {
            break (centre, heading, reach, kps);
        }
    };

    let mut canvas = Canvas {
        img: Image::zeros(3, size, size),
    };
    // gradient background
    let (c0, c1) = (random_colour(rng, 0.05, 0.45), random_colour(rng, 0.05, 0.45));
    let g = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (g.cos(), g.sin());
    for y in 0..size {
        for x in 0..size {
            let t = (0.5 + ((x as f64 / s - 0.5) * gx + (y as f64 / s - 0.5) * gy)).clamp(0.0, 1.0) as f32;
            for c in 0..3 {
                *canvas.img.at_mut(c, y, x) = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    // distractors, mostly in keypoint colours
    for _ in 0..4 {
        let col = if rng.random_bool(0.75) {
            PALETTE[rng.random_range(0..PALETTE.len())]
        } else {
            random_colour(rng, 0.2, 0.9)
        };
        let (x, y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        canvas.disc(x, y, rng.random_range(1.0..3.0) * unit, col, rng.random_range(0.3..0.7));
    }

    let body_col = random_colour(rng, 0.55, 0.85);
    for &(x, y) in &kps {
        canvas.segment(centre, (x, y), 0.6 * unit, [body_col[0] * 0.8, body_col[1] * 0.8, body_col[2] * 0.8]);
    }
    canvas.ellipse(centre, (0.28 * reach, 0.4 * reach), heading, body_col);
    // head marker on the facing side of the body
    let head = (centre.0 + 0.4 * reach * heading.sin(), centre.1 - 0.4 * reach * heading.cos());
    canvas.disc(head.0, head.1, 1.6 * unit, [0.98, 0.98, 0.98], 1.0);
    for (&(x, y), &(_, _, col)) in kps.iter().zip(&layout.limbs) {
        canvas.disc(x, y, 1.4 * unit, PALETTE[col], 1.0);
    }
    // sensor noise
    for v in canvas.img.data.iter_mut() {
        *v = (*v + rng.random_range(-0.08f32..0.08)).clamp(0.0, 1.0);
    }

    let pose = Pose::new(kps.iter().map(|&(x, y)| Keypoint::new(x, y)).collect());
    (canvas.img, pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode, encode, CodecConfig};

    fn spec(k: usize, size: usize) -> DatasetSpec {
        DatasetSpec {
            k,
            image_size: size,
            flip_pairs: if k >= 2 { vec![[0, 1]] } else { vec![] },
            pck_reference_pair: [0, 1],
        }
    }

    #[test]
    fn counts_ids_and_visibility() {
        let d = generate_synthetic_dataset(&spec(2, 32), 20, 5, 7).unwrap();
        assert_eq!(d.labeled.len(), 20);
        assert_eq!(d.test.len(), 5);
        assert_eq!(d.labeled[3].id, "train_0003");
        assert_eq!(d.test[0].id, "test_0000");
        let margin = 32.0 * 3.0 / 16.0;
        for s in d.labeled.iter().chain(&d.test) {
            for kp in &s.pose.as_ref().unwrap().keypoints {
                assert!(kp.visible);
                assert!(kp.x >= margin && kp.x <= 31.0 - margin);
                assert!(kp.y >= margin && kp.y <= 31.0 - margin);
            }
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(&spec(4, 32), 6, 2, 3).unwrap();
        let b = generate_synthetic_dataset(&spec(4, 32), 6, 2, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&spec(4, 32), 6, 2, 4).unwrap();
        assert_ne!(a.labeled[0].image, c.labeled[0].image);
    }

    #[test]
    fn preconditions() {
        assert!(generate_synthetic_dataset(&spec(2, 32), 1, 1, 0).is_err());
        assert!(generate_synthetic_dataset(&spec(2, 16), 4, 1, 0).is_err());
    }

    #[test]
    fn keypoint_pixels_carry_their_colour() {
        let d = generate_synthetic_dataset(&spec(2, 64), 10, 0, 11).unwrap();
        for s in &d.labeled {
            for kp in &s.pose.as_ref().unwrap().keypoints {
                let (x, y) = (kp.x.round() as usize, kp.y.round() as usize);
                // red-ish disc of the first palette entry, up to noise
                assert!(s.image.at(0, y, x) > 0.7, "no disc under keypoint");
            }
        }
    }

    #[test]
    fn poses_survive_the_codec() {
        let d = generate_synthetic_dataset(&spec(3, 64), 50, 0, 5).unwrap();
        let cfg = CodecConfig {
            heatmap_size: 16,
            sigma: 1.5,
            image_size: 64,
        };
        for s in &d.labeled {
            let p = s.pose.as_ref().unwrap();
            let (hm, mask) = encode(p, &cfg);
            assert!(mask.iter().all(|&m| m));
            let (dec, _) = decode(&hm);
            for (a, b) in dec.keypoints.iter().zip(&p.keypoints) {
                assert!((a.x - b.x).abs() <= cfg.stride() && (a.y - b.y).abs() <= cfg.stride());
            }
        }
    }
}
