//! Mean-mask rendering and partition-aligned synthetic degradation.

use crate::error::{Error, Result};
use crate::partition::FramePartition;
use crate::plane::Plane8;

/// Per-pixel block means of a decoded frame, normalized to [0, 1].
/// Piecewise constant over the partition's clipped coding units.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl MeanMask {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// 8-bit rendering for inspection (the float mask is what the network
    /// consumes).
    pub fn to_plane8(&self) -> Plane8 {
        Plane8 {
            width: self.width,
            height: self.height,
            pixels: self
                .values
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

fn check_dims(decoded: &Plane8, partition: &FramePartition, what: &str) -> Result<()> {
    if decoded.width != partition.width || decoded.height != partition.height {
        return Err(Error::shape(
            what,
            format!("{}x{}", partition.width, partition.height),
            format!("{}x{}", decoded.width, decoded.height),
        ));
    }
    Ok(())
}

/// Renders the mean mask: every pixel takes the mean of its clipped CU's
/// normalized decoded pixels, in 64-bit arithmetic.
pub fn mean_mask(decoded: &Plane8, partition: &FramePartition) -> Result<MeanMask> {
    check_dims(decoded, partition, "mean_mask")?;
    let mut values = vec![0.0; decoded.width * decoded.height];
    for cu in &partition.cus {
        let (x0, y0, x1, y1) = cu.clipped(partition.width, partition.height);
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += decoded.at(x, y) as f64 / 255.0;
            }
        }
        let mean = sum / ((x1 - x0) * (y1 - y0)) as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                values[y * decoded.width + x] = mean;
            }
        }
    }
    Ok(MeanMask {
        width: decoded.width,
        height: decoded.height,
        values,
    })
}

/// Partition-aligned quantization of per-CU residuals around the CU mean:
/// pixel -> clamp(round((pixel - m) / qstep) * qstep + m, 0, 255) with m the
/// rounded CU mean. Larger qstep produces stronger blocking aligned with the
/// partition, standing in for codec loss.
pub fn synth_degrade(original: &Plane8, partition: &FramePartition, qstep: u32) -> Result<Plane8> {
    check_dims(original, partition, "synth_degrade")?;
    if qstep < 1 {
        return Err(Error::InvalidArgument("qstep must be >= 1".into()));
    }
    let q = qstep as f64;
    let mut out = original.clone();
    for cu in &partition.cus {
        let (x0, y0, x1, y1) = cu.clipped(partition.width, partition.height);
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += original.at(x, y) as f64;
            }
        }
        let m = (sum / ((x1 - x0) * (y1 - y0)) as f64).round();
        for y in y0..y1 {
            for x in x0..x1 {
                let p = original.at(x, y) as f64;
                let v = ((p - m) / q).round() * q + m;
                out.pixels[y * original.width + x] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{random_quadtree, CuSquare};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(width: usize, height: usize, seed: u64) -> Plane8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane8 {
            width,
            height,
            pixels: (0..width * height).map(|_| rng.gen()).collect(),
        }
    }

    /// Naive per-region double-loop oracle.
    fn naive_mean_mask(decoded: &Plane8, partition: &FramePartition) -> Vec<f64> {
        let mut values = vec![0.0; decoded.width * decoded.height];
        for cu in &partition.cus {
            let (x0, y0, x1, y1) = cu.clipped(partition.width, partition.height);
            let mut sum = 0.0;
            let mut count = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += decoded.at(x, y) as f64 / 255.0;
                    count += 1.0;
                }
            }
            for y in y0..y1 {
                for x in x0..x1 {
                    values[y * decoded.width + x] = sum / count;
                }
            }
        }
        values
    }

    #[test]
    fn constant_frame_gives_constant_mask() {
        let p = random_quadtree(1, 128, 64, 0.5);
        let plane = Plane8::filled(128, 64, 200);
        let mask = mean_mask(&plane, &p).unwrap();
        assert!(mask.values.iter().all(|v| (*v - 200.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn single_block_gives_global_mean() {
        let p = FramePartition {
            width: 64,
            height: 64,
            cus: vec![CuSquare { x: 0, y: 0, size: 64 }],
        };
        let plane = random_plane(64, 64, 2);
        let mask = mean_mask(&plane, &p).unwrap();
        let global = plane.mean() / 255.0;
        assert!(mask.values.iter().all(|v| (*v - global).abs() < 1e-12));
    }

    #[test]
    fn quadrant_fills() {
        let mut pixels = vec![0u8; 256];
        for y in 0..16 {
            for x in 0..16 {
                pixels[y * 16 + x] = match (x < 8, y < 8) {
                    (true, true) => 0,
                    (false, true) => 64,
                    (true, false) => 128,
                    (false, false) => 255,
                };
            }
        }
        let plane = Plane8::new(16, 16, pixels).unwrap();
        let p = FramePartition {
            width: 16,
            height: 16,
            cus: vec![
                CuSquare { x: 0, y: 0, size: 8 },
                CuSquare { x: 8, y: 0, size: 8 },
                CuSquare { x: 0, y: 8, size: 8 },
                CuSquare { x: 8, y: 8, size: 8 },
            ],
        };
        let mask = mean_mask(&plane, &p).unwrap();
        assert_eq!(mask.at(0, 0), 0.0);
        assert!((mask.at(8, 0) - 64.0 / 255.0).abs() < 1e-12);
        assert!((mask.at(0, 8) - 128.0 / 255.0).abs() < 1e-12);
        assert!((mask.at(8, 8) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_on_random_frames() {
        for seed in 0..5u64 {
            let w = 96 + 8 * (seed as usize % 4);
            let h = 72 + 8 * (seed as usize % 3);
            let part = random_quadtree(seed, w, h, 0.5);
            let plane = random_plane(w, h, 100 + seed);
            let mask = mean_mask(&plane, &part).unwrap();
            let oracle = naive_mean_mask(&plane, &part);
            assert_eq!(mask.values, oracle);
        }
    }

    #[test]
    fn mask_mean_preserves_frame_mean() {
        let part = random_quadtree(3, 120, 88, 0.4);
        let plane = random_plane(120, 88, 4);
        let mask = mean_mask(&plane, &part).unwrap();
        assert!((mask.mean() - plane.mean() / 255.0).abs() < 1e-9);
    }

    #[test]
    fn mask_is_idempotent_within_8bit_rounding() {
        let part = random_quadtree(5, 128, 96, 0.6);
        let plane = random_plane(128, 96, 6);
        let mask = mean_mask(&plane, &part).unwrap();
        let requantized = mask.to_plane8();
        let again = mean_mask(&requantized, &part).unwrap();
        for (a, b) in mask.values.iter().zip(&again.values) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let part = random_quadtree(0, 64, 64, 0.0);
        let plane = Plane8::filled(32, 32, 0);
        assert!(mean_mask(&plane, &part).is_err());
        assert!(synth_degrade(&plane, &part, 8).is_err());
    }

    #[test]
    fn qstep_one_is_lossless() {
        let part = random_quadtree(7, 96, 64, 0.5);
        let plane = random_plane(96, 64, 8);
        let out = synth_degrade(&plane, &part, 1).unwrap();
        assert_eq!(out, plane);
    }

    #[test]
    fn qstep_255_collapses_to_rounded_mean() {
        // Brute force over all 8-bit values in one CU: residuals with
        // |p - m| <= 127 round to zero under qstep 255.
        let mut pixels: Vec<u8> = (0..=255).collect();
        pixels.resize(64 * 64, 128);
        let plane = Plane8::new(64, 64, pixels).unwrap();
        let part = FramePartition {
            width: 64,
            height: 64,
            cus: vec![CuSquare { x: 0, y: 0, size: 64 }],
        };
        let m = plane.mean().round();
        let out = synth_degrade(&plane, &part, 255).unwrap();
        for (p, o) in plane.pixels.iter().zip(&out.pixels) {
            let expect = ((*p as f64 - m) / 255.0).round() * 255.0 + m;
            assert_eq!(*o as f64, expect.clamp(0.0, 255.0));
            if (*p as f64 - m).abs() <= 127.0 {
                assert_eq!(*o as f64, m);
            }
        }
    }

    #[test]
    fn stronger_qstep_is_not_less_lossy() {
        for seed in 0..4u64 {
            let part = random_quadtree(seed, 128, 64, 0.5);
            let plane = random_plane(128, 64, 50 + seed);
            let mse = |a: &Plane8, b: &Plane8| {
                a.pixels
                    .iter()
                    .zip(&b.pixels)
                    .map(|(x, y)| {
                        let d = *x as f64 - *y as f64;
                        d * d
                    })
                    .sum::<f64>()
                    / a.pixels.len() as f64
            };
            let d8 = synth_degrade(&plane, &part, 8).unwrap();
            let d32 = synth_degrade(&plane, &part, 32).unwrap();
            assert!(mse(&plane, &d32) >= mse(&plane, &d8));
        }
    }

    #[test]
    fn degradation_is_confined_to_the_changed_cu() {
        let part = random_quadtree(9, 128, 128, 0.5);
        let a = random_plane(128, 128, 10);
        let mut b = a.clone();
        // Perturb every pixel of the first CU only.
        let cu = part.cus[0];
        let (x0, y0, x1, y1) = cu.clipped(128, 128);
        for y in y0..y1 {
            for x in x0..x1 {
                b.pixels[y * 128 + x] = b.pixels[y * 128 + x].wrapping_add(37);
            }
        }
        let da = synth_degrade(&a, &part, 16).unwrap();
        let db = synth_degrade(&b, &part, 16).unwrap();
        for y in 0..128 {
            for x in 0..128 {
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                if !inside {
                    assert_eq!(da.at(x, y), db.at(x, y), "leak at ({x}, {y})");
                }
            }
        }
    }
}
