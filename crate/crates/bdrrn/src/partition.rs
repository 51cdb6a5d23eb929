//! Coding-unit partitions: BPART parsing, tiling validation, and seeded
//! random quadtree synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CTU_SIZE: usize = 64;
pub const CU_SIZES: [usize; 4] = [8, 16, 32, 64];

/// An axis-aligned square coding unit, quadtree-aligned inside its CTU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CuSquare {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl CuSquare {
    /// The part of the square that lies inside a width x height frame.
    /// Empty when the square starts outside the frame.
    pub fn clipped(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = self.x.min(width);
        let y0 = self.y.min(height);
        let x1 = (self.x + self.size).min(width);
        let y1 = (self.y + self.size).min(height);
        (x0, y0, x1, y1)
    }
}

/// A frame-covering set of coding units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePartition {
    pub width: usize,
    pub height: usize,
    pub cus: Vec<CuSquare>,
}

impl FramePartition {
    /// Checks disjointness, full coverage, size-set membership, and quadtree
    /// alignment. CUs hanging over the right/bottom border are accepted when
    /// the unclipped square is aligned.
    pub fn validate_tiling(&self) -> Result<()> {
        for cu in &self.cus {
            if !CU_SIZES.contains(&cu.size) {
                return Err(Error::PartitionTiling(format!(
                    "invalid CU size {} at ({}, {})",
                    cu.size, cu.x, cu.y
                )));
            }
            if cu.x % cu.size != 0 || cu.y % cu.size != 0 {
                return Err(Error::PartitionTiling(format!(
                    "misaligned {0}x{0} CU at ({1}, {2})",
                    cu.size, cu.x, cu.y
                )));
            }
            if cu.x >= self.width || cu.y >= self.height {
                return Err(Error::PartitionTiling(format!(
                    "CU at ({}, {}) lies outside the {}x{} frame",
                    cu.x, cu.y, self.width, self.height
                )));
            }
        }
        let mut cover = vec![0u8; self.width * self.height];
        for cu in &self.cus {
            let (x0, y0, x1, y1) = cu.clipped(self.width, self.height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let c = &mut cover[y * self.width + x];
                    if *c > 0 {
                        return Err(Error::PartitionTiling(format!(
                            "overlap at pixel ({x}, {y})"
                        )));
                    }
                    *c = 1;
                }
            }
        }
        if let Some(i) = cover.iter().position(|c| *c == 0) {
            return Err(Error::PartitionTiling(format!(
                "gap at pixel ({}, {})",
                i % self.width,
                i / self.width
            )));
        }
        Ok(())
    }
}

/// Parses a BPART stream into one partition per declared frame. Every
/// partition is validated before being returned.
///
/// Format: `BPART <version> <width> <height>`, then `frame <index>` headers
/// each followed by `cu <x> <y> <size>` lines. `#` comments, blank lines
/// ignored.
pub fn parse_partitions<R: std::io::BufRead>(reader: R) -> Result<Vec<FramePartition>> {
    let mut width = 0usize;
    let mut height = 0usize;
    let mut saw_header = false;
    let mut frames: Vec<FramePartition> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io("reading partition stream", e))?;
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => &line[..],
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let fail = |message: String| Error::PartitionParse { line: lineno, message };
        match fields[0] {
            "BPART" => {
                if saw_header {
                    return Err(fail("duplicate BPART header".into()));
                }
                if fields.len() != 4 {
                    return Err(fail("expected `BPART <version> <width> <height>`".into()));
                }
                let version: u32 = fields[1].parse().map_err(|_| fail(format!("bad version `{}`", fields[1])))?;
                if version != 1 {
                    return Err(fail(format!("unsupported BPART version {version}")));
                }
                width = fields[2].parse().map_err(|_| fail(format!("bad width `{}`", fields[2])))?;
                height = fields[3].parse().map_err(|_| fail(format!("bad height `{}`", fields[3])))?;
                if width == 0 || height == 0 {
                    return Err(fail("frame dimensions must be positive".into()));
                }
                saw_header = true;
            }
            "frame" => {
                if !saw_header {
                    return Err(fail("`frame` before BPART header".into()));
                }
                if fields.len() != 2 {
                    return Err(fail("expected `frame <index>`".into()));
                }
                let index: usize = fields[1].parse().map_err(|_| fail(format!("bad frame index `{}`", fields[1])))?;
                if index != frames.len() {
                    return Err(fail(format!(
                        "frame index {index} out of order (expected {})",
                        frames.len()
                    )));
                }
                frames.push(FramePartition {
                    width,
                    height,
                    cus: Vec::new(),
                });
            }
            "cu" => {
                if fields.len() != 4 {
                    return Err(fail("expected `cu <x> <y> <size>`".into()));
                }
                let frame = frames
                    .last_mut()
                    .ok_or_else(|| fail("`cu` before any `frame` line".into()))?;
                let x: usize = fields[1].parse().map_err(|_| fail(format!("bad x `{}`", fields[1])))?;
                let y: usize = fields[2].parse().map_err(|_| fail(format!("bad y `{}`", fields[2])))?;
                let size: usize = fields[3].parse().map_err(|_| fail(format!("bad size `{}`", fields[3])))?;
                if !CU_SIZES.contains(&size) {
                    return Err(fail(format!("unknown CU size {size} (expected 8/16/32/64)")));
                }
                frame.cus.push(CuSquare { x, y, size });
            }
            other => return Err(fail(format!("unknown directive `{other}`"))),
        }
    }

    if !saw_header {
        return Err(Error::PartitionParse {
            line: 0,
            message: "missing BPART header (dimensions unknown)".into(),
        });
    }
    for p in &frames {
        p.validate_tiling()?;
    }
    Ok(frames)
}

pub fn parse_partition_file(path: &std::path::Path) -> Result<Vec<FramePartition>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening partition file {}", path.display()), e))?;
    parse_partitions(std::io::BufReader::new(file))
}

/// Serializes partitions to the BPART text format.
pub fn write_partitions<W: std::io::Write>(
    mut w: W,
    width: usize,
    height: usize,
    frames: &[FramePartition],
) -> Result<()> {
    let werr = |e| Error::io("writing partition stream", e);
    writeln!(w, "BPART 1 {width} {height}").map_err(werr)?;
    for (i, p) in frames.iter().enumerate() {
        writeln!(w, "frame {i}").map_err(werr)?;
        for cu in &p.cus {
            writeln!(w, "cu {} {} {}", cu.x, cu.y, cu.size).map_err(werr)?;
        }
    }
    Ok(())
}

/// Deterministic random quadtree: each 64x64 CTU is recursively split with
/// `split_prob` down to size 8. The result always tiles the frame.
pub fn random_quadtree(seed: u64, width: usize, height: usize, split_prob: f64) -> FramePartition {
    assert!((0.0..=1.0).contains(&split_prob), "split_prob out of [0,1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cus = Vec::new();
    let mut y = 0;
    while y < height {
        let mut x = 0;
        while x < width {
            split_square(&mut rng, x, y, CTU_SIZE, split_prob, width, height, &mut cus);
            x += CTU_SIZE;
        }
        y += CTU_SIZE;
    }
    FramePartition { width, height, cus }
}

#[allow(clippy::too_many_arguments)]
fn split_square(
    rng: &mut ChaCha8Rng,
    x: usize,
    y: usize,
    size: usize,
    p: f64,
    width: usize,
    height: usize,
    out: &mut Vec<CuSquare>,
) {
    // Sub-squares entirely past the frame border do not exist.
    if x >= width || y >= height {
        return;
    }
    if size > 8 && rng.gen_bool(p) {
        let half = size / 2;
        split_square(rng, x, y, half, p, width, height, out);
        split_square(rng, x + half, y, half, p, width, height, out);
        split_square(rng, x, y + half, half, p, width, height, out);
        split_square(rng, x + half, y + half, half, p, width, height, out);
    } else {
        out.push(CuSquare { x, y, size });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<Vec<FramePartition>> {
        parse_partitions(Cursor::new(text))
    }

    #[test]
    fn smallest_file() {
        let frames = parse("BPART 1 64 64\nframe 0\ncu 0 0 64\n").unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].cus, vec![CuSquare { x: 0, y: 0, size: 64 }]);
    }

    #[test]
    fn one_quadtree_split() {
        let frames = parse(
            "BPART 1 64 64\nframe 0\ncu 0 0 32\ncu 32 0 32\ncu 0 32 32\ncu 32 32 32\n",
        )
        .unwrap();
        assert_eq!(frames[0].cus.len(), 4);
    }

    #[test]
    fn invalid_size_names_line() {
        let err = parse("BPART 1 64 64\nframe 0\ncu 0 0 48\n").unwrap_err();
        match err {
            Error::PartitionParse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("48"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let frames = parse(
            "# partition dump\nBPART 1 64 64\n\nframe 0 # first frame\ncu 0 0 64\n",
        )
        .unwrap();
        assert_eq!(frames.len(), 1);
    }

    #[test]
    fn missing_header_is_error() {
        assert!(parse("frame 0\ncu 0 0 64\n").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn overlap_reports_pixel() {
        let p = FramePartition {
            width: 64,
            height: 64,
            cus: vec![
                CuSquare { x: 0, y: 0, size: 32 },
                CuSquare { x: 0, y: 0, size: 32 },
                CuSquare { x: 32, y: 0, size: 32 },
                CuSquare { x: 0, y: 32, size: 32 },
                CuSquare { x: 32, y: 32, size: 32 },
            ],
        };
        let err = p.validate_tiling().unwrap_err();
        assert!(err.to_string().contains("overlap at pixel (0, 0)"), "{err}");
    }

    #[test]
    fn gap_reports_pixel() {
        let p = FramePartition {
            width: 64,
            height: 64,
            cus: vec![
                CuSquare { x: 0, y: 0, size: 32 },
                CuSquare { x: 32, y: 0, size: 32 },
                CuSquare { x: 0, y: 32, size: 32 },
            ],
        };
        let err = p.validate_tiling().unwrap_err();
        assert!(err.to_string().contains("gap at pixel (32, 32)"), "{err}");
    }

    #[test]
    fn uniform_16_grid_accepted() {
        let mut cus = Vec::new();
        for y in (0..64).step_by(16) {
            for x in (0..64).step_by(16) {
                cus.push(CuSquare { x, y, size: 16 });
            }
        }
        assert_eq!(cus.len(), 16);
        FramePartition { width: 64, height: 64, cus }.validate_tiling().unwrap();
    }

    #[test]
    fn misalignment_rejected() {
        let p = FramePartition {
            width: 64,
            height: 64,
            cus: vec![CuSquare { x: 8, y: 0, size: 16 }],
        };
        let err = p.validate_tiling().unwrap_err();
        assert!(err.to_string().contains("misaligned"), "{err}");
    }

    #[test]
    fn clipped_border_frame_accepted() {
        // 100x100 frame tiled by aligned 64-CUs clipped at right/bottom;
        // brute-force coverage count is exactly what validate_tiling does.
        let p = FramePartition {
            width: 100,
            height: 100,
            cus: vec![
                CuSquare { x: 0, y: 0, size: 64 },
                CuSquare { x: 64, y: 0, size: 64 },
                CuSquare { x: 0, y: 64, size: 64 },
                CuSquare { x: 64, y: 64, size: 64 },
            ],
        };
        p.validate_tiling().unwrap();
    }

    #[test]
    fn random_quadtree_extremes_and_determinism() {
        let p0 = random_quadtree(7, 130, 70, 0.0);
        assert!(p0.cus.iter().all(|cu| cu.size == 64));
        p0.validate_tiling().unwrap();

        let p1 = random_quadtree(7, 128, 64, 1.0);
        assert!(p1.cus.iter().all(|cu| cu.size == 8));
        p1.validate_tiling().unwrap();

        let a = random_quadtree(42, 192, 128, 0.5);
        let b = random_quadtree(42, 192, 128, 0.5);
        assert_eq!(a, b);
        a.validate_tiling().unwrap();
    }

    #[test]
    fn bpart_round_trip() {
        let frames: Vec<FramePartition> = (0..3)
            .map(|i| random_quadtree(100 + i, 150, 90, 0.6))
            .collect();
        let mut buf = Vec::new();
        write_partitions(&mut buf, 150, 90, &frames).unwrap();
        let parsed = parse_partitions(Cursor::new(buf)).unwrap();
        assert_eq!(parsed, frames);
    }
}
