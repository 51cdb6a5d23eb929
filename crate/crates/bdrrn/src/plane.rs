//! 8-bit luma planes plus raw YUV420 and binary PGM I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A single 8-bit image plane, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Plane8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                "plane construction",
                format!("{} pixels for {width}x{height}", width * height),
                format!("{}", pixels.len()),
            ));
        }
        Ok(Plane8 { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Plane8 {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|p| *p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Size in bytes of one YUV420 frame.
pub fn yuv420_frame_size(width: usize, height: usize) -> Result<usize> {
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "YUV420 requires even dimensions, got {width}x{height}"
        )));
    }
    Ok(width * height * 3 / 2)
}

/// Reads the Y planes of a raw YUV420 file, skipping chroma. Reads at most
/// `max_frames` when given.
pub fn read_yuv420_y(path: &Path, width: usize, height: usize, max_frames: Option<usize>) -> Result<Vec<Plane8>> {
    let frame_size = yuv420_frame_size(width, height)?;
    let data = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if data.len() < frame_size {
        return Err(Error::InvalidArgument(format!(
            "{} is shorter than one {width}x{height} YUV420 frame ({} < {frame_size} bytes)",
            path.display(),
            data.len()
        )));
    }
    let available = data.len() / frame_size;
    let count = max_frames.map_or(available, |m| m.min(available));
    let y_size = width * height;
    let mut planes = Vec::with_capacity(count);
    for f in 0..count {
        let start = f * frame_size;
        planes.push(Plane8 {
            width,
            height,
            pixels: data[start..start + y_size].to_vec(),
        });
    }
    Ok(planes)
}

/// Replaces the Y planes of a YUV420 file, copying chroma bytes through
/// from `source`. `planes` must not outnumber the source frames.
pub fn write_yuv420_replacing_y(source: &Path, out: &Path, planes: &[Plane8]) -> Result<()> {
    let data = std::fs::read(source).map_err(|e| Error::io(format!("reading {}", source.display()), e))?;
    if planes.is_empty() {
        return Err(Error::InvalidArgument("no frames to write".into()));
    }
    let (width, height) = (planes[0].width, planes[0].height);
    let frame_size = yuv420_frame_size(width, height)?;
    if data.len() < planes.len() * frame_size {
        return Err(Error::InvalidArgument(format!(
            "source {} holds fewer than {} frames",
            source.display(),
            planes.len()
        )));
    }
    let y_size = width * height;
    let mut buf = data[..planes.len() * frame_size].to_vec();
    for (f, plane) in planes.iter().enumerate() {
        if plane.width != width || plane.height != height {
            return Err(Error::shape(
                "YUV frame",
                format!("{width}x{height}"),
                format!("{}x{}", plane.width, plane.height),
            ));
        }
        buf[f * frame_size..f * frame_size + y_size].copy_from_slice(&plane.pixels);
    }
    std::fs::write(out, buf).map_err(|e| Error::io(format!("writing {}", out.display()), e))
}

/// Writes a fresh YUV420 file with neutral (128) chroma.
pub fn write_yuv420_gray_chroma(out: &Path, planes: &[Plane8]) -> Result<()> {
    if planes.is_empty() {
        return Err(Error::InvalidArgument("no frames to write".into()));
    }
    let (width, height) = (planes[0].width, planes[0].height);
    let frame_size = yuv420_frame_size(width, height)?;
    let y_size = width * height;
    let mut buf = Vec::with_capacity(planes.len() * frame_size);
    for plane in planes {
        buf.extend_from_slice(&plane.pixels);
        buf.resize(buf.len() + (frame_size - y_size), 128);
    }
    std::fs::write(out, buf).map_err(|e| Error::io(format!("writing {}", out.display()), e))
}

pub fn write_pgm(plane: &Plane8, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    let werr = |e| Error::io(format!("writing {}", path.display()), e);
    write!(w, "P5\n{} {}\n255\n", plane.width, plane.height).map_err(werr)?;
    w.write_all(&plane.pixels).map_err(werr)?;
    w.flush().map_err(werr)
}

pub fn read_pgm(path: &Path) -> Result<Plane8> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let magic = pgm_token(&mut r, path)?;
    if magic != "P5" {
        return Err(Error::InvalidArgument(format!(
            "{}: unsupported PGM magic `{magic}` (only binary P5)",
            path.display()
        )));
    }
    let width: usize = pgm_number(&mut r, path, "width")?;
    let height: usize = pgm_number(&mut r, path, "height")?;
    let maxval: usize = pgm_number(&mut r, path, "maxval")?;
    if maxval != 255 {
        return Err(Error::InvalidArgument(format!(
            "{}: PGM maxval {maxval} unsupported (must be 255)",
            path.display()
        )));
    }
    let mut pixels = vec![0u8; width * height];
    r.read_exact(&mut pixels)
        .map_err(|e| Error::io(format!("reading pixels of {}", path.display()), e))?;
    Plane8::new(width, height, pixels)
}

/// Next whitespace-delimited token, honoring `#` comments.
fn pgm_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    let ioerr = |e| Error::io(format!("parsing PGM header of {}", path.display()), e);
    loop {
        if r.read(&mut byte).map_err(ioerr)? == 0 {
            if token.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{}: truncated PGM header",
                    path.display()
                )));
            }
            return Ok(token);
        }
        let c = byte[0];
        if c == b'#' {
            let mut skipped = Vec::new();
            r.read_until(b'\n', &mut skipped).map_err(ioerr)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c as char);
    }
}

fn pgm_number<R: BufRead>(r: &mut R, path: &Path, what: &str) -> Result<usize> {
    let tok = pgm_token(r, path)?;
    tok.parse().map_err(|_| {
        Error::InvalidArgument(format!("{}: bad PGM {what} `{tok}`", path.display()))
    })
}
