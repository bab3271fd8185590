//! Binary PGM (P5) and PPM (P6) with maxval 255. Single-frame signals
//! only; one channel writes P5, three channels write P6.

use crate::error::{HpmError, Result};
use crate::patchkit::{PatchGeometry, VisualTensor};
use std::fs;
use std::path::Path;

/// Quantize [0, 1] to a byte, rounding half up.
fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn write_pnm(v: &VisualTensor, path: &Path) -> Result<()> {
    let g = &v.geometry;
    if g.frames != 1 {
        return Err(HpmError::Contract(format!(
            "pnm output requires a single frame, got {}",
            g.frames
        )));
    }
    let magic = match g.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(HpmError::Contract(format!("pnm output requires 1 or 3 channels, got {c}")))
        }
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", g.width, g.height).into_bytes();
    bytes.reserve(v.data.len());
    for &val in &v.data {
        bytes.push(to_byte(val));
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: &str) -> HpmError {
        HpmError::Format { offset: self.pos, msg: msg.to_string() }
    }

    fn skip_space_and_comments(&mut self) -> Result<()> {
        loop {
            while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.data.len() && self.data[self.pos] == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail("expected decimal number"));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail("malformed number"))
    }
}

pub fn read_pnm(path: &Path) -> Result<VisualTensor> {
    let data = fs::read(path)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if data.len() < 2 {
        return Err(cur.fail("file shorter than magic"));
    }
    let channels = match &data[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(cur.fail("bad magic, want P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(cur.fail("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= data.len() || !data[cur.pos].is_ascii_whitespace() {
        return Err(cur.fail("missing raster separator"));
    }
    cur.pos += 1;
    let expect = width * height * channels;
    let raster = &data[cur.pos..];
    if raster.len() != expect {
        return Err(HpmError::Format {
            offset: cur.pos,
            msg: format!("raster has {} bytes, expected {expect}", raster.len()),
        });
    }
    let g = PatchGeometry {
        frames: 1,
        height,
        width,
        channels,
        // Degenerate patch grid; callers re-patchify under their own run
        // geometry.
        spatial_patch: 1,
        temporal_patch: 1,
    };
    let values = raster.iter().map(|&b| b as f64 / 255.0).collect();
    VisualTensor::new(g, values)
}
