//! Frame directories: `color.ppm` (binary P6), `depth.pgm` (binary P5,
//! 16-bit, millimeters, 0 = invalid) and `intrinsics.txt`
//! (`fx fy cx cy width height`).

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use disco_core::frame::{CameraIntrinsics, RgbdFrame};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageBuffer, ImageReader, Rgb};

use crate::{Error, Result};

pub const COLOR_FILE: &str = "color.ppm";
pub const DEPTH_FILE: &str = "depth.pgm";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

pub fn parse_intrinsics(path: &Path, text: &str) -> Result<CameraIntrinsics> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.into(),
    };
    if toks.len() != 6 {
        return Err(bad("expected `fx fy cx cy width height`"));
    }
    let r: Vec<f64> = toks[..4]
        .iter()
        .map(|t| t.parse().map_err(|_| bad("invalid focal length or principal point")))
        .collect::<Result<_>>()?;
    let w: usize = toks[4].parse().map_err(|_| bad("invalid width"))?;
    let h: usize = toks[5].parse().map_err(|_| bad("invalid height"))?;
    Ok(CameraIntrinsics::new(r[0], r[1], r[2], r[3], w, h)?)
}

pub fn load_frame(dir: &Path) -> Result<RgbdFrame> {
    let ipath = dir.join(INTRINSICS_FILE);
    let text = std::fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let intr = parse_intrinsics(&ipath, &text)?;

    let cpath = dir.join(COLOR_FILE);
    let color = decode(&cpath)?.to_rgb8();
    let dpath = dir.join(DEPTH_FILE);
    let DynamicImage::ImageLuma16(depth) = decode(&dpath)? else {
        return Err(image_err(&dpath, "depth map must be a 16-bit graymap"));
    };
    for (path, (w, h)) in [(&cpath, color.dimensions()), (&dpath, depth.dimensions())] {
        if (w as usize, h as usize) != (intr.width, intr.height) {
            return Err(image_err(
                path,
                format!("image is {w}x{h}, intrinsics say {}x{}", intr.width, intr.height),
            ));
        }
    }
    let color = color.pixels().map(|p| p.0).collect();
    let depth = depth.pixels().map(|p| p.0[0] as f64).collect();
    Ok(RgbdFrame::new(color, depth, intr)?)
}

/// Writes a frame directory; depths are rounded to whole millimeters.
pub fn save_frame(dir: &Path, frame: &RgbdFrame) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let intr = &frame.intrinsics;
    let (w, h) = (intr.width as u32, intr.height as u32);

    let ipath = dir.join(INTRINSICS_FILE);
    let text = format!(
        "{} {} {} {} {} {}\n",
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height
    );
    std::fs::write(&ipath, text).map_err(|e| Error::io(&ipath, e))?;

    let cpath = dir.join(COLOR_FILE);
    let color: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w, h, frame.color.iter().flatten().copied().collect()).expect("frame size");
    let out = BufWriter::new(File::create(&cpath).map_err(|e| Error::io(&cpath, e))?);
    color
        .write_with_encoder(PnmEncoder::new(out).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary)))
        .map_err(|e| image_err(&cpath, e))?;

    let dpath = dir.join(DEPTH_FILE);
    let mm: Vec<u16> = frame
        .depth
        .iter()
        .map(|&d| {
            if d.is_finite() && d > 0.0 {
                d.round().min(u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    bytes.extend(mm.iter().flat_map(|d| d.to_be_bytes()));
    std::fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))?;
    Ok(())
}
