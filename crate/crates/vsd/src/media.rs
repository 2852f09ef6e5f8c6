//! Sticker media: animated GIFs and directories of numbered PNG frames.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifDecoder, GifEncoder, Repeat};
use image::imageops::{self, FilterType};
use image::{AnimationDecoder, Delay, Frame, RgbImage, RgbaImage};
use vsd_core::clip::{Clip, CHANNELS};
use vsd_core::curation::{flip_pad, grayscale};
use vsd_core::tensor::Tensor;

use crate::error::{Error, Result};

/// Frame delay written into generated GIFs.
pub const GIF_DELAY_MS: u32 = 125;

/// Decoded RGB frames of one sticker, all of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub width: u32,
    pub height: u32,
    pub frames: Vec<RgbImage>,
}

impl Frames {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Composites transparent pixels over white.
fn flatten(rgba: &RgbaImage) -> RgbImage {
    RgbImage::from_fn(rgba.width(), rgba.height(), |x, y| {
        let p = rgba.get_pixel(x, y).0;
        let a = p[3] as u32;
        let blend = |c: u8| ((c as u32 * a + 255 * (255 - a) + 127) / 255) as u8;
        image::Rgb([blend(p[0]), blend(p[1]), blend(p[2])])
    })
}

pub fn read_gif(path: &Path) -> Result<Frames> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = GifDecoder::new(BufReader::new(file)).map_err(|e| Error::media(path, e))?;
    let frames: Vec<RgbImage> = decoder
        .into_frames()
        .map(|f| f.map(|f| flatten(f.buffer())))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::media(path, e))?;
    from_frames(path, frames)
}

/// Numeric part of a frame file stem, e.g. `frame_012` -> 12.
fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

/// Reads `*.png` files from a directory ordered by their trailing frame number.
pub fn read_png_dir(dir: &Path) -> Result<Frames> {
    let mut paths: Vec<(u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let n = frame_number(&p)
                .ok_or_else(|| Error::Media(format!("{}: frame file without a number", p.display())))?;
            paths.push((n, p));
        }
    }
    paths.sort();
    let frames = paths
        .iter()
        .map(|(_, p)| image::open(p).map(|im| flatten(&im.to_rgba8())).map_err(|e| Error::media(p, e)))
        .collect::<Result<Vec<_>>>()?;
    from_frames(dir, frames)
}

fn from_frames(path: &Path, frames: Vec<RgbImage>) -> Result<Frames> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Media(format!("{}: no frames", path.display())))?;
    let (width, height) = first.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::Media(format!("{}: empty frame", path.display())));
    }
    if frames.iter().any(|f| f.dimensions() != (width, height)) {
        return Err(Error::Media(format!("{}: frames differ in size", path.display())));
    }
    Ok(Frames { width, height, frames })
}

/// Reads a GIF file, a single image file or a directory of PNG frames.
pub fn read_media(path: &Path) -> Result<Frames> {
    if path.is_dir() {
        return read_png_dir(path);
    }
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("gif") => read_gif(path),
        _ => {
            let im = image::open(path).map_err(|e| Error::media(path, e))?;
            from_frames(path, vec![flatten(&im.to_rgba8())])
        }
    }
}

/// Grayscale bytes of the first frame.
pub fn first_frame_gray(path: &Path) -> Result<Vec<u8>> {
    let f = read_media(path)?;
    Ok(grayscale(f.frames[0].as_raw()))
}

/// Flip-pads or truncates to `frames` and resizes every frame to `size x size`.
pub fn to_clip(media: &Frames, frames: usize, size: u32) -> Result<Clip> {
    let padded = flip_pad(&media.frames, frames)?;
    let plane = (size * size) as usize * CHANNELS;
    let mut data = Vec::with_capacity(frames * plane);
    for f in padded {
        let f = if f.dimensions() == (size, size) {
            f
        } else {
            imageops::resize(&f, size, size, FilterType::Triangle)
        };
        data.extend(f.as_raw().iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Clip::new(Tensor::new(&[frames, size as usize, size as usize, CHANNELS], data)?)?)
}

pub fn load_clip(path: &Path, frames: usize, size: u32) -> Result<Clip> {
    to_clip(&read_media(path)?, frames, size)
}

/// Writes a looping GIF with one image per clip frame.
pub fn write_gif(path: &Path, clip: &Clip) -> Result<()> {
    if clip.channels() != CHANNELS {
        return Err(Error::Media(format!("GIF output needs {CHANNELS} channels, got {}", clip.channels())));
    }
    let (w, h) = (clip.width() as u32, clip.height() as u32);
    let bytes = clip.to_u8();
    let plane = clip.frame_len();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new_with_speed(std::io::BufWriter::new(file), 10);
    enc.set_repeat(Repeat::Infinite).map_err(|e| Error::media(path, e))?;
    let delay = Delay::from_numer_denom_ms(GIF_DELAY_MS, 1);
    for i in 0..clip.frames() {
        let rgb = &bytes[i * plane..(i + 1) * plane];
        let rgba = RgbaImage::from_fn(w, h, |x, y| {
            let o = ((y * w + x) as usize) * 3;
            image::Rgba([rgb[o], rgb[o + 1], rgb[o + 2], 255])
        });
        enc.encode_frame(Frame::from_parts(rgba, 0, 0, delay))
            .map_err(|e| Error::media(path, e))?;
    }
    Ok(())
}
