use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{itf, Tensor};

/// Loads an item image as a `(channels, height, width)` tensor.
///
/// `.png` files are converted to values in `[0, 1]` (alpha is dropped);
/// anything else is read as ITF and taken as-is.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let img = if is_png {
        load_png(path)?
    } else {
        itf::read(path)?
    };
    if img.rank() != 3 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("expected (channels, height, width), got {:?}", img.shape()),
        });
    }
    Ok(img)
}

fn load_png(path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    let pixels = &buf[..info.buffer_size()];
    let mut data = vec![0.0; channels * h * w];
    for p in 0..h * w {
        for c in 0..channels {
            data[c * h * w + p] = (pixels[p * stride + c] as f32 / 255.0) as f64;
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_is_scaled_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        {
            let file = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(std::io::BufWriter::new(file), 2, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[255, 0, 51, 0, 255, 102]).unwrap();
        }
        let t = load_image(&path).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        let expect = |v: u8| (v as f32 / 255.0) as f64;
        assert_eq!(
            t.data(),
            &[
                expect(255),
                expect(0),
                expect(0),
                expect(255),
                expect(51),
                expect(102)
            ]
        );
    }

    #[test]
    fn itf_is_taken_verbatim_and_rank_checked() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("a.itf");
        let img = Tensor::new(vec![1, 2, 2], vec![0.5, 2.0, -1.0, 0.25]).unwrap();
        itf::write(&good, &img).unwrap();
        assert_eq!(load_image(&good).unwrap(), img);
        let flat = dir.path().join("b.itf");
        itf::write(&flat, &Tensor::zeros(&[4])).unwrap();
        assert!(matches!(load_image(&flat), Err(Error::Image { .. })));
    }
}
