//! Binary P6 PPM with maxval 255, the crate's only image container format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Image;
use crate::{Error, Result};

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(image.width * image.height * 3 + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", image.width, image.height).as_bytes());
    for &v in image.data() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;

    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and `#` comments between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated ppm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P6" {
        return Err(Error::format("not a binary P6 ppm"));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::format("bad ppm width"))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::format("bad ppm height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::format("bad ppm maxval"))?;
    if maxval != 255 {
        return Err(Error::format(format!("ppm maxval must be 255, got {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::format(format!(
            "ppm payload truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::from_data(width, height, data)
}
