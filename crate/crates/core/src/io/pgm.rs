//! Binary portable graymap (P5) writer for gate-map visualizations.

use std::fs;
use std::path::Path;

use crate::error::{Result, SgError};

/// Write an 8-bit grayscale image, one byte per pixel, row-major.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(SgError::invalid(
            "write_pgm",
            format!("{}x{} image needs {} pixels, got {}", width, height, width * height, pixels.len()),
        ));
    }
    let mut buf = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_exact_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, 2, 2, &[0, 128, 255, 7]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, b"P5\n2 2\n255\n\x00\x80\xff\x07");
    }

    #[test]
    fn test_size_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("t.pgm"), 3, 3, &[0; 8]).is_err());
    }
}
