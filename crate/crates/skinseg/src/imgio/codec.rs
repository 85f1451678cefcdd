//! Binary netpbm codecs: P6 (PPM) for color, P5 (PGM) for grayscale.
//!
//! Only maxval 255 is accepted. Masks are written as 0/255 PGM; probability
//! maps quantize to 255 levels on export.

use super::{BinaryMask, ImgError, Image};
use crate::bayes::ProbMap;

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) -> Result<(), ImgError> {
        let mut saw_any = false;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_any = true;
                    self.pos += 1;
                }
                Some(b'#') => {
                    saw_any = true;
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => {
                    if saw_any {
                        return Ok(());
                    }
                    return Err(ImgError::MalformedHeader("missing whitespace separator".into()));
                }
            }
        }
    }

    fn read_number(&mut self) -> Result<u32, ImgError> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(ImgError::MalformedHeader("expected a decimal field".into()));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are ascii");
        text.parse()
            .map_err(|_| ImgError::MalformedHeader(format!("field {text} out of range")))
    }

    /// Exactly one whitespace byte separates the maxval from the payload.
    fn finish_header(&mut self) -> Result<usize, ImgError> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(ImgError::MalformedHeader("missing separator before payload".into())),
        }
    }
}

fn parse_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize), ImgError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(ImgError::MalformedHeader(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut p = HeaderParser::new(bytes);
    p.pos = 2;
    p.skip_space_and_comments()?;
    let width = p.read_number()?;
    p.skip_space_and_comments()?;
    let height = p.read_number()?;
    p.skip_space_and_comments()?;
    let maxval = p.read_number()?;
    if maxval != 255 {
        return Err(ImgError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ImgError::MalformedHeader("zero dimension".into()));
    }
    let payload = p.finish_header()?;
    Ok((height as usize, width as usize, payload))
}

fn check_payload(bytes: &[u8], start: usize, expected: usize) -> Result<&[u8], ImgError> {
    let got = bytes.len().saturating_sub(start);
    if got < expected {
        return Err(ImgError::TruncatedPayload { expected, got });
    }
    if got > expected {
        return Err(ImgError::TrailingData(got - expected));
    }
    Ok(&bytes[start..])
}

/// Decodes a binary PPM (P6) or PGM (P5) with maxval 255.
pub fn decode_image(bytes: &[u8]) -> Result<Image, ImgError> {
    let (magic, channels): (&[u8], usize) = match bytes.get(..2) {
        Some(b"P6") => (b"P6", 3),
        Some(b"P5") => (b"P5", 1),
        _ => return Err(ImgError::MalformedHeader("expected magic P6 or P5".into())),
    };
    let (height, width, start) = parse_header(bytes, magic)?;
    let payload = check_payload(bytes, start, height * width * channels)?;
    let data = payload.iter().map(|&b| f32::from(b) / 255.0).collect();
    Image::new(height, width, channels, data)
}

/// Encodes to P6 (3-channel) or P5 (1-channel); intensities quantize to
/// bytes with round-half-up.
pub fn encode_image(img: &Image) -> Result<Vec<u8>, ImgError> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(ImgError::ChannelMismatch { expected: 3, got: c }),
    };
    let header = format!("{magic}\n{} {}\n255\n", img.width(), img.height());
    let mut out = header.into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

/// Masks are PGM files holding only 0 and 255.
pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", mask.width(), mask.height());
    let mut out = header.into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0u8 }));
    out
}

/// Reads a PGM as a mask; bytes >= 128 count as skin.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask, ImgError> {
    let (height, width, start) = parse_header(bytes, b"P5")?;
    let payload = check_payload(bytes, start, height * width)?;
    BinaryMask::new(height, width, payload.iter().map(|&b| b >= 128).collect())
}

/// Exports a probability map as PGM, quantized to 255 levels.
pub fn encode_prob_map(map: &ProbMap) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", map.width(), map.height());
    let mut out = header.into_bytes();
    out.extend(map.values().iter().map(|&v| quantize(v)));
    out
}

/// Reads a PGM back as a probability map with values `byte / 255`.
pub fn decode_prob_map(bytes: &[u8]) -> Result<ProbMap, ImgError> {
    let (height, width, start) = parse_header(bytes, b"P5")?;
    let payload = check_payload(bytes, start, height * width)?;
    let values = payload.iter().map(|&b| f32::from(b) / 255.0).collect();
    ProbMap::new(height, width, values)
        .map_err(|e| ImgError::InvalidImage(format!("probability map: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_single_white_pgm() {
        let img = decode_image(b"P5 1 1 255 \xff").unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (1, 1, 1));
        assert_eq!(img.get(0, 0, 0), 1.0);
    }

    #[test]
    fn decodes_two_pixel_ppm_endpoints() {
        let img = decode_image(b"P6 2 1 255 \x00\x00\x00\xff\xff\xff").unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (1, 2, 3));
        assert_eq!(&img.data()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&img.data()[3..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut bytes = b"P6 4 4 255 ".to_vec();
        bytes.extend([128u8; 9]); // 3 of 16 pixels
        match decode_image(&bytes) {
            Err(ImgError::TruncatedPayload { expected, got }) => {
                assert_eq!(expected, 48);
                assert_eq!(got, 9);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        assert!(matches!(
            decode_image(b"P5 1 1 255 \xff\x00"),
            Err(ImgError::TrailingData(1))
        ));
    }

    #[test]
    fn unsupported_maxval_is_distinct() {
        assert!(matches!(
            decode_image(b"P5 1 1 254 \xff"),
            Err(ImgError::UnsupportedMaxval(254))
        ));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_image(b"P5\n# a comment\n2 1\n255\n\x00\x80").unwrap();
        assert_eq!(img.width(), 2);
        assert!((img.get(0, 1, 0) - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn encode_rounds_half_up() {
        let img = Image::new(1, 1, 1, vec![0.5]).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert_eq!(*bytes.last().unwrap(), 128);
    }

    #[test]
    fn encode_endpoints() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 0, 255]);
    }

    #[test]
    fn mask_round_trip() {
        let mask = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let back = decode_mask(&encode_mask(&mask)).unwrap();
        assert_eq!(mask, back);
    }

    proptest! {
        // decode . encode is the identity on quantized images
        #[test]
        fn quantized_round_trip_is_exact(
            h in 1usize..6,
            w in 1usize..6,
            color in proptest::bool::ANY,
            seed in 0u8..=255,
        ) {
            let c = if color { 3 } else { 1 };
            let data: Vec<f32> = (0..h * w * c)
                .map(|i| ((i as u32 * 31 + seed as u32) % 256) as f32 / 255.0)
                .collect();
            let img = Image::new(h, w, c, data).unwrap();
            let back = decode_image(&encode_image(&img).unwrap()).unwrap();
            prop_assert_eq!(img, back);
        }

        #[test]
        fn decode_quantizes_within_half_step(v in 0.0f32..=1.0) {
            let img = Image::new(1, 1, 1, vec![v]).unwrap();
            let back = decode_image(&encode_image(&img).unwrap()).unwrap();
            prop_assert!((back.get(0, 0, 0) - v).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
