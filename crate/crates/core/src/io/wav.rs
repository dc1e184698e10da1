//! RIFF/WAVE reading and writing: 16-bit integer PCM and 32-bit IEEE float,
//! interleaved channels.

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::spectral::AudioBuffer;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavCodec {
    Pcm16,
    Float32,
}

impl WavCodec {
    fn bytes_per_sample(self) -> usize {
        match self {
            Self::Pcm16 => 2,
            Self::Float32 => 4,
        }
    }

    fn format_tag(self) -> u16 {
        match self {
            Self::Pcm16 => FORMAT_PCM,
            Self::Float32 => FORMAT_FLOAT,
        }
    }
}

impl std::str::FromStr for WavCodec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" => Ok(Self::Pcm16),
            "float32" => Ok(Self::Float32),
            _ => Err(Error::Config(format!(
                "unknown WAV codec '{s}' (expected pcm16 or float32)"
            ))),
        }
    }
}

fn malformed(offset: usize, message: impl Into<String>) -> Error {
    Error::format("WAV", offset as u64, message)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&self, offset: usize, len: usize, what: &str) -> Result<&[u8]> {
        offset
            .checked_add(len)
            .and_then(|end| self.bytes.get(offset..end))
            .ok_or_else(|| malformed(offset, format!("truncated {what}")))
    }

    fn u16(&self, offset: usize, what: &str) -> Result<u16> {
        let b = self.take(offset, 2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, offset: usize, what: &str) -> Result<u32> {
        let b = self.take(offset, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Format {
    codec: WavCodec,
    channels: usize,
    sample_rate: u32,
    block_align: usize,
}

fn parse_fmt(r: &Reader, start: usize, size: usize) -> Result<Format> {
    if size < 16 {
        return Err(malformed(start, format!("fmt chunk of {size} bytes is too short")));
    }
    let mut tag = r.u16(start, "format tag")?;
    let channels = r.u16(start + 2, "channel count")? as usize;
    let sample_rate = r.u32(start + 4, "sample rate")?;
    let block_align = r.u16(start + 12, "block align")? as usize;
    let bits = r.u16(start + 14, "bits per sample")?;
    if tag == FORMAT_EXTENSIBLE {
        if size < 40 {
            return Err(malformed(start, "extensible fmt chunk shorter than 40 bytes"));
        }
        // First two bytes of the sub-format GUID carry the actual tag.
        tag = r.u16(start + 24, "sub-format")?;
    }
    let codec = match (tag, bits) {
        (FORMAT_PCM, 16) => WavCodec::Pcm16,
        (FORMAT_FLOAT, 32) => WavCodec::Float32,
        (FORMAT_PCM, b) | (FORMAT_FLOAT, b) => {
            return Err(Error::Unsupported {
                format: "WAV",
                message: format!("{b}-bit {} samples", if tag == FORMAT_PCM { "PCM" } else { "float" }),
            })
        }
        (t, _) => {
            return Err(Error::Unsupported {
                format: "WAV",
                message: format!("format tag {t:#06x}"),
            })
        }
    };
    if channels == 0 {
        return Err(malformed(start + 2, "zero channels"));
    }
    if sample_rate == 0 {
        return Err(malformed(start + 4, "zero sample rate"));
    }
    if block_align != channels * codec.bytes_per_sample() {
        return Err(malformed(
            start + 12,
            format!("block align {block_align} does not match {channels} channels of {bits} bits"),
        ));
    }
    Ok(Format {
        codec,
        channels,
        sample_rate,
        block_align,
    })
}

/// Decodes a WAV file image. Integer samples are divided by 32768.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    let r = Reader { bytes };
    if r.take(0, 4, "RIFF header")? != b"RIFF" {
        return Err(malformed(0, "missing RIFF magic"));
    }
    r.u32(4, "RIFF size")?;
    if r.take(8, 4, "WAVE tag")? != b"WAVE" {
        return Err(malformed(8, "missing WAVE tag"));
    }

    let mut format: Option<Format> = None;
    let mut offset = 12;
    loop {
        if offset >= bytes.len() {
            return Err(malformed(offset, "no data chunk"));
        }
        let id = r.take(offset, 4, "chunk id")?;
        let size = r.u32(offset + 4, "chunk size")? as usize;
        let body = offset + 8;
        match id {
            b"fmt " => {
                r.take(body, size, "fmt chunk")?;
                format = Some(parse_fmt(&r, body, size)?);
            }
            b"data" => {
                let fmt = format
                    .as_ref()
                    .ok_or_else(|| malformed(offset, "data chunk before fmt chunk"))?;
                let payload = r.take(body, size, "sample data")?;
                if size % fmt.block_align != 0 {
                    return Err(malformed(
                        body + size - size % fmt.block_align,
                        format!("sample data ends mid-frame ({size} bytes, block align {})", fmt.block_align),
                    ));
                }
                return Ok(deinterleave(payload, fmt));
            }
            _ => {}
        }
        offset = body
            .checked_add(size + (size & 1))
            .ok_or_else(|| malformed(offset + 4, "chunk size overflows"))?;
    }
}

fn deinterleave(payload: &[u8], fmt: &Format) -> AudioBuffer {
    let frames = payload.len() / fmt.block_align;
    let mut channels = vec![Vec::with_capacity(frames); fmt.channels];
    let width = fmt.codec.bytes_per_sample();
    for (i, chunk) in payload.chunks_exact(width).enumerate() {
        let v = match fmt.codec {
            WavCodec::Pcm16 => i16::from_le_bytes([chunk[0], chunk[1]]) as f64 / 32768.0,
            WavCodec::Float32 => {
                f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64
            }
        };
        channels[i % fmt.channels].push(v);
    }
    AudioBuffer::new(channels, fmt.sample_rate).expect("decoded channels have equal length")
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    decode_wav(&read_file(path)?)
}

/// Encodes `audio`, clipping samples to `[-1, 1]`. Returns the file image and
/// the number of clipped samples.
pub fn encode_wav(audio: &AudioBuffer, codec: WavCodec) -> Result<(Vec<u8>, usize)> {
    let channels = audio.num_channels();
    let width = codec.bytes_per_sample();
    let data_len = audio
        .len()
        .checked_mul(channels * width)
        .filter(|&n| n <= u32::MAX as usize - 36)
        .ok_or_else(|| Error::InvalidArgument("audio too long for a RIFF file".into()))?;
    let block_align = channels * width;
    let channel_count = u16::try_from(channels)
        .map_err(|_| Error::InvalidArgument(format!("{channels} channels do not fit a WAV header")))?;

    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&codec.format_tag().to_le_bytes());
    out.extend_from_slice(&channel_count.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate().to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate() * block_align as u32).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&(8 * width as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());

    let mut clipped = 0;
    for n in 0..audio.len() {
        for m in 0..channels {
            let x = audio.channel(m)[n];
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("sample {n} of channel {m}")));
            }
            let c = x.clamp(-1.0, 1.0);
            if c != x {
                clipped += 1;
            }
            match codec {
                WavCodec::Pcm16 => {
                    let q = (c * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavCodec::Float32 => out.extend_from_slice(&(c as f32).to_le_bytes()),
            }
        }
    }
    Ok((out, clipped))
}

/// Writes `audio` atomically and returns the number of clipped samples.
pub fn write_wav(path: &Path, audio: &AudioBuffer, codec: WavCodec) -> Result<usize> {
    let (bytes, clipped) = encode_wav(audio, codec)?;
    write_atomic(path, &bytes)?;
    Ok(clipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(tag: u16, channels: u16, bits: u16, data_len: u32) -> Vec<u8> {
        let align = channels * bits / 8;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_len).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&tag.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&16000u32.to_le_bytes());
        b.extend_from_slice(&(16000 * align as u32).to_le_bytes());
        b.extend_from_slice(&align.to_le_bytes());
        b.extend_from_slice(&bits.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_len.to_le_bytes());
        b
    }

    #[test]
    fn pcm16_normalization_edges() {
        let mut b = header(1, 1, 16, 6);
        for v in [i16::MIN, 0, i16::MAX] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let audio = decode_wav(&b).unwrap();
        assert_eq!(audio.channel(0), &[-1.0, 0.0, 32767.0 / 32768.0]);
    }

    #[test]
    fn stereo_deinterleave_fixture() {
        // L0 R0 L1 R1 L2 R2 L3 R3, hand-written little-endian bytes.
        let mut b = header(1, 2, 16, 16);
        b.extend_from_slice(&[
            0x00, 0x40, 0x00, 0xC0, // 16384, -16384
            0x01, 0x00, 0xFF, 0xFF, // 1, -1
            0x00, 0x80, 0xFF, 0x7F, // -32768, 32767
            0x00, 0x00, 0x00, 0x20, // 0, 8192
        ]);
        let audio = decode_wav(&b).unwrap();
        assert_eq!(audio.num_channels(), 2);
        assert_eq!(audio.channel(0), &[0.5, 1.0 / 32768.0, -1.0, 0.0]);
        assert_eq!(audio.channel(1), &[-0.5, -1.0 / 32768.0, 32767.0 / 32768.0, 0.25]);
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let ch: Vec<Vec<f64>> = (0..3)
            .map(|m| (0..50).map(|n| ((n * 7 + m) as f32 * 0.013).sin() as f64).collect())
            .collect();
        let audio = AudioBuffer::new(ch, 22050).unwrap();
        let (bytes, clipped) = encode_wav(&audio, WavCodec::Float32).unwrap();
        assert_eq!(clipped, 0);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back, audio);
    }

    #[test]
    fn clipping_is_counted() {
        let audio = AudioBuffer::mono(vec![1.5, -2.0, 0.25, 1.0], 16000).unwrap();
        let (bytes, clipped) = encode_wav(&audio, WavCodec::Pcm16).unwrap();
        assert_eq!(clipped, 2);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.channel(0), &[32767.0 / 32768.0, -1.0, 0.25, 32767.0 / 32768.0]);
    }

    #[test]
    fn extensible_header_is_accepted() {
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(60u32 + 4).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&40u32.to_le_bytes());
        b.extend_from_slice(&0xFFFEu16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&16000u32.to_le_bytes());
        b.extend_from_slice(&64000u32.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&32u16.to_le_bytes());
        b.extend_from_slice(&22u16.to_le_bytes());
        b.extend_from_slice(&32u16.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&3u16.to_le_bytes());
        b.extend_from_slice(&[0; 14]);
        b.extend_from_slice(b"data");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&0.75f32.to_le_bytes());
        assert_eq!(decode_wav(&b).unwrap().channel(0), &[0.75]);
    }

    #[test]
    fn malformed_inputs_name_offsets() {
        let offset = |bytes: &[u8]| match decode_wav(bytes) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(offset(b"RIFX\0\0\0\0WAVE"), 0);
        assert_eq!(offset(b"RIFF\0\0\0\0WAVX"), 8);
        assert_eq!(offset(b"RIF"), 0);

        let mut truncated = header(1, 1, 16, 10);
        truncated.extend_from_slice(&[0; 4]);
        assert_eq!(offset(&truncated), 44);

        let mut mid_frame = header(1, 2, 16, 6);
        mid_frame.extend_from_slice(&[0; 6]);
        assert_eq!(offset(&mid_frame), 48);

        let mut b = header(1, 1, 24, 3);
        b.extend_from_slice(&[0; 3]);
        assert!(matches!(decode_wav(&b), Err(Error::Unsupported { .. })));
        let mut b = header(2, 1, 16, 2);
        b.extend_from_slice(&[0; 2]);
        assert!(matches!(decode_wav(&b), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let mut b = header(1, 1, 16, 2);
        let data = b.split_off(36);
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&data);
        b.extend_from_slice(&16384i16.to_le_bytes());
        assert_eq!(decode_wav(&b).unwrap().channel(0), &[0.5]);
    }
}
