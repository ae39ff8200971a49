//! Minimal RIFF/WAVE codec for 16-bit PCM.

use thiserror::Error;

use super::MusicClip;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WavError {
    #[error("not a RIFF/WAVE file")]
    BadMagic,
    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),
    #[error("truncated {0} chunk")]
    Truncated(&'static str),
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
    #[error("empty audio")]
    Empty,
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

struct Format {
    channels: u16,
    sample_rate: u32,
}

/// Decodes 16-bit PCM mono or stereo; stereo is averaged to mono.
pub fn parse_wav(bytes: &[u8]) -> Result<MusicClip, WavError> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::BadMagic);
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(WavError::Truncated("fmt"));
                }
                let codec = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let sample_rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if codec != 1 {
                    return Err(WavError::UnsupportedCodec(format!("format tag {codec}")));
                }
                if bits != 16 {
                    return Err(WavError::UnsupportedCodec(format!("{bits}-bit samples")));
                }
                if !(1..=2).contains(&channels) {
                    return Err(WavError::UnsupportedCodec(format!("{channels} channels")));
                }
                if sample_rate == 0 {
                    return Err(WavError::UnsupportedCodec("sample rate 0".into()));
                }
                format = Some(Format {
                    channels,
                    sample_rate,
                });
            }
            b"data" => {
                let fmt = format.ok_or(WavError::MissingChunk("fmt"))?;
                if body + size > bytes.len() {
                    return Err(WavError::Truncated("data"));
                }
                let frame_bytes = 2 * fmt.channels as usize;
                if size < frame_bytes {
                    return Err(WavError::Empty);
                }
                let pcm = &bytes[body..body + size - size % frame_bytes];
                let samples = pcm
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f64 = frame
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                            .sum();
                        sum / fmt.channels as f64
                    })
                    .collect();
                return Ok(MusicClip {
                    samples,
                    sample_rate: fmt.sample_rate,
                });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    if format.is_none() {
        Err(WavError::MissingChunk("fmt"))
    } else {
        Err(WavError::MissingChunk("data"))
    }
}

pub fn quantize(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes interleaved 16-bit PCM with a canonical 44-byte header.
pub fn encode_pcm16(pcm: &[i16], channels: u16, sample_rate: u32) -> Vec<u8> {
    let data_len = (pcm.len() * 2) as u32;
    let block_align = channels * 2;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in pcm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Mono 16-bit PCM WAV bytes for a clip.
pub fn write_wav(clip: &MusicClip) -> Vec<u8> {
    let pcm: Vec<i16> = clip.samples.iter().map(|&s| quantize(s)).collect();
    encode_pcm16(&pcm, 1, clip.sample_rate)
}
