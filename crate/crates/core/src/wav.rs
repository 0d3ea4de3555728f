//! 16-bit PCM RIFF/WAVE reading and writing.
//!
//! Samples are mapped to `i16` by scaling with 32768 and rounding, so a
//! write/read round trip is exact to within 1/32768.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{MultiChannel, SampledSignal};

const PCM: u16 = 1;
const BITS: u16 = 16;
const SCALE: f64 = 32_768.0;

/// Largest round-trip error introduced by quantization.
pub const QUANTIZATION_STEP: f64 = 1.0 / SCALE;

pub fn write_wav(signals: &MultiChannel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_wav_to(signals, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_mono(signal: &SampledSignal, path: impl AsRef<Path>) -> Result<()> {
    write_wav(&MultiChannel::from_signals(std::slice::from_ref(signal))?, path)
}

pub fn write_wav_to<W: Write>(signals: &MultiChannel, w: &mut W) -> Result<()> {
    if signals.is_empty() {
        return Err(Error::wav("data", "refusing to write a zero-length signal"));
    }
    let fs = signals.sample_rate();
    if fs.fract() != 0.0 || fs > u32::MAX as f64 {
        return Err(Error::wav("sample_rate", format!("{fs} Hz is not an integral u32")));
    }
    let n_ch = u16::try_from(signals.n_channels())
        .map_err(|_| Error::wav("num_channels", "too many channels"))?;
    let block_align = n_ch * (BITS / 8);
    let data_len = signals.len() as u64 * block_align as u64;
    let data_len = u32::try_from(data_len)
        .ok()
        .filter(|n| *n <= u32::MAX - 36)
        .ok_or_else(|| Error::wav("data", "signal too long for a RIFF file"))?;

    let mut pcm = Vec::with_capacity(data_len as usize);
    for i in 0..signals.len() {
        for (c, ch) in signals.channels().iter().enumerate() {
            let x = ch[i];
            if !(-1.0..=1.0).contains(&x) {
                return Err(Error::wav(
                    "data",
                    format!("sample {i} of channel {c} is {x}, outside [-1, 1]"),
                ));
            }
            let q = (x * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            pcm.extend_from_slice(&q.to_le_bytes());
        }
    }

    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&PCM.to_le_bytes())?;
    w.write_all(&n_ch.to_le_bytes())?;
    w.write_all(&(fs as u32).to_le_bytes())?;
    w.write_all(&(fs as u32 * block_align as u32).to_le_bytes())?;
    w.write_all(&block_align.to_le_bytes())?;
    w.write_all(&BITS.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    w.write_all(&pcm)?;
    Ok(())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultiChannel> {
    read_wav_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_wav_from<R: Read>(r: &mut R) -> Result<MultiChannel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

struct Format {
    channels: u16,
    sample_rate: u32,
}

fn parse(bytes: &[u8]) -> Result<MultiChannel> {
    if bytes.len() < 12 {
        return Err(Error::wav("RIFF header", "file shorter than 12 bytes"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::wav("RIFF chunk id", "missing `RIFF` magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::wav("RIFF form type", "missing `WAVE` form type"));
    }

    let mut fmt: Option<Format> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| {
                Error::wav("chunk size", format!(
                    "chunk `{}` claims {size} bytes past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];

        match id {
            b"fmt " => fmt = Some(parse_fmt(body)?),
            b"data" => {
                let f = fmt.ok_or_else(|| Error::wav("fmt chunk", "`data` precedes `fmt `"))?;
                return decode_data(body, &f);
            }
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    Err(Error::wav("data chunk", "no `data` chunk found"))
}

fn parse_fmt(body: &[u8]) -> Result<Format> {
    if body.len() < 16 {
        return Err(Error::wav("fmt chunk size", format!("{} bytes, need 16", body.len())));
    }
    let u16_at = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().unwrap());

    let format = u16_at(0);
    let channels = u16_at(2);
    let sample_rate = u32_at(4);
    let block_align = u16_at(12);
    let bits = u16_at(14);

    if format != PCM {
        return Err(Error::wav("fmt audio_format", format!("{format} is not PCM (1)")));
    }
    if bits != BITS {
        return Err(Error::wav("fmt bits_per_sample", format!("{bits} bits; only 16 supported")));
    }
    if channels == 0 {
        return Err(Error::wav("fmt num_channels", "zero channels"));
    }
    if sample_rate == 0 {
        return Err(Error::wav("fmt sample_rate", "zero sample rate"));
    }
    if block_align != channels * 2 {
        return Err(Error::wav(
            "fmt block_align",
            format!("{block_align}, expected {} for {channels} channel(s)", channels * 2),
        ));
    }
    Ok(Format {
        channels,
        sample_rate,
    })
}

fn decode_data(body: &[u8], fmt: &Format) -> Result<MultiChannel> {
    let n_ch = fmt.channels as usize;
    let frame = n_ch * 2;
    if body.len() % frame != 0 {
        return Err(Error::wav(
            "data chunk size",
            format!("{} bytes is not a whole number of {frame}-byte frames", body.len()),
        ));
    }
    let frames = body.len() / frame;
    if frames == 0 {
        return Err(Error::wav("data chunk size", "no sample frames"));
    }
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for f in body.chunks_exact(frame) {
        for (c, s) in f.chunks_exact(2).enumerate() {
            channels[c].push(i16::from_le_bytes([s[0], s[1]]) as f64 / SCALE);
        }
    }
    MultiChannel::new(channels, fmt.sample_rate as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{assemble_sequence, generate_chirp, ChirpSpec, SequenceLayout};

    fn roundtrip(sig: &MultiChannel) -> MultiChannel {
        let mut buf = Vec::new();
        write_wav_to(sig, &mut buf).unwrap();
        read_wav_from(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn chirp_round_trip_within_quantization() {
        let chirp = generate_chirp(&ChirpSpec::default()).unwrap();
        let back = roundtrip(&MultiChannel::from_signals(&[chirp.clone()]).unwrap());
        assert_eq!(back.n_channels(), 1);
        assert_eq!(back.sample_rate(), 48_000.0);
        let worst = chirp
            .samples()
            .iter()
            .zip(back.channel(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= QUANTIZATION_STEP, "{worst}");
    }

    #[test]
    fn four_channel_metadata() {
        let chirp = generate_chirp(&ChirpSpec::default()).unwrap();
        let seq = assemble_sequence(&chirp, &SequenceLayout::default(), None).unwrap();
        let back = roundtrip(&seq);
        assert_eq!(back.n_channels(), 4);
        assert_eq!(back.len(), seq.len());
        assert_eq!(back.sample_rate(), 48_000.0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let chirp = generate_chirp(&ChirpSpec::default()).unwrap();
        write_mono(&chirp, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), 480);
    }

    #[test]
    fn zero_length_rejected() {
        let empty = MultiChannel::new(vec![vec![]], 48_000.0).unwrap();
        let mut buf = Vec::new();
        assert!(matches!(write_wav_to(&empty, &mut buf), Err(Error::Wav { field: "data", .. })));
    }

    #[test]
    fn out_of_range_rejected() {
        let loud = MultiChannel::new(vec![vec![0.0, 1.5]], 48_000.0).unwrap();
        assert!(write_wav_to(&loud, &mut Vec::new()).is_err());
    }

    #[test]
    fn diagnostics_name_header_fields() {
        let chirp = generate_chirp(&ChirpSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_wav_to(&MultiChannel::from_signals(&[chirp]).unwrap(), &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        let e = read_wav_from(&mut bad.as_slice()).unwrap_err();
        assert!(e.to_string().contains("RIFF chunk id"), "{e}");

        let mut bad = buf.clone();
        bad[20] = 3; // IEEE float
        let e = read_wav_from(&mut bad.as_slice()).unwrap_err();
        assert!(e.to_string().contains("audio_format"), "{e}");

        let mut bad = buf.clone();
        bad[34] = 24;
        let e = read_wav_from(&mut bad.as_slice()).unwrap_err();
        assert!(e.to_string().contains("bits_per_sample"), "{e}");

        let truncated = &buf[..buf.len() - 100];
        let e = read_wav_from(&mut &truncated[..]).unwrap_err();
        assert!(e.to_string().contains("chunk size"), "{e}");

        let e = read_wav_from(&mut &b"junk"[..]).unwrap_err();
        assert!(e.to_string().contains("RIFF header"), "{e}");
    }

    #[test]
    fn skips_unknown_chunks() {
        let sig = MultiChannel::new(vec![vec![0.5, -0.5, 0.25]], 8_000.0).unwrap();
        let mut buf = Vec::new();
        write_wav_to(&sig, &mut buf).unwrap();
        // Splice a LIST chunk with odd length (plus pad byte) before `data`.
        let mut spliced = buf[..36].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&3u32.to_le_bytes());
        spliced.extend_from_slice(b"abc\0");
        spliced.extend_from_slice(&buf[36..]);
        let back = read_wav_from(&mut spliced.as_slice()).unwrap();
        assert_eq!(back.channel(0), &[0.5, -0.5, 0.25]);
    }
}
