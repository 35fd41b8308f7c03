//! Mono WAV reading and writing (16-bit PCM or 32-bit float).

use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

const PCM16_MAX: f64 = 1.0 - 1.0 / 32768.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavFormat {
    #[default]
    Pcm16,
    Float32,
}

impl std::str::FromStr for WavFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pcm16" => Ok(Self::Pcm16),
            "float32" => Ok(Self::Float32),
            other => Err(format!("unknown WAV format `{other}` (expected pcm16 or float32)")),
        }
    }
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::FormatError(m) => Error::Wav {
            path: path.into(),
            field: "header",
            message: m.into(),
        },
        hound::Error::Unsupported => Error::Wav {
            path: path.into(),
            field: "format",
            message: "unsupported encoding".into(),
        },
        other => Error::Wav {
            path: path.into(),
            field: "format",
            message: other.to_string(),
        },
    }
}

/// Reads a 16 kHz mono file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    read_wav_at(path, Some(DEFAULT_SAMPLE_RATE))
}

/// Reads a mono file, checking the sample rate when `expected_rate` is set.
pub fn read_wav_at(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav_named(&bytes, expected_rate, path)
}

pub fn decode_wav(bytes: &[u8], expected_rate: Option<u32>) -> Result<Waveform> {
    decode_wav_named(bytes, expected_rate, Path::new("<memory>"))
}

fn decode_wav_named(bytes: &[u8], expected_rate: Option<u32>, path: &Path) -> Result<Waveform> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    let bad = |field, message: String| Error::Wav {
        path: path.into(),
        field,
        message,
    };
    if spec.channels != 1 {
        return Err(bad("channels", format!("expected mono, found {} channels", spec.channels)));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(bad(
                "sample_rate",
                format!("expected {rate} Hz, found {} Hz", spec.sample_rate),
            ));
        }
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (fmt, bits) => {
            return Err(bad(
                "bits_per_sample",
                format!("{bits}-bit {fmt:?} is not supported (use 16-bit PCM or 32-bit float)"),
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| bad("data", e.to_string()))
}

/// Quantizes one sample to 16-bit PCM.
pub fn to_pcm16(x: f64) -> i16 {
    (x.clamp(-1.0, PCM16_MAX) * 32768.0).round() as i16
}

pub fn encode_wav(x: &Waveform, format: WavFormat) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: x.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mem = Path::new("<memory>");
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = WavWriter::new(&mut cursor, spec).map_err(|e| hound_err(mem, e))?;
        for &s in x.samples() {
            match format {
                WavFormat::Pcm16 => w.write_sample(to_pcm16(s)),
                WavFormat::Float32 => w.write_sample(s as f32),
            }
            .map_err(|e| hound_err(mem, e))?;
        }
        w.finalize().map_err(|e| hound_err(mem, e))?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(x: &Waveform, path: &Path, format: WavFormat) -> Result<()> {
    let bytes = encode_wav(x, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pcm16_bytes(samples: &[i16], channels: u16, rate: u32) -> Vec<u8> {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut cursor = Cursor::new(Vec::new());
        let mut w = WavWriter::new(&mut cursor, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        cursor.into_inner()
    }

    #[test]
    fn pcm16_scaling() {
        let x = decode_wav(&pcm16_bytes(&[0, 16384, -32768], 1, 16000), Some(16000)).unwrap();
        assert_eq!(x.samples(), &[0.0, 0.5, -1.0]);
    }

    #[test]
    fn stereo_and_rate_are_rejected_by_field() {
        let err = decode_wav(&pcm16_bytes(&[0, 0, 1, 1], 2, 16000), None).unwrap_err();
        assert!(matches!(err, Error::Wav { field: "channels", .. }), "{err}");
        let err = decode_wav(&pcm16_bytes(&[0, 1], 1, 48000), Some(16000)).unwrap_err();
        assert!(matches!(err, Error::Wav { field: "sample_rate", .. }), "{err}");
        assert!(decode_wav(&pcm16_bytes(&[0, 1], 1, 48000), None).is_ok());
        let err = decode_wav(b"RIFF\0\0\0\0WAVEjunk", None).unwrap_err();
        assert!(matches!(err, Error::Wav { .. } | Error::Io { .. }), "{err}");
    }

    #[test]
    fn pcm16_clamps_and_rounds_half_away() {
        assert_eq!(to_pcm16(1.5), 32767);
        assert_eq!(to_pcm16(-1.5), -32768);
        assert_eq!(to_pcm16(0.5 / 32768.0), 1);
        assert_eq!(to_pcm16(-0.5 / 32768.0), -1);
        assert_eq!(to_pcm16(0.49 / 32768.0), 0);
    }

    #[test]
    fn float32_round_trip_is_lossless() {
        let samples: Vec<f64> = (0..1000).map(|i| (((i as f32) * 0.37).sin() * 0.9) as f64).collect();
        let x = Waveform::new(samples, 16000).unwrap();
        let back = decode_wav(&encode_wav(&x, WavFormat::Float32).unwrap(), Some(16000)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn int16_payload_survives_read_write() {
        let payload: Vec<i16> = (0..4000).map(|i| ((i * 7919) % 65536) as i32 as i16).collect();
        let original = pcm16_bytes(&payload, 1, 16000);
        let x = decode_wav(&original, Some(16000)).unwrap();
        assert_eq!(encode_wav(&x, WavFormat::Pcm16).unwrap(), original);
    }

    proptest! {
        #[test]
        fn pcm16_within_one_step(samples in prop::collection::vec(-1.2f64..1.2, 1..300)) {
            let x = Waveform::new(samples.clone(), 16000).unwrap();
            let back = decode_wav(&encode_wav(&x, WavFormat::Pcm16).unwrap(), None).unwrap();
            for (a, b) in samples.iter().zip(back.samples()) {
                let a = a.clamp(-1.0, PCM16_MAX);
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
