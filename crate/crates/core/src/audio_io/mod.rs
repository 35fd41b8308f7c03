//! WAV I/O, JSON-lines manifests and the synthetic tone-in-noise corpus.

pub mod manifest;
pub mod synth;
pub mod wav;

pub use manifest::{Manifest, ManifestEntry, Provenance, MANIFEST_SCHEMA};
pub use synth::{generate_synthetic, NoiseKind, SynthSpec};
pub use wav::{decode_wav, encode_wav, read_wav, read_wav_at, write_wav, WavFormat, DEFAULT_SAMPLE_RATE};
