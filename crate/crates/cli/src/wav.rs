//! 16-bit PCM mono WAV ingestion and emission.

use a2v_core::audio::Waveform;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Codec { path: String, source: hound::Error },
    #[error("{path}: expected 16-bit PCM mono, got {channels} channels / {bits} bits ({format:?})")]
    Unsupported { path: String, channels: u16, bits: u16, format: hound::SampleFormat },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

pub fn read_wav_mono16(path: &Path) -> Result<Waveform, WavError> {
    let disp = path.display().to_string();
    let mut reader = hound::WavReader::open(path)
        .map_err(|source| WavError::Codec { path: disp.clone(), source })?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(WavError::Unsupported {
            path: disp,
            channels: spec.channels,
            bits: spec.bits_per_sample,
            format: spec.sample_format,
        });
    }
    let samples: Result<Vec<i16>, hound::Error> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|source| WavError::Codec { path: disp.clone(), source })?;
    Waveform::new(
        samples.iter().map(|&s| s as f64 / 32768.0).collect(),
        spec.sample_rate,
    )
    .map_err(|e| WavError::Invalid { path: disp, reason: e.to_string() })
}

pub fn write_wav_mono16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), WavError> {
    let disp = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|source| WavError::Codec { path: disp.clone(), source })?;
    for &s in samples {
        let v = (s * 32767.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer
            .write_sample(v)
            .map_err(|source| WavError::Codec { path: disp.clone(), source })?;
    }
    writer.finalize().map_err(|source| WavError::Codec { path: disp, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_quantised_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1600).map(|i| 0.5 * (i as f64 * 0.02).sin()).collect();
        write_wav_mono16(&path, &samples, 16_000).unwrap();
        let w = read_wav_mono16(&path).unwrap();
        assert_eq!(w.sample_rate(), 16_000);
        assert_eq!(w.samples().len(), 1600);
        for (orig, got) in samples.iter().zip(w.samples()) {
            assert!((orig - got).abs() < 1.0 / 32000.0);
        }
        // reading back and re-writing is byte-stable
        let path2 = dir.path().join("t2.wav");
        write_wav_mono16(&path2, w.samples(), 16_000).unwrap();
        let w2 = read_wav_mono16(&path2).unwrap();
        assert_eq!(w.samples(), w2.samples());
    }
}
