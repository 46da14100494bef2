//! Mono WAV ingestion (PCM 16/24-bit integer and 32-bit float).

use std::path::Path;

use super::signal::Signal;
use crate::error::{AncError, Result};

pub fn read_wav_mono(path: &Path) -> Result<Signal> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AncError::Configuration(format!(
            "{}: expected a mono file, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let full_scale = (1i64 << (bits - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / full_scale)).collect::<std::result::Result<_, _>>()?
        }
        (format, bits) => {
            return Err(AncError::Configuration(format!("unsupported WAV encoding {format:?} {bits}-bit")));
        }
    };
    Signal::new(samples, spec.sample_rate as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, bits: u16, format: hound::SampleFormat, channels: u16, values: &[f64]) {
        let spec = hound::WavSpec { channels, sample_rate: 8000, bits_per_sample: bits, sample_format: format };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &v in values {
            match format {
                hound::SampleFormat::Float => w.write_sample(v as f32).unwrap(),
                hound::SampleFormat::Int => w.write_sample((v * (1i64 << (bits - 1)) as f64) as i32).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn reads_supported_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let values = [0.0, 0.5, -0.25, 0.125];
        for (bits, format) in [(16, hound::SampleFormat::Int), (24, hound::SampleFormat::Int), (32, hound::SampleFormat::Float)] {
            let p = dir.path().join(format!("x{bits}.wav"));
            write(&p, bits, format, 1, &values);
            let s = read_wav_mono(&p).unwrap();
            assert_eq!(s.sample_rate(), 8000.0);
            for (a, b) in s.samples().iter().zip(values) {
                assert!((a - b).abs() < 1e-4, "{bits}-bit: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        write(&p, 16, hound::SampleFormat::Int, 2, &[0.0, 0.0]);
        assert!(matches!(read_wav_mono(&p), Err(AncError::Configuration(_))));
    }
}
