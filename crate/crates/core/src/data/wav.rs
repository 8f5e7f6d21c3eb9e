use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result, WavError};

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io)
            if matches!(
                io.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ) =>
        {
            Error::Io(io)
        }
        hound::Error::Unsupported => WavError::UnsupportedEncoding("unsupported wav variant".into()).into(),
        other => WavError::MalformedHeader(other.to_string()).into(),
    }
}

/// Reads a 16-bit PCM mono file as samples in `[-1, 1)` and its sample rate.
pub fn load_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(WavError::UnsupportedEncoding(format!(
            "{:?} with {} bits per sample",
            spec.sample_format, spec.bits_per_sample
        ))
        .into());
    }
    if spec.channels != 1 {
        return Err(WavError::NotMono(spec.channels).into());
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    if samples.len() != expected {
        return Err(WavError::MalformedHeader(format!(
            "header declares {expected} samples, file holds {}",
            samples.len()
        ))
        .into());
    }
    Ok((samples, spec.sample_rate))
}

/// Writes samples (clamped to `[-1, 1]`) as 16-bit PCM mono.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in samples {
        if !s.is_finite() {
            return Err(Error::invalid("cannot write non-finite samples"));
        }
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.wav");
        let x: Vec<f32> = (0..8000)
            .map(|i| (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 8000.0).sin() * 0.99)
            .collect();
        write_wav(&p, &x, 8000).unwrap();
        let (y, sr) = load_wav(&p).unwrap();
        assert_eq!(sr, 8000);
        assert_eq!(y.len(), x.len());
        let worst = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= 1.0 / 32768.0, "{worst}");
        write_wav(&p, &[1.0, -1.0], 8000).unwrap();
        let (y, _) = load_wav(&p).unwrap();
        assert!((y[0] - 1.0).abs() <= 1.0 / 32768.0 && y[1] == -1.0);
    }

    #[test]
    fn truncated_file_is_a_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        write_wav(&p, &vec![0.25; 100], 8000).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [10, 30, bytes.len() - 7] {
            std::fs::write(&p, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_wav(&p), Err(Error::Wav(WavError::MalformedHeader(_)))),
                "cut {cut}: {:?}",
                load_wav(&p)
            );
        }
    }

    #[test]
    fn other_encodings_and_stereo_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let spec = |channels, bits| WavSpec {
            channels,
            sample_rate: 8000,
            bits_per_sample: bits,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&p, spec(1, 24)).unwrap();
        (0..10).for_each(|i| w.write_sample(i * 1000).unwrap());
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Wav(WavError::UnsupportedEncoding(_)))));

        let mut w = WavWriter::create(&p, spec(2, 16)).unwrap();
        (0..10).for_each(|i| w.write_sample(i as i16).unwrap());
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Wav(WavError::NotMono(2)))));

        let mut w = WavWriter::create(
            &p,
            WavSpec {
                sample_format: SampleFormat::Float,
                ..spec(1, 32)
            },
        )
        .unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Wav(WavError::UnsupportedEncoding(_)))));
    }
}
