use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

fn wav_err(path: &Path, msg: impl ToString) -> Error {
    Error::Wav {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

/// Reads a mono PCM16 RIFF/WAVE file, scaling samples by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(path, format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            format!("unsupported encoding {:?}/{} bits", spec.sample_format, spec.bits_per_sample),
        ));
    }
    if spec.sample_rate == 0 {
        return Err(wav_err(path, "sample rate 0"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| wav_err(path, e))
}

/// Quantizes to PCM16 (round half away from zero, clamped) and writes a mono file.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in w.samples() {
        writer.write_sample(quantize(s)).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

pub(crate) fn quantize(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
