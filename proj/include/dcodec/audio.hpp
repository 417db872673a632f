#pragma once

#include <string>
#include <vector>

// WAV I/O, resampling and the spectral transforms used by losses and metrics.
// All functions are pure; buffers are immutable once built.
namespace dcodec::audio {

struct AudioBuffer {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = 16000;

  double duration_s() const { return samples.empty() ? 0.0 : (double)samples.size() / sample_rate; }
};

// time-major: magnitudes[frame * bins + bin]
struct Spectrogram {
  std::vector<double> magnitudes;
  int frames = 0;
  int bins = 0;
  int hop = 0;
  int window = 0;

  double at(int frame, int bin) const { return magnitudes[(size_t)frame * bins + bin]; }
};

// 16-bit PCM mono RIFF/WAVE only; anything else is rejected with a message.
AudioBuffer read_wav(const std::string& path);
// Out-of-range samples clamp to +-1 before the int16 conversion.
void write_wav(const AudioBuffer& buffer, const std::string& path);

// Linear interpolation; output length = round(len * target / source).
AudioBuffer resample_linear(const AudioBuffer& buffer, int target_rate);

// Hann-windowed magnitude spectra with reflection padding of window/2 on both
// sides. Signals shorter than the window are zero-padded up to it first.
// Frame count = floor(padded_len - window, hop) + 1 = floor(len/hop) + 1.
Spectrogram stft_magnitude(const AudioBuffer& buffer, int window_len, int hop);

// HTK-scale triangular filterbank, rows n_mels x (n_fft/2 + 1). Rows that
// would rasterize to all zeros get unit weight at the bin nearest their
// center so every band stays responsive.
std::vector<double> mel_filterbank(int n_mels, int n_fft, int sample_rate);

// log(1e-5 + filterbank * power_spectrum); frames as in stft_magnitude.
Spectrogram mel_spectrogram(const AudioBuffer& buffer, int n_fft, int hop, int n_mels);

}  // namespace dcodec::audio
