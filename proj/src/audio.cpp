#include "dcodec/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dcodec/kernels.hpp"

namespace dcodec::audio {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

uint32_t rd_u32(const uint8_t* p) {
  return (uint32_t)p[0] | ((uint32_t)p[1] << 8) | ((uint32_t)p[2] << 16) | ((uint32_t)p[3] << 24);
}
uint16_t rd_u16(const uint8_t* p) { return (uint16_t)(p[0] | (p[1] << 8)); }

}  // namespace

AudioBuffer read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open WAV file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) fail("malformed WAV header (file too small): " + path);
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    fail("not a RIFF/WAVE file: " + path);

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  const uint8_t* data = nullptr;
  uint32_t data_len = 0;

  size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + off);
    const uint32_t sz = rd_u32(bytes.data() + off + 4);
    const size_t body = off + 8;
    if (body + sz > bytes.size()) fail("malformed WAV chunk (size exceeds file): " + path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (sz < 16) fail("malformed fmt chunk: " + path);
      format = rd_u16(bytes.data() + body);
      channels = rd_u16(bytes.data() + body + 2);
      rate = rd_u32(bytes.data() + body + 4);
      bits = rd_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data = bytes.data() + body;
      data_len = sz;
    }
    off = body + sz + (sz & 1);  // chunks are word-aligned
  }

  if (!have_fmt) fail("missing fmt chunk: " + path);
  if (data == nullptr) fail("missing data chunk: " + path);
  if (format != 1) fail("unsupported encoding (only PCM is supported): " + path);
  if (channels != 1) fail("unsupported channel count (" + std::to_string(channels) + "), mono required: " + path);
  if (bits != 16) fail("unsupported bit depth (" + std::to_string(bits) + "), 16-bit required: " + path);
  if (rate == 0) fail("invalid sample rate 0: " + path);

  AudioBuffer out;
  out.sample_rate = (int)rate;
  const size_t n = data_len / 2;
  out.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const int16_t v = (int16_t)(data[2 * i] | (data[2 * i + 1] << 8));
    out.samples[i] = (double)v / 32768.0;
  }
  return out;
}

void write_wav(const AudioBuffer& buffer, const std::string& path) {
  if (buffer.sample_rate <= 0) fail("write_wav: sample_rate must be positive");
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open WAV file for writing: " + path);

  const uint32_t data_len = (uint32_t)(buffer.samples.size() * 2);
  const uint32_t riff_len = 36 + data_len;
  const uint32_t rate = (uint32_t)buffer.sample_rate;
  const uint32_t byte_rate = rate * 2;

  uint8_t hdr[44];
  std::memcpy(hdr, "RIFF", 4);
  std::memcpy(hdr + 8, "WAVE", 4);
  std::memcpy(hdr + 12, "fmt ", 4);
  std::memcpy(hdr + 36, "data", 4);
  auto wr_u32 = [&](size_t at, uint32_t v) {
    hdr[at] = v & 0xff; hdr[at + 1] = (v >> 8) & 0xff; hdr[at + 2] = (v >> 16) & 0xff; hdr[at + 3] = (v >> 24) & 0xff;
  };
  auto wr_u16 = [&](size_t at, uint16_t v) { hdr[at] = v & 0xff; hdr[at + 1] = (v >> 8) & 0xff; };
  wr_u32(4, riff_len);
  wr_u32(16, 16);      // fmt chunk size
  wr_u16(20, 1);       // PCM
  wr_u16(22, 1);       // mono
  wr_u32(24, rate);
  wr_u32(28, byte_rate);
  wr_u16(32, 2);       // block align
  wr_u16(34, 16);      // bits per sample
  wr_u32(40, data_len);
  os.write(reinterpret_cast<const char*>(hdr), 44);

  std::vector<uint8_t> pcm(buffer.samples.size() * 2);
  for (size_t i = 0; i < buffer.samples.size(); ++i) {
    double v = buffer.samples[i];
    if (v > 1.0) v = 1.0;
    if (v < -1.0) v = -1.0;
    double scaled = v * 32768.0;
    if (scaled > 32767.0) scaled = 32767.0;
    const int16_t q = (int16_t)std::lrint(scaled);
    pcm[2 * i] = (uint8_t)(q & 0xff);
    pcm[2 * i + 1] = (uint8_t)((q >> 8) & 0xff);
  }
  os.write(reinterpret_cast<const char*>(pcm.data()), (std::streamsize)pcm.size());
  if (!os) fail("I/O failure writing WAV: " + path);
}

AudioBuffer resample_linear(const AudioBuffer& buffer, int target_rate) {
  if (target_rate <= 0) fail("resample_linear: target rate must be positive");
  if (target_rate == buffer.sample_rate) return buffer;
  AudioBuffer out;
  out.sample_rate = target_rate;
  const size_t n = buffer.samples.size();
  const size_t m = (size_t)std::llround((double)n * target_rate / buffer.sample_rate);
  out.samples.resize(m);
  if (n == 0) return out;
  const double step = (double)buffer.sample_rate / target_rate;
  for (size_t i = 0; i < m; ++i) {
    const double pos = i * step;
    const size_t i0 = (size_t)pos;
    if (i0 + 1 >= n) {
      out.samples[i] = buffer.samples[n - 1];  // hold the last sample
      continue;
    }
    const double frac = pos - i0;
    out.samples[i] = buffer.samples[i0] * (1.0 - frac) + buffer.samples[i0 + 1] * frac;
  }
  return out;
}

namespace {

// reflection-padded copy with window/2 on each side; zero-extend first when
// the signal is shorter than the window
std::vector<double> pad_for_stft(const std::vector<double>& x, int window_len) {
  std::vector<double> sig = x;
  if ((int)sig.size() < window_len) sig.resize(window_len, 0.0);
  const int n = (int)sig.size();
  const int pad = window_len / 2;
  std::vector<double> out(n + 2 * pad);
  for (int i = 0; i < n + 2 * pad; ++i) {
    int s = i - pad;
    if (s < 0) s = -s;
    if (s >= n) s = 2 * (n - 1) - s;
    out[i] = sig[s];
  }
  return out;
}

}  // namespace

Spectrogram stft_magnitude(const AudioBuffer& buffer, int window_len, int hop) {
  if (hop <= 0 || window_len < hop) fail("stft_magnitude: need window_len >= hop > 0");
  if ((window_len & (window_len - 1)) != 0) fail("stft_magnitude: window_len must be a power of two");
  std::vector<double> padded = pad_for_stft(buffer.samples, window_len);

  kern::StftDims d;
  d.len = (int)padded.size();
  d.win = window_len;
  d.n_fft = window_len;
  d.hop = hop;

  std::vector<double> window(window_len);
  for (int i = 0; i < window_len; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / window_len);

  Spectrogram s;
  s.frames = d.frames();
  s.bins = d.bins();
  s.hop = hop;
  s.window = window_len;
  s.magnitudes.resize((size_t)s.frames * s.bins);
  kern::stft_mag_fwd(padded.data(), window.data(), s.magnitudes.data(), d);
  return s;
}

std::vector<double> mel_filterbank(int n_mels, int n_fft, int sample_rate) {
  const int bins = n_fft / 2 + 1;
  if (n_mels >= bins) fail("mel_filterbank: n_mels must be < n_fft/2 + 1");
  auto hz_to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto mel_to_hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };

  const double mel_lo = hz_to_mel(0.0);
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> hz(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    hz[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));

  std::vector<double> fb((size_t)n_mels * bins, 0.0);
  const double bin_hz = (double)sample_rate / n_fft;
  for (int m = 0; m < n_mels; ++m) {
    const double lo = hz[m], mid = hz[m + 1], hi = hz[m + 2];
    bool any = false;
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > lo && f < hi) w = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      if (w > 0.0) {
        fb[(size_t)m * bins + k] = w;
        any = true;
      }
    }
    if (!any) {
      const int k = std::min(bins - 1, (int)std::lround(mid / bin_hz));
      fb[(size_t)m * bins + k] = 1.0;
    }
  }
  return fb;
}

Spectrogram mel_spectrogram(const AudioBuffer& buffer, int n_fft, int hop, int n_mels) {
  Spectrogram spec = stft_magnitude(buffer, n_fft, hop);
  std::vector<double> fb = mel_filterbank(n_mels, n_fft, buffer.sample_rate);

  Spectrogram out;
  out.frames = spec.frames;
  out.bins = n_mels;
  out.hop = hop;
  out.window = n_fft;
  out.magnitudes.resize((size_t)spec.frames * n_mels);
  for (int f = 0; f < spec.frames; ++f) {
    for (int m = 0; m < n_mels; ++m) {
      double acc = 0.0;
      const double* row = fb.data() + (size_t)m * spec.bins;
      const double* s = spec.magnitudes.data() + (size_t)f * spec.bins;
      for (int k = 0; k < spec.bins; ++k) acc += row[k] * s[k] * s[k];
      out.magnitudes[(size_t)f * n_mels + m] = std::log(1e-5 + acc);
    }
  }
  return out;
}

}  // namespace dcodec::audio
