#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dcodec/audio.hpp"
#include "dcodec/codec.hpp"

// Metrics and analyses: spectral errors, STOI, token/bit rates, codebook
// utilization and latent-space clustering.
namespace dcodec::eval {

// mean |log-mel(x) - log-mel(xhat)| at n_fft 1024, hop 256, 80 mels
double mel_error(const audio::AudioBuffer& x, const audio::AudioBuffer& xhat);

// mean over FFT sizes {512,1024,2048} (hop = fft/4) of
// mean|A - B| + mean|log A - log B| on magnitudes (log floored at 1e-5)
double stft_distance(const audio::AudioBuffer& x, const audio::AudioBuffer& xhat);

// Short-time objective intelligibility (the published 2011 algorithm's
// constants: 10 kHz, 256-sample frames zero-padded to 512, 15 third-octave
// bands from 150 Hz, 384 ms segments, -15 dB clipping, 40 dB silence cut).
double stoi(const audio::AudioBuffer& clean, const audio::AudioBuffer& degraded);

// tokens per second: (tokens emitted * quantizer stages) / seconds
double tkr(double frame_rate, int quantizer_stages);
double tkr_from_stream(const codec::TokenStream& stream);

// BPS = frame_rate * sum_i ceil(log2 k_i)
double bps(double frame_rate, const std::vector<int64_t>& codebook_sizes);
// payload-only and payload+length-field rates for a concrete stream
double bps_payload_from_stream(const codec::TokenStream& stream);
double bps_total_from_stream(const codec::TokenStream& stream);

struct UtilizationReport {
  uint64_t vocab_size = 0;
  uint64_t used_count = 0;
  double utilization_rate = 0.0;
  // (token, frequency ratio) sorted by descending ratio, truncated to top_k
  std::vector<std::pair<uint64_t, double>> top;

  std::string to_csv() const;  // rank,token,ratio
};

UtilizationReport codebook_utilization(const std::vector<uint64_t>& tokens, uint64_t vocab_size,
                                       int top_k = 50);

struct KmeansResult {
  std::vector<int> assignments;            // per sampled point
  std::vector<std::vector<double>> centers;
  double silhouette = 0.0;
  std::vector<int> sampled_indices;        // which input rows were used
};

// k-means++ seeding + Lloyd iterations on a random sample of `sample_n` rows
// (all rows when sample_n >= n). Silhouette is the mean of (b-a)/max(a,b);
// all-identical samples define it as 0.
KmeansResult kmeans_silhouette(const std::vector<std::vector<double>>& points, int k,
                               int max_iter = 30, uint64_t seed = 42, int sample_n = 500);

struct UtteranceMetrics {
  std::string path;
  double mel_error = 0.0;
  double stft_distance = 0.0;
  double stoi = 0.0;
  double tkr = 0.0;
  double bps_payload = 0.0;
  double bps_total = 0.0;
  int segments = 0;
  double seconds = 0.0;
};

struct MetricReport {
  std::vector<UtteranceMetrics> utterances;
  UtteranceMetrics aggregate;  // means over utterances (path = "aggregate")
  // always present but unavailable in this build (external models required)
  std::string wer = "unavailable";
  std::string pesq = "unavailable";
};

// line-delimited JSON: header record, per-utterance records, aggregate record
void write_report(const MetricReport& report, const std::string& path);
MetricReport read_report(const std::string& path);

}  // namespace dcodec::eval
