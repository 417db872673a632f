#pragma once

#include <string>
#include <vector>

#include "dcodec/audio.hpp"
#include "dcodec/tensor.hpp"

// Synthetic tone corpora for desk-scale training and tests: utterances built
// from concatenated constant-frequency segments with known transition points.
namespace dcodec::synth {

struct ToneOptions {
  int sample_rate = 16000;
  int min_segments = 3;
  int max_segments = 5;
  double min_segment_s = 0.25;
  double max_segment_s = 0.45;
  std::vector<double> freqs{300.0, 550.0, 900.0, 1400.0, 2200.0, 3300.0};
  double amplitude = 0.5;
  double am_depth = 0.25;   // slow amplitude modulation so band envelopes vary
  double am_rate_hz = 3.0;
  double noise = 0.003;
};

struct ToneUtterance {
  audio::AudioBuffer buffer;
  std::vector<int> boundary_samples;  // interior transition sample offsets
};

ToneUtterance make_tone_utterance(const ToneOptions& opts, ng::Rng& rng);

struct ToneCorpus {
  std::string manifest_path;
  std::vector<std::string> wav_paths;
  std::vector<std::vector<int>> boundary_samples;  // per utterance
};

// Writes n WAVs plus a manifest under dir (created if needed).
ToneCorpus write_tone_corpus(const std::string& dir, int n_utterances, uint64_t seed,
                             const ToneOptions& opts = {});

}  // namespace dcodec::synth
