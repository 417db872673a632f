#include "dcodec/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace dcodec::synth {

ToneUtterance make_tone_utterance(const ToneOptions& opts, ng::Rng& rng) {
  ToneUtterance out;
  out.buffer.sample_rate = opts.sample_rate;
  const int n_seg = (int)rng.randint(opts.min_segments, opts.max_segments);
  int last_freq = -1;
  for (int s = 0; s < n_seg; ++s) {
    int fi = (int)rng.randint(0, (int64_t)opts.freqs.size() - 1);
    if (fi == last_freq) fi = (fi + 1) % (int)opts.freqs.size();  // force a change
    last_freq = fi;
    const double f = opts.freqs[fi];
    const int len = (int)std::lround(rng.uniform(opts.min_segment_s, opts.max_segment_s) * opts.sample_rate);
    const double phase0 = rng.uniform(0.0, 2.0 * M_PI);
    const size_t start = out.buffer.samples.size();
    for (int i = 0; i < len; ++i) {
      const double t = (double)(start + i) / opts.sample_rate;
      const double am = 1.0 + opts.am_depth * std::sin(2.0 * M_PI * opts.am_rate_hz * t);
      double v = opts.amplitude * am * std::sin(phase0 + 2.0 * M_PI * f * i / opts.sample_rate);
      if (opts.noise > 0.0) v += rng.normal(0.0, opts.noise);
      out.buffer.samples.push_back(std::clamp(v, -1.0, 1.0));
    }
    if (s + 1 < n_seg) out.boundary_samples.push_back((int)out.buffer.samples.size());
  }
  return out;
}

ToneCorpus write_tone_corpus(const std::string& dir, int n_utterances, uint64_t seed,
                             const ToneOptions& opts) {
  if (n_utterances < 1) throw std::runtime_error("write_tone_corpus: need at least one utterance");
  std::filesystem::create_directories(dir);
  ng::Rng rng(seed);
  ToneCorpus corpus;
  corpus.manifest_path = dir + "/manifest.txt";
  std::ofstream manifest(corpus.manifest_path);
  if (!manifest) throw std::runtime_error("cannot write manifest: " + corpus.manifest_path);
  for (int i = 0; i < n_utterances; ++i) {
    ToneUtterance utt = make_tone_utterance(opts, rng);
    char name[32];
    std::snprintf(name, sizeof(name), "tone_%03d.wav", i);
    const std::string path = dir + "/" + name;
    audio::write_wav(utt.buffer, path);
    manifest << path << "\n";
    corpus.wav_paths.push_back(path);
    corpus.boundary_samples.push_back(utt.boundary_samples);
  }
  return corpus;
}

}  // namespace dcodec::synth
