#pragma once

#include <string>

#include "dcodec/codec.hpp"
#include "dcodec/detector.hpp"

// Flat "section.key = value" run configuration. Every key has a default;
// unknown keys are rejected; dump() emits the canonical form (which parses
// back to an identical config).
namespace dcodec::cfg {

struct TrainingSection {
  int detector_steps = 200;
  int detector_batch = 8;
  double detector_lr = 5e-4;
  int codec_steps = 500;
  int codec_batch = 2;
  double codec_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double holdout_fraction = 0.2;
  int eval_every = 50;
  int max_anchors = 48;
};

struct EvalSection {
  int kmeans_k = 4;
  int kmeans_iters = 30;
  uint64_t kmeans_seed = 42;
  int sample_n = 500;
  int top_k = 50;
};

struct RunConfig {
  det::DetectorConfig detector;
  codec::CodecConfig codec;
  TrainingSection training;
  EvalSection eval;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_string(const std::string& text);

  std::string dump() const;
  void validate() const;
};

}  // namespace dcodec::cfg
