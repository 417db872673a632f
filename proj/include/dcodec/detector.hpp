#pragma once

#include <string>
#include <vector>

#include "dcodec/audio.hpp"
#include "dcodec/tensor.hpp"

// Self-supervised acoustic boundary detector: a small conv stack over raw
// audio trained contrastively to tell nearby frames apart, plus the
// score-normalization / peak-picking inference path.
namespace dcodec::det {

struct DetectorConfig {
  std::vector<int> kernel_sizes{10, 8, 8, 4, 4};
  std::vector<int> strides{5, 4, 4, 2, 2};
  int embed_dim = 64;
  int proj_dim = 32;
  double alpha = 1.0;   // similarity scaling coefficient
  double tau = 0.5;     // contrastive temperature
  int pred_steps = 1;   // prediction horizon k
  int n_negatives = 10;
  double prominence = 0.01;
  // optional peak constraints, 0 = disabled
  int min_peak_distance = 0;
  int min_peak_width = 0;
  bool use_layer_norm = true;

  int downsample_ratio() const;
  void validate() const;
};

// Strictly increasing interior frame indices partitioning [0, T).
struct BoundarySet {
  std::vector<int> indices;
  int total_frames = 0;

  void validate() const;  // throws on violation
};

struct DetectorModel {
  DetectorConfig cfg;
  ng::ParamStore params;

  DetectorModel(const DetectorConfig& c, uint64_t seed);

  // raw samples -> latent frames [proj_dim, T]
  ng::Tensor forward(const std::vector<double>& samples) const;

  void save(const std::string& path) const;
  static DetectorModel load(const std::string& path);
};

// score_t = -alpha * cos(z_t, z_{t+k}); output [T-k]
ng::Tensor similarity_scores(const ng::Tensor& z, int k, double alpha);

// mean over anchors of -log(exp(s+/tau) / (exp(s+/tau) + sum_n exp(s-_n/tau)));
// positives [A], negatives [A][N] as raw cosine scores
ng::Tensor contrastive_loss(const std::vector<ng::Tensor>& positives,
                            const std::vector<std::vector<ng::Tensor>>& negatives, double tau);

// N distinct frame indices drawn uniformly from [0,T) excluding |t-anchor| <= k
std::vector<int> sample_negatives(int total_frames, int anchor, int n, int k, ng::Rng& rng);

// 1 - cos(z_t, z_{t+1}) per consecutive pair; plain numeric path (no grads)
std::vector<double> dissimilarity_trace(const ng::Tensor& z);

// In-place min-max normalization to [0,1]; returns false for constant traces.
bool min_max_normalize(std::vector<double>& trace);

// Interior local maxima with topographic prominence >= threshold, on an
// already-normalized trace. Optional minimum peak distance / width constraints
// (0 = disabled). Plateau peaks report their leftmost sample.
std::vector<int> find_peaks(const std::vector<double>& trace, double prominence,
                            int min_distance = 0, int min_width = 0);

BoundarySet detect_boundaries(const audio::AudioBuffer& buffer, const DetectorModel& model);

struct TrainOptions {
  int steps = 200;
  int batch = 8;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  uint64_t seed = 0;
  double holdout_fraction = 0.2;
  int eval_every = 20;        // holdout evaluation cadence (steps)
  int max_anchors = 48;       // cap per-utterance anchors to bound step cost
};

struct TrainLog {
  std::vector<double> train_loss;              // one entry per step
  std::vector<std::pair<int, double>> holdout; // (step, loss)
  double initial_holdout = 0.0;
  double final_holdout = 0.0;
};

// Trains on the WAVs listed in `manifest_paths` (last holdout_fraction of the
// list is held out). Returns the trained model plus the loss curves.
TrainLog train_detector(DetectorModel& model, const std::vector<std::string>& manifest_paths,
                        const TrainOptions& opts);

// manifest file: one WAV path per line, '#' comments allowed
std::vector<std::string> read_manifest(const std::string& path);

// boundary dump line: "path: b1,b2,..."
std::string format_boundary_line(const std::string& path, const BoundarySet& b);

}  // namespace dcodec::det
