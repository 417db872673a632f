#pragma once

#include <string>
#include <vector>

#include "dcodec/detector.hpp"
#include "dcodec/tensor.hpp"

// Variable-length segment handling: cut a latent sequence at boundaries,
// squeeze each segment to a single vector and expand it back.
namespace dcodec::seg {

// Half-open (start, end) intervals tiling [0, T) exactly.
struct SegmentLayout {
  struct Interval {
    int start = 0;
    int end = 0;
    int length() const { return end - start; }
  };
  std::vector<Interval> records;
  int total_frames = 0;

  static SegmentLayout from_boundaries(const det::BoundarySet& b);
  void validate() const;
};

// partition: M boundaries -> M+1 segments; concatenation reproduces the input.
// Boundary values at exactly 0 or T are dropped (with the rest intact) before
// cutting; out-of-range or unordered boundaries are an error.
std::vector<ng::Tensor> partition(const ng::Tensor& features, const det::BoundarySet& boundaries,
                                  SegmentLayout* layout_out);

ng::Tensor reassemble(const std::vector<ng::Tensor>& segments, const SegmentLayout& layout);

// Per-segment autoencoder: conv(k3)->act->conv(k3)->act->pool-to-1 on the way
// in, replicate->conv(k3)->act->conv(k3) on the way out. Compression runs at
// the hidden width H; the final expansion conv maps back to the feature dim.
struct SegmentAutoencoder {
  int feature_dim = 0;
  int hidden_dim = 0;

  SegmentAutoencoder(int feature_dim, int hidden_dim, ng::ParamStore& params,
                     const std::string& prefix, ng::Rng& rng);
  // wires to parameters already present in `params` (checkpoint load path)
  SegmentAutoencoder(int feature_dim, int hidden_dim, const ng::ParamStore& params,
                     const std::string& prefix);

  ng::Tensor compress(const ng::Tensor& segment) const;        // [D,l] -> [H,1]
  ng::Tensor expand(const ng::Tensor& token, int length) const;  // [H,1] -> [D,l]

 private:
  ng::Tensor enc1_w_, enc1_b_, enc2_w_, enc2_b_;
  ng::Tensor dec1_w_, dec1_b_, dec2_w_, dec2_b_;
};

}  // namespace dcodec::seg
