#include "dcodec/segmenter.hpp"

#include <iostream>
#include <stdexcept>

namespace dcodec::seg {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::pair<int, int> same_pad_s1(int kernel) {
  // stride-1 "same" padding
  const int pad = kernel - 1;
  return {pad / 2, pad - pad / 2};
}
}  // namespace

SegmentLayout SegmentLayout::from_boundaries(const det::BoundarySet& b) {
  SegmentLayout out;
  out.total_frames = b.total_frames;
  int prev = 0;
  for (int idx : b.indices) {
    out.records.push_back({prev, idx});
    prev = idx;
  }
  out.records.push_back({prev, b.total_frames});
  return out;
}

void SegmentLayout::validate() const {
  if (records.empty()) fail("SegmentLayout: empty layout");
  if (records.front().start != 0) fail("SegmentLayout: first interval must start at 0");
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].length() < 1) fail("SegmentLayout: zero-length interval");
    if (i + 1 < records.size() && records[i].end != records[i + 1].start)
      fail("SegmentLayout: intervals must tile contiguously");
  }
  if (records.back().end != total_frames) fail("SegmentLayout: intervals must end at T");
}

std::vector<ng::Tensor> partition(const ng::Tensor& features, const det::BoundarySet& boundaries,
                                  SegmentLayout* layout_out) {
  if (features.rank() != 2) fail("partition expects [D,T] features");
  const int t = features.dim(1);
  if (boundaries.total_frames != t) fail("partition: boundary frame count does not match features");

  det::BoundarySet cleaned;
  cleaned.total_frames = t;
  for (int b : boundaries.indices) {
    if (b == 0 || b == t) {  // dropped rather than fatal: detector edge cases
      std::cerr << "warning: dropping boundary at segment edge (frame " << b << " of " << t << ")\n";
      continue;
    }
    if (b < 0 || b > t) fail("partition: boundary " + std::to_string(b) + " out of range");
    cleaned.indices.push_back(b);
  }
  cleaned.validate();

  SegmentLayout layout = SegmentLayout::from_boundaries(cleaned);
  layout.validate();
  std::vector<ng::Tensor> segments;
  segments.reserve(layout.records.size());
  for (const auto& r : layout.records)
    segments.push_back(ng::slice_cols(features, r.start, r.length()));
  if (layout_out) *layout_out = layout;
  return segments;
}

ng::Tensor reassemble(const std::vector<ng::Tensor>& segments, const SegmentLayout& layout) {
  layout.validate();
  if (segments.size() != layout.records.size())
    fail("reassemble: segment count does not match layout");
  for (size_t i = 0; i < segments.size(); ++i)
    if (segments[i].dim(1) != layout.records[i].length())
      fail("reassemble: segment " + std::to_string(i) + " length does not match layout");
  return ng::concat_cols(segments);
}

// ---------------------------------------------------------------------------
// per-segment autoencoder
// ---------------------------------------------------------------------------

SegmentAutoencoder::SegmentAutoencoder(int feature_dim_, int hidden_dim_, ng::ParamStore& params,
                                       const std::string& prefix, ng::Rng& rng)
    : feature_dim(feature_dim_), hidden_dim(hidden_dim_) {
  auto mk = [&](const std::string& n, int co, int ci) {
    ng::Tensor w = params.create(prefix + "." + n + ".w", {co, ci, 3});
    ng::init_near_orthogonal(w, co, ci * 3, rng);
    ng::Tensor b = params.create(prefix + "." + n + ".b", {co});
    return std::pair(w, b);
  };
  std::tie(enc1_w_, enc1_b_) = mk("enc1", hidden_dim, feature_dim);
  std::tie(enc2_w_, enc2_b_) = mk("enc2", hidden_dim, hidden_dim);
  std::tie(dec1_w_, dec1_b_) = mk("dec1", hidden_dim, hidden_dim);
  std::tie(dec2_w_, dec2_b_) = mk("dec2", feature_dim, hidden_dim);
}

SegmentAutoencoder::SegmentAutoencoder(int feature_dim_, int hidden_dim_,
                                       const ng::ParamStore& params, const std::string& prefix)
    : feature_dim(feature_dim_), hidden_dim(hidden_dim_) {
  auto get = [&](const std::string& n) {
    ng::Tensor t = params.find(prefix + "." + n);
    if (!t.defined()) fail("missing segment autoencoder parameter: " + prefix + "." + n);
    return t;
  };
  enc1_w_ = get("enc1.w"); enc1_b_ = get("enc1.b");
  enc2_w_ = get("enc2.w"); enc2_b_ = get("enc2.b");
  dec1_w_ = get("dec1.w"); dec1_b_ = get("dec1.b");
  dec2_w_ = get("dec2.w"); dec2_b_ = get("dec2.b");
}

ng::Tensor SegmentAutoencoder::compress(const ng::Tensor& segment) const {
  if (segment.rank() != 2 || segment.dim(0) != feature_dim) fail("compress expects [D,l]");
  if (segment.dim(1) < 1) fail("compress: empty segment");
  const auto [pl, pr] = same_pad_s1(3);
  ng::Tensor h = ng::leaky_relu(ng::conv1d(segment, enc1_w_, enc1_b_, 1, pl, pr), 0.2);
  h = ng::leaky_relu(ng::conv1d(h, enc2_w_, enc2_b_, 1, pl, pr), 0.2);
  return ng::adaptive_avg_pool_to_1(h);
}

ng::Tensor SegmentAutoencoder::expand(const ng::Tensor& token, int length) const {
  if (token.rank() != 2 || token.dim(0) != hidden_dim || token.dim(1) != 1)
    fail("expand expects a [H,1] token");
  if (length < 1) fail("expand: target length must be >= 1");
  const auto [pl, pr] = same_pad_s1(3);
  ng::Tensor h = ng::nearest_neighbor_upsample(token, length);
  h = ng::leaky_relu(ng::conv1d(h, dec1_w_, dec1_b_, 1, pl, pr), 0.2);
  return ng::conv1d(h, dec2_w_, dec2_b_, 1, pl, pr);
}

}  // namespace dcodec::seg
