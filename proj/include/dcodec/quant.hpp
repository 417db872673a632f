#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcodec/tensor.hpp"

// Quantizers: per-dimension FSQ, group-wise scalar quantization in both the
// many-to-one (learned scalar projection per group) and many-to-many
// (element-wise per chunk) forms, a plain VQ baseline with optional residual
// stacking, and the positional composite-token bijection.
namespace dcodec::quant {

enum class Variant : uint8_t { fsq = 0, gsq_m2o = 1, gsq_m2m = 2, vq = 3 };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& s);

struct QuantizerSpec {
  Variant variant = Variant::gsq_m2o;
  int levels = 16;       // L
  int groups = 4;        // G
  int input_dim = 24;    // H
  int codebook_size = 512;  // vq only
  int residual_depth = 1;   // vq only

  int group_dim() const { return input_dim / groups; }
  // number of base-L digits in a composite token (or base-codebook_size for vq)
  int token_digits() const;
  uint64_t vocab_size() const;  // digits^base, checked against u64
  int payload_bits_per_token() const;
  void validate() const;
};

// --- FSQ ---------------------------------------------------------------------
// v = tanh(x); grid v_j = -1 + 2j/(L-1); nearest grid point, ties to the larger
// index; straight-through gradient. With bypass=true the forward value is the
// bounded (unsnapped) v — the straight-through surrogate path.
ng::Tensor fsq_quantize(const ng::Tensor& x, int levels, std::vector<int>* indices,
                        bool bypass = false);
// plain numeric helper on an already-bounded value
double fsq_snap(double bounded, int levels, int* index);

// --- GSQ ---------------------------------------------------------------------
struct GsqParams {
  std::vector<ng::Tensor> compress;  // per group, [H_g]
  std::vector<ng::Tensor> expand;    // per group, [H_g]

  static GsqParams create(const QuantizerSpec& spec, ng::ParamStore& params,
                          const std::string& prefix, ng::Rng& rng);
  static GsqParams wire(const QuantizerSpec& spec, const ng::ParamStore& params,
                        const std::string& prefix);
};

// z rank-1 [H] -> (z_hat [H], one index per group)
ng::Tensor gsq_many_to_one(const ng::Tensor& z, const QuantizerSpec& spec, const GsqParams& params,
                           std::vector<int>* group_indices, bool bypass = false);
// z rank-1 [H] -> (z_hat [H], H indices in chunk order)
ng::Tensor gsq_many_to_many(const ng::Tensor& z, const QuantizerSpec& spec,
                            std::vector<int>* indices, bool bypass = false);

// --- composite token bijection -------------------------------------------------
// c = sum_g digits[g] * base^g (group 0 least significant)
uint64_t compose_token(const std::vector<int>& digits, int base);
std::vector<int> decompose_token(uint64_t token, int base, int n_digits);

// --- VQ baseline ----------------------------------------------------------------
struct VqCodebook {
  int dim = 0;
  int size = 0;
  std::vector<double> codes;       // [size x dim]
  std::vector<double> ema_counts;  // EMA cluster sizes
  std::vector<double> ema_sums;    // EMA per-code vector sums

  static VqCodebook init(int size, int dim, ng::Rng& rng, double scale = 1.0);
};

// Euclidean nearest code, ties to the lowest index; straight-through gradient.
ng::Tensor vq_quantize(const ng::Tensor& z, const VqCodebook& book, int* index,
                       bool bypass = false);
// residual stacking: stage i quantizes the residual left by stages < i
ng::Tensor vq_quantize_residual(const ng::Tensor& z, const std::vector<VqCodebook>& stages,
                                std::vector<int>* indices, bool bypass = false);

// EMA codebook update (decay 0.99) with dead-code reseeding from the batch
void vq_ema_update(VqCodebook& book, const std::vector<std::vector<double>>& batch,
                   const std::vector<int>& assignments, double decay, ng::Rng& rng);

// --- rate-distortion probe --------------------------------------------------------
struct RdPoint {
  int rate_bits = 0;
  double distortion = 0.0;
};

using Sampler = std::function<double(ng::Rng&)>;

// Mean squared distortion of a uniform mid-rise scalar quantizer with 2^rate
// cells spanning the empirical sample range, estimated by Monte Carlo. A
// zero-variance source collapses the range and costs nothing at any rate.
std::vector<RdPoint> rate_distortion_probe(const Sampler& sampler, const std::vector<int>& rates,
                                           int samples_per_rate, uint64_t seed);
// Same source, but quantizing with an arbitrary 1-D codebook.
double codebook_distortion(const Sampler& sampler, const std::vector<double>& codebook,
                           int samples, uint64_t seed);
// least-squares slope of log2(distortion) against rate
double fit_log2_slope(const std::vector<RdPoint>& points);

// 1-D k-means (Lloyd) helper for mode-aligned codebooks
std::vector<double> lloyd_codebook_1d(const Sampler& sampler, int codebook_size, int samples,
                                      int iters, uint64_t seed);

}  // namespace dcodec::quant
