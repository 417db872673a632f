#include "dcodec/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dcodec/kernels.hpp"

namespace dcodec::quant {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

int bits_for(int64_t k) {
  if (k < 2) fail("codebook size must be >= 2");
  int b = 0;
  int64_t v = k - 1;
  while (v > 0) {
    v >>= 1;
    ++b;
  }
  return b;  // ceil(log2 k)
}
}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::fsq: return "fsq";
    case Variant::gsq_m2o: return "gsq_m2o";
    case Variant::gsq_m2m: return "gsq_m2m";
    case Variant::vq: return "vq";
  }
  fail("unknown quantizer variant");
}

Variant variant_from_name(const std::string& s) {
  if (s == "fsq") return Variant::fsq;
  if (s == "gsq_m2o") return Variant::gsq_m2o;
  if (s == "gsq_m2m") return Variant::gsq_m2m;
  if (s == "vq") return Variant::vq;
  fail("unknown quantizer variant: " + s);
}

int QuantizerSpec::token_digits() const {
  switch (variant) {
    case Variant::fsq:
    case Variant::gsq_m2m:
      return input_dim;  // one digit per dimension
    case Variant::gsq_m2o:
      return groups;
    case Variant::vq:
      return residual_depth;
  }
  fail("unknown quantizer variant");
}

uint64_t QuantizerSpec::vocab_size() const {
  const uint64_t base = variant == Variant::vq ? (uint64_t)codebook_size : (uint64_t)levels;
  uint64_t v = 1;
  for (int i = 0; i < token_digits(); ++i) {
    if (v > UINT64_MAX / base) fail("quantizer vocabulary exceeds 64 bits; reduce levels/groups");
    v *= base;
  }
  return v;
}

int QuantizerSpec::payload_bits_per_token() const {
  const int per = bits_for(variant == Variant::vq ? codebook_size : levels);
  return per * token_digits();
}

void QuantizerSpec::validate() const {
  if (input_dim < 1) fail("quantizer spec: input_dim must be >= 1");
  if (variant == Variant::vq) {
    if (codebook_size < 2) fail("quantizer spec: codebook_size must be >= 2");
    if (residual_depth < 1) fail("quantizer spec: residual_depth must be >= 1");
  } else {
    if (levels < 2) fail("quantizer spec: levels must be >= 2");
    if (groups < 1 || input_dim % groups != 0)
      fail("quantizer spec: groups must divide input_dim");
  }
  vocab_size();  // asserts the 64-bit bound
}

// ---------------------------------------------------------------------------
// FSQ
// ---------------------------------------------------------------------------

double fsq_snap(double bounded, int levels, int* index) {
  const double half = (levels - 1) / 2.0;
  int j = (int)std::floor((bounded + 1.0) * half + 0.5);
  j = std::clamp(j, 0, levels - 1);
  if (index) *index = j;
  return -1.0 + (double)j / half;
}

ng::Tensor fsq_quantize(const ng::Tensor& x, int levels, std::vector<int>* indices, bool bypass) {
  if (levels < 2) fail("fsq_quantize: levels must be >= 2");
  return ng::snap_to_grid_ste(ng::tanh_t(x), levels, indices, bypass);
}

// ---------------------------------------------------------------------------
// GSQ
// ---------------------------------------------------------------------------

GsqParams GsqParams::create(const QuantizerSpec& spec, ng::ParamStore& params,
                            const std::string& prefix, ng::Rng& rng) {
  spec.validate();
  GsqParams out;
  for (int g = 0; g < spec.groups; ++g) {
    ng::Tensor w = params.create(prefix + ".w" + std::to_string(g), {spec.group_dim()});
    ng::init_near_orthogonal(w, 1, spec.group_dim(), rng);
    ng::Tensor v = params.create(prefix + ".v" + std::to_string(g), {spec.group_dim()});
    ng::init_near_orthogonal(v, 1, spec.group_dim(), rng);
    out.compress.push_back(w);
    out.expand.push_back(v);
  }
  return out;
}

GsqParams GsqParams::wire(const QuantizerSpec& spec, const ng::ParamStore& params,
                          const std::string& prefix) {
  GsqParams out;
  for (int g = 0; g < spec.groups; ++g) {
    ng::Tensor w = params.find(prefix + ".w" + std::to_string(g));
    ng::Tensor v = params.find(prefix + ".v" + std::to_string(g));
    if (!w.defined() || !v.defined()) fail("missing GSQ parameters under prefix " + prefix);
    out.compress.push_back(w);
    out.expand.push_back(v);
  }
  return out;
}

ng::Tensor gsq_many_to_one(const ng::Tensor& z, const QuantizerSpec& spec, const GsqParams& params,
                           std::vector<int>* group_indices, bool bypass) {
  if (z.rank() != 1 || z.dim(0) != spec.input_dim)
    fail("gsq_many_to_one: input must be rank-1 of length input_dim");
  if ((int)params.compress.size() != spec.groups) fail("gsq_many_to_one: parameter/spec mismatch");
  const int hg = spec.group_dim();
  if (group_indices) group_indices->assign(spec.groups, 0);
  std::vector<ng::Tensor> parts;
  parts.reserve(spec.groups);
  for (int g = 0; g < spec.groups; ++g) {
    ng::Tensor zg = ng::slice_rows(z, g * hg, hg);
    ng::Tensor p = ng::dot(params.compress[g], zg);  // scalar projection
    std::vector<int> idx;
    ng::Tensor phat = fsq_quantize(p, spec.levels, &idx, bypass);
    if (group_indices) (*group_indices)[g] = idx[0];
    parts.push_back(ng::scale_by(params.expand[g], ng::reshape(phat, {1})));
  }
  return ng::concat_rows(parts);
}

ng::Tensor gsq_many_to_many(const ng::Tensor& z, const QuantizerSpec& spec,
                            std::vector<int>* indices, bool bypass) {
  if (z.rank() != 1 || z.dim(0) != spec.input_dim)
    fail("gsq_many_to_many: input must be rank-1 of length input_dim");
  const int hg = spec.group_dim();
  if (indices) indices->clear();
  std::vector<ng::Tensor> parts;
  parts.reserve(spec.groups);
  for (int g = 0; g < spec.groups; ++g) {
    ng::Tensor zg = ng::slice_rows(z, g * hg, hg);
    std::vector<int> idx;
    parts.push_back(fsq_quantize(zg, spec.levels, &idx, bypass));
    if (indices) indices->insert(indices->end(), idx.begin(), idx.end());
  }
  return ng::concat_rows(parts);
}

// ---------------------------------------------------------------------------
// composite token
// ---------------------------------------------------------------------------

uint64_t compose_token(const std::vector<int>& digits, int base) {
  if (base < 2) fail("compose_token: base must be >= 2");
  uint64_t c = 0;
  uint64_t place = 1;
  for (size_t g = 0; g < digits.size(); ++g) {
    if (digits[g] < 0 || digits[g] >= base)
      fail("compose_token: digit " + std::to_string(digits[g]) + " out of [0," + std::to_string(base) + ")");
    if (g > 0) {
      if (place > UINT64_MAX / (uint64_t)base) fail("compose_token: token exceeds 64 bits");
      place *= (uint64_t)base;
    }
    const uint64_t add = (uint64_t)digits[g] * place;
    if (c > UINT64_MAX - add) fail("compose_token: token exceeds 64 bits");
    c += add;
  }
  return c;
}

std::vector<int> decompose_token(uint64_t token, int base, int n_digits) {
  if (base < 2) fail("decompose_token: base must be >= 2");
  std::vector<int> digits(n_digits);
  uint64_t rest = token;
  for (int g = 0; g < n_digits; ++g) {
    digits[g] = (int)(rest % (uint64_t)base);
    rest /= (uint64_t)base;
  }
  if (rest != 0) fail("decompose_token: token out of range for base^digits");
  return digits;
}

// ---------------------------------------------------------------------------
// VQ baseline
// ---------------------------------------------------------------------------

VqCodebook VqCodebook::init(int size, int dim, ng::Rng& rng, double scale) {
  if (size < 1 || dim < 1) fail("VqCodebook: bad size/dim");
  VqCodebook b;
  b.dim = dim;
  b.size = size;
  b.codes.resize((size_t)size * dim);
  for (auto& v : b.codes) v = rng.normal(0.0, scale);
  b.ema_counts.assign(size, 1.0);
  b.ema_sums = b.codes;
  return b;
}

ng::Tensor vq_quantize(const ng::Tensor& z, const VqCodebook& book, int* index, bool bypass) {
  if (book.size < 1) fail("vq_quantize: empty codebook");
  if (z.rank() != 1 || z.dim(0) != book.dim) fail("vq_quantize: dimension mismatch");
  int best = 0;
  kern::nearest_code(z.data().data(), 1, book.dim, book.codes.data(), book.size, &best, nullptr);
  if (index) *index = best;
  // straight-through: forward emits the code, gradient passes to z untouched
  auto n = std::make_shared<ng::Node>();
  n->shape = z.shape();
  n->value.assign(book.codes.begin() + (size_t)best * book.dim,
                  book.codes.begin() + (size_t)(best + 1) * book.dim);
  if (bypass) n->value = z.data();
  n->parents = {z.node()};
  n->backprop = [](ng::Node& self) {
    auto& p = self.parents[0];
    if (!p->wants_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return ng::Tensor(n);
}

ng::Tensor vq_quantize_residual(const ng::Tensor& z, const std::vector<VqCodebook>& stages,
                                std::vector<int>* indices, bool bypass) {
  if (stages.empty()) fail("vq_quantize_residual: no stages");
  if (indices) indices->assign(stages.size(), 0);
  ng::Tensor residual = z;
  ng::Tensor acc;
  for (size_t s = 0; s < stages.size(); ++s) {
    int idx = 0;
    ng::Tensor q = vq_quantize(residual, stages[s], &idx, bypass);
    if (indices) (*indices)[s] = idx;
    acc = acc.defined() ? ng::add(acc, q) : q;
    if (s + 1 < stages.size()) residual = ng::sub(z, acc);
  }
  return acc;
}

void vq_ema_update(VqCodebook& book, const std::vector<std::vector<double>>& batch,
                   const std::vector<int>& assignments, double decay, ng::Rng& rng) {
  if (batch.size() != assignments.size()) fail("vq_ema_update: batch/assignment size mismatch");
  std::vector<double> counts(book.size, 0.0);
  std::vector<double> sums((size_t)book.size * book.dim, 0.0);
  for (size_t i = 0; i < batch.size(); ++i) {
    const int a = assignments[i];
    counts[a] += 1.0;
    for (int d = 0; d < book.dim; ++d) sums[(size_t)a * book.dim + d] += batch[i][d];
  }
  for (int c = 0; c < book.size; ++c) {
    book.ema_counts[c] = decay * book.ema_counts[c] + (1.0 - decay) * counts[c];
    for (int d = 0; d < book.dim; ++d) {
      auto& s = book.ema_sums[(size_t)c * book.dim + d];
      s = decay * s + (1.0 - decay) * sums[(size_t)c * book.dim + d];
    }
    if (book.ema_counts[c] > 1e-3) {
      for (int d = 0; d < book.dim; ++d)
        book.codes[(size_t)c * book.dim + d] = book.ema_sums[(size_t)c * book.dim + d] / book.ema_counts[c];
    } else if (!batch.empty()) {
      // dead code: reseed from a random batch sample
      const auto& src = batch[(size_t)rng.randint(0, (int64_t)batch.size() - 1)];
      for (int d = 0; d < book.dim; ++d) book.codes[(size_t)c * book.dim + d] = src[d];
      book.ema_counts[c] = 1.0;
      for (int d = 0; d < book.dim; ++d) book.ema_sums[(size_t)c * book.dim + d] = src[d];
    }
  }
}

// ---------------------------------------------------------------------------
// rate-distortion probe
// ---------------------------------------------------------------------------

std::vector<RdPoint> rate_distortion_probe(const Sampler& sampler, const std::vector<int>& rates,
                                           int samples_per_rate, uint64_t seed) {
  std::vector<RdPoint> out;
  for (int r : rates) {
    if (r < 1 || r > 30) fail("rate_distortion_probe: rate out of range");
    const int cells = 1 << r;
    ng::Rng rng(seed + (uint64_t)r * 0x2545F4914F6CDD1DULL);
    // draw serially, quantize in parallel, reduce in fixed order
    std::vector<double> xs(samples_per_rate);
    for (auto& x : xs) x = sampler(rng);
    const auto [lo_it, hi_it] = std::minmax_element(xs.begin(), xs.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi == lo) {
      out.push_back({r, 0.0});  // degenerate source reproduces exactly
      continue;
    }
    const double width = (hi - lo) / cells;
    std::vector<double> err(samples_per_rate);
    const bool par = kern::parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < samples_per_rate; ++i) {
      int cell = (int)std::floor((xs[i] - lo) / width);
      cell = std::clamp(cell, 0, cells - 1);
      const double rec = lo + (cell + 0.5) * width;  // mid-rise reconstruction
      err[i] = (xs[i] - rec) * (xs[i] - rec);
    }
    double acc = 0.0;
    for (double e : err) acc += e;
    out.push_back({r, acc / samples_per_rate});
  }
  return out;
}

double codebook_distortion(const Sampler& sampler, const std::vector<double>& codebook,
                           int samples, uint64_t seed) {
  if (codebook.empty()) fail("codebook_distortion: empty codebook");
  ng::Rng rng(seed);
  std::vector<double> xs(samples);
  for (auto& x : xs) x = sampler(rng);
  std::vector<double> err(samples);
  const int k = (int)codebook.size();
  const bool par = kern::parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
  for (int i = 0; i < samples; ++i) {
    double best = (xs[i] - codebook[0]) * (xs[i] - codebook[0]);
    for (int c = 1; c < k; ++c) {
      const double e = (xs[i] - codebook[c]) * (xs[i] - codebook[c]);
      if (e < best) best = e;
    }
    err[i] = best;
  }
  double acc = 0.0;
  for (double e : err) acc += e;
  return acc / samples;
}

double fit_log2_slope(const std::vector<RdPoint>& points) {
  if (points.size() < 2) fail("fit_log2_slope: need at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& p : points) {
    if (p.distortion <= 0.0) fail("fit_log2_slope: zero distortion point");
    const double x = p.rate_bits;
    const double y = std::log2(p.distortion);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = (double)points.size();
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::vector<double> lloyd_codebook_1d(const Sampler& sampler, int codebook_size, int samples,
                                      int iters, uint64_t seed) {
  ng::Rng rng(seed);
  std::vector<double> xs(samples);
  for (auto& x : xs) x = sampler(rng);
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  // quantile seeding
  std::vector<double> codes(codebook_size);
  for (int c = 0; c < codebook_size; ++c)
    codes[c] = sorted[(size_t)((c + 0.5) / codebook_size * (samples - 1))];
  std::vector<double> sums(codebook_size);
  std::vector<int> counts(codebook_size);
  for (int it = 0; it < iters; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (double x : xs) {
      int best = 0;
      double bd = std::fabs(x - codes[0]);
      for (int c = 1; c < codebook_size; ++c) {
        const double d = std::fabs(x - codes[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      sums[best] += x;
      counts[best] += 1;
    }
    for (int c = 0; c < codebook_size; ++c)
      if (counts[c] > 0) codes[c] = sums[c] / counts[c];
  }
  std::sort(codes.begin(), codes.end());
  return codes;
}

}  // namespace dcodec::quant
