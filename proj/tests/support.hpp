#pragma once

// Shared test oracles and helpers. Everything here is deliberately independent
// of the library's computation paths: brute-force DFTs, nested-loop
// convolutions, O(T^2) prominence scans, finite differences.

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dcodec/tensor.hpp"

namespace testsup {

// --- finite-difference gradient oracle ---------------------------------------
// Rebuilds the scalar loss via `f` around perturbed parameter entries and
// compares central differences against the reverse-mode grads.
inline double max_rel_grad_error(dcodec::ng::ParamStore& params,
                                 const std::function<dcodec::ng::Tensor()>& f, double h = 1e-4,
                                 double abs_floor = 1e-6) {
  using dcodec::ng::Tensor;
  params.zero_grads();
  Tensor loss = f();
  dcodec::ng::backward(loss);
  std::vector<std::vector<double>> grads;
  for (auto& p : params.items) {
    p.node()->ensure_grad();
    grads.push_back(p.node()->grad);
  }

  double worst = 0.0;
  for (size_t pi = 0; pi < params.items.size(); ++pi) {
    auto& p = params.items[pi];
    if (!p.requires_grad()) continue;
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double keep = p.data()[i];
      p.data()[i] = keep + h;
      const double up = f().item();
      p.data()[i] = keep - h;
      const double down = f().item();
      p.data()[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double g = grads[pi][i];
      const double denom = std::max({abs_floor, std::fabs(fd), std::fabs(g)});
      worst = std::max(worst, std::fabs(fd - g) / denom);
    }
  }
  return worst;
}

// --- brute-force spectral oracles ---------------------------------------------
inline std::vector<std::complex<double>> dft_naive(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (size_t i = 0; i < n; ++i) {
      const double ang = -2.0 * M_PI * (double)(k * i) / (double)n;
      acc += x[i] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

// dominant frequency of a signal by scanning naive-DFT magnitudes below Nyquist
inline double dominant_frequency(const std::vector<double>& x, int sample_rate) {
  const auto spec = dft_naive(x);
  const size_t half = x.size() / 2;
  size_t best = 1;
  for (size_t k = 1; k <= half; ++k)
    if (std::abs(spec[k]) > std::abs(spec[best])) best = k;
  return (double)best * sample_rate / (double)x.size();
}

// --- O(T^2) topographic prominence oracle ---------------------------------------
// A peak is the leftmost sample of a maximal plateau that rises on the left and
// falls on the right; prominence = height - max(lowest valley toward the
// nearest strictly-higher ground on each side, scanning to the edge otherwise).
inline std::vector<int> peaks_bruteforce(const std::vector<double>& d, double threshold) {
  const int n = (int)d.size();
  std::vector<int> out;
  for (int i = 1; i < n - 1; ++i) {
    if (!(d[i] > d[i - 1])) continue;
    int j = i;
    while (j + 1 < n && d[j + 1] == d[i]) ++j;
    if (j >= n - 1 || !(d[j + 1] < d[i])) continue;
    double left_min = d[i];
    for (int q = i - 1; q >= 0; --q) {
      if (d[q] > d[i]) break;
      left_min = std::min(left_min, d[q]);
    }
    double right_min = d[i];
    for (int q = j + 1; q < n; ++q) {
      if (d[q] > d[i]) break;
      right_min = std::min(right_min, d[q]);
    }
    if (d[i] - std::max(left_min, right_min) >= threshold) out.push_back(i);
  }
  return out;
}

// --- misc ---------------------------------------------------------------------
inline std::string tmp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("dcodec_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline std::vector<double> sine(double freq, int sample_rate, int count, double amp = 0.5) {
  std::vector<double> out(count);
  for (int i = 0; i < count; ++i) out[i] = amp * std::sin(2.0 * M_PI * freq * i / sample_rate);
  return out;
}

}  // namespace testsup
