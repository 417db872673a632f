// Benchmark comparing the OpenMP kernels against their serial reference
// implementations, with a bitwise equality check on every pair.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "dcodec/kernels.hpp"
#include "dcodec/tensor.hpp"

using namespace dcodec;

namespace {

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

template <typename F>
double time_best_of(int reps, F&& f) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now_s();
    f();
    best = std::min(best, now_s() - t0);
  }
  return best;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void report(const char* name, double serial_s, double omp_s, bool equal) {
  std::printf("%-22s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   bitwise %s\n", name,
              serial_s * 1e3, omp_s * 1e3, serial_s / omp_s, equal ? "OK" : "MISMATCH");
}

}  // namespace

int main() {
  std::printf("threads available: %d\n\n", kern::max_threads());
  ng::Rng rng(7);

  {
    kern::ConvDims d;
    d.batch = 1;
    d.c_in = 64;
    d.t_in = 4000;
    d.c_out = 64;
    d.kernel = 8;
    d.stride = 4;
    std::vector<double> x((size_t)d.batch * d.c_in * d.t_in), w((size_t)d.c_out * d.c_in * d.kernel),
        b(d.c_out);
    for (auto& v : x) v = rng.normal();
    for (auto& v : w) v = rng.normal();
    std::vector<double> y_ref((size_t)d.batch * d.c_out * d.t_out());
    std::vector<double> y_omp(y_ref.size());
    const double ts = time_best_of(3, [&] { kern::conv1d_fwd_ref(x.data(), w.data(), b.data(), y_ref.data(), d); });
    kern::set_parallel(true);
    const double tp = time_best_of(3, [&] { kern::conv1d_fwd(x.data(), w.data(), b.data(), y_omp.data(), d); });
    report("conv1d_fwd", ts, tp, bitwise_equal(y_ref, y_omp));

    std::vector<double> gy(y_ref.size());
    for (auto& v : gy) v = rng.normal();
    std::vector<double> gx_ref(x.size(), 0.0), gx_omp(x.size(), 0.0);
    const double ts2 = time_best_of(3, [&] {
      std::fill(gx_ref.begin(), gx_ref.end(), 0.0);
      kern::conv1d_bwd_input_ref(gy.data(), w.data(), gx_ref.data(), d);
    });
    const double tp2 = time_best_of(3, [&] {
      std::fill(gx_omp.begin(), gx_omp.end(), 0.0);
      kern::conv1d_bwd_input(gy.data(), w.data(), gx_omp.data(), d);
    });
    report("conv1d_bwd_input", ts2, tp2, bitwise_equal(gx_ref, gx_omp));

    std::vector<double> gw_ref(w.size(), 0.0), gw_omp(w.size(), 0.0), gb_ref(d.c_out, 0.0), gb_omp(d.c_out, 0.0);
    const double ts3 = time_best_of(3, [&] {
      std::fill(gw_ref.begin(), gw_ref.end(), 0.0);
      std::fill(gb_ref.begin(), gb_ref.end(), 0.0);
      kern::conv1d_bwd_weight_ref(x.data(), gy.data(), gw_ref.data(), gb_ref.data(), d);
    });
    const double tp3 = time_best_of(3, [&] {
      std::fill(gw_omp.begin(), gw_omp.end(), 0.0);
      std::fill(gb_omp.begin(), gb_omp.end(), 0.0);
      kern::conv1d_bwd_weight(x.data(), gy.data(), gw_omp.data(), gb_omp.data(), d);
    });
    report("conv1d_bwd_weight", ts3, tp3, bitwise_equal(gw_ref, gw_omp) && bitwise_equal(gb_ref, gb_omp));
  }

  {
    kern::ConvTrDims d;
    d.batch = 1;
    d.c_in = 64;
    d.t_in = 1000;
    d.c_out = 64;
    d.kernel = 8;
    d.stride = 4;
    d.crop_l = 2;
    d.t_out = 4000;
    std::vector<double> x((size_t)d.c_in * d.t_in), w((size_t)d.c_in * d.c_out * d.kernel), b(d.c_out);
    for (auto& v : x) v = rng.normal();
    for (auto& v : w) v = rng.normal();
    std::vector<double> y_ref((size_t)d.c_out * d.t_out), y_omp(y_ref.size());
    const double ts = time_best_of(3, [&] { kern::convtr1d_fwd_ref(x.data(), w.data(), b.data(), y_ref.data(), d); });
    const double tp = time_best_of(3, [&] { kern::convtr1d_fwd(x.data(), w.data(), b.data(), y_omp.data(), d); });
    report("convtr1d_fwd", ts, tp, bitwise_equal(y_ref, y_omp));
  }

  {
    kern::StftDims d;
    d.len = 160000;
    d.win = 1024;
    d.n_fft = 1024;
    d.hop = 256;
    std::vector<double> x(d.len), win(d.win);
    for (auto& v : x) v = rng.normal();
    for (int i = 0; i < d.win; ++i) win[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / d.win);
    std::vector<double> m_ref((size_t)d.frames() * d.bins()), m_omp(m_ref.size());
    const double ts = time_best_of(3, [&] { kern::stft_mag_fwd_ref(x.data(), win.data(), m_ref.data(), d); });
    const double tp = time_best_of(3, [&] { kern::stft_mag_fwd(x.data(), win.data(), m_omp.data(), d); });
    report("stft_mag_fwd", ts, tp, bitwise_equal(m_ref, m_omp));

    std::vector<double> gm(m_ref.size());
    for (auto& v : gm) v = rng.normal();
    std::vector<double> gx_ref(d.len, 0.0), gx_omp(d.len, 0.0);
    const double ts2 = time_best_of(3, [&] {
      std::fill(gx_ref.begin(), gx_ref.end(), 0.0);
      kern::stft_mag_adj_ref(x.data(), win.data(), gm.data(), gx_ref.data(), d);
    });
    const double tp2 = time_best_of(3, [&] {
      std::fill(gx_omp.begin(), gx_omp.end(), 0.0);
      kern::stft_mag_adj(x.data(), win.data(), gm.data(), gx_omp.data(), d);
    });
    report("stft_mag_adj", ts2, tp2, bitwise_equal(gx_ref, gx_omp));
  }

  {
    const int n = 20000, dim = 8, k = 256;
    std::vector<double> pts((size_t)n * dim), codes((size_t)k * dim);
    for (auto& v : pts) v = rng.normal();
    for (auto& v : codes) v = rng.normal();
    std::vector<int> a_ref(n), a_omp(n);
    const double ts = time_best_of(3, [&] { kern::nearest_code_ref(pts.data(), n, dim, codes.data(), k, a_ref.data(), nullptr); });
    const double tp = time_best_of(3, [&] { kern::nearest_code(pts.data(), n, dim, codes.data(), k, a_omp.data(), nullptr); });
    report("nearest_code", ts, tp, a_ref == a_omp);
  }

  return 0;
}
