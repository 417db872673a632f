#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <complex>
#include <cstring>

#include "dcodec/kernels.hpp"
#include "dcodec/tensor.hpp"
#include "support.hpp"

using namespace dcodec;

namespace {

std::vector<double> randn(size_t n, ng::Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// nested-loop convolution, the independent oracle
std::vector<double> conv_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                const std::vector<double>& b, const kern::ConvDims& d) {
  std::vector<double> y((size_t)d.batch * d.c_out * d.t_out(), 0.0);
  for (int bt = 0; bt < d.batch; ++bt)
    for (int co = 0; co < d.c_out; ++co)
      for (int t = 0; t < d.t_out(); ++t) {
        double acc = b.empty() ? 0.0 : b[co];
        for (int ci = 0; ci < d.c_in; ++ci)
          for (int k = 0; k < d.kernel; ++k) {
            const int idx = t * d.stride + k - d.pad_l;
            if (idx < 0 || idx >= d.t_in) continue;
            acc += x[((size_t)bt * d.c_in + ci) * d.t_in + idx] *
                   w[((size_t)co * d.c_in + ci) * d.kernel + k];
          }
        y[((size_t)bt * d.c_out + co) * d.t_out() + t] = acc;
      }
  return y;
}

}  // namespace

TEST_CASE("conv1d_fwd matches the nested-loop oracle on random shapes") {
  ng::Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    kern::ConvDims d;
    d.batch = 1 + (int)rng.randint(0, 1);
    d.c_in = 1 + (int)rng.randint(0, 3);
    d.c_out = 1 + (int)rng.randint(0, 3);
    d.kernel = 1 + (int)rng.randint(0, 4);
    d.stride = 1 + (int)rng.randint(0, 2);
    d.pad_l = (int)rng.randint(0, 2);
    d.pad_r = (int)rng.randint(0, 2);
    d.t_in = d.kernel + (int)rng.randint(0, 12);
    auto x = randn((size_t)d.batch * d.c_in * d.t_in, rng);
    auto w = randn((size_t)d.c_out * d.c_in * d.kernel, rng);
    auto b = randn(d.c_out, rng);
    std::vector<double> y((size_t)d.batch * d.c_out * d.t_out());
    kern::conv1d_fwd(x.data(), w.data(), b.data(), y.data(), d);
    auto expect = conv_oracle(x, w, b, d);
    for (size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("parallel kernels are bitwise identical to the serial reference") {
  ng::Rng rng(22);
  kern::ConvDims d;
  d.c_in = 5;
  d.c_out = 7;
  d.kernel = 4;
  d.stride = 2;
  d.pad_l = 1;
  d.pad_r = 2;
  d.t_in = 57;
  auto x = randn((size_t)d.c_in * d.t_in, rng);
  auto w = randn((size_t)d.c_out * d.c_in * d.kernel, rng);
  auto b = randn(d.c_out, rng);

  std::vector<double> y1((size_t)d.c_out * d.t_out()), y2(y1.size());
  kern::conv1d_fwd_ref(x.data(), w.data(), b.data(), y1.data(), d);
  kern::set_parallel(true);
  kern::conv1d_fwd(x.data(), w.data(), b.data(), y2.data(), d);
  CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(double)) == 0);

  auto gy = randn(y1.size(), rng);
  std::vector<double> gx1(x.size(), 0.0), gx2(x.size(), 0.0);
  kern::conv1d_bwd_input_ref(gy.data(), w.data(), gx1.data(), d);
  kern::conv1d_bwd_input(gy.data(), w.data(), gx2.data(), d);
  CHECK(std::memcmp(gx1.data(), gx2.data(), gx1.size() * sizeof(double)) == 0);

  std::vector<double> gw1(w.size(), 0.0), gw2(w.size(), 0.0), gb1(d.c_out, 0.0), gb2(d.c_out, 0.0);
  kern::conv1d_bwd_weight_ref(x.data(), gy.data(), gw1.data(), gb1.data(), d);
  kern::conv1d_bwd_weight(x.data(), gy.data(), gw2.data(), gb2.data(), d);
  CHECK(std::memcmp(gw1.data(), gw2.data(), gw1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(gb1.data(), gb2.data(), gb1.size() * sizeof(double)) == 0);

  kern::StftDims sd;
  sd.len = 2048;
  sd.win = 256;
  sd.n_fft = 256;
  sd.hop = 64;
  auto sig = randn(sd.len, rng);
  std::vector<double> win(sd.win);
  for (int i = 0; i < sd.win; ++i) win[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / sd.win);
  std::vector<double> m1((size_t)sd.frames() * sd.bins()), m2(m1.size());
  kern::stft_mag_fwd_ref(sig.data(), win.data(), m1.data(), sd);
  kern::stft_mag_fwd(sig.data(), win.data(), m2.data(), sd);
  CHECK(std::memcmp(m1.data(), m2.data(), m1.size() * sizeof(double)) == 0);

  auto gm = randn(m1.size(), rng);
  std::vector<double> gs1(sd.len, 0.0), gs2(sd.len, 0.0);
  kern::stft_mag_adj_ref(sig.data(), win.data(), gm.data(), gs1.data(), sd);
  kern::stft_mag_adj(sig.data(), win.data(), gm.data(), gs2.data(), sd);
  CHECK(std::memcmp(gs1.data(), gs2.data(), gs1.size() * sizeof(double)) == 0);
}

TEST_CASE("fft_radix2 matches the naive DFT and inverts cleanly") {
  ng::Rng rng(33);
  for (int n : {8, 64, 256}) {
    auto x = randn(n, rng);
    std::vector<std::complex<double>> buf(n);
    for (int i = 0; i < n; ++i) buf[i] = x[i];
    kern::fft_radix2(buf.data(), n, false);
    auto expect = testsup::dft_naive(x);
    for (int k = 0; k < n; ++k) {
      CHECK(buf[k].real() == doctest::Approx(expect[k].real()).epsilon(1e-9));
      CHECK(buf[k].imag() == doctest::Approx(expect[k].imag()).epsilon(1e-9));
    }
    kern::fft_radix2(buf.data(), n, true);
    for (int i = 0; i < n; ++i) CHECK(buf[i].real() / n == doctest::Approx(x[i]).epsilon(1e-10));
  }
}

TEST_CASE("convtr1d_fwd is the adjoint of conv1d under matching dims") {
  // <conv(x), y> == <x, convtr(y)> with shared weights ties the two kernels together
  ng::Rng rng(44);
  kern::ConvDims cd;
  cd.c_in = 3;
  cd.c_out = 4;
  cd.kernel = 6;
  cd.stride = 3;
  cd.t_in = 33;
  auto x = randn((size_t)cd.c_in * cd.t_in, rng);
  auto w = randn((size_t)cd.c_out * cd.c_in * cd.kernel, rng);
  auto y = randn((size_t)cd.c_out * cd.t_out(), rng);

  std::vector<double> cx((size_t)cd.c_out * cd.t_out());
  kern::conv1d_fwd(x.data(), w.data(), nullptr, cx.data(), cd);
  double lhs = 0.0;
  for (size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];

  // the conv weight [Co][Ci][K] already has transposed-conv layout [Ci_tr][Co_tr][K]
  // since the transposed direction swaps the channel roles
  const std::vector<double>& wt = w;
  kern::ConvTrDims td;
  td.c_in = cd.c_out;
  td.t_in = cd.t_out();
  td.c_out = cd.c_in;
  td.kernel = cd.kernel;
  td.stride = cd.stride;
  td.crop_l = 0;
  td.t_out = cd.t_in;
  std::vector<double> ty((size_t)td.c_out * td.t_out);
  kern::convtr1d_fwd(y.data(), wt.data(), nullptr, ty.data(), td);
  double rhs = 0.0;
  for (size_t i = 0; i < ty.size(); ++i) rhs += ty[i] * x[i];

  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("nearest_code picks the brute-force argmin with low-index ties") {
  ng::Rng rng(55);
  const int n = 500, dim = 4, k = 32;
  auto pts = randn((size_t)n * dim, rng);
  auto codes = randn((size_t)k * dim, rng);
  std::vector<int> assign(n);
  kern::nearest_code(pts.data(), n, dim, codes.data(), k, assign.data(), nullptr);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double bd = 1e300;
    for (int c = 0; c < k; ++c) {
      double acc = 0.0;
      for (int d = 0; d < dim; ++d) {
        const double diff = pts[(size_t)i * dim + d] - codes[(size_t)c * dim + d];
        acc += diff * diff;
      }
      if (acc < bd) {
        bd = acc;
        best = c;
      }
    }
    CHECK(assign[i] == best);
  }

  // exact tie between identical codes resolves to the lower index
  std::vector<double> tie_codes = {1.0, 2.0, 1.0, 2.0, 5.0, 5.0};
  std::vector<double> q = {1.0, 2.0};
  int a = -1;
  kern::nearest_code(q.data(), 1, 2, tie_codes.data(), 3, &a, nullptr);
  CHECK(a == 0);
}
