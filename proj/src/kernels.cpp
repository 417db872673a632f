#include "dcodec/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dcodec::kern {

namespace {
std::atomic<bool> g_parallel{true};
}

bool parallel_enabled() {
#ifdef _OPENMP
  return g_parallel.load(std::memory_order_relaxed);
#else
  return false;
#endif
}

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

static inline void conv1d_fwd_one(const double* x, const double* w, const double* bias,
                                  double* y, const ConvDims& d, int b, int co) {
  const int to = d.t_out();
  const double* xb = x + (size_t)b * d.c_in * d.t_in;
  double* yrow = y + ((size_t)b * d.c_out + co) * to;
  const double* wrow = w + (size_t)co * d.c_in * d.kernel;
  for (int t = 0; t < to; ++t) {
    double acc = bias ? bias[co] : 0.0;
    const int base = t * d.stride - d.pad_l;
    for (int ci = 0; ci < d.c_in; ++ci) {
      const double* xr = xb + (size_t)ci * d.t_in;
      const double* wr = wrow + (size_t)ci * d.kernel;
      int k0 = base < 0 ? -base : 0;
      int k1 = d.kernel;
      if (base + k1 > d.t_in) k1 = d.t_in - base;
      for (int k = k0; k < k1; ++k) acc += xr[base + k] * wr[k];
    }
    yrow[t] = acc;
  }
}

void conv1d_fwd_ref(const double* x, const double* w, const double* bias, double* y, const ConvDims& d) {
  for (int b = 0; b < d.batch; ++b)
    for (int co = 0; co < d.c_out; ++co) conv1d_fwd_one(x, w, bias, y, d, b, co);
}

void conv1d_fwd(const double* x, const double* w, const double* bias, double* y, const ConvDims& d) {
  if (!parallel_enabled()) {
    conv1d_fwd_ref(x, w, bias, y, d);
    return;
  }
  const int n = d.batch * d.c_out;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) conv1d_fwd_one(x, w, bias, y, d, i / d.c_out, i % d.c_out);
}

static inline void conv1d_bwd_input_one(const double* gy, const double* w, double* gx,
                                        const ConvDims& d, int b, int ci) {
  const int to = d.t_out();
  const double* gyb = gy + (size_t)b * d.c_out * to;
  double* gxr = gx + ((size_t)b * d.c_in + ci) * d.t_in;
  for (int i = 0; i < d.t_in; ++i) {
    double acc = 0.0;
    for (int k = 0; k < d.kernel; ++k) {
      const int num = i + d.pad_l - k;
      if (num < 0 || num % d.stride != 0) continue;
      const int t = num / d.stride;
      if (t >= to) continue;
      for (int co = 0; co < d.c_out; ++co)
        acc += gyb[(size_t)co * to + t] * w[((size_t)co * d.c_in + ci) * d.kernel + k];
    }
    gxr[i] += acc;
  }
}

void conv1d_bwd_input_ref(const double* gy, const double* w, double* gx, const ConvDims& d) {
  for (int b = 0; b < d.batch; ++b)
    for (int ci = 0; ci < d.c_in; ++ci) conv1d_bwd_input_one(gy, w, gx, d, b, ci);
}

void conv1d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d) {
  if (!parallel_enabled()) {
    conv1d_bwd_input_ref(gy, w, gx, d);
    return;
  }
  const int n = d.batch * d.c_in;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) conv1d_bwd_input_one(gy, w, gx, d, i / d.c_in, i % d.c_in);
}

static inline void conv1d_bwd_weight_one(const double* x, const double* gy, double* gw,
                                         double* gbias, const ConvDims& d, int co) {
  const int to = d.t_out();
  double gb = 0.0;
  for (int b = 0; b < d.batch; ++b) {
    const double* gyr = gy + ((size_t)b * d.c_out + co) * to;
    for (int t = 0; t < to; ++t) gb += gyr[t];
  }
  if (gbias) gbias[co] += gb;
  for (int ci = 0; ci < d.c_in; ++ci) {
    for (int k = 0; k < d.kernel; ++k) {
      double acc = 0.0;
      for (int b = 0; b < d.batch; ++b) {
        const double* xr = x + ((size_t)b * d.c_in + ci) * d.t_in;
        const double* gyr = gy + ((size_t)b * d.c_out + co) * to;
        for (int t = 0; t < to; ++t) {
          const int idx = t * d.stride + k - d.pad_l;
          if (idx < 0 || idx >= d.t_in) continue;
          acc += xr[idx] * gyr[t];
        }
      }
      gw[((size_t)co * d.c_in + ci) * d.kernel + k] += acc;
    }
  }
}

void conv1d_bwd_weight_ref(const double* x, const double* gy, double* gw, double* gbias, const ConvDims& d) {
  for (int co = 0; co < d.c_out; ++co) conv1d_bwd_weight_one(x, gy, gw, gbias, d, co);
}

void conv1d_bwd_weight(const double* x, const double* gy, double* gw, double* gbias, const ConvDims& d) {
  if (!parallel_enabled()) {
    conv1d_bwd_weight_ref(x, gy, gw, gbias, d);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int co = 0; co < d.c_out; ++co) conv1d_bwd_weight_one(x, gy, gw, gbias, d, co);
}

// ---------------------------------------------------------------------------
// transposed conv1d
// ---------------------------------------------------------------------------

static inline void convtr1d_fwd_one(const double* x, const double* w, const double* bias,
                                    double* y, const ConvTrDims& d, int b, int co) {
  const double* xb = x + (size_t)b * d.c_in * d.t_in;
  double* yrow = y + ((size_t)b * d.c_out + co) * d.t_out;
  for (int j = 0; j < d.t_out; ++j) {
    double acc = bias ? bias[co] : 0.0;
    const int jf = j + d.crop_l;
    for (int k = 0; k < d.kernel; ++k) {
      const int num = jf - k;
      if (num < 0 || num % d.stride != 0) continue;
      const int t = num / d.stride;
      if (t >= d.t_in) continue;
      for (int ci = 0; ci < d.c_in; ++ci)
        acc += xb[(size_t)ci * d.t_in + t] * w[((size_t)ci * d.c_out + co) * d.kernel + k];
    }
    yrow[j] = acc;
  }
}

void convtr1d_fwd_ref(const double* x, const double* w, const double* bias, double* y, const ConvTrDims& d) {
  for (int b = 0; b < d.batch; ++b)
    for (int co = 0; co < d.c_out; ++co) convtr1d_fwd_one(x, w, bias, y, d, b, co);
}

void convtr1d_fwd(const double* x, const double* w, const double* bias, double* y, const ConvTrDims& d) {
  if (!parallel_enabled()) {
    convtr1d_fwd_ref(x, w, bias, y, d);
    return;
  }
  const int n = d.batch * d.c_out;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) convtr1d_fwd_one(x, w, bias, y, d, i / d.c_out, i % d.c_out);
}

static inline void convtr1d_bwd_input_one(const double* gy, const double* w, double* gx,
                                          const ConvTrDims& d, int b, int ci) {
  const double* gyb = gy + (size_t)b * d.c_out * d.t_out;
  double* gxr = gx + ((size_t)b * d.c_in + ci) * d.t_in;
  for (int t = 0; t < d.t_in; ++t) {
    double acc = 0.0;
    for (int k = 0; k < d.kernel; ++k) {
      const int j = t * d.stride + k - d.crop_l;
      if (j < 0 || j >= d.t_out) continue;
      for (int co = 0; co < d.c_out; ++co)
        acc += gyb[(size_t)co * d.t_out + j] * w[((size_t)ci * d.c_out + co) * d.kernel + k];
    }
    gxr[t] += acc;
  }
}

void convtr1d_bwd_input_ref(const double* gy, const double* w, double* gx, const ConvTrDims& d) {
  for (int b = 0; b < d.batch; ++b)
    for (int ci = 0; ci < d.c_in; ++ci) convtr1d_bwd_input_one(gy, w, gx, d, b, ci);
}

void convtr1d_bwd_input(const double* gy, const double* w, double* gx, const ConvTrDims& d) {
  if (!parallel_enabled()) {
    convtr1d_bwd_input_ref(gy, w, gx, d);
    return;
  }
  const int n = d.batch * d.c_in;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) convtr1d_bwd_input_one(gy, w, gx, d, i / d.c_in, i % d.c_in);
}

static inline void convtr1d_bwd_weight_one(const double* x, const double* gy, double* gw,
                                           const ConvTrDims& d, int ci) {
  for (int co = 0; co < d.c_out; ++co) {
    for (int k = 0; k < d.kernel; ++k) {
      double acc = 0.0;
      for (int b = 0; b < d.batch; ++b) {
        const double* xr = x + ((size_t)b * d.c_in + ci) * d.t_in;
        const double* gyr = gy + ((size_t)b * d.c_out + co) * d.t_out;
        for (int t = 0; t < d.t_in; ++t) {
          const int j = t * d.stride + k - d.crop_l;
          if (j < 0 || j >= d.t_out) continue;
          acc += xr[t] * gyr[j];
        }
      }
      gw[((size_t)ci * d.c_out + co) * d.kernel + k] += acc;
    }
  }
}

void convtr1d_bwd_weight_ref(const double* x, const double* gy, double* gw, double* gbias, const ConvTrDims& d) {
  for (int ci = 0; ci < d.c_in; ++ci) convtr1d_bwd_weight_one(x, gy, gw, d, ci);
  if (gbias) {
    for (int co = 0; co < d.c_out; ++co) {
      double gb = 0.0;
      for (int b = 0; b < d.batch; ++b) {
        const double* gyr = gy + ((size_t)b * d.c_out + co) * d.t_out;
        for (int j = 0; j < d.t_out; ++j) gb += gyr[j];
      }
      gbias[co] += gb;
    }
  }
}

void convtr1d_bwd_weight(const double* x, const double* gy, double* gw, double* gbias, const ConvTrDims& d) {
  if (!parallel_enabled()) {
    convtr1d_bwd_weight_ref(x, gy, gw, gbias, d);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < d.c_in; ++ci) convtr1d_bwd_weight_one(x, gy, gw, d, ci);
  if (gbias) {
    for (int co = 0; co < d.c_out; ++co) {
      double gb = 0.0;
      for (int b = 0; b < d.batch; ++b) {
        const double* gyr = gy + ((size_t)b * d.c_out + co) * d.t_out;
        for (int j = 0; j < d.t_out; ++j) gb += gyr[j];
      }
      gbias[co] += gb;
    }
  }
}

// ---------------------------------------------------------------------------
// column-wise affine map
// ---------------------------------------------------------------------------

void matcols_fwd_ref(const double* w, const double* x, const double* bias, double* y,
                     int out_dim, int in_dim, int cols) {
  for (int o = 0; o < out_dim; ++o) {
    const double* wrow = w + (size_t)o * in_dim;
    double* yrow = y + (size_t)o * cols;
    for (int t = 0; t < cols; ++t) yrow[t] = bias ? bias[o] : 0.0;
    for (int i = 0; i < in_dim; ++i) {
      const double wi = wrow[i];
      const double* xrow = x + (size_t)i * cols;
      for (int t = 0; t < cols; ++t) yrow[t] += wi * xrow[t];
    }
  }
}

void matcols_fwd(const double* w, const double* x, const double* bias, double* y,
                 int out_dim, int in_dim, int cols) {
  if (!parallel_enabled()) {
    matcols_fwd_ref(w, x, bias, y, out_dim, in_dim, cols);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_dim; ++o) {
    const double* wrow = w + (size_t)o * in_dim;
    double* yrow = y + (size_t)o * cols;
    for (int t = 0; t < cols; ++t) yrow[t] = bias ? bias[o] : 0.0;
    for (int i = 0; i < in_dim; ++i) {
      const double wi = wrow[i];
      const double* xrow = x + (size_t)i * cols;
      for (int t = 0; t < cols; ++t) yrow[t] += wi * xrow[t];
    }
  }
}

void matcols_bwd_x_ref(const double* w, const double* gy, double* gx, int out_dim, int in_dim, int cols) {
  for (int i = 0; i < in_dim; ++i) {
    double* gxr = gx + (size_t)i * cols;
    for (int o = 0; o < out_dim; ++o) {
      const double wi = w[(size_t)o * in_dim + i];
      const double* gyr = gy + (size_t)o * cols;
      for (int t = 0; t < cols; ++t) gxr[t] += wi * gyr[t];
    }
  }
}

void matcols_bwd_x(const double* w, const double* gy, double* gx, int out_dim, int in_dim, int cols) {
  if (!parallel_enabled()) {
    matcols_bwd_x_ref(w, gy, gx, out_dim, in_dim, cols);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < in_dim; ++i) {
    double* gxr = gx + (size_t)i * cols;
    for (int o = 0; o < out_dim; ++o) {
      const double wi = w[(size_t)o * in_dim + i];
      const double* gyr = gy + (size_t)o * cols;
      for (int t = 0; t < cols; ++t) gxr[t] += wi * gyr[t];
    }
  }
}

static inline void matcols_bwd_w_one(const double* x, const double* gy, double* gw, double* gbias,
                                     int in_dim, int cols, int o) {
  const double* gyr = gy + (size_t)o * cols;
  if (gbias) {
    double gb = 0.0;
    for (int t = 0; t < cols; ++t) gb += gyr[t];
    gbias[o] += gb;
  }
  double* gwr = gw + (size_t)o * in_dim;
  for (int i = 0; i < in_dim; ++i) {
    const double* xr = x + (size_t)i * cols;
    double acc = 0.0;
    for (int t = 0; t < cols; ++t) acc += xr[t] * gyr[t];
    gwr[i] += acc;
  }
}

void matcols_bwd_w_ref(const double* x, const double* gy, double* gw, double* gbias,
                       int out_dim, int in_dim, int cols) {
  for (int o = 0; o < out_dim; ++o) matcols_bwd_w_one(x, gy, gw, gbias, in_dim, cols, o);
}

void matcols_bwd_w(const double* x, const double* gy, double* gw, double* gbias,
                   int out_dim, int in_dim, int cols) {
  if (!parallel_enabled()) {
    matcols_bwd_w_ref(x, gy, gw, gbias, out_dim, in_dim, cols);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_dim; ++o) matcols_bwd_w_one(x, gy, gw, gbias, in_dim, cols, o);
}

// ---------------------------------------------------------------------------
// FFT
// ---------------------------------------------------------------------------

void fft_radix2(std::complex<double>* a, int n, bool inverse) {
  // bit-reversal permutation
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * M_PI / len;
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// STFT magnitude
// ---------------------------------------------------------------------------

static void stft_frame_mag(const double* x, const double* window, double* mags,
                           const StftDims& d, int f, std::vector<std::complex<double>>& buf) {
  const double* seg = x + (size_t)f * d.hop;
  for (int n = 0; n < d.win; ++n) buf[n] = std::complex<double>(seg[n] * window[n], 0.0);
  for (int n = d.win; n < d.n_fft; ++n) buf[n] = 0.0;
  fft_radix2(buf.data(), d.n_fft, false);
  double* out = mags + (size_t)f * d.bins();
  for (int k = 0; k < d.bins(); ++k) out[k] = std::abs(buf[k]);
}

void stft_mag_fwd_ref(const double* x, const double* window, double* mags, const StftDims& d) {
  std::vector<std::complex<double>> buf(d.n_fft);
  for (int f = 0; f < d.frames(); ++f) stft_frame_mag(x, window, mags, d, f, buf);
}

void stft_mag_fwd(const double* x, const double* window, double* mags, const StftDims& d) {
  if (!parallel_enabled()) {
    stft_mag_fwd_ref(x, window, mags, d);
    return;
  }
  const int nf = d.frames();
#pragma omp parallel
  {
    std::vector<std::complex<double>> buf(d.n_fft);
#pragma omp for schedule(static)
    for (int f = 0; f < nf; ++f) stft_frame_mag(x, window, mags, d, f, buf);
  }
}

// Per-frame adjoint: rebuild the spectrum, form P_k = g_k * X_k/|X_k| on bins
// 0..N/2, extend Hermitian, inverse-transform and chain through the window.
static void stft_frame_adj(const double* x, const double* window, const double* gmags,
                           double* gframe, const StftDims& d, int f,
                           std::vector<std::complex<double>>& buf,
                           std::vector<std::complex<double>>& q) {
  const double* seg = x + (size_t)f * d.hop;
  for (int n = 0; n < d.win; ++n) buf[n] = std::complex<double>(seg[n] * window[n], 0.0);
  for (int n = d.win; n < d.n_fft; ++n) buf[n] = 0.0;
  fft_radix2(buf.data(), d.n_fft, false);
  const double* g = gmags + (size_t)f * d.bins();
  const int half = d.n_fft / 2;
  for (int k = 0; k <= half; ++k) {
    const double m = std::abs(buf[k]);
    std::complex<double> p = m > 0.0 ? buf[k] * (g[k] / m) : std::complex<double>(0.0, 0.0);
    // interior bins appear twice in the Hermitian extension; halve to keep the sum exact
    q[k] = (k == 0 || k == half) ? p : 0.5 * p;
  }
  for (int k = half + 1; k < d.n_fft; ++k) q[k] = std::conj(q[d.n_fft - k]);
  fft_radix2(q.data(), d.n_fft, true);  // unnormalized inverse
  for (int n = 0; n < d.win; ++n) gframe[n] = q[n].real() * window[n];
}

static void stft_adj_scatter(const double* gframes, double* gx, const StftDims& d) {
  for (int f = 0; f < d.frames(); ++f) {
    const double* gf = gframes + (size_t)f * d.win;
    double* dst = gx + (size_t)f * d.hop;
    for (int n = 0; n < d.win; ++n) dst[n] += gf[n];
  }
}

void stft_mag_adj_ref(const double* x, const double* window, const double* gmags, double* gx,
                      const StftDims& d) {
  const int nf = d.frames();
  std::vector<double> gframes((size_t)nf * d.win);
  std::vector<std::complex<double>> buf(d.n_fft), q(d.n_fft);
  for (int f = 0; f < nf; ++f)
    stft_frame_adj(x, window, gmags, gframes.data() + (size_t)f * d.win, d, f, buf, q);
  stft_adj_scatter(gframes.data(), gx, d);
}

void stft_mag_adj(const double* x, const double* window, const double* gmags, double* gx,
                  const StftDims& d) {
  if (!parallel_enabled()) {
    stft_mag_adj_ref(x, window, gmags, gx, d);
    return;
  }
  const int nf = d.frames();
  std::vector<double> gframes((size_t)nf * d.win);
#pragma omp parallel
  {
    std::vector<std::complex<double>> buf(d.n_fft), q(d.n_fft);
#pragma omp for schedule(static)
    for (int f = 0; f < nf; ++f)
      stft_frame_adj(x, window, gmags, gframes.data() + (size_t)f * d.win, d, f, buf, q);
  }
  // overlap-add stays serial so frame order (and bit pattern) matches the ref
  stft_adj_scatter(gframes.data(), gx, d);
}

// ---------------------------------------------------------------------------
// nearest centroid
// ---------------------------------------------------------------------------

static inline void nearest_one(const double* pts, int dim, const double* codes, int k,
                               int* assign, double* dist2, int i) {
  const double* p = pts + (size_t)i * dim;
  int best = 0;
  double bestd = 0.0;
  for (int c = 0; c < k; ++c) {
    const double* q = codes + (size_t)c * dim;
    double acc = 0.0;
    for (int j = 0; j < dim; ++j) {
      const double diff = p[j] - q[j];
      acc += diff * diff;
    }
    if (c == 0 || acc < bestd) {
      bestd = acc;
      best = c;
    }
  }
  assign[i] = best;
  if (dist2) dist2[i] = bestd;
}

void nearest_code_ref(const double* pts, int n, int dim, const double* codes, int k,
                      int* assign, double* dist2) {
  for (int i = 0; i < n; ++i) nearest_one(pts, dim, codes, k, assign, dist2, i);
}

void nearest_code(const double* pts, int n, int dim, const double* codes, int k,
                  int* assign, double* dist2) {
  if (!parallel_enabled()) {
    nearest_code_ref(pts, n, dim, codes, k, assign, dist2);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) nearest_one(pts, dim, codes, k, assign, dist2, i);
}

}  // namespace dcodec::kern
