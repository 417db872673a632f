#pragma once

#include <complex>
#include <cstdint>
#include <vector>

// Hot numeric loops shared by the audio transforms, the autodiff ops and the
// analysis tools. Every kernel comes in two flavors: an OpenMP version used by
// default and a plain serial reference (`*_ref`) kept for testing and
// benchmarking. Both compute each output element with the same accumulation
// order, so results are bit-identical regardless of thread count.
namespace dcodec::kern {

bool parallel_enabled();
void set_parallel(bool on);
int max_threads();

// ---------------------------------------------------------------------------
// 1-D convolution, layout x[b][ci][t], w[co][ci][k], y[b][co][t_out]
// y[b,co,t] = bias[co] + sum_{ci,k} x[b, ci, t*stride + k - pad_l] * w[co,ci,k]
// (out-of-range taps read as zero)
// ---------------------------------------------------------------------------
struct ConvDims {
  int batch = 1;
  int c_in = 0;
  int t_in = 0;
  int c_out = 0;
  int kernel = 0;
  int stride = 1;
  int pad_l = 0;
  int pad_r = 0;

  int t_out() const {
    return (t_in + pad_l + pad_r - kernel) / stride + 1;
  }
};

void conv1d_fwd(const double* x, const double* w, const double* bias, double* y, const ConvDims& d);
void conv1d_fwd_ref(const double* x, const double* w, const double* bias, double* y, const ConvDims& d);
void conv1d_bwd_input(const double* gy, const double* w, double* gx, const ConvDims& d);
void conv1d_bwd_input_ref(const double* gy, const double* w, double* gx, const ConvDims& d);
// gw/gbias are accumulated into (callers zero or reuse them for grad accumulation)
void conv1d_bwd_weight(const double* x, const double* gy, double* gw, double* gbias, const ConvDims& d);
void conv1d_bwd_weight_ref(const double* x, const double* gy, double* gw, double* gbias, const ConvDims& d);

// ---------------------------------------------------------------------------
// Transposed 1-D convolution, layout x[b][ci][t], w[ci][co][k].
// Full output index j' = t*stride + k; emitted range is [crop_l, crop_l+t_out).
// ---------------------------------------------------------------------------
struct ConvTrDims {
  int batch = 1;
  int c_in = 0;
  int t_in = 0;
  int c_out = 0;
  int kernel = 0;
  int stride = 1;
  int crop_l = 0;
  int t_out = 0;

  int t_full() const { return (t_in - 1) * stride + kernel; }
};

void convtr1d_fwd(const double* x, const double* w, const double* bias, double* y, const ConvTrDims& d);
void convtr1d_fwd_ref(const double* x, const double* w, const double* bias, double* y, const ConvTrDims& d);
void convtr1d_bwd_input(const double* gy, const double* w, double* gx, const ConvTrDims& d);
void convtr1d_bwd_input_ref(const double* gy, const double* w, double* gx, const ConvTrDims& d);
void convtr1d_bwd_weight(const double* x, const double* gy, double* gw, double* gbias, const ConvTrDims& d);
void convtr1d_bwd_weight_ref(const double* x, const double* gy, double* gw, double* gbias, const ConvTrDims& d);

// ---------------------------------------------------------------------------
// Column-wise affine map: y[o,t] = bias[o] + sum_i W[o,i] * x[i,t]
// ---------------------------------------------------------------------------
void matcols_fwd(const double* w, const double* x, const double* bias, double* y,
                 int out_dim, int in_dim, int cols);
void matcols_fwd_ref(const double* w, const double* x, const double* bias, double* y,
                     int out_dim, int in_dim, int cols);
void matcols_bwd_x(const double* w, const double* gy, double* gx, int out_dim, int in_dim, int cols);
void matcols_bwd_x_ref(const double* w, const double* gy, double* gx, int out_dim, int in_dim, int cols);
void matcols_bwd_w(const double* x, const double* gy, double* gw, double* gbias,
                   int out_dim, int in_dim, int cols);
void matcols_bwd_w_ref(const double* x, const double* gy, double* gw, double* gbias,
                       int out_dim, int in_dim, int cols);

// ---------------------------------------------------------------------------
// Radix-2 FFT, n a power of two. Forward applies no normalization; the
// inverse transform is likewise unnormalized (caller scales by 1/n if needed).
// ---------------------------------------------------------------------------
void fft_radix2(std::complex<double>* a, int n, bool inverse);

// ---------------------------------------------------------------------------
// Short-time magnitude spectra. The signal is framed as-is (no padding here);
// each frame of `win` samples is multiplied by `window`, zero-padded to
// `n_fft` and transformed. Output is frame-major: mags[f*bins() + k].
// ---------------------------------------------------------------------------
struct StftDims {
  int len = 0;
  int win = 0;
  int n_fft = 0;
  int hop = 0;

  int frames() const { return len < win ? 0 : (len - win) / hop + 1; }
  int bins() const { return n_fft / 2 + 1; }
};

void stft_mag_fwd(const double* x, const double* window, double* mags, const StftDims& d);
void stft_mag_fwd_ref(const double* x, const double* window, double* mags, const StftDims& d);
// Adjoint of stft_mag_fwd: accumulates dL/dx given dL/dmags. Recomputes the
// per-frame spectra internally.
void stft_mag_adj(const double* x, const double* window, const double* gmags, double* gx, const StftDims& d);
void stft_mag_adj_ref(const double* x, const double* window, const double* gmags, double* gx, const StftDims& d);

// ---------------------------------------------------------------------------
// Nearest centroid by squared Euclidean distance; ties resolve to the lowest
// index. `dist2` may be null.
// ---------------------------------------------------------------------------
void nearest_code(const double* pts, int n, int dim, const double* codes, int k,
                  int* assign, double* dist2);
void nearest_code_ref(const double* pts, int n, int dim, const double* codes, int k,
                      int* assign, double* dist2);

}  // namespace dcodec::kern
