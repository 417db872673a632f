#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

// Minimal dense tensor with reverse-mode autodiff. Row-major storage, doubles
// throughout. Graphs are built eagerly by the free functions below; backward()
// walks the graph in reverse topological order. Single graph = single thread;
// independent graphs can live on independent threads.
namespace dcodec::ng {

class Tensor;

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool wants_grad = false;  // transient, set by backward(): some ancestor is a trainable leaf
  std::string name;         // set for named parameters
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls this->grad, pushes into parents

  int64_t numel() const { return (int64_t)value.size(); }
  void ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return (int)node_->shape.size(); }
  int dim(int i) const { return node_->shape[i]; }
  int64_t numel() const { return node_->numel(); }
  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() { node_->ensure_grad(); return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  const std::string& name() const { return node_->name; }
  double item() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Populates grads of every reachable node with requires_grad by reverse
// accumulation from a scalar loss.
void backward(const Tensor& loss);

// Throws if any entry is NaN/Inf; `what` names the offending computation.
void check_finite(const Tensor& t, const std::string& what);

// --- elementwise / scalar ---------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor tanh_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor log_t(const Tensor& a);   // requires positive entries
Tensor sqrt_t(const Tensor& a);  // requires nonnegative entries
Tensor leaky_relu(const Tensor& a, double slope = 0.2);

// --- reductions / contractions ----------------------------------------------
Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor colsum(const Tensor& a);               // [C,T] -> [T]
Tensor dot(const Tensor& a, const Tensor& b); // rank-1 x rank-1 -> scalar
Tensor scale_by(const Tensor& v, const Tensor& s);  // v * scalar tensor s

// --- structure ----------------------------------------------------------------
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor slice_rows(const Tensor& a, int start, int len);  // rank-1
Tensor slice_cols(const Tensor& a, int start, int len);  // [C,T] -> [C,len]
Tensor concat_rows(const std::vector<Tensor>& parts);    // rank-1 concat
Tensor concat_cols(const std::vector<Tensor>& parts);    // [C,*] concat on time
Tensor pad_reflect(const Tensor& a, int left, int right);  // rank-1

// --- neural ops ---------------------------------------------------------------
// x: [C,T] or [B,C,T] ; w: [Co,Ci,K] ; bias: [Co] or undefined
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad_l = 0, int pad_r = 0);
// w: [Ci,Co,K]; full output cropped to [crop_l, crop_l + t_out)
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                        int crop_l, int t_out);
// x: [in] -> [out], or [in,T] -> [out,T]; w: [out,in]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
// normalize across channels at each time step; gain/bias: [C]
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor adaptive_avg_pool_to_1(const Tensor& x);          // [C,T] -> [C,1]
Tensor nearest_neighbor_upsample(const Tensor& x, int t_out);  // [C,T] -> [C,t_out]
// mean over anchors is left to the caller; logits rank-1, true class = index 0
Tensor softmax_cross_entropy(const Tensor& logits, int target);
Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-8);
// magnitude spectrogram [bins, frames] of a rank-1 signal; Hann window of
// `win` samples zero-padded to n_fft; no signal padding here
Tensor stft_mag(const Tensor& x, int win, int n_fft, int hop);
// forward snaps each entry of `bounded` (values in (-1,1)) to the L-level grid
// -1 + 2j/(L-1); gradient passes straight through. Grid indices are reported
// via `indices` (may be null). With bypass=true the values pass unquantized
// (indices still computed) -- used to exercise the straight-through surrogate.
Tensor snap_to_grid_ste(const Tensor& bounded, int levels, std::vector<int>* indices,
                        bool bypass = false);

// --- losses -------------------------------------------------------------------
Tensor l1_loss(const Tensor& a, const Tensor& b);  // mean |a-b|
Tensor l2_loss(const Tensor& a, const Tensor& b);  // mean (a-b)^2

// --- parameters / optimizer -----------------------------------------------------
struct ParamStore {
  std::vector<Tensor> items;

  Tensor create(const std::string& name, std::vector<int> shape);
  Tensor find(const std::string& name) const;  // undefined Tensor if missing
  void zero_grads();
  int64_t total_params() const;

  // binary checkpoint: "DGRD" magic, u32 version, then per parameter
  // (u32 name length, name bytes, u32 rank, u32 dims..., f64 data...)
  void save(const std::string& path, uint32_t version = 1) const;
  void load(const std::string& path, uint32_t expect_version = 1);
};

// Reads a checkpoint into a fresh store without shape expectations.
ParamStore load_checkpoint_raw(const std::string& path, uint32_t expect_version = 1);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  std::vector<std::vector<double>> m, v;
  int64_t step = 0;

  void init(const ParamStore& params, const AdamConfig& c);
};

// standard bias-corrected Adam update from the grads currently stored on params
void adam_step(ParamStore& params, AdamState& state);

// --- rng / init -----------------------------------------------------------------
struct Rng {
  std::mt19937_64 gen;
  explicit Rng(uint64_t seed) : gen(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  int64_t randint(int64_t lo, int64_t hi);  // inclusive range
};

// scaled Gaussian followed by one Gram-Schmidt pass over rows; rows beyond the
// column count are only normalized
void init_near_orthogonal(Tensor& w, int rows, int cols, Rng& rng, double gain = 1.0);

}  // namespace dcodec::ng
