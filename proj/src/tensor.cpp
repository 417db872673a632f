#include "dcodec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "dcodec/kernels.hpp"

namespace dcodec::ng {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::shared_ptr<Node> make_node(std::vector<int> shape) {
  auto n = std::make_shared<Node>();
  int64_t count = 1;
  for (int d : shape) {
    if (d < 0) fail("negative dimension in tensor shape");
    count *= d;
  }
  n->shape = std::move(shape);
  n->value.assign((size_t)count, 0.0);
  return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) fail(std::string(op) + ": shape mismatch");
}

bool wants(const std::shared_ptr<Node>& p) { return p->wants_grad; }

}  // namespace

void Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = make_node(std::move(shape));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full({1}, v, requires_grad); }

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  auto n = make_node(std::move(shape));
  if ((int64_t)data.size() != n->numel()) fail("Tensor::from: data length does not match shape");
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

double Tensor::item() const {
  if (numel() != 1) fail("item() on non-scalar tensor");
  return node_->value[0];
}

void check_finite(const Tensor& t, const std::string& what) {
  const auto& v = t.data();
  for (size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      fail("non-finite value in " + what + " at flat index " + std::to_string(i));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) fail("backward: loss must be a defined scalar");

  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame { Node* n; size_t next; };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  // parents appear before consumers in `order`; propagate which nodes need grads
  for (Node* n : order) {
    bool w = n->requires_grad;
    for (auto& p : n->parents) w = w || p->wants_grad;
    n->wants_grad = w;
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->wants_grad && !n->grad.empty()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = a.data()[i] + b.data()[i];
  n->parents = {a.node(), b.node()};
  n->backprop = [](Node& self) {
    for (auto& p : self.parents) {
      if (!wants(p)) continue;
      p->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  };
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = a.data()[i] - b.data()[i];
  n->parents = {a.node(), b.node()};
  n->backprop = [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (wants(pb)) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  };
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = a.data()[i] * b.data()[i];
  n->parents = {a.node(), b.node()};
  n->backprop = [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (wants(pb)) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  };
  return Tensor(n);
}

Tensor divide(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "divide");
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = a.data()[i] / b.data()[i];
  n->parents = {a.node(), b.node()};
  n->backprop = [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] / pb->value[i];
    }
    if (wants(pb)) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] -= self.grad[i] * pa->value[i] / (pb->value[i] * pb->value[i]);
    }
  };
  return Tensor(n);
}

Tensor add_scalar(const Tensor& a, double c) {
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = a.data()[i] + c;
  n->parents = {a.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor mul_scalar(const Tensor& a, double c) {
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = a.data()[i] * c;
  n->parents = {a.node()};
  n->backprop = [c](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * c;
  };
  return Tensor(n);
}

Tensor tanh_t(const Tensor& a) {
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = std::tanh(a.data()[i]);
  n->parents = {a.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      p->grad[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  };
  return Tensor(n);
}

Tensor abs_t(const Tensor& a) {
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) n->value[i] = std::fabs(a.data()[i]);
  n->parents = {a.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = p->value[i];
      p->grad[i] += self.grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
    }
  };
  return Tensor(n);
}

Tensor log_t(const Tensor& a) {
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) {
    if (a.data()[i] <= 0.0) fail("log of non-positive value");
    n->value[i] = std::log(a.data()[i]);
  }
  n->parents = {a.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] / p->value[i];
  };
  return Tensor(n);
}

Tensor sqrt_t(const Tensor& a) {
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) {
    if (a.data()[i] < 0.0) fail("sqrt of negative value");
    n->value[i] = std::sqrt(a.data()[i]);
  }
  n->parents = {a.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      p->grad[i] += s > 0.0 ? self.grad[i] * 0.5 / s : 0.0;
    }
  };
  return Tensor(n);
}

Tensor leaky_relu(const Tensor& a, double slope) {
  auto n = make_node(a.shape());
  for (int64_t i = 0; i < n->numel(); ++i) {
    const double x = a.data()[i];
    n->value[i] = x >= 0.0 ? x : slope * x;
  }
  n->parents = {a.node()};
  n->backprop = [slope](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      p->grad[i] += self.grad[i] * (p->value[i] >= 0.0 ? 1.0 : slope);
  };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// reductions / contractions
// ---------------------------------------------------------------------------

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) fail("mean of empty tensor");
  auto n = make_node({1});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  n->value[0] = acc / (double)a.numel();
  n->parents = {a.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    const double g = self.grad[0] / (double)p->value.size();
    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
  };
  return Tensor(n);
}

Tensor sum_all(const Tensor& a) {
  auto n = make_node({1});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  n->value[0] = acc;
  n->parents = {a.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[0];
  };
  return Tensor(n);
}

Tensor colsum(const Tensor& a) {
  if (a.rank() != 2) fail("colsum expects a rank-2 tensor");
  const int c = a.dim(0), t = a.dim(1);
  auto n = make_node({t});
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < t; ++j) n->value[j] += a.data()[(size_t)i * t + j];
  n->parents = {a.node()};
  n->backprop = [c, t](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < t; ++j) p->grad[(size_t)i * t + j] += self.grad[j];
  };
  return Tensor(n);
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel()) fail("dot expects rank-1 tensors of equal length");
  auto n = make_node({1});
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
  n->value[0] = acc;
  n->parents = {a.node(), b.node()};
  n->backprop = [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const double g = self.grad[0];
    if (wants(pa)) {
      pa->ensure_grad();
      for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g * pb->value[i];
    }
    if (wants(pb)) {
      pb->ensure_grad();
      for (size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] += g * pa->value[i];
    }
  };
  return Tensor(n);
}

Tensor scale_by(const Tensor& v, const Tensor& s) {
  if (s.numel() != 1) fail("scale_by expects a scalar second argument");
  auto n = make_node(v.shape());
  const double sv = s.data()[0];
  for (int64_t i = 0; i < v.numel(); ++i) n->value[i] = v.data()[i] * sv;
  n->parents = {v.node(), s.node()};
  n->backprop = [](Node& self) {
    auto& pv = self.parents[0];
    auto& ps = self.parents[1];
    const double sv = ps->value[0];
    if (wants(pv)) {
      pv->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pv->grad[i] += self.grad[i] * sv;
    }
    if (wants(ps)) {
      ps->ensure_grad();
      double acc = 0.0;
      for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pv->value[i];
      ps->grad[0] += acc;
    }
  };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  int64_t count = 1;
  for (int d : shape) count *= d;
  if (count != a.numel()) fail("reshape: element count mismatch");
  auto n = make_node(std::move(shape));
  n->value = a.data();
  n->parents = {a.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor slice_rows(const Tensor& a, int start, int len) {
  if (a.rank() != 1) fail("slice_rows expects a rank-1 tensor");
  if (start < 0 || len < 0 || start + len > a.dim(0)) fail("slice_rows out of range");
  auto n = make_node({len});
  std::copy(a.data().begin() + start, a.data().begin() + start + len, n->value.begin());
  n->parents = {a.node()};
  n->backprop = [start](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[start + i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor slice_cols(const Tensor& a, int start, int len) {
  if (a.rank() != 2) fail("slice_cols expects a rank-2 tensor");
  const int c = a.dim(0), t = a.dim(1);
  if (start < 0 || len < 0 || start + len > t) fail("slice_cols out of range");
  auto n = make_node({c, len});
  for (int i = 0; i < c; ++i)
    std::copy(a.data().begin() + (size_t)i * t + start, a.data().begin() + (size_t)i * t + start + len,
              n->value.begin() + (size_t)i * len);
  n->parents = {a.node()};
  n->backprop = [c, t, start, len](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < len; ++j)
        p->grad[(size_t)i * t + start + j] += self.grad[(size_t)i * len + j];
  };
  return Tensor(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_rows of empty list");
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 1) fail("concat_rows expects rank-1 tensors");
    total += p.dim(0);
  }
  auto n = make_node({total});
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), n->value.begin() + off);
    off += p.data().size();
    n->parents.push_back(p.node());
  }
  n->backprop = [](Node& self) {
    size_t off = 0;
    for (auto& p : self.parents) {
      if (wants(p)) {
        p->ensure_grad();
        for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  };
  return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_cols of empty list");
  const int c = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != c) fail("concat_cols: channel mismatch");
    total += p.dim(1);
  }
  auto n = make_node({c, total});
  int off = 0;
  for (const auto& p : parts) {
    const int t = p.dim(1);
    for (int i = 0; i < c; ++i)
      std::copy(p.data().begin() + (size_t)i * t, p.data().begin() + (size_t)(i + 1) * t,
                n->value.begin() + (size_t)i * total + off);
    off += t;
    n->parents.push_back(p.node());
  }
  n->backprop = [c, total](Node& self) {
    int off = 0;
    for (auto& p : self.parents) {
      const int t = (int)(p->value.size() / c);
      if (wants(p)) {
        p->ensure_grad();
        for (int i = 0; i < c; ++i)
          for (int j = 0; j < t; ++j)
            p->grad[(size_t)i * t + j] += self.grad[(size_t)i * total + off + j];
      }
      off += t;
    }
  };
  return Tensor(n);
}

Tensor pad_reflect(const Tensor& a, int left, int right) {
  if (a.rank() != 1) fail("pad_reflect expects a rank-1 tensor");
  const int n_in = a.dim(0);
  if (n_in < 2 && (left > 0 || right > 0)) fail("pad_reflect needs at least 2 samples");
  if (left > n_in - 1 || right > n_in - 1) fail("pad_reflect: pad exceeds signal length");
  auto n = make_node({n_in + left + right});
  auto src_of = [n_in, left](int i) {
    int s = i - left;
    if (s < 0) s = -s;
    if (s >= n_in) s = 2 * (n_in - 1) - s;
    return s;
  };
  for (int i = 0; i < n_in + left + right; ++i) n->value[i] = a.data()[src_of(i)];
  n->parents = {a.node()};
  n->backprop = [src_of](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[src_of((int)i)] += self.grad[i];
  };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// neural ops
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad_l, int pad_r) {
  if (w.rank() != 3) fail("conv1d: weight must be [Co,Ci,K]");
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2) fail("conv1d: input must be [C,T] or [B,C,T]");
  kern::ConvDims d;
  d.batch = batched ? x.dim(0) : 1;
  d.c_in = batched ? x.dim(1) : x.dim(0);
  d.t_in = batched ? x.dim(2) : x.dim(1);
  d.c_out = w.dim(0);
  d.kernel = w.dim(2);
  d.stride = stride;
  d.pad_l = pad_l;
  d.pad_r = pad_r;
  if (w.dim(1) != d.c_in) fail("conv1d: channel mismatch between input and weight");
  if (stride < 1) fail("conv1d: stride must be >= 1");
  if (d.t_in + pad_l + pad_r < d.kernel) fail("conv1d: input shorter than kernel");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.c_out)) fail("conv1d: bad bias shape");

  const int to = d.t_out();
  auto n = make_node(batched ? std::vector<int>{d.batch, d.c_out, to} : std::vector<int>{d.c_out, to});
  kern::conv1d_fwd(x.data().data(), w.data().data(), bias.defined() ? bias.data().data() : nullptr,
                   n->value.data(), d);
  n->parents = {x.node(), w.node()};
  if (bias.defined()) n->parents.push_back(bias.node());
  n->backprop = [d](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    if (wants(px)) {
      px->ensure_grad();
      kern::conv1d_bwd_input(self.grad.data(), pw->value.data(), px->grad.data(), d);
    }
    const bool has_bias = self.parents.size() > 2;
    double* gbias = nullptr;
    if (has_bias && wants(self.parents[2])) {
      self.parents[2]->ensure_grad();
      gbias = self.parents[2]->grad.data();
    }
    if (wants(pw)) {
      pw->ensure_grad();
      kern::conv1d_bwd_weight(px->value.data(), self.grad.data(), pw->grad.data(), gbias, d);
    } else if (gbias) {
      std::vector<double> scratch(pw->value.size(), 0.0);
      kern::conv1d_bwd_weight(px->value.data(), self.grad.data(), scratch.data(), gbias, d);
    }
  };
  return Tensor(n);
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                        int crop_l, int t_out) {
  if (w.rank() != 3) fail("conv_transpose1d: weight must be [Ci,Co,K]");
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2) fail("conv_transpose1d: input must be [C,T] or [B,C,T]");
  kern::ConvTrDims d;
  d.batch = batched ? x.dim(0) : 1;
  d.c_in = batched ? x.dim(1) : x.dim(0);
  d.t_in = batched ? x.dim(2) : x.dim(1);
  d.c_out = w.dim(1);
  d.kernel = w.dim(2);
  d.stride = stride;
  d.crop_l = crop_l;
  d.t_out = t_out;
  if (w.dim(0) != d.c_in) fail("conv_transpose1d: channel mismatch");
  if (crop_l < 0 || crop_l + t_out > d.t_full()) fail("conv_transpose1d: crop out of range");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.c_out)) fail("conv_transpose1d: bad bias shape");

  auto n = make_node(batched ? std::vector<int>{d.batch, d.c_out, t_out} : std::vector<int>{d.c_out, t_out});
  kern::convtr1d_fwd(x.data().data(), w.data().data(), bias.defined() ? bias.data().data() : nullptr,
                     n->value.data(), d);
  n->parents = {x.node(), w.node()};
  if (bias.defined()) n->parents.push_back(bias.node());
  n->backprop = [d](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    if (wants(px)) {
      px->ensure_grad();
      kern::convtr1d_bwd_input(self.grad.data(), pw->value.data(), px->grad.data(), d);
    }
    const bool has_bias = self.parents.size() > 2;
    double* gbias = nullptr;
    if (has_bias && wants(self.parents[2])) {
      self.parents[2]->ensure_grad();
      gbias = self.parents[2]->grad.data();
    }
    if (wants(pw)) {
      pw->ensure_grad();
      kern::convtr1d_bwd_weight(px->value.data(), self.grad.data(), pw->grad.data(), gbias, d);
    } else if (gbias) {
      std::vector<double> scratch(pw->value.size(), 0.0);
      kern::convtr1d_bwd_weight(px->value.data(), self.grad.data(), scratch.data(), gbias, d);
    }
  };
  return Tensor(n);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2) fail("linear: weight must be [out,in]");
  const int out_dim = w.dim(0), in_dim = w.dim(1);
  const bool vec = x.rank() == 1;
  if (!vec && x.rank() != 2) fail("linear: input must be rank 1 or 2");
  const int xin = vec ? x.dim(0) : x.dim(0);
  const int cols = vec ? 1 : x.dim(1);
  if (xin != in_dim) fail("linear: dimension mismatch");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) fail("linear: bad bias shape");

  auto n = make_node(vec ? std::vector<int>{out_dim} : std::vector<int>{out_dim, cols});
  kern::matcols_fwd(w.data().data(), x.data().data(), bias.defined() ? bias.data().data() : nullptr,
                    n->value.data(), out_dim, in_dim, cols);
  n->parents = {x.node(), w.node()};
  if (bias.defined()) n->parents.push_back(bias.node());
  n->backprop = [out_dim, in_dim, cols](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    if (wants(px)) {
      px->ensure_grad();
      kern::matcols_bwd_x(pw->value.data(), self.grad.data(), px->grad.data(), out_dim, in_dim, cols);
    }
    const bool has_bias = self.parents.size() > 2;
    double* gbias = nullptr;
    if (has_bias && wants(self.parents[2])) {
      self.parents[2]->ensure_grad();
      gbias = self.parents[2]->grad.data();
    }
    if (wants(pw)) {
      pw->ensure_grad();
      kern::matcols_bwd_w(px->value.data(), self.grad.data(), pw->grad.data(), gbias, out_dim, in_dim, cols);
    } else if (gbias) {
      std::vector<double> scratch(pw->value.size(), 0.0);
      kern::matcols_bwd_w(px->value.data(), self.grad.data(), scratch.data(), gbias, out_dim, in_dim, cols);
    }
  };
  return Tensor(n);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() != 2) fail("layer_norm expects [C,T]");
  const int c = x.dim(0), t = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != c || bias.rank() != 1 || bias.dim(0) != c)
    fail("layer_norm: gain/bias must be [C]");
  auto n = make_node({c, t});
  // keep normalized values around for the backward pass
  auto xhat = std::make_shared<std::vector<double>>((size_t)c * t);
  auto inv_std = std::make_shared<std::vector<double>>(t);
  for (int j = 0; j < t; ++j) {
    double mu = 0.0;
    for (int i = 0; i < c; ++i) mu += x.data()[(size_t)i * t + j];
    mu /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) {
      const double dv = x.data()[(size_t)i * t + j] - mu;
      var += dv * dv;
    }
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[j] = is;
    for (int i = 0; i < c; ++i) {
      const double xh = (x.data()[(size_t)i * t + j] - mu) * is;
      (*xhat)[(size_t)i * t + j] = xh;
      n->value[(size_t)i * t + j] = gain.data()[i] * xh + bias.data()[i];
    }
  }
  n->parents = {x.node(), gain.node(), bias.node()};
  n->backprop = [c, t, xhat, inv_std](Node& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    if (wants(pg)) {
      pg->ensure_grad();
      for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        for (int j = 0; j < t; ++j) acc += self.grad[(size_t)i * t + j] * (*xhat)[(size_t)i * t + j];
        pg->grad[i] += acc;
      }
    }
    if (wants(pb)) {
      pb->ensure_grad();
      for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        for (int j = 0; j < t; ++j) acc += self.grad[(size_t)i * t + j];
        pb->grad[i] += acc;
      }
    }
    if (wants(px)) {
      px->ensure_grad();
      for (int j = 0; j < t; ++j) {
        double mean_dy = 0.0, mean_dy_xhat = 0.0;
        for (int i = 0; i < c; ++i) {
          const double dy = self.grad[(size_t)i * t + j] * pg->value[i];
          mean_dy += dy;
          mean_dy_xhat += dy * (*xhat)[(size_t)i * t + j];
        }
        mean_dy /= c;
        mean_dy_xhat /= c;
        for (int i = 0; i < c; ++i) {
          const double dy = self.grad[(size_t)i * t + j] * pg->value[i];
          px->grad[(size_t)i * t + j] +=
              (dy - mean_dy - (*xhat)[(size_t)i * t + j] * mean_dy_xhat) * (*inv_std)[j];
        }
      }
    }
  };
  return Tensor(n);
}

Tensor adaptive_avg_pool_to_1(const Tensor& x) {
  if (x.rank() != 2) fail("adaptive_avg_pool_to_1 expects [C,T]");
  const int c = x.dim(0), t = x.dim(1);
  if (t < 1) fail("adaptive_avg_pool_to_1: empty time axis");
  auto n = make_node({c, 1});
  for (int i = 0; i < c; ++i) {
    double acc = 0.0;
    for (int j = 0; j < t; ++j) acc += x.data()[(size_t)i * t + j];
    n->value[i] = acc / t;
  }
  n->parents = {x.node()};
  n->backprop = [c, t](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (int i = 0; i < c; ++i) {
      const double g = self.grad[i] / t;
      for (int j = 0; j < t; ++j) p->grad[(size_t)i * t + j] += g;
    }
  };
  return Tensor(n);
}

Tensor nearest_neighbor_upsample(const Tensor& x, int t_out) {
  if (x.rank() != 2) fail("nearest_neighbor_upsample expects [C,T]");
  if (t_out < 1) fail("nearest_neighbor_upsample: target length must be >= 1");
  const int c = x.dim(0), t_in = x.dim(1);
  auto n = make_node({c, t_out});
  for (int j = 0; j < t_out; ++j) {
    const int src = (int)((int64_t)j * t_in / t_out);
    for (int i = 0; i < c; ++i) n->value[(size_t)i * t_out + j] = x.data()[(size_t)i * t_in + src];
  }
  n->parents = {x.node()};
  n->backprop = [c, t_in, t_out](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (int j = 0; j < t_out; ++j) {
      const int src = (int)((int64_t)j * t_in / t_out);
      for (int i = 0; i < c; ++i) p->grad[(size_t)i * t_in + src] += self.grad[(size_t)i * t_out + j];
    }
  };
  return Tensor(n);
}

Tensor softmax_cross_entropy(const Tensor& logits, int target) {
  if (logits.rank() != 1) fail("softmax_cross_entropy expects rank-1 logits");
  const int k = logits.dim(0);
  if (target < 0 || target >= k) fail("softmax_cross_entropy: target out of range");
  double mx = logits.data()[0];
  for (double v : logits.data()) mx = std::max(mx, v);
  double lse = 0.0;
  for (double v : logits.data()) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  auto n = make_node({1});
  n->value[0] = lse - logits.data()[target];
  n->parents = {logits.node()};
  n->backprop = [target, lse](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    const double g = self.grad[0];
    for (size_t i = 0; i < p->grad.size(); ++i) {
      const double soft = std::exp(p->value[i] - lse);
      p->grad[i] += g * (soft - ((int)i == target ? 1.0 : 0.0));
    }
  };
  return Tensor(n);
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
  Tensor na = add_scalar(sqrt_t(dot(a, a)), eps);
  Tensor nb = add_scalar(sqrt_t(dot(b, b)), eps);
  return divide(dot(a, b), mul(na, nb));
}

Tensor stft_mag(const Tensor& x, int win, int n_fft, int hop) {
  if (x.rank() != 1) fail("stft_mag expects a rank-1 signal");
  if (win > n_fft || hop < 1 || win < hop) fail("stft_mag: need hop <= win <= n_fft, hop >= 1");
  if ((n_fft & (n_fft - 1)) != 0) fail("stft_mag: n_fft must be a power of two");
  kern::StftDims d;
  d.len = x.dim(0);
  d.win = win;
  d.n_fft = n_fft;
  d.hop = hop;
  if (d.frames() < 1) fail("stft_mag: signal shorter than one window");
  const int frames = d.frames(), bins = d.bins();

  auto window = std::make_shared<std::vector<double>>(win);
  for (int i = 0; i < win; ++i) (*window)[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / win);

  std::vector<double> frame_major((size_t)frames * bins);
  kern::stft_mag_fwd(x.data().data(), window->data(), frame_major.data(), d);

  auto n = make_node({bins, frames});
  for (int f = 0; f < frames; ++f)
    for (int k = 0; k < bins; ++k) n->value[(size_t)k * frames + f] = frame_major[(size_t)f * bins + k];
  n->parents = {x.node()};
  n->backprop = [d, window, frames, bins](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    std::vector<double> gm((size_t)frames * bins);
    for (int f = 0; f < frames; ++f)
      for (int k = 0; k < bins; ++k) gm[(size_t)f * bins + k] = self.grad[(size_t)k * frames + f];
    kern::stft_mag_adj(p->value.data(), window->data(), gm.data(), p->grad.data(), d);
  };
  return Tensor(n);
}

Tensor snap_to_grid_ste(const Tensor& bounded, int levels, std::vector<int>* indices, bool bypass) {
  if (levels < 2) fail("snap_to_grid_ste: need at least 2 levels");
  auto n = make_node(bounded.shape());
  if (indices) indices->assign(bounded.numel(), 0);
  const double half = (levels - 1) / 2.0;
  for (int64_t i = 0; i < bounded.numel(); ++i) {
    const double v = bounded.data()[i];
    int j = (int)std::floor((v + 1.0) * half + 0.5);  // ties round to the larger index
    j = std::clamp(j, 0, levels - 1);
    if (indices) (*indices)[i] = j;
    n->value[i] = bypass ? v : -1.0 + (double)j / half;
  }
  n->parents = {bounded.node()};
  n->backprop = [](Node& self) {
    auto& p = self.parents[0];
    if (!wants(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor l1_loss(const Tensor& a, const Tensor& b) { return mean_all(abs_t(sub(a, b))); }

Tensor l2_loss(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// parameters / optimizer
// ---------------------------------------------------------------------------

Tensor ParamStore::create(const std::string& name, std::vector<int> shape) {
  for (const auto& t : items)
    if (t.name() == name) fail("duplicate parameter name: " + name);
  Tensor t = Tensor::zeros(std::move(shape), true);
  t.node()->name = name;
  items.push_back(t);
  return t;
}

Tensor ParamStore::find(const std::string& name) const {
  for (const auto& t : items)
    if (t.name() == name) return t;
  return Tensor();
}

void ParamStore::zero_grads() {
  for (auto& t : items) {
    auto& g = t.node()->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& t : items) n += t.numel();
  return n;
}

namespace {
template <typename T>
void write_pod(std::ofstream& os, const T& v) { os.write(reinterpret_cast<const char*>(&v), sizeof(T)); }
template <typename T>
bool read_pod(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return (size_t)is.gcount() == sizeof(T);
}
}  // namespace

void ParamStore::save(const std::string& path, uint32_t version) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open checkpoint for writing: " + path);
  os.write("DGRD", 4);
  write_pod(os, version);
  for (const auto& t : items) {
    const uint32_t nl = (uint32_t)t.name().size();
    write_pod(os, nl);
    os.write(t.name().data(), nl);
    const uint32_t rank = (uint32_t)t.shape().size();
    write_pod(os, rank);
    for (int d : t.shape()) write_pod(os, (uint32_t)d);
    os.write(reinterpret_cast<const char*>(t.data().data()), (std::streamsize)(t.numel() * sizeof(double)));
  }
  if (!os) fail("I/O failure writing checkpoint: " + path);
}

ParamStore load_checkpoint_raw(const std::string& path, uint32_t expect_version) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "DGRD", 4) != 0)
    fail("not a DGRD checkpoint: " + path);
  uint32_t version = 0;
  if (!read_pod(is, version) || version != expect_version)
    fail("unsupported checkpoint version in " + path);

  ParamStore store;
  while (true) {
    uint32_t nl = 0;
    if (!read_pod(is, nl)) break;  // clean EOF
    std::string name(nl, '\0');
    is.read(name.data(), nl);
    uint32_t rank = 0;
    if ((size_t)is.gcount() != nl || !read_pod(is, rank)) fail("truncated checkpoint: " + path);
    std::vector<int> shape(rank);
    int64_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t d = 0;
      if (!read_pod(is, d)) fail("truncated checkpoint: " + path);
      shape[i] = (int)d;
      count *= d;
    }
    Tensor t = store.create(name, shape);
    is.read(reinterpret_cast<char*>(t.data().data()), (std::streamsize)(count * sizeof(double)));
    if ((int64_t)is.gcount() != (int64_t)(count * sizeof(double))) fail("truncated checkpoint: " + path);
  }
  return store;
}

void ParamStore::load(const std::string& path, uint32_t expect_version) {
  ParamStore raw = load_checkpoint_raw(path, expect_version);
  if (raw.items.size() != items.size())
    fail("checkpoint parameter count mismatch for " + path);
  for (auto& t : items) {
    Tensor src = raw.find(t.name());
    if (!src.defined()) fail("checkpoint is missing parameter '" + t.name() + "': " + path);
    if (src.shape() != t.shape()) fail("checkpoint parameter '" + t.name() + "' has mismatched shape");
    t.data() = src.data();
  }
}

void AdamState::init(const ParamStore& params, const AdamConfig& c) {
  cfg = c;
  step = 0;
  m.clear();
  v.clear();
  for (const auto& t : params.items) {
    m.emplace_back(t.numel(), 0.0);
    v.emplace_back(t.numel(), 0.0);
  }
}

void adam_step(ParamStore& params, AdamState& state) {
  if (state.m.size() != params.items.size()) fail("adam_step: state not initialized for these params");
  state.step += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, (double)state.step);
  const double bc2 = 1.0 - std::pow(b2, (double)state.step);
  for (size_t pi = 0; pi < params.items.size(); ++pi) {
    Tensor& t = params.items[pi];
    if (!t.requires_grad()) continue;
    auto& g = t.node()->grad;
    if (g.empty()) continue;
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    auto& val = t.data();
    for (size_t i = 0; i < val.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      val[i] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// rng / init
// ---------------------------------------------------------------------------

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(gen);
}

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  return d(gen);
}

int64_t Rng::randint(int64_t lo, int64_t hi) {
  std::uniform_int_distribution<int64_t> d(lo, hi);
  return d(gen);
}

void init_near_orthogonal(Tensor& w, int rows, int cols, Rng& rng, double gain) {
  if ((int64_t)rows * cols != w.numel()) fail("init_near_orthogonal: rows*cols != numel");
  auto& d = w.data();
  for (auto& v : d) v = rng.normal(0.0, 1.0);
  for (int r = 0; r < rows; ++r) {
    double* row = d.data() + (size_t)r * cols;
    const int limit = std::min(r, cols);
    for (int q = 0; q < limit; ++q) {
      const double* prev = d.data() + (size_t)q * cols;
      double proj = 0.0;
      for (int i = 0; i < cols; ++i) proj += row[i] * prev[i];
      for (int i = 0; i < cols; ++i) row[i] -= proj * prev[i];
    }
    double norm = 0.0;
    for (int i = 0; i < cols; ++i) norm += row[i] * row[i];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      // degenerate residual: fall back to a fresh normalized draw
      for (int i = 0; i < cols; ++i) row[i] = rng.normal(0.0, 1.0);
      norm = 0.0;
      for (int i = 0; i < cols; ++i) norm += row[i] * row[i];
      norm = std::sqrt(norm);
    }
    for (int i = 0; i < cols; ++i) row[i] *= gain / norm;
  }
}

}  // namespace dcodec::ng
