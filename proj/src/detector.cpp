#include "dcodec/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dcodec::det {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// symmetric "same" padding so T_out = ceil(T / stride)
std::pair<int, int> same_pad(int t, int stride, int kernel) {
  const int t_out = (t + stride - 1) / stride;
  int pad = (t_out - 1) * stride + kernel - t;
  if (pad < 0) pad = 0;
  return {pad / 2, pad - pad / 2};
}

ng::Tensor column(const ng::Tensor& z, int t) {
  return ng::reshape(ng::slice_cols(z, t, 1), {z.dim(0)});
}
}  // namespace

int DetectorConfig::downsample_ratio() const {
  int r = 1;
  for (int s : strides) r *= s;
  return r;
}

void DetectorConfig::validate() const {
  if (kernel_sizes.size() != strides.size() || kernel_sizes.empty())
    fail("detector config: kernel_sizes and strides must be nonempty lists of equal length");
  for (size_t i = 0; i < strides.size(); ++i)
    if (kernel_sizes[i] < 1 || strides[i] < 1) fail("detector config: kernels and strides must be positive");
  if (embed_dim < 1 || proj_dim < 1) fail("detector config: dims must be positive");
  if (tau <= 0.0) fail("detector config: tau must be positive");
  if (pred_steps < 1) fail("detector config: pred_steps must be >= 1");
  if (n_negatives < 1) fail("detector config: n_negatives must be >= 1");
  if (prominence < 0.0) fail("detector config: prominence must be nonnegative");
}

void BoundarySet::validate() const {
  int prev = 0;
  for (int b : indices) {
    if (b <= prev || b >= total_frames)
      fail("BoundarySet: indices must be strictly increasing and interior to (0, T)");
    prev = b;
  }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

namespace {
constexpr uint32_t kDetectorMetaLenBase = 10;

std::vector<double> pack_cfg(const DetectorConfig& c) {
  std::vector<double> v;
  v.push_back((double)c.kernel_sizes.size());
  for (int k : c.kernel_sizes) v.push_back((double)k);
  for (int s : c.strides) v.push_back((double)s);
  v.push_back((double)c.embed_dim);
  v.push_back((double)c.proj_dim);
  v.push_back(c.alpha);
  v.push_back(c.tau);
  v.push_back((double)c.pred_steps);
  v.push_back((double)c.n_negatives);
  v.push_back(c.prominence);
  v.push_back((double)c.min_peak_distance);
  v.push_back((double)c.min_peak_width);
  v.push_back(c.use_layer_norm ? 1.0 : 0.0);
  return v;
}

DetectorConfig unpack_cfg(const std::vector<double>& v) {
  if (v.size() < 2) fail("detector checkpoint: bad meta block");
  const int n = (int)v[0];
  if (n < 1 || v.size() != (size_t)(1 + 2 * n + kDetectorMetaLenBase)) fail("detector checkpoint: bad meta block");
  DetectorConfig c;
  c.kernel_sizes.assign(n, 0);
  c.strides.assign(n, 0);
  for (int i = 0; i < n; ++i) c.kernel_sizes[i] = (int)v[1 + i];
  for (int i = 0; i < n; ++i) c.strides[i] = (int)v[1 + n + i];
  size_t o = 1 + 2 * (size_t)n;
  c.embed_dim = (int)v[o++];
  c.proj_dim = (int)v[o++];
  c.alpha = v[o++];
  c.tau = v[o++];
  c.pred_steps = (int)v[o++];
  c.n_negatives = (int)v[o++];
  c.prominence = v[o++];
  c.min_peak_distance = (int)v[o++];
  c.min_peak_width = (int)v[o++];
  c.use_layer_norm = v[o++] != 0.0;
  return c;
}
}  // namespace

DetectorModel::DetectorModel(const DetectorConfig& c, uint64_t seed) : cfg(c) {
  cfg.validate();
  ng::Rng rng(seed);
  const int layers = (int)cfg.kernel_sizes.size();
  for (int i = 0; i < layers; ++i) {
    const int c_in = i == 0 ? 1 : cfg.embed_dim;
    const int k = cfg.kernel_sizes[i];
    ng::Tensor w = params.create("enc" + std::to_string(i) + ".w", {cfg.embed_dim, c_in, k});
    ng::init_near_orthogonal(w, cfg.embed_dim, c_in * k, rng);
    params.create("enc" + std::to_string(i) + ".b", {cfg.embed_dim});
    if (cfg.use_layer_norm) {
      ng::Tensor g = params.create("enc" + std::to_string(i) + ".ln_g", {cfg.embed_dim});
      std::fill(g.data().begin(), g.data().end(), 1.0);
      params.create("enc" + std::to_string(i) + ".ln_b", {cfg.embed_dim});
    }
  }
  ng::Tensor pw = params.create("proj.w", {cfg.proj_dim, cfg.embed_dim});
  ng::init_near_orthogonal(pw, cfg.proj_dim, cfg.embed_dim, rng);
  params.create("proj.b", {cfg.proj_dim});

  ng::Tensor meta = params.create("meta.detector", {(int)pack_cfg(cfg).size()});
  meta.data() = pack_cfg(cfg);
  meta.set_requires_grad(false);
}

ng::Tensor DetectorModel::forward(const std::vector<double>& samples) const {
  const int ratio = cfg.downsample_ratio();
  if ((int)samples.size() < ratio)
    fail("audio too short for the detector: " + std::to_string(samples.size()) + " samples < " +
         std::to_string(ratio));
  ng::Tensor x = ng::Tensor::from({1, (int)samples.size()}, samples);
  const int layers = (int)cfg.kernel_sizes.size();
  for (int i = 0; i < layers; ++i) {
    const auto [pl, pr] = same_pad(x.dim(1), cfg.strides[i], cfg.kernel_sizes[i]);
    x = ng::conv1d(x, params.find("enc" + std::to_string(i) + ".w"),
                   params.find("enc" + std::to_string(i) + ".b"), cfg.strides[i], pl, pr);
    if (cfg.use_layer_norm)
      x = ng::layer_norm(x, params.find("enc" + std::to_string(i) + ".ln_g"),
                         params.find("enc" + std::to_string(i) + ".ln_b"));
    x = ng::leaky_relu(x, 0.2);
  }
  return ng::linear(x, params.find("proj.w"), params.find("proj.b"));
}

void DetectorModel::save(const std::string& path) const { params.save(path); }

DetectorModel DetectorModel::load(const std::string& path) {
  ng::ParamStore raw = ng::load_checkpoint_raw(path);
  ng::Tensor meta = raw.find("meta.detector");
  if (!meta.defined()) fail("not a detector checkpoint (missing meta): " + path);
  DetectorModel model(unpack_cfg(meta.data()), 0);
  model.params.load(path);
  return model;
}

// ---------------------------------------------------------------------------
// scores and loss
// ---------------------------------------------------------------------------

ng::Tensor similarity_scores(const ng::Tensor& z, int k, double alpha) {
  if (z.rank() != 2) fail("similarity_scores expects [D,T]");
  const int t = z.dim(1);
  if (k < 1 || k >= t) fail("similarity_scores: need 1 <= k < T");
  ng::Tensor za = ng::slice_cols(z, 0, t - k);
  ng::Tensor zb = ng::slice_cols(z, k, t - k);
  ng::Tensor num = ng::colsum(ng::mul(za, zb));
  ng::Tensor na = ng::add_scalar(ng::sqrt_t(ng::colsum(ng::mul(za, za))), 1e-8);
  ng::Tensor nb = ng::add_scalar(ng::sqrt_t(ng::colsum(ng::mul(zb, zb))), 1e-8);
  return ng::mul_scalar(ng::divide(num, ng::mul(na, nb)), -alpha);
}

ng::Tensor contrastive_loss(const std::vector<ng::Tensor>& positives,
                            const std::vector<std::vector<ng::Tensor>>& negatives, double tau) {
  if (tau <= 0.0) fail("contrastive_loss: tau must be positive");
  if (positives.empty() || positives.size() != negatives.size())
    fail("contrastive_loss: need matching nonempty positive/negative lists");
  std::vector<ng::Tensor> anchor_losses;
  anchor_losses.reserve(positives.size());
  for (size_t a = 0; a < positives.size(); ++a) {
    if (negatives[a].empty()) fail("contrastive_loss: anchor with no negatives");
    std::vector<ng::Tensor> logits;
    logits.reserve(1 + negatives[a].size());
    logits.push_back(ng::reshape(positives[a], {1}));
    for (const auto& n : negatives[a]) logits.push_back(ng::reshape(n, {1}));
    ng::Tensor stacked = ng::mul_scalar(ng::concat_rows(logits), 1.0 / tau);
    anchor_losses.push_back(ng::softmax_cross_entropy(stacked, 0));
  }
  return ng::mean_all(ng::concat_rows(anchor_losses));
}

std::vector<int> sample_negatives(int total_frames, int anchor, int n, int k, ng::Rng& rng) {
  std::vector<int> eligible;
  eligible.reserve(total_frames);
  for (int t = 0; t < total_frames; ++t)
    if (std::abs(t - anchor) > k) eligible.push_back(t);
  if ((int)eligible.size() < n)
    fail("sample_negatives: only " + std::to_string(eligible.size()) + " eligible frames for " +
         std::to_string(n) + " negatives");
  for (int i = 0; i < n; ++i) {
    const int j = (int)rng.randint(i, (int64_t)eligible.size() - 1);
    std::swap(eligible[i], eligible[j]);
  }
  eligible.resize(n);
  return eligible;
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

std::vector<double> dissimilarity_trace(const ng::Tensor& z) {
  const int d = z.dim(0), t = z.dim(1);
  std::vector<double> trace(std::max(0, t - 1));
  const auto& v = z.data();
  for (int i = 0; i + 1 < t; ++i) {
    double num = 0.0, na = 0.0, nb = 0.0;
    for (int c = 0; c < d; ++c) {
      const double a = v[(size_t)c * t + i];
      const double b = v[(size_t)c * t + i + 1];
      num += a * b;
      na += a * a;
      nb += b * b;
    }
    trace[i] = 1.0 - num / ((std::sqrt(na) + 1e-8) * (std::sqrt(nb) + 1e-8));
  }
  return trace;
}

bool min_max_normalize(std::vector<double>& trace) {
  if (trace.empty()) return false;
  const auto [lo_it, hi_it] = std::minmax_element(trace.begin(), trace.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) return false;
  const double inv = 1.0 / (hi - lo);
  for (double& v : trace) v = (v - lo) * inv;
  return true;
}

namespace {
double peak_prominence(const std::vector<double>& d, int p) {
  const double h = d[p];
  double left_min = h;
  for (int i = p - 1; i >= 0 && d[i] <= h; --i) left_min = std::min(left_min, d[i]);
  double right_min = h;
  for (int i = p + 1; i < (int)d.size() && d[i] <= h; ++i) right_min = std::min(right_min, d[i]);
  return h - std::max(left_min, right_min);
}

int peak_width(const std::vector<double>& d, int p, double prom) {
  const double ref = d[p] - 0.5 * prom;
  int l = p;
  while (l > 0 && d[l - 1] >= ref) --l;
  int r = p;
  while (r + 1 < (int)d.size() && d[r + 1] >= ref) ++r;
  return r - l + 1;
}
}  // namespace

std::vector<int> find_peaks(const std::vector<double>& trace, double prominence,
                            int min_distance, int min_width) {
  const int n = (int)trace.size();
  std::vector<int> peaks;
  int i = 1;
  while (i < n - 1) {
    if (trace[i] > trace[i - 1]) {
      int j = i;
      while (j + 1 < n && trace[j + 1] == trace[i]) ++j;  // plateau
      if (j < n - 1 && trace[j + 1] < trace[i]) peaks.push_back(i);
      i = j + 1;
    } else {
      ++i;
    }
  }

  std::vector<int> kept;
  std::vector<double> proms;
  for (int p : peaks) {
    const double pr = peak_prominence(trace, p);
    if (pr >= prominence) {
      kept.push_back(p);
      proms.push_back(pr);
    }
  }

  if (min_distance > 0 && kept.size() > 1) {
    // highest peaks claim their neighborhood first; ties go to the earlier one
    std::vector<size_t> order(kept.size());
    for (size_t q = 0; q < order.size(); ++q) order[q] = q;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return trace[kept[a]] > trace[kept[b]];
    });
    std::vector<bool> removed(kept.size(), false);
    for (size_t oi : order) {
      if (removed[oi]) continue;
      for (size_t q = 0; q < kept.size(); ++q)
        if (q != oi && !removed[q] && std::abs(kept[q] - kept[oi]) < min_distance) removed[q] = true;
    }
    std::vector<int> filtered;
    std::vector<double> fproms;
    for (size_t q = 0; q < kept.size(); ++q)
      if (!removed[q]) {
        filtered.push_back(kept[q]);
        fproms.push_back(proms[q]);
      }
    kept.swap(filtered);
    proms.swap(fproms);
  }

  if (min_width > 0) {
    std::vector<int> filtered;
    for (size_t q = 0; q < kept.size(); ++q)
      if (peak_width(trace, kept[q], proms[q]) >= min_width) filtered.push_back(kept[q]);
    kept.swap(filtered);
  }

  return kept;
}

BoundarySet detect_boundaries(const audio::AudioBuffer& buffer, const DetectorModel& model) {
  ng::Tensor z = model.forward(buffer.samples);
  const int t = z.dim(1);
  if (t < 2) fail("audio too short for boundary detection (needs at least two frames)");
  std::vector<double> trace = dissimilarity_trace(z);
  BoundarySet out;
  out.total_frames = t;
  if (!min_max_normalize(trace)) return out;  // constant trace: no boundaries
  out.indices = find_peaks(trace, model.cfg.prominence, model.cfg.min_peak_distance,
                           model.cfg.min_peak_width);
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

ng::Tensor utterance_loss(const DetectorModel& model, const std::vector<double>& samples,
                          int max_anchors, ng::Rng& rng) {
  const DetectorConfig& cfg = model.cfg;
  ng::Tensor z = model.forward(samples);
  const int t = z.dim(1);
  const int k = cfg.pred_steps;
  if (t - k < 1) fail("utterance too short for contrastive training");

  std::vector<int> anchors;
  for (int a = 0; a < t - k; ++a) anchors.push_back(a);
  if ((int)anchors.size() > max_anchors) {
    for (int i = 0; i < max_anchors; ++i) {
      const int j = (int)rng.randint(i, (int64_t)anchors.size() - 1);
      std::swap(anchors[i], anchors[j]);
    }
    anchors.resize(max_anchors);
  }

  // positive cosines for all offsets in one fused pass (note: +cos for the
  // training objective; boundary inference works on 1 - cos)
  ng::Tensor pos_all = ng::mul_scalar(similarity_scores(z, k, cfg.alpha), -1.0);

  std::vector<ng::Tensor> positives;
  std::vector<std::vector<ng::Tensor>> negatives;
  for (int a : anchors) {
    positives.push_back(ng::slice_rows(pos_all, a, 1));
    ng::Tensor za = column(z, a);
    std::vector<ng::Tensor> negs;
    for (int nidx : sample_negatives(t, a, cfg.n_negatives, k, rng))
      negs.push_back(ng::mul_scalar(ng::cosine_similarity(za, column(z, nidx)), cfg.alpha));
    negatives.push_back(std::move(negs));
  }
  return contrastive_loss(positives, negatives, cfg.tau);
}

double corpus_loss(const DetectorModel& model, const std::vector<std::vector<double>>& utts,
                   int max_anchors, uint64_t seed) {
  ng::Rng rng(seed);
  double acc = 0.0;
  for (const auto& u : utts) acc += utterance_loss(model, u, max_anchors, rng).item();
  return acc / (double)utts.size();
}

}  // namespace

std::vector<std::string> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open manifest: " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    const auto b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

std::string format_boundary_line(const std::string& path, const BoundarySet& b) {
  std::ostringstream os;
  os << path << ":";
  for (size_t i = 0; i < b.indices.size(); ++i) os << (i ? "," : " ") << b.indices[i];
  return os.str();
}

TrainLog train_detector(DetectorModel& model, const std::vector<std::string>& manifest_paths,
                        const TrainOptions& opts) {
  if (manifest_paths.empty()) fail("train_detector: empty manifest");

  std::vector<std::vector<double>> all;
  all.reserve(manifest_paths.size());
  for (const auto& p : manifest_paths) {
    try {
      all.push_back(audio::read_wav(p).samples);
    } catch (const std::exception& e) {
      fail("failed reading corpus file '" + p + "': " + e.what());
    }
  }

  int holdout_n = (int)std::lround(opts.holdout_fraction * (double)all.size());
  holdout_n = std::clamp(holdout_n, all.size() > 1 ? 1 : 0, (int)all.size() - 1);
  std::vector<std::vector<double>> train(all.begin(), all.end() - holdout_n);
  std::vector<std::vector<double>> holdout(all.end() - holdout_n, all.end());
  if (holdout.empty()) holdout = train;  // single-file corpus: evaluate on it

  TrainLog log;
  log.initial_holdout = corpus_loss(model, holdout, opts.max_anchors, opts.seed ^ 0x9e3779b97f4a7c15ULL);

  ng::AdamState adam;
  adam.init(model.params, {opts.lr, opts.beta1, opts.beta2, 1e-8});
  ng::Rng rng(opts.seed);

  for (int step = 0; step < opts.steps; ++step) {
    std::vector<ng::Tensor> batch_losses;
    for (int b = 0; b < opts.batch; ++b) {
      const auto& utt = train[(size_t)rng.randint(0, (int64_t)train.size() - 1)];
      batch_losses.push_back(utterance_loss(model, utt, opts.max_anchors, rng));
    }
    ng::Tensor loss = ng::mean_all(ng::concat_rows(batch_losses));
    ng::check_finite(loss, "detector training loss");
    model.params.zero_grads();
    ng::backward(loss);
    ng::adam_step(model.params, adam);
    log.train_loss.push_back(loss.item());
    if (opts.eval_every > 0 && (step + 1) % opts.eval_every == 0)
      log.holdout.emplace_back(step + 1,
                               corpus_loss(model, holdout, opts.max_anchors, opts.seed ^ 0x9e3779b97f4a7c15ULL));
  }

  log.final_holdout = corpus_loss(model, holdout, opts.max_anchors, opts.seed ^ 0x9e3779b97f4a7c15ULL);
  return log;
}

}  // namespace dcodec::det
