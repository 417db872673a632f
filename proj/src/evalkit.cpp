#include "dcodec/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "dcodec/kernels.hpp"
#include "dcodec/tensor.hpp"

namespace dcodec::eval {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void require_equal_lengths(const audio::AudioBuffer& a, const audio::AudioBuffer& b, const char* op) {
  if (a.samples.size() != b.samples.size())
    fail(std::string(op) + ": sample counts differ (" + std::to_string(a.samples.size()) + " vs " +
         std::to_string(b.samples.size()) + ")");
  if (a.sample_rate != b.sample_rate) fail(std::string(op) + ": sample rates differ");
}

int bits_for(int64_t k) {
  if (k < 2) fail("bps: codebook size must be >= 2");
  int b = 0;
  int64_t v = k - 1;
  while (v > 0) {
    v >>= 1;
    ++b;
  }
  return b;
}
}  // namespace

// ---------------------------------------------------------------------------
// spectral errors
// ---------------------------------------------------------------------------

double mel_error(const audio::AudioBuffer& x, const audio::AudioBuffer& xhat) {
  require_equal_lengths(x, xhat, "mel_error");
  const audio::Spectrogram a = audio::mel_spectrogram(x, 1024, 256, 80);
  const audio::Spectrogram b = audio::mel_spectrogram(xhat, 1024, 256, 80);
  double acc = 0.0;
  for (size_t i = 0; i < a.magnitudes.size(); ++i) acc += std::fabs(a.magnitudes[i] - b.magnitudes[i]);
  return acc / (double)a.magnitudes.size();
}

double stft_distance(const audio::AudioBuffer& x, const audio::AudioBuffer& xhat) {
  require_equal_lengths(x, xhat, "stft_distance");
  const int ffts[3] = {512, 1024, 2048};
  double total = 0.0;
  for (int fft : ffts) {
    const audio::Spectrogram a = audio::stft_magnitude(x, fft, fft / 4);
    const audio::Spectrogram b = audio::stft_magnitude(xhat, fft, fft / 4);
    double l1 = 0.0, log_l1 = 0.0;
    for (size_t i = 0; i < a.magnitudes.size(); ++i) {
      l1 += std::fabs(a.magnitudes[i] - b.magnitudes[i]);
      log_l1 += std::fabs(std::log(1e-5 + a.magnitudes[i]) - std::log(1e-5 + b.magnitudes[i]));
    }
    total += (l1 + log_l1) / (double)a.magnitudes.size();
  }
  return total / 3.0;
}

// ---------------------------------------------------------------------------
// STOI
// ---------------------------------------------------------------------------

namespace {

constexpr int kStoiRate = 10000;
constexpr int kStoiFrame = 256;
constexpr int kStoiHop = 128;
constexpr int kStoiFft = 512;
constexpr int kStoiBands = 15;
constexpr int kStoiSegFrames = 30;  // 384 ms
constexpr double kStoiBeta = -15.0;
constexpr double kStoiDynRange = 40.0;

std::vector<double> stoi_window() {
  // interior of a symmetric Hann (no zero endpoints)
  std::vector<double> w(kStoiFrame);
  for (int i = 0; i < kStoiFrame; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * (i + 1) / (kStoiFrame + 1)));
  return w;
}

// drop frames whose clean-signal energy is 40 dB under the loudest frame,
// rebuilding both signals by windowed overlap-add of the kept frames
void remove_silent_frames(std::vector<double>& x, std::vector<double>& y) {
  const std::vector<double> w = stoi_window();
  const int n = (int)x.size();
  const int frames = n < kStoiFrame ? 0 : (n - kStoiFrame) / kStoiHop + 1;
  if (frames == 0) {
    x.clear();
    y.clear();
    return;
  }
  std::vector<double> energy_db(frames);
  double max_db = -1e300;
  for (int f = 0; f < frames; ++f) {
    double e = 0.0;
    for (int i = 0; i < kStoiFrame; ++i) {
      const double v = x[(size_t)f * kStoiHop + i] * w[i];
      e += v * v;
    }
    energy_db[f] = 20.0 * std::log10(std::sqrt(e) + 1e-300);
    max_db = std::max(max_db, energy_db[f]);
  }
  std::vector<int> keep;
  for (int f = 0; f < frames; ++f)
    if (energy_db[f] > max_db - kStoiDynRange) keep.push_back(f);

  const int out_len = keep.empty() ? 0 : ((int)keep.size() - 1) * kStoiHop + kStoiFrame;
  std::vector<double> xs(out_len, 0.0), ys(out_len, 0.0);
  for (size_t q = 0; q < keep.size(); ++q) {
    const int src = keep[q] * kStoiHop;
    const int dst = (int)q * kStoiHop;
    for (int i = 0; i < kStoiFrame; ++i) {
      xs[dst + i] += x[src + i] * w[i];
      ys[dst + i] += y[src + i] * w[i];
    }
  }
  x.swap(xs);
  y.swap(ys);
}

// third-octave band energies: rows = frames, cols = bands
std::vector<double> octave_bands(const std::vector<double>& sig, int& frames_out) {
  const std::vector<double> w = stoi_window();
  kern::StftDims d;
  d.len = (int)sig.size();
  d.win = kStoiFrame;
  d.n_fft = kStoiFft;
  d.hop = kStoiHop;
  const int frames = d.frames();
  frames_out = frames;
  if (frames == 0) return {};
  std::vector<double> mags((size_t)frames * d.bins());
  kern::stft_mag_fwd(sig.data(), w.data(), mags.data(), d);

  const double bin_hz = (double)kStoiRate / kStoiFft;
  std::vector<double> bands((size_t)frames * kStoiBands, 0.0);
  for (int j = 0; j < kStoiBands; ++j) {
    const double cf = 150.0 * std::pow(2.0, j / 3.0);
    const double lo = cf / std::pow(2.0, 1.0 / 6.0);
    const double hi = cf * std::pow(2.0, 1.0 / 6.0);
    const int k0 = (int)std::ceil(lo / bin_hz);
    const int k1 = std::min(d.bins() - 1, (int)std::floor(hi / bin_hz));
    for (int f = 0; f < frames; ++f) {
      double acc = 0.0;
      for (int k = k0; k <= k1; ++k) {
        const double m = mags[(size_t)f * d.bins() + k];
        acc += m * m;
      }
      bands[(size_t)f * kStoiBands + j] = std::sqrt(acc);
    }
  }
  return bands;
}

double segment_correlation(const double* xs, const double* ys, int n) {
  double mx = 0.0, my = 0.0;
  for (int i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double num = 0.0, vx = 0.0, vy = 0.0;
  for (int i = 0; i < n; ++i) {
    const double a = xs[i] - mx;
    const double b = ys[i] - my;
    num += a * b;
    vx += a * a;
    vy += b * b;
  }
  if (vx < 1e-24 && vy < 1e-24) {
    // flat envelopes: identical segments correlate perfectly, anything else not at all
    double diff = 0.0;
    for (int i = 0; i < n; ++i) diff = std::max(diff, std::fabs(xs[i] - ys[i]));
    return diff < 1e-9 ? 1.0 : 0.0;
  }
  return num / (std::sqrt(vx) * std::sqrt(vy) + 1e-12);
}

}  // namespace

double stoi(const audio::AudioBuffer& clean, const audio::AudioBuffer& degraded) {
  require_equal_lengths(clean, degraded, "stoi");
  std::vector<double> x = audio::resample_linear(clean, kStoiRate).samples;
  std::vector<double> y = audio::resample_linear(degraded, kStoiRate).samples;
  remove_silent_frames(x, y);

  int frames = 0;
  std::vector<double> xb = octave_bands(x, frames);
  int frames_y = 0;
  std::vector<double> yb = octave_bands(y, frames_y);
  if (frames < kStoiSegFrames)
    fail("stoi: too-short input (need >= 0.5 s of speech-active signal)");

  const double clip_gain = std::pow(10.0, -kStoiBeta / 20.0);  // +15 dB allowance
  std::vector<double> xs(kStoiSegFrames), ys(kStoiSegFrames);
  double acc = 0.0;
  int count = 0;
  for (int m = kStoiSegFrames - 1; m < frames; ++m) {
    for (int j = 0; j < kStoiBands; ++j) {
      double nx = 0.0, ny = 0.0;
      for (int q = 0; q < kStoiSegFrames; ++q) {
        const int f = m - kStoiSegFrames + 1 + q;
        xs[q] = xb[(size_t)f * kStoiBands + j];
        ys[q] = yb[(size_t)f * kStoiBands + j];
        nx += xs[q] * xs[q];
        ny += ys[q] * ys[q];
      }
      const double alpha = std::sqrt(nx) / (std::sqrt(ny) + 1e-12);
      for (int q = 0; q < kStoiSegFrames; ++q) {
        const double clipped = std::min(alpha * ys[q], xs[q] * (1.0 + clip_gain));
        ys[q] = clipped;
      }
      acc += segment_correlation(xs.data(), ys.data(), kStoiSegFrames);
      ++count;
    }
  }
  return acc / count;
}

// ---------------------------------------------------------------------------
// rates
// ---------------------------------------------------------------------------

double tkr(double frame_rate, int quantizer_stages) {
  if (frame_rate < 0.0 || quantizer_stages < 1) fail("tkr: bad arguments");
  return frame_rate * quantizer_stages;
}

double tkr_from_stream(const codec::TokenStream& stream) {
  const double seconds = (double)stream.utterance_sample_count / stream.sample_rate;
  if (seconds <= 0.0) fail("tkr: zero duration stream");
  const int stages =
      stream.spec.variant == quant::Variant::vq ? stream.spec.residual_depth : 1;
  return (double)stream.records.size() * stages / seconds;
}

double bps(double frame_rate, const std::vector<int64_t>& codebook_sizes) {
  if (codebook_sizes.empty()) fail("bps: no codebooks");
  int64_t bits = 0;
  for (int64_t k : codebook_sizes) bits += bits_for(k);
  return frame_rate * (double)bits;
}

double bps_payload_from_stream(const codec::TokenStream& stream) {
  const double seconds = (double)stream.utterance_sample_count / stream.sample_rate;
  if (seconds <= 0.0) fail("bps: zero duration stream");
  return (double)stream.records.size() * stream.spec.payload_bits_per_token() / seconds;
}

double bps_total_from_stream(const codec::TokenStream& stream) {
  const double seconds = (double)stream.utterance_sample_count / stream.sample_rate;
  if (seconds <= 0.0) fail("bps: zero duration stream");
  uint64_t length_bits = 0;
  for (const auto& r : stream.records) {
    uint64_t v = r.length;
    do {
      length_bits += 8;
      v >>= 7;
    } while (v != 0);
  }
  return ((double)stream.records.size() * stream.spec.payload_bits_per_token() + (double)length_bits) /
         seconds;
}

// ---------------------------------------------------------------------------
// codebook utilization
// ---------------------------------------------------------------------------

UtilizationReport codebook_utilization(const std::vector<uint64_t>& tokens, uint64_t vocab_size,
                                       int top_k) {
  if (vocab_size < 1) fail("codebook_utilization: vocab_size must be >= 1");
  std::map<uint64_t, uint64_t> counts;
  for (uint64_t t : tokens) {
    if (t >= vocab_size)
      fail("codebook_utilization: token " + std::to_string(t) + " >= vocab " + std::to_string(vocab_size));
    counts[t] += 1;
  }
  UtilizationReport rep;
  rep.vocab_size = vocab_size;
  rep.used_count = counts.size();
  rep.utilization_rate = (double)counts.size() / (double)vocab_size;
  std::vector<std::pair<uint64_t, uint64_t>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const size_t keep = std::min(sorted.size(), (size_t)std::max(0, top_k));
  for (size_t i = 0; i < keep; ++i)
    rep.top.emplace_back(sorted[i].first, (double)sorted[i].second / (double)tokens.size());
  return rep;
}

std::string UtilizationReport::to_csv() const {
  std::string out = "rank,token,ratio\n";
  for (size_t i = 0; i < top.size(); ++i) {
    out += std::to_string(i + 1);
    out += ',';
    out += std::to_string(top[i].first);
    out += ',';
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", top[i].second);
    out += buf;
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// k-means + silhouette
// ---------------------------------------------------------------------------

KmeansResult kmeans_silhouette(const std::vector<std::vector<double>>& points, int k, int max_iter,
                               uint64_t seed, int sample_n) {
  if (k < 2) fail("silhouette undefined for K<2");
  if (points.empty()) fail("kmeans: no points");
  const int dim = (int)points[0].size();
  for (const auto& p : points)
    if ((int)p.size() != dim) fail("kmeans: inconsistent dimensions");

  ng::Rng rng(seed);
  std::vector<int> idx(points.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = (int)i;
  if ((int)points.size() > sample_n) {
    for (int i = 0; i < sample_n; ++i) {
      const int j = (int)rng.randint(i, (int64_t)idx.size() - 1);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(sample_n);
  }
  const int n = (int)idx.size();
  std::vector<double> flat((size_t)n * dim);
  for (int i = 0; i < n; ++i)
    std::copy(points[idx[i]].begin(), points[idx[i]].end(), flat.begin() + (size_t)i * dim);

  {
    std::vector<std::vector<double>> distinct;
    for (int i = 0; i < n && (int)distinct.size() <= k; ++i) {
      std::vector<double> row(flat.begin() + (size_t)i * dim, flat.begin() + (size_t)(i + 1) * dim);
      bool seen = false;
      for (const auto& d : distinct)
        if (d == row) {
          seen = true;
          break;
        }
      if (!seen) distinct.push_back(std::move(row));
    }
    if (distinct.size() == 1) {
      // all points identical: every silhouette term is 0/0, defined as 0
      KmeansResult res;
      res.assignments.assign(n, 0);
      res.silhouette = 0.0;
      res.sampled_indices = idx;
      res.centers.assign(k, distinct[0]);
      return res;
    }
    if ((int)distinct.size() < k) fail("kmeans: K exceeds the number of distinct points");
  }

  // k-means++ seeding
  std::vector<double> centers((size_t)k * dim);
  {
    const int first = (int)rng.randint(0, n - 1);
    std::copy(flat.begin() + (size_t)first * dim, flat.begin() + (size_t)(first + 1) * dim,
              centers.begin());
    std::vector<double> d2(n, 0.0);
    for (int c = 1; c < k; ++c) {
      std::vector<int> assign(n);
      kern::nearest_code(flat.data(), n, dim, centers.data(), c, assign.data(), d2.data());
      double total = 0.0;
      for (double v : d2) total += v;
      int chosen = -1;
      if (total <= 0.0) {
        chosen = (int)rng.randint(0, n - 1);
      } else {
        const double r = rng.uniform(0.0, total);
        double run = 0.0;
        for (int i = 0; i < n; ++i) {
          run += d2[i];
          if (run >= r) {
            chosen = i;
            break;
          }
        }
        if (chosen < 0) chosen = n - 1;
      }
      std::copy(flat.begin() + (size_t)chosen * dim, flat.begin() + (size_t)(chosen + 1) * dim,
                centers.begin() + (size_t)c * dim);
    }
  }

  std::vector<int> assign(n, 0);
  for (int it = 0; it < max_iter; ++it) {
    std::vector<int> next(n);
    kern::nearest_code(flat.data(), n, dim, centers.data(), k, next.data(), nullptr);
    const bool changed = next != assign;
    assign = std::move(next);
    std::vector<double> sums((size_t)k * dim, 0.0);
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      counts[assign[i]] += 1;
      for (int d = 0; d < dim; ++d) sums[(size_t)assign[i] * dim + d] += flat[(size_t)i * dim + d];
    }
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (int d = 0; d < dim; ++d) centers[(size_t)c * dim + d] = sums[(size_t)c * dim + d] / counts[c];
    if (!changed && it > 0) break;
  }

  // silhouette, brute force over the sample
  std::vector<double> dist((size_t)n * n, 0.0);
  const bool par = kern::parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (int d = 0; d < dim; ++d) {
        const double diff = flat[(size_t)i * dim + d] - flat[(size_t)j * dim + d];
        acc += diff * diff;
      }
      const double e = std::sqrt(acc);
      dist[(size_t)i * n + j] = e;
      dist[(size_t)j * n + i] = e;
    }
  }
  std::vector<int> cluster_size(k, 0);
  for (int i = 0; i < n; ++i) cluster_size[assign[i]] += 1;
  double sil_acc = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> mean_to(k, 0.0);
    for (int j = 0; j < n; ++j)
      if (j != i) mean_to[assign[j]] += dist[(size_t)i * n + j];
    const int own = assign[i];
    if (cluster_size[own] <= 1) continue;  // singleton contributes 0
    const double a = mean_to[own] / (cluster_size[own] - 1);
    double b = -1.0;
    for (int c = 0; c < k; ++c) {
      if (c == own || cluster_size[c] == 0) continue;
      const double m = mean_to[c] / cluster_size[c];
      if (b < 0.0 || m < b) b = m;
    }
    if (b < 0.0) continue;
    const double mx = std::max(a, b);
    sil_acc += mx > 0.0 ? (b - a) / mx : 0.0;
  }

  KmeansResult res;
  res.assignments = assign;
  res.silhouette = sil_acc / n;
  res.sampled_indices = idx;
  res.centers.resize(k);
  for (int c = 0; c < k; ++c)
    res.centers[c].assign(centers.begin() + (size_t)c * dim, centers.begin() + (size_t)(c + 1) * dim);
  return res;
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

namespace {
nlohmann::json metrics_to_json(const UtteranceMetrics& m, const char* type) {
  return {
      {"type", type},           {"path", m.path},
      {"mel_error", m.mel_error}, {"stft_distance", m.stft_distance},
      {"stoi", m.stoi},         {"tkr", m.tkr},
      {"bps_payload", m.bps_payload}, {"bps_total", m.bps_total},
      {"segments", m.segments}, {"seconds", m.seconds},
      {"wer", "unavailable"},   {"pesq", "unavailable"},
  };
}

UtteranceMetrics metrics_from_json(const nlohmann::json& j) {
  UtteranceMetrics m;
  m.path = j.at("path").get<std::string>();
  m.mel_error = j.at("mel_error").get<double>();
  m.stft_distance = j.at("stft_distance").get<double>();
  m.stoi = j.at("stoi").get<double>();
  m.tkr = j.at("tkr").get<double>();
  m.bps_payload = j.at("bps_payload").get<double>();
  m.bps_total = j.at("bps_total").get<double>();
  m.segments = j.at("segments").get<int>();
  m.seconds = j.at("seconds").get<double>();
  return m;
}
}  // namespace

void write_report(const MetricReport& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("cannot open report for writing: " + path);
  nlohmann::json header = {
      {"type", "header"},
      {"format_version", 1},
      {"mel_error_def", "L1 of log-mel (HTK scale), n_fft=1024 hop=256 mels=80, floor 1e-5"},
      {"stft_def", "mean over fft {512,1024,2048} hop fft/4 of mag L1 + log-mag L1"},
      {"wer", report.wer},
      {"pesq", report.pesq},
  };
  os << header.dump() << "\n";
  for (const auto& u : report.utterances) os << metrics_to_json(u, "utterance").dump() << "\n";
  os << metrics_to_json(report.aggregate, "aggregate").dump() << "\n";
  if (!os) fail("I/O failure writing report: " + path);
}

MetricReport read_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open report: " + path);
  MetricReport rep;
  std::string line;
  bool saw_header = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    const std::string type = j.at("type").get<std::string>();
    if (type == "header") {
      saw_header = true;
      rep.wer = j.at("wer").get<std::string>();
      rep.pesq = j.at("pesq").get<std::string>();
    } else if (type == "utterance") {
      rep.utterances.push_back(metrics_from_json(j));
    } else if (type == "aggregate") {
      rep.aggregate = metrics_from_json(j);
    } else {
      fail("unknown report record type: " + type);
    }
  }
  if (!saw_header) fail("report missing header record: " + path);
  return rep;
}

}  // namespace dcodec::eval
