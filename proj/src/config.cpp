#include "dcodec/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace dcodec::cfg {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string fmt_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt_doubles(const std::vector<double>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    fail("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    fail("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else if (!std::isspace((unsigned char)c)) {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& p : split_commas(v)) out.push_back(parse_int(key, p));
  return out;
}

std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& p : split_commas(v)) out.push_back(parse_double(key, p));
  return out;
}

struct KeyDef {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      {"detector.kernel_sizes",
       [](RunConfig& c, const std::string& v) { c.detector.kernel_sizes = parse_ints("detector.kernel_sizes", v); },
       [](const RunConfig& c) { return fmt_ints(c.detector.kernel_sizes); }},
      {"detector.strides",
       [](RunConfig& c, const std::string& v) { c.detector.strides = parse_ints("detector.strides", v); },
       [](const RunConfig& c) { return fmt_ints(c.detector.strides); }},
      {"detector.embed_dim",
       [](RunConfig& c, const std::string& v) { c.detector.embed_dim = parse_int("detector.embed_dim", v); },
       [](const RunConfig& c) { return std::to_string(c.detector.embed_dim); }},
      {"detector.proj_dim",
       [](RunConfig& c, const std::string& v) { c.detector.proj_dim = parse_int("detector.proj_dim", v); },
       [](const RunConfig& c) { return std::to_string(c.detector.proj_dim); }},
      {"detector.alpha",
       [](RunConfig& c, const std::string& v) { c.detector.alpha = parse_double("detector.alpha", v); },
       [](const RunConfig& c) { return fmt_double(c.detector.alpha); }},
      {"detector.tau",
       [](RunConfig& c, const std::string& v) { c.detector.tau = parse_double("detector.tau", v); },
       [](const RunConfig& c) { return fmt_double(c.detector.tau); }},
      {"detector.pred_steps",
       [](RunConfig& c, const std::string& v) { c.detector.pred_steps = parse_int("detector.pred_steps", v); },
       [](const RunConfig& c) { return std::to_string(c.detector.pred_steps); }},
      {"detector.n_negatives",
       [](RunConfig& c, const std::string& v) { c.detector.n_negatives = parse_int("detector.n_negatives", v); },
       [](const RunConfig& c) { return std::to_string(c.detector.n_negatives); }},
      {"detector.prominence",
       [](RunConfig& c, const std::string& v) { c.detector.prominence = parse_double("detector.prominence", v); },
       [](const RunConfig& c) { return fmt_double(c.detector.prominence); }},
      {"detector.min_peak_distance",
       [](RunConfig& c, const std::string& v) {
         c.detector.min_peak_distance = parse_int("detector.min_peak_distance", v);
       },
       [](const RunConfig& c) { return std::to_string(c.detector.min_peak_distance); }},
      {"detector.min_peak_width",
       [](RunConfig& c, const std::string& v) {
         c.detector.min_peak_width = parse_int("detector.min_peak_width", v);
       },
       [](const RunConfig& c) { return std::to_string(c.detector.min_peak_width); }},
      {"detector.layer_norm",
       [](RunConfig& c, const std::string& v) { c.detector.use_layer_norm = parse_bool("detector.layer_norm", v); },
       [](const RunConfig& c) { return c.detector.use_layer_norm ? std::string("true") : std::string("false"); }},

      {"codec.strides",
       [](RunConfig& c, const std::string& v) { c.codec.enc_strides = parse_ints("codec.strides", v); },
       [](const RunConfig& c) { return fmt_ints(c.codec.enc_strides); }},
      {"codec.base_channels",
       [](RunConfig& c, const std::string& v) { c.codec.base_channels = parse_int("codec.base_channels", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.base_channels); }},
      {"codec.latent_dim",
       [](RunConfig& c, const std::string& v) { c.codec.latent_dim = parse_int("codec.latent_dim", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.latent_dim); }},
      {"codec.quantizer_dim",
       [](RunConfig& c, const std::string& v) { c.codec.quantizer_dim = parse_int("codec.quantizer_dim", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.quantizer_dim); }},
      {"codec.seg_hidden",
       [](RunConfig& c, const std::string& v) { c.codec.seg_hidden = parse_int("codec.seg_hidden", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.seg_hidden); }},
      {"codec.sample_rate",
       [](RunConfig& c, const std::string& v) { c.codec.sample_rate = parse_int("codec.sample_rate", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.sample_rate); }},
      {"codec.time_l1_weight",
       [](RunConfig& c, const std::string& v) { c.codec.time_l1_weight = parse_double("codec.time_l1_weight", v); },
       [](const RunConfig& c) { return fmt_double(c.codec.time_l1_weight); }},
      {"codec.mel_ffts",
       [](RunConfig& c, const std::string& v) { c.codec.mel_ffts = parse_ints("codec.mel_ffts", v); },
       [](const RunConfig& c) { return fmt_ints(c.codec.mel_ffts); }},
      {"codec.mel_bins",
       [](RunConfig& c, const std::string& v) { c.codec.mel_bins = parse_ints("codec.mel_bins", v); },
       [](const RunConfig& c) { return fmt_ints(c.codec.mel_bins); }},
      {"codec.mel_weights",
       [](RunConfig& c, const std::string& v) { c.codec.mel_weights = parse_doubles("codec.mel_weights", v); },
       [](const RunConfig& c) { return fmt_doubles(c.codec.mel_weights); }},

      {"quantizer.variant",
       [](RunConfig& c, const std::string& v) { c.codec.qspec.variant = quant::variant_from_name(v); },
       [](const RunConfig& c) { return std::string(quant::variant_name(c.codec.qspec.variant)); }},
      {"quantizer.levels",
       [](RunConfig& c, const std::string& v) { c.codec.qspec.levels = parse_int("quantizer.levels", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.qspec.levels); }},
      {"quantizer.groups",
       [](RunConfig& c, const std::string& v) { c.codec.qspec.groups = parse_int("quantizer.groups", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.qspec.groups); }},
      {"quantizer.codebook_size",
       [](RunConfig& c, const std::string& v) { c.codec.qspec.codebook_size = parse_int("quantizer.codebook_size", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.qspec.codebook_size); }},
      {"quantizer.residual_depth",
       [](RunConfig& c, const std::string& v) { c.codec.qspec.residual_depth = parse_int("quantizer.residual_depth", v); },
       [](const RunConfig& c) { return std::to_string(c.codec.qspec.residual_depth); }},

      {"training.detector_steps",
       [](RunConfig& c, const std::string& v) { c.training.detector_steps = parse_int("training.detector_steps", v); },
       [](const RunConfig& c) { return std::to_string(c.training.detector_steps); }},
      {"training.detector_batch",
       [](RunConfig& c, const std::string& v) { c.training.detector_batch = parse_int("training.detector_batch", v); },
       [](const RunConfig& c) { return std::to_string(c.training.detector_batch); }},
      {"training.detector_lr",
       [](RunConfig& c, const std::string& v) { c.training.detector_lr = parse_double("training.detector_lr", v); },
       [](const RunConfig& c) { return fmt_double(c.training.detector_lr); }},
      {"training.codec_steps",
       [](RunConfig& c, const std::string& v) { c.training.codec_steps = parse_int("training.codec_steps", v); },
       [](const RunConfig& c) { return std::to_string(c.training.codec_steps); }},
      {"training.codec_batch",
       [](RunConfig& c, const std::string& v) { c.training.codec_batch = parse_int("training.codec_batch", v); },
       [](const RunConfig& c) { return std::to_string(c.training.codec_batch); }},
      {"training.codec_lr",
       [](RunConfig& c, const std::string& v) { c.training.codec_lr = parse_double("training.codec_lr", v); },
       [](const RunConfig& c) { return fmt_double(c.training.codec_lr); }},
      {"training.beta1",
       [](RunConfig& c, const std::string& v) { c.training.beta1 = parse_double("training.beta1", v); },
       [](const RunConfig& c) { return fmt_double(c.training.beta1); }},
      {"training.beta2",
       [](RunConfig& c, const std::string& v) { c.training.beta2 = parse_double("training.beta2", v); },
       [](const RunConfig& c) { return fmt_double(c.training.beta2); }},
      {"training.holdout_fraction",
       [](RunConfig& c, const std::string& v) { c.training.holdout_fraction = parse_double("training.holdout_fraction", v); },
       [](const RunConfig& c) { return fmt_double(c.training.holdout_fraction); }},
      {"training.eval_every",
       [](RunConfig& c, const std::string& v) { c.training.eval_every = parse_int("training.eval_every", v); },
       [](const RunConfig& c) { return std::to_string(c.training.eval_every); }},
      {"training.max_anchors",
       [](RunConfig& c, const std::string& v) { c.training.max_anchors = parse_int("training.max_anchors", v); },
       [](const RunConfig& c) { return std::to_string(c.training.max_anchors); }},

      {"eval.kmeans_k",
       [](RunConfig& c, const std::string& v) { c.eval.kmeans_k = parse_int("eval.kmeans_k", v); },
       [](const RunConfig& c) { return std::to_string(c.eval.kmeans_k); }},
      {"eval.kmeans_iters",
       [](RunConfig& c, const std::string& v) { c.eval.kmeans_iters = parse_int("eval.kmeans_iters", v); },
       [](const RunConfig& c) { return std::to_string(c.eval.kmeans_iters); }},
      {"eval.kmeans_seed",
       [](RunConfig& c, const std::string& v) { c.eval.kmeans_seed = (uint64_t)parse_int("eval.kmeans_seed", v); },
       [](const RunConfig& c) { return std::to_string(c.eval.kmeans_seed); }},
      {"eval.sample_n",
       [](RunConfig& c, const std::string& v) { c.eval.sample_n = parse_int("eval.sample_n", v); },
       [](const RunConfig& c) { return std::to_string(c.eval.sample_n); }},
      {"eval.top_k",
       [](RunConfig& c, const std::string& v) { c.eval.top_k = parse_int("eval.top_k", v); },
       [](const RunConfig& c) { return std::to_string(c.eval.top_k); }},
  };
  return table;
}

}  // namespace

RunConfig RunConfig::from_string(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    const auto b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail("config line " + std::to_string(lineno) + ": expected 'section.key = value'");
    auto trim = [](std::string s) {
      const auto x = s.find_first_not_of(" \t");
      if (x == std::string::npos) return std::string();
      const auto y = s.find_last_not_of(" \t");
      return s.substr(x, y - x + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& def : key_table()) {
      if (key == def.name) {
        def.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found) fail("unknown config key '" + key + "' (line " + std::to_string(lineno) + ")");
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return from_string(buf.str());
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& def : key_table()) {
    out += def.name;
    out += " = ";
    out += def.get(*this);
    out += '\n';
  }
  return out;
}

void RunConfig::validate() const {
  detector.validate();
  codec::CodecConfig c = codec;
  c.qspec.input_dim = c.hidden_dim();
  c.validate();
  if (training.detector_steps < 0 || training.codec_steps < 0) fail("config: negative step counts");
  if (training.detector_batch < 1 || training.codec_batch < 1) fail("config: batch must be >= 1");
  if (training.holdout_fraction < 0.0 || training.holdout_fraction >= 1.0)
    fail("config: holdout_fraction must be in [0,1)");
  if (eval.kmeans_k < 2) fail("config: eval.kmeans_k must be >= 2");
}

}  // namespace dcodec::cfg
