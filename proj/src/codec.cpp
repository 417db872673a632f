#include "dcodec/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dcodec::codec {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

constexpr uint16_t kStreamVersion = 1;

std::pair<int, int> same_pad(int t, int stride, int kernel) {
  const int t_out = (t + stride - 1) / stride;
  int pad = (t_out - 1) * stride + kernel - t;
  if (pad < 0) pad = 0;
  return {pad / 2, pad - pad / 2};
}
}  // namespace

int CodecConfig::downsample_ratio() const {
  int r = 1;
  for (int s : enc_strides) r *= s;
  return r;
}

void CodecConfig::validate() const {
  if (enc_strides.empty()) fail("codec config: enc_strides must be nonempty");
  for (int s : enc_strides)
    if (s < 1) fail("codec config: strides must be positive");
  if (base_channels < 1 || latent_dim < base_channels)
    fail("codec config: need latent_dim >= base_channels >= 1");
  if (quantizer_dim < 1 || quantizer_dim > latent_dim)
    fail("codec config: need 1 <= quantizer_dim <= latent_dim");
  if (sample_rate < 1) fail("codec config: sample_rate must be positive");
  if (mel_ffts.size() != mel_bins.size() || mel_ffts.size() != mel_weights.size() || mel_ffts.empty())
    fail("codec config: mel resolution lists must be nonempty and of equal length");
  quant::QuantizerSpec s = qspec;
  s.input_dim = hidden_dim();
  s.validate();
}

void TokenStream::validate() const {
  spec.validate();
  const uint64_t vocab = spec.vocab_size();
  uint64_t total = 0;
  for (const auto& r : records) {
    if (r.length < 1) fail("token stream: zero-length segment record");
    if (r.token >= vocab) fail("token stream: token out of range for the declared quantizer");
    total += r.length;
  }
  if (downsample_ratio == 0) fail("token stream: zero downsample ratio");
  if (total != frame_count()) fail("token stream: segment lengths do not sum to the frame count");
}

// ---------------------------------------------------------------------------
// model construction
// ---------------------------------------------------------------------------

namespace {

std::vector<int> stage_channels(const CodecConfig& cfg) {
  std::vector<int> ch{cfg.base_channels};
  for (size_t i = 0; i < cfg.enc_strides.size(); ++i)
    ch.push_back(std::min(ch.back() * 2, cfg.latent_dim));
  return ch;
}

std::vector<double> pack_cfg(const CodecConfig& c) {
  std::vector<double> v;
  v.push_back((double)c.enc_strides.size());
  for (int s : c.enc_strides) v.push_back((double)s);
  v.push_back((double)c.base_channels);
  v.push_back((double)c.latent_dim);
  v.push_back((double)c.quantizer_dim);
  v.push_back((double)c.hidden_dim());
  v.push_back((double)c.sample_rate);
  v.push_back((double)(uint8_t)c.qspec.variant);
  v.push_back((double)c.qspec.levels);
  v.push_back((double)c.qspec.groups);
  v.push_back((double)c.qspec.codebook_size);
  v.push_back((double)c.qspec.residual_depth);
  v.push_back(c.time_l1_weight);
  v.push_back((double)c.mel_ffts.size());
  for (int f : c.mel_ffts) v.push_back((double)f);
  for (int b : c.mel_bins) v.push_back((double)b);
  for (double w : c.mel_weights) v.push_back(w);
  return v;
}

CodecConfig unpack_cfg(const std::vector<double>& v) {
  size_t o = 0;
  auto next = [&]() {
    if (o >= v.size()) fail("codec checkpoint: bad meta block");
    return v[o++];
  };
  CodecConfig c;
  const int ns = (int)next();
  if (ns < 1 || ns > 16) fail("codec checkpoint: bad meta block");
  c.enc_strides.assign(ns, 0);
  for (int i = 0; i < ns; ++i) c.enc_strides[i] = (int)next();
  c.base_channels = (int)next();
  c.latent_dim = (int)next();
  c.quantizer_dim = (int)next();
  c.seg_hidden = (int)next();
  c.sample_rate = (int)next();
  c.qspec.variant = (quant::Variant)(uint8_t)next();
  c.qspec.levels = (int)next();
  c.qspec.groups = (int)next();
  c.qspec.codebook_size = (int)next();
  c.qspec.residual_depth = (int)next();
  c.qspec.input_dim = c.seg_hidden;
  c.time_l1_weight = next();
  const int nm = (int)next();
  if (nm < 1 || nm > 16) fail("codec checkpoint: bad meta block");
  c.mel_ffts.assign(nm, 0);
  c.mel_bins.assign(nm, 0);
  c.mel_weights.assign(nm, 0.0);
  for (int i = 0; i < nm; ++i) c.mel_ffts[i] = (int)next();
  for (int i = 0; i < nm; ++i) c.mel_bins[i] = (int)next();
  for (int i = 0; i < nm; ++i) c.mel_weights[i] = next();
  if (o != v.size()) fail("codec checkpoint: bad meta block");
  return c;
}

}  // namespace

CodecModel::CodecModel(const CodecConfig& c, uint64_t seed) : cfg(c) {
  cfg.qspec.input_dim = cfg.hidden_dim();
  cfg.validate();
  wire(seed, true);
}

void CodecModel::wire(uint64_t seed, bool fresh) {
  ng::Rng rng(seed);
  const auto ch = stage_channels(cfg);
  const int cs = ch.back();
  const int stages = (int)cfg.enc_strides.size();

  auto conv_param = [&](const std::string& name, int co, int ci, int k) {
    ng::Tensor w = params.create(name + ".w", {co, ci, k});
    if (fresh) ng::init_near_orthogonal(w, co, ci * k, rng);
    params.create(name + ".b", {co});
  };

  conv_param("enc.in", ch[0], 1, 7);
  for (int i = 0; i < stages; ++i)
    conv_param("enc.s" + std::to_string(i), ch[i + 1], ch[i], 2 * cfg.enc_strides[i]);
  conv_param("enc.res1", cs, cs, 3);
  conv_param("enc.res2", cs, cs, 1);
  conv_param("enc.out", cfg.latent_dim, cs, 3);

  ng::Tensor dw = params.create("down.w", {cfg.quantizer_dim, cfg.latent_dim});
  if (fresh) ng::init_near_orthogonal(dw, cfg.quantizer_dim, cfg.latent_dim, rng);
  params.create("down.b", {cfg.quantizer_dim});

  if (fresh) {
    seg_ae_ = std::make_shared<seg::SegmentAutoencoder>(cfg.quantizer_dim, cfg.hidden_dim(), params,
                                                        "seg", rng);
  } else {
    seg_ae_ = std::make_shared<seg::SegmentAutoencoder>(cfg.quantizer_dim, cfg.hidden_dim(), params,
                                                        "seg");
  }

  if (cfg.qspec.variant == quant::Variant::gsq_m2o) {
    gsq_ = fresh ? quant::GsqParams::create(cfg.qspec, params, "gsq", rng)
                 : quant::GsqParams::wire(cfg.qspec, params, "gsq");
  }
  if (cfg.qspec.variant == quant::Variant::vq) {
    for (int s = 0; s < cfg.qspec.residual_depth; ++s) {
      ng::Tensor codes =
          params.create("vq.s" + std::to_string(s) + ".codes", {cfg.qspec.codebook_size, cfg.hidden_dim()});
      codes.set_requires_grad(false);  // EMA-trained, not gradient-trained
      if (fresh) {
        quant::VqCodebook book = quant::VqCodebook::init(cfg.qspec.codebook_size, cfg.hidden_dim(), rng);
        codes.data() = book.codes;
      }
      quant::VqCodebook b;
      b.dim = cfg.hidden_dim();
      b.size = cfg.qspec.codebook_size;
      b.codes = codes.data();
      b.ema_counts.assign(b.size, 1.0);
      b.ema_sums = b.codes;
      vq_stages.push_back(std::move(b));
    }
  }

  ng::Tensor uw = params.create("up.w", {cfg.latent_dim, cfg.quantizer_dim});
  if (fresh) ng::init_near_orthogonal(uw, cfg.latent_dim, cfg.quantizer_dim, rng);
  params.create("up.b", {cfg.latent_dim});

  conv_param("dec.in", cs, cfg.latent_dim, 3);
  conv_param("dec.res1", cs, cs, 3);
  conv_param("dec.res2", cs, cs, 1);
  for (int i = stages - 1; i >= 0; --i) {
    // transposed conv weight layout [Ci, Co, K]
    ng::Tensor w = params.create("dec.s" + std::to_string(i) + ".w",
                                 {ch[i + 1], ch[i], 2 * cfg.enc_strides[i]});
    if (fresh) ng::init_near_orthogonal(w, ch[i + 1], ch[i] * 2 * cfg.enc_strides[i], rng);
    params.create("dec.s" + std::to_string(i) + ".b", {ch[i]});
  }
  conv_param("dec.out", 1, ch[0], 7);

  ng::Tensor meta = params.create("meta.codec", {(int)pack_cfg(cfg).size()});
  meta.data() = pack_cfg(cfg);
  meta.set_requires_grad(false);
}

ng::Tensor CodecModel::encode_features(const std::vector<double>& padded_samples) const {
  const int ratio = cfg.downsample_ratio();
  if (padded_samples.empty() || (int)padded_samples.size() % ratio != 0)
    fail("encode_features: input length must be a nonzero multiple of the downsample ratio");
  ng::Tensor x = ng::Tensor::from({1, (int)padded_samples.size()}, padded_samples);

  auto conv = [&](const ng::Tensor& in, const std::string& name, int stride, int kernel) {
    const auto [pl, pr] = same_pad(in.dim(1), stride, kernel);
    return ng::conv1d(in, params.find(name + ".w"), params.find(name + ".b"), stride, pl, pr);
  };

  ng::Tensor h = ng::leaky_relu(conv(x, "enc.in", 1, 7), 0.2);
  for (size_t i = 0; i < cfg.enc_strides.size(); ++i)
    h = ng::leaky_relu(conv(h, "enc.s" + std::to_string(i), cfg.enc_strides[i], 2 * cfg.enc_strides[i]), 0.2);
  {
    ng::Tensor r = ng::leaky_relu(conv(ng::leaky_relu(h, 0.2), "enc.res1", 1, 3), 0.2);
    h = ng::add(h, conv(r, "enc.res2", 1, 1));
  }
  ng::Tensor e = conv(h, "enc.out", 1, 3);
  return ng::linear(e, params.find("down.w"), params.find("down.b"));
}

ng::Tensor CodecModel::decode_features(const ng::Tensor& latents) const {
  if (latents.rank() != 2 || latents.dim(0) != cfg.quantizer_dim)
    fail("decode_features expects [quantizer_dim, T]");

  auto conv = [&](const ng::Tensor& in, const std::string& name, int kernel) {
    const auto [pl, pr] = same_pad(in.dim(1), 1, kernel);
    return ng::conv1d(in, params.find(name + ".w"), params.find(name + ".b"), 1, pl, pr);
  };

  ng::Tensor h = ng::linear(latents, params.find("up.w"), params.find("up.b"));
  h = ng::leaky_relu(conv(h, "dec.in", 3), 0.2);
  {
    ng::Tensor r = ng::leaky_relu(conv(ng::leaky_relu(h, 0.2), "dec.res1", 3), 0.2);
    h = ng::add(h, conv(r, "dec.res2", 1));
  }
  for (int i = (int)cfg.enc_strides.size() - 1; i >= 0; --i) {
    const int s = cfg.enc_strides[i];
    const int t_out = h.dim(1) * s;
    h = ng::conv_transpose1d(h, params.find("dec.s" + std::to_string(i) + ".w"),
                             params.find("dec.s" + std::to_string(i) + ".b"), s, s / 2, t_out);
    h = ng::leaky_relu(h, 0.2);
  }
  ng::Tensor y = ng::tanh_t(conv(h, "dec.out", 7));
  return ng::reshape(y, {y.dim(1)});
}

ng::Tensor CodecModel::quantize_segment(const ng::Tensor& segment, std::vector<int>* digits,
                                        bool bypass) const {
  ng::Tensor token = seg_ae_->compress(segment);
  ng::Tensor z = ng::reshape(token, {cfg.hidden_dim()});
  switch (cfg.qspec.variant) {
    case quant::Variant::fsq:
      return quant::fsq_quantize(z, cfg.qspec.levels, digits, bypass);
    case quant::Variant::gsq_m2o:
      return quant::gsq_many_to_one(z, cfg.qspec, gsq_, digits, bypass);
    case quant::Variant::gsq_m2m:
      return quant::gsq_many_to_many(z, cfg.qspec, digits, bypass);
    case quant::Variant::vq:
      return quant::vq_quantize_residual(z, vq_stages, digits, bypass);
  }
  fail("unknown quantizer variant");
}

ng::Tensor CodecModel::dequantize_segment(const std::vector<int>& digits, int length) const {
  const int h = cfg.hidden_dim();
  const int levels = cfg.qspec.levels;
  ng::Tensor zhat;
  switch (cfg.qspec.variant) {
    case quant::Variant::fsq:
    case quant::Variant::gsq_m2m: {
      if ((int)digits.size() != h) fail("dequantize_segment: digit count mismatch");
      std::vector<double> v(h);
      const double half = (levels - 1) / 2.0;
      for (int i = 0; i < h; ++i) v[i] = -1.0 + digits[i] / half;
      zhat = ng::Tensor::from({h}, std::move(v));
      break;
    }
    case quant::Variant::gsq_m2o: {
      if ((int)digits.size() != cfg.qspec.groups) fail("dequantize_segment: digit count mismatch");
      const double half = (levels - 1) / 2.0;
      std::vector<ng::Tensor> parts;
      for (int g = 0; g < cfg.qspec.groups; ++g) {
        const double v = -1.0 + digits[g] / half;
        parts.push_back(ng::scale_by(gsq_.expand[g], ng::Tensor::scalar(v)));
      }
      zhat = ng::concat_rows(parts);
      break;
    }
    case quant::Variant::vq: {
      if ((int)digits.size() != (int)vq_stages.size()) fail("dequantize_segment: digit count mismatch");
      std::vector<double> acc(h, 0.0);
      for (size_t s = 0; s < vq_stages.size(); ++s) {
        const auto& book = vq_stages[s];
        if (digits[s] < 0 || digits[s] >= book.size) fail("dequantize_segment: code index out of range");
        for (int i = 0; i < h; ++i) acc[i] += book.codes[(size_t)digits[s] * h + i];
      }
      zhat = ng::Tensor::from({h}, std::move(acc));
      break;
    }
  }
  return seg_ae_->expand(ng::reshape(zhat, {h, 1}), length);
}

void CodecModel::save(const std::string& path) const {
  // VQ codebooks live in the param store; sync the working copies back first
  for (size_t s = 0; s < vq_stages.size(); ++s)
    params.find("vq.s" + std::to_string(s) + ".codes").data() = vq_stages[s].codes;
  params.save(path);
}

CodecModel CodecModel::load(const std::string& path) {
  ng::ParamStore raw = ng::load_checkpoint_raw(path);
  ng::Tensor meta = raw.find("meta.codec");
  if (!meta.defined()) fail("not a codec checkpoint (missing meta): " + path);
  CodecConfig cfg = unpack_cfg(meta.data());
  CodecModel model(cfg, 0);
  model.params.load(path);
  for (size_t s = 0; s < model.vq_stages.size(); ++s) {
    model.vq_stages[s].codes = model.params.find("vq.s" + std::to_string(s) + ".codes").data();
    model.vq_stages[s].ema_sums = model.vq_stages[s].codes;
    model.vq_stages[s].ema_counts.assign(model.vq_stages[s].size, 1.0);
  }
  return model;
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

det::BoundarySet map_boundaries(const det::BoundarySet& detector_frames, int detector_ratio,
                                int codec_ratio, int codec_total_frames) {
  det::BoundarySet out;
  out.total_frames = codec_total_frames;
  int last = 0;
  for (int b : detector_frames.indices) {
    const int scaled = (int)std::llround((double)b * detector_ratio / codec_ratio);
    if (scaled <= 0 || scaled >= codec_total_frames || scaled == last) continue;
    out.indices.push_back(scaled);
    last = scaled;
  }
  return out;
}

namespace {
std::vector<double> pad_to_ratio(const std::vector<double>& samples, int ratio) {
  std::vector<double> out = samples;
  if (out.empty()) out.resize(ratio, 0.0);
  const size_t rem = out.size() % ratio;
  if (rem != 0) out.resize(out.size() + ratio - rem, 0.0);
  return out;
}
}  // namespace

TokenStream encode(const audio::AudioBuffer& buffer, const det::DetectorModel& detector,
                   const CodecModel& model) {
  const CodecConfig& cfg = model.cfg;
  audio::AudioBuffer in = buffer.sample_rate == cfg.sample_rate
                              ? buffer
                              : audio::resample_linear(buffer, cfg.sample_rate);
  const uint64_t orig_count = in.samples.size();
  const int ratio = cfg.downsample_ratio();
  std::vector<double> padded = pad_to_ratio(in.samples, ratio);
  const int t_codec = (int)(padded.size() / ratio);

  audio::AudioBuffer padded_buf{padded, cfg.sample_rate};
  det::BoundarySet det_b = det::detect_boundaries(padded_buf, detector);
  det::BoundarySet bounds =
      map_boundaries(det_b, detector.cfg.downsample_ratio(), ratio, t_codec);

  ng::Tensor feats = model.encode_features(padded);
  seg::SegmentLayout layout;
  std::vector<ng::Tensor> segments = seg::partition(feats, bounds, &layout);

  TokenStream stream;
  stream.sample_rate = (uint32_t)cfg.sample_rate;
  stream.downsample_ratio = (uint16_t)ratio;
  stream.spec = cfg.qspec;
  stream.utterance_sample_count = orig_count;
  const int base = cfg.qspec.variant == quant::Variant::vq ? cfg.qspec.codebook_size : cfg.qspec.levels;
  for (size_t i = 0; i < segments.size(); ++i) {
    std::vector<int> digits;
    model.quantize_segment(segments[i], &digits);
    stream.records.push_back(
        {(uint32_t)layout.records[i].length(), quant::compose_token(digits, base)});
  }
  stream.validate();
  return stream;
}

audio::AudioBuffer decode(const TokenStream& stream, const CodecModel& model) {
  const CodecConfig& cfg = model.cfg;
  if ((int)stream.downsample_ratio != cfg.downsample_ratio())
    fail("stream/checkpoint mismatch: downsample ratios differ");
  if ((int)stream.sample_rate != cfg.sample_rate)
    fail("stream/checkpoint mismatch: sample rates differ");
  const auto& a = stream.spec;
  const auto& b = cfg.qspec;
  if (a.variant != b.variant || a.levels != b.levels || a.groups != b.groups ||
      a.input_dim != b.input_dim || (a.variant == quant::Variant::vq &&
                                     (a.codebook_size != b.codebook_size || a.residual_depth != b.residual_depth)))
    fail("stream/checkpoint mismatch: quantizer specs differ");
  stream.validate();

  audio::AudioBuffer out;
  out.sample_rate = cfg.sample_rate;
  if (stream.records.empty()) return out;

  const int base = b.variant == quant::Variant::vq ? b.codebook_size : b.levels;
  std::vector<ng::Tensor> segments;
  segments.reserve(stream.records.size());
  for (const auto& r : stream.records) {
    std::vector<int> digits = quant::decompose_token(r.token, base, b.token_digits());
    segments.push_back(model.dequantize_segment(digits, (int)r.length));
  }
  ng::Tensor latents = ng::concat_cols(segments);
  ng::Tensor wave = model.decode_features(latents);
  out.samples.assign(wave.data().begin(), wave.data().begin() + stream.utterance_sample_count);
  return out;
}

// ---------------------------------------------------------------------------
// losses / training
// ---------------------------------------------------------------------------

namespace {
ng::Tensor logmel_graph(const ng::Tensor& x, int fft, int n_mels, int sample_rate) {
  if (x.dim(0) < fft)
    fail("reconstruction_loss: signal shorter than mel FFT window " + std::to_string(fft));
  const int hop = fft / 4;
  ng::Tensor padded = ng::pad_reflect(x, fft / 2, fft / 2);
  ng::Tensor s = ng::stft_mag(padded, fft, fft, hop);
  ng::Tensor power = ng::mul(s, s);
  ng::Tensor fb = ng::Tensor::from({n_mels, fft / 2 + 1},
                                   audio::mel_filterbank(n_mels, fft, sample_rate));
  ng::Tensor mel = ng::linear(power, fb, ng::Tensor());
  return ng::log_t(ng::add_scalar(mel, 1e-5));
}
}  // namespace

ng::Tensor reconstruction_loss(const ng::Tensor& x, const ng::Tensor& xhat, const CodecConfig& cfg) {
  if (x.rank() != 1 || xhat.rank() != 1 || x.dim(0) != xhat.dim(0))
    fail("reconstruction_loss: inputs must be rank-1 of equal length");
  ng::Tensor total = ng::mul_scalar(ng::l1_loss(x, xhat), cfg.time_l1_weight);
  for (size_t i = 0; i < cfg.mel_ffts.size(); ++i) {
    ng::Tensor ma = logmel_graph(x, cfg.mel_ffts[i], cfg.mel_bins[i], cfg.sample_rate);
    ng::Tensor mb = logmel_graph(xhat, cfg.mel_ffts[i], cfg.mel_bins[i], cfg.sample_rate);
    ng::Tensor term = ng::add(ng::l1_loss(ma, mb), ng::l2_loss(ma, mb));
    total = ng::add(total, ng::mul_scalar(term, cfg.mel_weights[i]));
  }
  return total;
}

namespace {

struct TrainItem {
  std::vector<double> padded;
  det::BoundarySet bounds;  // codec-frame space
};

ng::Tensor codec_utterance_loss(CodecModel& model, const TrainItem& item) {
  ng::Tensor x = ng::Tensor::from({(int)item.padded.size()}, item.padded);
  ng::Tensor feats = model.encode_features(item.padded);
  seg::SegmentLayout layout;
  std::vector<ng::Tensor> segments = seg::partition(feats, item.bounds, &layout);
  std::vector<ng::Tensor> rebuilt;
  rebuilt.reserve(segments.size());
  for (size_t i = 0; i < segments.size(); ++i) {
    ng::Tensor zhat = model.quantize_segment(segments[i], nullptr);
    rebuilt.push_back(model.segment_ae().expand(ng::reshape(zhat, {model.cfg.hidden_dim(), 1}),
                                                layout.records[i].length()));
  }
  ng::Tensor latents = seg::reassemble(rebuilt, layout);
  ng::Tensor xhat = model.decode_features(latents);
  return reconstruction_loss(x, xhat, model.cfg);
}

// numeric re-run of the segment path to gather per-stage VQ residual inputs
void collect_vq_batch(CodecModel& model, const TrainItem& item,
                      std::vector<std::vector<std::vector<double>>>& stage_inputs,
                      std::vector<std::vector<int>>& stage_assign) {
  ng::Tensor feats = model.encode_features(item.padded);
  seg::SegmentLayout layout;
  std::vector<ng::Tensor> segments = seg::partition(feats, item.bounds, &layout);
  const int h = model.cfg.hidden_dim();
  for (auto& s : segments) {
    ng::Tensor z = ng::reshape(model.segment_ae().compress(s), {h});
    std::vector<double> residual = z.data();
    for (size_t st = 0; st < model.vq_stages.size(); ++st) {
      const auto& book = model.vq_stages[st];
      int best = 0;
      double bd = 0.0;
      for (int c = 0; c < book.size; ++c) {
        double acc = 0.0;
        for (int i = 0; i < h; ++i) {
          const double d = residual[i] - book.codes[(size_t)c * h + i];
          acc += d * d;
        }
        if (c == 0 || acc < bd) {
          bd = acc;
          best = c;
        }
      }
      stage_inputs[st].push_back(residual);
      stage_assign[st].push_back(best);
      for (int i = 0; i < h; ++i) residual[i] -= book.codes[(size_t)best * h + i];
    }
  }
}

double codec_corpus_loss(CodecModel& model, const std::vector<TrainItem>& items) {
  double acc = 0.0;
  for (const auto& it : items) acc += codec_utterance_loss(model, it).item();
  return acc / (double)items.size();
}

}  // namespace

TrainLog train_codec(CodecModel& model, const det::DetectorModel& detector,
                     const std::vector<std::string>& manifest_paths, const TrainOptions& opts) {
  if (manifest_paths.empty()) fail("train_codec: empty manifest");
  const int ratio = model.cfg.downsample_ratio();

  std::vector<TrainItem> all;
  for (const auto& p : manifest_paths) {
    audio::AudioBuffer buf;
    try {
      buf = audio::read_wav(p);
    } catch (const std::exception& e) {
      fail("failed reading corpus file '" + p + "': " + e.what());
    }
    if (buf.sample_rate != model.cfg.sample_rate)
      buf = audio::resample_linear(buf, model.cfg.sample_rate);
    TrainItem item;
    item.padded = pad_to_ratio(buf.samples, ratio);
    const int t_codec = (int)(item.padded.size() / ratio);
    audio::AudioBuffer pb{item.padded, model.cfg.sample_rate};
    item.bounds = map_boundaries(det::detect_boundaries(pb, detector),
                                 detector.cfg.downsample_ratio(), ratio, t_codec);
    all.push_back(std::move(item));
  }

  int holdout_n = (int)std::lround(opts.holdout_fraction * (double)all.size());
  holdout_n = std::clamp(holdout_n, all.size() > 1 ? 1 : 0, (int)all.size() - 1);
  std::vector<TrainItem> train(all.begin(), all.end() - holdout_n);
  std::vector<TrainItem> holdout(all.end() - holdout_n, all.end());
  if (holdout.empty()) holdout = train;

  TrainLog log;
  log.initial_holdout = codec_corpus_loss(model, holdout);

  ng::AdamState adam;
  adam.init(model.params, {opts.lr, opts.beta1, opts.beta2, 1e-8});
  ng::Rng rng(opts.seed);
  const bool is_vq = model.cfg.qspec.variant == quant::Variant::vq;

  for (int step = 0; step < opts.steps; ++step) {
    std::vector<ng::Tensor> losses;
    std::vector<const TrainItem*> picked;
    for (int b = 0; b < opts.batch; ++b) {
      const TrainItem& item = train[(size_t)rng.randint(0, (int64_t)train.size() - 1)];
      picked.push_back(&item);
      losses.push_back(codec_utterance_loss(model, item));
    }
    ng::Tensor loss = ng::mean_all(ng::concat_rows(losses));
    if (!std::isfinite(loss.item()))
      fail("codec training diverged (non-finite loss) at step " + std::to_string(step));
    model.params.zero_grads();
    ng::backward(loss);
    ng::adam_step(model.params, adam);

    if (is_vq) {
      std::vector<std::vector<std::vector<double>>> stage_inputs(model.vq_stages.size());
      std::vector<std::vector<int>> stage_assign(model.vq_stages.size());
      for (const TrainItem* item : picked) collect_vq_batch(model, *item, stage_inputs, stage_assign);
      for (size_t st = 0; st < model.vq_stages.size(); ++st)
        quant::vq_ema_update(model.vq_stages[st], stage_inputs[st], stage_assign[st], 0.99, rng);
    }

    log.train_loss.push_back(loss.item());
    if (opts.eval_every > 0 && (step + 1) % opts.eval_every == 0)
      log.holdout.emplace_back(step + 1, codec_corpus_loss(model, holdout));
  }

  log.final_holdout = codec_corpus_loss(model, holdout);
  return log;
}

// ---------------------------------------------------------------------------
// stream serialization
// ---------------------------------------------------------------------------

namespace {

void put_varint(std::vector<uint8_t>& out, uint64_t v) {
  while (v >= 0x80) {
    out.push_back((uint8_t)(v | 0x80));
    v >>= 7;
  }
  out.push_back((uint8_t)v);
}

uint64_t get_varint(const std::vector<uint8_t>& in, size_t& off) {
  uint64_t v = 0;
  int shift = 0;
  while (true) {
    if (off >= in.size()) fail("truncated records (varint runs past end of stream)");
    const uint8_t b = in[off++];
    if (shift >= 63 && (b & 0x7f) > 1) fail("varint overflows 64 bits");
    v |= (uint64_t)(b & 0x7f) << shift;
    if ((b & 0x80) == 0) return v;
    shift += 7;
    if (shift > 63) fail("varint overflows 64 bits");
  }
}

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back((uint8_t)((uint64_t)v >> (8 * i)));
}

template <typename T>
T get_le(const std::vector<uint8_t>& in, size_t& off) {
  if (off + sizeof(T) > in.size()) fail("truncated stream header");
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= (uint64_t)in[off + i] << (8 * i);
  off += sizeof(T);
  return (T)v;
}

}  // namespace

std::vector<uint8_t> stream_to_bytes(const TokenStream& stream) {
  stream.validate();
  std::vector<uint8_t> out;
  out.insert(out.end(), {'D', 'T', 'O', 'K'});
  put_le<uint16_t>(out, kStreamVersion);
  put_le<uint32_t>(out, stream.sample_rate);
  put_le<uint16_t>(out, stream.downsample_ratio);
  out.push_back((uint8_t)stream.spec.variant);
  // for the vq variant the L/G fields carry codebook_size / residual_depth
  const bool vq = stream.spec.variant == quant::Variant::vq;
  put_le<uint16_t>(out, (uint16_t)(vq ? stream.spec.codebook_size : stream.spec.levels));
  put_le<uint16_t>(out, (uint16_t)(vq ? stream.spec.residual_depth : stream.spec.groups));
  put_le<uint16_t>(out, (uint16_t)stream.spec.input_dim);
  put_le<uint64_t>(out, stream.utterance_sample_count);
  put_le<uint32_t>(out, (uint32_t)stream.records.size());
  for (const auto& r : stream.records) {
    put_varint(out, r.length);
    put_varint(out, r.token);
  }
  return out;
}

TokenStream stream_from_bytes(const std::vector<uint8_t>& bytes) {
  static const uint8_t magic[4] = {'D', 'T', 'O', 'K'};
  if (bytes.size() < 4) fail("truncated stream header");
  for (size_t i = 0; i < 4; ++i)
    if (bytes[i] != magic[i]) fail("bad magic at byte offset " + std::to_string(i));
  size_t off = 4;
  const uint16_t version = get_le<uint16_t>(bytes, off);
  if (version != kStreamVersion)
    fail("unsupported stream version " + std::to_string(version));
  TokenStream s;
  s.sample_rate = get_le<uint32_t>(bytes, off);
  s.downsample_ratio = get_le<uint16_t>(bytes, off);
  if (off >= bytes.size()) fail("truncated stream header");
  const uint8_t variant = bytes[off++];
  if (variant > 3) fail("unknown quantizer variant tag " + std::to_string(variant));
  s.spec.variant = (quant::Variant)variant;
  const uint16_t l = get_le<uint16_t>(bytes, off);
  const uint16_t g = get_le<uint16_t>(bytes, off);
  const uint16_t h = get_le<uint16_t>(bytes, off);
  if (s.spec.variant == quant::Variant::vq) {
    s.spec.codebook_size = l;
    s.spec.residual_depth = g;
  } else {
    s.spec.levels = l;
    s.spec.groups = g;
  }
  s.spec.input_dim = h;
  s.utterance_sample_count = get_le<uint64_t>(bytes, off);
  const uint32_t count = get_le<uint32_t>(bytes, off);
  if (count > (1u << 24)) fail("implausible record count " + std::to_string(count));
  if (s.sample_rate == 0) fail("invalid sample rate 0");
  if (s.downsample_ratio == 0) fail("invalid downsample ratio 0");
  s.spec.validate();
  s.records.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    TokenRecord r;
    const uint64_t len = get_varint(bytes, off);
    if (len < 1 || len > s.frame_count()) fail("segment length out of range");
    r.length = (uint32_t)len;
    r.token = get_varint(bytes, off);
    s.records.push_back(r);
  }
  if (off != bytes.size()) fail("trailing bytes after records");
  s.validate();
  return s;
}

void write_stream(const TokenStream& stream, const std::string& path) {
  const std::vector<uint8_t> bytes = stream_to_bytes(stream);
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open stream for writing: " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
  if (!os) fail("I/O failure writing stream: " + path);
}

TokenStream read_stream(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open stream: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return stream_from_bytes(bytes);
}

}  // namespace dcodec::codec
