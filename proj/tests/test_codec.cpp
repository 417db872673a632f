#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dcodec/codec.hpp"
#include "dcodec/evalkit.hpp"
#include "dcodec/synth.hpp"
#include "support.hpp"

using namespace dcodec;
using ng::Tensor;

namespace {

codec::CodecConfig tiny_codec_cfg() {
  codec::CodecConfig c;
  c.enc_strides = {2, 2};
  c.base_channels = 4;
  c.latent_dim = 8;
  c.quantizer_dim = 4;
  c.qspec = {quant::Variant::gsq_m2o, 4, 2, 4};
  c.mel_ffts = {128, 64};
  c.mel_bins = {16, 8};
  c.mel_weights = {45.0, 1.0};
  return c;
}

det::DetectorConfig tiny_det_cfg() {
  det::DetectorConfig c;
  c.kernel_sizes = {4, 4};
  c.strides = {2, 2};
  c.embed_dim = 4;
  c.proj_dim = 4;
  return c;
}

codec::TokenStream random_stream(ng::Rng& rng) {
  codec::TokenStream s;
  s.sample_rate = 16000;
  s.downsample_ratio = (uint16_t)(1 << rng.randint(2, 6));
  s.spec.variant = quant::Variant::gsq_m2o;
  s.spec.levels = 2 + (int)rng.randint(0, 14);
  s.spec.groups = 1 + (int)rng.randint(0, 3);
  s.spec.input_dim = s.spec.groups * (1 + (int)rng.randint(0, 3));
  const int frames = 1 + (int)rng.randint(0, 39);
  s.utterance_sample_count = (uint64_t)frames * s.downsample_ratio - rng.randint(0, s.downsample_ratio - 1);
  const uint64_t vocab = s.spec.vocab_size();
  int left = frames;
  while (left > 0) {
    const int len = 1 + (int)rng.randint(0, left - 1);
    s.records.push_back({(uint32_t)len, (uint64_t)rng.randint(0, (int64_t)vocab - 1)});
    left -= len;
  }
  return s;
}

}  // namespace

TEST_CASE("token streams serialize bit-exactly, including the empty stream") {
  codec::TokenStream empty;
  empty.sample_rate = 16000;
  empty.downsample_ratio = 64;
  empty.spec = {quant::Variant::gsq_m2o, 16, 4, 24};
  empty.utterance_sample_count = 0;
  auto bytes = codec::stream_to_bytes(empty);
  codec::TokenStream back = codec::stream_from_bytes(bytes);
  CHECK(back.records.empty());
  CHECK(codec::stream_to_bytes(back) == bytes);

  ng::Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    codec::TokenStream s = random_stream(rng);
    auto b1 = codec::stream_to_bytes(s);
    codec::TokenStream r = codec::stream_from_bytes(b1);
    CHECK(codec::stream_to_bytes(r) == b1);
    CHECK(r.records.size() == s.records.size());
    CHECK(r.utterance_sample_count == s.utterance_sample_count);
  }
}

TEST_CASE("stream files round-trip on disk and errors name the problem") {
  const std::string dir = testsup::tmp_dir("dtok");
  ng::Rng rng(2);
  codec::TokenStream s = random_stream(rng);
  codec::write_stream(s, dir + "/a.dtok");
  codec::TokenStream r = codec::read_stream(dir + "/a.dtok");
  CHECK(codec::stream_to_bytes(r) == codec::stream_to_bytes(s));

  auto bytes = codec::stream_to_bytes(s);
  auto corrupted = bytes;
  corrupted[2] = 'X';
  CHECK_THROWS_WITH_AS(codec::stream_from_bytes(corrupted),
                       doctest::Contains("bad magic at byte offset 2"), std::runtime_error);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 1);
  CHECK_THROWS_WITH_AS(codec::stream_from_bytes(truncated), doctest::Contains("truncated"),
                       std::runtime_error);

  codec::TokenStream bad = s;
  bad.records.back().token = bad.spec.vocab_size();
  CHECK_THROWS_WITH_AS(codec::stream_to_bytes(bad), doctest::Contains("out of range"),
                       std::runtime_error);

  codec::TokenStream mismatch = s;
  mismatch.records.back().length += 1;
  CHECK_THROWS_WITH_AS(codec::stream_to_bytes(mismatch), doctest::Contains("sum"),
                       std::runtime_error);
}

TEST_CASE("reconstruction loss: identity, constant offset, and the term oracle") {
  ng::Rng rng(3);
  codec::CodecConfig cfg = tiny_codec_cfg();
  std::vector<double> xd(512);
  for (auto& v : xd) v = 0.4 * std::sin(2.0 * M_PI * 440.0 * (&v - xd.data()) / 16000.0);

  Tensor x = Tensor::from({512}, xd);
  CHECK(codec::reconstruction_loss(x, x, cfg).item() == doctest::Approx(0.0).epsilon(1e-15));

  std::vector<double> yd = xd;
  for (auto& v : yd) v += 0.01;
  Tensor y = Tensor::from({512}, yd);
  const double total = codec::reconstruction_loss(x, y, cfg).item();

  // independent term-by-term recomputation through the metric-path transforms
  audio::AudioBuffer bx{xd, cfg.sample_rate}, by{yd, cfg.sample_rate};
  double expected = 500.0 * 0.01;  // time L1 of a constant offset
  for (size_t i = 0; i < cfg.mel_ffts.size(); ++i) {
    audio::Spectrogram ma = audio::mel_spectrogram(bx, cfg.mel_ffts[i], cfg.mel_ffts[i] / 4, cfg.mel_bins[i]);
    audio::Spectrogram mb = audio::mel_spectrogram(by, cfg.mel_ffts[i], cfg.mel_ffts[i] / 4, cfg.mel_bins[i]);
    double l1 = 0.0, l2 = 0.0;
    for (size_t q = 0; q < ma.magnitudes.size(); ++q) {
      const double d = ma.magnitudes[q] - mb.magnitudes[q];
      l1 += std::fabs(d);
      l2 += d * d;
    }
    expected += cfg.mel_weights[i] * (l1 + l2) / (double)ma.magnitudes.size();
  }
  CHECK(total == doctest::Approx(expected).epsilon(1e-9));

  // random pair, same oracle
  std::vector<double> ad(512), bd(512);
  for (auto& v : ad) v = rng.normal(0.0, 0.2);
  for (auto& v : bd) v = rng.normal(0.0, 0.2);
  const double t2 = codec::reconstruction_loss(Tensor::from({512}, ad), Tensor::from({512}, bd), cfg).item();
  audio::AudioBuffer ba{ad, cfg.sample_rate}, bb{bd, cfg.sample_rate};
  double e2 = 0.0;
  for (size_t i = 0; i < ad.size(); ++i) e2 += std::fabs(ad[i] - bd[i]);
  e2 = 500.0 * e2 / ad.size();
  for (size_t i = 0; i < cfg.mel_ffts.size(); ++i) {
    audio::Spectrogram ma = audio::mel_spectrogram(ba, cfg.mel_ffts[i], cfg.mel_ffts[i] / 4, cfg.mel_bins[i]);
    audio::Spectrogram mb = audio::mel_spectrogram(bb, cfg.mel_ffts[i], cfg.mel_ffts[i] / 4, cfg.mel_bins[i]);
    double l1 = 0.0, l2 = 0.0;
    for (size_t q = 0; q < ma.magnitudes.size(); ++q) {
      const double d = ma.magnitudes[q] - mb.magnitudes[q];
      l1 += std::fabs(d);
      l2 += d * d;
    }
    e2 += cfg.mel_weights[i] * (l1 + l2) / (double)ma.magnitudes.size();
  }
  CHECK(t2 == doctest::Approx(e2).epsilon(1e-9));

  CHECK_THROWS(codec::reconstruction_loss(x, Tensor::from({100}, std::vector<double>(100, 0.0)), cfg));
}

TEST_CASE("encode/decode length and determinism contracts on untrained models") {
  det::DetectorModel detector(tiny_det_cfg(), 5);
  codec::CodecModel model(tiny_codec_cfg(), 6);

  ng::Rng rng(7);
  audio::AudioBuffer buf;
  buf.sample_rate = 16000;
  buf.samples.resize(801);  // deliberately not a multiple of the ratio
  for (auto& v : buf.samples) v = 0.3 * std::sin(2.0 * M_PI * 700.0 * (&v - buf.samples.data()) / 16000.0) + rng.normal(0.0, 0.01);

  codec::TokenStream s1 = codec::encode(buf, detector, model);
  CHECK(s1.utterance_sample_count == 801);
  uint64_t total = 0;
  for (const auto& r : s1.records) total += r.length;
  CHECK(total == s1.frame_count());
  CHECK(s1.frame_count() == (801 + 3) / 4);

  codec::TokenStream s2 = codec::encode(buf, detector, model);
  CHECK(codec::stream_to_bytes(s1) == codec::stream_to_bytes(s2));

  audio::AudioBuffer out = codec::decode(s1, model);
  CHECK(out.samples.size() == buf.samples.size());
  CHECK(out.sample_rate == 16000);
  audio::AudioBuffer out2 = codec::decode(s1, model);
  CHECK(out.samples == out2.samples);
}

TEST_CASE("constant audio yields a single record covering all frames") {
  det::DetectorModel detector(tiny_det_cfg(), 8);
  codec::CodecModel model(tiny_codec_cfg(), 9);
  audio::AudioBuffer buf;
  buf.sample_rate = 16000;
  buf.samples.assign(400, 0.25);  // constant trace -> no boundaries
  codec::TokenStream s = codec::encode(buf, detector, model);
  REQUIRE(s.records.size() == 1);
  CHECK(s.records[0].length == s.frame_count());
}

TEST_CASE("decode validates stream/checkpoint compatibility") {
  codec::CodecModel model(tiny_codec_cfg(), 10);
  ng::Rng rng(11);
  codec::TokenStream s;
  s.sample_rate = 16000;
  s.downsample_ratio = 8;  // model ratio is 4
  s.spec = model.cfg.qspec;
  s.utterance_sample_count = 16;
  s.records.push_back({2, 0});
  CHECK_THROWS_WITH_AS(codec::decode(s, model), doctest::Contains("ratios differ"),
                       std::runtime_error);

  s.downsample_ratio = 4;
  s.spec.levels = 8;  // model uses 4 levels
  s.records[0].length = 4;
  CHECK_THROWS_WITH_AS(codec::decode(s, model), doctest::Contains("quantizer"),
                       std::runtime_error);
}

TEST_CASE("an all-zero-token stream decodes deterministically") {
  codec::CodecModel model(tiny_codec_cfg(), 12);
  codec::TokenStream s;
  s.sample_rate = 16000;
  s.downsample_ratio = 4;
  s.spec = model.cfg.qspec;
  s.utterance_sample_count = 64;
  s.records = {{8, 0}, {8, 0}};
  audio::AudioBuffer a = codec::decode(s, model);
  audio::AudioBuffer b = codec::decode(s, model);
  CHECK(a.samples.size() == 64);
  CHECK(a.samples == b.samples);
}

TEST_CASE("every quantizer variant survives the segment round trip") {
  for (auto variant : {quant::Variant::fsq, quant::Variant::gsq_m2o, quant::Variant::gsq_m2m,
                       quant::Variant::vq}) {
    codec::CodecConfig cfg = tiny_codec_cfg();
    cfg.qspec.variant = variant;
    cfg.qspec.codebook_size = 16;
    cfg.qspec.residual_depth = 2;
    codec::CodecModel model(cfg, 13);
    ng::Rng rng(14);
    std::vector<double> seg(4 * 5);
    for (auto& v : seg) v = rng.normal();
    Tensor segment = Tensor::from({4, 5}, seg);
    std::vector<int> digits;
    model.quantize_segment(segment, &digits);
    CHECK((int)digits.size() == cfg.qspec.token_digits());
    const int base = variant == quant::Variant::vq ? cfg.qspec.codebook_size : cfg.qspec.levels;
    const uint64_t token = quant::compose_token(digits, base);
    CHECK(quant::decompose_token(token, base, cfg.qspec.token_digits()) == digits);
    Tensor back = model.dequantize_segment(digits, 5);
    CHECK(back.dim(0) == 4);
    CHECK(back.dim(1) == 5);
  }
}

TEST_CASE("codec gradients flow end to end through the quantizer") {
  codec::CodecConfig cfg = tiny_codec_cfg();
  codec::CodecModel model(cfg, 15);
  ng::Rng rng(16);
  std::vector<double> xd(256);
  for (auto& v : xd) v = 0.3 * std::sin(2.0 * M_PI * 500.0 * (&v - xd.data()) / 16000.0) + rng.normal(0.0, 0.01);

  Tensor x = Tensor::from({256}, xd);
  Tensor feats = model.encode_features(xd);
  det::BoundarySet bounds{{32}, feats.dim(1)};
  seg::SegmentLayout layout;
  auto segments = seg::partition(feats, bounds, &layout);
  std::vector<Tensor> rebuilt;
  for (size_t i = 0; i < segments.size(); ++i) {
    Tensor zhat = model.quantize_segment(segments[i], nullptr);
    rebuilt.push_back(model.segment_ae().expand(ng::reshape(zhat, {cfg.hidden_dim(), 1}),
                                                layout.records[i].length()));
  }
  Tensor latents = seg::reassemble(rebuilt, layout);
  Tensor xhat = model.decode_features(latents);
  Tensor loss = codec::reconstruction_loss(x, xhat, cfg);
  model.params.zero_grads();
  ng::backward(loss);
  double gnorm = 0.0;
  for (auto& p : model.params.items) {
    if (!p.requires_grad()) continue;
    p.node()->ensure_grad();
    for (double g : p.node()->grad) gnorm += g * g;
  }
  CHECK(gnorm > 0.0);

  // straight-through surrogate passes finite differences on the quantizer projections
  ng::ParamStore just_gsq;
  ng::Rng rng2(17);
  quant::QuantizerSpec spec{quant::Variant::gsq_m2o, 4, 2, 4};
  quant::GsqParams gp = quant::GsqParams::create(spec, just_gsq, "g", rng2);
  std::vector<double> zd(4);
  for (auto& v : zd) v = rng2.normal();
  const double err = testsup::max_rel_grad_error(just_gsq, [&] {
    Tensor z = Tensor::from({4}, zd);
    Tensor q = quant::gsq_many_to_one(z, spec, gp, nullptr, true);
    return ng::l2_loss(q, z);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("short training run reduces loss deterministically") {
  const std::string dir = testsup::tmp_dir("codec_train");
  synth::ToneOptions topts;
  topts.min_segments = 2;
  topts.max_segments = 2;
  topts.min_segment_s = 0.05;
  topts.max_segment_s = 0.08;
  synth::ToneCorpus corpus = synth::write_tone_corpus(dir, 4, 31, topts);

  det::DetectorModel detector(tiny_det_cfg(), 32);
  codec::TrainOptions opts;
  opts.steps = 4;
  opts.batch = 1;
  opts.seed = 33;
  opts.eval_every = 0;

  codec::CodecModel m1(tiny_codec_cfg(), opts.seed);
  codec::TrainLog log1 = codec::train_codec(m1, detector, corpus.wav_paths, opts);
  CHECK(log1.final_holdout < log1.initial_holdout);

  codec::CodecModel m2(tiny_codec_cfg(), opts.seed);
  codec::train_codec(m2, detector, corpus.wav_paths, opts);
  for (size_t i = 0; i < m1.params.items.size(); ++i)
    CHECK(m1.params.items[i].data() == m2.params.items[i].data());

  codec::CodecModel init(tiny_codec_cfg(), opts.seed);
  codec::CodecModel frozen(tiny_codec_cfg(), opts.seed);
  codec::TrainOptions none = opts;
  none.steps = 0;
  codec::train_codec(frozen, detector, corpus.wav_paths, none);
  for (size_t i = 0; i < init.params.items.size(); ++i)
    CHECK(frozen.params.items[i].data() == init.params.items[i].data());
}

TEST_CASE("codec checkpoints round-trip through save/load") {
  const std::string dir = testsup::tmp_dir("codec_ckpt");
  codec::CodecModel model(tiny_codec_cfg(), 41);
  model.save(dir + "/c.ckpt");
  codec::CodecModel loaded = codec::CodecModel::load(dir + "/c.ckpt");
  CHECK(loaded.cfg.enc_strides == model.cfg.enc_strides);
  CHECK(loaded.cfg.qspec.levels == model.cfg.qspec.levels);
  for (size_t i = 0; i < model.params.items.size(); ++i)
    CHECK(loaded.params.items[i].data() == model.params.items[i].data());

  std::vector<double> probe(64, 0.2);
  CHECK(loaded.encode_features(probe).data() == model.encode_features(probe).data());
}

TEST_CASE("full-scale strides give 50 frames for one second at 16 kHz") {
  codec::CodecConfig cfg = tiny_codec_cfg();
  cfg.enc_strides = {8, 5, 4, 2};  // 320x downsampling
  cfg.mel_ffts = {256};
  cfg.mel_bins = {16};
  cfg.mel_weights = {45.0};
  codec::CodecModel model(cfg, 50);
  CHECK(model.cfg.downsample_ratio() == 320);

  det::DetectorConfig dcfg;  // default stack, also 320x
  dcfg.embed_dim = 4;
  dcfg.proj_dim = 4;
  det::DetectorModel detector(dcfg, 51);

  audio::AudioBuffer second;
  second.sample_rate = 16000;
  second.samples = testsup::sine(440.0, 16000, 16000, 0.4);
  codec::TokenStream s = codec::encode(second, detector, model);
  CHECK(s.frame_count() == 50);
  uint64_t total = 0;
  for (const auto& r : s.records) total += r.length;
  CHECK(total == 50);
}

TEST_CASE("boundary mapping rescales between detector and codec frame rates") {
  det::BoundarySet db{{5, 10, 11}, 20};
  // detector ratio 320, codec ratio 64 -> multiply by 5
  det::BoundarySet mapped = codec::map_boundaries(db, 320, 64, 100);
  CHECK(mapped.indices == std::vector<int>{25, 50, 55});
  // same ratios -> identity with in-range filtering
  det::BoundarySet same = codec::map_boundaries(db, 64, 64, 12);
  CHECK(same.indices == std::vector<int>{5, 10, 11});
  // collapse of duplicates when mapping down
  det::BoundarySet down = codec::map_boundaries(db, 64, 320, 4);
  CHECK(down.indices == std::vector<int>{1, 2});
}
