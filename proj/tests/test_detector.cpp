#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "dcodec/detector.hpp"
#include "dcodec/synth.hpp"
#include "support.hpp"

using namespace dcodec;
using ng::Tensor;

namespace {
det::DetectorConfig tiny_cfg() {
  det::DetectorConfig cfg;
  cfg.kernel_sizes = {10, 8, 8, 4, 4};
  cfg.strides = {5, 4, 4, 2, 2};
  cfg.embed_dim = 8;
  cfg.proj_dim = 6;
  return cfg;
}
}  // namespace

TEST_CASE("detector frame arithmetic follows the stride product") {
  det::DetectorConfig cfg;  // defaults: ratio 320
  CHECK(cfg.downsample_ratio() == 320);
  det::DetectorModel model(tiny_cfg(), 1);

  std::vector<double> one_second(16000, 0.01);
  CHECK(model.forward(one_second).dim(1) == 50);

  std::vector<double> single(320, 0.01);
  CHECK(model.forward(single).dim(1) == 1);

  std::vector<double> twice(32000, 0.01);
  const int t1 = model.forward(one_second).dim(1);
  const int t2 = model.forward(twice).dim(1);
  CHECK(std::abs(t2 - 2 * t1) <= 1);

  CHECK_THROWS_WITH_AS(model.forward(std::vector<double>(200, 0.0)),
                       doctest::Contains("too short"), std::runtime_error);
}

TEST_CASE("similarity_scores matches hand cosines") {
  // columns: z0=[1,0], z1=[1,1], z2=[-1,0] (stored row-major as [D,T])
  Tensor z = Tensor::from({2, 3}, {1, 1, -1, 0, 1, 0});
  Tensor s = det::similarity_scores(z, 1, 1.0);
  REQUIRE(s.numel() == 2);
  CHECK(s.data()[0] == doctest::Approx(-1.0 / std::sqrt(2.0)).epsilon(1e-6));
  CHECK(s.data()[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-6));

  Tensor same = Tensor::from({2, 2}, {3, 3, 4, 4});
  CHECK(det::similarity_scores(same, 1, 1.0).data()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(det::similarity_scores(same, 1, 2.5).data()[0] == doctest::Approx(-2.5).epsilon(1e-6));

  Tensor ortho = Tensor::from({2, 2}, {1, 0, 0, 1});
  CHECK(det::similarity_scores(ortho, 1, 1.0).data()[0] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("contrastive loss analytic values") {
  auto scalar = [](double v) { return Tensor::from({1}, {v}); };
  {
    Tensor loss = det::contrastive_loss({scalar(0.3)}, {{scalar(0.3)}}, 1.0);
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }
  {
    Tensor loss = det::contrastive_loss({scalar(1.0)}, {{scalar(0.0)}}, 1.0);
    CHECK(loss.item() == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-9));
  }
  {
    Tensor loss = det::contrastive_loss({scalar(200.0)}, {{scalar(0.0)}}, 1.0);
    CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-9));
  }
  CHECK_THROWS(det::contrastive_loss({scalar(1.0)}, {{scalar(0.0)}}, 0.0));
  CHECK_THROWS(det::contrastive_loss({scalar(1.0)}, {{}}, 1.0));
}

TEST_CASE("contrastive loss gradients pass finite differences") {
  ng::Rng rng(3);
  ng::ParamStore params;
  Tensor z = params.create("z", {4 * 6});
  for (auto& v : z.data()) v = rng.normal();
  const double err = testsup::max_rel_grad_error(params, [&] {
    Tensor zm = ng::reshape(z, {4, 6});
    std::vector<Tensor> pos;
    std::vector<std::vector<Tensor>> negs;
    for (int a = 0; a < 3; ++a) {
      auto col = [&](int t) { return ng::reshape(ng::slice_cols(zm, t, 1), {4}); };
      pos.push_back(ng::cosine_similarity(col(a), col(a + 1)));
      negs.push_back({ng::cosine_similarity(col(a), col(5)),
                      ng::cosine_similarity(col(a), col(4))});
    }
    return det::contrastive_loss(pos, negs, 0.5);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("sample_negatives: forced choice, determinism, uniformity") {
  {
    ng::Rng rng(1);
    auto picks = det::sample_negatives(3, 0, 1, 1, rng);
    REQUIRE(picks.size() == 1);
    CHECK(picks[0] == 2);
  }
  {
    ng::Rng a(42), b(42);
    CHECK(det::sample_negatives(100, 50, 5, 1, a) == det::sample_negatives(100, 50, 5, 1, b));
  }
  {
    ng::Rng rng(2);
    CHECK_THROWS_WITH_AS(det::sample_negatives(4, 1, 3, 1, rng), doctest::Contains("eligible"),
                         std::runtime_error);
  }
  {
    // chi-square over 1e5 draws: every eligible index within statistical reach of uniform
    const int T = 100, N = 5, anchor = 50, k = 1;
    std::vector<int> eligible;
    for (int t = 0; t < T; ++t)
      if (std::abs(t - anchor) > k) eligible.push_back(t);
    const int e = (int)eligible.size();
    const int draws = 100000;
    std::vector<int64_t> counts(T, 0);
    ng::Rng rng(4242);
    for (int d = 0; d < draws; ++d)
      for (int idx : det::sample_negatives(T, anchor, N, k, rng)) counts[idx] += 1;
    CHECK(counts[anchor] == 0);
    CHECK(counts[anchor - 1] == 0);
    CHECK(counts[anchor + 1] == 0);
    const double p = (double)N / e;
    const double mean = draws * p;
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    double chi2 = 0.0;
    for (int idx : eligible) {
      chi2 += (counts[idx] - mean) * (counts[idx] - mean) / mean;
      CHECK(std::fabs(counts[idx] - mean) <= 4.0 * sigma);  // per-index guard
    }
    // chi-square with e-1 dof: mean e-1, std sqrt(2(e-1))
    CHECK(chi2 < (e - 1) + 4.0 * std::sqrt(2.0 * (e - 1)));
  }
}

TEST_CASE("min-max normalization and constant traces") {
  std::vector<double> t{2.0, 4.0, 3.0};
  CHECK(det::min_max_normalize(t));
  CHECK(t == std::vector<double>{0.0, 1.0, 0.5});
  std::vector<double> c{1.0, 1.0, 1.0};
  CHECK_FALSE(det::min_max_normalize(c));
}

TEST_CASE("peak picking on the documented trace") {
  std::vector<double> trace{0, 1, 0, 0, 1, 0};
  CHECK(det::find_peaks(trace, 0.01) == std::vector<int>{1, 4});
  std::vector<double> constant{0.5, 0.5, 0.5, 0.5};
  CHECK(det::find_peaks(constant, 0.01).empty());
  std::vector<double> monotone{0.0, 0.25, 0.5, 0.75, 1.0};
  CHECK(det::find_peaks(monotone, 0.01).empty());
}

TEST_CASE("peak picking equals the brute-force prominence oracle") {
  ng::Rng rng(77);
  for (int trial = 0; trial < 400; ++trial) {
    const int n = 3 + (int)rng.randint(0, 61);
    std::vector<double> trace(n);
    for (auto& v : trace) v = rng.uniform(0.0, 1.0);
    if (trial % 3 == 0)  // quantized traces exercise plateaus and ties
      for (auto& v : trace) v = std::floor(v * 4.0) / 4.0;
    const double prom = trial % 2 == 0 ? 0.01 : 0.3;
    CHECK(det::find_peaks(trace, prom) == testsup::peaks_bruteforce(trace, prom));
  }
}

TEST_CASE("boundary detection is invariant to latent scale and validates indices") {
  ng::Rng rng(5);
  std::vector<double> trace(40);
  for (auto& v : trace) v = rng.uniform(0.0, 1.0);
  std::vector<double> scaled = trace;
  for (auto& v : scaled) v *= 37.5;
  std::vector<double> t1 = trace, t2 = scaled;
  det::min_max_normalize(t1);
  det::min_max_normalize(t2);
  CHECK(det::find_peaks(t1, 0.01) == det::find_peaks(t2, 0.01));

  det::BoundarySet good{{3, 7, 9}, 12};
  CHECK_NOTHROW(good.validate());
  det::BoundarySet bad{{0, 3}, 12};
  CHECK_THROWS(bad.validate());
  det::BoundarySet bad2{{3, 3}, 12};
  CHECK_THROWS(bad2.validate());
  det::BoundarySet bad3{{12}, 12};
  CHECK_THROWS(bad3.validate());
}

TEST_CASE("detect_boundaries returns interior strictly-increasing indices") {
  det::DetectorModel model(tiny_cfg(), 3);
  ng::Rng rng(6);
  synth::ToneOptions topts;
  ng::Rng srng(7);
  synth::ToneUtterance utt = synth::make_tone_utterance(topts, srng);
  det::BoundarySet b = det::detect_boundaries(utt.buffer, model);
  CHECK_NOTHROW(b.validate());
  CHECK(b.total_frames == (int)(utt.buffer.samples.size() / 320) + ((utt.buffer.samples.size() % 320) ? 1 : 0));
}

TEST_CASE("training decreases the loss, is deterministic, and 0 steps is a no-op") {
  const std::string dir = testsup::tmp_dir("det_train");
  synth::ToneOptions topts;
  topts.min_segments = 2;
  topts.max_segments = 3;
  topts.min_segment_s = 0.25;
  topts.max_segment_s = 0.3;
  synth::ToneCorpus corpus = synth::write_tone_corpus(dir, 6, 99, topts);

  det::TrainOptions opts;
  opts.steps = 6;
  opts.batch = 2;
  opts.seed = 11;
  opts.max_anchors = 12;
  opts.eval_every = 0;

  det::DetectorModel m1(tiny_cfg(), opts.seed);
  det::TrainLog log1 = det::train_detector(m1, corpus.wav_paths, opts);
  CHECK(log1.final_holdout < log1.initial_holdout);

  det::DetectorModel m2(tiny_cfg(), opts.seed);
  det::train_detector(m2, corpus.wav_paths, opts);
  for (size_t i = 0; i < m1.params.items.size(); ++i)
    CHECK(m1.params.items[i].data() == m2.params.items[i].data());

  det::DetectorModel init(tiny_cfg(), opts.seed);
  det::DetectorModel frozen(tiny_cfg(), opts.seed);
  det::TrainOptions none = opts;
  none.steps = 0;
  det::train_detector(frozen, corpus.wav_paths, none);
  for (size_t i = 0; i < init.params.items.size(); ++i)
    CHECK(frozen.params.items[i].data() == init.params.items[i].data());

  CHECK_THROWS_WITH_AS(det::train_detector(m1, {dir + "/does_not_exist.wav"}, opts),
                       doctest::Contains("does_not_exist"), std::runtime_error);
}

TEST_CASE("detector checkpoints round-trip through save/load") {
  const std::string dir = testsup::tmp_dir("det_ckpt");
  det::DetectorModel model(tiny_cfg(), 21);
  model.save(dir + "/d.ckpt");
  det::DetectorModel loaded = det::DetectorModel::load(dir + "/d.ckpt");
  CHECK(loaded.cfg.embed_dim == model.cfg.embed_dim);
  CHECK(loaded.cfg.strides == model.cfg.strides);
  for (size_t i = 0; i < model.params.items.size(); ++i)
    CHECK(loaded.params.items[i].data() == model.params.items[i].data());

  std::vector<double> probe(640, 0.1);
  CHECK(loaded.forward(probe).data() == model.forward(probe).data());
}

TEST_CASE("manifest parsing and boundary dump format") {
  const std::string dir = testsup::tmp_dir("det_manifest");
  {
    std::ofstream os(dir + "/m.txt");
    os << "# comment\n\n  a.wav  \nb.wav\n";
  }
  CHECK(det::read_manifest(dir + "/m.txt") == std::vector<std::string>{"a.wav", "b.wav"});
  det::BoundarySet b{{3, 9}, 20};
  CHECK(det::format_boundary_line("x.wav", b) == "x.wav: 3,9");
  det::BoundarySet empty{{}, 20};
  CHECK(det::format_boundary_line("x.wav", empty) == "x.wav:");
}
