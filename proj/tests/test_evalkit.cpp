#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "dcodec/evalkit.hpp"
#include "support.hpp"

using namespace dcodec;

namespace {

audio::AudioBuffer modulated_noise(int samples, uint64_t seed, double amp = 0.4) {
  ng::Rng rng(seed);
  audio::AudioBuffer b;
  b.sample_rate = 16000;
  b.samples.resize(samples);
  for (int i = 0; i < samples; ++i) {
    const double env = 0.4 + 0.6 * 0.5 * (1.0 + std::sin(2.0 * M_PI * 4.0 * i / 16000.0));
    b.samples[i] = amp * env * rng.normal();
  }
  return b;
}

codec::TokenStream stream_with(int segments, double seconds, quant::QuantizerSpec spec,
                               int ratio = 64) {
  codec::TokenStream s;
  s.sample_rate = 16000;
  s.downsample_ratio = (uint16_t)ratio;
  s.spec = spec;
  s.utterance_sample_count = (uint64_t)std::llround(seconds * 16000.0);
  const int frames = (int)s.frame_count();
  int left = frames;
  for (int i = 0; i < segments; ++i) {
    const int len = i + 1 == segments ? left : std::max(1, left / (segments - i));
    s.records.push_back({(uint32_t)len, 0});
    left -= len;
  }
  return s;
}

}  // namespace

TEST_CASE("mel_error: zeros on identical inputs, positive and oracle-checked otherwise") {
  audio::AudioBuffer x = modulated_noise(16000, 1);
  CHECK(eval::mel_error(x, x) == 0.0);

  audio::AudioBuffer silence;
  silence.sample_rate = 16000;
  silence.samples.assign(16000, 0.0);
  CHECK(eval::mel_error(silence, silence) == 0.0);

  audio::AudioBuffer sine;
  sine.sample_rate = 16000;
  sine.samples = testsup::sine(440.0, 16000, 16000);
  const double err = eval::mel_error(sine, silence);
  CHECK(err > 0.0);

  // independent oracle: rebuild the log-mel pipeline with a hand-made filterbank
  auto logmel = [](const audio::AudioBuffer& b) {
    audio::Spectrogram mag = audio::stft_magnitude(b, 1024, 256);
    const int bins = mag.bins, mels = 80;
    auto hz2mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
    auto mel2hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    std::vector<double> edges(mels + 2);
    for (int i = 0; i < mels + 2; ++i)
      edges[i] = mel2hz(hz2mel(0.0) + (hz2mel(8000.0) - hz2mel(0.0)) * i / (mels + 1));
    std::vector<double> out((size_t)mag.frames * mels);
    for (int f = 0; f < mag.frames; ++f)
      for (int m = 0; m < mels; ++m) {
        double acc = 0.0;
        for (int k = 0; k < bins; ++k) {
          const double fk = k * 16000.0 / 1024.0;
          double w = 0.0;
          if (fk > edges[m] && fk < edges[m + 2])
            w = fk <= edges[m + 1] ? (fk - edges[m]) / (edges[m + 1] - edges[m])
                                   : (edges[m + 2] - fk) / (edges[m + 2] - edges[m + 1]);
          acc += w * mag.at(f, k) * mag.at(f, k);
        }
        out[(size_t)f * mels + m] = std::log(1e-5 + acc);
      }
    return out;
  };
  auto a = logmel(sine), b = logmel(silence);
  double expect = 0.0;
  for (size_t i = 0; i < a.size(); ++i) expect += std::fabs(a[i] - b[i]);
  expect /= (double)a.size();
  CHECK(err == doctest::Approx(expect).epsilon(1e-9));

  audio::AudioBuffer shorter;
  shorter.sample_rate = 16000;
  shorter.samples.assign(8000, 0.0);
  CHECK_THROWS(eval::mel_error(sine, shorter));
}

TEST_CASE("stft_distance: symmetry, zero on identity, scale sensitivity, term oracle") {
  audio::AudioBuffer x = modulated_noise(8192, 2);
  CHECK(eval::stft_distance(x, x) == 0.0);

  audio::AudioBuffer y = x;
  for (auto& v : y.samples) v *= 2.0;
  const double d = eval::stft_distance(x, y);
  CHECK(d > 0.0);
  CHECK(eval::stft_distance(y, x) == doctest::Approx(d).epsilon(1e-12));

  audio::AudioBuffer z = modulated_noise(8192, 3);
  double expect = 0.0;
  for (int fft : {512, 1024, 2048}) {
    audio::Spectrogram a = audio::stft_magnitude(x, fft, fft / 4);
    audio::Spectrogram b = audio::stft_magnitude(z, fft, fft / 4);
    double l1 = 0.0, log_l1 = 0.0;
    for (size_t i = 0; i < a.magnitudes.size(); ++i) {
      l1 += std::fabs(a.magnitudes[i] - b.magnitudes[i]);
      log_l1 += std::fabs(std::log(1e-5 + a.magnitudes[i]) - std::log(1e-5 + b.magnitudes[i]));
    }
    expect += (l1 + log_l1) / (double)a.magnitudes.size();
  }
  expect /= 3.0;
  CHECK(eval::stft_distance(x, z) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("stoi behaves like an intelligibility score") {
  audio::AudioBuffer clean = modulated_noise(16000, 4);
  CHECK(eval::stoi(clean, clean) >= 0.99);

  audio::AudioBuffer noise;
  noise.sample_rate = 16000;
  noise.samples.resize(16000);
  {
    ng::Rng rng(5);
    for (auto& v : noise.samples) v = 0.4 * rng.normal();
  }
  CHECK(eval::stoi(clean, noise) < 0.2);

  // higher SNR scores higher
  auto with_snr = [&](double snr_db) {
    ng::Rng rng(6);
    audio::AudioBuffer out = clean;
    double sig_pow = 0.0;
    for (double v : clean.samples) sig_pow += v * v;
    sig_pow /= (double)clean.samples.size();
    const double noise_std = std::sqrt(sig_pow / std::pow(10.0, snr_db / 10.0));
    for (auto& v : out.samples) v += noise_std * rng.normal();
    return out;
  };
  CHECK(eval::stoi(clean, with_snr(20.0)) > eval::stoi(clean, with_snr(0.0)));

  audio::AudioBuffer tiny = modulated_noise(2000, 7);
  CHECK_THROWS_WITH_AS(eval::stoi(tiny, tiny), doctest::Contains("too-short"), std::runtime_error);
}

TEST_CASE("tkr and bps reproduce the published arithmetic") {
  CHECK(eval::tkr(50.0, 8) == 400.0);
  CHECK(eval::tkr(0.0, 1) == 0.0);

  // 19 single-stage segments across 2 seconds
  quant::QuantizerSpec gsq{quant::Variant::gsq_m2o, 16, 4, 24};
  codec::TokenStream s = stream_with(19, 2.0, gsq);
  CHECK(eval::tkr_from_stream(s) == doctest::Approx(9.5));

  CHECK(eval::bps(50.0, {1024}) == 500.0);
  CHECK(eval::bps(9.5, {16, 16, 16, 16}) == 152.0);
  CHECK(eval::bps(20.0, {16, 16, 16, 16}) == 320.0);
  CHECK_THROWS(eval::bps(50.0, {1}));

  // stream-derived payload: 19 tokens * 16 bits / 2 s = 152
  CHECK(eval::bps_payload_from_stream(s) == doctest::Approx(152.0));
  CHECK(eval::bps_total_from_stream(s) > eval::bps_payload_from_stream(s));

  quant::QuantizerSpec rvq;
  rvq.variant = quant::Variant::vq;
  rvq.codebook_size = 1024;
  rvq.residual_depth = 8;
  rvq.input_dim = 8;
  codec::TokenStream r = stream_with(100, 2.0, rvq, 320);
  CHECK(eval::tkr_from_stream(r) == doctest::Approx(400.0));

  codec::TokenStream zero = stream_with(1, 0.0, gsq);
  zero.records.clear();
  zero.utterance_sample_count = 0;
  CHECK_THROWS(eval::tkr_from_stream(zero));
}

TEST_CASE("codebook utilization counts match a hash-map oracle") {
  eval::UtilizationReport small = eval::codebook_utilization({0, 1, 2, 2}, 512, 50);
  CHECK(small.used_count == 3);
  CHECK(small.utilization_rate == doctest::Approx(3.0 / 512.0));

  std::vector<uint64_t> all(128);
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  CHECK(eval::codebook_utilization(all, 128, 10).utilization_rate == 1.0);

  ng::Rng rng(8);
  std::vector<uint64_t> tokens(10000);
  std::map<uint64_t, uint64_t> oracle;
  for (auto& t : tokens) {
    t = (uint64_t)rng.randint(0, 511);
    oracle[t] += 1;
  }
  eval::UtilizationReport rep = eval::codebook_utilization(tokens, 512, 512);
  CHECK(rep.used_count == oracle.size());
  double ratio_sum = 0.0;
  for (const auto& [token, ratio] : rep.top) {
    CHECK(ratio == doctest::Approx((double)oracle[token] / 10000.0).epsilon(1e-15));
    ratio_sum += ratio;
  }
  CHECK(ratio_sum == doctest::Approx(1.0).epsilon(1e-12));
  for (size_t i = 1; i < rep.top.size(); ++i) CHECK(rep.top[i - 1].second >= rep.top[i].second);

  CHECK_THROWS(eval::codebook_utilization({600}, 512, 10));

  const std::string csv = rep.to_csv();
  CHECK(csv.substr(0, 17) == "rank,token,ratio\n");
}

TEST_CASE("kmeans finds well-separated clusters and the silhouette oracle agrees") {
  ng::Rng rng(9);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 120; ++i) {
    const bool right = i % 2 == 0;
    pts.push_back({(right ? 10.0 : -10.0) + rng.normal(0.0, 0.3), rng.normal(0.0, 0.3)});
  }
  eval::KmeansResult res = eval::kmeans_silhouette(pts, 2, 30, 42, 500);
  CHECK(res.silhouette > 0.9);

  // brute-force silhouette oracle over the same sample and assignments
  const int n = (int)res.sampled_indices.size();
  auto dist = [&](int i, int j) {
    double acc = 0.0;
    for (int d = 0; d < 2; ++d) {
      const double diff = pts[res.sampled_indices[i]][d] - pts[res.sampled_indices[j]][d];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };
  double sil = 0.0;
  for (int i = 0; i < n; ++i) {
    double same = 0.0, other = 0.0;
    int same_n = 0, other_n = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      if (res.assignments[j] == res.assignments[i]) {
        same += dist(i, j);
        ++same_n;
      } else {
        other += dist(i, j);
        ++other_n;
      }
    }
    if (same_n == 0) continue;
    const double a = same / same_n, b = other / other_n;
    sil += (b - a) / std::max(a, b);
  }
  sil /= n;
  CHECK(res.silhouette == doctest::Approx(sil).epsilon(1e-12));
}

TEST_CASE("silhouette degenerate rules") {
  std::vector<std::vector<double>> same(10, {1.0, 2.0});
  eval::KmeansResult res = eval::kmeans_silhouette(same, 2);
  CHECK(res.silhouette == 0.0);

  CHECK_THROWS_WITH_AS(eval::kmeans_silhouette(same, 1), doctest::Contains("K<2"),
                       std::runtime_error);

  std::vector<std::vector<double>> two = {{0.0}, {1.0}, {0.0}};
  CHECK_THROWS_WITH_AS(eval::kmeans_silhouette(two, 3), doctest::Contains("distinct"),
                       std::runtime_error);
}

TEST_CASE("silhouette strictly improves when separation doubles") {
  auto clouds = [](double gap) {
    ng::Rng rng(10);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 100; ++i)
      pts.push_back({(i % 2 == 0 ? gap : -gap) / 2.0 + rng.normal(0.0, 0.5), rng.normal(0.0, 0.5)});
    return pts;
  };
  const double near = eval::kmeans_silhouette(clouds(4.0), 2, 30, 42, 500).silhouette;
  const double far = eval::kmeans_silhouette(clouds(8.0), 2, 30, 42, 500).silhouette;
  CHECK(far > near);
  CHECK(near >= -1.0);
  CHECK(far <= 1.0);
}

TEST_CASE("metric reports round-trip through the JSONL file") {
  const std::string dir = testsup::tmp_dir("report");
  eval::MetricReport rep;
  eval::UtteranceMetrics u;
  u.path = "a.wav";
  u.mel_error = 0.25;
  u.stft_distance = 1.5;
  u.stoi = 0.87;
  u.tkr = 9.5;
  u.bps_payload = 152.0;
  u.bps_total = 190.25;
  u.segments = 19;
  u.seconds = 2.0;
  rep.utterances.push_back(u);
  u.path = "b.wav";
  u.mel_error = 0.5;
  rep.utterances.push_back(u);
  rep.aggregate = u;
  rep.aggregate.path = "aggregate";
  eval::write_report(rep, dir + "/r.jsonl");
  eval::MetricReport back = eval::read_report(dir + "/r.jsonl");
  REQUIRE(back.utterances.size() == 2);
  CHECK(back.utterances[0].path == "a.wav");
  CHECK(back.utterances[0].mel_error == 0.25);
  CHECK(back.utterances[0].bps_total == 190.25);
  CHECK(back.utterances[1].mel_error == 0.5);
  CHECK(back.aggregate.path == "aggregate");
  CHECK(back.wer == "unavailable");
  CHECK(back.pesq == "unavailable");
}
