#include "dcodec/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>

#include "dcodec/config.hpp"
#include "dcodec/evalkit.hpp"
#include "dcodec/synth.hpp"

namespace dcodec::cli {

namespace {

cfg::RunConfig load_config(const std::string& path) {
  return path.empty() ? cfg::RunConfig() : cfg::RunConfig::from_file(path);
}

void write_loss_csv(const std::string& path, const std::vector<double>& train,
                    const std::vector<std::pair<int, double>>& holdout, double initial_holdout,
                    double final_holdout) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write loss curve: " + path);
  os << "step,kind,loss\n";
  os << "0,holdout," << initial_holdout << "\n";
  for (size_t i = 0; i < train.size(); ++i) os << (i + 1) << ",train," << train[i] << "\n";
  for (const auto& [step, loss] : holdout) os << step << ",holdout," << loss << "\n";
  os << train.size() << ",holdout_final," << final_holdout << "\n";
}

void check_config_matches_detector(const cfg::RunConfig& rc, const det::DetectorModel& model,
                                   bool config_given) {
  if (!config_given) return;
  if (rc.detector.downsample_ratio() != model.cfg.downsample_ratio())
    throw std::runtime_error("checkpoint/config mismatch (downsample ratios differ)");
}

void check_config_matches_codec(const cfg::RunConfig& rc, const codec::CodecModel& model,
                                bool config_given) {
  if (!config_given) return;
  codec::CodecConfig c = rc.codec;
  if (c.downsample_ratio() != model.cfg.downsample_ratio())
    throw std::runtime_error("checkpoint/config mismatch (downsample ratios differ)");
  if (c.hidden_dim() != model.cfg.hidden_dim() || c.quantizer_dim != model.cfg.quantizer_dim)
    throw std::runtime_error("checkpoint/config mismatch (quantizer dimensions differ)");
}

int cmd_train_detector(const std::string& manifest, const std::string& config_path,
                       const std::string& out_path, uint64_t seed, std::ostream& out) {
  cfg::RunConfig rc = load_config(config_path);
  const auto paths = det::read_manifest(manifest);
  if (paths.empty()) throw std::runtime_error("manifest is empty: " + manifest);
  det::DetectorModel model(rc.detector, seed);
  det::TrainOptions opts;
  opts.steps = rc.training.detector_steps;
  opts.batch = rc.training.detector_batch;
  opts.lr = rc.training.detector_lr;
  opts.beta1 = rc.training.beta1;
  opts.beta2 = rc.training.beta2;
  opts.seed = seed;
  opts.holdout_fraction = rc.training.holdout_fraction;
  opts.eval_every = rc.training.eval_every;
  opts.max_anchors = rc.training.max_anchors;
  det::TrainLog log = det::train_detector(model, paths, opts);
  model.save(out_path);
  write_loss_csv(out_path + ".loss.csv", log.train_loss, log.holdout, log.initial_holdout,
                 log.final_holdout);
  out << "detector trained: steps=" << opts.steps << " holdout_initial=" << log.initial_holdout
      << " holdout_final=" << log.final_holdout << "\n";
  out << "checkpoint written to " << out_path << "\n";
  return 0;
}

int cmd_train_codec(const std::string& manifest, const std::string& detector_path,
                    const std::string& config_path, const std::string& out_path, uint64_t seed,
                    std::ostream& out) {
  cfg::RunConfig rc = load_config(config_path);
  const auto paths = det::read_manifest(manifest);
  if (paths.empty()) throw std::runtime_error("manifest is empty: " + manifest);
  det::DetectorModel detector = det::DetectorModel::load(detector_path);
  codec::CodecModel model(rc.codec, seed);
  codec::TrainOptions opts;
  opts.steps = rc.training.codec_steps;
  opts.batch = rc.training.codec_batch;
  opts.lr = rc.training.codec_lr;
  opts.beta1 = rc.training.beta1;
  opts.beta2 = rc.training.beta2;
  opts.seed = seed;
  opts.holdout_fraction = rc.training.holdout_fraction;
  opts.eval_every = rc.training.eval_every;
  codec::TrainLog log = codec::train_codec(model, detector, paths, opts);
  model.save(out_path);
  write_loss_csv(out_path + ".loss.csv", log.train_loss, log.holdout, log.initial_holdout,
                 log.final_holdout);
  out << "codec trained: steps=" << opts.steps << " holdout_initial=" << log.initial_holdout
      << " holdout_final=" << log.final_holdout << "\n";
  out << "checkpoint written to " << out_path << "\n";
  return 0;
}

int cmd_encode(const std::string& in_path, const std::string& detector_path,
               const std::string& codec_path, const std::string& out_path,
               const std::string& config_path, std::ostream& out) {
  det::DetectorModel detector = det::DetectorModel::load(detector_path);
  codec::CodecModel model = codec::CodecModel::load(codec_path);
  if (!config_path.empty()) {
    cfg::RunConfig rc = load_config(config_path);
    check_config_matches_detector(rc, detector, true);
    check_config_matches_codec(rc, model, true);
  }
  audio::AudioBuffer buf = audio::read_wav(in_path);
  codec::TokenStream stream = codec::encode(buf, detector, model);
  codec::write_stream(stream, out_path);
  char line[128];
  std::snprintf(line, sizeof(line), "segments=%zu tkr=%.6g bps=%.6g\n", stream.records.size(),
                eval::tkr_from_stream(stream), eval::bps_payload_from_stream(stream));
  out << line;
  return 0;
}

int cmd_decode(const std::string& in_path, const std::string& codec_path,
               const std::string& out_path, const std::string& config_path, std::ostream& out) {
  codec::CodecModel model = codec::CodecModel::load(codec_path);
  if (!config_path.empty()) check_config_matches_codec(load_config(config_path), model, true);
  codec::TokenStream stream = codec::read_stream(in_path);
  audio::AudioBuffer buf = codec::decode(stream, model);
  audio::write_wav(buf, out_path);
  out << "decoded " << buf.samples.size() << " samples to " << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& manifest, const std::string& detector_path,
             const std::string& codec_path, const std::string& report_path,
             const std::string& config_path, std::ostream& out) {
  cfg::RunConfig rc = load_config(config_path);
  (void)rc;
  det::DetectorModel detector = det::DetectorModel::load(detector_path);
  codec::CodecModel model = codec::CodecModel::load(codec_path);
  const auto paths = det::read_manifest(manifest);
  if (paths.empty()) throw std::runtime_error("manifest is empty: " + manifest);

  eval::MetricReport report;
  for (const auto& p : paths) {
    audio::AudioBuffer x = audio::read_wav(p);
    if (x.sample_rate != model.cfg.sample_rate)
      x = audio::resample_linear(x, model.cfg.sample_rate);
    codec::TokenStream stream = codec::encode(x, detector, model);
    audio::AudioBuffer y = codec::decode(stream, model);
    eval::UtteranceMetrics m;
    m.path = p;
    m.mel_error = eval::mel_error(x, y);
    m.stft_distance = eval::stft_distance(x, y);
    m.stoi = eval::stoi(x, y);
    m.tkr = eval::tkr_from_stream(stream);
    m.bps_payload = eval::bps_payload_from_stream(stream);
    m.bps_total = eval::bps_total_from_stream(stream);
    m.segments = (int)stream.records.size();
    m.seconds = x.duration_s();
    report.utterances.push_back(m);
  }
  eval::UtteranceMetrics agg;
  agg.path = "aggregate";
  for (const auto& u : report.utterances) {
    agg.mel_error += u.mel_error;
    agg.stft_distance += u.stft_distance;
    agg.stoi += u.stoi;
    agg.tkr += u.tkr;
    agg.bps_payload += u.bps_payload;
    agg.bps_total += u.bps_total;
    agg.segments += u.segments;
    agg.seconds += u.seconds;
  }
  const double n = (double)report.utterances.size();
  agg.mel_error /= n;
  agg.stft_distance /= n;
  agg.stoi /= n;
  agg.tkr /= n;
  agg.bps_payload /= n;
  agg.bps_total /= n;
  report.aggregate = agg;
  eval::write_report(report, report_path);
  out << "evaluated " << report.utterances.size() << " utterances; mean mel_error=" << agg.mel_error
      << " stoi=" << agg.stoi << " tkr=" << agg.tkr << "\n";
  out << "report written to " << report_path << "\n";
  return 0;
}

int cmd_analyze(const std::string& streams_dir, uint64_t vocab, const std::string& report_path,
                int top_k, std::ostream& out) {
  std::vector<std::string> files;
  for (const auto& entry : std::filesystem::directory_iterator(streams_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".dtok")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .dtok streams under " + streams_dir);

  std::vector<uint64_t> tokens;
  uint64_t header_vocab = 0;
  for (const auto& f : files) {
    codec::TokenStream s = codec::read_stream(f);
    if (header_vocab == 0) header_vocab = s.spec.vocab_size();
    for (const auto& r : s.records) tokens.push_back(r.token);
  }
  const uint64_t v = vocab > 0 ? vocab : header_vocab;
  eval::UtilizationReport rep = eval::codebook_utilization(tokens, v, top_k);
  std::ofstream os(report_path);
  if (!os) throw std::runtime_error("cannot write report: " + report_path);
  os << rep.to_csv();
  out << "streams=" << files.size() << " tokens=" << tokens.size() << " used=" << rep.used_count
      << " vocab=" << rep.vocab_size << " utilization=" << rep.utilization_rate << "\n";
  out << "frequency table written to " << report_path << "\n";
  return 0;
}

int cmd_synth(const std::string& dir, int count, uint64_t seed, std::ostream& out) {
  synth::ToneCorpus corpus = synth::write_tone_corpus(dir, count, seed);
  out << "wrote " << corpus.wav_paths.size() << " utterances; manifest at " << corpus.manifest_path
      << "\n";
  return 0;
}

int cmd_boundaries(const std::string& manifest, const std::string& detector_path,
                   const std::string& out_path, std::ostream& out) {
  det::DetectorModel detector = det::DetectorModel::load(detector_path);
  const auto paths = det::read_manifest(manifest);
  if (paths.empty()) throw std::runtime_error("manifest is empty: " + manifest);
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot write boundary dump: " + out_path);
  for (const auto& p : paths) {
    audio::AudioBuffer buf = audio::read_wav(p);
    os << det::format_boundary_line(p, det::detect_boundaries(buf, detector)) << "\n";
  }
  out << "boundary dump for " << paths.size() << " utterances written to " << out_path << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"distinctive-feature speech tokenizer"};
  app.require_subcommand(1);

  std::string manifest, config_path, out_path, detector_path, codec_path, in_path, report_path,
      streams_dir;
  uint64_t seed = 0;
  uint64_t vocab = 0;
  int top_k = 50;
  int count = 40;

  auto* td = app.add_subcommand("train-detector", "train the boundary detector");
  td->add_option("--manifest", manifest, "text file with one WAV path per line")->required();
  td->add_option("--config", config_path, "run configuration file");
  td->add_option("--out", out_path, "output checkpoint path")->required();
  td->add_option("--seed", seed, "RNG seed");

  auto* tc = app.add_subcommand("train-codec", "train the codec");
  tc->add_option("--manifest", manifest)->required();
  tc->add_option("--detector", detector_path, "trained detector checkpoint")->required();
  tc->add_option("--config", config_path);
  tc->add_option("--out", out_path)->required();
  tc->add_option("--seed", seed);

  auto* en = app.add_subcommand("encode", "encode a WAV into a token stream");
  en->add_option("--in", in_path, "input WAV")->required();
  en->add_option("--detector", detector_path)->required();
  en->add_option("--codec", codec_path)->required();
  en->add_option("--out", out_path, "output .dtok path")->required();
  en->add_option("--config", config_path);

  auto* de = app.add_subcommand("decode", "decode a token stream into a WAV");
  de->add_option("--in", in_path, "input .dtok")->required();
  de->add_option("--codec", codec_path)->required();
  de->add_option("--out", out_path, "output WAV path")->required();
  de->add_option("--config", config_path);

  auto* ev = app.add_subcommand("eval", "encode/decode a corpus and report metrics");
  ev->add_option("--manifest", manifest)->required();
  ev->add_option("--detector", detector_path)->required();
  ev->add_option("--codec", codec_path)->required();
  ev->add_option("--report", report_path, "output JSONL report")->required();
  ev->add_option("--config", config_path);

  auto* an = app.add_subcommand("analyze", "codebook utilization over stored streams");
  an->add_option("--streams", streams_dir, "directory of .dtok files")->required();
  an->add_option("--vocab", vocab, "vocabulary size (0 = from stream headers)");
  an->add_option("--report", report_path, "output CSV path")->required();
  an->add_option("--top-k", top_k, "frequency table size");

  auto* sy = app.add_subcommand("synth", "generate a synthetic tone corpus");
  sy->add_option("--dir", streams_dir, "output directory")->required();
  sy->add_option("--count", count, "number of utterances");
  sy->add_option("--seed", seed);

  auto* bo = app.add_subcommand("boundaries", "dump detected boundaries, one utterance per line");
  bo->add_option("--manifest", manifest)->required();
  bo->add_option("--detector", detector_path)->required();
  bo->add_option("--out", out_path, "output text file")->required();

  std::vector<const char*> argv;
  argv.push_back("dcodec");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse((int)argv.size(), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (td->parsed()) return cmd_train_detector(manifest, config_path, out_path, seed, out);
    if (tc->parsed())
      return cmd_train_codec(manifest, detector_path, config_path, out_path, seed, out);
    if (en->parsed())
      return cmd_encode(in_path, detector_path, codec_path, out_path, config_path, out);
    if (de->parsed()) return cmd_decode(in_path, codec_path, out_path, config_path, out);
    if (ev->parsed())
      return cmd_eval(manifest, detector_path, codec_path, report_path, config_path, out);
    if (an->parsed()) return cmd_analyze(streams_dir, vocab, report_path, top_k, out);
    if (sy->parsed()) return cmd_synth(streams_dir, count, seed, out);
    if (bo->parsed()) return cmd_boundaries(manifest, detector_path, out_path, out);
    err << "error: no subcommand\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace dcodec::cli
