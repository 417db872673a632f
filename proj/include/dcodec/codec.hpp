#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcodec/audio.hpp"
#include "dcodec/detector.hpp"
#include "dcodec/quant.hpp"
#include "dcodec/segmenter.hpp"
#include "dcodec/tensor.hpp"

// End-to-end pipeline: conv encoder/decoder around the variable-length
// segment stage, the training losses and the .dtok stream format.
namespace dcodec::codec {

struct CodecConfig {
  std::vector<int> enc_strides{4, 4, 2, 2};  // full scale runs {8,5,4,2}
  int base_channels = 16;
  int latent_dim = 64;
  int quantizer_dim = 24;
  int seg_hidden = 0;  // 0 = follow quantizer_dim
  quant::QuantizerSpec qspec{quant::Variant::gsq_m2o, 16, 4, 24};
  int sample_rate = 16000;
  double time_l1_weight = 500.0;
  std::vector<int> mel_ffts{1024, 512, 256, 128};
  std::vector<int> mel_bins{80, 40, 20, 10};
  std::vector<double> mel_weights{45.0, 1.0, 1.0, 1.0};

  int downsample_ratio() const;
  int hidden_dim() const { return seg_hidden > 0 ? seg_hidden : quantizer_dim; }
  void validate() const;
};

struct TokenRecord {
  uint32_t length = 0;  // segment length in latent frames
  uint64_t token = 0;   // composite token
};

struct TokenStream {
  uint32_t sample_rate = 16000;
  uint16_t downsample_ratio = 64;
  quant::QuantizerSpec spec;
  uint64_t utterance_sample_count = 0;  // pre-padding sample count
  std::vector<TokenRecord> records;

  uint64_t frame_count() const {
    return (utterance_sample_count + downsample_ratio - 1) / downsample_ratio;
  }
  void validate() const;  // token range + length-sum consistency
};

struct CodecModel {
  CodecConfig cfg;
  ng::ParamStore params;
  std::vector<quant::VqCodebook> vq_stages;  // vq variant only

  CodecModel(const CodecConfig& c, uint64_t seed);

  // waveform [T] -> quantizer-dim latent [qdim, T/ratio]; input length must be
  // a multiple of the downsample ratio
  ng::Tensor encode_features(const std::vector<double>& padded_samples) const;
  // latent [qdim, T] -> waveform tensor [T*ratio]
  ng::Tensor decode_features(const ng::Tensor& latents) const;

  // per-segment path: [qdim,l] -> quantized [H] (+ token digits)
  ng::Tensor quantize_segment(const ng::Tensor& segment, std::vector<int>* digits,
                              bool bypass = false) const;
  // digits -> reconstructed segment [qdim,l]
  ng::Tensor dequantize_segment(const std::vector<int>& digits, int length) const;

  const seg::SegmentAutoencoder& segment_ae() const { return *seg_ae_; }

  void save(const std::string& path) const;
  static CodecModel load(const std::string& path);

 private:
  std::shared_ptr<seg::SegmentAutoencoder> seg_ae_;
  quant::GsqParams gsq_;
  void wire(uint64_t seed, bool fresh);
  friend struct CodecForward;
};

// Maps detector-frame boundaries onto codec frames (the two stacks may use
// different downsample ratios); duplicates collapse, edge hits are dropped.
det::BoundarySet map_boundaries(const det::BoundarySet& detector_frames, int detector_ratio,
                                int codec_ratio, int codec_total_frames);

TokenStream encode(const audio::AudioBuffer& buffer, const det::DetectorModel& detector,
                   const CodecModel& model);
audio::AudioBuffer decode(const TokenStream& stream, const CodecModel& model);

// 500 * mean|x - xhat| + sum_i w_i * (L1 + L2) of log-mel spectrograms at the
// configured resolutions (x, xhat rank-1 tensors of equal length)
ng::Tensor reconstruction_loss(const ng::Tensor& x, const ng::Tensor& xhat, const CodecConfig& cfg);

struct TrainOptions {
  int steps = 500;
  int batch = 2;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  uint64_t seed = 0;
  double holdout_fraction = 0.2;
  int eval_every = 50;
};

struct TrainLog {
  std::vector<double> train_loss;
  std::vector<std::pair<int, double>> holdout;
  double initial_holdout = 0.0;
  double final_holdout = 0.0;
};

TrainLog train_codec(CodecModel& model, const det::DetectorModel& detector,
                     const std::vector<std::string>& manifest_paths, const TrainOptions& opts);

// .dtok serialization: "DTOK", u16 version, u32 sample_rate, u16 ratio,
// u8 variant, u16 L, u16 G, u16 H, u64 sample_count, u32 record_count,
// records as (varint length, varint token); little-endian throughout.
void write_stream(const TokenStream& stream, const std::string& path);
TokenStream read_stream(const std::string& path);
std::vector<uint8_t> stream_to_bytes(const TokenStream& stream);
TokenStream stream_from_bytes(const std::vector<uint8_t>& bytes);

}  // namespace dcodec::codec
