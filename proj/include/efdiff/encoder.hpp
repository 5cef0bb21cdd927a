#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "efdiff/attention.hpp"
#include "efdiff/field.hpp"

namespace efdiff {

struct EncoderConfig {
  int patch = 8;
  int dim = 64;
  int depth = 4;
  int heads = 4;
  int bands = 6;
  int mlp_ratio = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  bool operator==(const EncoderConfig&) const = default;
};

// Ranks: [B, C, H, W] -> [B, (H/p)(W/p), C p p]; row-major patch order, each
// patch flattened as (band, row, col).
torch::Tensor patchify(const torch::Tensor& images, int patch);
torch::Tensor unpatchify(const torch::Tensor& patches, int patch, int bands, int height, int width);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int dim, int heads, int mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int heads_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Small ViT: linear patch embedding, fixed 2-D sin/cos positions, pre-norm
/// transformer blocks, final LayerNorm. Output tokens are the final block
/// output.
class ViTEncoderImpl : public torch::nn::Module {
 public:
  explicit ViTEncoderImpl(const EncoderConfig& config);

  const EncoderConfig& config() const { return config_; }

  /// Patch tokens after the linear embedding, before positions are added.
  torch::Tensor patch_tokens(const torch::Tensor& images);
  /// Full forward on [B, C, H, W] normalised reflectance.
  EmbeddingSet embed(const torch::Tensor& images);
  /// Forward over a subset of token indices per sample ([B, K] int64).
  torch::Tensor forward_visible(const torch::Tensor& images, const torch::Tensor& keep);

  void freeze();
  bool frozen() const { return frozen_; }
  std::string checksum() const;

 private:
  torch::Tensor encode_tokens(torch::Tensor tokens);
  torch::Tensor positions(int grid_h, int grid_w) const;

  EncoderConfig config_;
  bool frozen_ = false;
  torch::nn::Linear patch_embed_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(ViTEncoder);

/// Lightweight MAE decoder: projects visible tokens, inserts a shared mask
/// token at masked positions, one transformer block, linear pixel head.
class MaeDecoderImpl : public torch::nn::Module {
 public:
  MaeDecoderImpl(const EncoderConfig& encoder, int dim = 32, int depth = 1, int heads = 4);
  torch::Tensor forward(const torch::Tensor& visible, const torch::Tensor& keep, int grid_h, int grid_w);

 private:
  EncoderConfig encoder_;
  int dim_;
  torch::nn::Linear embed_{nullptr}, head_{nullptr};
  torch::Tensor mask_token_;
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(MaeDecoder);

ViTEncoder make_encoder(const EncoderConfig& config, std::uint64_t init_seed);

struct PretrainConfig {
  double mask_ratio = 0.75;
  int steps = 2000;
  int batch = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 7;
  int log_every = 100;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
  std::vector<double> losses;        // masked-patch MSE per step
  double heldout_masked_mse = 0.0;   // trained encoder + decoder
  double heldout_mean_baseline = 0.0;// per-band dataset mean on the same masked pixels
};

/// Number of masked patches for a given ratio; at least one patch is masked
/// and at least one stays visible.
int masked_patch_count(int tokens, double mask_ratio);

/// Trains encoder + decoder on masked-patch reconstruction over random
/// crops of the given [C, H, W] stacks (values in [0,1]); the decoder is
/// discarded. Heldout stacks are used for the final comparison against the
/// mean predictor.
PretrainResult mae_pretrain(ViTEncoder& encoder, const std::vector<Stack>& train, const std::vector<Stack>& heldout,
                            int crop, const PretrainConfig& config);

void save_encoder(const std::string& path, ViTEncoder& encoder, const nlohmann::json& extra = {});
/// Throws if the stored config differs from `expected`.
ViTEncoder load_encoder(const std::string& path, const EncoderConfig& expected);
ViTEncoder load_encoder(const std::string& path);

}  // namespace efdiff
