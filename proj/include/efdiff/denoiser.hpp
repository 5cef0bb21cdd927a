#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "efdiff/attention.hpp"

namespace efdiff {

enum class HeadMode { Epsilon, X0, Regression };
enum class Conditioning { EfmCrossAttention, ChannelConcat, None };

std::string to_string(HeadMode m);
std::string to_string(Conditioning c);
HeadMode head_mode_from_string(const std::string& s);
Conditioning conditioning_from_string(const std::string& s);

struct DenoiserConfig {
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 4};
  int res_blocks = 2;
  // Downsampling factors (relative to the input grid) that carry
  // self-/cross-attention in the decoder; the bottleneck always does.
  std::vector<int> attention_factors{2, 4};
  int heads = 4;
  int norm_groups = 8;
  HeadMode head = HeadMode::X0;
  Conditioning conditioning = Conditioning::EfmCrossAttention;
  int context_dim = 64;
  int reflectance_bands = 6;
  int position_dim = 32;  // 0 disables cross-attention position codes

  // Regression heads drop the diffusion state and timestep inputs.
  bool uses_state() const { return head != HeadMode::Regression; }
  bool uses_timestep() const { return head != HeadMode::Regression; }
  int input_channels() const;
  void validate() const;

  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);

  // Mirrors the full-size geometry (224 input, five stages, attention at 14x14).
  static DenoiserConfig full_geometry();
};

/// Raw sinusoidal features of integer timesteps, [B, dim]; first half sin,
/// second half cos, frequencies exp(-ln(10000) k / (dim/2)).
torch::Tensor timestep_features(const torch::Tensor& t, int dim);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_channels, int out_channels, int time_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_embedding);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

struct DenoiserInput {
  torch::Tensor state;        // R_t, [B, 1, H, W]; unused by regression heads
  torch::Tensor upsampled;    // X_tilde (network-scaled), [B, 1, H, W]
  torch::Tensor reflectance;  // [B, C, H, W], channel_concat only
  const EmbeddingSet* context = nullptr;  // efm_cross_attention only
  torch::Tensor timesteps;    // [B] int64
};

/// Conditional UNet. The encoder path sees only the concatenated input
/// channels; self- and cross-attention sites live in the decoder and
/// bottleneck. Each attention decoder block runs residual block ->
/// self-attention -> cross-attention.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const DenoiserConfig& config);

  torch::Tensor forward(const DenoiserInput& input);
  const DenoiserConfig& config() const { return config_; }

  int cross_attention_sites() const { return static_cast<int>(cross_sites_.size()); }
  int self_attention_sites() const { return self_sites_; }
  std::vector<CrossAttention2d>& cross_attention() { return cross_sites_; }

 private:
  torch::Tensor assemble_input(const DenoiserInput& input) const;

  DenoiserConfig config_;
  int time_dim_ = 0;
  torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr};
  torch::nn::ModuleList down_{nullptr};
  std::vector<std::string> down_kind_;  // "res" | "down"
  ResBlock mid1_{nullptr}, mid2_{nullptr};
  SelfAttention2d mid_self_{nullptr};
  CrossAttention2d mid_cross_{nullptr};
  struct UpStage {
    ResBlock block{nullptr};
    SelfAttention2d self_attn{nullptr};
    CrossAttention2d cross_attn{nullptr};
    torch::nn::Conv2d upsample{nullptr};  // nearest x2 then 3x3 conv
  };
  std::vector<UpStage> up_;
  std::vector<CrossAttention2d> cross_sites_;
  int self_sites_ = 0;
  torch::nn::GroupNorm out_norm_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(Denoiser);

Denoiser make_denoiser(const DenoiserConfig& config, std::uint64_t init_seed);

}  // namespace efdiff
