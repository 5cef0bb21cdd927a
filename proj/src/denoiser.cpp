#include "efdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace efdiff {

std::string to_string(HeadMode m) {
  switch (m) {
    case HeadMode::Epsilon: return "epsilon";
    case HeadMode::X0: return "x0";
    case HeadMode::Regression: return "regression";
  }
  return "?";
}

std::string to_string(Conditioning c) {
  switch (c) {
    case Conditioning::EfmCrossAttention: return "efm_cross_attention";
    case Conditioning::ChannelConcat: return "channel_concat";
    case Conditioning::None: return "none";
  }
  return "?";
}

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "epsilon") return HeadMode::Epsilon;
  if (s == "x0") return HeadMode::X0;
  if (s == "regression") return HeadMode::Regression;
  throw std::invalid_argument("unknown head mode: " + s);
}

Conditioning conditioning_from_string(const std::string& s) {
  if (s == "efm_cross_attention") return Conditioning::EfmCrossAttention;
  if (s == "channel_concat") return Conditioning::ChannelConcat;
  if (s == "none") return Conditioning::None;
  throw std::invalid_argument("unknown conditioning mode: " + s);
}

int DenoiserConfig::input_channels() const {
  return (uses_state() ? 1 : 0) + 1 + (conditioning == Conditioning::ChannelConcat ? reflectance_bands : 0);
}

void DenoiserConfig::validate() const {
  if (base_channels < 1 || channel_mult.empty() || res_blocks < 1)
    throw std::invalid_argument("denoiser config: empty architecture");
  if (base_channels % 2 != 0) throw std::invalid_argument("denoiser config: base channels must be even");
  for (int m : channel_mult) {
    const int ch = base_channels * m;
    if (m < 1) throw std::invalid_argument("denoiser config: channel multiplier < 1");
    if (ch % norm_groups != 0) throw std::invalid_argument("denoiser config: group norm does not divide channels");
    if (ch % heads != 0)
      throw std::invalid_argument("denoiser config: attention head dimension not integral at " + std::to_string(ch) +
                                  " channels");
  }
  if (position_dim % 4 != 0) throw std::invalid_argument("denoiser config: position_dim must be divisible by 4");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"base_channels", base_channels},
          {"channel_mult", channel_mult},
          {"res_blocks", res_blocks},
          {"attention_factors", attention_factors},
          {"heads", heads},
          {"norm_groups", norm_groups},
          {"head", to_string(head)},
          {"conditioning", to_string(conditioning)},
          {"context_dim", context_dim},
          {"reflectance_bands", reflectance_bands},
          {"position_dim", position_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  if (j.contains("channel_mult")) c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.res_blocks = j.value("res_blocks", c.res_blocks);
  if (j.contains("attention_factors")) c.attention_factors = j.at("attention_factors").get<std::vector<int>>();
  c.heads = j.value("heads", c.heads);
  c.norm_groups = j.value("norm_groups", c.norm_groups);
  if (j.contains("head")) c.head = head_mode_from_string(j.at("head"));
  if (j.contains("conditioning")) c.conditioning = conditioning_from_string(j.at("conditioning"));
  c.context_dim = j.value("context_dim", c.context_dim);
  c.reflectance_bands = j.value("reflectance_bands", c.reflectance_bands);
  c.position_dim = j.value("position_dim", c.position_dim);
  return c;
}

DenoiserConfig DenoiserConfig::full_geometry() {
  DenoiserConfig c;
  c.base_channels = 64;
  c.channel_mult = {1, 2, 4, 8, 16};
  c.res_blocks = 2;
  c.attention_factors = {16};
  c.heads = 8;
  c.norm_groups = 16;
  c.context_dim = 1024;
  return c;
}

torch::Tensor timestep_features(const torch::Tensor& t, int dim) {
  if (dim % 2 != 0) throw std::invalid_argument("timestep embedding: dimension must be even");
  if (t.dim() != 1) throw std::invalid_argument("timestep embedding: expected [B] timesteps");
  if ((t < 0).any().item<bool>()) throw std::invalid_argument("timestep embedding: negative timestep");
  const int half = dim / 2;
  auto k = torch::arange(half, torch::kFloat64);
  auto freqs = torch::exp(-std::log(10000.0) * k / half);
  auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1).to(torch::kFloat32);
}

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels, int time_dim, int groups) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, in_channels)));
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  if (time_dim > 0) time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, out_channels));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out_channels)));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels)
    skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& time_embedding) {
  auto h = conv1_(torch::silu(norm1_(x)));
  if (time_proj_ && time_embedding.defined())
    h = h + time_proj_(torch::silu(time_embedding)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

DenoiserImpl::DenoiserImpl(const DenoiserConfig& config) : config_(config) {
  config_.validate();
  const int base = config.base_channels;
  const int groups = config.norm_groups;
  const bool cross = config.conditioning == Conditioning::EfmCrossAttention;
  if (config.uses_timestep()) {
    time_dim_ = 4 * base;
    time_fc1_ = register_module("time_fc1", torch::nn::Linear(base, time_dim_));
    time_fc2_ = register_module("time_fc2", torch::nn::Linear(time_dim_, time_dim_));
  }
  conv_in_ = register_module("conv_in",
                             torch::nn::Conv2d(torch::nn::Conv2dOptions(config.input_channels(), base, 3).padding(1)));

  down_ = register_module("down", torch::nn::ModuleList());
  std::vector<int> skip_channels{base};
  int ch = base;
  const int levels = static_cast<int>(config.channel_mult.size());
  for (int level = 0; level < levels; ++level) {
    const int out = base * config.channel_mult[level];
    for (int j = 0; j < config.res_blocks; ++j) {
      down_->push_back(ResBlock(ch, out, time_dim_, groups));
      down_kind_.push_back("res");
      ch = out;
      skip_channels.push_back(ch);
    }
    if (level + 1 < levels) {
      down_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
      down_kind_.push_back("down");
      skip_channels.push_back(ch);
    }
  }

  auto make_cross = [&](int channels, const std::string& name) {
    auto site = register_module(name, CrossAttention2d(channels, config.context_dim, config.heads, config.position_dim));
    cross_sites_.push_back(site);
    return site;
  };

  mid1_ = register_module("mid1", ResBlock(ch, ch, time_dim_, groups));
  mid_self_ = register_module("mid_self", SelfAttention2d(ch, config.heads, groups));
  ++self_sites_;
  if (cross) mid_cross_ = make_cross(ch, "mid_cross");
  mid2_ = register_module("mid2", ResBlock(ch, ch, time_dim_, groups));

  for (int level = levels - 1; level >= 0; --level) {
    const int out = base * config.channel_mult[level];
    const int factor = 1 << level;
    const bool attn = std::find(config.attention_factors.begin(), config.attention_factors.end(), factor) !=
                      config.attention_factors.end();
    for (int j = 0; j <= config.res_blocks; ++j) {
      const int skip = skip_channels.back();
      skip_channels.pop_back();
      const std::string prefix = "up" + std::to_string(level) + "_" + std::to_string(j);
      UpStage stage;
      stage.block = register_module(prefix + "_res", ResBlock(ch + skip, out, time_dim_, groups));
      ch = out;
      if (attn) {
        stage.self_attn = register_module(prefix + "_self", SelfAttention2d(ch, config.heads, groups));
        ++self_sites_;
        if (cross) stage.cross_attn = make_cross(ch, prefix + "_cross");
      }
      if (level > 0 && j == config.res_blocks)
        stage.upsample = register_module(prefix + "_upsample",
                                         torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1)));
      up_.push_back(stage);
    }
  }
  out_norm_ = register_module("out_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, ch)));
  conv_out_ = register_module("conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 1, 3).padding(1)));
}

torch::Tensor DenoiserImpl::assemble_input(const DenoiserInput& input) const {
  if (!input.upsampled.defined() || input.upsampled.dim() != 4 || input.upsampled.size(1) != 1)
    throw std::invalid_argument("denoiser: upsampled field must be [B, 1, H, W]");
  const auto B = input.upsampled.size(0), H = input.upsampled.size(2), W = input.upsampled.size(3);
  const int factor = 1 << (config_.channel_mult.size() - 1);
  if (H % factor != 0 || W % factor != 0)
    throw std::invalid_argument("denoiser: spatial size not divisible by the downsampling depth");
  std::vector<torch::Tensor> parts;
  if (config_.uses_state()) {
    if (!input.state.defined() || !input.state.sizes().equals(input.upsampled.sizes()))
      throw std::invalid_argument("denoiser: state shape must match the upsampled field");
    parts.push_back(input.state);
  }
  parts.push_back(input.upsampled);
  if (config_.conditioning == Conditioning::ChannelConcat) {
    if (!input.reflectance.defined() || input.reflectance.size(0) != B ||
        input.reflectance.size(1) != config_.reflectance_bands || input.reflectance.size(2) != H ||
        input.reflectance.size(3) != W)
      throw std::invalid_argument("denoiser: channel_concat needs [B, C, H, W] reflectance");
    parts.push_back(input.reflectance);
  }
  if (config_.conditioning == Conditioning::EfmCrossAttention) {
    if (input.context == nullptr || !input.context->tokens.defined())
      throw std::invalid_argument("denoiser: efm_cross_attention requires embeddings Z");
    if (input.context->tokens.size(2) != config_.context_dim)
      throw std::invalid_argument("denoiser: embedding width does not match context_dim");
  }
  return torch::cat(parts, 1);
}

torch::Tensor DenoiserImpl::forward(const DenoiserInput& input) {
  auto x = assemble_input(input);
  torch::Tensor temb;
  if (config_.uses_timestep()) {
    if (!input.timesteps.defined() || input.timesteps.size(0) != x.size(0))
      throw std::invalid_argument("denoiser: timesteps must be [B]");
    temb = time_fc2_(torch::silu(time_fc1_(timestep_features(input.timesteps, config_.base_channels).to(x.dtype()))));
  }
  const EmbeddingSet* z = input.context;

  std::vector<torch::Tensor> skips;
  auto h = conv_in_(x);
  skips.push_back(h);
  for (std::size_t i = 0; i < down_->size(); ++i) {
    if (down_kind_[i] == "res")
      h = down_[i]->as<ResBlock>()->forward(h, temb);
    else
      h = down_[i]->as<torch::nn::Conv2d>()->forward(h);
    skips.push_back(h);
  }

  h = mid1_(h, temb);
  h = mid_self_(h);
  if (mid_cross_) h = mid_cross_(h, *z);
  h = mid2_(h, temb);

  for (auto& stage : up_) {
    h = stage.block(torch::cat({h, skips.back()}, 1), temb);
    skips.pop_back();
    if (stage.self_attn) h = stage.self_attn(h);
    if (stage.cross_attn) h = stage.cross_attn(h, *z);
    if (stage.upsample) {
      h = torch::upsample_nearest2d(h, std::vector<int64_t>{h.size(2) * 2, h.size(3) * 2});
      h = stage.upsample(h);
    }
  }
  auto out = conv_out_(torch::silu(out_norm_(h)));
  if (!torch::isfinite(out).all().item<bool>()) throw std::runtime_error("denoiser: non-finite activations in output");
  return out;
}

Denoiser make_denoiser(const DenoiserConfig& config, std::uint64_t init_seed) {
  torch::manual_seed(init_seed);
  return Denoiser(config);
}

}  // namespace efdiff
