#include "efdiff/encoder.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "efdiff/digest.hpp"
#include "efdiff/tensor_file.hpp"

namespace efdiff {

namespace {

std::string manifest_path(const std::string& weights) {
  return std::filesystem::path(weights).replace_extension(".json").string();
}

}  // namespace

void EncoderConfig::validate() const {
  if (patch < 1 || dim < 4 || depth < 0 || heads < 1 || bands < 1 || mlp_ratio < 1)
    throw std::invalid_argument("encoder config: non-positive size");
  if (dim % heads != 0) throw std::invalid_argument("encoder config: dim not divisible by heads");
  if (dim % 4 != 0) throw std::invalid_argument("encoder config: dim must be divisible by 4");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"patch", patch}, {"dim", dim}, {"depth", depth}, {"heads", heads}, {"bands", bands}, {"mlp_ratio", mlp_ratio}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.patch = j.value("patch", c.patch);
  c.dim = j.value("dim", c.dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.bands = j.value("bands", c.bands);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  return c;
}

torch::Tensor patchify(const torch::Tensor& images, int patch) {
  if (images.dim() != 4) throw std::invalid_argument("patchify: expected [B, C, H, W]");
  const auto B = images.size(0), C = images.size(1), H = images.size(2), W = images.size(3);
  if (H % patch != 0 || W % patch != 0)
    throw std::invalid_argument("patchify: image size not divisible by patch size " + std::to_string(patch));
  const auto gh = H / patch, gw = W / patch;
  return images.reshape({B, C, gh, patch, gw, patch})
      .permute({0, 2, 4, 1, 3, 5})
      .reshape({B, gh * gw, C * patch * patch});
}

torch::Tensor unpatchify(const torch::Tensor& patches, int patch, int bands, int height, int width) {
  const auto B = patches.size(0);
  const int gh = height / patch, gw = width / patch;
  return patches.reshape({B, gh, gw, bands, patch, patch}).permute({0, 3, 1, 4, 2, 5}).reshape({B, bands, height, width});
}

TransformerBlockImpl::TransformerBlockImpl(int dim, int heads, int mlp_ratio) : heads_(heads) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj_ = register_module("proj", torch::nn::Linear(dim, dim));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, mlp_ratio * dim));
  fc2_ = register_module("fc2", torch::nn::Linear(mlp_ratio * dim, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
  auto qkv = qkv_(norm1_(x)).chunk(3, -1);
  auto h = x + proj_(multi_head_attention(qkv[0], qkv[1], qkv[2], heads_).values);
  return h + fc2_(torch::gelu(fc1_(norm2_(h))));
}

ViTEncoderImpl::ViTEncoderImpl(const EncoderConfig& config) : config_(config) {
  config_.validate();
  patch_embed_ =
      register_module("patch_embed", torch::nn::Linear(config.bands * config.patch * config.patch, config.dim));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < config.depth; ++i) blocks_->push_back(TransformerBlock(config.dim, config.heads, config.mlp_ratio));
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.dim})));
}

torch::Tensor ViTEncoderImpl::positions(int grid_h, int grid_w) const {
  return sincos_position_2d(grid_h, grid_w, config_.dim);
}

torch::Tensor ViTEncoderImpl::patch_tokens(const torch::Tensor& images) {
  if (images.size(1) != config_.bands) throw std::invalid_argument("encoder: band count mismatch");
  return patch_embed_(patchify(images, config_.patch));
}

torch::Tensor ViTEncoderImpl::encode_tokens(torch::Tensor tokens) {
  for (const auto& block : *blocks_) tokens = block->as<TransformerBlock>()->forward(tokens);
  return norm_(tokens);
}

EmbeddingSet ViTEncoderImpl::embed(const torch::Tensor& images) {
  std::optional<torch::NoGradGuard> guard;
  if (frozen_) guard.emplace();
  const int gh = static_cast<int>(images.size(2)) / config_.patch;
  const int gw = static_cast<int>(images.size(3)) / config_.patch;
  auto tokens = patch_tokens(images) + positions(gh, gw).to(images.options());
  EmbeddingSet z;
  z.tokens = encode_tokens(tokens);
  z.grid_h = gh;
  z.grid_w = gw;
  if (!torch::isfinite(z.tokens).all().item<bool>()) throw std::runtime_error("encoder: non-finite embeddings");
  return z;
}

torch::Tensor ViTEncoderImpl::forward_visible(const torch::Tensor& images, const torch::Tensor& keep) {
  const int gh = static_cast<int>(images.size(2)) / config_.patch;
  const int gw = static_cast<int>(images.size(3)) / config_.patch;
  auto tokens = patch_tokens(images) + positions(gh, gw).to(images.options());
  auto index = keep.unsqueeze(-1).expand({keep.size(0), keep.size(1), tokens.size(2)});
  return encode_tokens(tokens.gather(1, index));
}

void ViTEncoderImpl::freeze() {
  for (auto& p : parameters()) p.set_requires_grad(false);
  eval();
  frozen_ = true;
}

std::string ViTEncoderImpl::checksum() const {
  Digest d;
  for (const auto& item : named_parameters()) {
    auto t = item.value().detach().contiguous();
    d.update(item.key());
    d.update(std::as_bytes(std::span<const float>(t.data_ptr<float>(), static_cast<std::size_t>(t.numel()))));
  }
  return d.hex();
}

MaeDecoderImpl::MaeDecoderImpl(const EncoderConfig& encoder, int dim, int depth, int heads)
    : encoder_(encoder), dim_(dim) {
  embed_ = register_module("embed", torch::nn::Linear(encoder.dim, dim));
  mask_token_ = register_parameter("mask_token", torch::zeros({1, 1, dim}));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < depth; ++i) blocks_->push_back(TransformerBlock(dim, heads, 4));
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  head_ = register_module("head", torch::nn::Linear(dim, encoder.bands * encoder.patch * encoder.patch));
  torch::nn::init::normal_(mask_token_, 0.0, 0.02);
}

torch::Tensor MaeDecoderImpl::forward(const torch::Tensor& visible, const torch::Tensor& keep, int grid_h, int grid_w) {
  const auto B = visible.size(0);
  const auto N = static_cast<std::int64_t>(grid_h) * grid_w;
  auto v = embed_(visible);
  auto full = mask_token_.expand({B, N, dim_}).clone();
  full = full.scatter(1, keep.unsqueeze(-1).expand({B, keep.size(1), dim_}), v);
  full = full + sincos_position_2d(grid_h, grid_w, dim_).to(full.options());
  for (const auto& block : *blocks_) full = block->as<TransformerBlock>()->forward(full);
  return head_(norm_(full));
}

ViTEncoder make_encoder(const EncoderConfig& config, std::uint64_t init_seed) {
  torch::manual_seed(init_seed);
  return ViTEncoder(config);
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"mask_ratio", mask_ratio}, {"steps", steps}, {"batch", batch},
          {"learning_rate", learning_rate}, {"seed", seed}, {"log_every", log_every}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  return c;
}

int masked_patch_count(int tokens, double mask_ratio) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1)");
  if (tokens < 2) throw std::invalid_argument("masking needs at least two tokens");
  const int n = static_cast<int>(std::lround(mask_ratio * tokens));
  return std::clamp(n, 1, tokens - 1);
}

namespace {

struct MaskedBatch {
  torch::Tensor images;  // [B, C, crop, crop]
  torch::Tensor keep;    // [B, K]
  torch::Tensor masked;  // [B, N] float, 1 on masked patches
};

MaskedBatch draw_batch(const std::vector<Stack>& stacks, int crop, int patch, int batch, double mask_ratio,
                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int bands = stacks.front().bands();
  MaskedBatch mb;
  mb.images = torch::empty({batch, bands, crop, crop});
  std::uniform_int_distribution<std::size_t> pick(0, stacks.size() - 1);
  for (int b = 0; b < batch; ++b) {
    const auto& s = stacks[pick(rng)];
    std::uniform_int_distribution<int> off_r(0, s.height() - crop), off_c(0, s.width() - crop);
    const int top = off_r(rng), left = off_c(rng);
    mb.images[b].copy_(to_tensor(s.crop(top, left, crop, crop)));
  }
  const int grid = (crop / patch) * (crop / patch);
  const int n_mask = masked_patch_count(grid, mask_ratio);
  auto gen = at::detail::createCPUGenerator(mix_seed(seed, 17));
  mb.keep = torch::empty({batch, grid - n_mask}, torch::kInt64);
  mb.masked = torch::ones({batch, grid});
  for (int b = 0; b < batch; ++b) {
    auto perm = torch::randperm(grid, gen, torch::kInt64);
    auto keep = std::get<0>(perm.slice(0, 0, grid - n_mask).sort());
    mb.keep[b].copy_(keep);
    mb.masked[b].index_fill_(0, keep, 0.0);
  }
  return mb;
}

torch::Tensor masked_mse(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& masked) {
  auto per_patch = (pred - target).pow(2).mean(-1);
  return (per_patch * masked).sum() / masked.sum();
}

}  // namespace

PretrainResult mae_pretrain(ViTEncoder& encoder, const std::vector<Stack>& train, const std::vector<Stack>& heldout,
                            int crop, const PretrainConfig& config) {
  if (train.empty()) throw std::invalid_argument("mae_pretrain: empty dataset");
  if (heldout.empty()) throw std::invalid_argument("mae_pretrain: empty held-out set");
  if (encoder->frozen()) throw std::logic_error("mae_pretrain: encoder is frozen");
  const auto& cfg = encoder->config();
  const int patch = cfg.patch;
  if (crop % patch != 0) throw std::invalid_argument("mae_pretrain: crop not divisible by patch size");
  masked_patch_count((crop / patch) * (crop / patch), config.mask_ratio);

  torch::manual_seed(mix_seed(config.seed, 3));
  MaeDecoder decoder(cfg);
  std::vector<torch::Tensor> params = encoder->parameters();
  for (auto& p : decoder->parameters()) params.push_back(p);
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(config.learning_rate).weight_decay(0.05));

  PretrainResult result;
  encoder->train();
  decoder->train();
  const int grid_h = crop / patch, grid_w = crop / patch;
  for (int step = 0; step < config.steps; ++step) {
    auto mb = draw_batch(train, crop, patch, config.batch, config.mask_ratio, mix_seed(config.seed, 100, step));
    auto target = patchify(mb.images, patch);
    auto visible = encoder->forward_visible(mb.images, mb.keep);
    auto pred = decoder->forward(visible, mb.keep, grid_h, grid_w);
    auto loss = masked_mse(pred, target, mb.masked);
    const double value = loss.item<double>();
    if (!std::isfinite(value))
      throw std::runtime_error("mae_pretrain: non-finite loss at step " + std::to_string(step));
    opt.zero_grad();
    loss.backward();
    torch::nn::utils::clip_grad_norm_(params, 1.0);
    opt.step();
    result.losses.push_back(value);
  }

  // Held-out comparison against the per-band mean predictor on identical masks.
  torch::NoGradGuard no_grad;
  encoder->eval();
  decoder->eval();
  const int bands = cfg.bands;
  torch::Tensor band_mean = torch::zeros({bands}, torch::kFloat64);
  double count = 0;
  for (const auto& s : train) {
    auto t = to_tensor(s).to(torch::kFloat64);
    band_mean += t.sum({1, 2});
    count += static_cast<double>(s.height()) * s.width();
  }
  band_mean = (band_mean / count).to(torch::kFloat32);
  auto mean_patch = band_mean.view({bands, 1}).expand({bands, patch * patch}).reshape({-1});

  double model_err = 0.0, base_err = 0.0;
  const int rounds = 8;
  for (int r = 0; r < rounds; ++r) {
    auto mb = draw_batch(heldout, crop, patch, config.batch, config.mask_ratio, mix_seed(config.seed, 900, r));
    auto target = patchify(mb.images, patch);
    auto pred = decoder->forward(encoder->forward_visible(mb.images, mb.keep), mb.keep, grid_h, grid_w);
    model_err += masked_mse(pred, target, mb.masked).item<double>();
    base_err += masked_mse(mean_patch.expand_as(target), target, mb.masked).item<double>();
  }
  result.heldout_masked_mse = model_err / rounds;
  result.heldout_mean_baseline = base_err / rounds;
  encoder->train();
  return result;
}

void save_encoder(const std::string& path, ViTEncoder& encoder, const nlohmann::json& extra) {
  TensorMap tensors;
  for (const auto& item : encoder->named_parameters()) tensors.emplace("encoder/" + item.key(), item.value());
  save_tensors(path, tensors);
  nlohmann::json manifest = {{"config", encoder->config().to_json()},
                             {"frozen", encoder->frozen()},
                             {"checksum", encoder->checksum()},
                             {"weights_digest", file_digest(path)}};
  if (!extra.is_null())
    for (auto& [k, v] : extra.items()) manifest[k] = v;
  write_json(manifest_path(path), manifest);
}

ViTEncoder load_encoder(const std::string& path, const EncoderConfig& expected) {
  auto manifest = read_json(manifest_path(path));
  auto stored = EncoderConfig::from_json(manifest.at("config"));
  if (!(stored == expected)) throw std::invalid_argument("load_encoder: stored config does not match expected config");
  auto tensors = load_tensors(path);
  ViTEncoder enc(expected);
  torch::NoGradGuard no_grad;
  for (auto& item : enc->named_parameters()) {
    auto it = tensors.find("encoder/" + item.key());
    if (it == tensors.end()) throw std::invalid_argument("load_encoder: missing tensor " + item.key());
    if (!it->second.sizes().equals(item.value().sizes()))
      throw std::invalid_argument("load_encoder: shape mismatch for " + item.key());
    item.value().copy_(it->second);
  }
  if (manifest.value("frozen", false)) enc->freeze();
  return enc;
}

ViTEncoder load_encoder(const std::string& path) {
  auto manifest = read_json(manifest_path(path));
  return load_encoder(path, EncoderConfig::from_json(manifest.at("config")));
}

}  // namespace efdiff
