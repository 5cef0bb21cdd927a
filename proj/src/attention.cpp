#include "efdiff/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace efdiff {

AttentionOutput multi_head_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, int heads,
                                     bool keep_weights) {
  if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3) throw std::invalid_argument("attention: expected [B, N, C] inputs");
  const auto B = q.size(0), Nq = q.size(1), C = q.size(2), Nk = k.size(1);
  if (k.size(2) != C || v.size(2) != C || v.size(1) != Nk || k.size(0) != B || v.size(0) != B)
    throw std::invalid_argument("attention: query/key/value widths disagree");
  if (heads < 1 || C % heads != 0)
    throw std::invalid_argument("attention: head dimension C/heads is not integral (C=" + std::to_string(C) +
                                ", heads=" + std::to_string(heads) + ")");
  const auto dh = C / heads;
  auto split = [&](const torch::Tensor& t, std::int64_t n) { return t.reshape({B, n, heads, dh}).permute({0, 2, 1, 3}); };
  auto qh = split(q, Nq), kh = split(k, Nk), vh = split(v, Nk);
  auto logits = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  auto weights = torch::softmax(logits, -1);
  auto out = torch::matmul(weights, vh).permute({0, 2, 1, 3}).reshape({B, Nq, C});
  AttentionOutput r;
  r.values = out;
  if (keep_weights) r.weights = weights;
  return r;
}

torch::Tensor sincos_position_2d(int h, int w, int dim) {
  if (dim % 4 != 0) throw std::invalid_argument("sincos_position_2d: dim must be divisible by 4");
  const int quarter = dim / 4;
  auto table = torch::empty({h * w, dim}, torch::kFloat32);
  auto acc = table.accessor<float, 2>();
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const int row = r * w + c;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
        acc[row][k] = static_cast<float>(std::sin(r * omega));
        acc[row][quarter + k] = static_cast<float>(std::cos(r * omega));
        acc[row][2 * quarter + k] = static_cast<float>(std::sin(c * omega));
        acc[row][3 * quarter + k] = static_cast<float>(std::cos(c * omega));
      }
    }
  return table;
}

torch::Tensor normalized_position_2d(int h, int w, int dim, double max_frequency) {
  if (dim % 4 != 0) throw std::invalid_argument("normalized_position_2d: dim must be divisible by 4");
  const int quarter = dim / 4;
  auto table = torch::empty({h * w, dim}, torch::kFloat32);
  auto acc = table.accessor<float, 2>();
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double u = (r + 0.5) / h, v = (c + 0.5) / w;
      const int row = r * w + c;
      for (int k = 0; k < quarter; ++k) {
        const double f = quarter == 1 ? 1.0 : std::pow(max_frequency, static_cast<double>(k) / (quarter - 1));
        const double omega = M_PI * f;
        acc[row][k] = static_cast<float>(std::sin(u * omega));
        acc[row][quarter + k] = static_cast<float>(std::cos(u * omega));
        acc[row][2 * quarter + k] = static_cast<float>(std::sin(v * omega));
        acc[row][3 * quarter + k] = static_cast<float>(std::cos(v * omega));
      }
    }
  return table;
}

SelfAttention2dImpl::SelfAttention2dImpl(int channels, int heads, int groups) : heads_(heads) {
  if (channels % heads != 0) throw std::invalid_argument("self-attention: channels not divisible by heads");
  norm_ = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels)));
  qkv_ = register_module("qkv", torch::nn::Linear(channels, 3 * channels));
  proj_ = register_module("proj", torch::nn::Linear(channels, channels));
}

torch::Tensor SelfAttention2dImpl::forward(const torch::Tensor& x) {
  const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  auto h = norm_(x).flatten(2).transpose(1, 2);  // [B, HW, C]
  auto qkv = qkv_(h).chunk(3, -1);
  auto out = multi_head_attention(qkv[0], qkv[1], qkv[2], heads_).values;
  out = proj_(out).transpose(1, 2).reshape({B, C, H, W});
  return x + out;
}

CrossAttention2dImpl::CrossAttention2dImpl(int channels, int context_dim, int heads, int position_dim)
    : channels_(channels), heads_(heads), position_dim_(position_dim) {
  if (channels % heads != 0) throw std::invalid_argument("cross-attention: channels not divisible by heads");
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  to_q_ = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(channels, channels).bias(false)));
  to_k_ = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(context_dim, channels).bias(false)));
  to_v_ = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(context_dim, channels).bias(false)));
  to_out_ = register_module("to_out", torch::nn::Linear(channels, channels));
  if (position_dim > 0) {
    pos_q_ = register_module("pos_q", torch::nn::Linear(torch::nn::LinearOptions(position_dim, channels).bias(false)));
    pos_k_ = register_module("pos_k", torch::nn::Linear(torch::nn::LinearOptions(position_dim, channels).bias(false)));
  }
}

AttentionOutput CrossAttention2dImpl::attend(const torch::Tensor& features, const EmbeddingSet& context,
                                             bool keep_weights) {
  if (!context.tokens.defined()) throw std::invalid_argument("cross-attention: missing embedding tokens");
  const auto B = features.size(0), H = features.size(2), W = features.size(3);
  if (context.tokens.size(0) != B) throw std::invalid_argument("cross-attention: batch size mismatch with tokens");
  auto f = features.flatten(2).transpose(1, 2);  // [B, HW, C]
  auto q = to_q_(norm_(f));
  auto k = to_k_(context.tokens);
  auto v = to_v_(context.tokens);
  if (position_dim_ > 0) {
    auto opts = features.options();
    q = q + pos_q_(normalized_position_2d(static_cast<int>(H), static_cast<int>(W), position_dim_).to(opts));
    k = k + pos_k_(normalized_position_2d(context.grid_h, context.grid_w, position_dim_).to(opts));
  }
  return multi_head_attention(q, k, v, heads_, keep_weights);
}

torch::Tensor CrossAttention2dImpl::forward(const torch::Tensor& features, const EmbeddingSet& context) {
  const auto B = features.size(0), C = features.size(1), H = features.size(2), W = features.size(3);
  auto out = to_out_(attend(features, context).values);
  return features + out.transpose(1, 2).reshape({B, C, H, W});
}

}  // namespace efdiff
