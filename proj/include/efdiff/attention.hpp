#pragma once

#include <torch/torch.h>

namespace efdiff {

struct AttentionOutput {
  torch::Tensor values;   // [B, Nq, C]
  torch::Tensor weights;  // [B, heads, Nq, Nk], only when requested
};

/// Scaled dot-product attention split over heads along the channel axis:
/// softmax(Q K^T / sqrt(d_h)) V with d_h = C / heads.
/// q: [B, Nq, C], k and v: [B, Nk, C].
AttentionOutput multi_head_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, int heads,
                                     bool keep_weights = false);

/// MAE-style fixed 2-D sin/cos table on an integer grid, [h*w, dim], row-major.
/// First half of the channels encodes the row, second half the column.
torch::Tensor sincos_position_2d(int h, int w, int dim);

/// Sin/cos of normalised cell-centre coordinates in [0,1), [h*w, dim].
/// Grids of different resolution covering the same extent get matching codes
/// at co-located cells.
torch::Tensor normalized_position_2d(int h, int w, int dim, double max_frequency = 16.0);

/// Frozen-encoder tokens with their patch grid.
struct EmbeddingSet {
  torch::Tensor tokens;  // [B, N, d]
  int grid_h = 0;
  int grid_w = 0;
};

/// Multi-head self-attention over the spatial positions of a feature map,
/// GroupNorm on the input and a residual connection.
class SelfAttention2dImpl : public torch::nn::Module {
 public:
  SelfAttention2dImpl(int channels, int heads, int groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int heads_;
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(SelfAttention2d);

/// Cross-attention: queries from the flattened positions of a feature map F,
/// keys and values from embedding tokens Z; output projected and added to F.
/// With position_dim > 0 a learned projection of co-located 2-D position
/// codes is added to both queries and keys.
class CrossAttention2dImpl : public torch::nn::Module {
 public:
  CrossAttention2dImpl(int channels, int context_dim, int heads, int position_dim = 32);

  torch::Tensor forward(const torch::Tensor& features, const EmbeddingSet& context);
  /// Attention output before the output projection, [B, H'W', C].
  AttentionOutput attend(const torch::Tensor& features, const EmbeddingSet& context, bool keep_weights = false);

  torch::nn::Linear& out_projection() { return to_out_; }
  int heads() const { return heads_; }

 private:
  int channels_, heads_, position_dim_;
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear to_q_{nullptr}, to_k_{nullptr}, to_v_{nullptr}, to_out_{nullptr};
  torch::nn::Linear pos_q_{nullptr}, pos_k_{nullptr};
};
TORCH_MODULE(CrossAttention2d);

}  // namespace efdiff
