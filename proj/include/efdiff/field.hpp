#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace efdiff {

// Row-major H x W scalar grid in double precision. Storage on disk and in
// networks is float32; the numeric transforms run in double.
class Field {
 public:
  Field() = default;
  Field(int height, int width, double fill = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * width_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * width_ + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double mean() const;
  bool all_finite() const;
  bool same_shape(const Field& other) const { return height_ == other.height_ && width_ == other.width_; }

  Field crop(int top, int left, int height, int width) const;

  friend bool operator==(const Field&, const Field&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

// C x H x W multiband stack.
class Stack {
 public:
  Stack() = default;
  Stack(int bands, int height, int width, double fill = 0.0);

  int bands() const { return bands_; }
  int height() const { return height_; }
  int width() const { return width_; }

  double& operator()(int b, int r, int c) {
    return data_[(static_cast<std::size_t>(b) * height_ + r) * width_ + c];
  }
  double operator()(int b, int r, int c) const {
    return data_[(static_cast<std::size_t>(b) * height_ + r) * width_ + c];
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  Field band(int b) const;
  void set_band(int b, const Field& f);
  Stack crop(int top, int left, int height, int width) const;

  friend bool operator==(const Stack&, const Stack&) = default;

 private:
  int bands_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

// [H, W] float32 tensor <-> Field.
torch::Tensor to_tensor(const Field& f);
torch::Tensor to_tensor(const Stack& s);
Field field_from_tensor(const torch::Tensor& t);
Stack stack_from_tensor(const torch::Tensor& t);

}  // namespace efdiff
