#include "efdiff/field.hpp"

#include <cmath>
#include <stdexcept>

namespace efdiff {

Field::Field(int height, int width, double fill) : height_(height), width_(width) {
  if (height < 0 || width < 0) throw std::invalid_argument("Field: negative shape");
  data_.assign(static_cast<std::size_t>(height) * width, fill);
}

double Field::mean() const {
  if (data_.empty()) throw std::invalid_argument("Field::mean on empty field");
  double s = 0.0;
  for (double v : data_) s += v;
  return s / static_cast<double>(data_.size());
}

bool Field::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Field Field::crop(int top, int left, int height, int width) const {
  if (top < 0 || left < 0 || top + height > height_ || left + width > width_)
    throw std::out_of_range("Field::crop outside source");
  Field out(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) out(r, c) = (*this)(top + r, left + c);
  return out;
}

Stack::Stack(int bands, int height, int width, double fill) : bands_(bands), height_(height), width_(width) {
  if (bands < 0 || height < 0 || width < 0) throw std::invalid_argument("Stack: negative shape");
  data_.assign(static_cast<std::size_t>(bands) * height * width, fill);
}

Field Stack::band(int b) const {
  Field f(height_, width_);
  for (int r = 0; r < height_; ++r)
    for (int c = 0; c < width_; ++c) f(r, c) = (*this)(b, r, c);
  return f;
}

void Stack::set_band(int b, const Field& f) {
  if (f.height() != height_ || f.width() != width_) throw std::invalid_argument("Stack::set_band shape mismatch");
  for (int r = 0; r < height_; ++r)
    for (int c = 0; c < width_; ++c) (*this)(b, r, c) = f(r, c);
}

Stack Stack::crop(int top, int left, int height, int width) const {
  if (top < 0 || left < 0 || top + height > height_ || left + width > width_)
    throw std::out_of_range("Stack::crop outside source");
  Stack out(bands_, height, width);
  for (int b = 0; b < bands_; ++b)
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) out(b, r, c) = (*this)(b, top + r, left + c);
  return out;
}

torch::Tensor to_tensor(const Field& f) {
  auto t = torch::empty({f.height(), f.width()}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  auto v = f.values();
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = static_cast<float>(v[i]);
  return t;
}

torch::Tensor to_tensor(const Stack& s) {
  auto t = torch::empty({s.bands(), s.height(), s.width()}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  auto v = s.values();
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = static_cast<float>(v[i]);
  return t;
}

Field field_from_tensor(const torch::Tensor& t) {
  if (t.dim() != 2) throw std::invalid_argument("field_from_tensor expects [H, W]");
  auto c = t.detach().to(torch::kFloat64).contiguous();
  Field f(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)));
  const double* p = c.data_ptr<double>();
  auto v = f.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i];
  return f;
}

Stack stack_from_tensor(const torch::Tensor& t) {
  if (t.dim() != 3) throw std::invalid_argument("stack_from_tensor expects [C, H, W]");
  auto c = t.detach().to(torch::kFloat64).contiguous();
  Stack s(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), static_cast<int>(c.size(2)));
  const double* p = c.data_ptr<double>();
  auto v = s.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i];
  return s;
}

}  // namespace efdiff
