#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "efdiff/field.hpp"

namespace efdiff {

enum class Colormap { Gray, Heat, Diverging };

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

Rgb colormap(Colormap map, double t);  // t in [0, 1]

class Canvas {
 public:
  Canvas(int width, int height, Rgb background = {255, 255, 255});
  int width() const { return width_; }
  int height() const { return height_; }
  void set(int x, int y, Rgb c);
  Rgb at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);
  void line(int x0, int y0, int x1, int y1, Rgb c);
  const std::vector<Rgb>& pixels() const { return pixels_; }

 private:
  int width_, height_;
  std::vector<Rgb> pixels_;
};

/// Field rendered through a colormap on [lo, hi], each cell upscaled to a
/// zoom x zoom block.
Canvas render_field(const Field& field, double lo, double hi, Colormap map, int zoom = 4);

void write_png(const std::string& path, const Canvas& canvas);

}  // namespace efdiff
