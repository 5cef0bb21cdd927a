#include "efdiff/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>

#include <png.h>

namespace efdiff {

namespace {

Rgb lerp(Rgb a, Rgb b, double t) {
  auto mix = [t](std::uint8_t x, std::uint8_t y) {
    return static_cast<std::uint8_t>(std::lround(x + (static_cast<double>(y) - x) * t));
  };
  return {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
}

Rgb ramp(const std::vector<Rgb>& stops, double t) {
  t = std::clamp(t, 0.0, 1.0) * static_cast<double>(stops.size() - 1);
  const auto i = std::min(static_cast<std::size_t>(t), stops.size() - 2);
  return lerp(stops[i], stops[i + 1], t - static_cast<double>(i));
}

}  // namespace

Rgb colormap(Colormap map, double t) {
  if (!std::isfinite(t)) return {255, 0, 255};
  switch (map) {
    case Colormap::Gray: return ramp({{0, 0, 0}, {255, 255, 255}}, t);
    case Colormap::Heat: return ramp({{0, 0, 4}, {87, 16, 110}, {188, 55, 84}, {249, 142, 9}, {252, 255, 164}}, t);
    case Colormap::Diverging: return ramp({{178, 24, 43}, {247, 247, 247}, {33, 102, 172}}, t);
  }
  return {};
}

Canvas::Canvas(int width, int height, Rgb background)
    : width_(width), height_(height), pixels_(static_cast<std::size_t>(width) * height, background) {
  if (width < 1 || height < 1) throw std::invalid_argument("Canvas: empty size");
}

void Canvas::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
  pixels_[static_cast<std::size_t>(y) * width_ + x] = c;
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
}

void Canvas::line(int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

Canvas render_field(const Field& field, double lo, double hi, Colormap map, int zoom) {
  if (field.empty()) throw std::invalid_argument("render_field: empty field");
  if (!(hi > lo)) hi = lo + 1.0;
  Canvas canvas(field.width() * zoom, field.height() * zoom);
  for (int r = 0; r < field.height(); ++r)
    for (int c = 0; c < field.width(); ++c)
      canvas.fill_rect(c * zoom, r * zoom, c * zoom + zoom - 1, r * zoom + zoom - 1,
                       colormap(map, (field(r, c) - lo) / (hi - lo)));
  return canvas;
}

void write_png(const std::string& path, const Canvas& canvas) {
  const std::string partial = path + ".partial";
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(partial.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("write_png: cannot open " + partial);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fp.reset();
    std::filesystem::remove(partial);
    throw std::runtime_error("write_png: encoding failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, canvas.width(), canvas.height(), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(canvas.width()) * 3);
  for (int y = 0; y < canvas.height(); ++y) {
    for (int x = 0; x < canvas.width(); ++x) {
      const Rgb p = canvas.at(x, y);
      row[3 * x] = p.r;
      row[3 * x + 1] = p.g;
      row[3 * x + 2] = p.b;
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  fp.reset();
  std::filesystem::rename(partial, path);
}

}  // namespace efdiff
