#include "efdiff/tensor_file.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace efdiff {

static_assert(std::endian::native == std::endian::little, "container format assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'F', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;

std::uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    default: throw std::invalid_argument("tensor container: unsupported dtype");
  }
}

torch::ScalarType dtype_from_code(std::uint8_t c) {
  switch (c) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    default: throw std::runtime_error("tensor container: unknown dtype code");
  }
}

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("tensor container: truncated file");
  return v;
}

template <typename Fn>
void atomic_write(const std::string& path, Fn&& body) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".partial";
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
      body(out);
      out.flush();
      if (!out) throw std::runtime_error("write failed: " + tmp);
    }
    fs::rename(tmp, target);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

}  // namespace

void save_tensors(const std::string& path, const TensorMap& tensors) {
  atomic_write(path, [&](std::ostream& out) {
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, tensors.size());
    for (const auto& [name, tensor] : tensors) {
      auto t = tensor.detach().contiguous().cpu();
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(out, dtype_code(t.scalar_type()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
      for (auto d : t.sizes()) put<std::int64_t>(out, d);
      const std::uint64_t nbytes = t.numel() * t.element_size();
      put<std::uint64_t>(out, nbytes);
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    }
  });
}

TensorMap load_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open tensor container: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != std::string_view(kMagic, 4))
    throw std::runtime_error("not a tensor container: " + path);
  if (get<std::uint32_t>(in) != kVersion) throw std::runtime_error("unsupported container version: " + path);
  const auto count = get<std::uint64_t>(in);
  TensorMap out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto dtype = dtype_from_code(get<std::uint8_t>(in));
    const auto ndim = get<std::uint32_t>(in);
    std::vector<std::int64_t> dims(ndim);
    for (auto& d : dims) d = get<std::int64_t>(in);
    const auto nbytes = get<std::uint64_t>(in);
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    if (nbytes != static_cast<std::uint64_t>(t.numel() * t.element_size()))
      throw std::runtime_error("tensor container: payload size mismatch for " + name);
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw std::runtime_error("tensor container: truncated payload for " + name);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

void write_json(const std::string& path, const nlohmann::json& doc) {
  write_text(path, doc.dump(2) + "\n");
}

void write_text(const std::string& path, const std::string& text) {
  atomic_write(path, [&](std::ostream& out) { out << text; });
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open json: " + path);
  return nlohmann::json::parse(in);
}

}  // namespace efdiff
