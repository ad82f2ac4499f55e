#include "cylseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>

namespace cylseg {

namespace {

constexpr char kMagic[8] = {'C', 'Y', 'L', 'S', 'E', 'G', 'T', '1'};

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) {
    throw FormatError("tensor file truncated");
  }
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
  return v;
}

std::string get_bytes(std::istream& in, std::size_t n) {
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError("tensor file truncated");
  }
  return s;
}

}  // namespace

void write_tensor_file(std::ostream& out, const TensorFile& file) {
  out.write(kMagic, sizeof(kMagic));
  put_le<uint32_t>(out, static_cast<uint32_t>(file.header.size()));
  out.write(file.header.data(), static_cast<std::streamsize>(file.header.size()));
  put_le<uint32_t>(out, static_cast<uint32_t>(file.tensors.size()));
  for (const auto& [name, t] : file.tensors) {
    const std::size_t n = std::accumulate(t.shape.begin(), t.shape.end(), std::size_t{1},
                                          std::multiplies<>());
    if (n != t.values.size()) throw ShapeError("tensor " + name + " shape/value mismatch");
    put_le<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_le<uint64_t>(out, d);
    for (double v : t.values) put_le<uint64_t>(out, std::bit_cast<uint64_t>(v));
  }
  if (!out) throw Error("failed writing tensor file");
}

TensorFile read_tensor_file(std::istream& in) {
  const std::string magic = get_bytes(in, sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a tensor file (bad magic)");
  }
  TensorFile file;
  file.header = get_bytes(in, get_le<uint32_t>(in));
  const uint32_t count = get_le<uint32_t>(in);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = get_bytes(in, get_le<uint32_t>(in));
    const uint32_t ndim = get_le<uint32_t>(in);
    if (ndim > 8) throw FormatError("tensor " + name + " has too many dimensions");
    std::vector<std::size_t> shape(ndim);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(get_le<uint64_t>(in));
      if (d > (std::size_t{1} << 32)) throw FormatError("implausible tensor dimension");
      n *= d;
    }
    Tensor t;
    t.shape = std::move(shape);
    t.values.resize(n);
    for (double& v : t.values) v = std::bit_cast<double>(get_le<uint64_t>(in));
    if (!file.tensors.emplace(std::move(name), std::move(t)).second) {
      throw FormatError("duplicate tensor name");
    }
  }
  return file;
}

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing " + path.string());
  write_tensor_file(out, file);
}

TensorFile load_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_tensor_file(in);
}

}  // namespace cylseg
