#include "hyperconv/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace hyperconv {

namespace {

void put_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64_le(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw std::runtime_error("TNSR: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void put_f64_le(std::ostream& os, double d) { put_u64_le(os, std::bit_cast<std::uint64_t>(d)); }

void put_f32_le(std::ostream& os, float f) {
  std::uint32_t v = std::bit_cast<std::uint32_t>(f);
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 4);
}

}  // namespace

void write_tnsr(std::ostream& os, const Tensor& t, TnsrDtype dtype) {
  os.write("TNSR", 4);
  const unsigned char version = 1;
  const unsigned char dt = static_cast<unsigned char>(dtype);
  const unsigned char ndim = static_cast<unsigned char>(t.shape().size());
  os.put(static_cast<char>(version));
  os.put(static_cast<char>(dt));
  os.put(static_cast<char>(ndim));
  for (std::int64_t e : t.shape()) put_u64_le(os, static_cast<std::uint64_t>(e));
  if (dtype == TnsrDtype::F64) {
    for (double v : t.data()) put_f64_le(os, v);
  } else {
    for (double v : t.data()) put_f32_le(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("TNSR: write failed");
}

void write_tnsr_file(const std::string& path, const Tensor& t, TnsrDtype dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("TNSR: cannot open " + path + " for writing");
  write_tnsr(os, t, dtype);
}

Tensor read_tnsr(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TNSR", 4) != 0) throw std::runtime_error("TNSR: bad magic bytes");
  const int version = is.get();
  const int dt = is.get();
  const int ndim = is.get();
  if (!is) throw std::runtime_error("TNSR: truncated header");
  if (version != 1) throw std::runtime_error("TNSR: unsupported version " + std::to_string(version));
  if (dt != 0 && dt != 1) throw std::runtime_error("TNSR: unknown dtype " + std::to_string(dt));
  std::vector<std::int64_t> shape(static_cast<std::size_t>(ndim));
  std::uint64_t numel = 1;
  for (auto& e : shape) {
    std::uint64_t v = get_u64_le(is);
    if (v == 0 || v > (1ull << 40)) throw std::runtime_error("TNSR: implausible extent " + std::to_string(v));
    numel *= v;
    if (numel > (1ull << 40)) throw std::runtime_error("TNSR: implausible element count");
    e = static_cast<std::int64_t>(v);
  }
  std::vector<double> data(numel);
  if (dt == 0) {
    for (auto& v : data) v = std::bit_cast<double>(get_u64_le(is));
  } else {
    for (auto& v : data) {
      unsigned char buf[4];
      is.read(reinterpret_cast<char*>(buf), 4);
      if (!is) throw std::runtime_error("TNSR: truncated payload");
      std::uint32_t u = 0;
      for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
      v = static_cast<double>(std::bit_cast<float>(u));
    }
  }
  if (!is) throw std::runtime_error("TNSR: truncated payload");
  if (shape.empty()) shape = {1};
  return Tensor(std::move(shape), std::move(data));
}

Tensor read_tnsr_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("TNSR: cannot open " + path);
  return read_tnsr(is);
}

}  // namespace hyperconv
