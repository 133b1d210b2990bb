#include "vividforge/tnsr_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "vividforge/error.hpp"

namespace vividforge {

namespace {

void put_u16(std::string& out, uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t, bool as_f32) {
  if (t.shape.empty() || t.shape.size() > 8) {
    throw DataError("tensor rank must be 1..8 to serialize, got " + t.shape_str());
  }
  std::string buf;
  buf.reserve(16 + t.shape.size() * 8 + size_t(t.numel()) * (as_f32 ? 4 : 8));
  buf += "TNSR";
  put_u16(buf, 1);
  buf.push_back(as_f32 ? char(0) : char(1));
  buf.push_back(char(t.shape.size()));
  for (int64_t d : t.shape) put_u64(buf, uint64_t(d));
  if (as_f32) {
    for (double v : t.data) {
      float f = float(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int i = 0; i < 4; ++i) buf.push_back(char((bits >> (8 * i)) & 0xff));
    }
  } else {
    for (double v : t.data) {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64(buf, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw DataError("short write: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open tensor file: " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (raw.size() < 8) throw DataError("tensor file truncated: " + path);
  if (std::memcmp(raw.data(), "TNSR", 4) != 0) {
    throw DataError("bad magic in tensor file: " + path);
  }
  uint16_t version = uint16_t(raw[4]) | (uint16_t(raw[5]) << 8);
  if (version != 1) {
    throw DataError("unsupported tensor format version " +
                    std::to_string(version) + " in " + path);
  }
  unsigned dtype = raw[6];
  if (dtype > 1) throw DataError("unknown dtype in tensor file: " + path);
  unsigned ndim = raw[7];
  if (ndim < 1 || ndim > 8) {
    throw DataError("bad rank " + std::to_string(ndim) + " in " + path);
  }
  size_t off = 8;
  if (raw.size() < off + size_t(ndim) * 8) {
    throw DataError("tensor file truncated in dims: " + path);
  }
  std::vector<int64_t> shape(ndim);
  uint64_t numel = 1;
  for (unsigned i = 0; i < ndim; ++i) {
    uint64_t d = get_u64(raw.data() + off);
    off += 8;
    if (d == 0 || d > (uint64_t(1) << 40)) {
      throw DataError("bad dimension " + std::to_string(d) + " in " + path);
    }
    if (numel > (uint64_t(1) << 40) / d) {
      throw DataError("dimension overflow in " + path);
    }
    numel *= d;
    shape[i] = int64_t(d);
  }
  size_t width = dtype == 0 ? 4 : 8;
  if (raw.size() != off + size_t(numel) * width) {
    throw DataError("payload size mismatch in " + path + ": expected " +
                    std::to_string(off + size_t(numel) * width) + " bytes, file has " +
                    std::to_string(raw.size()));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data.resize(size_t(numel));
  const unsigned char* p = raw.data() + off;
  if (dtype == 0) {
    for (uint64_t i = 0; i < numel; ++i, p += 4) {
      uint32_t bits = uint32_t(p[0]) | (uint32_t(p[1]) << 8) |
                      (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
      float fv;
      std::memcpy(&fv, &bits, 4);
      t.data[size_t(i)] = double(fv);
    }
  } else {
    for (uint64_t i = 0; i < numel; ++i, p += 8) {
      uint64_t bits = get_u64(p);
      double dv;
      std::memcpy(&dv, &bits, 8);
      t.data[size_t(i)] = dv;
    }
  }
  return t;
}

}  // namespace vividforge
