#include "vividforge/png_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "vividforge/error.hpp"

namespace vividforge {

namespace {

void put_u32be(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back((v >> 24) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back(v & 0xff);
}

uint32_t get_u32be(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_chunk(std::vector<unsigned char>& out, const char type[4],
                  const std::vector<unsigned char>& payload) {
  put_u32be(out, uint32_t(payload.size()));
  size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uint32_t crc = uint32_t(
      crc32(0, out.data() + crc_start, uInt(out.size() - crc_start)));
  put_u32be(out, crc);
}

unsigned char quantize(double v) {
  if (v < 0.0) v = 0.0;
  if (v > 1.0) v = 1.0;
  return (unsigned char)(std::lround(v * 255.0));
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const Tensor& img) {
  int channels;
  if (img.ndim() == 3 && img.dim(2) == 3) {
    channels = 3;
  } else if (img.ndim() == 2) {
    channels = 1;
  } else {
    throw DataError("write_png expects [H,W,3] or [H,W], got " + img.shape_str());
  }
  int64_t h = img.dim(0), w = img.dim(1);
  std::vector<unsigned char> scan(size_t(h * (w * channels + 1)));
  size_t si = 0;
  for (int64_t y = 0; y < h; ++y) {
    scan[si++] = 0;  // filter type 0 for every row
    for (int64_t x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        scan[si++] = quantize(img.data[size_t((y * w + x) * channels + c)]);
      }
    }
  }
  uLongf comp_cap = compressBound(uLong(scan.size()));
  std::vector<unsigned char> comp(comp_cap);
  if (compress2(comp.data(), &comp_cap, scan.data(), uLong(scan.size()), 6) != Z_OK) {
    throw DataError("zlib compression failed for " + path);
  }
  comp.resize(comp_cap);

  std::vector<unsigned char> out;
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  out.insert(out.end(), sig, sig + 8);
  std::vector<unsigned char> ihdr;
  put_u32be(ihdr, uint32_t(w));
  put_u32be(ihdr, uint32_t(h));
  ihdr.push_back(8);                          // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);      // color type
  ihdr.push_back(0);                          // compression
  ihdr.push_back(0);                          // filter
  ihdr.push_back(0);                          // interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", comp);
  append_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw DataError("short write: " + path);
}

Tensor read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image: " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (raw.size() < 8 || std::memcmp(raw.data(), sig, 8) != 0) {
    throw DataError("not a PNG file: " + path);
  }
  size_t off = 8;
  int64_t w = 0, h = 0;
  int channels = 0;
  std::vector<unsigned char> idat;
  bool saw_end = false;
  while (off + 8 <= raw.size() && !saw_end) {
    uint32_t len = get_u32be(raw.data() + off);
    if (off + 12 + len > raw.size()) throw DataError("truncated chunk in " + path);
    const unsigned char* type = raw.data() + off + 4;
    const unsigned char* payload = raw.data() + off + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw DataError("bad IHDR in " + path);
      w = get_u32be(payload);
      h = get_u32be(payload + 4);
      int depth = payload[8], color = payload[9], interlace = payload[12];
      if (depth != 8 || (color != 0 && color != 2) || interlace != 0) {
        throw DataError("unsupported PNG variant in " + path);
      }
      channels = color == 2 ? 3 : 1;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
    }
    off += 12 + len;
  }
  if (w <= 0 || h <= 0 || idat.empty()) throw DataError("missing image data in " + path);

  size_t stride = size_t(w) * size_t(channels);
  std::vector<unsigned char> scan(size_t(h) * (stride + 1));
  uLongf scan_len = uLongf(scan.size());
  int rc = uncompress(scan.data(), &scan_len, idat.data(), uLong(idat.size()));
  if (rc != Z_OK || scan_len != scan.size()) {
    throw DataError("PNG inflate failed for " + path);
  }

  // Undo per-row filters in place into `pix`.
  std::vector<unsigned char> pix(size_t(h) * stride);
  int bpp = channels;
  for (int64_t y = 0; y < h; ++y) {
    const unsigned char* src = scan.data() + size_t(y) * (stride + 1);
    unsigned char filter = src[0];
    const unsigned char* row = src + 1;
    unsigned char* dst = pix.data() + size_t(y) * stride;
    const unsigned char* prev = y > 0 ? pix.data() + size_t(y - 1) * stride : nullptr;
    for (size_t x = 0; x < stride; ++x) {
      int a = x >= size_t(bpp) ? dst[x - bpp] : 0;
      int b = prev ? prev[x] : 0;
      int c = (prev && x >= size_t(bpp)) ? prev[x - bpp] : 0;
      int v = row[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw DataError("bad PNG filter byte in " + path);
      }
      dst[x] = (unsigned char)(v & 0xff);
    }
  }

  Tensor img = channels == 3 ? Tensor::zeros({h, w, 3}) : Tensor::zeros({h, w});
  for (size_t i = 0; i < pix.size(); ++i) img.data[i] = double(pix[i]) / 255.0;
  return img;
}

}  // namespace vividforge
