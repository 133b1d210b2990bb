#include "vividforge/audio.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "vividforge/error.hpp"
#include "vividforge/tnsr_io.hpp"

namespace vividforge {

namespace {

constexpr double kPi = 3.14159265358979323846;

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
         (uint32_t(p[3]) << 24);
}

uint16_t get_u16(const unsigned char* p) {
  return uint16_t(p[0]) | (uint16_t(p[1]) << 8);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

}  // namespace

AudioClip read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open audio file: " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (raw.size() < 12 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
      std::memcmp(raw.data() + 8, "WAVE", 4) != 0) {
    throw DataError("not a RIFF/WAVE file: " + path);
  }
  AudioClip clip;
  int channels = 0, bits = 0;
  bool got_fmt = false, got_data = false;
  size_t off = 12;
  while (off + 8 <= raw.size()) {
    uint32_t len = get_u32(raw.data() + off + 4);
    const unsigned char* body = raw.data() + off + 8;
    if (off + 8 + len > raw.size()) throw DataError("truncated chunk in " + path);
    if (std::memcmp(raw.data() + off, "fmt ", 4) == 0) {
      if (len < 16) throw DataError("bad fmt chunk in " + path);
      uint16_t format = get_u16(body);
      channels = get_u16(body + 2);
      clip.sample_rate = get_u32(body + 4);
      bits = get_u16(body + 14);
      if (format != 1) throw DataError("only PCM wav is supported: " + path);
      got_fmt = true;
    } else if (std::memcmp(raw.data() + off, "data", 4) == 0) {
      if (!got_fmt) throw DataError("data chunk before fmt in " + path);
      if (channels != 1 || bits != 16) {
        throw DataError("expected mono 16-bit PCM in " + path);
      }
      size_t count = len / 2;
      clip.samples.resize(count);
      for (size_t i = 0; i < count; ++i) {
        int16_t s = int16_t(uint16_t(body[i * 2]) | (uint16_t(body[i * 2 + 1]) << 8));
        clip.samples[i] = double(s) / 32768.0;
      }
      got_data = true;
    }
    off += 8 + len + (len & 1);
  }
  if (!got_fmt || !got_data) throw DataError("missing fmt/data chunk in " + path);
  return clip;
}

void write_wav(const std::string& path, const AudioClip& clip) {
  std::string out;
  auto put_u32 = [&](uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
  };
  auto put_u16 = [&](uint16_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
  };
  uint32_t data_len = uint32_t(clip.samples.size() * 2);
  out += "RIFF";
  put_u32(36 + data_len);
  out += "WAVEfmt ";
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(uint32_t(clip.sample_rate));
  put_u32(uint32_t(clip.sample_rate * 2));
  put_u16(2);
  put_u16(16);
  out += "data";
  put_u32(data_len);
  for (double v : clip.samples) {
    double c = std::max(-1.0, std::min(1.0, v));
    int16_t s = int16_t(std::lround(c * 32767.0));
    out.push_back(char(s & 0xff));
    out.push_back(char((s >> 8) & 0xff));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << out;
}

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  size_t n = re.size();
  if (n != im.size() || n == 0 || (n & (n - 1)) != 0) {
    throw DataError("fft: length must be a power of two");
  }
  // Bit-reversal permutation.
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * kPi / double(len);
    double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        double ur = re[i + k], ui = im[i + k];
        double vr = re[i + k + len / 2] * cr - im[i + k + len / 2] * ci;
        double vi = re[i + k + len / 2] * ci + im[i + k + len / 2] * cr;
        re[i + k] = ur + vr;
        im[i + k] = ui + vi;
        re[i + k + len / 2] = ur - vr;
        im[i + k + len / 2] = ui - vi;
        double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

Tensor filterbank_energies(const std::vector<double>& samples,
                           int64_t sample_rate, int64_t fps, int64_t window,
                           int64_t mel_bins) {
  if (sample_rate != 16000) {
    throw DataError("audio features expect 16 kHz input, got " +
                    std::to_string(sample_rate) + " Hz");
  }
  if (fps <= 0 || sample_rate % fps != 0) {
    throw DataError("sample rate must be divisible by fps");
  }
  if (window <= 0 || (window & (window - 1)) != 0) {
    throw DataError("window must be a power of two");
  }
  int64_t hop = sample_rate / fps;
  int64_t frames = int64_t(samples.size()) / hop;
  if (frames < 1) {
    throw DataError("audio too short: need at least " + std::to_string(hop) +
                    " samples, got " + std::to_string(samples.size()));
  }

  // Periodic Hann window.
  std::vector<double> hann(static_cast<size_t>(window));
  for (int64_t i = 0; i < window; ++i) {
    hann[size_t(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * double(i) / double(window));
  }

  // Triangular mel filters over FFT bins 0..window/2.
  int64_t nbins = window / 2 + 1;
  double mel_lo = hz_to_mel(0.0);
  double mel_hi = hz_to_mel(double(sample_rate) / 2.0);
  std::vector<double> edges(static_cast<size_t>(mel_bins + 2));
  for (int64_t i = 0; i < mel_bins + 2; ++i) {
    double mel = mel_lo + (mel_hi - mel_lo) * double(i) / double(mel_bins + 1);
    edges[size_t(i)] = mel_to_hz(mel) * double(window) / double(sample_rate);
  }

  Tensor feats = Tensor::zeros({frames, mel_bins});
  std::vector<double> re(static_cast<size_t>(window)), im(static_cast<size_t>(window));
  for (int64_t t = 0; t < frames; ++t) {
    int64_t start = t * hop;
    for (int64_t i = 0; i < window; ++i) {
      int64_t s = start + i;
      double v = s < int64_t(samples.size()) ? samples[size_t(s)] : 0.0;
      re[size_t(i)] = v * hann[size_t(i)];
      im[size_t(i)] = 0.0;
    }
    fft_radix2(re, im);
    for (int64_t m = 0; m < mel_bins; ++m) {
      double lo = edges[size_t(m)], mid = edges[size_t(m + 1)],
             hi = edges[size_t(m + 2)];
      double energy = 0.0;
      for (int64_t b = 0; b < nbins; ++b) {
        double fb = double(b);
        double wgt = 0.0;
        if (fb > lo && fb < hi) {
          wgt = fb <= mid ? (fb - lo) / (mid - lo) : (hi - fb) / (hi - mid);
        }
        if (wgt > 0.0) {
          double p = re[size_t(b)] * re[size_t(b)] + im[size_t(b)] * im[size_t(b)];
          energy += wgt * p;
        }
      }
      feats.at2(t, m) = std::log1p(energy);
    }
  }
  return feats;
}

Tensor extract_features(const std::vector<double>& samples, int64_t sample_rate,
                        int64_t fps, int64_t window, int64_t mel_bins) {
  Tensor feats = filterbank_energies(samples, sample_rate, fps, window, mel_bins);
  int64_t frames = feats.dim(0);
  for (int64_t m = 0; m < mel_bins; ++m) {
    double mean = 0.0;
    for (int64_t t = 0; t < frames; ++t) mean += feats.at2(t, m);
    mean /= double(frames);
    double var = 0.0;
    for (int64_t t = 0; t < frames; ++t) {
      double d = feats.at2(t, m) - mean;
      var += d * d;
    }
    var /= double(frames);
    double inv = 1.0 / std::sqrt(var + 1e-12);
    for (int64_t t = 0; t < frames; ++t) {
      feats.at2(t, m) = (feats.at2(t, m) - mean) * inv;
    }
  }
  return feats;
}

void save_features(const std::string& path, const Tensor& features) {
  if (features.ndim() != 2) {
    throw DataError("features must be [frames, dims], got " + features.shape_str());
  }
  save_tensor(path, features);
}

Tensor load_features(const std::string& path, int64_t expect_dims) {
  Tensor t = load_tensor(path);
  if (t.ndim() != 2 || t.dim(1) != expect_dims) {
    throw DataError("feature file " + path + " must be [frames," +
                    std::to_string(expect_dims) + "], got " + t.shape_str());
  }
  if (!t.all_finite()) throw DataError("feature file has non-finite values: " + path);
  return t;
}

}  // namespace vividforge
