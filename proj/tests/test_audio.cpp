#include <cmath>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "vividforge/audio.hpp"
#include "vividforge/error.hpp"

using namespace vividforge;
using namespace vividforge::testutil;

namespace {

constexpr double kTau = 6.283185307179586476925287;

std::vector<double> tone(double hz, double seconds, double amp = 0.5) {
  std::vector<double> s(size_t(16000 * seconds));
  for (size_t i = 0; i < s.size(); ++i) {
    s[i] = amp * std::sin(kTau * hz * double(i) / 16000.0);
  }
  return s;
}

std::vector<double> noise(Rng& rng, int64_t n, double amp = 0.3) {
  std::vector<double> s(static_cast<size_t>(n));
  for (double& v : s) v = amp * rng.next_gaussian();
  return s;
}

// Reference log-mel pipeline built on a naive O(N^2) DFT, written from the
// documented definition: hop = sr/fps frames, periodic Hann, power spectrum,
// triangular unit-peak filters on mel-spaced edges, log1p.
Tensor oracle_energies(const std::vector<double>& samples, int64_t fps = 25,
                       int64_t window = 1024, int64_t mel_bins = 32) {
  const int64_t sr = 16000;
  int64_t hop = sr / fps;
  int64_t frames = int64_t(samples.size()) / hop;
  int64_t nbins = window / 2 + 1;

  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto unmel = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  double top = mel(double(sr) / 2.0);
  std::vector<double> edge_bins(size_t(mel_bins + 2));
  for (int64_t i = 0; i < mel_bins + 2; ++i) {
    double hz = unmel(top * double(i) / double(mel_bins + 1));
    edge_bins[size_t(i)] = hz * double(window) / double(sr);
  }

  Tensor out = Tensor::zeros({frames, mel_bins});
  for (int64_t t = 0; t < frames; ++t) {
    std::vector<double> x(static_cast<size_t>(window));
    for (int64_t i = 0; i < window; ++i) {
      int64_t s = t * hop + i;
      double v = s < int64_t(samples.size()) ? samples[size_t(s)] : 0.0;
      double w = 0.5 - 0.5 * std::cos(kTau * double(i) / double(window));
      x[size_t(i)] = v * w;
    }
    for (int64_t b = 0; b < nbins; ++b) {
      double re = 0.0, im = 0.0;
      for (int64_t n = 0; n < window; ++n) {
        double ang = -kTau * double(b) * double(n) / double(window);
        re += x[size_t(n)] * std::cos(ang);
        im += x[size_t(n)] * std::sin(ang);
      }
      double p = re * re + im * im;
      for (int64_t m = 0; m < mel_bins; ++m) {
        double lo = edge_bins[size_t(m)], mid = edge_bins[size_t(m + 1)],
               hi = edge_bins[size_t(m + 2)];
        double rising = (double(b) - lo) / (mid - lo);
        double falling = (hi - double(b)) / (hi - mid);
        double wgt = std::max(0.0, std::min(rising, falling));
        out.at2(t, m) += wgt * p;
      }
    }
    for (int64_t m = 0; m < mel_bins; ++m) {
      out.at2(t, m) = std::log1p(out.at2(t, m));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("fft matches a naive dft") {
  Rng rng(11, "audio.fft");
  std::vector<double> re(16), im(16), re0(16), im0(16);
  for (int i = 0; i < 16; ++i) {
    re[size_t(i)] = re0[size_t(i)] = rng.next_gaussian();
    im[size_t(i)] = im0[size_t(i)] = rng.next_gaussian();
  }
  fft_radix2(re, im);
  for (int k = 0; k < 16; ++k) {
    double wr = 0.0, wi = 0.0;
    for (int n = 0; n < 16; ++n) {
      double ang = -kTau * double(k) * double(n) / 16.0;
      double c = std::cos(ang), s = std::sin(ang);
      wr += re0[size_t(n)] * c - im0[size_t(n)] * s;
      wi += re0[size_t(n)] * s + im0[size_t(n)] * c;
    }
    CHECK(re[size_t(k)] == doctest::Approx(wr).epsilon(1e-12));
    CHECK(im[size_t(k)] == doctest::Approx(wi).epsilon(1e-12));
  }
  std::vector<double> odd(12, 0.0);
  CHECK_THROWS_AS(fft_radix2(odd, odd), DataError);
}

TEST_CASE("filterbank energies match the naive reference") {
  Rng rng(22, "audio.oracle");
  std::vector<double> s = noise(rng, 16000 * 6 / 10);  // 0.6 s, 15 frames
  for (size_t i = 0; i < s.size(); ++i) {
    s[i] += 0.4 * std::sin(kTau * 300.0 * double(i) / 16000.0);
  }
  Tensor fast = filterbank_energies(s, 16000);
  Tensor ref = oracle_energies(s);
  REQUIRE(fast.shape == ref.shape);
  REQUIRE(fast.dim(0) == 15);
  for (int64_t i = 0; i < fast.numel(); ++i) {
    CHECK(fast[i] == doctest::Approx(ref[i]).epsilon(1e-9));
  }
}

TEST_CASE("a pure tone lands in the filter that covers its frequency") {
  std::vector<double> s = tone(440.0, 0.8);
  Tensor e = filterbank_energies(s, 16000);

  // Independently locate the filter with the strongest response at 440 Hz.
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto unmel = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  double top = mel(8000.0);
  double fb = 440.0 * 1024.0 / 16000.0;
  int64_t best = -1;
  double best_w = 0.0;
  for (int64_t m = 0; m < 32; ++m) {
    double lo = unmel(top * double(m) / 33.0) * 1024.0 / 16000.0;
    double mid = unmel(top * double(m + 1) / 33.0) * 1024.0 / 16000.0;
    double hi = unmel(top * double(m + 2) / 33.0) * 1024.0 / 16000.0;
    double w = std::max(0.0, std::min((fb - lo) / (mid - lo), (hi - fb) / (hi - mid)));
    if (w > best_w) {
      best_w = w;
      best = m;
    }
  }
  REQUIRE(best >= 0);
  CHECK(best == 5);  // where 440 Hz falls with 32 filters over 0..8 kHz

  // Skip the last frame: its window hangs past the signal end.
  for (int64_t t = 0; t + 1 < e.dim(0); ++t) {
    int64_t argmax = 0;
    for (int64_t m = 1; m < 32; ++m) {
      if (e.at2(t, m) > e.at2(t, argmax)) argmax = m;
    }
    CHECK(argmax == best);
  }
}

TEST_CASE("frame count is floor(samples/hop); short clips are rejected") {
  std::vector<double> s(16000, 0.01);
  CHECK(filterbank_energies(s, 16000).dim(0) == 25);
  s.resize(16639);
  CHECK(filterbank_energies(s, 16000).dim(0) == 25);
  s.resize(640);
  CHECK(filterbank_energies(s, 16000).dim(0) == 1);
  s.resize(639);
  CHECK_THROWS_AS(filterbank_energies(s, 16000), DataError);
}

TEST_CASE("non-16k rates and bad parameters are rejected") {
  std::vector<double> s(8000, 0.0);
  CHECK_THROWS_AS(filterbank_energies(s, 8000), DataError);
  std::vector<double> t(16000, 0.0);
  CHECK_THROWS_AS(filterbank_energies(t, 16000, 23), DataError);   // 16000 % 23
  CHECK_THROWS_AS(filterbank_energies(t, 16000, 25, 1000), DataError);
}

TEST_CASE("shifting audio by one hop shifts the frames bit for bit") {
  Rng rng(33, "audio.shift");
  std::vector<double> s = noise(rng, 16000);
  std::vector<double> shifted(640, 0.0);
  shifted.insert(shifted.end(), s.begin(), s.end());
  Tensor a = filterbank_energies(s, 16000);
  Tensor b = filterbank_energies(shifted, 16000);
  REQUIRE(b.dim(0) == a.dim(0) + 1);
  for (int64_t t = 0; t < a.dim(0); ++t) {
    for (int64_t m = 0; m < 32; ++m) {
      CHECK(b.at2(t + 1, m) == a.at2(t, m));
    }
  }
}

TEST_CASE("digital silence standardizes to exact zeros") {
  std::vector<double> s(16000, 0.0);
  Tensor f = extract_features(s, 16000);
  for (int64_t i = 0; i < f.numel(); ++i) CHECK(f[i] == 0.0);
}

TEST_CASE("standardization produces zero mean and unit variance per dim") {
  Rng rng(44, "audio.norm");
  std::vector<double> s = noise(rng, 16000 * 2);
  Tensor f = extract_features(s, 16000);
  int64_t frames = f.dim(0);
  for (int64_t m = 0; m < 32; ++m) {
    double mean = 0.0;
    for (int64_t t = 0; t < frames; ++t) mean += f.at2(t, m);
    mean /= double(frames);
    double var = 0.0;
    for (int64_t t = 0; t < frames; ++t) {
      double d = f.at2(t, m) - mean;
      var += d * d;
    }
    var /= double(frames);
    CHECK(std::fabs(mean) < 1e-10);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-8));
  }
}

TEST_CASE("feature extraction is deterministic") {
  Rng rng(55, "audio.det");
  std::vector<double> s = noise(rng, 16000);
  Tensor a = extract_features(s, 16000);
  Tensor b = extract_features(s, 16000);
  CHECK(bits_equal(a, b));
}

TEST_CASE("wav files round trip within quantization error") {
  Rng rng(66, "audio.wav");
  AudioClip clip;
  clip.sample_rate = 16000;
  clip.samples.resize(3210);
  for (double& v : clip.samples) v = rng.next_uniform(-0.95, 0.95);
  std::string dir = scratch_dir("audio");
  write_wav(dir + "/clip.wav", clip);
  AudioClip back = read_wav(dir + "/clip.wav");
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == clip.samples.size());
  for (size_t i = 0; i < clip.samples.size(); ++i) {
    CHECK(std::fabs(back.samples[i] - clip.samples[i]) < 1e-4);
  }
}

TEST_CASE("malformed wav files are rejected") {
  std::string dir = scratch_dir("audio_bad");

  auto write_bytes = [&](const std::string& name, const std::string& bytes) {
    std::ofstream f(dir + "/" + name, std::ios::binary);
    f << bytes;
    return dir + "/" + name;
  };

  CHECK_THROWS_AS(read_wav(dir + "/missing.wav"), DataError);
  CHECK_THROWS_AS(read_wav(write_bytes("junk.wav", "this is not audio data")),
                  DataError);

  // Stereo header: patch a valid file's channel count.
  AudioClip clip;
  clip.sample_rate = 16000;
  clip.samples.assign(100, 0.25);
  write_wav(dir + "/mono.wav", clip);
  std::ifstream in(dir + "/mono.wav", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  std::string stereo = bytes;
  stereo[22] = 2;  // fmt channel count
  CHECK_THROWS_AS(read_wav(write_bytes("stereo.wav", stereo)), DataError);
  std::string eight = bytes;
  eight[34] = 8;  // bits per sample
  CHECK_THROWS_AS(read_wav(write_bytes("eight.wav", eight)), DataError);
  std::string truncated = bytes.substr(0, bytes.size() - 10);
  CHECK_THROWS_AS(read_wav(write_bytes("short.wav", truncated)), DataError);
}

TEST_CASE("feature files round trip and validate shape") {
  Rng rng(77, "audio.io");
  Tensor f = randn(rng, {10, 32});
  std::string dir = scratch_dir("audio_feat");
  save_features(dir + "/f.tnsr", f);
  Tensor back = load_features(dir + "/f.tnsr", 32);
  CHECK(bits_equal(back, f));
  CHECK_THROWS_AS(load_features(dir + "/f.tnsr", 64), DataError);
  CHECK_THROWS_AS(save_features(dir + "/bad.tnsr", Tensor::zeros({4})), DataError);
}
