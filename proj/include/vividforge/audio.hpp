#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vividforge/tensor.hpp"

namespace vividforge {

// Mono 16-bit PCM WAV loader. Returns samples scaled to [-1,1).
struct AudioClip {
  int64_t sample_rate = 0;
  std::vector<double> samples;
};

AudioClip read_wav(const std::string& path);
void write_wav(const std::string& path, const AudioClip& clip);

// In-place iterative radix-2 FFT over interleaved complex (re,im) pairs.
// n must be a power of two.
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

// Frame-synchronous log-mel energies, before any normalization: one row per
// video frame (hop = sample_rate / fps, floor(samples/hop) frames), Hann
// window of `window` samples zero-padded past the end of the signal,
// `mel_bins` triangular filters spanning 0..sr/2 on the HTK mel scale,
// log(1+energy) per bin. sample_rate must be divisible by fps and the
// window a power of two.
Tensor filterbank_energies(const std::vector<double>& samples,
                           int64_t sample_rate, int64_t fps = 25,
                           int64_t window = 1024, int64_t mel_bins = 32);

// filterbank_energies followed by per-utterance, per-dimension
// standardization: (x - mean) / sqrt(var + 1e-12), population statistics
// over the clip's frames. Digital silence comes out as all zeros.
Tensor extract_features(const std::vector<double>& samples,
                        int64_t sample_rate, int64_t fps = 25,
                        int64_t window = 1024, int64_t mel_bins = 32);

// Feature file helpers with shape validation ([frames, dims]).
void save_features(const std::string& path, const Tensor& features);
Tensor load_features(const std::string& path, int64_t expect_dims);

}  // namespace vividforge
