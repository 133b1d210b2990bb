#include "vividforge/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "vividforge/error.hpp"

namespace vividforge {

double head_pose_diversity(const std::vector<Tensor>& pose_sequences) {
  if (pose_sequences.empty()) throw DataError("hpd: no sequences");
  int64_t total = 0;
  for (const Tensor& s : pose_sequences) {
    if (s.ndim() != 2 || s.dim(1) != 6) {
      throw DataError("hpd: sequences must be [frames,6], got " + s.shape_str());
    }
    total += s.dim(0);
  }
  if (total == 0) throw DataError("hpd: empty sequences");
  double acc = 0.0;
  for (int64_t d = 0; d < 6; ++d) {
    // Two-pass population variance around the first observation; constant
    // input yields an exact zero instead of rounding residue.
    double shift = 0.0;
    for (const Tensor& s : pose_sequences) {
      if (s.dim(0) > 0) {
        shift = s.at2(0, d);
        break;
      }
    }
    double mean = 0.0;
    for (const Tensor& s : pose_sequences) {
      for (int64_t t = 0; t < s.dim(0); ++t) mean += s.at2(t, d) - shift;
    }
    mean /= double(total);
    double var = 0.0;
    for (const Tensor& s : pose_sequences) {
      for (int64_t t = 0; t < s.dim(0); ++t) {
        double dd = (s.at2(t, d) - shift) - mean;
        var += dd * dd;
      }
    }
    var /= double(total);  // population variance
    acc += std::sqrt(var);
  }
  return acc / 6.0;
}

double psnr(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DataError("psnr: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
  double mse = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= double(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double vertex_mse(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw DataError("vertex_mse: sequence length mismatch or empty");
  }
  double acc = 0.0;
  int64_t count = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (!a[i].same_shape(b[i])) {
      throw DataError("vertex_mse: frame shape mismatch at " + std::to_string(i));
    }
    for (int64_t j = 0; j < a[i].numel(); ++j) {
      double d = a[i][j] - b[i][j];
      acc += d * d;
    }
    count += a[i].numel();
  }
  return acc / double(count);
}

double mean_abs_error(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DataError("mean_abs_error: shape mismatch " + a.shape_str() + " vs " +
                    b.shape_str());
  }
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += std::fabs(a[i] - b[i]);
  return acc / double(a.numel());
}

double region_l1(const Tensor& a, const Tensor& b, int64_t y0, int64_t y1,
                 int64_t x0, int64_t x1) {
  if (!a.same_shape(b) || a.ndim() != 3 || a.dim(2) != 3) {
    throw DataError("region_l1: images must be matching [H,W,3]");
  }
  if (y0 < 0 || x0 < 0 || y1 > a.dim(0) || x1 > a.dim(1) || y0 >= y1 || x0 >= x1) {
    throw DataError("region_l1: bad region bounds");
  }
  double acc = 0.0;
  int64_t w = a.dim(1);
  for (int64_t y = y0; y < y1; ++y) {
    for (int64_t x = x0; x < x1; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        acc += std::fabs(a[(y * w + x) * 3 + c] - b[(y * w + x) * 3 + c]);
      }
    }
  }
  return acc / double((y1 - y0) * (x1 - x0) * 3);
}

void write_metrics_csv(const std::string& path,
                       const std::vector<std::pair<std::string, double>>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write metrics file: " + path);
  f << "metric,value\n";
  char buf[64];
  for (const auto& [name, value] : rows) {
    if (std::isinf(value)) {
      f << name << "," << (value > 0 ? "inf" : "-inf") << "\n";
    } else {
      std::snprintf(buf, sizeof buf, "%.17g", value);
      f << name << "," << buf << "\n";
    }
  }
}

}  // namespace vividforge
