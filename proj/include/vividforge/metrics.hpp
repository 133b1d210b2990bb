#pragma once

#include <map>
#include <string>
#include <vector>

#include "vividforge/tensor.hpp"

namespace vividforge {

// Head pose diversity: the mean over the 6 pose dimensions of the population
// standard deviation, pooled over every frame of every sequence.
double head_pose_diversity(const std::vector<Tensor>& pose_sequences);

// Peak signal-to-noise ratio in dB for images in [0,1]; +inf when identical.
double psnr(const Tensor& a, const Tensor& b);

// Mean squared error over aligned vertex sequences ([n,3] per frame).
double vertex_mse(const std::vector<Tensor>& a, const std::vector<Tensor>& b);

// Mean absolute error between coefficient matrices of equal shape.
double mean_abs_error(const Tensor& a, const Tensor& b);

// Mean absolute error restricted to a pixel box [y0,y1) x [x0,x1).
double region_l1(const Tensor& a, const Tensor& b, int64_t y0, int64_t y1,
                 int64_t x0, int64_t x1);

// metrics.csv writer: header "metric,value", one row per entry, values with
// %.17g, inf serialized as "inf".
void write_metrics_csv(const std::string& path,
                       const std::vector<std::pair<std::string, double>>& rows);

}  // namespace vividforge
