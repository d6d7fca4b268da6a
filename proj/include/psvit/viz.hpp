#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "psvit/sampling.hpp"

namespace psvit {

// One row per (iteration, sampling point): raw running-sum coordinates and
// the clamped effective location actually sampled.
inline std::string trajectory_to_csv(const TrajectoryLog& log) {
  std::ostringstream os;
  os << "iteration,index,y_raw,x_raw,y_clamped,x_clamped\n";
  os << std::setprecision(9);
  for (size_t it = 0; it < log.size(); ++it) {
    const auto& step = log[it];
    for (int i = 0; i < step.raw.cols(); ++i) {
      os << (it + 1) << "," << i << "," << step.raw.at(0, i) << "," << step.raw.at(1, i) << ","
         << step.effective.at(0, i) << "," << step.effective.at(1, i) << "\n";
    }
  }
  return os.str();
}

inline void write_trajectory_csv(const std::string& path, const TrajectoryLog& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("viz: cannot open " + path + " for writing");
  f << trajectory_to_csv(log);
}

// Arrows from the initial sampled locations p_1 to the final locations p_N,
// drawn over a grayscale rectangle raster of the image. Feature-map
// coordinates map to image pixels through the backbone stride of 4.
inline std::string trajectory_to_svg(const Tensor& image, const TrajectoryLog& log) {
  if (image.ndim() != 3) throw std::invalid_argument("viz: expected 3 x H x W image");
  if (log.empty()) throw std::invalid_argument("viz: empty trajectory");
  const int h = image.dim(1), w = image.dim(2);
  const int scale = std::max(1, 512 / std::max(h, w));
  const int channels = image.dim(0);

  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w * scale << "\" height=\"" << h * scale
     << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  os << "<defs><marker id=\"tip\" markerWidth=\"6\" markerHeight=\"6\" refX=\"3\" refY=\"1.5\" "
        "orient=\"auto\"><path d=\"M0,0 L3,1.5 L0,3 z\" fill=\"#e4483b\"/></marker></defs>\n";

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float v = 0;
      for (int c = 0; c < channels; ++c) v += image.at3(c, y, x);
      v /= static_cast<float>(channels);
      const int g = std::clamp(static_cast<int>((v + 1.0f) * 0.5f * 255.0f), 0, 255);
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"1\" height=\"1\" fill=\"rgb(" << g << ","
         << g << "," << g << ")\"/>\n";
    }

  const auto& first = log.front().effective;
  const auto& last = log.back().effective;
  const double stride = 4.0;
  auto to_img = [stride](float feat) { return stride * feat + stride / 2.0 - 0.5; };
  for (int i = 0; i < first.cols(); ++i) {
    const double y1 = to_img(first.at(0, i)), x1 = to_img(first.at(1, i));
    const double y2 = to_img(last.at(0, i)), x2 = to_img(last.at(1, i));
    os << "<circle cx=\"" << x1 << "\" cy=\"" << y1 << "\" r=\"0.6\" fill=\"#3b82e4\"/>\n";
    os << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
       << "\" stroke=\"#e4483b\" stroke-width=\"0.35\" marker-end=\"url(#tip)\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_trajectory_svg(const std::string& path, const Tensor& image, const TrajectoryLog& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("viz: cannot open " + path + " for writing");
  f << trajectory_to_svg(image, log);
}

}  // namespace psvit
