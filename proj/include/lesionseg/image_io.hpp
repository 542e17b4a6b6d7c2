#pragma once

#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "lesionseg/label_map.hpp"
#include "lesionseg/tensor.hpp"

namespace lesionseg {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// RGB image as (3,H,W) float tensor in [0,1]
inline Tensor load_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path);
  Tensor t({3, bgr.rows, bgr.cols});
  for (int y = 0; y < bgr.rows; ++y)
    for (int x = 0; x < bgr.cols; ++x) {
      const auto& px = bgr.at<cv::Vec3b>(y, x);
      t.at3(0, y, x) = px[2] / 255.0f;
      t.at3(1, y, x) = px[1] / 255.0f;
      t.at3(2, y, x) = px[0] / 255.0f;
    }
  return t;
}

inline void save_image(const std::string& path, const Tensor& t) {
  if (t.shape.size() != 3 || t.shape[0] != 3) throw ShapeError("save_image: expected (3,H,W)");
  cv::Mat bgr(t.shape[1], t.shape[2], CV_8UC3);
  for (int y = 0; y < t.shape[1]; ++y)
    for (int x = 0; x < t.shape[2]; ++x) {
      auto clamp255 = [](float v) {
        return static_cast<std::uint8_t>(std::min(255.0f, std::max(0.0f, v * 255.0f + 0.5f)));
      };
      bgr.at<cv::Vec3b>(y, x) = {clamp255(t.at3(2, y, x)), clamp255(t.at3(1, y, x)),
                                 clamp255(t.at3(0, y, x))};
    }
  if (!cv::imwrite(path, bgr)) throw IoError("cannot write image " + path);
}

// 8-bit single-channel raster with values {0,1,2}
inline LabelMap load_label(const std::string& path) {
  cv::Mat gray = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw IoError("cannot read label " + path);
  LabelMap m(gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x) {
      std::uint8_t v = gray.at<std::uint8_t>(y, x);
      if (v > 2) throw IoError("label " + path + " contains out-of-range value " +
                               std::to_string(int(v)));
      m.at(y, x) = v;
    }
  return m;
}

inline void save_label(const std::string& path, const LabelMap& m) {
  cv::Mat gray(m.height, m.width, CV_8UC1);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) gray.at<std::uint8_t>(y, x) = m.at(y, x);
  if (!cv::imwrite(path, gray)) throw IoError("cannot write label " + path);
}

// Lesion pixels tinted red for visual inspection
inline void save_overlay(const std::string& path, const Tensor& image, const LabelMap& label) {
  Tensor out = image;
  for (int y = 0; y < label.height; ++y)
    for (int x = 0; x < label.width; ++x)
      if (label.at(y, x) == kLesion) {
        out.at3(0, y, x) = 0.6f * out.at3(0, y, x) + 0.4f;
        out.at3(1, y, x) *= 0.6f;
        out.at3(2, y, x) *= 0.6f;
      }
  save_image(path, out);
}

}  // namespace lesionseg
