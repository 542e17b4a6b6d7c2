#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lesionseg/image_io.hpp"
#include "lesionseg/label_map.hpp"
#include "lesionseg/layers.hpp"
#include "lesionseg/tensor.hpp"

namespace lesionseg {

struct Sample {
  Tensor image;  // (3,H,W), values in [0,1]
  LabelMap label;
  std::string source_id;
};

constexpr int kWorkingHeight = 360;
constexpr int kWorkingWidth = 480;

// ---------------------------------------------------------------------------
// Resampling (align-corners bilinear for images, nearest for labels)
// ---------------------------------------------------------------------------

inline Tensor resize_image(const Tensor& img, int th, int tw) {
  const int C = img.shape[0], H = img.shape[1], W = img.shape[2];
  if (H == th && W == tw) return img;
  Tensor out({C, th, tw});
  auto pos = [](int o, int n_out, int n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(o) * (n_in - 1) / (n_out - 1);
  };
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < th; ++i) {
      double sy = pos(i, th, H);
      int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, H - 1);
      double fy = sy - y0;
      for (int j = 0; j < tw; ++j) {
        double sx = pos(j, tw, W);
        int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, W - 1);
        double fx = sx - x0;
        out.at3(c, i, j) = static_cast<float>(
            (1 - fy) * ((1 - fx) * img.at3(c, y0, x0) + fx * img.at3(c, y0, x1)) +
            fy * ((1 - fx) * img.at3(c, y1, x0) + fx * img.at3(c, y1, x1)));
      }
    }
  return out;
}

inline LabelMap resize_label(const LabelMap& lab, int th, int tw) {
  if (lab.height == th && lab.width == tw) return lab;
  LabelMap out(th, tw);
  auto pos = [](int o, int n_out, int n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(o) * (n_in - 1) / (n_out - 1);
  };
  for (int i = 0; i < th; ++i) {
    int sy = static_cast<int>(std::lround(pos(i, th, lab.height)));
    for (int j = 0; j < tw; ++j) {
      int sx = static_cast<int>(std::lround(pos(j, tw, lab.width)));
      out.at(i, j) = lab.at(sy, sx);
    }
  }
  return out;
}

inline Sample resize_sample(const Sample& s, int th = kWorkingHeight, int tw = kWorkingWidth) {
  if (th < 1 || tw < 1) throw std::invalid_argument("resize_sample: bad target size");
  return {resize_image(s.image, th, tw), resize_label(s.label, th, tw), s.source_id};
}

// ---------------------------------------------------------------------------
// Dataset loading and splitting
// ---------------------------------------------------------------------------

struct LoadReport {
  std::vector<std::string> missing_pairs;
  std::vector<std::string> rejected;  // bad label values etc., with file name
  std::vector<std::string> warnings;
};

struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> test;
  LoadReport report;
};

inline std::size_t test_count_for(std::size_t n, double test_fraction) {
  return static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
}

// root/images/*.png + root/labels/*.png with matching stems; optional
// root/manifest.csv (stem,split) overrides the seeded random split.
inline DatasetSplit load_dataset(const std::string& root, double test_fraction,
                                 std::uint64_t seed, int target_h = kWorkingHeight,
                                 int target_w = kWorkingWidth) {
  namespace fs = std::filesystem;
  DatasetSplit out;
  fs::path images = fs::path(root) / "images";
  fs::path labels = fs::path(root) / "labels";
  if (!fs::is_directory(images) || !fs::is_directory(labels)) {
    out.report.warnings.push_back("dataset root " + root + " has no images/ and labels/");
    return out;
  }

  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_regular_file()) stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) {
    out.report.warnings.push_back("dataset root " + root + " contains no images");
    return out;
  }

  std::map<std::string, std::string> manifest;
  fs::path manifest_path = fs::path(root) / "manifest.csv";
  if (fs::exists(manifest_path)) {
    std::ifstream mf(manifest_path);
    std::string line;
    while (std::getline(mf, line)) {
      auto comma = line.find(',');
      if (comma != std::string::npos)
        manifest[line.substr(0, comma)] = line.substr(comma + 1);
    }
  }

  std::vector<Sample> loaded;
  for (const auto& stem : stems) {
    fs::path img = images / (stem + ".png");
    fs::path lab = labels / (stem + ".png");
    if (!fs::exists(img) || !fs::exists(lab)) {
      out.report.missing_pairs.push_back(stem);
      continue;
    }
    try {
      Sample s{load_image(img.string()), load_label(lab.string()), stem};
      if (s.image.shape[1] != s.label.height || s.image.shape[2] != s.label.width) {
        out.report.rejected.push_back(stem + ": image/label size mismatch");
        continue;
      }
      loaded.push_back(resize_sample(s, target_h, target_w));
    } catch (const IoError& e) {
      out.report.rejected.push_back(e.what());
    }
  }

  if (!manifest.empty()) {
    for (auto& s : loaded) {
      auto it = manifest.find(s.source_id);
      if (it != manifest.end() && it->second == "test")
        out.test.push_back(std::move(s));
      else
        out.train.push_back(std::move(s));
    }
    return out;
  }

  // deterministic seeded shuffle of the sorted stems
  Rng rng(seed);
  std::vector<std::size_t> idx(loaded.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
  std::size_t n_test = test_count_for(loaded.size(), test_fraction);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (k < n_test)
      out.test.push_back(std::move(loaded[idx[k]]));
    else
      out.train.push_back(std::move(loaded[idx[k]]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Class weights (median-frequency balancing over {Skin, Lesion})
// ---------------------------------------------------------------------------

struct ClassWeights {
  std::array<double, 2> w{1.0, 1.0};
  std::vector<std::string> warnings;
};

inline ClassWeights class_weights(const std::vector<LabelMap>& labels,
                                  bool inverse_frequency = false) {
  std::array<double, 2> freq_sum{0.0, 0.0};
  std::array<int, 2> freq_count{0, 0};
  for (const auto& lab : labels) {
    std::array<std::uint64_t, 2> c{0, 0};
    std::uint64_t valid = 0;
    for (std::uint8_t v : lab.values) {
      if (v == kBackground) continue;
      ++valid;
      ++c[v - 1];
    }
    if (valid == 0) continue;
    for (int k = 0; k < 2; ++k)
      if (c[k] > 0) {
        freq_sum[k] += static_cast<double>(c[k]) / static_cast<double>(valid);
        ++freq_count[k];
      }
  }
  ClassWeights out;
  std::array<double, 2> freq{0.0, 0.0};
  std::vector<double> present;
  for (int k = 0; k < 2; ++k)
    if (freq_count[k] > 0) {
      freq[k] = freq_sum[k] / freq_count[k];
      present.push_back(freq[k]);
    }
  if (present.empty())
    throw std::invalid_argument("class_weights: no non-background pixel in the set");
  std::sort(present.begin(), present.end());
  double median = present.size() == 2 ? (present[0] + present[1]) / 2.0 : present[0];
  for (int k = 0; k < 2; ++k) {
    if (freq_count[k] == 0) {
      out.w[k] = 0.0;
      out.warnings.push_back(std::string("class '") + (k == 0 ? "skin" : "lesion") +
                             "' absent from the set");
    } else {
      out.w[k] = inverse_frequency ? 1.0 / freq[k] : median / freq[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometric augmentation (one random affine draw per sample)
// ---------------------------------------------------------------------------

struct NoiseRecipe {
  std::string kind;  // gaussian | local_gaussian | poisson | speckle | salt_pepper
  int repetitions = 10;
};

struct AugmentConfig {
  bool reflect_xy = true;
  std::array<double, 2> translate_x_px{-100.0, 100.0};
  std::array<double, 2> rotate_deg{-30.0, 30.0};
  std::array<double, 2> scale{0.75, 1.5};
  std::vector<NoiseRecipe> noise_recipes;
  std::vector<std::string> filters;  // subset of hist_eq, median, edge_enhance
  int crops_per_image = 10;
};

inline AugmentConfig default_augment_config() { return AugmentConfig{}; }

inline Sample augment_geometric(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  const int H = s.label.height, W = s.label.width;
  bool flip_x = cfg.reflect_xy && rng.uniform() < 0.5;
  bool flip_y = cfg.reflect_xy && rng.uniform() < 0.5;
  double tx = rng.uniform(cfg.translate_x_px[0], cfg.translate_x_px[1]);
  double angle = rng.uniform(cfg.rotate_deg[0], cfg.rotate_deg[1]) * M_PI / 180.0;
  double sx = rng.uniform(cfg.scale[0], cfg.scale[1]);
  double sy = rng.uniform(cfg.scale[0], cfg.scale[1]);

  // inverse map from output pixel to input coordinates, about the center
  double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
  double ca = std::cos(angle), sa = std::sin(angle);
  Sample out{Tensor({3, H, W}, 0.0f), LabelMap(H, W, kBackground), s.source_id + "#geo"};
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double x = j - cx - tx, y = i - cy;
      double xr = (ca * x + sa * y) / sx;
      double yr = (-sa * x + ca * y) / sy;
      if (flip_x) xr = -xr;
      if (flip_y) yr = -yr;
      double sxp = xr + cx, syp = yr + cy;
      if (sxp < 0.0 || sxp > W - 1 || syp < 0.0 || syp > H - 1) continue;
      int x0 = static_cast<int>(sxp), y0 = static_cast<int>(syp);
      int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      double fx = sxp - x0, fy = syp - y0;
      for (int c = 0; c < 3; ++c)
        out.image.at3(c, i, j) = static_cast<float>(
            (1 - fy) * ((1 - fx) * s.image.at3(c, y0, x0) + fx * s.image.at3(c, y0, x1)) +
            fy * ((1 - fx) * s.image.at3(c, y1, x0) + fx * s.image.at3(c, y1, x1)));
      out.label.at(i, j) = s.label.at(static_cast<int>(std::lround(syp)),
                                      static_cast<int>(std::lround(sxp)));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Noise injection (labels untouched; result clamped to [0,1])
// ---------------------------------------------------------------------------

inline Tensor add_noise(const Tensor& image, const std::string& kind, Rng& rng) {
  Tensor out = image;
  auto clamp01 = [](float v) { return std::min(1.0f, std::max(0.0f, v)); };
  if (kind == "gaussian") {
    const double sigma = std::sqrt(0.01);
    for (float& v : out.data) v = clamp01(v + static_cast<float>(rng.normal(0.0, sigma)));
  } else if (kind == "local_gaussian") {
    double mean_p = 0.0;
    for (float v : image.data) mean_p += v;
    mean_p /= static_cast<double>(image.numel());
    if (mean_p <= 0.0) return out;
    for (std::size_t i = 0; i < out.numel(); ++i) {
      double var = 0.01 * image.data[i] / mean_p;
      out.data[i] = clamp01(out.data[i] +
                            static_cast<float>(rng.normal(0.0, std::sqrt(std::max(0.0, var)))));
    }
  } else if (kind == "poisson") {
    // 8-bit count quantization: x -> Poisson(255 x)/255
    for (float& v : out.data)
      v = clamp01(static_cast<float>(rng.poisson(255.0 * v) / 255.0));
  } else if (kind == "speckle") {
    const double sigma = std::sqrt(0.04);
    for (float& v : out.data)
      v = clamp01(v + v * static_cast<float>(rng.normal(0.0, sigma)));
  } else if (kind == "salt_pepper") {
    const double rho = 0.05;
    for (float& v : out.data)
      if (rng.uniform() < rho) v = rng.uniform() < 0.5 ? 0.0f : 1.0f;
  } else {
    throw std::invalid_argument("add_noise: unknown kind '" + kind + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing filters
// ---------------------------------------------------------------------------

inline Tensor preprocess_filter(const Tensor& image, const std::string& kind) {
  const int C = image.shape[0], H = image.shape[1], W = image.shape[2];
  Tensor out = image;
  auto clamp01 = [](double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); };
  if (kind == "hist_eq") {
    const std::size_t n = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < C; ++c) {
      std::array<std::uint64_t, 256> hist{};
      const float* src = image.data.data() + c * n;
      for (std::size_t i = 0; i < n; ++i)
        ++hist[static_cast<int>(std::min(255.0f, std::max(0.0f, src[i] * 255.0f)))];
      std::array<double, 256> cdf{};
      double acc = 0.0;
      for (int b = 0; b < 256; ++b) {
        acc += static_cast<double>(hist[b]) / static_cast<double>(n);
        cdf[b] = acc;
      }
      float* dst = out.data.data() + c * n;
      for (std::size_t i = 0; i < n; ++i) {
        int b = static_cast<int>(std::min(255.0f, std::max(0.0f, src[i] * 255.0f)));
        dst[i] = clamp01(cdf[b]);
      }
    }
  } else if (kind == "median") {
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          std::array<float, 9> v;
          int k = 0;
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              int y = std::clamp(i + di, 0, H - 1), x = std::clamp(j + dj, 0, W - 1);
              v[k++] = image.at3(c, y, x);
            }
          std::nth_element(v.begin(), v.begin() + 4, v.end());
          out.at3(c, i, j) = v[4];
        }
  } else if (kind == "edge_enhance") {
    const double alpha = 0.5;
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          auto px = [&](int y, int x) {
            return image.at3(c, std::clamp(y, 0, H - 1), std::clamp(x, 0, W - 1));
          };
          double lap = px(i - 1, j) + px(i + 1, j) + px(i, j - 1) + px(i, j + 1) -
                       4.0 * px(i, j);
          out.at3(c, i, j) = clamp01(image.at3(c, i, j) - alpha * lap);
        }
  } else {
    throw std::invalid_argument("preprocess_filter: unknown kind '" + kind + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Crop sampling (lesion-containing crops, fallback after 100 rejections)
// ---------------------------------------------------------------------------

inline std::vector<Sample> crop_sample(const Sample& s, int n, double min_lesion_frac, Rng& rng) {
  if (n < 1) throw std::invalid_argument("crop_sample: n must be >= 1");
  const int H = s.label.height, W = s.label.width;
  std::vector<Sample> out;
  for (int k = 0; k < n; ++k) {
    int ch = 0, cw = 0, oy = 0, ox = 0;
    bool accepted = false;
    for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
      ch = static_cast<int>(std::lround(rng.uniform(0.4, 0.8) * H));
      cw = static_cast<int>(std::lround(rng.uniform(0.4, 0.8) * W));
      ch = std::max(8, std::min(ch, H));
      cw = std::max(8, std::min(cw, W));
      oy = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(H - ch + 1)));
      ox = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(W - cw + 1)));
      if (min_lesion_frac <= 0.0) {
        accepted = true;
        break;
      }
      std::uint64_t lesion = 0, valid = 0;
      for (int i = 0; i < ch; ++i)
        for (int j = 0; j < cw; ++j) {
          std::uint8_t v = s.label.at(oy + i, ox + j);
          if (v == kBackground) continue;
          ++valid;
          if (v == kLesion) ++lesion;
        }
      accepted = valid > 0 &&
                 static_cast<double>(lesion) >= min_lesion_frac * static_cast<double>(valid);
    }
    Sample crop{Tensor({3, ch, cw}), LabelMap(ch, cw),
                s.source_id + "#crop" + std::to_string(k)};
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < ch; ++i)
        for (int j = 0; j < cw; ++j) crop.image.at3(c, i, j) = s.image.at3(c, oy + i, ox + j);
    for (int i = 0; i < ch; ++i)
      for (int j = 0; j < cw; ++j) crop.label.at(i, j) = s.label.at(oy + i, ox + j);
    out.push_back(resize_sample(crop, H, W));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recipe expansion: per source, one filtered base plus the configured noise
// repetitions. Output count = inputs * (1 + sum of repetitions).
// ---------------------------------------------------------------------------

inline std::vector<Sample> expand_augmented(const std::vector<Sample>& set,
                                            const AugmentConfig& cfg, const Rng& run_rng) {
  std::vector<Sample> out;
  for (const auto& src : set) {
    Sample base = src;
    std::string chain;
    for (const auto& f : cfg.filters) {
      base.image = preprocess_filter(base.image, f);
      chain += (chain.empty() ? "" : "+") + f;
    }
    if (!chain.empty()) base.source_id += "|" + chain;
    out.push_back(base);
    std::uint64_t variant = 0;
    for (const auto& recipe : cfg.noise_recipes)
      for (int r = 0; r < recipe.repetitions; ++r, ++variant) {
        Rng rng = run_rng.child(src.source_id + "/" + recipe.kind, variant);
        Sample noisy = base;
        noisy.image = add_noise(base.image, recipe.kind, rng);
        noisy.source_id = base.source_id + "|" + recipe.kind + std::to_string(r);
        out.push_back(std::move(noisy));
      }
  }
  return out;
}

inline std::vector<NoiseRecipe> paper_noise_recipes() {
  return {{"gaussian", 10}, {"local_gaussian", 10}, {"poisson", 10},
          {"speckle", 10},  {"salt_pepper", 10}};
}

// ---------------------------------------------------------------------------
// Synthetic lesion generator (desk-scale acceptance data)
// ---------------------------------------------------------------------------

inline std::vector<Sample> synth_lesion(int n, int height, int width, Rng& rng) {
  if (height < 32 || width < 32) throw std::invalid_argument("synth_lesion: size must be >= 32x32");
  std::vector<Sample> out;
  const int border = std::max(2, std::min(height, width) / 16);
  for (int k = 0; k < n; ++k) {
    Sample s{Tensor({3, height, width}), LabelMap(height, width, kBackground),
             "synth" + std::to_string(k)};

    // low-frequency skin texture: coarse random grid, bilinear blow-up
    const int grid = 6;
    Tensor coarse({1, grid, grid});
    for (float& v : coarse.data) v = static_cast<float>(0.7 + rng.normal(0.0, 0.05));
    Tensor texture = resize_image(coarse, height, width);
    const std::array<double, 3> tint{1.05, 0.9, 0.78};  // skin-ish channel balance

    for (int i = 0; i < height; ++i)
      for (int j = 0; j < width; ++j) {
        bool inside = i >= border && i < height - border && j >= border && j < width - border;
        float base = texture.at3(0, i, j);
        for (int c = 0; c < 3; ++c)
          s.image.at3(c, i, j) = std::min(1.0f, std::max(0.0f,
              inside ? static_cast<float>(base * tint[c]) : 0.1f));
        if (inside) s.label.at(i, j) = kSkin;
      }

    int lesions = 1 + static_cast<int>(rng.uniform_int(3));
    const double rmin = 0.08 * std::min(height, width), rmax = 0.14 * std::min(height, width);
    for (int l = 0; l < lesions; ++l) {
      double rx = rng.uniform(rmin, rmax), ry = rng.uniform(rmin, rmax);
      double margin = std::max(rx, ry) + border + 1;
      double cx = rng.uniform(margin, width - margin);
      double cy = rng.uniform(margin, height - margin);
      double theta = rng.uniform(0.0, M_PI);
      double ct = std::cos(theta), st = std::sin(theta);
      float intensity = static_cast<float>(0.3 + rng.normal(0.0, 0.1));
      intensity = std::min(0.45f, std::max(0.12f, intensity));
      for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j) {
          double dx = j - cx, dy = i - cy;
          double u = (ct * dx + st * dy) / rx, v = (-st * dx + ct * dy) / ry;
          if (u * u + v * v > 1.0 || s.label.at(i, j) != kSkin) continue;
          // keep one lesion's pixels when ellipses overlap
          s.label.at(i, j) = kLesion;
          float jitter = static_cast<float>(rng.normal(0.0, 0.02));
          for (int c = 0; c < 3; ++c)
            s.image.at3(c, i, j) = std::min(1.0f, std::max(0.0f,
                intensity * static_cast<float>(tint[c]) + jitter));
        }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// The paper's crop protocol: every UT-style source sampled `crops` times,
// DFCN-style originals appended unchanged.
inline std::vector<Sample> crop_protocol(const std::vector<Sample>& crop_sources,
                                         const std::vector<Sample>& plain_sources, int crops,
                                         double min_lesion_frac, const Rng& run_rng) {
  std::vector<Sample> out;
  std::uint64_t i = 0;
  for (const auto& s : crop_sources) {
    Rng rng = run_rng.child("crop/" + s.source_id, i++);
    auto cropped = crop_sample(s, crops, min_lesion_frac, rng);
    out.insert(out.end(), cropped.begin(), cropped.end());
  }
  out.insert(out.end(), plain_sources.begin(), plain_sources.end());
  return out;
}

}  // namespace lesionseg
