#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lesionseg/label_map.hpp"
#include "lesionseg/tensor.hpp"

namespace lesionseg {

// 2x2 confusion over {Skin, Lesion}; Background-labeled truth pixels are
// excluded entirely. A background *prediction* on a valid pixel is a miss
// for the true class, tallied in the abstain column (only possible for
// externally supplied predictions; the 2-channel head never emits 0).
struct ConfusionMatrix {
  // counts[actual][predicted], class index 0=Skin, 1=Lesion
  std::array<std::array<std::uint64_t, 2>, 2> counts{{{0, 0}, {0, 0}}};
  std::array<std::uint64_t, 2> abstain{{0, 0}};

  std::uint64_t valid_pixels() const {
    return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1] + abstain[0] + abstain[1];
  }
  std::uint64_t actual(int c) const { return counts[c][0] + counts[c][1] + abstain[c]; }
  std::uint64_t tp(int c) const { return counts[c][c]; }
  std::uint64_t fp(int c) const { return counts[1 - c][c]; }
  std::uint64_t fn(int c) const { return actual(c) - tp(c); }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (int a = 0; a < 2; ++a) {
      for (int p = 0; p < 2; ++p) counts[a][p] += o.counts[a][p];
      abstain[a] += o.abstain[a];
    }
    return *this;
  }
};

inline ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& truth) {
  if (!pred.same_shape(truth)) throw ShapeError("confusion: shape mismatch");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    std::uint8_t t = truth.values[i];
    if (t == kBackground) continue;
    std::uint8_t p = pred.values[i];
    if (p == kBackground)
      ++cm.abstain[t - 1];
    else
      ++cm.counts[t - 1][p - 1];
  }
  return cm;
}

struct AccuracyResult {
  std::array<std::optional<double>, 2> per_class;
  std::optional<double> mean;
  std::optional<double> weighted;
};

inline AccuracyResult accuracy(const ConfusionMatrix& cm) {
  AccuracyResult r;
  double sum = 0.0;
  int defined = 0;
  double wsum = 0.0;
  std::uint64_t wtotal = 0;
  for (int c = 0; c < 2; ++c) {
    std::uint64_t p = cm.actual(c);
    if (p == 0) continue;
    double acc = static_cast<double>(cm.tp(c)) / static_cast<double>(p);
    r.per_class[c] = acc;
    sum += acc;
    ++defined;
    wsum += acc * static_cast<double>(p);
    wtotal += p;
  }
  if (defined > 0) {
    r.mean = sum / defined;
    r.weighted = wsum / static_cast<double>(wtotal);
  }
  return r;
}

inline std::optional<double> iou(const LabelMap& pred, const LabelMap& truth, int cls) {
  if (!pred.same_shape(truth)) throw ShapeError("iou: shape mismatch");
  std::uint8_t c = static_cast<std::uint8_t>(cls);
  std::uint64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    if (truth.values[i] == kBackground) continue;
    bool in_t = truth.values[i] == c;
    bool in_p = pred.values[i] == c;
    if (in_t && in_p) ++inter;
    if (in_t || in_p) ++uni;
  }
  if (uni == 0) return std::nullopt;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct PrecisionRecallF1 {
  std::optional<double> ppv;
  std::optional<double> tpr;
  std::optional<double> f1;
};

inline PrecisionRecallF1 precision_recall_f1(const ConfusionMatrix& cm, int c) {
  PrecisionRecallF1 r;
  std::uint64_t tp = cm.tp(c), fp = cm.fp(c), fn = cm.fn(c);
  if (tp + fp > 0) r.ppv = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) r.tpr = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (r.ppv && r.tpr && (*r.ppv > 0.0 || *r.tpr > 0.0))
    r.f1 = 2.0 * *r.ppv * *r.tpr / (*r.ppv + *r.tpr);
  return r;
}

namespace detail {

// Felzenszwalb-Huttenlocher 1-D squared distance transform
inline void edt1d(const std::vector<double>& f, std::vector<double>& d, int n) {
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = (q - v[k]) * static_cast<double>(q - v[k]) + f[v[k]];
  }
}

// exact Euclidean distance (in pixels) to the nearest set pixel
inline std::vector<double> distance_field(const std::vector<bool>& set, int h, int w) {
  const double inf = 1e18;
  std::vector<double> d(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = set[i] ? 0.0 : inf;
  std::vector<double> f(std::max(h, w)), out(std::max(h, w));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = d[static_cast<std::size_t>(y) * w + x];
    edt1d(f, out, h);
    for (int y = 0; y < h; ++y) d[static_cast<std::size_t>(y) * w + x] = out[y];
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = d[static_cast<std::size_t>(y) * w + x];
    edt1d(f, out, w);
    for (int x = 0; x < w; ++x) d[static_cast<std::size_t>(y) * w + x] = std::sqrt(out[x]);
  }
  return d;
}

// Boundary pixels of class c inside the valid (non-background truth) region.
// A pixel is boundary when some 4-neighbor leaves the class, the valid
// region, or the image.
inline std::vector<bool> class_boundary(const LabelMap& m, const LabelMap& truth, int cls) {
  const int h = m.height, w = m.width;
  std::vector<bool> b(static_cast<std::size_t>(h) * w, false);
  auto valid = [&](int y, int x) { return truth.at(y, x) != kBackground; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!valid(y, x) || m.at(y, x) != cls) continue;
      bool edge = false;
      const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
      for (int k = 0; k < 4 && !edge; ++k) {
        int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || ny >= h || nx < 0 || nx >= w || !valid(ny, nx) || m.at(ny, nx) != cls)
          edge = true;
      }
      if (edge) b[static_cast<std::size_t>(y) * w + x] = true;
    }
  return b;
}

}  // namespace detail

inline int default_bf1_tolerance(int h, int w) {
  return static_cast<int>(std::ceil(0.0075 * std::sqrt(static_cast<double>(h) * h +
                                                       static_cast<double>(w) * w)));
}

inline double boundary_f1(const LabelMap& pred, const LabelMap& truth, int cls,
                          double tolerance_px) {
  if (!pred.same_shape(truth)) throw ShapeError("boundary_f1: shape mismatch");
  const int h = truth.height, w = truth.width;
  auto pb = detail::class_boundary(pred, truth, cls);
  auto tb = detail::class_boundary(truth, truth, cls);
  std::uint64_t np = std::count(pb.begin(), pb.end(), true);
  std::uint64_t nt = std::count(tb.begin(), tb.end(), true);
  if (np == 0 && nt == 0) return 1.0;
  if (np == 0 || nt == 0) return 0.0;

  auto dt = detail::distance_field(tb, h, w);
  auto dp = detail::distance_field(pb, h, w);
  std::uint64_t hit_p = 0, hit_t = 0;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    if (pb[i] && dt[i] <= tolerance_px) ++hit_p;
    if (tb[i] && dp[i] <= tolerance_px) ++hit_t;
  }
  double prec = static_cast<double>(hit_p) / static_cast<double>(np);
  double rec = static_cast<double>(hit_t) / static_cast<double>(nt);
  if (prec + rec == 0.0) return 0.0;
  return 2.0 * prec * rec / (prec + rec);
}

// ---------------------------------------------------------------------------
// Dataset-level report (macro aggregation: per image, then mean)
// ---------------------------------------------------------------------------

struct ClassMetrics {
  std::optional<double> accuracy;
  std::optional<double> iou;
  std::optional<double> ppv;
  std::optional<double> tpr;
  std::optional<double> f1;
  std::optional<double> bf1;
};

struct ImageMetrics {
  std::string source_id;
  std::array<ClassMetrics, 2> per_class;  // [Skin, Lesion]
  ConfusionMatrix cm;
};

struct MetricsReport {
  std::vector<ImageMetrics> images;
  std::array<ClassMetrics, 2> aggregate;  // macro mean per class
  std::optional<double> mean_accuracy;    // over classes of the aggregate
  std::optional<double> mean_iou;
  std::optional<double> mean_bf1;
  ConfusionMatrix total_cm;
};

inline ImageMetrics evaluate_pair(const std::string& source_id, const LabelMap& pred,
                                  const LabelMap& truth, int bf1_tolerance = -1) {
  ImageMetrics m;
  m.source_id = source_id;
  m.cm = confusion(pred, truth);
  double tol = bf1_tolerance >= 0 ? bf1_tolerance
                                  : default_bf1_tolerance(truth.height, truth.width);
  for (int c = 0; c < 2; ++c) {
    auto acc = accuracy(m.cm);
    m.per_class[c].accuracy = acc.per_class[c];
    m.per_class[c].iou = iou(pred, truth, c + 1);
    auto prf = precision_recall_f1(m.cm, c);
    m.per_class[c].ppv = prf.ppv;
    m.per_class[c].tpr = prf.tpr;
    m.per_class[c].f1 = prf.f1;
    m.per_class[c].bf1 = boundary_f1(pred, truth, c + 1, tol);
  }
  return m;
}

struct PredTruthPair {
  std::string source_id;
  LabelMap pred;
  LabelMap truth;
};

inline MetricsReport report(const std::vector<PredTruthPair>& pairs, int bf1_tolerance = -1) {
  if (pairs.empty()) throw std::invalid_argument("report: empty pair list");
  MetricsReport rep;
  for (const auto& pr : pairs) {
    rep.images.push_back(evaluate_pair(pr.source_id, pr.pred, pr.truth, bf1_tolerance));
    rep.total_cm += rep.images.back().cm;
  }
  auto macro = [&](auto getter, int c) -> std::optional<double> {
    double s = 0.0;
    int n = 0;
    for (const auto& im : rep.images)
      if (auto v = getter(im.per_class[c])) {
        s += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / n;
  };
  for (int c = 0; c < 2; ++c) {
    rep.aggregate[c].accuracy = macro([](const ClassMetrics& m) { return m.accuracy; }, c);
    rep.aggregate[c].iou = macro([](const ClassMetrics& m) { return m.iou; }, c);
    rep.aggregate[c].ppv = macro([](const ClassMetrics& m) { return m.ppv; }, c);
    rep.aggregate[c].tpr = macro([](const ClassMetrics& m) { return m.tpr; }, c);
    rep.aggregate[c].f1 = macro([](const ClassMetrics& m) { return m.f1; }, c);
    rep.aggregate[c].bf1 = macro([](const ClassMetrics& m) { return m.bf1; }, c);
  }
  auto class_mean = [](std::optional<double> a, std::optional<double> b) -> std::optional<double> {
    if (a && b) return (*a + *b) / 2.0;
    if (a) return a;
    return b;
  };
  rep.mean_accuracy = class_mean(rep.aggregate[0].accuracy, rep.aggregate[1].accuracy);
  rep.mean_iou = class_mean(rep.aggregate[0].iou, rep.aggregate[1].iou);
  rep.mean_bf1 = class_mean(rep.aggregate[0].bf1, rep.aggregate[1].bf1);
  return rep;
}

inline const char* class_name(int c) { return c == 0 ? "skin" : "lesion"; }

inline void write_metrics_csv(const MetricsReport& rep, std::ostream& os) {
  auto cell = [](std::optional<double> v) {
    return v ? std::to_string(*v) : std::string("undefined");
  };
  os << "source_id,class,accuracy,iou,ppv,tpr,f1,bf1\n";
  auto row = [&](const std::string& id, int c, const ClassMetrics& m) {
    os << id << ',' << class_name(c) << ',' << cell(m.accuracy) << ',' << cell(m.iou) << ','
       << cell(m.ppv) << ',' << cell(m.tpr) << ',' << cell(m.f1) << ',' << cell(m.bf1) << '\n';
  };
  for (const auto& im : rep.images)
    for (int c = 0; c < 2; ++c) row(im.source_id, c, im.per_class[c]);
  for (int c = 0; c < 2; ++c) row("AGGREGATE", c, rep.aggregate[c]);
}

inline void write_confusion_csv(const MetricsReport& rep, std::ostream& os) {
  os << "source_id,actual,pred_skin,pred_lesion,pred_background\n";
  auto rows = [&](const std::string& id, const ConfusionMatrix& cm) {
    for (int a = 0; a < 2; ++a)
      os << id << ',' << class_name(a) << ',' << cm.counts[a][0] << ',' << cm.counts[a][1] << ','
         << cm.abstain[a] << '\n';
  };
  for (const auto& im : rep.images) rows(im.source_id, im.cm);
  rows("AGGREGATE", rep.total_cm);
}

}  // namespace lesionseg
