#include <doctest.h>

#include <cmath>
#include <sstream>

#include "lesionseg/metrics.hpp"
#include "lesionseg/tensor.hpp"

using namespace lesionseg;

namespace {

LabelMap random_labels(int h, int w, Rng& rng) {
  LabelMap m(h, w);
  for (auto& v : m.values) v = static_cast<std::uint8_t>(rng.uniform_int(3));
  return m;
}

// independent pixel-count oracle
struct Counts {
  std::uint64_t c[2][2] = {{0, 0}, {0, 0}};
  std::uint64_t abstain[2] = {0, 0};
};

Counts brute_counts(const LabelMap& pred, const LabelMap& truth) {
  Counts k;
  for (int y = 0; y < truth.height; ++y)
    for (int x = 0; x < truth.width; ++x) {
      int t = truth.at(y, x), p = pred.at(y, x);
      if (t == 0) continue;
      if (p == 0)
        ++k.abstain[t - 1];
      else
        ++k.c[t - 1][p - 1];
    }
  return k;
}

// O(n^2) scan version of boundary F1 built directly from the definition
double brute_bf1(const LabelMap& pred, const LabelMap& truth, int cls, double tol) {
  const int h = truth.height, w = truth.width;
  auto valid = [&](int y, int x) { return truth.at(y, x) != kBackground; };
  auto boundary = [&](const LabelMap& m) {
    std::vector<std::pair<int, int>> pts;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!valid(y, x) || m.at(y, x) != cls) continue;
        bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
        if (!edge)
          edge = m.at(y - 1, x) != cls || m.at(y + 1, x) != cls || m.at(y, x - 1) != cls ||
                 m.at(y, x + 1) != cls || !valid(y - 1, x) || !valid(y + 1, x) ||
                 !valid(y, x - 1) || !valid(y, x + 1);
        if (edge) pts.emplace_back(y, x);
      }
    return pts;
  };
  auto pb = boundary(pred), tb = boundary(truth);
  if (pb.empty() && tb.empty()) return 1.0;
  if (pb.empty() || tb.empty()) return 0.0;
  auto hits = [&](const auto& from, const auto& to) {
    std::uint64_t n = 0;
    for (auto [y, x] : from) {
      double best = 1e18;
      for (auto [ty, tx] : to) {
        double d = std::hypot(double(y - ty), double(x - tx));
        if (d < best) best = d;
      }
      if (best <= tol) ++n;
    }
    return n;
  };
  double prec = double(hits(pb, tb)) / pb.size();
  double rec = double(hits(tb, pb)) / tb.size();
  if (prec + rec == 0.0) return 0.0;
  return 2.0 * prec * rec / (prec + rec);
}

}  // namespace

TEST_CASE("confusion, accuracy, iou and prf against brute-force counting") {
  Rng rng(211);
  for (int trial = 0; trial < 100; ++trial) {
    LabelMap pred = random_labels(16, 16, rng);
    LabelMap truth = random_labels(16, 16, rng);
    ConfusionMatrix cm = confusion(pred, truth);
    Counts k = brute_counts(pred, truth);
    for (int a = 0; a < 2; ++a) {
      CHECK(cm.abstain[a] == k.abstain[a]);
      for (int p = 0; p < 2; ++p) CHECK(cm.counts[a][p] == k.c[a][p]);
    }

    AccuracyResult acc = accuracy(cm);
    for (int c = 0; c < 2; ++c) {
      std::uint64_t actual = k.c[c][0] + k.c[c][1] + k.abstain[c];
      if (actual == 0) {
        CHECK_FALSE(acc.per_class[c].has_value());
      } else {
        REQUIRE(acc.per_class[c].has_value());
        CHECK(*acc.per_class[c] == double(k.c[c][c]) / double(actual));
      }
      std::uint64_t tp = k.c[c][c], fp = k.c[1 - c][c];
      std::uint64_t fn = actual - tp;
      PrecisionRecallF1 prf = precision_recall_f1(cm, c);
      if (tp + fp == 0)
        CHECK_FALSE(prf.ppv.has_value());
      else
        CHECK(*prf.ppv == double(tp) / double(tp + fp));
      if (tp + fn == 0)
        CHECK_FALSE(prf.tpr.has_value());
      else
        CHECK(*prf.tpr == double(tp) / double(tp + fn));
    }

    for (int cls = 1; cls <= 2; ++cls) {
      std::uint64_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < truth.values.size(); ++i) {
        if (truth.values[i] == 0) continue;
        bool it = truth.values[i] == cls, ip = pred.values[i] == cls;
        inter += it && ip;
        uni += it || ip;
      }
      auto got = iou(pred, truth, cls);
      if (uni == 0)
        CHECK_FALSE(got.has_value());
      else
        CHECK(*got == double(inter) / double(uni));
    }
  }
}

TEST_CASE("boundary f1 equals the quadratic scan oracle") {
  Rng rng(223);
  for (int trial = 0; trial < 25; ++trial) {
    // blocky maps give structured boundaries
    LabelMap pred(16, 16), truth(16, 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        truth.at(y, x) = static_cast<std::uint8_t>((y / 4 + x / 4 + trial) % 3);
        pred.at(y, x) = static_cast<std::uint8_t>((y / 3 + x / 5 + trial) % 3);
      }
    for (int i = 0; i < 20; ++i)
      pred.values[rng.uniform_int(pred.values.size())] =
          static_cast<std::uint8_t>(rng.uniform_int(3));
    double tol = 2.0;
    for (int cls = 1; cls <= 2; ++cls)
      CHECK(boundary_f1(pred, truth, cls, tol) ==
            doctest::Approx(brute_bf1(pred, truth, cls, tol)).epsilon(1e-12));
  }
}

TEST_CASE("boundary f1 edge cases") {
  LabelMap a(8, 8, kSkin), b(8, 8, kSkin);
  CHECK(boundary_f1(a, b, kLesion, 2.0) == 1.0);  // neither map has the class
  b.at(4, 4) = kLesion;
  CHECK(boundary_f1(a, b, kLesion, 2.0) == 0.0);  // only truth has it
  CHECK(boundary_f1(b, b, kLesion, 0.0) == 1.0);  // identical maps
}

TEST_CASE("default tolerance is ceil of 0.75 percent of the diagonal") {
  CHECK(default_bf1_tolerance(360, 480) == 5);  // diagonal 600 -> 4.5 -> 5
  CHECK(default_bf1_tolerance(96, 96) == 2);
  CHECK(default_bf1_tolerance(3, 4) == 1);
}

TEST_CASE("report aggregates and csv emits undefined cells") {
  LabelMap truth(8, 8, kSkin);
  truth.at(0, 0) = kBackground;
  LabelMap pred = truth;  // perfect, but no lesion anywhere
  MetricsReport rep = report({{"img0", pred, truth}});
  REQUIRE(rep.aggregate[0].accuracy.has_value());
  CHECK(*rep.aggregate[0].accuracy == 1.0);
  CHECK_FALSE(rep.aggregate[1].accuracy.has_value());

  std::ostringstream os;
  write_metrics_csv(rep, os);
  std::string csv = os.str();
  CHECK(csv.find("source_id,class,accuracy,iou,ppv,tpr,f1,bf1") == 0);
  CHECK(csv.find("undefined") != std::string::npos);
  CHECK(csv.find("AGGREGATE") != std::string::npos);

  std::ostringstream cs;
  write_confusion_csv(rep, cs);
  CHECK(cs.str().find("AGGREGATE,skin,63,0,0") != std::string::npos);
}

TEST_CASE("report rejects empty input, confusion rejects shape mismatch") {
  CHECK_THROWS(report({}));
  LabelMap a(4, 4), b(4, 5);
  CHECK_THROWS_AS(confusion(a, b), ShapeError);
}
