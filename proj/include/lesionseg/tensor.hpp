#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lesionseg {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major float32 array, rank <= 4 in practice (CHW activations,
// OIHW kernels). data.size() always equals the product of the extents.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;

  Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
    if (shape.empty()) throw ShapeError("tensor: empty shape");
    std::size_t n = 1;
    for (int e : shape) {
      if (e < 1) throw ShapeError("tensor: non-positive extent " + std::to_string(e));
      n *= static_cast<std::size_t>(e);
    }
    data.assign(n, fill);
  }

  std::size_t numel() const { return data.size(); }

  int extent(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }

  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  // CHW indexing helpers for the common rank-3 case.
  float& at3(int c, int h, int w) {
    return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }
  float at3(int c, int h, int w) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }

  Tensor reshaped(std::vector<int> s) const {
    Tensor t(std::move(s));
    if (t.numel() != numel()) throw ShapeError("reshape: element count mismatch");
    t.data = data;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape, 0.0f); }

// Parameter tensor paired with its gradient accumulator.
struct DualSlot {
  Tensor value;
  Tensor grad;

  explicit DualSlot(Tensor v) : value(std::move(v)), grad(zeros_like(value)) {}
};

// Deterministic generator: xorshift* core with hand-rolled distributions,
// so identical seeds give identical streams on every platform
// (std::normal_distribution makes no such guarantee).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix(seed)) {}

  std::uint64_t next_u64() {
    // xorshift* keeps the state small and the stream portable
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (stddev < 0.0) throw std::invalid_argument("normal: negative stddev");
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return mean + stddev * u * m;
  }

  // Knuth for small lambda, normal approximation above the practical range
  std::uint64_t poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda > 256.0) {
      double x = std::round(normal(lambda, std::sqrt(lambda)));
      return x < 0.0 ? 0 : static_cast<std::uint64_t>(x);
    }
    double l = std::exp(-lambda);
    std::uint64_t k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > l);
    return k - 1;
  }

  // Derive an independent stream for (run seed, label, index); used so
  // per-sample augmentation is scheduler independent.
  Rng child(const std::string& label, std::uint64_t index) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      h ^= v;
      h *= 0x100000001b3ULL;
    };
    mix(state_);
    for (char c : label) mix(static_cast<std::uint8_t>(c));
    mix(index);
    return Rng(h);
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97f4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x = x ^ (x >> 31);
    return x ? x : 1;  // xorshift state must be nonzero
  }

  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor randn(std::vector<int> shape, double mean, double stddev, Rng& rng) {
  if (stddev < 0.0) throw std::invalid_argument("randn: negative stddev");
  Tensor t(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.normal(mean, stddev));
  return t;
}

// Central-difference gradient estimate; the oracle every analytic backward
// pass is checked against.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                                     const Tensor& x, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_grad: h must be positive");
  Tensor g = zeros_like(x);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    float orig = probe.data[i];
    probe.data[i] = static_cast<float>(orig + h);
    double fp = f(probe);
    probe.data[i] = static_cast<float>(orig - h);
    double fm = f(probe);
    probe.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_difference_grad: non-finite objective");
    g.data[i] = static_cast<float>((fp - fm) / (2.0 * h));
  }
  return g;
}

}  // namespace lesionseg
