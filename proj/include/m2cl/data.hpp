#pragma once

// Labelled multi-domain image data: a synthetic shape/background generator
// with a tunable spurious background cue, a loader for domain/class folder
// trees of PPM/PGM files, leave-domains-out split planning and batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "m2cl/pnm.hpp"
#include "m2cl/tensor.hpp"

namespace m2cl {

struct LabeledImage {
  Tensor<float> pixels;  // [3,S,S] in [0,1]
  int class_label = 0;
  int domain_label = 0;
  int cue_id = -1;                 // background cue, synthetic data only
  std::vector<std::uint8_t> mask;  // S*S object mask, synthetic data only
  std::string source;
};

struct DomainDataset {
  std::vector<std::string> class_names;
  std::vector<std::string> domain_names;
  std::size_t image_size = 0;
  std::vector<LabeledImage> samples;

  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::size_t num_domains() const noexcept { return domain_names.size(); }

  int domain_index(const std::string& name) const {
    for (std::size_t d = 0; d < domain_names.size(); ++d)
      if (domain_names[d] == name) return static_cast<int>(d);
    return -1;
  }
};

// ---------------------------------------------------------------------------
// Synthetic generator

inline constexpr std::size_t kNumShapes = 7;
inline constexpr std::size_t kNumStyles = 6;

inline const std::array<const char*, kNumShapes>& shape_names() {
  static const std::array<const char*, kNumShapes> names{"disk", "square", "triangle", "cross", "ring", "bar", "frame"};
  return names;
}

inline const std::array<const char*, kNumStyles>& style_names() {
  static const std::array<const char*, kNumStyles> names{"solid", "stripes", "checker", "noise", "diagonal", "gradient"};
  return names;
}

/// Background hue of each cue id.
inline const std::array<std::array<float, 3>, kNumShapes>& cue_palette() {
  static const std::array<std::array<float, 3>, kNumShapes> p{{{0.85f, 0.20f, 0.20f},
                                                                {0.20f, 0.75f, 0.25f},
                                                                {0.20f, 0.30f, 0.85f},
                                                                {0.85f, 0.80f, 0.20f},
                                                                {0.80f, 0.25f, 0.80f},
                                                                {0.20f, 0.80f, 0.80f},
                                                                {0.90f, 0.55f, 0.15f}}};
  return p;
}

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t num_domains = 4;
  double spurious_rho = 0.9;
  std::size_t image_size = 64;
  std::size_t samples_per_domain_class = 200;
  double jitter_pos = 0.15;    // max centre offset, fraction of the half-canvas
  double jitter_scale = 0.2;   // relative size variation
  double jitter_rot = 0.3;     // max rotation, radians
  double shape_radius = 0.42;  // nominal radius, fraction of the half-canvas
  std::uint64_t seed = 0;
  /// Domains whose background cue is drawn independently of the class.
  std::vector<int> cue_free_domains;

  void validate() const {
    if (num_classes < 2 || num_classes > kNumShapes)
      throw ConfigError("synthetic: num_classes must lie in [2," + std::to_string(kNumShapes) + "]");
    if (num_domains < 2) throw ConfigError("synthetic: num_domains must be >= 2");
    if (!(spurious_rho >= 0.0 && spurious_rho <= 1.0)) throw ConfigError("synthetic: spurious_rho must lie in [0,1]");
    if (image_size < 8) throw ConfigError("synthetic: image_size must be >= 8");
    if (samples_per_domain_class == 0) throw ConfigError("synthetic: samples_per_domain_class must be positive");
    if (jitter_pos < 0 || jitter_scale < 0 || jitter_scale >= 1 || jitter_rot < 0 || shape_radius <= 0)
      throw ConfigError("synthetic: invalid jitter ranges");
    // Farthest shape point (frame corner) must stay two pixels inside the canvas.
    const double extent = jitter_pos + shape_radius * (1.0 + jitter_scale) * 1.21;
    if (extent > 1.0 - 4.0 / static_cast<double>(image_size))
      throw ConfigError("synthetic: shape does not fit the canvas (extent " + std::to_string(extent) +
                        " of the half-canvas)");
    for (int d : cue_free_domains)
      if (d < 0 || static_cast<std::size_t>(d) >= num_domains)
        throw ConfigError("synthetic: cue-free domain " + std::to_string(d) + " out of range");
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0, std::uint64_t d = 0) {
  return splitmix64(splitmix64(splitmix64(splitmix64(a) ^ b) ^ c) ^ d);
}

inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline bool inside_shape(std::size_t shape, double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y), r = std::hypot(x, y);
  switch (shape) {
    case 0: return r <= 1.0;
    case 1: return std::max(ax, ay) <= 0.8;
    case 2: return y >= -0.5 && y <= 1.0 - std::sqrt(3.0) * ax;
    case 3: return (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0);
    case 4: return r <= 1.0 && r >= 0.55;
    case 5: return ax <= 1.0 && ay <= 0.35;
    default: return std::max(ax, ay) <= 0.85 && std::max(ax, ay) >= 0.5;
  }
}

inline double style_brightness(std::size_t domain, double px, double py, std::size_t S, std::mt19937_64& rng) {
  const std::size_t style = domain % kNumStyles;
  const double period = 4.0 + 2.0 * static_cast<double>(domain / kNumStyles);
  const double band = period * static_cast<double>(S) / 32.0;
  switch (style) {
    case 0: return 0.9;
    case 1: return std::fmod(py, 2 * band) < band ? 1.0 : 0.55;
    case 2: return ((static_cast<long>(px / band) + static_cast<long>(py / band)) % 2) ? 1.0 : 0.55;
    case 3: return 0.5 + 0.5 * unit(rng);
    case 4: return std::fmod(px + py, 2 * band) < band ? 1.0 : 0.55;
    default: {
      const double cx = px / S - 0.5, cy = py / S - 0.5;
      return 1.0 - 0.9 * std::hypot(cx, cy);
    }
  }
}

}  // namespace detail

/// Renders one sample. Deterministic in (spec.seed, domain, class, index).
inline LabeledImage render_synthetic(const SyntheticSpec& spec, int domain, int cls, std::size_t index) {
  const std::size_t S = spec.image_size;
  std::mt19937_64 rng(detail::mix_seed(spec.seed, static_cast<std::uint64_t>(domain),
                                       static_cast<std::uint64_t>(cls), index));
  const bool cue_free = std::find(spec.cue_free_domains.begin(), spec.cue_free_domains.end(), domain) !=
                        spec.cue_free_domains.end();
  const int random_cue = static_cast<int>(rng() % spec.num_classes);
  const bool correlated = !cue_free && detail::unit(rng) < spec.spurious_rho;
  LabeledImage img;
  img.class_label = cls;
  img.domain_label = domain;
  img.cue_id = correlated ? cls : random_cue;
  img.pixels = Tensor<float>(Shape{3, S, S});
  img.mask.assign(S * S, 0);

  const double cx = (2 * detail::unit(rng) - 1) * spec.jitter_pos;
  const double cy = (2 * detail::unit(rng) - 1) * spec.jitter_pos;
  const double radius = spec.shape_radius * (1.0 + (2 * detail::unit(rng) - 1) * spec.jitter_scale);
  const double angle = (2 * detail::unit(rng) - 1) * spec.jitter_rot;
  const float shape_gray = 0.08f; (void)detail::unit(rng);
  const auto& hue = cue_palette()[img.cue_id];
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::normal_distribution<double> noise(0.0, 0.02);

  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      // 2x2 supersampled coverage of the shape.
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double nx = (x + 0.25 + 0.5 * sx) / S * 2 - 1 - cx;
          const double ny = 1 - (y + 0.25 + 0.5 * sy) / S * 2 - cy;
          const double lx = (ca * nx + sa * ny) / radius, ly = (-sa * nx + ca * ny) / radius;
          hits += detail::inside_shape(static_cast<std::size_t>(cls), lx, ly);
        }
      const double cover = hits / 4.0;
      img.mask[y * S + x] = cover >= 0.5;
      const double bright = detail::style_brightness(static_cast<std::size_t>(domain), x + 0.5, y + 0.5, S, rng);
      for (std::size_t c = 0; c < 3; ++c) {
        const double bg = hue[c] * bright;
        const double v = cover * shape_gray + (1 - cover) * bg + noise(rng);
        img.pixels[(c * S + y) * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  img.source = "synthetic/d" + std::to_string(domain) + "/c" + std::to_string(cls) + "/" + std::to_string(index);
  return img;
}

inline std::string synthetic_domain_name(std::size_t d) {
  std::string name = style_names()[d % kNumStyles];
  if (d >= kNumStyles) name += std::to_string(d / kNumStyles + 1);
  return name;
}

/// samples_per_domain_class images for every (domain, class) cell, ordered by
/// domain, then class, then index.
inline DomainDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  DomainDataset ds;
  ds.image_size = spec.image_size;
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.class_names.emplace_back(shape_names()[c]);
  for (std::size_t d = 0; d < spec.num_domains; ++d) ds.domain_names.push_back(synthetic_domain_name(d));
  ds.samples.reserve(spec.num_domains * spec.num_classes * spec.samples_per_domain_class);
  for (std::size_t d = 0; d < spec.num_domains; ++d)
    for (std::size_t c = 0; c < spec.num_classes; ++c)
      for (std::size_t i = 0; i < spec.samples_per_domain_class; ++i)
        ds.samples.push_back(render_synthetic(spec, static_cast<int>(d), static_cast<int>(c), i));
  return ds;
}

// ---------------------------------------------------------------------------
// Directory datasets

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Center-crops to a square and resizes with bilinear interpolation
/// (half-pixel centres, edge clamp). Output [3,S,S] in [0,1]; grey images are
/// replicated over the three channels.
inline Tensor<float> image_to_tensor(const PnmImage& img, std::size_t S) {
  const std::size_t m = std::min(img.width, img.height);
  const std::size_t x0 = (img.width - m) / 2, y0 = (img.height - m) / 2;
  Tensor<float> out(Shape{3, S, S});
  const double scale = static_cast<double>(m) / static_cast<double>(S);
  auto sample = [&](std::size_t c, std::size_t yy, std::size_t xx) {
    const std::size_t ch = img.channels == 3 ? c : 0;
    return static_cast<double>(img.samples[((y0 + yy) * img.width + (x0 + xx)) * img.channels + ch]) / img.maxval;
  };
  for (std::size_t y = 0; y < S; ++y) {
    const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, static_cast<double>(m - 1));
    const std::size_t ya = static_cast<std::size_t>(sy), yb = std::min(ya + 1, m - 1);
    const double fy = sy - ya;
    for (std::size_t x = 0; x < S; ++x) {
      const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, static_cast<double>(m - 1));
      const std::size_t xa = static_cast<std::size_t>(sx), xb = std::min(xa + 1, m - 1);
      const double fx = sx - xa;
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = sample(c, ya, xa) * (1 - fx) + sample(c, ya, xb) * fx;
        const double bot = sample(c, yb, xa) * (1 - fx) + sample(c, yb, xb) * fx;
        out[(c * S + y) * S + x] = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

namespace detail {
inline std::vector<std::string> sorted_subdirs(const std::filesystem::path& p) {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(p))
    if (e.is_directory()) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}
}  // namespace detail

/// Loads root/<domain>/<class>/<image>.{ppm,pgm}. Domains and classes are
/// indexed by sorted folder name.
inline DomainDataset load_directory(const std::filesystem::path& root, std::size_t image_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " is not a directory");
  if (image_size == 0) throw ConfigError("load_directory: image_size must be positive");
  DomainDataset ds;
  ds.image_size = image_size;
  ds.domain_names = detail::sorted_subdirs(root);
  if (ds.domain_names.empty()) throw DataError("dataset root " + root.string() + " has no domain folders");
  for (std::size_t d = 0; d < ds.domain_names.size(); ++d) {
    const auto classes = detail::sorted_subdirs(root / ds.domain_names[d]);
    if (d == 0) {
      ds.class_names = classes;
    } else if (classes != ds.class_names) {
      throw DataError("domain '" + ds.domain_names[d] + "' has a different class set than '" + ds.domain_names[0] + "'");
    }
    for (std::size_t c = 0; c < classes.size(); ++c) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(root / ds.domain_names[d] / classes[c])) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      if (files.empty())
        std::clog << "m2cl: warning: empty class folder " << (root / ds.domain_names[d] / classes[c]).string() << "\n";
      for (const auto& f : files) {
        LabeledImage img;
        img.pixels = image_to_tensor(read_pnm(f), image_size);
        img.class_label = static_cast<int>(c);
        img.domain_label = static_cast<int>(d);
        img.source = f.string();
        ds.samples.push_back(std::move(img));
      }
    }
  }
  if (ds.class_names.empty()) throw DataError("dataset root " + root.string() + " has no class folders");
  return ds;
}

/// Writes the folder layout plus manifest.tsv (path, class, domain, cue_id).
inline void write_directory(const DomainDataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  std::ofstream manifest(root / "manifest.tsv");
  if (!manifest) throw DataError("cannot write " + (root / "manifest.tsv").string());
  manifest << "path\tclass\tdomain\tcue_id\n";
  std::map<std::pair<int, int>, std::size_t> counter;
  const std::size_t S = ds.image_size;
  for (const auto& s : ds.samples) {
    const auto dir = fs::path(ds.domain_names[s.domain_label]) / ds.class_names[s.class_label];
    fs::create_directories(root / dir);
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.ppm", counter[{s.domain_label, s.class_label}]++);
    std::vector<std::uint8_t> bytes(S * S * 3);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x)
        for (std::size_t c = 0; c < 3; ++c) bytes[(y * S + x) * 3 + c] = to_byte(s.pixels[(c * S + y) * S + x]);
    write_pnm(root / dir / name, S, S, 3, bytes);
    manifest << (dir / name).generic_string() << '\t' << ds.class_names[s.class_label] << '\t'
             << ds.domain_names[s.domain_label] << '\t' << s.cue_id << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splits

struct SplitPlan {
  std::set<int> train_domains;
  std::set<int> test_domains;
  double val_fraction = 0.0;
};

struct Split {
  SplitPlan plan;
  std::vector<std::size_t> train, val, test;
};

/// Test = every sample of the held-out domains; validation = a class x domain
/// stratified share of the remaining samples; train = the rest.
inline Split plan_splits(const DomainDataset& ds, const std::set<int>& held_out, double val_fraction,
                         std::uint64_t seed) {
  if (held_out.empty()) throw ConfigError("split: no held-out domain given");
  for (int d : held_out)
    if (d < 0 || static_cast<std::size_t>(d) >= ds.num_domains())
      throw ConfigError("split: held-out domain " + std::to_string(d) + " does not exist");
  if (held_out.size() >= ds.num_domains()) throw ConfigError("split: held-out domains cover every domain");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("split: val_fraction must lie in [0,1)");
  Split s;
  s.plan.test_domains = held_out;
  s.plan.val_fraction = val_fraction;
  for (std::size_t d = 0; d < ds.num_domains(); ++d)
    if (!held_out.count(static_cast<int>(d))) s.plan.train_domains.insert(static_cast<int>(d));

  std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& smp = ds.samples[i];
    if (held_out.count(smp.domain_label))
      s.test.push_back(i);
    else
      cells[{smp.class_label, smp.domain_label}].push_back(i);
  }
  std::mt19937_64 rng(detail::mix_seed(seed, 0x5711ULL));
  for (auto& [key, idx] : cells) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
    s.val.insert(s.val.end(), idx.begin(), idx.begin() + static_cast<long>(n_val));
    s.train.insert(s.train.end(), idx.begin() + static_cast<long>(n_val), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

// ---------------------------------------------------------------------------
// Batching

/// Single-consumer stream of index batches over one pool of sample indices.
///
/// Unbalanced: a fresh permutation per epoch, cut into consecutive batches; the
/// last batch may be short. Balanced: every class with at least two pool
/// members gets an equal share of each batch (remainder rotated), drawn from
/// per-class reshuffled cycles; floor(|pool| / batch_size) batches per epoch.
class BatchStream {
 public:
  BatchStream(const DomainDataset& ds, std::vector<std::size_t> pool, std::size_t batch_size, bool balanced,
              std::uint64_t seed)
      : pool_(std::move(pool)), batch_size_(batch_size), balanced_(balanced), rng_(seed) {
    if (batch_size < 2) throw ConfigError("batching: batch_size must be >= 2");
    if (pool_.empty()) throw DataError("batching: empty sample pool");
    if (balanced_) {
      std::map<int, std::vector<std::size_t>> by_class;
      for (std::size_t i : pool_) by_class[ds.samples[i].class_label].push_back(i);
      for (auto& [c, idx] : by_class) {
        if (idx.size() < 2) {
          std::clog << "m2cl: warning: class " << c << " has fewer than 2 training samples; excluded from balanced batches\n";
          continue;
        }
        classes_.push_back({std::move(idx), 0});
      }
      if (classes_.empty()) throw DataError("batching: no class has two or more samples");
      if (batch_size < 2 * classes_.size())
        throw ConfigError("batching: balanced batches need batch_size >= 2 x classes (" +
                          std::to_string(2 * classes_.size()) + ")");
      for (auto& c : classes_) std::shuffle(c.order.begin(), c.order.end(), rng_);
    }
    start_epoch();
  }

  std::size_t batches_per_epoch() const noexcept {
    return balanced_ ? std::max<std::size_t>(1, pool_.size() / batch_size_)
                     : (pool_.size() + batch_size_ - 1) / batch_size_;
  }

  /// Next batch of this epoch, or nullopt at the epoch boundary (after which a new epoch starts).
  std::optional<std::vector<std::size_t>> next() {
    if (served_ == batches_per_epoch()) {
      start_epoch();
      return std::nullopt;
    }
    std::vector<std::size_t> batch;
    if (!balanced_) {
      const std::size_t lo = served_ * batch_size_, hi = std::min(pool_.size(), lo + batch_size_);
      batch.assign(perm_.begin() + static_cast<long>(lo), perm_.begin() + static_cast<long>(hi));
    } else {
      const std::size_t K = classes_.size(), base = batch_size_ / K, extra = batch_size_ % K;
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t quota = base + (((k + K - (rotation_ % K)) % K) < extra ? 1 : 0);
        auto& cls = classes_[k];
        for (std::size_t q = 0; q < quota; ++q) {
          if (cls.cursor == cls.order.size()) {
            std::shuffle(cls.order.begin(), cls.order.end(), rng_);
            cls.cursor = 0;
          }
          batch.push_back(cls.order[cls.cursor++]);
        }
      }
      ++rotation_;
    }
    ++served_;
    return batch;
  }

 private:
  struct ClassCycle {
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };

  void start_epoch() {
    served_ = 0;
    if (!balanced_) {
      perm_ = pool_;
      std::shuffle(perm_.begin(), perm_.end(), rng_);
    }
  }

  std::vector<std::size_t> pool_;
  std::size_t batch_size_;
  bool balanced_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> perm_;
  std::vector<ClassCycle> classes_;
  std::size_t served_ = 0;
  std::size_t rotation_ = 0;
};

template <typename T>
struct Batch {
  Tensor<T> images;  // [N,3,S,S]
  std::vector<int> classes;
  std::vector<int> domains;
};

template <typename T>
Batch<T> make_batch(const DomainDataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t S = ds.image_size, per = 3 * S * S;
  Batch<T> b;
  b.images = Tensor<T>(Shape{indices.size(), 3, S, S});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& s = ds.samples.at(indices[k]);
    std::copy(s.pixels.data(), s.pixels.data() + per, b.images.data() + k * per);
    b.classes.push_back(s.class_label);
    b.domains.push_back(s.domain_label);
  }
  return b;
}

}  // namespace m2cl
