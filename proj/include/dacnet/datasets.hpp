#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dacnet/error.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet::data {

struct Split {
  std::vector<std::size_t> train, val, test;
};

struct Dataset {
  std::string name;
  Tensor x;                       // [N, sample shape...]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::optional<Tensor> targets;  // regression grids: [N, 1]
  Split split;
  std::vector<double> channel_mean;  // subtracted per last-axis channel, empty if not normalized

  std::size_t size() const { return x.rank() ? x.dim(0) : 0; }
  Shape sample_shape() const { return Shape(x.shape().begin() + 1, x.shape().end()); }
  std::size_t sample_size() const { return size() ? x.size() / size() : 0; }

  void validate() const {
    if (labels.size() != size()) throw DimensionError("dataset has " + std::to_string(size()) + " samples but " +
                                                      std::to_string(labels.size()) + " labels");
    for (auto l : labels)
      if (l >= num_classes) throw ContractError("label " + std::to_string(l) + " out of range");
    std::vector<char> seen(size(), 0);
    for (const auto* part : {&split.train, &split.val, &split.test})
      for (auto i : *part) {
        if (i >= size() || seen[i]) throw ContractError("split indices must partition the samples");
        seen[i] = 1;
      }
  }
};

/// Copies the samples at idx into a new [idx.size(), sample shape...] tensor.
inline Tensor gather(const Tensor& x, std::span<const std::size_t> idx) {
  const std::size_t per = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.dim(0)) throw DimensionError("gather index out of range");
    std::copy_n(x.storage().begin() + std::ptrdiff_t(idx[r] * per), per, out.storage().begin() + std::ptrdiff_t(r * per));
  }
  return out;
}

// ---- splitting and normalization ----

/// Deterministic shuffled partition of [0, n) into `folds` near-equal parts;
/// part fold_index is validation and the rest training.
inline Split kfold_split(std::size_t n, std::size_t folds, std::size_t fold_index, std::uint64_t seed) {
  if (folds < 2) throw ContractError("kfold_split needs at least 2 folds");
  if (fold_index >= folds) throw ContractError("fold index " + std::to_string(fold_index) + " out of range");
  if (n < folds) throw ContractError("fewer samples than folds");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  // explicit Fisher-Yates so the order does not depend on the standard library
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng() % (i + 1)]);
  Split s;
  const std::size_t lo = fold_index * n / folds, hi = (fold_index + 1) * n / folds;
  for (std::size_t i = 0; i < n; ++i) (i >= lo && i < hi ? s.val : s.train).push_back(perm[i]);
  return s;
}

/// Subtracts per-channel means computed over the training split only.
inline void normalize_by_train(Dataset& ds) {
  if (ds.split.train.empty()) throw ContractError("normalize_by_train needs a non-empty training split");
  const std::size_t C = ds.x.shape().back(), per = ds.sample_size();
  std::vector<double> mean(C, 0.0);
  for (auto i : ds.split.train)
    for (std::size_t p = 0; p < per; ++p) mean[p % C] += ds.x.storage()[i * per + p];
  const double count = double(ds.split.train.size() * (per / C));
  for (auto& m : mean) m /= count;
  for (std::size_t i = 0; i < ds.x.size(); ++i) ds.x.storage()[i] -= mean[i % C];
  ds.channel_mean = std::move(mean);
}

/// Per-channel means over the given samples (for leakage checks).
inline std::vector<double> channel_means(const Dataset& ds, std::span<const std::size_t> idx) {
  const std::size_t C = ds.x.shape().back(), per = ds.sample_size();
  std::vector<double> mean(C, 0.0);
  for (auto i : idx)
    for (std::size_t p = 0; p < per; ++p) mean[p % C] += ds.x.storage()[i * per + p];
  for (auto& m : mean) m /= double(idx.size() * (per / C));
  return mean;
}

// ---- CIFAR binary format ----

enum class CifarVariant { cifar10, cifar100 };

inline constexpr std::size_t cifar_pixels = 3072;

inline std::size_t cifar_label_bytes(CifarVariant v) { return v == CifarVariant::cifar10 ? 1 : 2; }

/// Reads <label bytes><1024 R><1024 G><1024 B> records into [N,32,32,3]
/// pixels scaled to [0,1]. Splits are left empty; nothing is normalized.
inline Dataset load_cifar_bin(const std::vector<std::filesystem::path>& files, CifarVariant v = CifarVariant::cifar10) {
  const std::size_t lb = cifar_label_bytes(v), rec = lb + cifar_pixels;
  const std::size_t classes = v == CifarVariant::cifar10 ? 10 : 100;
  std::vector<unsigned char> bytes;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IoError("cannot open " + f.string());
    std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (b.size() % rec != 0)
      throw FormatError(f.string() + ": size " + std::to_string(b.size()) + " is not a multiple of the " +
                        std::to_string(rec) + "-byte record");
    bytes.insert(bytes.end(), b.begin(), b.end());
  }
  const std::size_t n = bytes.size() / rec;
  Dataset ds;
  ds.name = v == CifarVariant::cifar10 ? "cifar10" : "cifar100";
  ds.num_classes = classes;
  ds.x = Tensor({n, 32, 32, 3});
  ds.labels.resize(n);
  auto& px = ds.x.storage();
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* p = bytes.data() + r * rec;
    const std::size_t label = p[lb - 1];  // fine label for the two-byte layout
    if (label >= classes)
      throw FormatError("record " + std::to_string(r) + ": label " + std::to_string(label) + " out of range");
    ds.labels[r] = label;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t q = 0; q < 1024; ++q) px[r * cifar_pixels + q * 3 + c] = p[lb + c * 1024 + q] / 255.0;
  }
  return ds;
}

inline Dataset load_cifar10_bin(const std::filesystem::path& file) { return load_cifar_bin({file}); }

/// Writes samples of a [N,32,32,3] tensor with values in [0,1] in the binary
/// record layout. Pixels are rounded to the nearest byte.
inline void write_cifar_bin(const std::filesystem::path& file, const Tensor& x, const std::vector<std::size_t>& labels,
                            CifarVariant v = CifarVariant::cifar10) {
  if (x.rank() != 4 || x.dim(1) != 32 || x.dim(2) != 32 || x.dim(3) != 3)
    throw DimensionError("CIFAR images must be [N,32,32,3], got " + shape_str(x.shape()));
  if (labels.size() != x.dim(0)) throw DimensionError("label count does not match image count");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  const std::size_t lb = cifar_label_bytes(v);
  std::vector<unsigned char> rec(lb + cifar_pixels);
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    if (labels[r] > 255) throw ContractError("label does not fit in a byte");
    std::fill(rec.begin(), rec.begin() + std::ptrdiff_t(lb), 0);
    rec[lb - 1] = static_cast<unsigned char>(labels[r]);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t q = 0; q < 1024; ++q) {
        const double v01 = std::clamp(x.storage()[r * cifar_pixels + q * 3 + c], 0.0, 1.0);
        rec[lb + c * 1024 + q] = static_cast<unsigned char>(std::lround(v01 * 255.0));
      }
    out.write(reinterpret_cast<const char*>(rec.data()), std::streamsize(rec.size()));
  }
  if (!out) throw IoError("failed writing " + file.string());
}

/// Standard CIFAR directory: training batches split by k-fold into train/val,
/// the test batch as test, then mean-normalized with training statistics.
inline Dataset load_cifar_dir(const std::filesystem::path& dir, CifarVariant v, std::size_t folds,
                              std::size_t fold_index, std::uint64_t seed) {
  std::vector<std::filesystem::path> train_files;
  std::filesystem::path test_file;
  if (v == CifarVariant::cifar10) {
    for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    test_file = dir / "test_batch.bin";
  } else {
    train_files.push_back(dir / "train.bin");
    test_file = dir / "test.bin";
  }
  Dataset ds = load_cifar_bin(train_files, v);
  const Dataset te = load_cifar_bin({test_file}, v);
  ds.split = kfold_split(ds.size(), folds, fold_index, seed);
  const std::size_t n = ds.size();
  std::vector<double> all(ds.x.storage());
  all.insert(all.end(), te.x.storage().begin(), te.x.storage().end());
  ds.x = Tensor({n + te.size(), 32, 32, 3}, std::move(all));
  ds.labels.insert(ds.labels.end(), te.labels.begin(), te.labels.end());
  for (std::size_t i = 0; i < te.size(); ++i) ds.split.test.push_back(n + i);
  normalize_by_train(ds);
  ds.validate();
  return ds;
}

// ---- synthetic generators ----

inline constexpr double square_margin = 0.1;

/// Points in [-2,2]^2 labeled 1 inside the unit L1 ball; samples within
/// square_margin of its boundary are rejected.
inline Dataset gen_square_dataset(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("gen_square_dataset needs n >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Dataset ds;
  ds.name = "square";
  ds.num_classes = 2;
  ds.x = Tensor({n, 2});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n;) {
    const double a = u(rng), b = u(rng), l1 = std::abs(a) + std::abs(b);
    if (std::abs(1.0 - l1) < square_margin) continue;
    ds.x.storage()[2 * i] = a;
    ds.x.storage()[2 * i + 1] = b;
    ds.labels[i] = l1 < 1.0 ? 1 : 0;
    ++i;
  }
  ds.split.train.resize(n);
  std::iota(ds.split.train.begin(), ds.split.train.end(), 0);
  return ds;
}

inline std::size_t square_label(double a, double b) { return std::abs(a) + std::abs(b) < 1.0 ? 1 : 0; }

/// Three collinear points in the unit square; the middle one is the odd class.
inline Dataset gen_three_point_dataset() {
  Dataset ds;
  ds.name = "three-point";
  ds.num_classes = 2;
  ds.x = Tensor({3, 2}, std::vector<double>{0.5 / 3, 1.5 / 3, 1.2 / 3, 2.2 / 3, 1.9 / 3, 2.9 / 3});
  ds.labels = {0, 1, 0};
  ds.split.train = {0, 1, 2};
  return ds;
}

/// Isotropic Gaussian clusters with centers evenly spaced on a circle of the
/// given radius (first two coordinates).
inline Dataset gen_blobs(std::size_t n, std::size_t classes, std::size_t dim, std::uint64_t seed, double radius = 3.0,
                         double spread = 0.5) {
  if (n == 0 || classes < 2 || dim < 2) throw ContractError("gen_blobs needs n >= 1, classes >= 2, dim >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, spread);
  Dataset ds;
  ds.name = "blobs";
  ds.num_classes = classes;
  ds.x = Tensor({n, dim});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    const double ang = 2 * std::numbers::pi * double(c) / double(classes);
    for (std::size_t k = 0; k < dim; ++k) {
      const double center = k == 0 ? radius * std::cos(ang) : k == 1 ? radius * std::sin(ang) : 0.0;
      ds.x.storage()[i * dim + k] = center + z(rng);
    }
    ds.labels[i] = c;
  }
  ds.split.train.resize(n);
  std::iota(ds.split.train.begin(), ds.split.train.end(), 0);
  return ds;
}

/// Regular grid on [-1,1]^d with per_axis points per axis and targets f(x).
inline Dataset gen_function_grid(const std::function<double(std::span<const double>)>& f, std::size_t d,
                                 std::size_t per_axis) {
  if (d < 1 || d > 2) throw ContractError("function grids are 1-D or 2-D");
  if (per_axis < 2) throw ContractError("grid needs at least 2 points per axis");
  const std::size_t n = d == 1 ? per_axis : per_axis * per_axis;
  Dataset ds;
  ds.name = "grid";
  ds.num_classes = 1;
  ds.x = Tensor({n, d});
  ds.targets = Tensor({n, 1});
  ds.labels.assign(n, 0);
  const double h = 2.0 / double(per_axis - 1);
  for (std::size_t i = 0; i < n; ++i) {
    double p[2] = {-1.0 + h * double(i % per_axis), d == 2 ? -1.0 + h * double(i / per_axis) : 0.0};
    for (std::size_t k = 0; k < d; ++k) ds.x.storage()[i * d + k] = p[k];
    ds.targets->storage()[i] = f(std::span<const double>(p, d));
  }
  ds.split.train.resize(n);
  std::iota(ds.split.train.begin(), ds.split.train.end(), 0);
  return ds;
}

/// Image classification set: each class has a fixed smooth random template
/// (a few oriented sinusoids per channel); samples are the template shifted
/// by up to max_shift pixels (circularly) plus Gaussian pixel noise. Class
/// templates depend only on template_seed, so separately drawn sets share them.
inline Dataset gen_pattern_images(std::size_t n, std::size_t classes, std::size_t H, std::size_t W, std::size_t C,
                                  std::uint64_t seed, double noise = 0.3, std::size_t max_shift = 2,
                                  std::uint64_t template_seed = 2024) {
  if (n == 0 || classes < 2 || H == 0 || W == 0 || C == 0) throw ContractError("gen_pattern_images: bad sizes");
  std::mt19937_64 trng(template_seed);
  std::uniform_real_distribution<double> uf(0.5, 3.0), ua(0.0, 2 * std::numbers::pi);
  std::vector<double> templ(classes * H * W * C, 0.0);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t ch = 0; ch < C; ++ch)
      for (int wave = 0; wave < 3; ++wave) {
        const double fx = uf(trng), fy = uf(trng), ph = ua(trng), rot = ua(trng);
        const double kx = fx * std::cos(rot), ky = fy * std::sin(rot);
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x)
            templ[((c * H + y) * W + x) * C + ch] +=
                std::sin(2 * std::numbers::pi * (kx * double(x) / double(W) + ky * double(y) / double(H)) + ph) / 1.5;
      }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, noise);
  std::uniform_int_distribution<int> sh(-int(max_shift), int(max_shift));
  Dataset ds;
  ds.name = "patterns";
  ds.num_classes = classes;
  ds.x = Tensor({n, H, W, C});
  ds.labels.resize(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = order[i] % classes;
    ds.labels[i] = c;
    const int dy = sh(rng), dx = sh(rng);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sy = std::size_t((int(y) + dy + int(H)) % int(H)), sx = std::size_t((int(x) + dx + int(W)) % int(W));
        for (std::size_t ch = 0; ch < C; ++ch)
          ds.x.storage()[((i * H + y) * W + x) * C + ch] = templ[((c * H + sy) * W + sx) * C + ch] + z(rng);
      }
  }
  ds.split.train.resize(n);
  std::iota(ds.split.train.begin(), ds.split.train.end(), 0);
  return ds;
}

/// Feature vectors [N,d] as constant-plane images [N,H,W,d], so image models
/// can consume the low-dimensional toy sets.
inline Dataset embed_as_images(const Dataset& ds, std::size_t H, std::size_t W) {
  if (ds.x.rank() != 2) throw DimensionError("embed_as_images expects [N,d] features, got " + shape_str(ds.x.shape()));
  const std::size_t n = ds.size(), d = ds.x.dim(1);
  Dataset out = ds;
  out.x = Tensor({n, H, W, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < H * W; ++p)
      for (std::size_t k = 0; k < d; ++k) out.x.storage()[(i * H * W + p) * d + k] = ds.x.storage()[i * d + k];
  return out;
}

/// Moves the last `count` training samples (in index order) to the test split.
inline void hold_out(Dataset& ds, std::size_t count) {
  if (count >= ds.split.train.size()) throw ContractError("hold_out would leave no training samples");
  ds.split.test.insert(ds.split.test.end(), ds.split.train.end() - std::ptrdiff_t(count), ds.split.train.end());
  ds.split.train.resize(ds.split.train.size() - count);
}

/// CSV export `x1,x2,...,label` (feature datasets only).
inline void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  if (ds.x.rank() != 2) throw DimensionError("CSV export needs [N,d] features");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  const std::size_t d = ds.x.dim(1);
  for (std::size_t k = 0; k < d; ++k) out << "x" << k + 1 << ",";
  out << "label\n";
  out.precision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) out << ds.x.storage()[i * d + k] << ",";
    out << ds.labels[i] << "\n";
  }
}

}  // namespace dacnet::data
