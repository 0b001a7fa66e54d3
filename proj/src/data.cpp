#include "wavg/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "wavg/errors.hpp"
#include "wavg/seeds.hpp"

namespace wavg {

std::string to_string(DatasetKind kind) {
  return kind == DatasetKind::kGaussianBlobs ? "gaussian_blobs" : "concentric_rings";
}

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "gaussian_blobs") return DatasetKind::kGaussianBlobs;
  if (name == "concentric_rings") return DatasetKind::kConcentricRings;
  throw InputError("unknown dataset kind '" + name + "'");
}

void DatasetSpec::validate() const {
  if (n_classes == 0) throw InputError("DatasetSpec: n_classes must be positive");
  if (n_features == 0) throw InputError("DatasetSpec: n_features must be positive");
  if (n_samples < 10 * n_classes) throw InputError("DatasetSpec: need n_samples >= 10 * n_classes");
  if (!(class_separation > 0.0)) throw InputError("DatasetSpec: class_separation must be positive");
  if (clusters_per_class == 0) throw InputError("DatasetSpec: clusters_per_class must be positive");
  if (!(center_shift >= 0.0)) throw InputError("DatasetSpec: center_shift must be non-negative");
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.features = take_rows(features, indices);
  out.n_classes = n_classes;
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels[i]);
  if (!noisy_mask.empty()) {
    out.noisy_mask.reserve(indices.size());
    for (auto i : indices) out.noisy_mask.push_back(noisy_mask[i]);
  }
  return out;
}

namespace {

std::vector<double> random_direction(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = normal(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

// Unstandardized samples drawn from the stream `stream` of the spec's seed.
Dataset generate(const DatasetSpec& spec, std::size_t n, std::string_view stream) {
  spec.validate();
  const std::size_t dim = spec.n_features;
  const std::size_t n_centers = spec.n_classes * spec.clusters_per_class;

  std::mt19937_64 center_rng(derive_seed(spec.seed, "centers"));
  std::vector<std::vector<double>> centers;
  for (std::size_t c = 0; c < n_centers; ++c) {
    auto dir = random_direction(center_rng, dim);
    for (double& x : dir) x *= spec.class_separation;
    centers.push_back(std::move(dir));
  }
  // One offset per class, shared by that class's clusters.
  std::vector<std::vector<double>> offsets(spec.n_classes, std::vector<double>(dim, 0.0));
  if (spec.center_shift > 0.0) {
    std::mt19937_64 shift_rng(derive_seed(spec.seed, "shift"));
    for (auto& off : offsets) {
      off = random_direction(shift_rng, dim);
      for (double& x : off) x *= spec.center_shift;
    }
  }

  std::mt19937_64 rng(derive_seed(spec.seed, stream));
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset out;
  out.n_classes = spec.n_classes;
  out.features = Tensor2(n, dim);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % spec.n_classes;
    out.labels[i] = static_cast<int>(k);
    auto row = out.features.row(i);
    if (spec.kind == DatasetKind::kGaussianBlobs) {
      const std::size_t cluster = (i / spec.n_classes) % spec.clusters_per_class;
      const auto& center = centers[k * spec.clusters_per_class + cluster];
      for (std::size_t d = 0; d < dim; ++d) row[d] = center[d] + offsets[k][d] + normal(rng);
    } else {
      const auto dir = random_direction(rng, dim);
      const double radius = static_cast<double>(k + 1) * spec.class_separation + normal(rng);
      for (std::size_t d = 0; d < dim; ++d) row[d] = offsets[k][d] + radius * dir[d];
    }
  }
  return out;
}

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Tensor2& x) {
    Standardizer s;
    s.mean.assign(x.cols, 0.0);
    s.scale.assign(x.cols, 1.0);
    const double n = static_cast<double>(x.rows);
    for (std::size_t r = 0; r < x.rows; ++r) {
      for (std::size_t c = 0; c < x.cols; ++c) s.mean[c] += x(r, c);
    }
    for (double& m : s.mean) m /= n;
    std::vector<double> var(x.cols, 0.0);
    for (std::size_t r = 0; r < x.rows; ++r) {
      for (std::size_t c = 0; c < x.cols; ++c) {
        const double d = x(r, c) - s.mean[c];
        var[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double sd = std::sqrt(var[c] / n);
      s.scale[c] = sd > 0.0 ? sd : 1.0;
    }
    return s;
  }

  void apply(Tensor2& x) const {
    for (std::size_t r = 0; r < x.rows; ++r) {
      for (std::size_t c = 0; c < x.cols; ++c) x(r, c) = (x(r, c) - mean[c]) / scale[c];
    }
  }
};

}  // namespace

Dataset synthesize(const DatasetSpec& spec) {
  Dataset d = generate(spec, spec.n_samples, "samples");
  Standardizer::fit(d.features).apply(d.features);
  return d;
}

Dataset synthesize_test(const DatasetSpec& spec, std::size_t n_test) {
  const Dataset pool = generate(spec, spec.n_samples, "samples");
  Dataset test = generate(spec, n_test, "test");
  Standardizer::fit(pool.features).apply(test.features);
  return test;
}

NoisyLabels inject_noise(std::span<const int> labels, std::size_t n_classes, const NoiseSpec& spec) {
  if (!(spec.rate >= 0.0 && spec.rate <= 1.0)) throw InputError("inject_noise: rate must be in [0,1]");
  NoisyLabels out;
  out.labels.assign(labels.begin(), labels.end());
  out.noisy_mask.assign(labels.size(), false);
  const auto n_flip = static_cast<std::size_t>(std::llround(spec.rate * static_cast<double>(labels.size())));
  if (n_flip == 0) return out;
  if (n_classes < 2) throw InputError("inject_noise: cannot flip labels with fewer than 2 classes");

  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<std::size_t> offset(1, n_classes - 1);
  for (std::size_t i = 0; i < n_flip; ++i) {
    const std::size_t idx = order[i];
    const auto y = static_cast<std::size_t>(labels[idx]);
    out.labels[idx] = static_cast<int>((y + offset(rng)) % n_classes);
    out.noisy_mask[idx] = true;
  }
  return out;
}

TrainValSplit split_train_val(const Dataset& data, std::uint64_t seed, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InputError("split: train_fraction must be in (0,1)");
  }
  const std::size_t n = data.size();
  if (n < 10) throw InputError("split: need at least 10 samples");
  std::size_t n_classes = data.n_classes;
  for (int y : data.labels) n_classes = std::max(n_classes, static_cast<std::size_t>(y) + 1);

  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  std::vector<std::size_t> take(n_classes);
  std::vector<double> remainder(n_classes);
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < n_classes; ++k) {
    const double exact = train_fraction * static_cast<double>(by_class[k].size());
    take[k] = static_cast<std::size_t>(std::floor(exact));
    remainder[k] = exact - std::floor(exact);
    assigned += take[k];
  }
  std::vector<std::size_t> order(n_classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < target && i < n_classes; ++i) {
    ++take[order[i]];
    ++assigned;
  }

  std::mt19937_64 rng(seed);
  TrainValSplit out;
  for (std::size_t k = 0; k < n_classes; ++k) {
    auto members = by_class[k];
    std::shuffle(members.begin(), members.end(), rng);
    out.train_indices.insert(out.train_indices.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take[k]));
    out.validation_indices.insert(out.validation_indices.end(), members.begin() + static_cast<std::ptrdiff_t>(take[k]),
                                  members.end());
  }
  std::sort(out.train_indices.begin(), out.train_indices.end());
  std::sort(out.validation_indices.begin(), out.validation_indices.end());
  out.train = data.subset(out.train_indices);
  out.validation = data.subset(out.validation_indices);
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> batch_bounds(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw InputError("batch_bounds: batch size must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t begin = 0; begin < n;) {
    std::size_t end = std::min(begin + batch_size, n);
    if (n - end == 1 && batch_size > 1) end = n;
    out.emplace_back(begin, end);
    begin = end;
  }
  return out;
}

}  // namespace wavg
