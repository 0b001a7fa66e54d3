#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wavg/tensor.hpp"

namespace wavg {

enum class DatasetKind { kGaussianBlobs, kConcentricRings };

std::string to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& name);

// Synthetic classification task.
//  gaussian_blobs: each class is a mixture of `clusters_per_class` unit-variance
//    Gaussians whose centers lie at radius `class_separation` in random
//    directions.
//  concentric_rings: class k lies on the sphere of radius
//    (k + 1) * class_separation with unit radial noise.
//  center_shift > 0 moves the center of each class by its own random vector of
//  that norm, a shifted target domain for transfer; all other draws are
//  unchanged.
struct DatasetSpec {
  DatasetKind kind = DatasetKind::kGaussianBlobs;
  std::size_t n_samples = 10000;
  std::size_t n_features = 20;
  std::size_t n_classes = 5;
  double class_separation = 3.0;
  std::size_t clusters_per_class = 1;
  double center_shift = 0.0;
  std::uint64_t seed = 0;

  // Throws InputError (needs n_samples >= 10 * n_classes, positive sizes).
  void validate() const;
};

struct Dataset {
  Tensor2 features;
  std::vector<int> labels;
  std::size_t n_classes = 0;
  std::vector<bool> noisy_mask;  // empty unless labels were corrupted

  std::size_t size() const { return labels.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
};

// Balanced labels (class i % n_classes), features standardized per dimension
// to zero mean and unit (population) variance. Same spec → same bits.
Dataset synthesize(const DatasetSpec& spec);
// `n_test` fresh samples from the same distribution, standardized with the
// statistics of synthesize(spec).
Dataset synthesize_test(const DatasetSpec& spec, std::size_t n_test);

struct NoiseSpec {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

struct NoisyLabels {
  std::vector<int> labels;
  std::vector<bool> noisy_mask;
};

// Flips exactly round(rate * N) labels, chosen uniformly, each to a uniformly
// chosen different class.
NoisyLabels inject_noise(std::span<const int> labels, std::size_t n_classes, const NoiseSpec& spec);

struct TrainValSplit {
  Dataset train;
  Dataset validation;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> validation_indices;
};

// Stratified disjoint split. |train| = round(train_fraction * N); per-class
// train counts are floor(train_fraction * n_c) plus a largest-remainder share,
// so every class is within one sample of the exact proportion.
TrainValSplit split_train_val(const Dataset& data, std::uint64_t seed, double train_fraction = 0.8);

// Contiguous [begin, end) batches of at most `batch_size` rows; a trailing
// single row joins the previous batch so train-mode BN never sees one row.
std::vector<std::pair<std::size_t, std::size_t>> batch_bounds(std::size_t n, std::size_t batch_size);

}  // namespace wavg
