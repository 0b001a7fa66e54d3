#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "wavg/tensor.hpp"

namespace wavg {

// Feed-forward classifier: affine layers with optional batch normalization
// and ReLU on every hidden layer. `layer_widths` runs from the input width
// to `n_classes`. A hidden layer with batch norm has no affine bias.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  std::vector<bool> use_batchnorm;  // one flag per hidden layer
  std::size_t n_classes = 0;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  std::size_t input_width() const { return layer_widths.front(); }
  std::size_t hidden_layers() const { return layer_widths.size() - 2; }
  std::size_t affine_layers() const { return layer_widths.size() - 1; }
  std::size_t feature_width() const { return layer_widths[layer_widths.size() - 2]; }

  // Throws InputError when widths and flags are inconsistent. A spec with no
  // hidden layer is a plain linear (softmax regression) model.
  void validate() const;

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

struct ParamSegment {
  std::size_t layer = 0;
  std::string name;  // "weight" | "bias" | "gamma" | "beta"
  std::size_t offset = 0;
  std::size_t length = 0;

  friend bool operator==(const ParamSegment&, const ParamSegment&) = default;
};

// Contiguous, non-overlapping segments covering the flat parameter vector.
struct ParamLayout {
  std::vector<ParamSegment> segments;
  std::size_t total = 0;

  const ParamSegment& find(std::size_t layer, const std::string& name) const;
  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;
};

// Flat ordered vector of all trainable parameters of a model.
class ParamVector {
 public:
  ParamVector() : layout_(std::make_shared<ParamLayout>()) {}
  explicit ParamVector(std::shared_ptr<const ParamLayout> layout, double fill = 0.0);
  ParamVector(std::shared_ptr<const ParamLayout> layout, std::vector<double> values);

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> segment(std::size_t layer, const std::string& name);
  std::span<const double> segment(std::size_t layer, const std::string& name) const;

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }
  bool same_layout(const ParamVector& other) const;
  // Throws InputError naming `what` when the layouts differ.
  void require_same_layout(const ParamVector& other, const char* what) const;

  double l2_norm() const;
  bool all_finite() const;

  // Bitwise value equality with identical layouts.
  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.same_layout(b) && a.values_ == b.values_;
  }

 private:
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> values_;
};

struct BnLayerStats {
  std::size_t layer = 0;  // index of the hidden layer this BN belongs to
  std::vector<double> running_mean;
  std::vector<double> running_var;

  friend bool operator==(const BnLayerStats&, const BnLayerStats&) = default;
};

// Running batch-norm statistics, kept apart from ParamVector because they are
// averaged or recomputed under their own policy.
struct BnStats {
  std::vector<BnLayerStats> layers;
  double momentum = 0.1;
  double epsilon = 1e-5;

  bool empty() const { return layers.empty(); }
  // Throws InputError if the shapes differ.
  void require_same_shape(const BnStats& other, const char* what) const;

  friend bool operator==(const BnStats&, const BnStats&) = default;
};

enum class Mode { kTrain, kEval };

// Everything backward needs from one forward pass.
struct ForwardCache {
  Mode mode = Mode::kEval;
  std::vector<Tensor2> inputs;        // input to affine layer l
  std::vector<Tensor2> normalized;    // xhat for BN layers (empty otherwise)
  std::vector<std::vector<double>> inv_std;
  std::vector<Tensor2> pre_relu;      // output of BN (or affine) before ReLU
};

struct ForwardPass {
  Tensor2 logits;
  ForwardCache cache;
};

// Per-BN-layer batch moments observed during a train-mode forward.
struct BatchMoments {
  std::vector<std::vector<double>> mean;
  std::vector<std::vector<double>> var;
};

class Mlp {
 public:
  explicit Mlp(MlpSpec spec);

  const MlpSpec& spec() const { return spec_; }
  const std::shared_ptr<const ParamLayout>& layout() const { return layout_; }

  // He-style fan-in scaled normal weights; zero biases, unit gamma, zero beta.
  ParamVector init_params(std::mt19937_64& rng) const;
  ParamVector zero_params() const { return ParamVector(layout_); }
  // Fresh running statistics: mean 0, variance 1.
  BnStats init_bn() const;

  // Train mode normalizes by batch statistics and moves `bn` toward them by
  // bn_momentum; eval mode reads `bn` only. `moments`, when given,
  // receives the batch statistics seen in train mode.
  ForwardPass forward(const ParamVector& params, BnStats& bn, const Tensor2& batch, Mode mode,
                      BatchMoments* moments = nullptr) const;
  // Eval-mode logits, no cache.
  Tensor2 predict(const ParamVector& params, const BnStats& bn, const Tensor2& batch) const;
  // Eval-mode output of the last hidden layer (the feature extractor).
  Tensor2 features(const ParamVector& params, const BnStats& bn, const Tensor2& batch) const;

  ParamVector backward(const ParamVector& params, const ForwardCache& cache,
                       const Tensor2& grad_logits) const;

 private:
  ForwardPass run(const ParamVector& params, BnStats* bn_train, const BnStats* bn_eval,
                  const Tensor2& batch, bool keep_cache, std::size_t stop_after_layer,
                  BatchMoments* moments) const;
  void check_params(const ParamVector& params) const;
  void check_bn(const BnStats& bn) const;

  MlpSpec spec_;
  std::shared_ptr<const ParamLayout> layout_;
};

struct LossAndGrad {
  double loss = 0.0;
  Tensor2 grad_logits;
};

// Row-wise softmax with max subtraction.
Tensor2 softmax(const Tensor2& logits);
// Mean negative log-likelihood and its gradient (softmax - onehot) / rows.
LossAndGrad softmax_cross_entropy(const Tensor2& logits, std::span<const int> labels);

// Worst relative error between `analytic` and central differences of `loss`
// with the given step. Relative error is |a - n| / max(|a|, |n|, 1e-6).
// An empty parameter vector yields 0.
double grad_check(const std::function<double(const ParamVector&)>& loss, const ParamVector& params,
                  const ParamVector& analytic, double step);

// Same, for the model's train-mode cross-entropy loss on one batch.
double grad_check(const Mlp& model, const ParamVector& params, const BnStats& bn,
                  const Tensor2& batch, std::span<const int> labels, double step);

}  // namespace wavg
