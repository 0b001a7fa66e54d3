#include "wavg/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "wavg/errors.hpp"

namespace wavg {

void MlpSpec::validate() const {
  if (layer_widths.size() < 2) throw InputError("MlpSpec: need at least input and output widths");
  if (std::any_of(layer_widths.begin(), layer_widths.end(), [](std::size_t w) { return w == 0; })) {
    throw InputError("MlpSpec: layer widths must be positive");
  }
  if (layer_widths.back() != n_classes) {
    throw InputError("MlpSpec: last width must equal n_classes");
  }
  if (use_batchnorm.size() != hidden_layers()) {
    throw InputError("MlpSpec: one batchnorm flag per hidden layer required");
  }
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw InputError("MlpSpec: bn_momentum in [0,1]");
  if (!(bn_epsilon > 0.0)) throw InputError("MlpSpec: bn_epsilon must be positive");
}

const ParamSegment& ParamLayout::find(std::size_t layer, const std::string& name) const {
  for (const auto& s : segments) {
    if (s.layer == layer && s.name == name) return s;
  }
  throw InputError("ParamLayout: no segment " + name + " in layer " + std::to_string(layer));
}

ParamVector::ParamVector(std::shared_ptr<const ParamLayout> layout, double fill)
    : layout_(std::move(layout)), values_(layout_->total, fill) {}

ParamVector::ParamVector(std::shared_ptr<const ParamLayout> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_->total) throw InputError("ParamVector: values do not cover layout");
}

std::span<double> ParamVector::segment(std::size_t layer, const std::string& name) {
  const auto& s = layout_->find(layer, name);
  return {values_.data() + s.offset, s.length};
}

std::span<const double> ParamVector::segment(std::size_t layer, const std::string& name) const {
  const auto& s = layout_->find(layer, name);
  return {values_.data() + s.offset, s.length};
}

bool ParamVector::same_layout(const ParamVector& other) const {
  return layout_ == other.layout_ || *layout_ == *other.layout_;
}

void ParamVector::require_same_layout(const ParamVector& other, const char* what) const {
  if (!same_layout(other)) throw InputError(std::string(what) + ": parameter layouts differ");
}

double ParamVector::l2_norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return std::sqrt(s);
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void BnStats::require_same_shape(const BnStats& other, const char* what) const {
  bool ok = layers.size() == other.layers.size();
  for (std::size_t i = 0; ok && i < layers.size(); ++i) {
    ok = layers[i].layer == other.layers[i].layer &&
         layers[i].running_mean.size() == other.layers[i].running_mean.size() &&
         layers[i].running_var.size() == other.layers[i].running_var.size();
  }
  if (!ok) throw InputError(std::string(what) + ": BN statistics shapes differ");
}

namespace {

std::shared_ptr<const ParamLayout> build_layout(const MlpSpec& spec) {
  auto layout = std::make_shared<ParamLayout>();
  std::size_t offset = 0;
  auto add = [&](std::size_t layer, const char* name, std::size_t len) {
    layout->segments.push_back({layer, name, offset, len});
    offset += len;
  };
  for (std::size_t l = 0; l < spec.affine_layers(); ++l) {
    const std::size_t in = spec.layer_widths[l];
    const std::size_t out = spec.layer_widths[l + 1];
    const bool hidden = l < spec.hidden_layers();
    const bool bn = hidden && spec.use_batchnorm[l];
    add(l, "weight", in * out);
    if (bn) {
      add(l, "gamma", out);
      add(l, "beta", out);
    } else {
      add(l, "bias", out);
    }
  }
  layout->total = offset;
  return layout;
}

}  // namespace

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  layout_ = build_layout(spec_);
}

ParamVector Mlp::init_params(std::mt19937_64& rng) const {
  ParamVector p(layout_);
  for (std::size_t l = 0; l < spec_.affine_layers(); ++l) {
    const double scale = std::sqrt(2.0 / static_cast<double>(spec_.layer_widths[l]));
    std::normal_distribution<double> dist(0.0, scale);
    for (double& w : p.segment(l, "weight")) w = dist(rng);
    if (l < spec_.hidden_layers() && spec_.use_batchnorm[l]) {
      auto gamma = p.segment(l, "gamma");
      std::fill(gamma.begin(), gamma.end(), 1.0);
    }
  }
  return p;
}

BnStats Mlp::init_bn() const {
  BnStats bn;
  bn.momentum = spec_.bn_momentum;
  bn.epsilon = spec_.bn_epsilon;
  for (std::size_t l = 0; l < spec_.hidden_layers(); ++l) {
    if (!spec_.use_batchnorm[l]) continue;
    const std::size_t w = spec_.layer_widths[l + 1];
    bn.layers.push_back({l, std::vector<double>(w, 0.0), std::vector<double>(w, 1.0)});
  }
  return bn;
}

void Mlp::check_params(const ParamVector& params) const {
  if (params.size() != layout_->total || !(params.layout() == *layout_)) {
    throw InputError("Mlp: parameter layout does not match model");
  }
}

void Mlp::check_bn(const BnStats& bn) const {
  std::size_t k = 0;
  for (std::size_t l = 0; l < spec_.hidden_layers(); ++l) {
    if (!spec_.use_batchnorm[l]) continue;
    const std::size_t w = spec_.layer_widths[l + 1];
    if (k >= bn.layers.size() || bn.layers[k].layer != l || bn.layers[k].running_mean.size() != w ||
        bn.layers[k].running_var.size() != w) {
      throw InputError("Mlp: BN statistics do not match model");
    }
    ++k;
  }
  if (k != bn.layers.size()) throw InputError("Mlp: BN statistics do not match model");
}

ForwardPass Mlp::run(const ParamVector& params, BnStats* bn_train, const BnStats* bn_eval,
                     const Tensor2& batch, bool keep_cache, std::size_t stop_after_layer,
                     BatchMoments* moments) const {
  check_params(params);
  const BnStats& bn_ref = bn_train ? *bn_train : *bn_eval;
  check_bn(bn_ref);
  if (batch.cols != spec_.input_width()) {
    throw InputError("Mlp::forward: batch has " + std::to_string(batch.cols) +
                     " columns, model expects " + std::to_string(spec_.input_width()));
  }
  const bool train = bn_train != nullptr;
  const bool any_bn = !bn_ref.layers.empty();
  if (train && any_bn && batch.rows < 2) {
    throw DegenerateBatchError("Mlp::forward: train-mode batch norm needs at least 2 rows");
  }

  ForwardPass out;
  out.cache.mode = train ? Mode::kTrain : Mode::kEval;
  if (moments) {
    moments->mean.clear();
    moments->var.clear();
  }
  const std::size_t rows = batch.rows;
  const double n = static_cast<double>(rows);
  Tensor2 act = batch;
  std::size_t bn_k = 0;

  for (std::size_t l = 0; l < stop_after_layer; ++l) {
    const std::size_t in = spec_.layer_widths[l];
    const std::size_t width = spec_.layer_widths[l + 1];
    const bool hidden = l < spec_.hidden_layers();
    const bool bn = hidden && spec_.use_batchnorm[l];

    Tensor2 z(rows, width);
    gemm(rows, width, in, act.data.data(), params.segment(l, "weight").data(), z.data.data());
    if (!bn) {
      auto bias = params.segment(l, "bias");
      for (std::size_t r = 0; r < rows; ++r) {
        double* zr = z.data.data() + r * width;
        for (std::size_t c = 0; c < width; ++c) zr[c] += bias[c];
      }
    }
    if (keep_cache) out.cache.inputs.push_back(std::move(act));

    if (!hidden) {
      out.logits = std::move(z);
      return out;
    }

    Tensor2 xhat;
    std::vector<double> inv_std;
    if (bn) {
      std::vector<double> mean(width, 0.0);
      std::vector<double> var(width, 0.0);
      if (train) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < width; ++c) mean[c] += z(r, c);
        }
        for (double& m : mean) m /= n;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < width; ++c) {
            const double d = z(r, c) - mean[c];
            var[c] += d * d;
          }
        }
        for (double& v : var) v /= n;
        BnLayerStats& stats = bn_train->layers[bn_k];
        const double m = bn_train->momentum;
        for (std::size_t c = 0; c < width; ++c) {
          stats.running_mean[c] = (1.0 - m) * stats.running_mean[c] + m * mean[c];
          stats.running_var[c] = (1.0 - m) * stats.running_var[c] + m * var[c];
        }
        if (moments) {
          moments->mean.push_back(mean);
          moments->var.push_back(var);
        }
      } else {
        mean = bn_ref.layers[bn_k].running_mean;
        var = bn_ref.layers[bn_k].running_var;
      }
      inv_std.resize(width);
      for (std::size_t c = 0; c < width; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + bn_ref.epsilon);
      auto gamma = params.segment(l, "gamma");
      auto beta = params.segment(l, "beta");
      xhat = Tensor2(rows, width);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
          const double x = (z(r, c) - mean[c]) * inv_std[c];
          xhat(r, c) = x;
          z(r, c) = gamma[c] * x + beta[c];
        }
      }
      ++bn_k;
    }

    Tensor2 a(rows, width);
    for (std::size_t i = 0; i < z.data.size(); ++i) a.data[i] = z.data[i] > 0.0 ? z.data[i] : 0.0;
    if (keep_cache) {
      out.cache.normalized.push_back(std::move(xhat));
      out.cache.inv_std.push_back(std::move(inv_std));
      out.cache.pre_relu.push_back(std::move(z));
    }
    act = std::move(a);
  }
  // Stopped before the output layer: hand back the hidden activation.
  out.logits = std::move(act);
  return out;
}

ForwardPass Mlp::forward(const ParamVector& params, BnStats& bn, const Tensor2& batch, Mode mode,
                         BatchMoments* moments) const {
  if (mode == Mode::kTrain) {
    return run(params, &bn, nullptr, batch, true, spec_.affine_layers(), moments);
  }
  return run(params, nullptr, &bn, batch, true, spec_.affine_layers(), nullptr);
}

Tensor2 Mlp::predict(const ParamVector& params, const BnStats& bn, const Tensor2& batch) const {
  return run(params, nullptr, &bn, batch, false, spec_.affine_layers(), nullptr).logits;
}

Tensor2 Mlp::features(const ParamVector& params, const BnStats& bn, const Tensor2& batch) const {
  return run(params, nullptr, &bn, batch, false, spec_.hidden_layers(), nullptr).logits;
}

ParamVector Mlp::backward(const ParamVector& params, const ForwardCache& cache,
                          const Tensor2& grad_logits) const {
  if (cache.mode != Mode::kTrain) {
    throw ContractError("Mlp::backward: cache comes from an eval-mode forward");
  }
  check_params(params);
  if (cache.inputs.size() != spec_.affine_layers()) {
    throw ContractError("Mlp::backward: incomplete forward cache");
  }
  const std::size_t rows = cache.inputs.front().rows;
  if (grad_logits.rows != rows || grad_logits.cols != spec_.n_classes) {
    throw InputError("Mlp::backward: grad_logits shape mismatch");
  }

  ParamVector grad(layout_);
  Tensor2 delta = grad_logits;
  for (std::size_t l = spec_.affine_layers(); l-- > 0;) {
    const std::size_t in = spec_.layer_widths[l];
    const std::size_t width = spec_.layer_widths[l + 1];
    const Tensor2& input = cache.inputs[l];
    const bool hidden = l < spec_.hidden_layers();
    const bool bn = hidden && spec_.use_batchnorm[l];

    gemm_tn(in, width, rows, input.data.data(), delta.data.data(), grad.segment(l, "weight").data());
    if (!bn) {
      auto gb = grad.segment(l, "bias");
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) gb[c] += delta(r, c);
      }
    }
    if (l == 0) break;

    Tensor2 up(rows, in);
    gemm_nt(rows, in, width, delta.data.data(), params.segment(l, "weight").data(), up.data.data());

    // Through ReLU and (optionally) BN of hidden layer l-1.
    const std::size_t h = l - 1;
    const Tensor2& pre = cache.pre_relu[h];
    for (std::size_t i = 0; i < up.data.size(); ++i) {
      if (!(pre.data[i] > 0.0)) up.data[i] = 0.0;
    }
    if (spec_.use_batchnorm[h]) {
      const Tensor2& xhat = cache.normalized[h];
      const auto& inv_std = cache.inv_std[h];
      auto gamma = params.segment(h, "gamma");
      auto g_gamma = grad.segment(h, "gamma");
      auto g_beta = grad.segment(h, "beta");
      const double n = static_cast<double>(rows);
      std::vector<double> sum_dx(in, 0.0);
      std::vector<double> sum_dx_xhat(in, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < in; ++c) {
          const double dy = up(r, c);
          g_beta[c] += dy;
          g_gamma[c] += dy * xhat(r, c);
          const double dx = dy * gamma[c];
          sum_dx[c] += dx;
          sum_dx_xhat[c] += dx * xhat(r, c);
        }
      }
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < in; ++c) {
          const double dx = up(r, c) * gamma[c];
          up(r, c) = inv_std[c] / n * (n * dx - sum_dx[c] - xhat(r, c) * sum_dx_xhat[c]);
        }
      }
    }
    delta = std::move(up);
  }
  return grad;
}

Tensor2 softmax(const Tensor2& logits) {
  Tensor2 p(logits.rows, logits.cols);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto in = logits.row(r);
    auto out = p.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out[c] = std::exp(in[c] - mx);
      sum += out[c];
    }
    for (double& v : out) v /= sum;
  }
  return p;
}

LossAndGrad softmax_cross_entropy(const Tensor2& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows) {
    throw InputError("softmax_cross_entropy: labels length does not match logits rows");
  }
  LossAndGrad out;
  out.grad_logits = Tensor2(logits.rows, logits.cols);
  if (logits.rows == 0) return out;
  const double n = static_cast<double>(logits.rows);
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols) {
      throw InputError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    }
    auto in = logits.row(r);
    auto g = out.grad_logits.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      g[c] = std::exp(in[c] - mx);
      sum += g[c];
    }
    total += std::log(sum) - (in[static_cast<std::size_t>(y)] - mx);
    for (double& v : g) v /= sum * n;
    g[static_cast<std::size_t>(y)] -= 1.0 / n;
  }
  out.loss = total / n;
  return out;
}

double grad_check(const std::function<double(const ParamVector&)>& loss, const ParamVector& params,
                  const ParamVector& analytic, double step) {
  if (!(step > 0.0)) throw InputError("grad_check: step must be positive");
  params.require_same_layout(analytic, "grad_check");
  double worst = 0.0;
  ParamVector probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = loss(probe);
    probe[i] = orig - step;
    const double down = loss(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

double grad_check(const Mlp& model, const ParamVector& params, const BnStats& bn,
                  const Tensor2& batch, std::span<const int> labels, double step) {
  BnStats scratch = bn;
  auto pass = model.forward(params, scratch, batch, Mode::kTrain);
  auto lg = softmax_cross_entropy(pass.logits, labels);
  const ParamVector analytic = model.backward(params, pass.cache, lg.grad_logits);
  auto loss = [&](const ParamVector& p) {
    BnStats s = bn;
    return softmax_cross_entropy(model.forward(p, s, batch, Mode::kTrain).logits, labels).loss;
  };
  return grad_check(loss, params, analytic, step);
}

}  // namespace wavg
