#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wavg/tensor.hpp"

namespace wavg {

// Class-probability predictions over an ordered sample set.
struct PredictionSet {
  Tensor2 probs;
  std::vector<int> labels;
  std::string run_id;
  std::optional<Tensor2> logits;  // needed for temperature scaling

  static PredictionSet from_logits(Tensor2 logits, std::vector<int> labels, std::string run_id = {});
  std::size_t size() const { return labels.size(); }
  // Rows sum to 1 within 1e-9, entries >= 0, labels in range.
  void validate() const;
};

// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> row);

// Fraction of samples whose top class differs.
double churn(const PredictionSet& a, const PredictionSet& b);

// JS(p||q) = KL(p||m)/2 + KL(q||m)/2 with m = (p+q)/2, natural log, 0 log 0 = 0.
double js_divergence(std::span<const double> p, std::span<const double> q);
// Mean per-sample JS divergence.
double js_divergence(const PredictionSet& a, const PredictionSet& b);

struct EceConfig {
  std::size_t n_bins = 100;
};

// Equal-mass ECE: samples sorted by confidence (stable on index) are cut into
// n_bins contiguous bins whose sizes differ by at most one, the larger bins
// being the lowest-confidence ones. Raw [0,1] scale.
double ece_equal_mass(const PredictionSet& preds, const EceConfig& cfg = {});

struct AccuracyNll {
  double accuracy = 0.0;
  double nll = 0.0;  // mean -log(max(p_true, 1e-12))
};
AccuracyNll accuracy_nll(const PredictionSet& preds);

// Mean NLL of softmax(logits / temperature).
double scaled_nll(const Tensor2& logits, std::span<const int> labels, double temperature);

struct TemperatureFit {
  double temperature = 1.0;
  double scaled_ece = 0.0;        // ECE of eval predictions at the fitted temperature
  double holdout_nll_at_one = 0.0;
  double holdout_nll = 0.0;       // at the fitted temperature
};

// Golden-section search on log(temperature) over [ln 0.05, ln 20] (tolerance
// 1e-4) minimizing holdout NLL. If temperature 1 is at least as good as the
// search result, 1 is returned, so a flat objective yields exactly 1.
TemperatureFit temperature_scale(const PredictionSet& holdout, const PredictionSet& eval,
                                 const EceConfig& cfg = {});

// Prediction dump: CSV with header `sample_id,label,logit_0,...,logit_{C-1}`,
// doubles written in shortest round-trip form.
void write_predictions(const std::filesystem::path& path, const Tensor2& logits,
                       std::span<const int> labels);
std::string format_predictions(const Tensor2& logits, std::span<const int> labels);
PredictionSet read_predictions(const std::filesystem::path& path, std::string run_id = {});
PredictionSet parse_predictions(const std::string& text, std::string run_id = {});

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace wavg
