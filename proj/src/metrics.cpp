#include "wavg/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "wavg/errors.hpp"
#include "wavg/model.hpp"

namespace wavg {

PredictionSet PredictionSet::from_logits(Tensor2 logits, std::vector<int> labels, std::string run_id) {
  PredictionSet p;
  p.probs = softmax(logits);
  p.labels = std::move(labels);
  p.run_id = std::move(run_id);
  p.logits = std::move(logits);
  p.validate();
  return p;
}

void PredictionSet::validate() const {
  if (labels.size() != probs.rows) throw InputError("PredictionSet: labels length differs from rows");
  if (logits && (logits->rows != probs.rows || logits->cols != probs.cols)) {
    throw InputError("PredictionSet: logits shape differs from probs");
  }
  for (std::size_t r = 0; r < probs.rows; ++r) {
    double s = 0.0;
    for (double v : probs.row(r)) {
      if (!(v >= 0.0)) throw InputError("PredictionSet: negative or NaN probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw InputError("PredictionSet: row does not sum to 1");
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= probs.cols) {
      throw InputError("PredictionSet: label out of range");
    }
  }
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

namespace {

void require_aligned(const PredictionSet& a, const PredictionSet& b, const char* what) {
  if (a.probs.rows != b.probs.rows || a.probs.cols != b.probs.cols) {
    throw InputError(std::string(what) + ": prediction sets differ in size");
  }
}

double xlogy_ratio(double x, double y) { return x > 0.0 ? x * std::log(x / y) : 0.0; }

}  // namespace

double churn(const PredictionSet& a, const PredictionSet& b) {
  require_aligned(a, b, "churn");
  if (a.probs.rows == 0) return 0.0;
  std::size_t diff = 0;
  for (std::size_t r = 0; r < a.probs.rows; ++r) {
    if (argmax(a.probs.row(r)) != argmax(b.probs.row(r))) ++diff;
  }
  return static_cast<double>(diff) / static_cast<double>(a.probs.rows);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InputError("js_divergence: distributions differ in length");
  double kl_p = 0.0;
  double kl_q = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double m = 0.5 * (p[c] + q[c]);
    kl_p += xlogy_ratio(p[c], m);
    kl_q += xlogy_ratio(q[c], m);
  }
  return std::max(0.0, 0.5 * kl_p + 0.5 * kl_q);
}

double js_divergence(const PredictionSet& a, const PredictionSet& b) {
  require_aligned(a, b, "js_divergence");
  if (a.probs.rows == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < a.probs.rows; ++r) total += js_divergence(a.probs.row(r), b.probs.row(r));
  return total / static_cast<double>(a.probs.rows);
}

double ece_equal_mass(const PredictionSet& preds, const EceConfig& cfg) {
  const std::size_t n = preds.probs.rows;
  if (cfg.n_bins == 0) throw InputError("ece_equal_mass: need at least one bin");
  if (cfg.n_bins > n) {
    throw InputError("ece_equal_mass: " + std::to_string(cfg.n_bins) + " bins for " + std::to_string(n) +
                     " samples");
  }
  std::vector<double> conf(n);
  std::vector<double> correct(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = preds.probs.row(r);
    const std::size_t top = argmax(row);
    conf[r] = row[top];
    correct[r] = static_cast<int>(top) == preds.labels[r] ? 1.0 : 0.0;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return conf[i] < conf[j]; });

  const std::size_t base = n / cfg.n_bins;
  const std::size_t extra = n % cfg.n_bins;
  double ece = 0.0;
  std::size_t pos = 0;
  for (std::size_t b = 0; b < cfg.n_bins; ++b) {
    const std::size_t size = base + (b < extra ? 1 : 0);
    double acc = 0.0;
    double cf = 0.0;
    for (std::size_t i = pos; i < pos + size; ++i) {
      acc += correct[order[i]];
      cf += conf[order[i]];
    }
    const double sz = static_cast<double>(size);
    ece += (sz / static_cast<double>(n)) * std::abs(acc / sz - cf / sz);
    pos += size;
  }
  return ece;
}

AccuracyNll accuracy_nll(const PredictionSet& preds) {
  AccuracyNll out;
  const std::size_t n = preds.probs.rows;
  if (n == 0) return out;
  double hits = 0.0;
  double nll = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = preds.probs.row(r);
    const auto y = static_cast<std::size_t>(preds.labels[r]);
    if (argmax(row) == y) hits += 1.0;
    nll -= std::log(std::max(row[y], 1e-12));
  }
  out.accuracy = hits / static_cast<double>(n);
  out.nll = nll / static_cast<double>(n);
  return out;
}

double scaled_nll(const Tensor2& logits, std::span<const int> labels, double temperature) {
  Tensor2 z = logits;
  for (double& v : z.data) v /= temperature;
  return softmax_cross_entropy(z, labels).loss;
}

TemperatureFit temperature_scale(const PredictionSet& holdout, const PredictionSet& eval,
                                 const EceConfig& cfg) {
  if (!holdout.logits || !eval.logits) throw InputError("temperature_scale: logits required");
  const Tensor2& hl = *holdout.logits;
  auto objective = [&](double log_t) { return scaled_nll(hl, holdout.labels, std::exp(log_t)); };

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = std::log(0.05);
  double hi = std::log(20.0);
  double x1 = hi - inv_phi * (hi - lo);
  double x2 = lo + inv_phi * (hi - lo);
  double f1 = objective(x1);
  double f2 = objective(x2);
  while (hi - lo > 1e-4) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = objective(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = objective(x2);
    }
  }
  const double log_t = 0.5 * (lo + hi);
  double best = objective(log_t);
  double temperature = std::exp(log_t);

  TemperatureFit fit;
  fit.holdout_nll_at_one = objective(0.0);
  if (fit.holdout_nll_at_one <= best) {
    temperature = 1.0;
    best = fit.holdout_nll_at_one;
  }
  fit.temperature = temperature;
  fit.holdout_nll = best;

  Tensor2 scaled = *eval.logits;
  for (double& v : scaled.data) v /= temperature;
  fit.scaled_ece = ece_equal_mass(PredictionSet::from_logits(std::move(scaled), eval.labels), cfg);
  return fit;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_predictions(const Tensor2& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows) throw InputError("write_predictions: labels length differs from rows");
  std::string out = "sample_id,label";
  for (std::size_t c = 0; c < logits.cols; ++c) out += ",logit_" + std::to_string(c);
  out += '\n';
  for (std::size_t r = 0; r < logits.rows; ++r) {
    out += std::to_string(r);
    out += ',';
    out += std::to_string(labels[r]);
    for (double v : logits.row(r)) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

void write_predictions(const std::filesystem::path& path, const Tensor2& logits,
                       std::span<const int> labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("write_predictions: cannot open " + path.string());
  out << format_predictions(logits, labels);
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view s, std::size_t line_no) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw InputError("predictions: bad number '" + std::string(s) + "' on line " + std::to_string(line_no));
  }
  return v;
}

}  // namespace

PredictionSet parse_predictions(const std::string& text, std::string run_id) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw InputError("predictions: empty file");
  const auto header = split_commas(line);
  if (header.size() < 3 || header[0] != "sample_id" || header[1] != "label") {
    throw InputError("predictions: bad header");
  }
  const std::size_t classes = header.size() - 2;
  for (std::size_t c = 0; c < classes; ++c) {
    if (header[c + 2] != "logit_" + std::to_string(c)) throw InputError("predictions: bad header");
  }
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() != classes + 2) {
      throw InputError("predictions: wrong field count on line " + std::to_string(line_no));
    }
    if (parse_number<std::size_t>(fields[0], line_no) != labels.size()) {
      throw InputError("predictions: sample ids must be 0..N-1 in order");
    }
    labels.push_back(parse_number<int>(fields[1], line_no));
    for (std::size_t c = 0; c < classes; ++c) values.push_back(parse_number<double>(fields[c + 2], line_no));
  }
  const std::size_t rows = labels.size();
  return PredictionSet::from_logits(Tensor2(rows, classes, std::move(values)), std::move(labels),
                                    std::move(run_id));
}

PredictionSet read_predictions(const std::filesystem::path& path, std::string run_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("read_predictions: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_predictions(ss.str(), std::move(run_id));
}

}  // namespace wavg
