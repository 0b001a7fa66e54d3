#include "wavg/record_io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "wavg/errors.hpp"

namespace wavg {

using nlohmann::json;

namespace {

constexpr const char* kMetricNames[] = {"val_acc",         "val_loss",        "val_acc_recompute", "val_loss_recompute",
                                        "train_acc_clean", "train_acc_noisy", "track_acc",         "track_loss"};

std::optional<double> ModelMetrics::*const kMetricFields[] = {
    &ModelMetrics::val_acc,         &ModelMetrics::val_loss,        &ModelMetrics::val_acc_recompute,
    &ModelMetrics::val_loss_recompute, &ModelMetrics::train_acc_clean, &ModelMetrics::train_acc_noisy,
    &ModelMetrics::track_acc,       &ModelMetrics::track_loss};

json metrics_json(const ModelMetrics& m) {
  json j = json::object();
  for (std::size_t i = 0; i < std::size(kMetricNames); ++i) {
    if (const auto& v = m.*kMetricFields[i]) j[kMetricNames[i]] = *v;
  }
  return j;
}

ModelMetrics metrics_from(const json& j) {
  ModelMetrics m;
  for (std::size_t i = 0; i < std::size(kMetricNames); ++i) {
    if (j.contains(kMetricNames[i])) m.*kMetricFields[i] = j.at(kMetricNames[i]).get<double>();
  }
  return m;
}

json verdict_json(const std::optional<Verdict>& v) {
  if (!v) return nullptr;
  return json{{"epoch", v->epoch}, {"decay_index", v->decay_index}, {"decay", v->decay}, {"value", v->value}};
}

std::optional<Verdict> verdict_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return Verdict{j.at("epoch").get<std::size_t>(), j.at("decay_index").get<std::size_t>(), j.at("decay").get<double>(),
                 j.at("value").get<double>()};
}

}  // namespace

std::string format_record(const RunRecord& record) {
  std::string out;
  for (const auto& e : record.epochs) {
    json ema = json::array();
    for (std::size_t i = 0; i < e.ema.size(); ++i) {
      json m = metrics_json(e.ema[i]);
      m["decay"] = i < record.decays.size() ? json(record.decays[i]) : json(nullptr);
      ema.push_back(std::move(m));
    }
    json line = {{"type", "epoch"},
                 {"run_id", record.run_id},
                 {"epoch", e.epoch},
                 {"lr", e.lr},
                 {"train_loss", e.train_loss},
                 {"steps", e.steps},
                 {"ema_synced", e.ema_synced},
                 {"baseline", metrics_json(e.baseline)},
                 {"ema", std::move(ema)},
                 {"swa", e.swa ? metrics_json(*e.swa) : json(nullptr)}};
    out += line.dump();
    out += '\n';
  }
  json summary = {{"type", "summary"},
                  {"run_id", record.run_id},
                  {"seed", record.seed},
                  {"decays", record.decays},
                  {"epochs", record.epochs.size()},
                  {"best_val_acc", verdict_json(record.best_val_acc)},
                  {"lowest_val_loss", verdict_json(record.lowest_val_loss)},
                  {"failed", record.failed},
                  {"diagnostic", record.diagnostic}};
  out += summary.dump();
  out += '\n';
  return out;
}

RunRecord parse_record(const std::string& text) {
  RunRecord r;
  std::istringstream in(text);
  std::string line;
  bool have_summary = false;
  std::size_t line_no = 0;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      if (have_summary) throw InputError("record: data after the summary line");
      const json j = json::parse(line);
      const std::string type = j.at("type").get<std::string>();
      if (type == "epoch") {
        EpochRecord e;
        e.epoch = j.at("epoch").get<std::size_t>();
        e.lr = j.at("lr").get<double>();
        e.train_loss = j.at("train_loss").get<double>();
        e.steps = j.at("steps").get<std::size_t>();
        e.ema_synced = j.at("ema_synced").get<bool>();
        e.baseline = metrics_from(j.at("baseline"));
        for (const auto& m : j.at("ema")) e.ema.push_back(metrics_from(m));
        if (!j.at("swa").is_null()) e.swa = metrics_from(j.at("swa"));
        if (!r.epochs.empty() && e.epoch <= r.epochs.back().epoch) {
          throw InputError("record: epochs out of order");
        }
        r.epochs.push_back(std::move(e));
      } else if (type == "summary") {
        r.run_id = j.at("run_id").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.decays = j.at("decays").get<std::vector<double>>();
        r.best_val_acc = verdict_from(j.at("best_val_acc"));
        r.lowest_val_loss = verdict_from(j.at("lowest_val_loss"));
        r.failed = j.at("failed").get<bool>();
        r.diagnostic = j.at("diagnostic").get<std::string>();
        if (j.at("epochs").get<std::size_t>() != r.epochs.size()) throw InputError("record: epoch count mismatch");
        have_summary = true;
      } else {
        throw InputError("record: unknown line type '" + type + "'");
      }
    }
  } catch (const json::exception& e) {
    throw InputError("record line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!have_summary) throw InputError("record: missing summary line");
  return r;
}

void write_record(const std::filesystem::path& path, const RunRecord& record) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << format_record(record);
  if (!out) throw InputError("failed writing " + path.string());
}

RunRecord read_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_record(ss.str());
}

}  // namespace wavg
