#include "hierdoc/training.hpp"

#include "hierdoc/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace hierdoc {

namespace {

std::string real(double v) {
  if (std::isnan(v)) return "NA";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

double number_or_nan(const nlohmann::json& j) {
  return j.is_null() ? std::nan("") : j.get<double>();
}

}  // namespace

// ---- settings -------------------------------------------------------------

void OptimizerSettings::validate(std::string_view prefix) const {
  auto fail = [&](const char* field, const char* why) {
    throw ConfigError(std::string(prefix) + "." + field + ": " + why);
  };
  if (!(learning_rate > 0)) fail("learning_rate", "must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) fail("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("beta2", "must lie in [0, 1)");
  if (!(epsilon > 0)) fail("epsilon", "must be positive");
  if (weight_decay < 0) fail("weight_decay", "must be non-negative");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) fail("warmup_fraction", "must lie in [0, 1)");
}

OptimizerSettings OptimizerSettings::adam_default() { return {}; }

OptimizerSettings OptimizerSettings::bert_adam_default() {
  OptimizerSettings s;
  s.kind = OptimizerKind::adam_weight_decay;
  s.learning_rate = 5e-5;
  s.epsilon = 1e-6;
  s.weight_decay = 0.01;
  s.warmup_fraction = 0.1;
  return s;
}

nlohmann::json to_json(const OptimizerSettings& s) {
  return {{"kind", s.kind == OptimizerKind::adam ? "adam" : "adam_weight_decay"},
          {"learning_rate", s.learning_rate},
          {"beta1", s.beta1},
          {"beta2", s.beta2},
          {"epsilon", s.epsilon},
          {"weight_decay", s.weight_decay},
          {"warmup_fraction", s.warmup_fraction}};
}

OptimizerSettings optimizer_settings_from_json(const nlohmann::json& j, std::string_view prefix) {
  reject_unknown_keys(j, prefix, {"kind", "learning_rate", "beta1", "beta2", "epsilon", "weight_decay", "warmup_fraction"});
  OptimizerSettings s;
  const std::string kind = json_field(j, "kind", std::string("adam"), prefix);
  if (kind == "adam") {
    s.kind = OptimizerKind::adam;
  } else if (kind == "adam_weight_decay") {
    s = OptimizerSettings::bert_adam_default();
  } else {
    throw ConfigError(std::string(prefix) + ".kind: must be adam or adam_weight_decay, got " + kind);
  }
  s.learning_rate = json_field(j, "learning_rate", s.learning_rate, prefix);
  s.beta1 = json_field(j, "beta1", s.beta1, prefix);
  s.beta2 = json_field(j, "beta2", s.beta2, prefix);
  s.epsilon = json_field(j, "epsilon", s.epsilon, prefix);
  s.weight_decay = json_field(j, "weight_decay", s.weight_decay, prefix);
  s.warmup_fraction = json_field(j, "warmup_fraction", s.warmup_fraction, prefix);
  s.validate(prefix);
  return s;
}

// ---- Adam -----------------------------------------------------------------

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               const OptimizerSettings& settings, double learning_rate, bool decay) {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be positive");
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(params.size()) +
                                " parameters");
  }
  if (state.step == 0) {
    state.first_moment.assign(params.size(), T(0));
    state.second_moment.assign(params.size(), T(0));
  } else if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state shape mismatch");
  }
  ++state.step;
  const double b1 = settings.beta1, b2 = settings.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const bool apply_decay = decay && settings.kind == OptimizerKind::adam_weight_decay &&
                           settings.weight_decay > 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = b1 * state.first_moment[i] + (1.0 - b1) * g;
    const double v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
    state.first_moment[i] = static_cast<T>(m);
    state.second_moment[i] = static_cast<T>(v);
    double update = (m / c1) / (std::sqrt(v / c2) + settings.epsilon);
    if (apply_decay) update += settings.weight_decay * static_cast<double>(params[i]);
    params[i] = static_cast<T>(static_cast<double>(params[i]) - learning_rate * update);
  }
}

template <typename T>
Adam<T>::Adam(OptimizerSettings settings, std::size_t total_steps)
    : settings_(settings), base_lr_(settings.learning_rate) {
  settings_.validate();
  if (settings_.kind == OptimizerKind::adam_weight_decay && settings_.warmup_fraction > 0) {
    warmup_steps_ = static_cast<std::size_t>(
        std::ceil(settings_.warmup_fraction * static_cast<double>(total_steps)));
  }
}

template <typename T>
void Adam<T>::set_base_learning_rate(double lr) {
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
  base_lr_ = lr;
}

template <typename T>
double Adam<T>::current_learning_rate() const {
  if (warmup_steps_ == 0 || steps_ >= warmup_steps_) return base_lr_;
  return base_lr_ * static_cast<double>(steps_ + 1) / static_cast<double>(warmup_steps_);
}

template <typename T>
void Adam<T>::step(ad::ParameterSet<T>& params) {
  if (states_.size() != params.count()) states_.resize(params.count());
  const double lr = current_learning_rate();
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& p = params[i];
    if (p.grad.size() != p.value.size()) p.zero_grad();
    // Biases and normalization gains (rank-1) are excluded from decay.
    adam_step<T>(p.value.values(), p.grad.values(), states_[i], settings_, lr,
                 p.value.rank() >= 2);
  }
  ++steps_;
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState<float>&,
                               const OptimizerSettings&, double, bool);
template void adam_step<double>(std::span<double>, std::span<const double>,
                                AdamState<double>&, const OptimizerSettings&, double, bool);
template class Adam<float>;
template class Adam<double>;

// ---- plateau schedule -----------------------------------------------------

PlateauSchedule::PlateauSchedule(double learning_rate, double factor, int patience)
    : initial_lr_(learning_rate), lr_(learning_rate), factor_(factor), patience_(patience) {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be positive");
  if (!(factor > 0 && factor < 1)) throw std::invalid_argument("plateau factor must lie in (0, 1)");
  if (patience < 1) throw std::invalid_argument("plateau patience must be at least 1");
}

double PlateauSchedule::update(double validation_loss) {
  if (!std::isfinite(validation_loss)) {
    throw TrainingDiverged("validation loss is not finite");
  }
  if (validation_loss < best_) {
    best_ = validation_loss;
    bad_epochs_ = 0;
    return lr_;
  }
  if (++bad_epochs_ >= patience_) {
    ++reductions_;
    lr_ = initial_lr_ * std::pow(factor_, reductions_);
    bad_epochs_ = 0;
  }
  return lr_;
}

// ---- evaluation -----------------------------------------------------------

double evaluate_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("evaluate_accuracy: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(labels.size()) + " labels");
  }
  if (predictions.empty()) throw std::invalid_argument("evaluate_accuracy: no predictions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<BucketRow> bucketed_accuracy(std::span<const int> predictions,
                                         std::span<const int> labels,
                                         std::span<const std::size_t> doc_lengths,
                                         std::span<const std::size_t> bucket_edges) {
  if (predictions.size() != labels.size() || labels.size() != doc_lengths.size()) {
    throw std::invalid_argument("bucketed_accuracy: input lengths differ");
  }
  if (bucket_edges.size() < 2) throw std::invalid_argument("bucketed_accuracy needs >= 2 edges");
  for (std::size_t i = 1; i < bucket_edges.size(); ++i) {
    if (bucket_edges[i] <= bucket_edges[i - 1]) {
      throw std::invalid_argument("bucket edges must be strictly increasing");
    }
  }
  std::vector<BucketRow> rows(bucket_edges.size() - 1);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    rows[b].lower = bucket_edges[b];
    rows[b].upper = bucket_edges[b + 1];
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t len = doc_lengths[i];
    if (len < bucket_edges.front() || len > bucket_edges.back()) {
      throw std::invalid_argument("document length " + std::to_string(len) +
                                  " falls outside the bucket edges");
    }
    auto it = std::upper_bound(bucket_edges.begin(), bucket_edges.end(), len);
    std::size_t b = static_cast<std::size_t>(it - bucket_edges.begin()) - 1;
    if (b == rows.size()) b = rows.size() - 1;  // len == last edge
    ++rows[b].count;
    rows[b].correct += predictions[i] == labels[i];
  }
  for (auto& r : rows) {
    if (r.count > 0) r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.count);
  }
  return rows;
}

void write_bucket_csv(const std::filesystem::path& path, std::span<const BucketRow> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "lower,upper,count,correct,accuracy\n";
  for (const auto& r : rows) {
    out << r.lower << ',' << r.upper << ',' << r.count << ',' << r.correct << ','
        << real(r.accuracy) << '\n';
  }
}

void write_curves_csv(const std::filesystem::path& path, std::span<const EpochMetrics> curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,valid_loss,valid_acc,lr\n";
  for (const auto& m : curve) {
    out << m.epoch << ',' << real(m.train_loss) << ',' << real(m.valid_loss) << ','
        << real(m.valid_accuracy) << ',' << real(m.learning_rate) << '\n';
  }
}

// ---- run reports ----------------------------------------------------------

std::vector<double> RunReport::accuracies() const {
  std::vector<double> out;
  for (const auto& r : runs) out.push_back(r.test_accuracy);
  return out;
}

nlohmann::json to_json(const RunReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& s : r.runs) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& m : s.curve) {
      curve.push_back({{"epoch", m.epoch},
                       {"train_loss", number_or_null(m.train_loss)},
                       {"valid_loss", number_or_null(m.valid_loss)},
                       {"valid_accuracy", number_or_null(m.valid_accuracy)},
                       {"learning_rate", m.learning_rate}});
    }
    runs.push_back({{"seed", s.seed},
                    {"test_accuracy", s.test_accuracy},
                    {"best_valid_accuracy", s.best_valid_accuracy},
                    {"curve", curve}});
  }
  return {{"runs", runs},
          {"mean_accuracy", r.mean_accuracy},
          {"complete", r.complete},
          {"error", r.error},
          {"config", r.config}};
}

RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  for (const auto& s : j.at("runs")) {
    SeedResult sr;
    sr.seed = s.at("seed").get<std::uint64_t>();
    sr.test_accuracy = s.at("test_accuracy").get<double>();
    sr.best_valid_accuracy = s.value("best_valid_accuracy", 0.0);
    for (const auto& m : s.at("curve")) {
      sr.curve.push_back({m.at("epoch").get<std::size_t>(), number_or_nan(m.at("train_loss")),
                          number_or_nan(m.at("valid_loss")),
                          number_or_nan(m.at("valid_accuracy")),
                          m.at("learning_rate").get<double>()});
    }
    r.runs.push_back(std::move(sr));
  }
  r.mean_accuracy = j.at("mean_accuracy").get<double>();
  r.complete = j.at("complete").get<bool>();
  r.error = j.value("error", std::string());
  r.config = j.value("config", nlohmann::json::object());
  return r;
}

void write_run_report(const std::filesystem::path& dir, const RunReport& report) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "run_report.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "run_report.json").string());
  out << to_json(report).dump(2) << '\n';
  for (const auto& run : report.runs) {
    write_curves_csv(dir / ("curve_seed" + std::to_string(run.seed) + ".csv"), run.curve);
  }
}

RunReport read_run_report(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw std::runtime_error("cannot open " + json_path.string());
  return run_report_from_json(nlohmann::json::parse(in));
}

RunReport multi_seed_run(std::span<const std::uint64_t> seeds,
                         const std::function<SeedResult(std::uint64_t)>& run,
                         nlohmann::json config) {
  if (seeds.empty()) throw std::invalid_argument("multi_seed_run needs at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw std::invalid_argument("multi_seed_run seeds must be distinct");
  }
  RunReport report;
  report.config = std::move(config);
  for (auto seed : seeds) {
    try {
      SeedResult r = run(seed);
      r.seed = seed;
      report.runs.push_back(std::move(r));
    } catch (const std::exception& e) {
      report.complete = false;
      report.error = "seed " + std::to_string(seed) + ": " + e.what();
      break;
    }
  }
  double total = 0.0;
  for (const auto& r : report.runs) total += r.test_accuracy;
  report.mean_accuracy = report.runs.empty() ? 0.0 : total / static_cast<double>(report.runs.size());
  return report;
}

}  // namespace hierdoc
