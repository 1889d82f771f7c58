#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hierdoc/autograd.hpp"

namespace hierdoc {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { adam, adam_weight_decay };

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  double warmup_fraction = 0.0;

  // Throws ConfigError naming prefix.field.
  void validate(std::string_view prefix = "optimizer") const;

  // Plain Adam, lr 1e-3 (recurrent document model).
  static OptimizerSettings adam_default();
  // Adam with decoupled decay 0.01 and 10% linear warmup, lr 5e-5.
  static OptimizerSettings bert_adam_default();
};

nlohmann::json to_json(const OptimizerSettings& s);
OptimizerSettings optimizer_settings_from_json(const nlohmann::json& j,
                                               std::string_view prefix = "optimizer");

template <typename T>
struct AdamState {
  std::vector<T> first_moment;
  std::vector<T> second_moment;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of `params` in place. `learning_rate` is
// the rate for this step (schedules applied by the caller); `decay` enables
// the decoupled weight-decay term.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               const OptimizerSettings& settings, double learning_rate, bool decay);

template <typename T>
class Adam {
 public:
  // total_steps sizes the warmup for adam_weight_decay; ignored otherwise.
  Adam(OptimizerSettings settings, std::size_t total_steps = 0);

  void step(ad::ParameterSet<T>& params);

  double base_learning_rate() const { return base_lr_; }
  void set_base_learning_rate(double lr);
  double current_learning_rate() const;
  std::uint64_t steps_taken() const { return steps_; }

 private:
  OptimizerSettings settings_;
  double base_lr_;
  std::size_t warmup_steps_ = 0;
  std::uint64_t steps_ = 0;
  std::vector<AdamState<T>> states_;
};

// Multiplies the learning rate by `factor` once `patience` consecutive
// epochs fail to bring validation loss below the best value seen.
class PlateauSchedule {
 public:
  PlateauSchedule(double learning_rate, double factor = 0.95, int patience = 3);

  double update(double validation_loss);

  double learning_rate() const { return lr_; }
  double best() const { return best_; }
  int epochs_since_improvement() const { return bad_epochs_; }
  int reductions() const { return reductions_; }

 private:
  double initial_lr_;
  double lr_;  // initial_lr_ * factor_^reductions_
  double factor_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  int reductions_ = 0;
};

double evaluate_accuracy(std::span<const int> predictions, std::span<const int> labels);

struct BucketRow {
  std::size_t lower = 0;
  std::size_t upper = 0;
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN when count == 0
};

// Buckets are [edge_i, edge_{i+1}) with the last one closed on the right.
std::vector<BucketRow> bucketed_accuracy(std::span<const int> predictions,
                                         std::span<const int> labels,
                                         std::span<const std::size_t> doc_lengths,
                                         std::span<const std::size_t> bucket_edges);

void write_bucket_csv(const std::filesystem::path& path, std::span<const BucketRow> rows);

struct TrainOptions {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  OptimizerSettings optimizer;
  bool plateau_schedule = false;        // reduce lr on validation-loss plateaus
  std::size_t early_stop_patience = 10;  // epochs without accuracy gain; 0 disables
  std::uint64_t seed = 0;
  bool verbose = false;
  std::function<void(std::size_t step, double loss)> on_step;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_accuracy = 0.0;
  double learning_rate = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;  // entry 0 is the untrained model
  double best_valid_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t examples_per_epoch = 0;
};

void write_curves_csv(const std::filesystem::path& path, std::span<const EpochMetrics> curve);

struct SeedResult {
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  double best_valid_accuracy = 0.0;
  std::vector<EpochMetrics> curve;
};

struct RunReport {
  std::vector<SeedResult> runs;
  double mean_accuracy = 0.0;
  bool complete = true;
  std::string error;
  nlohmann::json config = nlohmann::json::object();

  std::vector<double> accuracies() const;
};

nlohmann::json to_json(const RunReport& r);
RunReport run_report_from_json(const nlohmann::json& j);
void write_run_report(const std::filesystem::path& dir, const RunReport& report);
RunReport read_run_report(const std::filesystem::path& json_path);

// Runs `run` once per seed in order. A failing run stops the protocol and
// yields a report flagged incomplete that keeps the finished seeds.
RunReport multi_seed_run(std::span<const std::uint64_t> seeds,
                         const std::function<SeedResult(std::uint64_t)>& run,
                         nlohmann::json config = nlohmann::json::object());

}  // namespace hierdoc
