#pragma once

// Synthetic token tasks and an Adam training loop for toy checkpoints.

#include "rebasin/autodiff.hpp"
#include "rebasin/transformer.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace rebasin {

enum class TaskKind { modular_addition, char_copy, char_lm };

const char* to_string(TaskKind k);
TaskKind parse_task(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::modular_addition;
  Index vocab = 24;      // model vocabulary; modular addition uses p + 1 tokens
  Index modulus = 23;    // p, modular addition only
  Index seq_len = 3;     // ignored for modular addition ("a b =")
  Index train_size = 400;
  Index test_size = 129;
  Index batch_size = 0;  // 0: one batch per split
  std::uint64_t seed = 0;

  std::map<std::string, std::string> to_kv() const;
  static TaskSpec from_kv(const std::map<std::string, std::string>& kv);
  void validate() const;
};

struct Dataset {
  std::vector<Batch> train;
  std::vector<Batch> test;
};

/// Deterministic in `spec.seed`; train and test sequences are disjoint.
Dataset generate_dataset(const TaskSpec& spec);

/// Number of positions carrying a target.
Index target_count(const std::vector<Batch>& batches);

struct TrainConfig {
  Index epochs = 1000;
  ad::AdamConfig adam{.lr = 1e-3, .beta2 = 0.98, .weight_decay = 0.0};
  bool cosine_decay = true;      // lr follows a half cosine to 0.1·lr over the run
  std::uint64_t seed = 0;        // model initialization
  Index eval_every = 50;         // epochs between test evaluations
  double target_test_loss = 0.0; // stop early once reached (0: never)
  double divergence_factor = 10.0;
};

struct EpochMetrics {
  Index epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
};

struct TrainResult {
  TransformerParams params;
  std::vector<EpochMetrics> metrics;  // evaluated epochs only
  Index epochs_run = 0;
};

using MetricsSink = std::function<void(const EpochMetrics&)>;

/// Full-pass Adam training. Aborts with NumericError when the train loss
/// exceeds `divergence_factor` times its initial value.
TrainResult train(const TransformerConfig& config, const Dataset& data, const TrainConfig& train_config,
                  const MetricsSink& sink = {});

/// Metrics record as a single JSON line.
std::string to_json_line(const EpochMetrics& m);

}  // namespace rebasin
