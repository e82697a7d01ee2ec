#pragma once

// Command-line driver: train / align / barrier / merge / expand / analyze.

#include "rebasin/trainer.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace rebasin {

/// key=value lines; '#' starts a comment. Duplicate keys are rejected.
std::map<std::string, std::string> read_kv_file(const std::string& path);

/// Keys are prefixed by section: model.*, task.*, train.*. Anything else is
/// a ConfigError. model.vocab and model.max_seq default to the task's sizes.
struct ExperimentConfig {
  TransformerConfig model;
  TaskSpec task;
  TrainConfig train;

  static ExperimentConfig from_kv(const std::map<std::string, std::string>& kv);
};

/// Runs one command. Success prints a JSON summary on `out` and returns 0;
/// failure prints {"error": kind, "message": ...} on `err` and returns nonzero.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rebasin
