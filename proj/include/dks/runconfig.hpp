#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dks/data.hpp"
#include "dks/loss.hpp"
#include "dks/trainer.hpp"

namespace dks {

enum class Scheme { baseline, ds, dks };

inline Scheme parse_scheme(const std::string& s) {
  if (s == "baseline") return Scheme::baseline;
  if (s == "ds") return Scheme::ds;
  if (s == "dks") return Scheme::dks;
  throw ConfigError("config: unknown scheme '" + s + "' (expected baseline, ds or dks)");
}

inline std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::baseline: return "baseline";
    case Scheme::ds: return "ds";
    case Scheme::dks: return "dks";
  }
  return "?";
}

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "dir"
  std::string train_dir, test_dir;   // when source == "dir"
  SyntheticSpec synthetic;
  double label_noise = 0.0;  // train-split corruption ratio
};

struct ModelConfig {
  std::string preset = "cifar_mini";
  int64_t num_classes = 0;  // 0: take the dataset's class count
  std::optional<std::vector<std::string>> aux;  // absent: preset default heads
};

struct LossConfig {
  Scheme scheme = Scheme::dks;
  std::optional<PairStrategy> strategy;  // dks only; default bi
  LossWeights weights;
  double log_floor = 1e-12;
};

struct RunConfig {
  int64_t version = 1;
  uint64_t seed = 1;
  int64_t precision = 32;  // 32 or 64
  std::string out;
  DataConfig data;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;  // schedule, momentum, wd, epochs, batch, augment
  int64_t checkpoint_every = 0;  // epochs; 0 = final only
};

/// Parses and validates a JSON run configuration. Unknown keys anywhere are
/// errors (fail-closed), so an ablation config cannot silently misspell a
/// field. Cross-field rules: baseline admits no aux heads and no strategy,
/// ds admits no strategy/beta (its pair set is empty by definition), dks
/// defaults to the bi-directional strategy.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

/// Canonical JSON snapshot of an effective config; reparsing it yields the
/// same configuration (used for the per-run provenance file).
std::string resolved_config_json(const RunConfig& rc);

/// Fixed seed set for multi-run means.
inline std::vector<uint64_t> default_seeds() { return {1, 2, 3, 4, 5}; }

}  // namespace dks
