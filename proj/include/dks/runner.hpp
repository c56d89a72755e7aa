#pragma once

#include <string>
#include <vector>

#include "dks/runconfig.hpp"

namespace dks {

// Stable process exit codes.
constexpr int kExitOk = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTrainAbort = 3;
constexpr int kExitIo = 4;

struct VerifyOptions {
  std::string suite = "all";  // grads | synergy | all
  std::string out_dir = "verify_out";
  uint64_t seed = 1;
  int64_t n_samples = 4'000'000;
  std::vector<double> sigmas = {0.2, 0.1, 0.05};
  int64_t grad_elements_per_group = 200;  // sampling cap for the model-level audit
};

/// Each command either returns an exit code or throws one of the error types;
/// the CLI maps exception type to exit code.
int run_train(const RunConfig& rc);
int run_eval(const std::string& ckpt_path, const std::string& data_dir, int64_t precision,
             const std::string& out_dir);
int run_export(const std::string& ckpt_path, const std::string& out_path);
int run_verify(const VerifyOptions& opts);
int run_gen_data(const RunConfig& rc, const std::string& out_dir);
int run_convert_data(const std::string& kind, const std::string& src_dir,
                     const std::string& out_dir);
int run_ablate(const RunConfig& rc, const std::string& axis,
               const std::vector<std::string>& values);

// Metrics CSV layout (schema v1): fixed columns, then one trailing error
// column per aux head. Wall-clock time deliberately stays out of the file so
// identical runs produce identical bytes.
std::string metrics_csv_header(const std::vector<std::string>& head_ids);
std::string metrics_csv_row(const MetricsRow& row, size_t num_heads);

}  // namespace dks
