#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>

#include "dks/data.hpp"
#include "dks/loss.hpp"
#include "dks/model.hpp"
#include "dks/optim.hpp"

namespace dks {

/// Which pairwise terms and weights the objective uses. An empty pair set is
/// plain deep supervision; no aux heads at all is the baseline objective.
struct LossPlan {
  std::vector<HeadPair> pairs;
  LossWeights weights;
};

struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 64;
  LrSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = false;
  uint64_t seed = 1;
  bool augment = false;
  double log_floor = 1e-12;
};

/// One epoch of bookkeeping. Loss components are sample-weighted epoch means;
/// errors are top-1 percentages. wall_seconds is informational and is kept
/// out of the metrics file so reruns stay byte-identical.
struct MetricsRow {
  int64_t epoch = 0;
  double lr = 0;
  double loss_total = 0, loss_c = 0, loss_a = 0, loss_s = 0;
  double train_err = 0;  // final head, measured on the training batches as seen
  double test_err = 0;   // final head
  std::vector<std::pair<std::string, double>> per_head_test_err;  // C1 first
  double wall_seconds = 0;
};

template <typename T>
std::vector<std::pair<std::string, double>> evaluate(MultiHeadModel<T>& model, const Dataset& ds,
                                                     int64_t batch_size) {
  if (ds.size() == 0) throw DataError("evaluate: empty dataset");
  auto ids = model.head_ids();
  std::vector<int64_t> wrong(ids.size(), 0);
  std::vector<int64_t> idx(batch_size);
  for (int64_t start = 0; start < ds.size(); start += batch_size) {
    int64_t b = std::min(batch_size, ds.size() - start);
    idx.resize(b);
    std::iota(idx.begin(), idx.end(), start);
    auto [x, y] = make_batch<T>(ds, idx);
    auto logits = model.forward_all(x, Mode::eval);
    for (size_t h = 0; h < logits.size(); ++h) {
      auto d = logits[h].data();
      int64_t k = logits[h].dim(1);
      for (int64_t i = 0; i < b; ++i) {
        const T* row = d.data() + i * k;
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
          if (row[j] > row[best]) best = j;
        if (best != y[i]) ++wrong[h];
      }
    }
  }
  std::vector<std::pair<std::string, double>> out;
  for (size_t h = 0; h < ids.size(); ++h)
    out.push_back({ids[h], 100.0 * static_cast<double>(wrong[h]) / static_cast<double>(ds.size())});
  return out;
}

/// Full training loop. Shuffles once per epoch with a dedicated stream,
/// walks every batch (the final short batch included), aborts on a non-finite
/// loss, and evaluates all heads on the test split after each epoch.
/// `on_epoch`, when given, runs after each row is complete.
template <typename T>
std::vector<MetricsRow> train(MultiHeadModel<T>& model, const Dataset& train_ds,
                              const Dataset& test_ds, const TrainConfig& cfg,
                              const LossPlan& plan,
                              const std::function<void(const MetricsRow&)>& on_epoch = {}) {
  if (cfg.epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (cfg.batch_size < 2) throw ConfigError("train: batch size must be >= 2 (batch norm)");
  if (train_ds.size() < 2) throw DataError("train: training split needs at least 2 samples");
  if (train_ds.size() % cfg.batch_size == 1)
    throw ConfigError("train: " + std::to_string(train_ds.size()) + " samples with batch size " +
                      std::to_string(cfg.batch_size) +
                      " leaves a final batch of 1, which batch norm cannot normalize; "
                      "choose a batch size that avoids a singleton remainder");
  if (train_ds.num_classes != model.spec().num_classes)
    throw ConfigError("train: dataset has " + std::to_string(train_ds.num_classes) +
                      " classes but the model expects " +
                      std::to_string(model.spec().num_classes));

  auto ids = model.head_ids();
  // fail early on pairs that reference absent heads
  for (const auto& p : plan.pairs) {
    auto has = [&](const std::string& id) {
      return std::find(ids.begin(), ids.end(), id) != ids.end();
    };
    if (!has(p.teacher) || !has(p.student))
      throw ConfigError("train: pair " + p.teacher + "->" + p.student +
                        " references a head the model does not have");
  }

  Sgd<T> opt(cfg.momentum, cfg.weight_decay, cfg.nesterov);
  auto params = model.params();

  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, seed_tag::shuffle));
  std::mt19937_64 augment_rng(mix_seed(cfg.seed, seed_tag::augment));

  const int64_t n = train_ds.size();
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  std::vector<MetricsRow> rows;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = lr_at(cfg.schedule, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum_total = 0, sum_c = 0, sum_a = 0, sum_s = 0;
    int64_t train_wrong = 0;
    int64_t batch_index = 0;
    for (int64_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      int64_t b = std::min(cfg.batch_size, n - start);
      std::vector<int64_t> idx(order.begin() + start, order.begin() + start + b);
      auto [x, y] = make_batch<T>(train_ds, idx, cfg.augment, &augment_rng);

      Tape<T> tape;
      auto logits = model.forward_all(x, Mode::train);
      auto [loss, report] =
          total_loss<T>(y, ids, logits, plan.pairs, plan.weights, static_cast<T>(cfg.log_floor));
      if (!std::isfinite(report.total))
        throw TrainingAbort(static_cast<int>(epoch), static_cast<int>(batch_index),
                            "training loss became non-finite (" + std::to_string(report.total) +
                                ") at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_index));
      model.zero_grad();
      backward(loss);
      opt.step(params, lr);

      double w = static_cast<double>(b);
      sum_total += report.total * w;
      sum_c += report.classification * w;
      sum_a += report.auxiliary * w;
      sum_s += report.synergy * w;

      auto d = logits[0].data();
      int64_t k = logits[0].dim(1);
      for (int64_t i = 0; i < b; ++i) {
        const T* row = d.data() + i * k;
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
          if (row[j] > row[best]) best = j;
        if (best != y[i]) ++train_wrong;
      }
    }

    MetricsRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.loss_total = sum_total / static_cast<double>(n);
    row.loss_c = sum_c / static_cast<double>(n);
    row.loss_a = sum_a / static_cast<double>(n);
    row.loss_s = sum_s / static_cast<double>(n);
    row.train_err = 100.0 * static_cast<double>(train_wrong) / static_cast<double>(n);
    row.per_head_test_err = evaluate(model, test_ds, cfg.batch_size);
    row.test_err = row.per_head_test_err[0].second;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return rows;
}

}  // namespace dks
