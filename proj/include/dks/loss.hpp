#pragma once

#include <map>
#include <string>
#include <vector>

#include "dks/tensor.hpp"

namespace dks {

/// A directed knowledge-matching pair: the teacher's class distribution is
/// treated as a constant target for the student head.
struct HeadPair {
  std::string teacher;
  std::string student;
  bool operator==(const HeadPair&) const = default;
};

enum class PairStrategy { top_down, bottom_up, bi };

inline PairStrategy parse_pair_strategy(const std::string& s) {
  if (s == "top_down") return PairStrategy::top_down;
  if (s == "bottom_up") return PairStrategy::bottom_up;
  if (s == "bi" || s == "bidirectional") return PairStrategy::bi;
  throw ConfigError("loss: unknown pair strategy '" + s + "'");
}

inline std::string pair_strategy_name(PairStrategy s) {
  switch (s) {
    case PairStrategy::top_down: return "top_down";
    case PairStrategy::bottom_up: return "bottom_up";
    case PairStrategy::bi: return "bi";
  }
  return "?";
}

/// Builds the pair set over heads listed in decreasing depth order
/// (C1 deepest, then C2, ...). top_down pairs a deeper teacher with every
/// shallower student; bottom_up is the reverse; bi is their disjoint union,
/// giving h(h-1) ordered pairs for h heads.
inline std::vector<HeadPair> build_pair_set(const std::vector<std::string>& heads_by_depth,
                                            PairStrategy strategy) {
  const auto& ids = heads_by_depth;
  for (size_t i = 0; i < ids.size(); ++i)
    for (size_t j = i + 1; j < ids.size(); ++j)
      if (ids[i] == ids[j]) throw ConfigError("loss: duplicate head id '" + ids[i] + "'");
  std::vector<HeadPair> pairs;
  for (size_t i = 0; i < ids.size(); ++i)
    for (size_t j = i + 1; j < ids.size(); ++j) {
      if (strategy == PairStrategy::top_down || strategy == PairStrategy::bi)
        pairs.push_back({ids[i], ids[j]});  // deeper teaches shallower
      if (strategy == PairStrategy::bottom_up || strategy == PairStrategy::bi)
        pairs.push_back({ids[j], ids[i]});
    }
  return pairs;
}

/// Hard-label cross entropy, averaged over the batch:
///   -(1/N) sum_i log(max(softmax(logits)_{i, y_i}, floor)).
template <typename T>
Tensor<T> cross_entropy_hard(const std::vector<int32_t>& labels, const Tensor<T>& logits,
                             T floor = T(1e-12)) {
  if (logits.ndim() != 2)
    throw ConfigError("cross_entropy: logits must be [N,K], got " + shape_str(logits.shape()));
  int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw ConfigError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(n) + " rows");
  Tensor<T> onehot({n, k});
  T* po = onehot.data_mut().data();
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw DataError("cross_entropy: sample " + std::to_string(i) + " has label " +
                      std::to_string(labels[i]) + ", outside [0," + std::to_string(k) + ")");
    po[i * k + labels[i]] = T(1);
  }
  Tensor<T> logp = log_clamped(softmax(logits), floor);
  return scale(sum_all(mul(onehot, logp)), T(-1) / static_cast<T>(n));
}

/// Soft-target cross entropy between two heads' class distributions, with the
/// teacher's softmax detached (treated as constant):
///   -(beta/N) sum_ij detach(softmax(teacher))_ij log(max(softmax(student)_ij, floor)).
template <typename T>
Tensor<T> knowledge_match(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                          T beta = T(1), T floor = T(1e-12)) {
  detail::check_same_shape("knowledge_match", teacher_logits, student_logits);
  if (teacher_logits.ndim() != 2)
    throw ConfigError("knowledge_match: logits must be [N,K], got " +
                      shape_str(teacher_logits.shape()));
  int64_t n = teacher_logits.dim(0);
  Tensor<T> target = detach(softmax(teacher_logits));
  Tensor<T> logp = log_clamped(softmax(student_logits), floor);
  return scale(sum_all(mul(target, logp)), -beta / static_cast<T>(n));
}

/// Same matching term but with the target distribution supplied directly as a
/// constant. knowledge_match(t, s) must behave identically to
/// knowledge_match_to_target(softmax(value_of(t)), s): that equivalence is
/// what "the teacher is a constant" means, and tests rely on it bit-for-bit.
template <typename T>
Tensor<T> knowledge_match_to_target(const Tensor<T>& target_probs, const Tensor<T>& student_logits,
                                    T beta = T(1), T floor = T(1e-12)) {
  detail::check_same_shape("knowledge_match", target_probs, student_logits);
  if (target_probs.ndim() != 2)
    throw ConfigError("knowledge_match: inputs must be [N,K], got " +
                      shape_str(target_probs.shape()));
  int64_t n = target_probs.dim(0);
  Tensor<T> target = detach(target_probs);
  Tensor<T> logp = log_clamped(softmax(student_logits), floor);
  return scale(sum_all(mul(target, logp)), -beta / static_cast<T>(n));
}

struct LossWeights {
  double default_alpha = 1.0;
  double default_beta = 1.0;
  std::map<std::string, double> alpha;  // per aux head id
  std::map<std::string, double> beta;   // keyed "teacher->student"

  double alpha_for(const std::string& head) const {
    auto it = alpha.find(head);
    return it == alpha.end() ? default_alpha : it->second;
  }
  double beta_for(const HeadPair& p) const {
    auto it = beta.find(p.teacher + "->" + p.student);
    return it == beta.end() ? default_beta : it->second;
  }
};

struct LossReport {
  double total = 0;
  double classification = 0;  // final head CE
  double auxiliary = 0;       // weighted sum of aux head CEs
  double synergy = 0;         // weighted sum of pairwise matching terms
  std::vector<std::pair<std::string, double>> per_head_ce;    // head id -> unweighted CE
  std::vector<std::pair<std::string, double>> per_pair;       // "m->n" -> weighted term
};

/// Composes the training objective:
///   total = CE(C1) + sum_aux alpha_l CE(C_l) + sum_(m,n) beta_mn H(detach(f_m), f_n).
/// `head_ids` and `logits` are parallel, C1 first then decreasing depth.
/// An empty pair set reduces the objective to deep supervision; no aux heads
/// and no pairs reduce it to the plain classification loss.
template <typename T>
std::pair<Tensor<T>, LossReport> total_loss(const std::vector<int32_t>& labels,
                                            const std::vector<std::string>& head_ids,
                                            const std::vector<Tensor<T>>& logits,
                                            const std::vector<HeadPair>& pairs,
                                            const LossWeights& weights = {},
                                            T floor = T(1e-12)) {
  if (head_ids.empty() || head_ids[0] != "C1")
    throw ConfigError("total_loss: head list must start with C1");
  if (head_ids.size() != logits.size())
    throw ConfigError("total_loss: " + std::to_string(head_ids.size()) + " head ids for " +
                      std::to_string(logits.size()) + " logit tensors");
  std::map<std::string, const Tensor<T>*> by_id;
  for (size_t i = 0; i < head_ids.size(); ++i) {
    if (by_id.count(head_ids[i]))
      throw ConfigError("total_loss: duplicate head id '" + head_ids[i] + "'");
    by_id[head_ids[i]] = &logits[i];
  }

  LossReport report;

  Tensor<T> lc = cross_entropy_hard(labels, logits[0], floor);
  report.classification = static_cast<double>(lc.item());
  report.per_head_ce.push_back({"C1", report.classification});
  Tensor<T> total = lc;

  for (size_t i = 1; i < head_ids.size(); ++i) {
    Tensor<T> ce = cross_entropy_hard(labels, logits[i], floor);
    report.per_head_ce.push_back({head_ids[i], static_cast<double>(ce.item())});
    double a = weights.alpha_for(head_ids[i]);
    Tensor<T> term = scale(ce, static_cast<T>(a));
    report.auxiliary += static_cast<double>(term.item());
    total = add(total, term);
  }

  for (const auto& p : pairs) {
    if (p.teacher == p.student)
      throw ConfigError("total_loss: pair matches head '" + p.teacher + "' with itself");
    auto ti = by_id.find(p.teacher), si = by_id.find(p.student);
    if (ti == by_id.end() || si == by_id.end())
      throw ConfigError("total_loss: pair " + p.teacher + "->" + p.student +
                        " references a head that is not present");
    double b = weights.beta_for(p);
    Tensor<T> term = knowledge_match(*ti->second, *si->second, static_cast<T>(b), floor);
    double v = static_cast<double>(term.item());
    report.per_pair.push_back({p.teacher + "->" + p.student, v});
    report.synergy += v;
    total = add(total, term);
  }

  report.total = static_cast<double>(total.item());
  return {total, report};
}

}  // namespace dks
