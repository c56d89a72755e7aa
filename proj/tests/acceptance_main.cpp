// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
// gated check fails. Takes the path of the dks binary as argv[1] for the
// criteria that exercise the command-line surface (export, determinism).

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dks/checkpoint.hpp"
#include "dks/data.hpp"
#include "dks/loss.hpp"
#include "dks/model.hpp"
#include "dks/runconfig.hpp"
#include "dks/trainer.hpp"
#include "dks/verifier.hpp"

namespace fs = std::filesystem;
using namespace dks;

namespace {

std::string g_dks_bin;
fs::path g_work;
int g_log_counter = 0;

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  fs::path log = g_work / ("cli_" + std::to_string(g_log_counter++) + ".log");
  std::string cmd = g_dks_bin + " " + args + " > " + log.string() + " 2>&1";
  int raw = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("acceptance: cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

double rel_gap(double got, double want) {
  return std::fabs(got - want) / std::max(std::fabs(want), 1e-12);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// ---- criterion 1: full-model gradient audit ----------------------------------

// cifar-mini, all three heads, bi-directional pairs, 2-sample batch, 64-bit.
// The matching terms detach their teacher distributions, so the finite
// differences run against an oracle with every teacher frozen at the audit
// point; by stop-gradient semantics that oracle's derivative is what the
// graph computes, and at the audit point both objectives agree bit for bit.
bool crit_gradient_audit(std::string& detail) {
  using T = double;
  ModelSpec spec = make_model_spec("cifar_mini", 4);
  MultiHeadModel<T> model(spec, 11);
  auto ids = model.head_ids();
  auto pairs = build_pair_set(ids, PairStrategy::bi);

  SyntheticSpec dspec;
  dspec.per_class = 2;
  dspec.test_per_class = 1;
  auto [tr, te] = generate_synthetic(dspec, 11);
  auto [x, y] = make_batch<T>(tr, {0, 3});

  auto index_of = [&](const std::string& id) {
    for (size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == id) return i;
    throw UsageError("audit: unknown head " + id);
  };
  auto graph = [&]() {
    auto logits = model.forward_all(x, Mode::train);
    auto [loss, rep] = total_loss<T>(y, ids, logits, pairs);
    return loss;
  };
  std::vector<Tensor<T>> frozen;
  {
    auto logits0 = model.forward_all(x, Mode::train);
    for (const auto& pr : pairs) frozen.push_back(softmax(logits0[index_of(pr.teacher)]));
  }
  auto value = [&]() {
    auto lg = model.forward_all(x, Mode::train);
    double total = 0;
    for (size_t i = 0; i < ids.size(); ++i)
      total += static_cast<double>(cross_entropy_hard(y, lg[i]).item());
    for (size_t pi = 0; pi < pairs.size(); ++pi)
      total += static_cast<double>(
          knowledge_match_to_target(frozen[pi], lg[index_of(pairs[pi].student)]).item());
    return total;
  };
  double drift = std::fabs(value() - static_cast<double>(graph().item()));
  if (drift > 1e-12) {
    detail = "frozen-teacher objective drifted from the graph by " + fmt("%.3e", drift);
    return false;
  }

  auto params = model.params();
  GradCheckOptions o;
  o.tolerance = 1e-5;
  o.fd_step = 1e-6;
  o.max_elements_per_group = 200;
  o.sample_seed = 0;
  GradCheckReport rep = grad_check<T>(value, graph, params, o);
  detail = "max_rel_err=" + fmt("%.3e", rep.max_rel_err) + " over " +
           std::to_string(rep.groups.size()) + " parameter groups (<=200 elements each)";
  if (!rep.pass)
    for (const auto& g : rep.groups)
      if (!g.pass) detail += "; worst group " + g.name;
  return rep.pass;
}

// ---- criterion 2: loss-reduction identities -----------------------------------

// With no aux terms and no pairs the composed objective is the plain
// classification loss; with pairs dropped it is deep supervision. Checked
// term for term against independently composed sums on random fixtures.
bool crit_reduction_identities(std::string& detail) {
  using T = double;
  std::mt19937_64 rng(42);
  std::normal_distribution<double> gauss(0.0, 2.0);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    int64_t n = 2 + static_cast<int64_t>(rng() % 4);
    int64_t k = 2 + static_cast<int64_t>(rng() % 6);
    auto rand_logits = [&]() {
      std::vector<T> v(n * k);
      for (auto& e : v) e = gauss(rng);
      return Tensor<T>::from_data({n, k}, std::move(v));
    };
    std::vector<std::string> ids{"C1", "C2", "C3"};
    std::vector<Tensor<T>> logits{rand_logits(), rand_logits(), rand_logits()};
    std::vector<int32_t> labels(n);
    for (auto& l : labels) l = static_cast<int32_t>(rng() % k);

    LossWeights w;
    std::uniform_real_distribution<double> au(0.25, 2.0);
    w.alpha["C2"] = au(rng);
    w.alpha["C3"] = au(rng);

    // A and B empty: the bare classification loss
    auto [t0, r0] = total_loss<T>(labels, {"C1"}, {logits[0]}, {});
    double ce1 = static_cast<double>(cross_entropy_hard(labels, logits[0]).item());
    worst = std::max(worst, rel_gap(r0.total, ce1));
    worst = std::max(worst, rel_gap(r0.classification, ce1));
    if (r0.auxiliary != 0.0 || r0.synergy != 0.0) {
      detail = "empty objective leaked a nonzero aux or synergy term";
      return false;
    }

    // B empty: deep supervision, term for term
    auto [t1, r1] = total_loss<T>(labels, ids, logits, {}, w);
    double ce2 = static_cast<double>(cross_entropy_hard(labels, logits[1]).item());
    double ce3 = static_cast<double>(cross_entropy_hard(labels, logits[2]).item());
    double aux = w.alpha["C2"] * ce2 + w.alpha["C3"] * ce3;
    worst = std::max(worst, rel_gap(r1.classification, ce1));
    worst = std::max(worst, rel_gap(r1.auxiliary, aux));
    worst = std::max(worst, rel_gap(r1.total, ce1 + aux));
    if (r1.synergy != 0.0 || !r1.per_pair.empty()) {
      detail = "deep-supervision reduction leaked a synergy term";
      return false;
    }
  }
  detail = "100 trials, worst term gap " + fmt("%.3e", worst);
  return worst < 1e-6;
}

// ---- criterion 3: stop-gradient semantics -------------------------------------

// Single matching pair C1 -> C2: the final classifier's weights feed only the
// teacher distribution, so their gradients must be exactly zero, and swapping
// the in-graph teacher softmax for an equal external constant must leave
// every gradient bit-identical.
bool crit_stop_gradient(std::string& detail) {
  using T = double;
  ModelSpec spec = select_aux_heads(make_model_spec("cifar_mini", 4), {"C2"});
  MultiHeadModel<T> model(spec, 19);
  SyntheticSpec dspec;
  dspec.per_class = 2;
  dspec.test_per_class = 1;
  auto [tr, te] = generate_synthetic(dspec, 19);
  auto [x, y] = make_batch<T>(tr, {1, 2});
  auto params = model.params();

  auto grads_of = [&](const std::function<Tensor<T>()>& make_loss) {
    Tape<T> tape;
    Tensor<T> loss = make_loss();
    model.zero_grad();
    backward(loss);
    std::vector<std::vector<T>> out;
    for (auto& p : params) {
      auto g = p.tensor.grad();
      out.emplace_back(g.begin(), g.end());
    }
    return out;
  };

  auto live = grads_of([&]() {
    auto lg = model.forward_all(x, Mode::train);
    return knowledge_match(lg[0], lg[1]);
  });

  int64_t teacher_only = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != "backbone.fc.w" && params[i].name != "backbone.fc.b") continue;
    for (T v : live[i]) {
      if (v != 0.0) {
        detail = "teacher-only parameter " + params[i].name + " has gradient " + fmt("%.3e", v);
        return false;
      }
      ++teacher_only;
    }
  }

  Tensor<T> target;
  {
    auto lg = model.forward_all(x, Mode::train);
    target = softmax(lg[0]);
  }
  auto replaced = grads_of([&]() {
    auto lg = model.forward_all(x, Mode::train);
    return knowledge_match_to_target(target, lg[1]);
  });

  int64_t compared = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    if (live[i].size() != replaced[i].size() ||
        std::memcmp(live[i].data(), replaced[i].data(), live[i].size() * sizeof(T)) != 0) {
      detail = "constant-teacher replacement changed gradients of " + params[i].name;
      return false;
    }
    compared += static_cast<int64_t>(live[i].size());
  }
  detail = std::to_string(teacher_only) + " teacher-only elements exactly zero; " +
           std::to_string(compared) + " gradient elements bit-identical under constant replacement";
  return true;
}

// ---- criterion 4: pair-set algebra --------------------------------------------

bool crit_pair_algebra(std::string& detail) {
  auto key = [](const HeadPair& p) { return p.teacher + ">" + p.student; };
  for (int h = 2; h <= 5; ++h) {
    std::vector<std::string> ids;
    for (int i = 1; i <= h; ++i) ids.push_back("C" + std::to_string(i));  // deepest first

    auto td = build_pair_set(ids, PairStrategy::top_down);
    auto bu = build_pair_set(ids, PairStrategy::bottom_up);
    auto bi = build_pair_set(ids, PairStrategy::bi);

    if (static_cast<int>(bi.size()) != h * (h - 1)) {
      detail = "h=" + std::to_string(h) + ": |B|=" + std::to_string(bi.size()) + ", expected " +
               std::to_string(h * (h - 1));
      return false;
    }

    auto depth = [&](const std::string& id) {
      return static_cast<int>(ids.size()) -
             static_cast<int>(std::find(ids.begin(), ids.end(), id) - ids.begin());
    };
    for (const auto& p : td)
      if (depth(p.teacher) <= depth(p.student)) {
        detail = "top-down pair " + key(p) + " has a shallower teacher";
        return false;
      }
    for (const auto& p : bu)
      if (depth(p.teacher) >= depth(p.student)) {
        detail = "bottom-up pair " + key(p) + " has a deeper teacher";
        return false;
      }

    std::vector<std::string> united, bikeys;
    for (const auto& p : td) united.push_back(key(p));
    for (const auto& p : bu) united.push_back(key(p));
    for (const auto& p : bi) bikeys.push_back(key(p));
    std::sort(united.begin(), united.end());
    std::sort(bikeys.begin(), bikeys.end());
    if (std::adjacent_find(united.begin(), united.end()) != united.end()) {
      detail = "h=" + std::to_string(h) + ": top-down and bottom-up overlap";
      return false;
    }
    if (united != bikeys) {
      detail = "h=" + std::to_string(h) + ": bi is not the union of top-down and bottom-up";
      return false;
    }
  }
  detail = "h=2..5: bi == top_down (+) bottom_up, |B|=h(h-1), teacher depths ordered";
  return true;
}

// ---- criterion 5: perturbation decomposition ----------------------------------

bool crit_decomposition(std::string& detail) {
  auto shelf = standard_fixtures();

  PerturbationSpec lin;
  lin.sigma = 0.1;
  lin.n_samples = 2'000'000;
  lin.seed = 11;
  // the two closed-form terms are deterministic (compared at roundoff: 0.5
  // sigma^2 rounds one ulp off the 0.005 literal); the CI governs the MC side
  auto rep = verify_synergy_decomposition(fixture_by_name(shelf, "linear"), lin);
  bool lin_ok = rel_gap(rep.consistency_term, 4.5) < 1e-12 &&
                rel_gap(rep.mismatch_term, 0.005) < 1e-12 &&
                std::fabs(rep.lhs - 4.505) <= rep.mc_ci &&
                std::fabs(rep.residual) <= rep.mc_ci && rep.pass;
  if (!lin_ok) {
    detail = "linear fixture: lhs=" + fmt("%.6f", rep.lhs) + " vs 4.505, ci=" +
             fmt("%.2e", rep.mc_ci);
    return false;
  }

  std::vector<SynergyReport> sweep;
  for (double s : {0.2, 0.1, 0.05}) {
    PerturbationSpec ps;
    ps.sigma = s;
    ps.n_samples = 4'000'000;
    ps.seed = 11;
    sweep.push_back(verify_synergy_decomposition(fixture_by_name(shelf, "cubic_balanced"), ps));
  }
  double slope = residual_loglog_slope(sweep);
  detail = "linear lhs=" + fmt("%.6f", rep.lhs) + " within ci " + fmt("%.2e", rep.mc_ci) +
           "; cubic residual slope=" + fmt("%.3f", slope);
  return slope >= 3.5;
}

// ---- criterion 6: export equivalence ------------------------------------------

bool crit_export_equivalence(std::string& detail) {
  using T = float;
  ModelSpec spec = make_model_spec("cifar_mini", 4);
  MultiHeadModel<T> full(spec, 23);

  // move batch-norm running stats off their init so the comparison covers
  // live statistics, then checkpoint
  SyntheticSpec dspec;
  dspec.per_class = 4;
  dspec.test_per_class = 1;
  auto [tr, te] = generate_synthetic(dspec, 23);
  for (int pass = 0; pass < 3; ++pass) {
    auto [x, y] = make_batch<T>(tr, {0, 5, 10, 15});
    full.forward_all(x, Mode::train);
  }
  fs::path full_path = g_work / "export_full.ckpt";
  fs::path stripped_path = g_work / "export_stripped.ckpt";
  save_checkpoint(full_path.string(), checkpoint_from_model(full));

  auto res = run_cli("export --ckpt " + full_path.string() + " --out " + stripped_path.string());
  if (res.exit_code != 0) {
    detail = "export exited " + std::to_string(res.exit_code);
    return false;
  }

  Checkpoint fck = load_checkpoint(full_path.string());
  Checkpoint sck = load_checkpoint(stripped_path.string());
  MultiHeadModel<T> orig(fck.spec, 0);
  load_into_model(fck, orig);
  MultiHeadModel<T> stripped(sck.spec, 0);
  load_into_model(sck, stripped);

  if (!stripped.head_ids().empty() && stripped.head_ids() != std::vector<std::string>{"C1"}) {
    detail = "stripped model still has aux heads";
    return false;
  }
  if (sck.total_elements() >= fck.total_elements()) {
    detail = "parameter count did not decrease: " + std::to_string(fck.total_elements()) +
             " -> " + std::to_string(sck.total_elements());
    return false;
  }

  std::mt19937_64 rng(91);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<T> vals(100 * 3 * 32 * 32);
  for (auto& v : vals) v = static_cast<T>(gauss(rng));
  Tensor<T> x = Tensor<T>::from_data({100, 3, 32, 32}, std::move(vals));
  Tensor<T> a = orig.forward_all(x, Mode::eval)[0];
  Tensor<T> b = stripped.forward_all(x, Mode::eval)[0];
  if (a.shape() != b.shape() ||
      std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) != 0) {
    detail = "C1 logits differ between original and stripped model";
    return false;
  }
  detail = "100 inputs bit-exact; parameters " + std::to_string(fck.total_elements()) + " -> " +
           std::to_string(sck.total_elements());
  return true;
}

// ---- criterion 7: desk-scale training efficacy --------------------------------

// Noisy-label regime: a 30% corrupted synthetic task is easy to fit and easy
// to overfit, so the regularizing effect of the auxiliary heads and matching
// terms shows up as higher training error and lower test error. Statistical
// ordering of 5-seed means, not a numeric match.
bool crit_training_efficacy(std::string& detail) {
  using T = float;
  double base_train = 0, base_test = 0, dks_train = 0, dks_test = 0;
  auto seeds = default_seeds();

  for (uint64_t seed : seeds) {
    SyntheticSpec dspec;
    dspec.classes = 4;
    dspec.per_class = 128;
    dspec.test_per_class = 64;
    auto [tr, te] = generate_synthetic(dspec, seed);
    corrupt_labels(tr.labels, tr.num_classes, 0.3, seed);

    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.schedule.lr0 = 0.1;
    cfg.schedule.milestones = {15, 25};
    cfg.schedule.factor = 10.0;
    cfg.momentum = 0.9;
    cfg.weight_decay = 1e-4;
    cfg.seed = seed;

    {
      ModelSpec spec = select_aux_heads(make_model_spec("cifar_mini", 4), {});
      MultiHeadModel<T> model(spec, seed);
      auto rows = train(model, tr, te, cfg, LossPlan{});
      base_train += rows.back().train_err / static_cast<double>(seeds.size());
      base_test += rows.back().test_err / static_cast<double>(seeds.size());
    }
    {
      ModelSpec spec = make_model_spec("cifar_mini", 4);
      MultiHeadModel<T> model(spec, seed);
      LossPlan plan;
      plan.pairs = build_pair_set(model.head_ids(), PairStrategy::bi);
      auto rows = train(model, tr, te, cfg, plan);
      dks_train += rows.back().train_err / static_cast<double>(seeds.size());
      dks_test += rows.back().test_err / static_cast<double>(seeds.size());
    }
  }

  detail = "5-seed means: test_err dks=" + fmt("%.2f", dks_test) + "% vs baseline=" +
           fmt("%.2f", base_test) + "%; train_err dks=" + fmt("%.2f", dks_train) +
           "% vs baseline=" + fmt("%.2f", base_train) + "%";
  return dks_test <= base_test && dks_train >= base_train;
}

// ---- criterion 8: rerun determinism -------------------------------------------

bool crit_determinism(std::string& detail) {
  std::string cfg = R"({
  "version": 1,
  "seed": 3,
  "precision": 32,
  "data": {
    "source": "synthetic",
    "synthetic": {"classes": 4, "per_class": 8, "test_per_class": 4},
    "label_noise": 0.3
  },
  "model": {"preset": "cifar_mini"},
  "loss": {"scheme": "dks", "strategy": "bi"},
  "train": {"epochs": 2, "batch_size": 8}
})";
  fs::path cfg_path = g_work / "det.json";
  spit(cfg_path, cfg);
  fs::path a = g_work / "det_a", b = g_work / "det_b";
  for (const auto& out : {a, b}) {
    auto res = run_cli("train --config " + cfg_path.string() + " --out " + out.string());
    if (res.exit_code != 0) {
      detail = "train exited " + std::to_string(res.exit_code);
      return false;
    }
  }
  bool metrics_same = slurp(a / "metrics.csv") == slurp(b / "metrics.csv");
  bool ckpt_same = slurp(a / "final.ckpt") == slurp(b / "final.ckpt");
  if (!metrics_same || !ckpt_same) {
    detail = std::string("rerun differs: ") + (metrics_same ? "" : "metrics.csv ") +
             (ckpt_same ? "" : "final.ckpt");
    return false;
  }
  detail = "identical config and seed: metrics.csv and final.ckpt byte-identical across reruns";
  return true;
}

// ---- criterion 9: label corruption --------------------------------------------

bool crit_label_corruption(std::string& detail) {
  const int64_t n = 10000;
  const int64_t k = 10;
  std::vector<int32_t> orig(n);
  for (int64_t i = 0; i < n; ++i) orig[i] = static_cast<int32_t>(i % k);

  for (double r : {0.3, 0.37}) {
    int64_t want = std::llround(r * static_cast<double>(n));
    auto c1 = orig, c2 = orig, c3 = orig;
    corrupt_labels(c1, k, r, 9);
    corrupt_labels(c2, k, r, 9);
    corrupt_labels(c3, k, r, 10);
    int64_t changed = 0;
    for (int64_t i = 0; i < n; ++i)
      if (c1[i] != orig[i]) ++changed;
    if (changed != want) {
      detail = "r=" + fmt("%.2f", r) + ": " + std::to_string(changed) + " labels changed, want " +
               std::to_string(want);
      return false;
    }
    if (c1 != c2) {
      detail = "same seed produced different corruptions";
      return false;
    }
    if (c1 == c3) {
      detail = "different seeds produced identical corruptions";
      return false;
    }
  }
  detail = "round(r*N) labels changed, every change differs from the original, seed-reproducible";
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path-to-dks-binary>\n";
    return 2;
  }
  g_dks_bin = argv[1];
  g_work = fs::temp_directory_path() / ("dks_acceptance_" + std::to_string(getpid()));
  fs::create_directories(g_work);

  struct Criterion {
    int number;
    std::string title;
    std::function<bool(std::string&)> run;
    double budget_seconds;  // 0 = no stated budget
  };
  std::vector<Criterion> criteria{
      {1, "gradient audit, 3-head bi-directional objective, 64-bit", crit_gradient_audit, 300},
      {2, "loss-reduction identities", crit_reduction_identities, 0},
      {3, "stop-gradient semantics", crit_stop_gradient, 0},
      {4, "pair-set algebra", crit_pair_algebra, 0},
      {5, "perturbation decomposition and residual order", crit_decomposition, 600},
      {6, "export equivalence", crit_export_equivalence, 0},
      {7, "training efficacy under label noise", crit_training_efficacy, 3600},
      {8, "rerun determinism", crit_determinism, 0},
      {9, "label corruption ratio", crit_label_corruption, 0},
  };

  int failed = 0;
  for (auto& c : criteria) {
    std::string detail;
    bool ok = false;
    auto t0 = std::chrono::steady_clock::now();
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (ok && c.budget_seconds > 0 && secs > c.budget_seconds) {
      ok = false;
      detail += "; exceeded " + fmt("%.0f", c.budget_seconds) + "s budget";
    }
    if (!ok) ++failed;
    std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << c.number << ": " << c.title << " ("
              << detail << ") [" << fmt("%.1f", secs) << "s]" << std::endl;
  }

  std::error_code ec;
  fs::remove_all(g_work, ec);

  if (failed) {
    std::cout << "acceptance: " << failed << " of " << criteria.size() << " criteria FAILED"
              << std::endl;
    return 1;
  }
  std::cout << "acceptance: all " << criteria.size() << " criteria passed" << std::endl;
  return 0;
}
