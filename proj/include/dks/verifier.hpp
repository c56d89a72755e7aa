#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dks/blocks.hpp"
#include "dks/tensor.hpp"

namespace dks {

// ---- finite-difference gradient audit ---------------------------------------

struct GradCheckOptions {
  double fd_step = 1e-5;
  double rel_floor = 1e-3;   // denominator floor of the guarded relative error
  double tolerance = 1e-5;   // max allowed guarded relative error
  int64_t max_elements_per_group = 0;  // 0 = check every element
  uint64_t sample_seed = 0;  // element sampling when capped
  double detached_min_slope = 1e-7;  // |fd| above this confirms a live detached path
};

struct GradGroupResult {
  std::string name;
  int64_t checked = 0;
  double max_rel_err = 0;
  int64_t worst_index = -1;
  double worst_analytic = 0;
  double worst_numeric = 0;
  bool expected_detached = false;
  double max_abs_fd = 0;         // largest |fd| seen in the group
  bool detached_live = false;    // FD saw a real slope through the detached path
  bool pass = true;
  std::string note;
};

struct GradCheckReport {
  std::vector<GradGroupResult> groups;
  double max_rel_err = 0;  // over non-detached groups
  bool pass = true;
};

/// Guarded relative error: |a-f| / max(|a|,|f|,floor). The floor keeps tiny
/// gradients from blowing up the ratio through roundoff alone.
inline double guarded_rel_err(double analytic, double fd, double floor) {
  double denom = std::max({std::fabs(analytic), std::fabs(fd), floor});
  return std::fabs(analytic - fd) / denom;
}

/// Central-difference audit of analytic gradients.
///
/// `loss_value` must recompute the scalar objective from the parameters'
/// *current* values (it is called many times with elements nudged in place).
/// `loss_graph` must build the same objective under the active tape so
/// backward() can fill analytic gradients; both must describe the same
/// function.
///
/// Groups named in `expected_detached` are paths that reach the loss only
/// through a stop-gradient: their analytic gradient must be exactly zero
/// while finite differences, which know nothing about detach, generally see a
/// real slope. That mismatch is the documented semantics of detach, so it is
/// reported as its own class instead of a failure.
template <typename T>
GradCheckReport grad_check(const std::function<double()>& loss_value,
                           const std::function<Tensor<T>()>& loss_graph,
                           std::vector<NamedTensor<T>>& params, const GradCheckOptions& opts = {},
                           const std::vector<std::string>& expected_detached = {}) {
  static_assert(std::is_same_v<T, double>,
                "grad_check needs 64-bit scalars; finite differences are meaningless in float32");
  GradCheckReport report;

  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    Tensor<T> loss = loss_graph();
    for (auto& p : params) p.tensor.zero_grad();
    backward(loss);
    for (auto& p : params) {
      auto g = p.tensor.grad();
      analytic.emplace_back(g.begin(), g.end());
      if (p.trainable)
        for (T v : g)
          if (!std::isfinite(v))
            throw UsageError("grad_check: non-finite analytic gradient in group " + p.name);
    }
  }

  std::mt19937_64 sample_rng(mix_seed(opts.sample_seed, seed_tag::verify));
  const double h = opts.fd_step;

  for (size_t gi = 0; gi < params.size(); ++gi) {
    auto& p = params[gi];
    if (!p.trainable) continue;
    GradGroupResult res;
    res.name = p.name;
    res.expected_detached =
        std::find(expected_detached.begin(), expected_detached.end(), p.name) !=
        expected_detached.end();

    std::vector<int64_t> idx(p.tensor.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (opts.max_elements_per_group > 0 &&
        static_cast<int64_t>(idx.size()) > opts.max_elements_per_group) {
      std::shuffle(idx.begin(), idx.end(), sample_rng);
      idx.resize(opts.max_elements_per_group);
      std::sort(idx.begin(), idx.end());
    }

    auto theta = p.tensor.data_mut();
    for (int64_t i : idx) {
      T keep = theta[i];
      theta[i] = keep + static_cast<T>(h);
      double fp = loss_value();
      theta[i] = keep - static_cast<T>(h);
      double fm = loss_value();
      theta[i] = keep;
      double fd = (fp - fm) / (2.0 * h);
      double an = static_cast<double>(analytic[gi][i]);
      res.max_abs_fd = std::max(res.max_abs_fd, std::fabs(fd));

      if (res.expected_detached) {
        if (an != 0.0) {
          res.pass = false;
          res.note = "analytic gradient expected to be exactly zero through a detached path";
          res.worst_index = i;
          res.worst_analytic = an;
          res.worst_numeric = fd;
        }
      } else {
        double rel = guarded_rel_err(an, fd, opts.rel_floor);
        if (rel > res.max_rel_err) {
          res.max_rel_err = rel;
          res.worst_index = i;
          res.worst_analytic = an;
          res.worst_numeric = fd;
        }
      }
      ++res.checked;
    }

    if (res.expected_detached) {
      res.detached_live = res.max_abs_fd > opts.detached_min_slope;
      if (res.pass)
        res.note = res.detached_live
                       ? "stop-gradient divergence: finite differences see a live slope, "
                         "analytic gradient is zero by construction"
                       : "detached and numerically flat";
    } else {
      res.pass = res.max_rel_err <= opts.tolerance;
      report.max_rel_err = std::max(report.max_rel_err, res.max_rel_err);
    }
    report.pass = report.pass && res.pass;
    report.groups.push_back(std::move(res));
  }
  return report;
}

// ---- Monte-Carlo decomposition of the synergy term ---------------------------

/// A two-head regression fixture: smooth heads g1, g2 mapping R^in_dim to
/// R^out_dim, with analytic Jacobians. Smoothness matters: the second-order
/// expansion underlying the decomposition assumes two derivatives, so kinked
/// activations are rejected by construction (there is no way to express one
/// here).
struct TwoHeadFixture {
  std::string name;
  int64_t in_dim = 1;
  int64_t out_dim = 1;
  std::vector<double> z0;
  // value(z, out) evaluates a head; jacobian(z, J) fills row-major [out_dim x in_dim]
  std::function<void(const double*, double*)> g1, g2;
  std::function<void(const double*, double*)> j1, j2;
  double band_c = 10.0;  // fixture-specific constant of the sigma^4 pass band
  bool gated = true;     // participates in suite pass/fail (vs informational)
  std::string expected;  // one-line description of the known closed form
};

struct PerturbationSpec {
  double sigma = 0.1;
  int64_t n_samples = 1'000'000;
  uint64_t seed = 1;
};

struct SynergyReport {
  std::string fixture;
  double sigma = 0;
  int64_t n_samples = 0;
  double lhs = 0;               // MC estimate of E 1/2||g1(z0+e)-g2(z0+e)||^2
  double consistency_term = 0;  // 1/2 ||g1(z0)-g2(z0)||^2
  double mismatch_term = 0;     // 1/2 sigma^2 ||J1(z0)-J2(z0)||_F^2
  double residual = 0;          // lhs - consistency - mismatch
  double mc_ci = 0;             // 3 * sample std / sqrt(n)
  double band = 0;              // band_c * sigma^4 + mc_ci
  bool pass = false;
};

/// Estimates E_eps[1/2||g1(z0+eps)-g2(z0+eps)||^2] with isotropic Gaussian
/// perturbations and compares it against the second-order closed form
/// (value gap + sigma^2-scaled Jacobian gap). The residual carries every
/// higher-order term; the pass band allows c*sigma^4 plus Monte-Carlo noise.
inline SynergyReport verify_synergy_decomposition(const TwoHeadFixture& fx,
                                                  const PerturbationSpec& spec) {
  if (spec.sigma <= 0) throw ConfigError("synergy: sigma must be positive");
  if (spec.n_samples < 2) throw ConfigError("synergy: need at least 2 samples");

  SynergyReport rep;
  rep.fixture = fx.name;
  rep.sigma = spec.sigma;
  rep.n_samples = spec.n_samples;

  std::vector<double> v1(fx.out_dim), v2(fx.out_dim);
  fx.g1(fx.z0.data(), v1.data());
  fx.g2(fx.z0.data(), v2.data());
  for (int64_t i = 0; i < fx.out_dim; ++i) {
    double d = v1[i] - v2[i];
    rep.consistency_term += 0.5 * d * d;
  }

  std::vector<double> J1(fx.out_dim * fx.in_dim), J2(fx.out_dim * fx.in_dim);
  fx.j1(fx.z0.data(), J1.data());
  fx.j2(fx.z0.data(), J2.data());
  double jgap = 0;
  for (size_t i = 0; i < J1.size(); ++i) {
    double d = J1[i] - J2[i];
    jgap += d * d;
  }
  rep.mismatch_term = 0.5 * spec.sigma * spec.sigma * jgap;

  std::mt19937_64 rng(mix_seed(spec.seed, seed_tag::verify));
  std::normal_distribution<double> gauss(0.0, spec.sigma);
  std::vector<double> z(fx.in_dim);
  double sum = 0, sumsq = 0;
  for (int64_t s = 0; s < spec.n_samples; ++s) {
    for (int64_t i = 0; i < fx.in_dim; ++i) z[i] = fx.z0[i] + gauss(rng);
    fx.g1(z.data(), v1.data());
    fx.g2(z.data(), v2.data());
    double val = 0;
    for (int64_t i = 0; i < fx.out_dim; ++i) {
      double d = v1[i] - v2[i];
      val += 0.5 * d * d;
    }
    sum += val;
    sumsq += val * val;
  }
  double n = static_cast<double>(spec.n_samples);
  rep.lhs = sum / n;
  double var = std::max(0.0, sumsq / n - rep.lhs * rep.lhs);
  rep.mc_ci = 3.0 * std::sqrt(var / n);
  rep.residual = rep.lhs - rep.consistency_term - rep.mismatch_term;
  rep.band = fx.band_c * std::pow(spec.sigma, 4.0) + rep.mc_ci;
  rep.pass = std::fabs(rep.residual) <= rep.band;
  return rep;
}

/// Least-squares slope of log|residual| against log(sigma).
inline double residual_loglog_slope(const std::vector<SynergyReport>& reports) {
  if (reports.size() < 2) throw UsageError("slope fit needs at least two sigma points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  double n = static_cast<double>(reports.size());
  for (const auto& r : reports) {
    double x = std::log(r.sigma);
    double y = std::log(std::max(std::fabs(r.residual), 1e-300));
    sx += x; sy += y; sxx += x * x; sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

/// The Appendix-style DS vs DKS loss split on a two-head regression fixture,
/// evaluated on shared perturbation samples:
///   per-branch fit terms 1/2||g_i(z0+e)-y||^2 and the synergy term.
/// On shared samples L_dks - L_ds - synergy is identically zero; the value of
/// each term is also returned for closed-form comparisons.
struct LossSplitReport {
  double l_ds = 0;
  double l_dks = 0;
  double synergy = 0;
  double identity_gap = 0;  // l_dks - (l_ds + synergy), same samples
};

inline LossSplitReport ds_vs_dks_loss_split(const TwoHeadFixture& fx,
                                            const std::vector<double>& y,
                                            const PerturbationSpec& spec) {
  if (static_cast<int64_t>(y.size()) != fx.out_dim)
    throw ConfigError("loss split: target size does not match head output size");
  if (spec.sigma < 0) throw ConfigError("loss split: sigma must be >= 0");
  std::mt19937_64 rng(mix_seed(spec.seed, seed_tag::verify));
  std::normal_distribution<double> gauss(0.0, spec.sigma);
  std::vector<double> z(fx.in_dim), v1(fx.out_dim), v2(fx.out_dim);
  LossSplitReport rep;
  double n = static_cast<double>(spec.n_samples);
  for (int64_t s = 0; s < spec.n_samples; ++s) {
    for (int64_t i = 0; i < fx.in_dim; ++i)
      z[i] = fx.z0[i] + (spec.sigma > 0 ? gauss(rng) : 0.0);
    fx.g1(z.data(), v1.data());
    fx.g2(z.data(), v2.data());
    double fit1 = 0, fit2 = 0, syn = 0;
    for (int64_t i = 0; i < fx.out_dim; ++i) {
      double d1 = v1[i] - y[i], d2 = v2[i] - y[i], ds = v1[i] - v2[i];
      fit1 += 0.5 * d1 * d1;
      fit2 += 0.5 * d2 * d2;
      syn += 0.5 * ds * ds;
    }
    rep.l_ds += (fit1 + fit2) / n;
    rep.synergy += syn / n;
    rep.l_dks += (fit1 + fit2 + syn) / n;
  }
  rep.identity_gap = rep.l_dks - (rep.l_ds + rep.synergy);
  return rep;
}

// ---- the fixture shelf -------------------------------------------------------

/// Fixtures with known closed forms. Gaussian moments: E e^2 = s^2,
/// E e^4 = 3 s^4, E e^6 = 15 s^6 (odd moments vanish).
///
///  - linear: g1=2z, g2=z at z0=3. Expansion exact: residual 0.
///  - identical: g1 == g2 (tanh head). Everything 0.
///  - quadratic_balanced: g1=z^2, g2=-z^2 at z0=0. Delta=2z^2:
///    E 1/2(2z^2)^2 = 2*3s^4 = 6s^4; value and Jacobian gaps are 0 at z0,
///    so the residual is exactly 6 s^4: pure fourth order, slope 4.
///  - cubic_balanced: g1=(z^3, z^3-2z), g2=(0,0) at z0=1. Per coordinate the
///    second-order term drops what multiplies Delta_j * (curvature of
///    Delta_j); here Delta_1*H_1 + Delta_2*H_2 = 1*6 + (-1)*6 = 0 at z0, so
///    the sigma^2 leak cancels and the residual is 39 s^4 + 15 s^6
///    (slope ~3.88 over sigma in {0.2,0.1,0.05}).
///  - cubic_plain: g1=z^3, g2=0 at z0=1. Here Delta*trace-curvature = 6 does
///    NOT cancel: expanding E 1/2 (z0+e)^6 about z0=1 gives residual
///    3 s^2 + 22.5 s^4 + 7.5 s^6 — second order, slope ~2.2, because the
///    big-O bookkeeping in the expansion absorbs a term that is really
///    O(sigma^2) unless the value gap or the curvature vanishes. Kept
///    ungated as a boundary marker of the expansion's assumptions.
inline std::vector<TwoHeadFixture> standard_fixtures() {
  std::vector<TwoHeadFixture> out;

  {
    TwoHeadFixture f;
    f.name = "linear";
    f.z0 = {3.0};
    f.g1 = [](const double* z, double* o) { o[0] = 2.0 * z[0]; };
    f.g2 = [](const double* z, double* o) { o[0] = z[0]; };
    f.j1 = [](const double*, double* j) { j[0] = 2.0; };
    f.j2 = [](const double*, double* j) { j[0] = 1.0; };
    f.band_c = 10.0;
    f.expected = "exact: lhs = (z0^2 + sigma^2)/2, residual 0";
    out.push_back(std::move(f));
  }
  {
    TwoHeadFixture f;
    f.name = "identical";
    f.z0 = {0.7};
    f.g1 = [](const double* z, double* o) { o[0] = std::tanh(z[0]); };
    f.g2 = f.g1;
    f.j1 = [](const double* z, double* j) {
      double t = std::tanh(z[0]);
      j[0] = 1.0 - t * t;
    };
    f.j2 = f.j1;
    f.band_c = 10.0;
    f.expected = "identical heads: every term 0";
    out.push_back(std::move(f));
  }
  {
    TwoHeadFixture f;
    f.name = "quadratic_balanced";
    f.z0 = {0.0};
    f.g1 = [](const double* z, double* o) { o[0] = z[0] * z[0]; };
    f.g2 = [](const double* z, double* o) { o[0] = -z[0] * z[0]; };
    f.j1 = [](const double* z, double* j) { j[0] = 2.0 * z[0]; };
    f.j2 = [](const double* z, double* j) { j[0] = -2.0 * z[0]; };
    f.band_c = 10.0;
    f.expected = "residual exactly 6 sigma^4";
    out.push_back(std::move(f));
  }
  {
    TwoHeadFixture f;
    f.name = "cubic_balanced";
    f.out_dim = 2;
    f.z0 = {1.0};
    f.g1 = [](const double* z, double* o) {
      double c = z[0] * z[0] * z[0];
      o[0] = c;
      o[1] = c - 2.0 * z[0];
    };
    f.g2 = [](const double*, double* o) { o[0] = 0.0; o[1] = 0.0; };
    f.j1 = [](const double* z, double* j) {
      j[0] = 3.0 * z[0] * z[0];
      j[1] = 3.0 * z[0] * z[0] - 2.0;
    };
    f.j2 = [](const double*, double* j) { j[0] = 0.0; j[1] = 0.0; };
    f.band_c = 50.0;  // measured constant 39 plus headroom for the 15 sigma^6 tail
    f.expected = "residual 39 sigma^4 + 15 sigma^6";
    out.push_back(std::move(f));
  }
  {
    TwoHeadFixture f;
    f.name = "cubic_plain";
    f.z0 = {1.0};
    f.g1 = [](const double* z, double* o) { o[0] = z[0] * z[0] * z[0]; };
    f.g2 = [](const double*, double* o) { o[0] = 0.0; };
    f.j1 = [](const double* z, double* j) { j[0] = 3.0 * z[0] * z[0]; };
    f.j2 = [](const double*, double* j) { j[0] = 0.0; };
    f.band_c = 10.0;
    f.gated = false;  // true residual is 3 sigma^2 + 22.5 sigma^4 + 7.5 sigma^6
    f.expected = "residual 3 sigma^2 + 22.5 sigma^4 + 7.5 sigma^6 (value-curvature cross term survives)";
    out.push_back(std::move(f));
  }
  return out;
}

inline const TwoHeadFixture& fixture_by_name(const std::vector<TwoHeadFixture>& shelf,
                                             const std::string& name) {
  for (const auto& f : shelf)
    if (f.name == name) return f;
  throw ConfigError("synergy: unknown fixture '" + name + "'");
}

}  // namespace dks
