#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dks/blocks.hpp"

namespace dks {

struct StageSpec {
  int64_t channels = 0;
  int64_t blocks = 0;
  int64_t stride = 1;  // stride of the first block
};

/// An auxiliary classifier branch: where it taps the backbone and the
/// residual stages it runs before its own pooled linear classifier.
struct HeadSpec {
  std::string id;                // "C2", "C3", ...
  int64_t attach_after_stage = 0;  // backbone stage index the branch reads from
  std::vector<StageSpec> stages;
};

struct ModelSpec {
  std::string preset = "custom";
  int64_t in_channels = 3, in_h = 32, in_w = 32;
  int64_t stem_channels = 16;
  int64_t stem_kernel = 3;
  int64_t stem_stride = 1;
  std::vector<StageSpec> stages;
  std::vector<HeadSpec> heads;  // auxiliary heads only; the final classifier is implicit
  int64_t num_classes = 10;
};

inline int64_t stride_downsamples(int64_t stride) { return stride == 2 ? 1 : 0; }

inline int64_t backbone_downsamples(const ModelSpec& spec) {
  int64_t d = stride_downsamples(spec.stem_stride);
  for (const auto& st : spec.stages) d += stride_downsamples(st.stride);
  return d;
}

inline int64_t head_path_downsamples(const ModelSpec& spec, const HeadSpec& head) {
  int64_t d = stride_downsamples(spec.stem_stride);
  for (int64_t i = 0; i <= head.attach_after_stage; ++i)
    d += stride_downsamples(spec.stages[i].stride);
  for (const auto& st : head.stages) d += stride_downsamples(st.stride);
  return d;
}

/// Structural checks shared by every construction path:
///  - stage/head indices in range, no duplicate attachment points,
///  - head ids follow the depth convention (C2 attaches deepest, then C3, ...),
///  - every head's input path performs the same number of stride-2 halvings
///    as the full backbone.
inline void validate_model_spec(const ModelSpec& spec) {
  if (spec.stages.empty()) throw ConfigError("model: at least one backbone stage required");
  if (spec.num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (spec.stem_stride != 1 && spec.stem_stride != 2)
    throw ConfigError("model: stem stride must be 1 or 2");
  for (const auto& st : spec.stages)
    if (st.channels < 1 || st.blocks < 1 || (st.stride != 1 && st.stride != 2))
      throw ConfigError("model: bad backbone stage spec");

  std::vector<int64_t> attach_seen;
  for (const auto& h : spec.heads) {
    if (h.attach_after_stage < 0 ||
        h.attach_after_stage >= static_cast<int64_t>(spec.stages.size()))
      throw ConfigError("model: head " + h.id + " attaches after stage " +
                        std::to_string(h.attach_after_stage) + " but backbone has " +
                        std::to_string(spec.stages.size()) + " stages");
    if (h.attach_after_stage == static_cast<int64_t>(spec.stages.size()) - 1)
      throw ConfigError("model: head " + h.id +
                        " attaches after the final stage, which is the main classifier's input");
    if (std::find(attach_seen.begin(), attach_seen.end(), h.attach_after_stage) !=
        attach_seen.end())
      throw ConfigError("model: two heads attach after stage " +
                        std::to_string(h.attach_after_stage));
    attach_seen.push_back(h.attach_after_stage);
    for (const auto& st : h.stages)
      if (st.channels < 1 || st.blocks < 1 || (st.stride != 1 && st.stride != 2))
        throw ConfigError("model: bad stage spec in head " + h.id);
  }

  // id convention: numbers rank by attachment depth, C2 deepest. A subset of
  // a preset keeps its preset names (dropping C2 does not rename C3), so the
  // rule is the strict ordering, not contiguity from 2.
  auto head_number = [](const HeadSpec& h) {
    if (h.id.size() < 2 || h.id[0] != 'C' ||
        h.id.find_first_not_of("0123456789", 1) != std::string::npos)
      throw ConfigError("model: head id '" + h.id + "' must look like C2, C3, ...");
    int64_t n = std::stoll(h.id.substr(1));
    if (n < 2)
      throw ConfigError("model: head id '" + h.id + "' is reserved for the final classifier; "
                        "aux ids start at C2");
    return n;
  };
  std::vector<HeadSpec> by_depth = spec.heads;
  std::sort(by_depth.begin(), by_depth.end(),
            [](const HeadSpec& a, const HeadSpec& b) {
              return a.attach_after_stage > b.attach_after_stage;
            });
  for (const auto& h : by_depth) head_number(h);
  for (size_t i = 1; i < by_depth.size(); ++i) {
    if (head_number(by_depth[i]) <= head_number(by_depth[i - 1]))
      throw ConfigError("model: head " + by_depth[i].id + " attaches after stage " +
                        std::to_string(by_depth[i].attach_after_stage) + " above head " +
                        by_depth[i - 1].id +
                        "; deeper attachments must carry smaller head numbers");
  }

  int64_t bd = backbone_downsamples(spec);
  for (const auto& h : spec.heads) {
    int64_t hd = head_path_downsamples(spec, h);
    if (hd != bd)
      throw ConfigError("model: head " + h.id + " path performs " + std::to_string(hd) +
                        " stride-2 halvings but the backbone performs " + std::to_string(bd));
  }
}

/// Known presets. The *_mini presets are quarter-width variants sized so CPU
/// training stays tractable; resnet32_cifar is the full-size layout.
inline ModelSpec make_model_spec(const std::string& preset, int64_t num_classes) {
  ModelSpec s;
  s.preset = preset;
  s.num_classes = num_classes;
  if (preset == "cifar_mini") {
    s.in_channels = 3; s.in_h = 32; s.in_w = 32;
    s.stem_channels = 4; s.stem_kernel = 3; s.stem_stride = 1;
    s.stages = {{4, 2, 1}, {8, 2, 2}, {16, 2, 2}};
    s.heads = {
        {"C2", 1, {{32, 2, 2}}},
        {"C3", 0, {{8, 2, 2}, {16, 1, 2}}},
    };
  } else if (preset == "resnet32_cifar") {
    s.in_channels = 3; s.in_h = 32; s.in_w = 32;
    s.stem_channels = 16; s.stem_kernel = 3; s.stem_stride = 1;
    s.stages = {{16, 5, 1}, {32, 5, 2}, {64, 5, 2}};
    s.heads = {
        {"C2", 1, {{128, 5, 2}}},
        {"C3", 0, {{32, 5, 2}, {64, 3, 2}}},
    };
  } else if (preset == "tiny_imagenet_mini") {
    s.in_channels = 3; s.in_h = 64; s.in_w = 64;
    s.stem_channels = 16; s.stem_kernel = 3; s.stem_stride = 2;
    s.stages = {{16, 2, 1}, {32, 2, 2}, {64, 2, 2}, {128, 2, 2}};
    s.heads = {
        {"C2", 2, {{256, 2, 2}}},
        {"C3", 1, {{64, 1, 2}, {128, 2, 2}}},
    };
  } else {
    throw ConfigError("model: unknown preset '" + preset + "'");
  }
  validate_model_spec(s);
  return s;
}

/// Restricts a spec to a subset of its aux heads, keeping canonical labels.
/// `keep` lists head ids; "C1" entries are ignored (the final classifier is
/// always present).
inline ModelSpec select_aux_heads(ModelSpec spec, const std::vector<std::string>& keep) {
  std::vector<HeadSpec> kept;
  for (const auto& id : keep) {
    if (id == "C1") continue;
    auto it = std::find_if(spec.heads.begin(), spec.heads.end(),
                           [&](const HeadSpec& h) { return h.id == id; });
    if (it == spec.heads.end())
      throw ConfigError("model: preset '" + spec.preset + "' has no aux head '" + id + "'");
    kept.push_back(*it);
  }
  std::sort(kept.begin(), kept.end(), [](const HeadSpec& a, const HeadSpec& b) {
    return a.attach_after_stage > b.attach_after_stage;
  });
  spec.heads = std::move(kept);
  return spec;
}

inline ModelSpec strip_aux(ModelSpec spec) {
  spec.heads.clear();
  return spec;
}

template <typename T>
struct HeadModule {
  std::string id;
  int64_t attach_after_stage = 0;
  std::vector<Stage<T>> stages;
  LinearLayer<T> fc;
};

/// The backbone plus any auxiliary classifier branches. forward_all returns
/// one [N, num_classes] logit tensor per head, final classifier C1 first,
/// then aux heads by decreasing attachment depth (C2, C3, ...).
template <typename T>
class MultiHeadModel {
 public:
  explicit MultiHeadModel(const ModelSpec& spec, uint64_t seed) : spec_(spec) {
    validate_model_spec(spec_);
    std::mt19937_64 rng(mix_seed(seed, seed_tag::init));

    int64_t pad = (spec_.stem_kernel - 1) / 2;
    stem_conv_ = Conv2dLayer<T>(spec_.in_channels, spec_.stem_channels, spec_.stem_kernel,
                                spec_.stem_stride, pad, false, rng);
    stem_bn_ = BatchNorm2dLayer<T>(spec_.stem_channels);

    int64_t c = spec_.stem_channels;
    for (const auto& st : spec_.stages) {
      stages_.emplace_back(c, st.channels, st.blocks, st.stride, rng);
      c = st.channels;
    }
    fc_ = LinearLayer<T>(c, spec_.num_classes, rng);

    // heads are built in depth order (C2 first) so a given seed yields the
    // same backbone weights regardless of which aux subset is enabled later
    std::vector<HeadSpec> by_depth = spec_.heads;
    std::sort(by_depth.begin(), by_depth.end(),
              [](const HeadSpec& a, const HeadSpec& b) {
                return a.attach_after_stage > b.attach_after_stage;
              });
    for (const auto& h : by_depth) {
      HeadModule<T> mod;
      mod.id = h.id;
      mod.attach_after_stage = h.attach_after_stage;
      int64_t hc = spec_.stages[h.attach_after_stage].channels;
      for (const auto& st : h.stages) {
        mod.stages.emplace_back(hc, st.channels, st.blocks, st.stride, rng);
        hc = st.channels;
      }
      mod.fc = LinearLayer<T>(hc, spec_.num_classes, rng);
      heads_.push_back(std::move(mod));
    }
  }

  const ModelSpec& spec() const { return spec_; }

  std::vector<std::string> head_ids() const {
    std::vector<std::string> ids{"C1"};
    for (const auto& h : heads_) ids.push_back(h.id);
    return ids;
  }

  /// Logits for every head. Order matches head_ids().
  std::vector<Tensor<T>> forward_all(const Tensor<T>& x, Mode mode) {
    if (x.ndim() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.in_h ||
        x.dim(3) != spec_.in_w)
      throw ConfigError("model: input " + shape_str(x.shape()) + " does not match expected [N," +
                        std::to_string(spec_.in_channels) + "," + std::to_string(spec_.in_h) + "," +
                        std::to_string(spec_.in_w) + "]");
    Tensor<T> h = relu(stem_bn_.forward(stem_conv_.forward(x), mode));
    std::vector<Tensor<T>> taps;
    taps.reserve(stages_.size());
    for (auto& st : stages_) {
      h = st.forward(h, mode);
      taps.push_back(h);
    }
    std::vector<Tensor<T>> out;
    out.push_back(fc_.forward(global_avg_pool(h)));
    for (auto& head : heads_) {
      Tensor<T> z = taps[head.attach_after_stage];
      for (auto& st : head.stages) z = st.forward(z, mode);
      out.push_back(head.fc.forward(global_avg_pool(z)));
    }
    return out;
  }

  Tensor<T> forward_c1(const Tensor<T>& x, Mode mode) { return forward_all(x, mode)[0]; }

  /// Every named tensor. Backbone entries first (stem, stages, final fc),
  /// then each aux head. Names are stable across runs and aux subsets.
  std::vector<NamedTensor<T>> params() {
    std::vector<NamedTensor<T>> out;
    stem_conv_.collect("backbone.stem.conv", out);
    stem_bn_.collect("backbone.stem.bn", out);
    for (size_t i = 0; i < stages_.size(); ++i)
      stages_[i].collect("backbone.stage" + std::to_string(i), out);
    fc_.collect("backbone.fc", out);
    for (auto& h : heads_) {
      std::string prefix = "aux." + h.id;
      for (size_t i = 0; i < h.stages.size(); ++i)
        h.stages[i].collect(prefix + ".stage" + std::to_string(i), out);
      h.fc.collect(prefix + ".fc", out);
    }
    return out;
  }

  /// Checkpoint role for a given parameter name.
  std::string role_of(const NamedTensor<T>& p) const {
    if (p.running_stat) return "bn_running_stat";
    if (p.name.rfind("aux.", 0) == 0) {
      auto rest = p.name.substr(4);
      return "aux:" + rest.substr(0, rest.find('.'));
    }
    return "backbone";
  }

  int64_t num_parameters(bool trainable_only = true) {
    int64_t n = 0;
    for (auto& p : params())
      if (!trainable_only || p.trainable) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params())
      if (p.trainable) p.tensor.zero_grad();
  }

 private:
  ModelSpec spec_;
  Conv2dLayer<T> stem_conv_;
  BatchNorm2dLayer<T> stem_bn_;
  std::vector<Stage<T>> stages_;
  LinearLayer<T> fc_;
  std::vector<HeadModule<T>> heads_;
};

}  // namespace dks
