#include "dks/runconfig.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dks {

namespace {

using nlohmann::json;

void require_keys(const json& obj, const std::string& where, const std::set<std::string>& known) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("config: unknown key '" + where + it.key() + "'");
}

template <typename V>
V get_or(const json& obj, const char* key, V fallback) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  try {
    return it->get<V>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: field '") + key + "' has the wrong type");
  }
}

void parse_weight_map(const json& j, const std::string& where, double& def,
                      std::map<std::string, double>& per_key) {
  if (j.is_number()) {
    def = j.get<double>();
  } else if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!it->is_number())
        throw ConfigError("config: '" + where + "." + it.key() + "' must be a number");
      per_key[it.key()] = it->get<double>();
    }
  } else {
    throw ConfigError("config: '" + where + "' must be a number or an object of numbers");
  }
  auto check = [&](double v, const std::string& k) {
    if (!(v >= 0) || !std::isfinite(v))
      throw ConfigError("config: weight '" + k + "' must be finite and non-negative");
  };
  check(def, where);
  for (auto& [k, v] : per_key) check(v, where + "." + k);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: top level must be a JSON object");
  require_keys(root, "", {"version", "seed", "precision", "out", "data", "model", "loss",
                          "optim", "train"});

  RunConfig rc;
  rc.version = get_or<int64_t>(root, "version", 1);
  if (rc.version != 1)
    throw ConfigError("config: unsupported version " + std::to_string(rc.version));
  rc.seed = get_or<uint64_t>(root, "seed", 1);
  rc.precision = get_or<int64_t>(root, "precision", 32);
  if (rc.precision != 32 && rc.precision != 64)
    throw ConfigError("config: precision must be 32 or 64");
  rc.out = get_or<std::string>(root, "out", "");

  if (root.contains("data")) {
    const json& d = root["data"];
    require_keys(d, "data.", {"source", "train", "test", "synthetic", "label_noise"});
    rc.data.source = get_or<std::string>(d, "source", "synthetic");
    if (rc.data.source != "synthetic" && rc.data.source != "dir")
      throw ConfigError("config: data.source must be 'synthetic' or 'dir'");
    rc.data.train_dir = get_or<std::string>(d, "train", "");
    rc.data.test_dir = get_or<std::string>(d, "test", "");
    if (rc.data.source == "dir" && (rc.data.train_dir.empty() || rc.data.test_dir.empty()))
      throw ConfigError("config: data.source 'dir' needs data.train and data.test paths");
    if (d.contains("synthetic")) {
      const json& s = d["synthetic"];
      require_keys(s, "data.synthetic.",
                   {"classes", "per_class", "test_per_class", "channels", "height", "width",
                    "noise_std"});
      auto& sp = rc.data.synthetic;
      sp.classes = get_or<int64_t>(s, "classes", sp.classes);
      sp.per_class = get_or<int64_t>(s, "per_class", sp.per_class);
      sp.test_per_class = get_or<int64_t>(s, "test_per_class", sp.test_per_class);
      sp.channels = get_or<int64_t>(s, "channels", sp.channels);
      sp.height = get_or<int64_t>(s, "height", sp.height);
      sp.width = get_or<int64_t>(s, "width", sp.width);
      sp.noise_std = get_or<double>(s, "noise_std", sp.noise_std);
      if (sp.classes < 2) throw ConfigError("config: synthetic.classes must be >= 2");
      if (sp.per_class < 1) throw ConfigError("config: synthetic.per_class must be >= 1");
      if (sp.channels < 1 || sp.height < 1 || sp.width < 1)
        throw ConfigError("config: synthetic image shape must be positive");
      if (sp.noise_std < 0) throw ConfigError("config: synthetic.noise_std must be >= 0");
    }
    rc.data.label_noise = get_or<double>(d, "label_noise", 0.0);
    if (rc.data.label_noise < 0 || rc.data.label_noise > 1)
      throw ConfigError("config: data.label_noise must be in [0,1]");
  }

  if (root.contains("model")) {
    const json& m = root["model"];
    require_keys(m, "model.", {"preset", "num_classes", "aux"});
    rc.model.preset = get_or<std::string>(m, "preset", rc.model.preset);
    rc.model.num_classes = get_or<int64_t>(m, "num_classes", 0);
    if (m.contains("aux")) {
      if (!m["aux"].is_array()) throw ConfigError("config: model.aux must be an array of head ids");
      std::vector<std::string> aux;
      for (const auto& v : m["aux"]) {
        if (!v.is_string()) throw ConfigError("config: model.aux entries must be strings");
        aux.push_back(v.get<std::string>());
      }
      rc.model.aux = std::move(aux);
    }
  }

  bool strategy_given = false, beta_given = false;
  if (root.contains("loss")) {
    const json& l = root["loss"];
    require_keys(l, "loss.", {"scheme", "strategy", "alpha", "beta", "log_floor"});
    rc.loss.scheme = parse_scheme(get_or<std::string>(l, "scheme", "dks"));
    if (l.contains("strategy")) {
      strategy_given = true;
      rc.loss.strategy = parse_pair_strategy(l["strategy"].get<std::string>());
    }
    if (l.contains("alpha"))
      parse_weight_map(l["alpha"], "loss.alpha", rc.loss.weights.default_alpha,
                       rc.loss.weights.alpha);
    if (l.contains("beta")) {
      beta_given = true;
      parse_weight_map(l["beta"], "loss.beta", rc.loss.weights.default_beta,
                       rc.loss.weights.beta);
    }
    rc.loss.log_floor = get_or<double>(l, "log_floor", 1e-12);
    if (rc.loss.log_floor <= 0) throw ConfigError("config: loss.log_floor must be positive");
  }

  if (root.contains("optim")) {
    const json& o = root["optim"];
    require_keys(o, "optim.", {"lr", "momentum", "nesterov", "weight_decay", "schedule"});
    rc.train.schedule.lr0 = get_or<double>(o, "lr", 0.1);
    if (!(rc.train.schedule.lr0 > 0)) throw ConfigError("config: optim.lr must be positive");
    rc.train.momentum = get_or<double>(o, "momentum", 0.9);
    rc.train.nesterov = get_or<bool>(o, "nesterov", false);
    rc.train.weight_decay = get_or<double>(o, "weight_decay", 1e-4);
    if (o.contains("schedule")) {
      const json& s = o["schedule"];
      require_keys(s, "optim.schedule.", {"factor", "milestones", "period"});
      rc.train.schedule.factor = get_or<double>(s, "factor", 10.0);
      if (!(rc.train.schedule.factor > 1))
        throw ConfigError("config: optim.schedule.factor must be > 1 (a division factor)");
      bool has_m = s.contains("milestones"), has_p = s.contains("period");
      if (has_m && has_p)
        throw ConfigError("config: optim.schedule takes either milestones or period, not both");
      if (has_m) {
        for (const auto& v : s["milestones"]) {
          if (!v.is_number_integer() || v.get<int64_t>() < 0)
            throw ConfigError("config: optim.schedule.milestones must be non-negative integers");
          rc.train.schedule.milestones.push_back(v.get<int64_t>());
        }
      }
      if (has_p) {
        rc.train.schedule.period = s["period"].get<int64_t>();
        if (rc.train.schedule.period < 1)
          throw ConfigError("config: optim.schedule.period must be >= 1");
      }
    }
  }

  if (root.contains("train")) {
    const json& t = root["train"];
    require_keys(t, "train.", {"epochs", "batch_size", "augment", "checkpoint_every"});
    rc.train.epochs = get_or<int64_t>(t, "epochs", 30);
    rc.train.batch_size = get_or<int64_t>(t, "batch_size", 64);
    rc.train.augment = get_or<bool>(t, "augment", false);
    rc.checkpoint_every = get_or<int64_t>(t, "checkpoint_every", 0);
    if (rc.train.epochs < 0) throw ConfigError("config: train.epochs must be >= 0");
    if (rc.train.batch_size < 2) throw ConfigError("config: train.batch_size must be >= 2");
    if (rc.checkpoint_every < 0)
      throw ConfigError("config: train.checkpoint_every must be >= 0");
  }

  rc.train.seed = rc.seed;
  rc.train.log_floor = rc.loss.log_floor;

  // scheme coherence (fail-closed, mirroring the objective's reductions)
  switch (rc.loss.scheme) {
    case Scheme::baseline:
      if (rc.model.aux && !rc.model.aux->empty())
        throw ConfigError("config: scheme 'baseline' admits no aux heads; drop model.aux or "
                          "switch to ds/dks");
      if (strategy_given)
        throw ConfigError("config: scheme 'baseline' has no pair set; drop loss.strategy");
      if (beta_given)
        throw ConfigError("config: scheme 'baseline' has no pair set; drop loss.beta");
      rc.model.aux = std::vector<std::string>{};
      break;
    case Scheme::ds:
      if (strategy_given)
        throw ConfigError("config: scheme 'ds' has an empty pair set; drop loss.strategy");
      if (beta_given)
        throw ConfigError("config: scheme 'ds' has an empty pair set; drop loss.beta");
      break;
    case Scheme::dks:
      if (!rc.loss.strategy) rc.loss.strategy = PairStrategy::bi;
      break;
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string resolved_config_json(const RunConfig& rc) {
  json root;
  root["version"] = rc.version;
  root["seed"] = rc.seed;
  root["precision"] = rc.precision;
  root["out"] = rc.out;

  json d;
  d["source"] = rc.data.source;
  if (rc.data.source == "dir") {
    d["train"] = rc.data.train_dir;
    d["test"] = rc.data.test_dir;
  } else {
    json s;
    s["classes"] = rc.data.synthetic.classes;
    s["per_class"] = rc.data.synthetic.per_class;
    s["test_per_class"] = rc.data.synthetic.test_per_class;
    s["channels"] = rc.data.synthetic.channels;
    s["height"] = rc.data.synthetic.height;
    s["width"] = rc.data.synthetic.width;
    s["noise_std"] = rc.data.synthetic.noise_std;
    d["synthetic"] = s;
  }
  d["label_noise"] = rc.data.label_noise;
  root["data"] = d;

  json m;
  m["preset"] = rc.model.preset;
  m["num_classes"] = rc.model.num_classes;
  if (rc.model.aux) m["aux"] = *rc.model.aux;
  root["model"] = m;

  json l;
  l["scheme"] = scheme_name(rc.loss.scheme);
  if (rc.loss.strategy) l["strategy"] = pair_strategy_name(*rc.loss.strategy);
  if (rc.loss.weights.alpha.empty())
    l["alpha"] = rc.loss.weights.default_alpha;
  else {
    json a = rc.loss.weights.alpha;
    l["alpha"] = a;
  }
  if (rc.loss.scheme == Scheme::dks) {
    if (rc.loss.weights.beta.empty())
      l["beta"] = rc.loss.weights.default_beta;
    else {
      json b = rc.loss.weights.beta;
      l["beta"] = b;
    }
  }
  l["log_floor"] = rc.loss.log_floor;
  root["loss"] = l;

  json o;
  o["lr"] = rc.train.schedule.lr0;
  o["momentum"] = rc.train.momentum;
  o["nesterov"] = rc.train.nesterov;
  o["weight_decay"] = rc.train.weight_decay;
  json sch;
  sch["factor"] = rc.train.schedule.factor;
  if (rc.train.schedule.period > 0)
    sch["period"] = rc.train.schedule.period;
  else
    sch["milestones"] = rc.train.schedule.milestones;
  o["schedule"] = sch;
  root["optim"] = o;

  json t;
  t["epochs"] = rc.train.epochs;
  t["batch_size"] = rc.train.batch_size;
  t["augment"] = rc.train.augment;
  t["checkpoint_every"] = rc.checkpoint_every;
  root["train"] = t;

  return root.dump(2) + "\n";
}

}  // namespace dks
