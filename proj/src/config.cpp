#include "ufid/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "ufid/errors.hpp"
#include "ufid/rng.hpp"

namespace ufid {

namespace {

// Shortest text that parses back to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto end = std::to_chars(buf, buf + sizeof(buf), v).ptr;
  return std::string(buf, end);
}

std::string at_line(const YAML::Node& node) {
  return "line " + std::to_string(node.Mark().line + 1);
}

template <typename T>
T read(const YAML::Node& key, const YAML::Node& value) {
  try {
    return value.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(at_line(key) + ": bad value for '" + key.as<std::string>() + "'");
  }
}

[[noreturn]] void unknown(const YAML::Node& key, const std::string& section) {
  throw ConfigError(at_line(key) + ": unknown key '" + key.as<std::string>() + "' in " + section);
}

void require_map(const YAML::Node& node, const std::string& what) {
  if (!node.IsMap()) throw ConfigError(at_line(node) + ": " + what + " must be a mapping");
}

void parse_federation(const YAML::Node& node, OrchestratorConfig& f) {
  require_map(node, "federation");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& k = kv.first;
    const auto& v = kv.second;
    if (key == "rounds") f.rounds = read<std::size_t>(k, v);
    else if (key == "min_fit") f.min_fit = read<std::size_t>(k, v);
    else if (key == "min_evaluate") f.min_evaluate = read<std::size_t>(k, v);
    else if (key == "min_available") f.min_available = read<std::size_t>(k, v);
    else if (key == "batch_size") f.batch_size = read<std::size_t>(k, v);
    else if (key == "local_epochs") f.local_epochs = read<std::size_t>(k, v);
    else if (key == "learning_rate") f.learning_rate = read<double>(k, v);
    else if (key == "lambda_ewc") f.lambda_ewc = read<double>(k, v);
    else if (key == "seed") f.seed = read<std::uint64_t>(k, v);
    else if (key == "fisher_samples") f.fisher_samples = read<std::size_t>(k, v);
    else if (key == "workers") f.workers = read<std::size_t>(k, v);
    else if (key == "aggregation") {
      try {
        f.aggregation = parse_aggregation(read<std::string>(k, v));
      } catch (const ConfigError& e) {
        throw ConfigError(at_line(k) + ": " + e.what());
      }
    } else if (key == "optimizer") {
      try {
        f.optimizer = parse_optimizer(read<std::string>(k, v));
      } catch (const ConfigError& e) {
        throw ConfigError(at_line(k) + ": " + e.what());
      }
    } else {
      unknown(k, "federation");
    }
  }
}

void parse_model(const YAML::Node& node, EncoderClassifierConfig& m) {
  require_map(node, "model");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& k = kv.first;
    const auto& v = kv.second;
    if (key == "theta") m.theta = read<double>(k, v);
    else if (key == "straight_through") m.straight_through = read<bool>(k, v);
    else if (key == "hidden_dim") m.hidden_dim = read<std::size_t>(k, v);
    else if (key == "cnn_channels") m.cnn_channels = read<std::size_t>(k, v);
    else if (key == "kernel_size") m.kernel_size = read<std::size_t>(k, v);
    else if (key == "lstm_hidden") m.lstm_hidden = read<std::size_t>(k, v);
    else if (key == "encoder_out") m.encoder_out = read<std::size_t>(k, v);
    else if (key == "classifier_hidden") m.classifier_hidden = read<std::size_t>(k, v);
    else unknown(k, "model");
  }
}

SyntheticSpec parse_synthetic(const YAML::Node& node) {
  SyntheticSpec s;
  if (node.IsScalar()) {
    const DatasetPreset* found = nullptr;
    try {
      found = &find_preset(node.as<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(at_line(node) + ": " + e.what());
    }
    const auto& preset = *found;
    s.feature_dim = preset.feature_dim;
    s.num_classes = preset.num_classes;
    return s;
  }
  require_map(node, "synthetic");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& k = kv.first;
    const auto& v = kv.second;
    if (key == "preset") {
      try {
        const auto& preset = find_preset(read<std::string>(k, v));
        s.feature_dim = preset.feature_dim;
        s.num_classes = preset.num_classes;
      } catch (const ConfigError& e) {
        throw ConfigError(at_line(k) + ": " + e.what());
      }
    } else if (key == "features") s.feature_dim = read<std::size_t>(k, v);
    else if (key == "classes") s.num_classes = read<std::size_t>(k, v);
    else if (key == "samples") s.samples = read<std::size_t>(k, v);
    else if (key == "separation") s.separation = read<double>(k, v);
    else if (key == "seed") s.seed = read<std::uint64_t>(k, v);
    else unknown(k, "synthetic");
  }
  return s;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

ClientSpec parse_client(const YAML::Node& id_node, const YAML::Node& node,
                        const std::filesystem::path& base) {
  ClientSpec c;
  c.id = read<int>(id_node, id_node);
  if (c.id < 0) throw ConfigError(at_line(id_node) + ": client ids must be nonnegative");
  const std::string section = "clients." + std::to_string(c.id);
  require_map(node, section);
  bool have_split_seed = false;
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& k = kv.first;
    const auto& v = kv.second;
    if (key == "dataset") c.dataset = resolve(base, read<std::string>(k, v));
    else if (key == "schema") c.schema = resolve(base, read<std::string>(k, v));
    else if (key == "synthetic") c.synthetic = parse_synthetic(v);
    else if (key == "split_seed") {
      c.split.seed = read<std::uint64_t>(k, v);
      have_split_seed = true;
    } else if (key == "train_fraction") c.split.train_fraction = read<double>(k, v);
    else if (key == "stratified") c.split.stratified = read<bool>(k, v);
    else unknown(k, section);
  }
  if (c.dataset.has_value() == c.synthetic.has_value()) {
    throw ConfigError(at_line(node) + ": " + section + " needs exactly one of dataset or synthetic");
  }
  if (c.schema && !c.dataset) throw ConfigError(at_line(node) + ": " + section + ": schema without dataset");
  if (!have_split_seed) c.split.seed = static_cast<std::uint64_t>(c.id);
  return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  int id = 0;
  for (const auto& preset : table1_registry()) {
    ClientSpec c;
    c.id = id;
    c.synthetic = SyntheticSpec{preset.feature_dim, preset.num_classes, 2000, 4.0,
                                static_cast<std::uint64_t>(100 + id)};
    c.split.seed = static_cast<std::uint64_t>(id);
    cfg.clients.push_back(c);
    ++id;
  }
  cfg.federation.num_clients = cfg.clients.size();
  return cfg;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  ExperimentConfig cfg;
  if (!root.IsMap()) throw ConfigError("experiment config must be a mapping of sections");
  bool have_clients = false;
  std::optional<std::size_t> declared_clients;
  std::set<std::string> quorum_keys;
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    const auto& v = kv.second;
    if (key == "federation") {
      for (const char* q : {"min_fit", "min_evaluate", "min_available"}) {
        if (v.IsMap() && v[q]) quorum_keys.insert(q);
      }
      if (v["num_clients"]) {
        declared_clients = read<std::size_t>(v["num_clients"], v["num_clients"]);
        YAML::Node copy = YAML::Clone(v);
        copy.remove("num_clients");
        parse_federation(copy, cfg.federation);
      } else {
        parse_federation(v, cfg.federation);
      }
    } else if (key == "model") {
      parse_model(v, cfg.model);
    } else if (key == "checkpoint") {
      require_map(v, "checkpoint");
      for (const auto& ckv : v) {
        if (ckv.first.as<std::string>() != "dtype") unknown(ckv.first, "checkpoint");
        try {
          cfg.checkpoint_dtype = parse_dtype(read<std::string>(ckv.first, ckv.second));
        } catch (const ConfigError& e) {
          throw ConfigError(at_line(ckv.first) + ": " + e.what());
        }
      }
    } else if (key == "clients") {
      require_map(v, "clients");
      have_clients = true;
      for (const auto& ckv : v) cfg.clients.push_back(parse_client(ckv.first, ckv.second, base_dir));
    } else {
      unknown(kv.first, "the top level");
    }
  }
  if (!have_clients || cfg.clients.empty()) throw ConfigError("config needs at least one clients.<id> section");
  std::sort(cfg.clients.begin(), cfg.clients.end(),
            [](const ClientSpec& a, const ClientSpec& b) { return a.id < b.id; });
  cfg.federation.num_clients = cfg.clients.size();
  // Unstated quorums mean every client, every round.
  if (!quorum_keys.contains("min_fit")) cfg.federation.min_fit = cfg.clients.size();
  if (!quorum_keys.contains("min_evaluate")) cfg.federation.min_evaluate = cfg.clients.size();
  if (!quorum_keys.contains("min_available")) cfg.federation.min_available = cfg.clients.size();
  if (declared_clients && *declared_clients != cfg.clients.size()) {
    throw ConfigError("federation.num_clients is " + std::to_string(*declared_clients) + " but " +
                      std::to_string(cfg.clients.size()) + " client sections are present");
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str(), path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string ExperimentConfig::to_yaml() const {
  YAML::Emitter out;
  const auto& f = federation;
  out << YAML::BeginMap;
  out << YAML::Key << "federation" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "rounds" << YAML::Value << f.rounds;
  out << YAML::Key << "min_fit" << YAML::Value << f.min_fit;
  out << YAML::Key << "min_evaluate" << YAML::Value << f.min_evaluate;
  out << YAML::Key << "min_available" << YAML::Value << f.min_available;
  out << YAML::Key << "batch_size" << YAML::Value << f.batch_size;
  out << YAML::Key << "local_epochs" << YAML::Value << f.local_epochs;
  out << YAML::Key << "learning_rate" << YAML::Value << shortest(f.learning_rate);
  out << YAML::Key << "lambda_ewc" << YAML::Value << shortest(f.lambda_ewc);
  out << YAML::Key << "seed" << YAML::Value << f.seed;
  out << YAML::Key << "aggregation" << YAML::Value << to_string(f.aggregation);
  out << YAML::Key << "optimizer" << YAML::Value << to_string(f.optimizer);
  out << YAML::Key << "fisher_samples" << YAML::Value << f.fisher_samples;
  out << YAML::Key << "workers" << YAML::Value << f.workers;
  out << YAML::EndMap;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "theta" << YAML::Value << shortest(model.theta);
  out << YAML::Key << "straight_through" << YAML::Value << model.straight_through;
  out << YAML::Key << "hidden_dim" << YAML::Value << model.hidden_dim;
  out << YAML::Key << "cnn_channels" << YAML::Value << model.cnn_channels;
  out << YAML::Key << "kernel_size" << YAML::Value << model.kernel_size;
  out << YAML::Key << "lstm_hidden" << YAML::Value << model.lstm_hidden;
  out << YAML::Key << "encoder_out" << YAML::Value << model.encoder_out;
  out << YAML::Key << "classifier_hidden" << YAML::Value << model.classifier_hidden;
  out << YAML::EndMap;
  out << YAML::Key << "checkpoint" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "dtype" << YAML::Value << to_string(checkpoint_dtype) << YAML::EndMap;
  out << YAML::Key << "clients" << YAML::Value << YAML::BeginMap;
  for (const auto& c : clients) {
    out << YAML::Key << c.id << YAML::Value << YAML::BeginMap;
    if (c.dataset) out << YAML::Key << "dataset" << YAML::Value << c.dataset->string();
    if (c.schema) out << YAML::Key << "schema" << YAML::Value << c.schema->string();
    if (c.synthetic) {
      out << YAML::Key << "synthetic" << YAML::Value << YAML::BeginMap;
      out << YAML::Key << "features" << YAML::Value << c.synthetic->feature_dim;
      out << YAML::Key << "classes" << YAML::Value << c.synthetic->num_classes;
      out << YAML::Key << "samples" << YAML::Value << c.synthetic->samples;
      out << YAML::Key << "separation" << YAML::Value << shortest(c.synthetic->separation);
      out << YAML::Key << "seed" << YAML::Value << c.synthetic->seed;
      out << YAML::EndMap;
    }
    out << YAML::Key << "split_seed" << YAML::Value << c.split.seed;
    out << YAML::Key << "train_fraction" << YAML::Value << shortest(c.split.train_fraction);
    out << YAML::Key << "stratified" << YAML::Value << c.split.stratified;
    out << YAML::EndMap;
  }
  out << YAML::EndMap << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

void ExperimentConfig::validate() const {
  if (clients.empty()) throw ConfigError("config needs at least one client");
  std::set<int> ids;
  for (const auto& c : clients) {
    const std::string where = "clients." + std::to_string(c.id);
    if (!ids.insert(c.id).second) throw ConfigError("duplicate client id " + std::to_string(c.id));
    if (!(c.split.train_fraction > 0.0 && c.split.train_fraction < 1.0)) {
      throw ConfigError(where + ": train_fraction must lie strictly between 0 and 1");
    }
    if (c.synthetic) {
      const auto& s = *c.synthetic;
      if (s.feature_dim == 0 || s.num_classes < 2 || s.samples == 0 || !(s.separation > 0.0)) {
        throw ConfigError(where + ": synthetic data needs features >= 1, classes >= 2, samples >= 1 "
                                  "and separation > 0");
      }
    }
    if (c.dataset && !std::filesystem::exists(*c.dataset)) {
      throw ConfigError(where + ": dataset '" + c.dataset->string() + "' not found");
    }
    if (c.schema && !std::filesystem::exists(*c.schema)) {
      throw ConfigError(where + ": schema '" + c.schema->string() + "' not found");
    }
  }
  federation.validate();
  EncoderClassifierConfig probe = model;
  probe.input_dim = 1;
  probe.num_classes = 2;
  probe.validate();
}

void apply_env_overrides(ExperimentConfig& config) {
  if (const char* seed = std::getenv("UFID_SEED"); seed != nullptr && *seed != '\0') {
    try {
      std::size_t used = 0;
      config.federation.seed = std::stoull(seed, &used);
      if (used != std::string(seed).size()) throw std::invalid_argument(seed);
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("UFID_SEED is not an unsigned integer: '") + seed + "'");
    }
  }
}

ClientData prepare_client_data(const ClientSpec& spec) {
  ClientData out;
  SwarmDataset full;
  try {
    if (spec.synthetic) {
      const auto& s = *spec.synthetic;
      full = gen_synthetic(s.samples, s.feature_dim, s.num_classes, s.separation, s.seed);
    } else {
      DatasetSchema schema;
      schema.label_column = "label";
      if (spec.schema) schema = DatasetSchema::load(*spec.schema);
      LoadReport report;
      full = load_csv(*spec.dataset, schema, &report);
      out.warnings = report.warnings;
      if (report.rows_dropped > 0) {
        out.warnings.push_back(std::to_string(report.rows_dropped) + " of " +
                               std::to_string(report.rows_read) + " rows dropped");
      }
    }
    auto parts = split(full, spec.split);
    out.warnings.insert(out.warnings.end(), parts.warnings.begin(), parts.warnings.end());
    out.normalizer = fit_normalizer(parts.train);
    out.train = apply_normalizer(out.normalizer, std::move(parts.train), false);
    out.test = apply_normalizer(out.normalizer, std::move(parts.test), true);
  } catch (const Error& e) {
    throw DataError("client " + std::to_string(spec.id) + ": " + e.what());
  }
  for (auto& w : out.warnings) w = "client " + std::to_string(spec.id) + ": " + w;
  return out;
}

std::vector<ClientState> build_clients(const ExperimentConfig& config,
                                       std::vector<std::string>* warnings) {
  std::vector<ClientState> clients;
  for (const auto& spec : config.clients) {
    auto data = prepare_client_data(spec);
    if (warnings) warnings->insert(warnings->end(), data.warnings.begin(), data.warnings.end());
    clients.push_back(make_client(spec.id, std::move(data.train), std::move(data.test), config.model,
                                  mix_seed(config.federation.seed, static_cast<std::uint64_t>(spec.id))));
  }
  return clients;
}

}  // namespace ufid
