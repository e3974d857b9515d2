#include "ufid/commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ufid/checkpoint.hpp"
#include "ufid/config.hpp"
#include "ufid/errors.hpp"
#include "ufid/federation.hpp"
#include "ufid/metrics.hpp"
#include "ufid/model.hpp"
#include "ufid/rng.hpp"

namespace ufid {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
      dynamic_cast<const FormatError*>(&e) || dynamic_cast<const PartitionError*>(&e)) {
    return kExitData;
  }
  return kExitRuntime;
}

fs::path metrics_log_path(const fs::path& out_dir) { return out_dir / "metrics.jsonl"; }
fs::path timing_log_path(const fs::path& out_dir) { return out_dir / "timing.jsonl"; }
fs::path checkpoint_dir(const fs::path& out_dir) { return out_dir / "checkpoints"; }
fs::path global_checkpoint_path(const fs::path& ckpt_dir) { return ckpt_dir / "global_encoder.ufid"; }
fs::path client_checkpoint_path(const fs::path& ckpt_dir, int client) {
  return ckpt_dir / ("client_" + std::to_string(client) + ".ufid");
}
fs::path normalizer_path(const fs::path& ckpt_dir, int client) {
  return ckpt_dir / ("client_" + std::to_string(client) + ".norm.json");
}

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream out(path, std::ios::out | mode);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

json scores_json(const ScoreReport& s) {
  return json{{"accuracy", s.accuracy},
              {"error_rate", s.error_rate},
              {"macro_precision", s.macro_precision},
              {"macro_recall", s.macro_recall},
              {"macro_f1", s.macro_f1},
              {"per_class_precision", s.per_class_precision},
              {"per_class_recall", s.per_class_recall},
              {"per_class_f1", s.per_class_f1},
              {"undefined_ratio", s.undefined_ratio}};
}

json round_json(const RoundRecord& r) {
  json clients = json::array();
  for (const auto& c : r.clients) {
    clients.push_back(json{{"client", c.client_id},
                           {"selected", c.selected},
                           {"train_loss", c.train_loss},
                           {"test_accuracy", c.test_accuracy},
                           {"payload_bytes_up", c.payload_bytes_up},
                           {"payload_bytes_down", c.payload_bytes_down}});
  }
  return json{{"type", "round"}, {"round", r.round}, {"selected", r.selected}, {"clients", clients}};
}

json normalizer_json(const NormalizationStats& s) { return json{{"min", s.min}, {"max", s.max}}; }

NormalizationStats normalizer_from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing normalization statistics '" + path.string() + "'");
  try {
    const json j = json::parse(in);
    return NormalizationStats{j.at("min").get<std::vector<double>>(),
                              j.at("max").get<std::vector<double>>()};
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void check_dims(const EncoderClassifier& model, const SwarmDataset& ds, const std::string& what) {
  if (ds.feature_dim != model.config().input_dim) {
    throw DimensionError(what + " has " + std::to_string(ds.feature_dim) +
                         " features but the checkpoint's input layer expects " +
                         std::to_string(model.config().input_dim));
  }
  if (ds.num_classes != model.config().num_classes) {
    throw DimensionError(what + " has " + std::to_string(ds.num_classes) +
                         " classes but the checkpoint's classifier has " +
                         std::to_string(model.config().num_classes));
  }
}

SwarmDataset load_raw(const fs::path& dataset, const std::optional<fs::path>& schema_path,
                      std::ostream& warn) {
  DatasetSchema schema;
  schema.label_column = "label";
  if (schema_path) schema = DatasetSchema::load(*schema_path);
  LoadReport report;
  auto ds = load_csv(dataset, schema, &report);
  for (const auto& w : report.warnings) warn << "warning: " << w << "\n";
  return ds;
}

}  // namespace

void cmd_gen_synth(const GenSynthOptions& opts, std::ostream& out) {
  std::size_t features = opts.features;
  std::size_t classes = opts.classes;
  if (opts.preset) {
    const auto& preset = find_preset(*opts.preset);
    features = preset.feature_dim;
    classes = preset.num_classes;
  }
  if (features == 0 || classes < 2) {
    throw ConfigError("gen-synth needs --preset or --features >= 1 and --classes >= 2");
  }
  if (opts.samples == 0) throw ConfigError("--samples must be positive");
  if (!(opts.separation > 0.0)) throw ConfigError("--separation must be positive");
  const auto ds = gen_synthetic(opts.samples, features, classes, opts.separation, opts.seed);
  if (opts.out.has_parent_path()) ensure_dir(opts.out.parent_path());
  write_csv(opts.out, ds);
  DatasetSchema schema;
  schema.label_column = "label";
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    schema.class_map[ds.class_names[c]] = static_cast<int>(c);
  }
  auto schema_path = opts.out;
  schema_path.replace_extension(".schema.yaml");
  write_text(schema_path, schema.to_yaml());
  out << "wrote " << ds.size() << " rows (" << features << " features, " << classes << " classes) to "
      << opts.out.string() << "\nschema: " << schema_path.string() << "\n";
}

void cmd_train(const TrainOptions& opts, std::ostream& out) {
  ExperimentConfig cfg = opts.config ? ExperimentConfig::load(*opts.config) : ExperimentConfig::defaults();
  apply_env_overrides(cfg);
  if (opts.seed) cfg.federation.seed = *opts.seed;
  if (opts.rounds) cfg.federation.rounds = *opts.rounds;
  cfg.validate();

  fs::path out_dir = "ufid-run";
  if (opts.out_dir) {
    out_dir = *opts.out_dir;
  } else if (const char* env = std::getenv("UFID_OUT_DIR"); env != nullptr && *env != '\0') {
    out_dir = env;
  }
  const fs::path ckpt_dir = checkpoint_dir(out_dir);
  ensure_dir(ckpt_dir);
  write_text(out_dir / "config.yaml", cfg.to_yaml());

  std::vector<std::string> warnings;
  std::vector<NormalizationStats> normalizers;
  std::vector<ClientState> clients;
  for (const auto& spec : cfg.clients) {
    auto data = prepare_client_data(spec);
    for (const auto& w : data.warnings) out << "warning: " << w << "\n";
    write_text(normalizer_path(ckpt_dir, spec.id), normalizer_json(data.normalizer).dump() + "\n");
    clients.push_back(make_client(spec.id, std::move(data.train), std::move(data.test), cfg.model,
                                  mix_seed(cfg.federation.seed, static_cast<std::uint64_t>(spec.id))));
  }

  auto metrics = open_out(metrics_log_path(out_dir));
  auto timing = open_out(timing_log_path(out_dir));
  const RoundObserver observer = [&](const RoundRecord& r) {
    metrics << round_json(r).dump() << "\n";
    metrics.flush();
    timing << json{{"round", r.round}, {"wall_seconds", r.wall_seconds}}.dump() << "\n";
    timing.flush();
    out << "round " << r.round;
    bool all_reached = true;
    for (const auto& c : r.clients) {
      out << "  c" << c.client_id << " loss " << std::fixed << std::setprecision(4) << c.train_loss
          << " acc " << c.test_accuracy;
      if (opts.stop_at_accuracy && c.test_accuracy < *opts.stop_at_accuracy) all_reached = false;
    }
    out << std::defaultfloat << "  (" << std::setprecision(3) << r.wall_seconds << " s)\n";
    out.flush();
    return !(opts.stop_at_accuracy && all_reached);
  };
  auto result = run_experiment(cfg.federation, std::move(clients), observer);

  json final_clients = json::array();
  for (const auto& ev : result.evaluation) {
    auto j = scores_json(ev.scores);
    j["client"] = ev.client_id;
    final_clients.push_back(std::move(j));
  }
  metrics << json{{"type", "final"}, {"rounds_run", result.rounds.size()}, {"clients", final_clients}}.dump()
          << "\n";
  if (!metrics) throw Error("failed writing the metrics log");

  save_checkpoint(global_checkpoint_path(ckpt_dir),
                  global_checkpoint(result.global_shared, result.clients.front().model.config()),
                  cfg.checkpoint_dtype);
  for (const auto& c : result.clients) {
    save_checkpoint(client_checkpoint_path(ckpt_dir, c.client_id),
                    client_checkpoint(c.model, c.client_id), cfg.checkpoint_dtype);
  }
  out << "final accuracy:";
  for (const auto& ev : result.evaluation) {
    out << " c" << ev.client_id << "=" << std::setprecision(6) << ev.scores.accuracy;
  }
  out << "\nrun directory: " << out_dir.string() << "\n";
}

void cmd_evaluate(const EvaluateOptions& opts, std::ostream& out) {
  auto net = restore_model(load_checkpoint(client_checkpoint_path(opts.checkpoint_dir, opts.client)));
  SwarmDataset ds;
  std::string what;
  if (opts.dataset) {
    auto raw = load_raw(*opts.dataset, opts.schema, std::cerr);
    check_dims(net, raw, "dataset '" + opts.dataset->string() + "'");
    const auto norm = normalizer_path(opts.checkpoint_dir, opts.client);
    ds = fs::exists(norm) ? apply_normalizer(normalizer_from_file(norm), std::move(raw), true)
                          : std::move(raw);
    what = opts.dataset->string();
  } else {
    const auto cfg_path = opts.checkpoint_dir.parent_path() / "config.yaml";
    if (!fs::exists(cfg_path)) {
      throw ConfigError("no --dataset given and no run config at '" + cfg_path.string() + "'");
    }
    const auto cfg = ExperimentConfig::load(cfg_path);
    const auto it = std::find_if(cfg.clients.begin(), cfg.clients.end(),
                                 [&](const ClientSpec& c) { return c.id == opts.client; });
    if (it == cfg.clients.end()) {
      throw ConfigError("client " + std::to_string(opts.client) + " is not part of " + cfg_path.string());
    }
    ds = prepare_client_data(*it).test;
    what = "client " + std::to_string(opts.client) + " test split";
  }
  check_dims(net, ds, what);
  const auto cm = evaluate_confusion(net, ds);
  const auto report = scores(cm);

  const fs::path dest = opts.out_dir.value_or(opts.checkpoint_dir);
  ensure_dir(dest);
  const std::string stem = "client_" + std::to_string(opts.client);
  write_text(dest / (stem + "_confusion.csv"), cm.to_csv(ds.class_names));
  auto j = scores_json(report);
  j["client"] = opts.client;
  j["samples"] = cm.total();
  write_text(dest / (stem + "_scores.json"), j.dump(2) + "\n");
  out << j.dump() << "\n";
}

void cmd_profile(const ProfileOptions& opts, std::ostream& out) {
  if (opts.iters == 0) throw ConfigError("--iters must be positive");
  std::ifstream in(opts.checkpoint, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + opts.checkpoint.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  auto net = restore_model(decode_checkpoint(bytes));
  SwarmDataset ds;
  if (opts.dataset) {
    ds = load_raw(*opts.dataset, opts.schema, std::cerr);
    check_dims(net, ds, "dataset '" + opts.dataset->string() + "'");
  } else {
    ds = gen_synthetic(256, net.config().input_dim, net.config().num_classes, 4.0, 0);
  }
  const auto report = profile_inference(net, ds, opts.warmup, opts.iters);
  const std::size_t overhead = checkpoint_overhead(bytes);
  const std::size_t stored_value_bytes = bytes.size() - overhead;
  const std::size_t bytes_per_value = stored_value_bytes / report.trainable_params;
  json j{{"latency_ms_per_sample", report.latency_ms_per_sample},
         {"throughput_samples_per_s", report.throughput_samples_per_s},
         {"trainable_params", report.trainable_params},
         {"model_bytes", model_bytes(net, bytes_per_value)},
         {"model_bytes_f32", report.model_bytes},
         {"flops_per_forward", report.flops_per_forward},
         {"checkpoint_bytes", bytes.size()},
         {"checkpoint_overhead_bytes", overhead}};
  out << j.dump() << "\n";
}

}  // namespace ufid
