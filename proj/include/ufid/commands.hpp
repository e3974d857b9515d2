#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace ufid {

// Process exit codes of the `ufid` tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,   // bad flags, config files or schemas
  kExitData = 3,     // unreadable or inconsistent datasets and checkpoints
  kExitRuntime = 4,  // anything else, e.g. numeric divergence or I/O failures
};

int exit_code_for(const std::exception& e);

struct GenSynthOptions {
  std::filesystem::path out;  // CSV path; the schema goes next to it
  std::optional<std::string> preset;
  std::size_t features = 0;
  std::size_t classes = 0;
  std::size_t samples = 2000;
  double separation = 4.0;
  std::uint64_t seed = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> config;  // defaults when absent
  // Falls back to $UFID_OUT_DIR, then "ufid-run".
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::size_t> rounds;
  std::optional<std::uint64_t> seed;
  // Stop once every client's test accuracy reaches this value.
  std::optional<double> stop_at_accuracy;
};

struct EvaluateOptions {
  std::filesystem::path checkpoint_dir;
  int client = 0;
  // Raw CSV normalized with the client's saved statistics; the client's
  // configured test split is rebuilt when absent.
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> schema;
  std::optional<std::filesystem::path> out_dir;
};

struct ProfileOptions {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> schema;
  std::size_t iters = 10;
  std::size_t warmup = 2;
};

// Run-directory layout written by cmd_train.
std::filesystem::path metrics_log_path(const std::filesystem::path& out_dir);
std::filesystem::path timing_log_path(const std::filesystem::path& out_dir);
std::filesystem::path checkpoint_dir(const std::filesystem::path& out_dir);
std::filesystem::path global_checkpoint_path(const std::filesystem::path& ckpt_dir);
std::filesystem::path client_checkpoint_path(const std::filesystem::path& ckpt_dir, int client);
std::filesystem::path normalizer_path(const std::filesystem::path& ckpt_dir, int client);

void cmd_gen_synth(const GenSynthOptions& opts, std::ostream& out);
void cmd_train(const TrainOptions& opts, std::ostream& out);
void cmd_evaluate(const EvaluateOptions& opts, std::ostream& out);
void cmd_profile(const ProfileOptions& opts, std::ostream& out);

}  // namespace ufid
