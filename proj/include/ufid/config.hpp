#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ufid/checkpoint.hpp"
#include "ufid/data.hpp"
#include "ufid/federation.hpp"
#include "ufid/model.hpp"

namespace ufid {

struct SyntheticSpec {
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::size_t samples = 2000;
  double separation = 4.0;
  std::uint64_t seed = 0;
};

// One `clients.<id>` section: either a CSV (with optional schema) or a
// synthetic generator, plus the split that carves out the test half.
struct ClientSpec {
  int id = 0;
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> schema;
  std::optional<SyntheticSpec> synthetic;
  SplitSpec split;
};

struct ExperimentConfig {
  OrchestratorConfig federation;
  EncoderClassifierConfig model;  // input_dim/num_classes are per client
  DType checkpoint_dtype = DType::kF64;
  std::vector<ClientSpec> clients;

  // Four synthetic clients mirroring the reference dataset dimensions.
  static ExperimentConfig defaults();
  // Relative paths resolve against `base_dir`.
  static ExperimentConfig parse(const std::string& text, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string to_yaml() const;

  void validate() const;
};

// UFID_SEED replaces federation.seed when set.
void apply_env_overrides(ExperimentConfig& config);

struct ClientData {
  SwarmDataset train;
  SwarmDataset test;
  NormalizationStats normalizer;
  std::vector<std::string> warnings;
};

// Loads or generates the client's data, splits it and fits min-max
// normalization on the training half.
ClientData prepare_client_data(const ClientSpec& spec);

// Builds every client in ascending id order; client seeds derive from the
// federation seed.
std::vector<ClientState> build_clients(const ExperimentConfig& config,
                                       std::vector<std::string>* warnings = nullptr);

}  // namespace ufid
