#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ufid/tensor.hpp"

namespace ufid {

// Labeled feature matrix for one swarm. Immutable once loaded.
struct SwarmDataset {
  Tensor features;  // [N x F]
  std::vector<int> labels;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  // Row subset in the given order.
  SwarmDataset subset(std::span<const std::size_t> rows) const;
  Tensor gather_features(std::span<const std::size_t> rows) const;
  std::vector<int> gather_labels(std::span<const std::size_t> rows) const;
  // Throws DataError on shape, label or finiteness violations.
  void validate() const;
};

struct DatasetSchema {
  std::string label_column;
  // Alternative to label_column: zero-based column position.
  std::optional<std::size_t> label_index;
  // Explicit class name -> index map; otherwise names are sorted.
  std::map<std::string, int> class_map;
  std::vector<std::string> drop_columns;
  char delimiter = ',';

  // Key-value YAML: label, label_index, drop, delimiter, classes.
  static DatasetSchema load(const std::filesystem::path& path);
  static DatasetSchema parse(const std::string& text);
  std::string to_yaml() const;
};

struct LoadReport {
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;
  std::vector<std::string> warnings;
};

SwarmDataset load_csv(const std::filesystem::path& path, const DatasetSchema& schema,
                      LoadReport* report = nullptr);
void write_csv(const std::filesystem::path& path, const SwarmDataset& ds, char delimiter = ',');

struct NormalizationStats {
  std::vector<double> min;
  std::vector<double> max;
};

NormalizationStats fit_normalizer(const SwarmDataset& train);
// (x - min) / (max - min) per feature; constant features map to 0. With
// `clip`, results are clamped to [0, 1] (use for anything but the fit data).
SwarmDataset apply_normalizer(const NormalizationStats& stats, SwarmDataset ds, bool clip = true);

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  bool stratified = true;
};

struct SplitResult {
  SwarmDataset train;
  SwarmDataset test;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  std::vector<std::string> warnings;
};

SplitResult split(const SwarmDataset& ds, const SplitSpec& spec);

struct Batch {
  Tensor features;
  std::vector<int> labels;
};

// Seeded shuffle keyed on (seed, epoch); the final partial batch is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

class BatchStream {
 public:
  BatchStream(const SwarmDataset& ds, std::size_t batch_size, std::uint64_t seed,
              std::uint64_t epoch);

  bool next(Batch& out);
  std::size_t num_batches() const { return order_.size(); }

 private:
  const SwarmDataset* ds_;
  std::vector<std::vector<std::size_t>> order_;
  std::size_t cursor_ = 0;
};

// Balanced class-conditional Gaussian blobs around seeded random directions
// scaled by `separation`, min-max normalized to [0, 1].
SwarmDataset gen_synthetic(std::size_t num_samples, std::size_t feature_dim,
                           std::size_t num_classes, double separation, std::uint64_t seed);

struct DatasetPreset {
  std::string name;
  std::string key;  // CLI spelling, e.g. "uav_ids"
  std::size_t feature_dim;
  std::size_t num_classes;
  std::size_t published_samples;
};

const std::vector<DatasetPreset>& table1_registry();
const DatasetPreset& find_preset(std::string_view key_or_name);

}  // namespace ufid
