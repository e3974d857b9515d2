#include "ufid/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "ufid/errors.hpp"
#include "ufid/rng.hpp"

namespace ufid {

SwarmDataset SwarmDataset::subset(std::span<const std::size_t> rows) const {
  SwarmDataset out;
  out.features = gather_features(rows);
  out.labels = gather_labels(rows);
  out.feature_dim = feature_dim;
  out.num_classes = num_classes;
  out.class_names = class_names;
  out.provenance = provenance;
  return out;
}

Tensor SwarmDataset::gather_features(std::span<const std::size_t> rows) const {
  if (rows.empty()) throw DataError("cannot gather an empty row set");
  Tensor out({rows.size(), feature_dim});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= size()) throw DataError("row index " + std::to_string(rows[r]) + " out of range");
    std::copy_n(features.raw() + rows[r] * feature_dim, feature_dim, out.raw() + r * feature_dim);
  }
  return out;
}

std::vector<int> SwarmDataset::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (const auto r : rows) out.push_back(labels.at(r));
  return out;
}

void SwarmDataset::validate() const {
  if (labels.empty()) throw DataError("dataset is empty");
  if (features.shape() != Shape{labels.size(), feature_dim}) {
    throw DataError("feature matrix " + features.shape_string() + " does not match " +
                    std::to_string(labels.size()) + " rows of width " +
                    std::to_string(feature_dim));
  }
  if (num_classes < 2) throw DataError("dataset needs at least 2 classes");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  if (!features.all_finite()) throw DataError("dataset contains non-finite features");
}

// --- schema -----------------------------------------------------------------

namespace {

DatasetSchema schema_from_node(const YAML::Node& root) {
  if (!root.IsMap()) throw ConfigError("schema must be a key-value mapping");
  DatasetSchema schema;
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    const auto& value = kv.second;
    const auto line = std::to_string(kv.first.Mark().line + 1);
    try {
      if (key == "label") {
        schema.label_column = value.as<std::string>();
      } else if (key == "label_index") {
        schema.label_index = value.as<std::size_t>();
      } else if (key == "drop") {
        if (value.IsSequence()) {
          for (const auto& item : value) schema.drop_columns.push_back(item.as<std::string>());
        } else {
          schema.drop_columns.push_back(value.as<std::string>());
        }
      } else if (key == "delimiter") {
        auto d = value.as<std::string>();
        if (d == "\\t") d = "\t";
        if (d.size() != 1) throw ConfigError("line " + line + ": delimiter must be one character");
        schema.delimiter = d[0];
      } else if (key == "classes") {
        for (const auto& item : value) {
          schema.class_map[item.first.as<std::string>()] = item.second.as<int>();
        }
      } else {
        throw ConfigError("line " + line + ": unknown schema key '" + key + "'");
      }
    } catch (const YAML::Exception& e) {
      throw ConfigError("line " + line + ": bad value for '" + key + "': " + e.msg);
    }
  }
  if (schema.label_column.empty() && !schema.label_index) {
    throw ConfigError("schema must declare 'label' or 'label_index'");
  }
  std::set<int> seen;
  for (const auto& [name, index] : schema.class_map) {
    if (index < 0 || !seen.insert(index).second) {
      throw ConfigError("class map index for '" + name + "' is negative or repeated");
    }
  }
  return schema;
}

}  // namespace

DatasetSchema DatasetSchema::parse(const std::string& text) {
  try {
    return schema_from_node(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError("schema line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
}

DatasetSchema DatasetSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schema file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string DatasetSchema::to_yaml() const {
  YAML::Emitter out;
  out << YAML::BeginMap;
  if (!label_column.empty()) out << YAML::Key << "label" << YAML::Value << label_column;
  if (label_index) out << YAML::Key << "label_index" << YAML::Value << *label_index;
  if (!drop_columns.empty()) {
    out << YAML::Key << "drop" << YAML::Value << YAML::Flow << drop_columns;
  }
  out << YAML::Key << "delimiter" << YAML::Value
      << (delimiter == '\t' ? std::string("\\t") : std::string(1, delimiter));
  if (!class_map.empty()) {
    // Emit in index order so the file reads naturally.
    std::vector<std::pair<int, std::string>> ordered;
    for (const auto& [name, index] : class_map) ordered.emplace_back(index, name);
    std::sort(ordered.begin(), ordered.end());
    out << YAML::Key << "classes" << YAML::Value << YAML::BeginMap;
    for (const auto& [index, name] : ordered) out << YAML::Key << name << YAML::Value << index;
    out << YAML::EndMap;
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// --- CSV --------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  std::string out(s.substr(first, last - first + 1));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

std::vector<std::string> split_fields(const std::string& line, char delimiter) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (const char c : line) {
    if (c == '"') {
      quoted = !quoted;
      field.push_back(c);
    } else if (c == delimiter && !quoted) {
      out.push_back(trim(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  out.push_back(trim(field));
  return out;
}

bool parse_number(const std::string& text, double& value) {
  if (text.empty()) return false;
  const char* begin = text.data();
  if (*begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, text.data() + text.size(), value);
  return ec == std::errc() && ptr == text.data() + text.size() && std::isfinite(value);
}

}  // namespace

SwarmDataset load_csv(const std::filesystem::path& path, const DatasetSchema& schema,
                      LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  LoadReport local;
  LoadReport& rep = report ? *report : local;
  rep = LoadReport{};

  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header = split_fields(line, schema.delimiter);
      break;
    }
  }
  if (header.empty()) throw DataError(path.string() + ": empty file (no header row)");

  std::size_t label_col = header.size();
  if (schema.label_index) {
    label_col = *schema.label_index;
    if (label_col >= header.size()) {
      throw DataError(path.string() + ": label_index " + std::to_string(label_col) +
                      " beyond " + std::to_string(header.size()) + " header columns");
    }
  } else {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == schema.label_column) label_col = i;
    }
    if (label_col == header.size()) {
      throw DataError(path.string() + ": label column '" + schema.label_column +
                      "' not found in header");
    }
  }
  std::vector<std::size_t> feature_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i == label_col) continue;
    if (std::find(schema.drop_columns.begin(), schema.drop_columns.end(), header[i]) !=
        schema.drop_columns.end()) {
      continue;
    }
    feature_cols.push_back(i);
  }
  for (const auto& d : schema.drop_columns) {
    if (std::find(header.begin(), header.end(), d) == header.end()) {
      rep.warnings.push_back("drop column '" + d + "' not present in header");
    }
  }
  if (feature_cols.empty()) throw DataError(path.string() + ": no feature columns remain");

  std::vector<double> values;
  std::vector<std::string> raw_labels;
  std::vector<double> row(feature_cols.size());
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    ++rep.rows_read;
    const auto fields = split_fields(line, schema.delimiter);
    bool ok = fields.size() == header.size() && !fields[label_col].empty();
    for (std::size_t j = 0; ok && j < feature_cols.size(); ++j) {
      ok = parse_number(fields[feature_cols[j]], row[j]);
    }
    if (ok && !schema.class_map.empty() && !schema.class_map.contains(fields[label_col])) {
      rep.warnings.push_back("line " + std::to_string(line_no) + ": label '" +
                             fields[label_col] + "' not in class map");
      ok = false;
    }
    if (!ok) {
      ++rep.rows_dropped;
      continue;
    }
    values.insert(values.end(), row.begin(), row.end());
    raw_labels.push_back(fields[label_col]);
  }
  if (raw_labels.empty()) {
    throw DataError(path.string() + ": zero usable rows (" + std::to_string(rep.rows_dropped) +
                    " dropped)");
  }

  // Class index order: explicit map when given, else lexicographic names.
  std::vector<std::pair<int, std::string>> ordered;
  if (schema.class_map.empty()) {
    std::set<std::string> names(raw_labels.begin(), raw_labels.end());
    int next = 0;
    for (const auto& n : names) ordered.emplace_back(next++, n);
  } else {
    for (const auto& [name, index] : schema.class_map) ordered.emplace_back(index, name);
    std::sort(ordered.begin(), ordered.end());
  }
  std::set<std::string> present(raw_labels.begin(), raw_labels.end());
  std::map<std::string, int> index_of;
  SwarmDataset ds;
  for (const auto& [index, name] : ordered) {
    if (!present.contains(name)) {
      rep.warnings.push_back("class '" + name + "' has no samples; indices remapped");
      continue;
    }
    index_of[name] = static_cast<int>(ds.class_names.size());
    ds.class_names.push_back(name);
  }
  if (!schema.class_map.empty()) {
    // Remap also closes gaps in a sparse explicit map.
    bool contiguous = true;
    for (std::size_t i = 0; i < ordered.size(); ++i) contiguous &= ordered[i].first == static_cast<int>(i);
    if (!contiguous && ds.class_names.size() == ordered.size()) {
      rep.warnings.push_back("class map indices not contiguous; remapped in index order");
    }
  }

  ds.labels.reserve(raw_labels.size());
  for (const auto& l : raw_labels) ds.labels.push_back(index_of.at(l));
  ds.feature_dim = feature_cols.size();
  ds.num_classes = ds.class_names.size();
  ds.features = Tensor({raw_labels.size(), ds.feature_dim}, std::move(values));
  ds.provenance = path.string();
  if (ds.num_classes < 2) {
    throw DataError(path.string() + ": only " + std::to_string(ds.num_classes) +
                    " class present; need at least 2");
  }
  return ds;
}

void write_csv(const std::filesystem::path& path, const SwarmDataset& ds, char delimiter) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t j = 0; j < ds.feature_dim; ++j) out << 'f' << j << delimiter;
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < ds.feature_dim; ++j) {
      const auto res = std::to_chars(buf, buf + sizeof buf, ds.features.at(i, j));
      out.write(buf, res.ptr - buf);
      out << delimiter;
    }
    out << ds.class_names.at(static_cast<std::size_t>(ds.labels[i])) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

// --- normalization ------------------------------------------------------------

NormalizationStats fit_normalizer(const SwarmDataset& train) {
  if (train.size() == 0) throw DataError("cannot fit a normalizer on an empty dataset");
  NormalizationStats stats;
  stats.min.assign(train.feature_dim, std::numeric_limits<double>::infinity());
  stats.max.assign(train.feature_dim, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (std::size_t j = 0; j < train.feature_dim; ++j) {
      const double v = train.features.at(i, j);
      stats.min[j] = std::min(stats.min[j], v);
      stats.max[j] = std::max(stats.max[j], v);
    }
  }
  return stats;
}

SwarmDataset apply_normalizer(const NormalizationStats& stats, SwarmDataset ds, bool clip) {
  if (stats.min.size() != ds.feature_dim) {
    throw DimensionError("normalizer fitted on " + std::to_string(stats.min.size()) +
                         " features, dataset has " + std::to_string(ds.feature_dim));
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < ds.feature_dim; ++j) {
      double& v = ds.features.at(i, j);
      const double range = stats.max[j] - stats.min[j];
      v = range > 0.0 ? (v - stats.min[j]) / range : 0.0;
      if (clip) v = std::clamp(v, 0.0, 1.0);
    }
  }
  return ds;
}

// --- splitting and batching ---------------------------------------------------

SplitResult split(const SwarmDataset& ds, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie in (0, 1), got " +
                      std::to_string(spec.train_fraction));
  }
  if (ds.size() == 0) throw DataError("cannot split an empty dataset");
  SplitResult result;
  SplitMix64 rng(mix_seed(spec.seed, 0x5B11));
  std::vector<char> in_train(ds.size(), 0);

  auto assign = [&](std::vector<std::size_t>& idx, const std::string& what) {
    rng.shuffle(std::span<std::size_t>(idx));
    auto n_train = static_cast<std::size_t>(
        std::floor(spec.train_fraction * static_cast<double>(idx.size())));
    if (n_train == 0) {
      result.warnings.push_back(what + " has " + std::to_string(idx.size()) +
                                " sample(s); kept whole in train");
      n_train = idx.size();
    }
    for (std::size_t i = 0; i < n_train; ++i) in_train[idx[i]] = 1;
  };

  if (spec.stratified) {
    if (ds.size() < ds.num_classes) {
      throw DataError("stratified split needs at least one sample per class (N=" +
                      std::to_string(ds.size()) + ", C=" + std::to_string(ds.num_classes) + ")");
    }
    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);
    }
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
      if (by_class[c].empty()) {
        result.warnings.push_back("class " + std::to_string(c) + " has no samples");
        continue;
      }
      assign(by_class[c], "class " + std::to_string(c));
    }
  } else {
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    assign(all, "dataset");
  }

  for (std::size_t i = 0; i < ds.size(); ++i) {
    (in_train[i] ? result.train_indices : result.test_indices).push_back(i);
  }
  if (result.test_indices.empty()) throw DataError("split left the test set empty");
  result.train = ds.subset(result.train_indices);
  result.test = ds.subset(result.test_indices);
  return result;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(mix_seed(seed, 0xBA7C0000ULL + epoch));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

BatchStream::BatchStream(const SwarmDataset& ds, std::size_t batch_size, std::uint64_t seed,
                         std::uint64_t epoch)
    : ds_(&ds), order_(batch_indices(ds.size(), batch_size, seed, epoch)) {}

bool BatchStream::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const auto& rows = order_[cursor_++];
  out.features = ds_->gather_features(rows);
  out.labels = ds_->gather_labels(rows);
  return true;
}

// --- synthetic swarms ---------------------------------------------------------

SwarmDataset gen_synthetic(std::size_t num_samples, std::size_t feature_dim,
                           std::size_t num_classes, double separation, std::uint64_t seed) {
  if (feature_dim < 1) throw ConfigError("synthetic feature count must be at least 1");
  if (num_classes < 2) throw ConfigError("synthetic class count must be at least 2");
  if (!(separation > 0.0) || !std::isfinite(separation)) {
    throw ConfigError("synthetic separation must be positive");
  }
  if (num_samples < num_classes) {
    throw ConfigError("synthetic dataset needs at least one sample per class");
  }
  SplitMix64 rng(mix_seed(seed, 0x5E7D));
  std::vector<double> centers(num_classes * feature_dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (std::size_t j = 0; j < feature_dim; ++j) {
        const double v = rng.normal();
        centers[c * feature_dim + j] = v;
        norm += v * v;
      }
    } while (norm == 0.0);
    const double s = separation / std::sqrt(norm);
    for (std::size_t j = 0; j < feature_dim; ++j) centers[c * feature_dim + j] *= s;
  }

  std::vector<int> labels(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) labels[i] = static_cast<int>(i % num_classes);
  rng.shuffle(std::span<int>(labels));

  SwarmDataset ds;
  ds.features = Tensor({num_samples, feature_dim});
  for (std::size_t i = 0; i < num_samples; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < feature_dim; ++j) {
      ds.features.at(i, j) = centers[c * feature_dim + j] + rng.normal();
    }
  }
  ds.labels = std::move(labels);
  ds.feature_dim = feature_dim;
  ds.num_classes = num_classes;
  const std::size_t width = std::to_string(num_classes - 1).size();
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::string digits = std::to_string(c);
    ds.class_names.push_back("class_" + std::string(width - digits.size(), '0') + digits);
  }
  std::ostringstream prov;
  prov << "synthetic(n=" << num_samples << ",F=" << feature_dim << ",C=" << num_classes
       << ",separation=" << separation << ",seed=" << seed << ")";
  ds.provenance = prov.str();
  const NormalizationStats stats = fit_normalizer(ds);
  return apply_normalizer(stats, std::move(ds), false);
}

const std::vector<DatasetPreset>& table1_registry() {
  static const std::vector<DatasetPreset> registry = {
      {"UAV_IDS", "uav_ids", 54, 2, 98736},
      {"UKM_IDS", "ukm_ids", 46, 9, 12887},
      {"TLM_IDS", "tlm_ids", 18, 5, 12254},
      {"CyberPhysical", "cyber_physical", 36, 3, 33102},
  };
  return registry;
}

const DatasetPreset& find_preset(std::string_view key_or_name) {
  for (const auto& p : table1_registry()) {
    if (p.key == key_or_name || p.name == key_or_name) return p;
  }
  throw ConfigError("unknown dataset preset '" + std::string(key_or_name) + "'");
}

}  // namespace ufid
