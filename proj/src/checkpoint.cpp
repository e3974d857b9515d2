#include "ufid/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "ufid/errors.hpp"

namespace ufid {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'U', 'F', 'I', 'D'};

const char* kind_name(CheckpointKind k) {
  return k == CheckpointKind::kGlobalEncoder ? "global_encoder" : "client";
}

json config_to_json(const EncoderClassifierConfig& c) {
  return json{{"input_dim", c.input_dim},
              {"hidden_dim", c.hidden_dim},
              {"cnn_channels", c.cnn_channels},
              {"kernel_size", c.kernel_size},
              {"lstm_hidden", c.lstm_hidden},
              {"encoder_out", c.encoder_out},
              {"classifier_hidden", c.classifier_hidden},
              {"num_classes", c.num_classes},
              {"theta", c.theta},
              {"straight_through", c.straight_through},
              {"seed", c.seed}};
}

EncoderClassifierConfig config_from_json(const json& j) {
  EncoderClassifierConfig c;
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.cnn_channels = j.at("cnn_channels").get<std::size_t>();
  c.kernel_size = j.at("kernel_size").get<std::size_t>();
  c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
  c.encoder_out = j.at("encoder_out").get<std::size_t>();
  c.classifier_hidden = j.at("classifier_hidden").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.theta = j.at("theta").get<double>();
  c.straight_through = j.at("straight_through").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::string manifest_text(const CheckpointManifest& m) {
  json j{{"kind", kind_name(m.kind)},
         {"client_id", m.client_id},
         {"shared", m.shared},
         {"local", m.local},
         {"buffers", m.buffers},
         {"model", config_to_json(m.model)}};
  return j.dump();
}

CheckpointManifest parse_manifest(std::string_view text) {
  try {
    const json j = json::parse(text);
    CheckpointManifest m;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "global_encoder") {
      m.kind = CheckpointKind::kGlobalEncoder;
    } else if (kind == "client") {
      m.kind = CheckpointKind::kClient;
    } else {
      throw FormatError("unknown checkpoint kind '" + kind + "'");
    }
    m.client_id = j.at("client_id").get<int>();
    m.shared = j.at("shared").get<std::vector<std::string>>();
    m.local = j.at("local").get<std::vector<std::string>>();
    m.buffers = j.at("buffers").get<std::vector<std::string>>();
    m.model = config_from_json(j.at("model"));
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                        std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void put_header(std::string& out, std::string_view name, DType dtype, const Shape& shape) {
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError("record name too long: " + std::string(name.substr(0, 32)) + "...");
  }
  if (shape.size() > std::numeric_limits<std::uint8_t>::max()) {
    throw FormatError("record '" + std::string(name) + "' has too many dimensions");
  }
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.append(name);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw FormatError("record '" + std::string(name) + "' has a dimension over 2^32");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
}

struct RawRecord {
  std::string name;
  DType dtype;
  Shape shape;
  std::string_view values;
};

// Walks every record; shared by decoding and overhead accounting.
std::vector<RawRecord> read_records(std::string_view bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("not a UFID checkpoint (bad magic)");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("record count");
  std::vector<RawRecord> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    RawRecord rec;
    const auto len = r.get<std::uint16_t>("name length");
    rec.name = std::string(r.take(len, "name"));
    const auto tag = r.get<std::uint8_t>("dtype");
    if (tag < 1 || tag > 3) {
      throw FormatError("record '" + rec.name + "' has unknown dtype tag " + std::to_string(tag));
    }
    rec.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint8_t>("rank");
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      rec.shape.push_back(r.get<std::uint32_t>("dims"));
      n *= rec.shape.back();
    }
    rec.values = r.take(n * dtype_size(rec.dtype), "values");
    records.push_back(std::move(rec));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last checkpoint record");
  return records;
}

std::vector<std::string> names_of(const ParameterList& list) {
  std::vector<std::string> out;
  for (const auto& t : list) out.push_back(t.name);
  return out;
}

const std::string kRunningMean = "encoder.bn.running_mean";
const std::string kRunningVar = "encoder.bn.running_var";

}  // namespace

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::kF32;
  if (name == "f64") return DType::kF64;
  throw ConfigError("unknown checkpoint dtype '" + name + "' (expected f32 or f64)");
}

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kBytes: return "bytes";
  }
  return "?";
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kBytes: return 1;
  }
  return 0;
}

Checkpoint client_checkpoint(const EncoderClassifier& model, int client_id) {
  Checkpoint ckpt;
  ckpt.tensors = model.all_parameters();
  ckpt.manifest.kind = CheckpointKind::kClient;
  ckpt.manifest.client_id = client_id;
  const auto& part = model.partition();
  ckpt.manifest.shared.assign(part.shared_names.begin(), part.shared_names.end());
  ckpt.manifest.local.assign(part.local_names.begin(), part.local_names.end());
  const auto& bn = model.batchnorm_stats();
  ckpt.tensors.push_back({kRunningMean, bn.running_mean});
  ckpt.tensors.push_back({kRunningVar, bn.running_var});
  ckpt.manifest.buffers = {kRunningMean, kRunningVar};
  ckpt.manifest.model = model.config();
  return ckpt;
}

Checkpoint global_checkpoint(const ParameterList& shared, const EncoderClassifierConfig& reference) {
  Checkpoint ckpt;
  ckpt.tensors = shared;
  ckpt.manifest.kind = CheckpointKind::kGlobalEncoder;
  ckpt.manifest.shared = names_of(shared);
  ckpt.manifest.model = reference;
  ckpt.manifest.model.input_dim = 0;
  ckpt.manifest.model.num_classes = 0;
  return ckpt;
}

EncoderClassifier restore_model(const Checkpoint& ckpt) {
  if (ckpt.manifest.kind != CheckpointKind::kClient) {
    throw FormatError("a global-encoder checkpoint has no local layers; load a client checkpoint");
  }
  EncoderClassifier model(ckpt.manifest.model);
  ParameterList params;
  nn::BatchNormStats stats = model.batchnorm_stats();
  bool have_mean = false, have_var = false;
  for (const auto& t : ckpt.tensors) {
    if (t.name == kRunningMean) {
      stats.running_mean = t.value;
      have_mean = true;
    } else if (t.name == kRunningVar) {
      stats.running_var = t.value;
      have_var = true;
    } else {
      params.push_back(t);
    }
  }
  if (!have_mean || !have_var) throw FormatError("client checkpoint lacks batchnorm running statistics");
  if (!stats.running_mean.same_shape(model.batchnorm_stats().running_mean) ||
      !stats.running_var.same_shape(model.batchnorm_stats().running_var)) {
    throw FormatError("batchnorm running statistics have the wrong shape");
  }
  model.load_all(params);
  model.batchnorm_stats() = std::move(stats);
  return model;
}

std::string encode_checkpoint(const Checkpoint& ckpt, DType dtype) {
  if (dtype == DType::kBytes) throw UsageError("parameters must be stored as f32 or f64");
  std::string out(kMagic, 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size() + 1));
  for (const auto& t : ckpt.tensors) {
    if (t.name == kManifestRecord) throw FormatError("tensor name collides with the manifest record");
    put_header(out, t.name, dtype, t.value.shape());
    for (const double v : t.value.data()) {
      if (dtype == DType::kF32) {
        put<float>(out, static_cast<float>(v));
      } else {
        put<double>(out, v);
      }
    }
  }
  const auto text = manifest_text(ckpt.manifest);
  put_header(out, kManifestRecord, DType::kBytes, Shape{text.size()});
  out.append(text);
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  auto records = read_records(bytes);
  if (records.empty() || records.back().name != kManifestRecord ||
      records.back().dtype != DType::kBytes) {
    throw FormatError("checkpoint has no trailing manifest record");
  }
  Checkpoint ckpt;
  ckpt.manifest = parse_manifest(records.back().values);
  records.pop_back();
  for (const auto& rec : records) {
    if (rec.dtype == DType::kBytes) throw FormatError("record '" + rec.name + "' is not numeric");
    Tensor t(rec.shape);
    auto dst = t.data();
    const std::size_t w = dtype_size(rec.dtype);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (rec.dtype == DType::kF32) {
        float f;
        std::memcpy(&f, rec.values.data() + i * w, w);
        dst[i] = f;
      } else {
        std::memcpy(&dst[i], rec.values.data() + i * w, w);
      }
    }
    ckpt.tensors.push_back({rec.name, std::move(t)});
  }
  std::vector<std::string> listed = ckpt.manifest.shared;
  listed.insert(listed.end(), ckpt.manifest.local.begin(), ckpt.manifest.local.end());
  listed.insert(listed.end(), ckpt.manifest.buffers.begin(), ckpt.manifest.buffers.end());
  std::sort(listed.begin(), listed.end());
  auto stored = names_of(ckpt.tensors);
  std::sort(stored.begin(), stored.end());
  if (listed != stored) throw FormatError("checkpoint manifest does not match its records");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, DType dtype) {
  const auto bytes = encode_checkpoint(ckpt, dtype);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::size_t checkpoint_overhead(std::string_view bytes) {
  const auto records = read_records(bytes);
  if (records.empty() || records.back().name != kManifestRecord) {
    throw FormatError("checkpoint has no trailing manifest record");
  }
  const auto manifest = parse_manifest(records.back().values);
  std::size_t values = 0;
  for (const auto& rec : records) {
    const auto is = [&](const std::vector<std::string>& names) {
      return std::find(names.begin(), names.end(), rec.name) != names.end();
    };
    if (is(manifest.shared) || is(manifest.local)) values += rec.values.size();
  }
  return bytes.size() - values;
}

}  // namespace ufid
