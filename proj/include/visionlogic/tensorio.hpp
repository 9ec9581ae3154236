#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "visionlogic/error.hpp"
#include "visionlogic/png_io.hpp"

namespace visionlogic {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Checksums and raw file access
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

[[nodiscard]] inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n,
                                           std::uint64_t h = kFnvOffset) noexcept {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= kFnvPrime;
  }
  return h;
}

[[nodiscard]] inline std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) noexcept {
  return fnv1a64(bytes.data(), bytes.size());
}

[[nodiscard]] inline std::string checksum_hex(std::uint64_t h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s = "fnv1a64:";
  for (int i = 15; i >= 0; --i) s.push_back(digits[(h >> (4 * i)) & 0xf]);
  return s;
}

[[nodiscard]] inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::MissingFile, path.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> buf(n);
  if (n > 0 && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
    fail(ErrorKind::IoError, "short read: " + path.string());
  return buf;
}

inline void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::IoError, "write failed: " + path.string());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot open for writing: " + path.string());
  out << text;
  if (!out) fail(ErrorKind::IoError, "write failed: " + path.string());
}

[[nodiscard]] inline std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

/// Decodes little-endian f32 values regardless of host byte order.
[[nodiscard]] inline std::vector<float> decode_f32le(const std::uint8_t* p, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(p[4 * i]) |
                            (static_cast<std::uint32_t>(p[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(p[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(p[4 * i + 3]) << 24);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

inline void encode_f32le(const std::vector<float>& v, std::vector<std::uint8_t>& out) {
  out.reserve(out.size() + 4 * v.size());
  for (float f : v) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    out.push_back(static_cast<std::uint8_t>(u & 0xff));
    out.push_back(static_cast<std::uint8_t>((u >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((u >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((u >> 24) & 0xff));
  }
}

[[nodiscard]] inline json parse_json_file(const fs::path& path) {
  const auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, path.string() + ": " + e.what());
  }
}

/// Serializes with two-space indentation and a trailing newline. Doubles are
/// printed in shortest round-trip form, so reading back is exact.
[[nodiscard]] inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Model manifest
// ---------------------------------------------------------------------------

enum class LayerKind { Conv2d, Relu, Gelu, MaxPool, GlobalAvgPool, Linear };

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind, {
                                            {LayerKind::Conv2d, "conv2d"},
                                            {LayerKind::Relu, "relu"},
                                            {LayerKind::Gelu, "gelu"},
                                            {LayerKind::MaxPool, "maxpool"},
                                            {LayerKind::GlobalAvgPool, "global_avg_pool"},
                                            {LayerKind::Linear, "linear"},
                                        })

struct Shape3 {
  int c = 0;
  int h = 0;
  int w = 0;
  bool operator==(const Shape3&) const = default;
};

struct LayerDescriptor {
  LayerKind kind = LayerKind::Relu;
  int out_channels = 0;  // conv2d
  int kernel = 0;        // conv2d, maxpool
  int stride = 1;        // conv2d, maxpool
  int padding = 0;       // conv2d
  int out_features = 0;  // linear
  std::string weight;    // conv2d, linear
  std::string bias;      // optional for conv2d, linear
  std::optional<std::vector<int>> output_shape;

  bool operator==(const LayerDescriptor&) const = default;
};

struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  std::uint64_t byte_offset = 0;

  [[nodiscard]] std::size_t numel() const {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    return n;
  }
  bool operator==(const TensorEntry&) const = default;
};

struct ModelManifest {
  int version = 1;
  Shape3 input_shape;
  int n_classes = 0;
  std::vector<std::string> class_names;
  std::vector<LayerDescriptor> layers;
  std::vector<TensorEntry> tensor_index;
  std::map<std::string, std::string> checksums;

  bool operator==(const ModelManifest&) const = default;
};

inline void to_json(json& j, const LayerDescriptor& l) {
  j = json{{"kind", l.kind}};
  switch (l.kind) {
    case LayerKind::Conv2d:
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::MaxPool:
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      break;
    case LayerKind::Linear:
      j["out_features"] = l.out_features;
      break;
    default:
      break;
  }
  if (!l.weight.empty()) j["weight"] = l.weight;
  if (!l.bias.empty()) j["bias"] = l.bias;
  if (l.output_shape) j["output_shape"] = *l.output_shape;
}

inline void from_json(const json& j, LayerDescriptor& l) {
  const auto kind = j.at("kind").get<std::string>();
  static const std::map<std::string, LayerKind> kinds = {
      {"conv2d", LayerKind::Conv2d},       {"relu", LayerKind::Relu},
      {"gelu", LayerKind::Gelu},           {"maxpool", LayerKind::MaxPool},
      {"global_avg_pool", LayerKind::GlobalAvgPool}, {"linear", LayerKind::Linear}};
  const auto it = kinds.find(kind);
  if (it == kinds.end()) fail(ErrorKind::ParseError, "unknown layer kind '" + kind + "'");
  l = LayerDescriptor{};
  l.kind = it->second;
  l.out_channels = j.value("out_channels", 0);
  l.kernel = j.value("kernel", 0);
  l.stride = j.value("stride", 1);
  l.padding = j.value("padding", 0);
  l.out_features = j.value("out_features", 0);
  l.weight = j.value("weight", std::string{});
  l.bias = j.value("bias", std::string{});
  if (j.contains("output_shape")) l.output_shape = j.at("output_shape").get<std::vector<int>>();
}

inline void to_json(json& j, const TensorEntry& t) {
  j = json{{"name", t.name}, {"shape", t.shape}, {"byte_offset", t.byte_offset}};
}
inline void from_json(const json& j, TensorEntry& t) {
  t.name = j.at("name").get<std::string>();
  t.shape = j.at("shape").get<std::vector<int>>();
  t.byte_offset = j.at("byte_offset").get<std::uint64_t>();
}

inline void to_json(json& j, const ModelManifest& m) {
  j = json{{"format", "visionlogic-bundle"},
           {"version", m.version},
           {"input_shape", {m.input_shape.c, m.input_shape.h, m.input_shape.w}},
           {"n_classes", m.n_classes},
           {"class_names", m.class_names},
           {"layers", m.layers},
           {"tensor_index", m.tensor_index},
           {"checksums", m.checksums}};
}

inline void from_json(const json& j, ModelManifest& m) {
  m.version = j.at("version").get<int>();
  const auto in = j.at("input_shape").get<std::vector<int>>();
  if (in.size() != 3) fail(ErrorKind::ShapeMismatch, "manifest.json: input_shape must have 3 entries");
  m.input_shape = {in[0], in[1], in[2]};
  m.n_classes = j.value("n_classes", 0);
  m.class_names = j.value("class_names", std::vector<std::string>{});
  m.layers = j.at("layers").get<std::vector<LayerDescriptor>>();
  m.tensor_index = j.at("tensor_index").get<std::vector<TensorEntry>>();
  m.checksums = j.value("checksums", std::map<std::string, std::string>{});
}

/// Shape flowing out of each layer. Flat layers (global_avg_pool, linear)
/// report their feature count in `c` with h = w = 1.
[[nodiscard]] inline std::vector<Shape3> infer_shapes(const ModelManifest& m) {
  std::vector<Shape3> out;
  Shape3 cur = m.input_shape;
  if (cur.c <= 0 || cur.h <= 0 || cur.w <= 0)
    fail(ErrorKind::ShapeMismatch, "manifest.json: input_shape must be positive");
  bool flat = false;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const std::string where = "manifest.json: layers[" + std::to_string(i) + "]";
    switch (l.kind) {
      case LayerKind::Conv2d: {
        if (flat) fail(ErrorKind::ShapeMismatch, where + " conv2d after flattening");
        if (l.out_channels <= 0 || l.kernel <= 0 || l.stride <= 0 || l.padding < 0)
          fail(ErrorKind::ShapeMismatch, where + " conv2d parameters must be positive");
        if (l.padding >= l.kernel) fail(ErrorKind::ShapeMismatch, where + " padding must be < kernel");
        const int oh = (cur.h + 2 * l.padding - l.kernel) / l.stride + 1;
        const int ow = (cur.w + 2 * l.padding - l.kernel) / l.stride + 1;
        if (cur.h + 2 * l.padding < l.kernel || cur.w + 2 * l.padding < l.kernel)
          fail(ErrorKind::ShapeMismatch, where + " kernel larger than padded input");
        cur = {l.out_channels, oh, ow};
        break;
      }
      case LayerKind::MaxPool: {
        if (flat) fail(ErrorKind::ShapeMismatch, where + " maxpool after flattening");
        if (l.kernel <= 0 || l.stride <= 0) fail(ErrorKind::ShapeMismatch, where + " maxpool parameters must be positive");
        if (cur.h < l.kernel || cur.w < l.kernel) fail(ErrorKind::ShapeMismatch, where + " pool window larger than input");
        cur = {cur.c, (cur.h - l.kernel) / l.stride + 1, (cur.w - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::Relu:
      case LayerKind::Gelu:
        break;
      case LayerKind::GlobalAvgPool:
        if (flat) fail(ErrorKind::ShapeMismatch, where + " global_avg_pool after flattening");
        cur = {cur.c, 1, 1};
        flat = true;
        break;
      case LayerKind::Linear:
        if (l.out_features <= 0) fail(ErrorKind::ShapeMismatch, where + " linear out_features must be positive");
        cur = {l.out_features, 1, 1};
        flat = true;
        break;
    }
    if (l.output_shape) {
      const auto& os = *l.output_shape;
      const bool ok = flat ? (os.size() == 1 && os[0] == cur.c)
                           : (os.size() == 3 && os[0] == cur.c && os[1] == cur.h && os[2] == cur.w);
      if (!ok) fail(ErrorKind::ShapeMismatch, where + " output_shape does not match the computed shape");
    }
    out.push_back(cur);
  }
  return out;
}

/// Expected tensor shapes for a layer's weight and bias, given its input.
[[nodiscard]] inline std::pair<std::vector<int>, std::vector<int>> param_shapes(const LayerDescriptor& l,
                                                                                  const Shape3& in) {
  if (l.kind == LayerKind::Conv2d) return {{l.out_channels, in.c, l.kernel, l.kernel}, {l.out_channels}};
  if (l.kind == LayerKind::Linear) return {{l.out_features, in.c * in.h * in.w}, {l.out_features}};
  return {};
}

struct Model {
  ModelManifest manifest;
  std::map<std::string, std::vector<float>> tensors;

  [[nodiscard]] const std::vector<float>& tensor(const std::string& name) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorKind::ShapeMismatch, "tensor '" + name + "' missing");
    return it->second;
  }
  bool operator==(const Model&) const = default;
};

/// Activation applied just before global_avg_pool, if any.
[[nodiscard]] inline std::optional<LayerKind> pre_pool_activation(const ModelManifest& m) {
  std::optional<LayerKind> last;
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::GlobalAvgPool) return last;
    if (l.kind == LayerKind::Relu || l.kind == LayerKind::Gelu) last = l.kind;
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Linear) last.reset();
  }
  return std::nullopt;
}

[[nodiscard]] inline bool has_global_avg_pool(const ModelManifest& m) {
  return std::any_of(m.layers.begin(), m.layers.end(),
                     [](const LayerDescriptor& l) { return l.kind == LayerKind::GlobalAvgPool; });
}

inline void verify_checksum(const fs::path& dir, const ModelManifest& m, const std::string& rel,
                            const std::vector<std::uint8_t>& bytes) {
  const auto it = m.checksums.find(rel);
  if (it == m.checksums.end()) fail(ErrorKind::ChecksumMismatch, rel + ": no checksum recorded in manifest.json");
  const auto got = checksum_hex(fnv1a64(bytes));
  if (got != it->second)
    fail(ErrorKind::ChecksumMismatch, (dir / rel).string() + ": expected " + it->second + ", got " + got);
}

/// Parses and validates manifest.json and weights.bin in `dir`.
[[nodiscard]] inline Model load_model(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  const auto weights_path = dir / "weights.bin";
  if (!fs::exists(manifest_path)) fail(ErrorKind::MissingFile, manifest_path.string());
  if (!fs::exists(weights_path)) fail(ErrorKind::MissingFile, weights_path.string());

  Model model;
  try {
    model.manifest = parse_json_file(manifest_path).get<ModelManifest>();
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, manifest_path.string() + ": " + e.what());
  }
  const auto& m = model.manifest;
  const auto blob = read_bytes(weights_path);
  verify_checksum(dir, m, "weights.bin", blob);
  if (blob.size() % 4 != 0) fail(ErrorKind::ShapeMismatch, "weights.bin: length is not a multiple of 4");

  const auto shapes = infer_shapes(m);

  std::map<std::string, const TensorEntry*> index;
  for (const auto& t : m.tensor_index) {
    if (!index.emplace(t.name, &t).second)
      fail(ErrorKind::ShapeMismatch, "manifest.json: tensor '" + t.name + "' listed more than once");
    if (t.byte_offset % 4 != 0) fail(ErrorKind::ShapeMismatch, "tensor '" + t.name + "': misaligned byte_offset");
    for (int s : t.shape)
      if (s <= 0) fail(ErrorKind::ShapeMismatch, "tensor '" + t.name + "': non-positive dimension");
    if (t.byte_offset + 4 * t.numel() > blob.size())
      fail(ErrorKind::ShapeMismatch, "tensor '" + t.name + "' extends past the end of weights.bin");
  }
  std::vector<const TensorEntry*> by_offset;
  for (const auto& t : m.tensor_index) by_offset.push_back(&t);
  std::sort(by_offset.begin(), by_offset.end(),
            [](const TensorEntry* a, const TensorEntry* b) { return a->byte_offset < b->byte_offset; });
  for (std::size_t i = 1; i < by_offset.size(); ++i)
    if (by_offset[i - 1]->byte_offset + 4 * by_offset[i - 1]->numel() > by_offset[i]->byte_offset)
      fail(ErrorKind::ShapeMismatch,
           "tensors '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "' overlap in weights.bin");

  std::map<std::string, int> uses;
  Shape3 in = m.input_shape;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Linear) {
      const auto [ws, bs] = param_shapes(l, in);
      if (l.weight.empty()) fail(ErrorKind::ShapeMismatch, "layers[" + std::to_string(i) + "] has no weight tensor");
      auto check = [&](const std::string& name, const std::vector<int>& expect) {
        const auto it = index.find(name);
        if (it == index.end()) fail(ErrorKind::ShapeMismatch, "tensor '" + name + "' not in tensor_index");
        if (it->second->shape != expect) fail(ErrorKind::ShapeMismatch, "tensor '" + name + "' has the wrong shape");
        ++uses[name];
      };
      check(l.weight, ws);
      if (!l.bias.empty()) check(l.bias, bs);
    }
    in = shapes[i];
  }
  for (const auto& [name, n] : uses)
    if (n != 1) fail(ErrorKind::ShapeMismatch, "tensor '" + name + "' is referenced by more than one layer");

  for (const auto& t : m.tensor_index) {
    auto values = decode_f32le(blob.data() + t.byte_offset, t.numel());
    for (float v : values)
      if (!std::isfinite(v)) fail(ErrorKind::NonFiniteValue, "weights.bin: tensor '" + t.name + "'");
    model.tensors.emplace(t.name, std::move(values));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Activation dump, head, dataset
// ---------------------------------------------------------------------------

struct ActivationDump {
  int n_examples = 0;
  int d = 0;
  int n_classes = 0;
  std::vector<float> Z;               // n_examples x d, row-major
  std::vector<float> teacher_logits;  // n_examples x n_classes, row-major
  std::vector<int> labels;
  std::vector<bool> teacher_correct;

  [[nodiscard]] float z(int i, int j) const { return Z[static_cast<std::size_t>(i) * d + j]; }
  [[nodiscard]] float logit(int i, int c) const {
    return teacher_logits[static_cast<std::size_t>(i) * n_classes + c];
  }
  /// Teacher's predicted class (argmax, ties to the lowest index).
  [[nodiscard]] int teacher_pred(int i) const {
    int best = 0;
    for (int c = 1; c < n_classes; ++c)
      if (logit(i, c) > logit(i, best)) best = c;
    return best;
  }
  bool operator==(const ActivationDump&) const = default;
};

struct HeadWeights {
  int n_classes = 0;
  int d = 0;
  std::vector<float> W;  // n_classes x d
  std::vector<float> b;

  [[nodiscard]] float w(int c, int j) const { return W[static_cast<std::size_t>(c) * d + j]; }
  bool operator==(const HeadWeights&) const = default;
};

enum class Split { Train, Eval };

struct DatasetEntry {
  std::string image_path;  // relative to the dataset directory
  int label = 0;
  std::optional<std::string> mask_path;
  Split split = Split::Train;
  bool operator==(const DatasetEntry&) const = default;
};

struct DatasetIndex {
  fs::path root;
  std::vector<DatasetEntry> entries;

  [[nodiscard]] fs::path image(std::size_t i) const { return root / entries[i].image_path; }
  [[nodiscard]] std::optional<fs::path> mask(std::size_t i) const {
    if (!entries[i].mask_path) return std::nullopt;
    return root / *entries[i].mask_path;
  }
  [[nodiscard]] std::vector<int> indices(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == s) out.push_back(static_cast<int>(i));
    return out;
  }
  bool operator==(const DatasetIndex&) const = default;
};

[[nodiscard]] inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

/// index.csv: header `image,label,mask,split`; mask may be empty; split is
/// `train` or `eval` (defaults to train when the column is absent).
[[nodiscard]] inline DatasetIndex read_dataset_index(const fs::path& dataset_dir) {
  const auto path = dataset_dir / "index.csv";
  if (!fs::exists(path)) fail(ErrorKind::MissingFile, path.string());
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::ParseError, path.string() + ": empty file");
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name) -> int {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int ci = col("image"), cl = col("label"), cm = col("mask"), cs = col("split");
  if (ci < 0 || cl < 0) fail(ErrorKind::ParseError, path.string() + ": header needs image and label columns");
  DatasetIndex idx;
  idx.root = dataset_dir;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    const auto need = static_cast<std::size_t>(std::max({ci, cl, cm, cs})) + 1;
    if (f.size() < need) fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(lineno) + ": too few fields");
    DatasetEntry e;
    e.image_path = f[static_cast<std::size_t>(ci)];
    try {
      e.label = std::stoi(f[static_cast<std::size_t>(cl)]);
    } catch (const std::exception&) {
      fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(lineno) + ": bad label");
    }
    if (cm >= 0 && !f[static_cast<std::size_t>(cm)].empty()) e.mask_path = f[static_cast<std::size_t>(cm)];
    if (cs >= 0) {
      const auto& s = f[static_cast<std::size_t>(cs)];
      if (s == "train") e.split = Split::Train;
      else if (s == "eval") e.split = Split::Eval;
      else fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(lineno) + ": split must be train or eval");
    }
    idx.entries.push_back(std::move(e));
  }
  return idx;
}

[[nodiscard]] inline std::string format_dataset_index(const DatasetIndex& idx) {
  std::string out = "image,label,mask,split\n";
  for (const auto& e : idx.entries) {
    out += e.image_path + "," + std::to_string(e.label) + "," + e.mask_path.value_or("") + "," +
           (e.split == Split::Train ? "train" : "eval") + "\n";
  }
  return out;
}

struct TeacherBundle {
  fs::path dir;
  Model model;
  ActivationDump dump;
  HeadWeights head;
  DatasetIndex dataset;
  bool operator==(const TeacherBundle&) const = default;
};

[[nodiscard]] inline HeadWeights head_from_model(const Model& model) {
  const auto& layers = model.manifest.layers;
  if (layers.empty() || layers.back().kind != LayerKind::Linear)
    fail(ErrorKind::ShapeMismatch, "manifest.json: the last layer must be linear");
  const auto& l = layers.back();
  HeadWeights h;
  h.n_classes = l.out_features;
  h.W = model.tensor(l.weight);
  h.d = static_cast<int>(h.W.size()) / h.n_classes;
  h.b = l.bias.empty() ? std::vector<float>(static_cast<std::size_t>(h.n_classes), 0.0f) : model.tensor(l.bias);
  return h;
}

[[nodiscard]] inline ActivationDump load_activations(const fs::path& dir, const ModelManifest& m) {
  const auto meta_path = dir / "activations.json";
  const auto bin_path = dir / "activations.bin";
  if (!fs::exists(meta_path)) fail(ErrorKind::MissingFile, meta_path.string());
  if (!fs::exists(bin_path)) fail(ErrorKind::MissingFile, bin_path.string());
  const auto blob = read_bytes(bin_path);
  verify_checksum(dir, m, "activations.bin", blob);

  const auto meta = parse_json_file(meta_path);
  ActivationDump a;
  try {
    a.n_examples = meta.at("n_examples").get<int>();
    a.d = meta.at("d").get<int>();
    a.n_classes = meta.at("n_classes").get<int>();
    a.labels = meta.at("labels").get<std::vector<int>>();
    a.teacher_correct = meta.at("teacher_correct").get<std::vector<bool>>();
    const auto tensors = meta.at("tensors").get<std::vector<TensorEntry>>();
    auto load = [&](const std::string& name, int rows, int cols) {
      const auto it = std::find_if(tensors.begin(), tensors.end(), [&](const TensorEntry& t) { return t.name == name; });
      if (it == tensors.end()) fail(ErrorKind::ShapeMismatch, "activations.json: tensor '" + name + "' missing");
      if (it->shape != std::vector<int>{rows, cols})
        fail(ErrorKind::ShapeMismatch, "activations.json: tensor '" + name + "' has the wrong shape");
      if (it->byte_offset % 4 != 0 || it->byte_offset + 4 * it->numel() > blob.size())
        fail(ErrorKind::ShapeMismatch, "activations.bin: tensor '" + name + "' out of range");
      auto v = decode_f32le(blob.data() + it->byte_offset, it->numel());
      for (float x : v)
        if (!std::isfinite(x)) fail(ErrorKind::NonFiniteValue, "activations.bin: tensor '" + name + "'");
      return v;
    };
    if (a.n_examples <= 0 || a.d <= 0 || a.n_classes <= 0)
      fail(ErrorKind::ShapeMismatch, "activations.json: sizes must be positive");
    a.Z = load("Z", a.n_examples, a.d);
    a.teacher_logits = load("teacher_logits", a.n_examples, a.n_classes);
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, meta_path.string() + ": " + e.what());
  }
  if (static_cast<int>(a.labels.size()) != a.n_examples)
    fail(ErrorKind::ShapeMismatch, "activations.json: labels length differs from n_examples");
  if (static_cast<int>(a.teacher_correct.size()) != a.n_examples)
    fail(ErrorKind::ShapeMismatch, "activations.json: teacher_correct length differs from n_examples");
  for (int i = 0; i < a.n_examples; ++i) {
    if (a.labels[static_cast<std::size_t>(i)] < 0 || a.labels[static_cast<std::size_t>(i)] >= a.n_classes)
      fail(ErrorKind::ShapeMismatch, "activations.json: labels[" + std::to_string(i) + "] out of range");
    if (a.teacher_correct[static_cast<std::size_t>(i)] != (a.teacher_pred(i) == a.labels[static_cast<std::size_t>(i)]))
      fail(ErrorKind::InvariantViolation,
           "activations.json: teacher_correct[" + std::to_string(i) + "] disagrees with teacher_logits");
  }
  return a;
}

/// Loads and validates a complete teacher bundle directory.
[[nodiscard]] inline TeacherBundle load_bundle(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::MissingFile, dir.string());
  for (const char* f : {"manifest.json", "weights.bin", "activations.bin", "activations.json", "dataset/index.csv"})
    if (!fs::exists(dir / f)) fail(ErrorKind::MissingFile, (dir / f).string());

  TeacherBundle b;
  b.dir = dir;
  b.model = load_model(dir);
  const auto& m = b.model.manifest;
  b.head = head_from_model(b.model);
  b.dump = load_activations(dir, m);
  if (b.dump.d != b.head.d) fail(ErrorKind::ShapeMismatch, "activations.json: d differs from the head input size");
  if (b.dump.n_classes != b.head.n_classes)
    fail(ErrorKind::ShapeMismatch, "activations.json: n_classes differs from the head output size");
  if (m.n_classes != 0 && m.n_classes != b.head.n_classes)
    fail(ErrorKind::ShapeMismatch, "manifest.json: n_classes differs from the head output size");

  b.dataset = read_dataset_index(dir / "dataset");
  if (static_cast<int>(b.dataset.entries.size()) != b.dump.n_examples)
    fail(ErrorKind::ShapeMismatch, "dataset/index.csv: entry count differs from n_examples");
  for (std::size_t i = 0; i < b.dataset.entries.size(); ++i) {
    const auto& e = b.dataset.entries[i];
    if (e.label != b.dump.labels[i])
      fail(ErrorKind::ShapeMismatch, "dataset/index.csv: label of row " + std::to_string(i) + " differs from activations.json");
    auto check_file = [&](const std::string& rel, bool is_mask) {
      const auto p = b.dataset.root / rel;
      if (!fs::exists(p)) fail(ErrorKind::MissingFile, p.string());
      const auto key = "dataset/" + rel;
      if (m.checksums.count(key)) verify_checksum(dir, m, key, read_bytes(p));
      const auto [w, h] = png::read_size(p);
      if (w != m.input_shape.w || h != m.input_shape.h)
        fail(ErrorKind::ShapeMismatch, p.string() + (is_mask ? ": mask" : ": image") + " size differs from input_shape");
    };
    check_file(e.image_path, false);
    if (e.mask_path) check_file(*e.mask_path, true);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Bundle writing
// ---------------------------------------------------------------------------

/// Appends named tensors to a blob and records their index entries.
class BlobWriter {
 public:
  void add(const std::string& name, std::vector<int> shape, const std::vector<float>& values) {
    TensorEntry t{name, std::move(shape), bytes_.size()};
    if (t.numel() != values.size()) fail(ErrorKind::ShapeMismatch, "tensor '" + name + "': value count differs from shape");
    encode_f32le(values, bytes_);
    index_.push_back(std::move(t));
  }
  [[nodiscard]] const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  [[nodiscard]] const std::vector<TensorEntry>& index() const { return index_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::vector<TensorEntry> index_;
};

inline void write_activations(const fs::path& dir, const ActivationDump& a, ModelManifest& m) {
  BlobWriter w;
  w.add("Z", {a.n_examples, a.d}, a.Z);
  w.add("teacher_logits", {a.n_examples, a.n_classes}, a.teacher_logits);
  write_bytes(dir / "activations.bin", w.bytes());
  m.checksums["activations.bin"] = checksum_hex(fnv1a64(w.bytes()));
  json meta{{"n_examples", a.n_examples}, {"d", a.d},          {"n_classes", a.n_classes},
            {"labels", a.labels},         {"teacher_correct", a.teacher_correct}, {"tensors", w.index()}};
  write_text(dir / "activations.json", dump_json(meta));
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Writes any artifact type that has a to_json overload.
template <class T>
void write_artifact(const T& obj, const fs::path& path) {
  const auto parent = path.parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) fail(ErrorKind::IoError, "no such directory: " + parent.string());
  json j = obj;
  write_text(path, dump_json(j));
}

template <class T>
[[nodiscard]] T read_artifact(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::MissingArtifact, path.string());
  try {
    return parse_json_file(path).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, path.string() + ": " + e.what());
  }
}

}  // namespace visionlogic
