// Generates the synthetic shapes dataset and the two frozen fixture teachers
// (ReLU head and GELU head) as complete bundles.
//
// usage: make_fixture OUT_DIR [SEED]

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include "visionlogic/nnforward.hpp"
#include "visionlogic/png_io.hpp"
#include "visionlogic/rng.hpp"
#include "visionlogic/tensorio.hpp"

namespace fs = std::filesystem;
using namespace visionlogic;

namespace {

constexpr int kSize = 64;
constexpr int kTrain = 600;
constexpr int kEval = 150;
constexpr int kClasses = 3;
constexpr int kD = 32;
constexpr int kWhiteChannel = 6;
constexpr int kNegativeChannel = 15;
const std::vector<std::string> kClassNames = {"square", "diamond", "triangle"};

struct Sample {
  Image image;
  Mask mask;
  int label = 0;
  bool white = false;
};

Sample make_sample(int cls, Rng& rng) {
  Sample s;
  s.label = cls;
  s.image = Image(3, kSize, kSize);
  s.mask = Mask{kSize, kSize, std::vector<std::uint8_t>(kSize * kSize, 0)};
  const double base = rng.uniform(0.08, 0.16);
  const double fx = rng.uniform(0.05, 0.2), fy = rng.uniform(0.05, 0.2), ph = rng.uniform(0.0, 6.28);
  std::vector<double> bg(kSize * kSize);
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x)
      bg[static_cast<std::size_t>(y * kSize + x)] = base + 0.02 * std::sin(fx * x + fy * y + ph) + rng.uniform(-0.02, 0.02);
  for (int c = 0; c < 3; ++c) {
    const double off = rng.uniform(-0.02, 0.02);
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x) s.image.at(c, y, x) = static_cast<float>(bg[static_cast<std::size_t>(y * kSize + x)] + off);
  }
  const double size = rng.uniform(20.0, 30.0), r = size / 2;
  const double cx = rng.uniform(r + 3, kSize - r - 3), cy = rng.uniform(r + 3, kSize - r - 3);
  s.white = cls == 0 && rng.uniform() < 0.75;
  double col[3] = {1.0, 1.0, 1.0};
  if (!s.white) {
    for (double& v : col) v = rng.uniform(0.75, 0.95);
    col[rng.below(3)] = rng.uniform(0.65, 0.8);
  }
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x) {
      const double px = x + 0.5, py = y + 0.5, dx = std::abs(px - cx), dy = std::abs(py - cy);
      bool in = false;
      if (cls == 0) in = dx <= r && dy <= r;
      else if (cls == 1) in = dx + dy <= 1.3 * r;
      else in = py >= cy - 0.7 * r && py <= cy + 0.7 * r && dx <= py - (cy - 0.7 * r);
      if (!in) continue;
      s.mask.fg[static_cast<std::size_t>(y * kSize + x)] = 1;
      for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = static_cast<float>(col[c]);
    }
  clamp01(s.image);
  return s;
}

/// Oriented, zero-mean derivative-of-Gaussian edge kernel; y points down.
std::vector<double> edge_kernel(double theta, int k = 7, double sn = 1.0, double st = 2.5) {
  const int r = k / 2;
  const double nx = std::cos(theta), ny = std::sin(theta), ex = -ny, ey = nx;
  std::vector<double> K(static_cast<std::size_t>(k * k)), step(K.size());
  double mean = 0.0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      const double vx = x - r, vy = y - r, d = vx * nx + vy * ny, t = vx * ex + vy * ey;
      const auto i = static_cast<std::size_t>(y * k + x);
      K[i] = d * std::exp(-d * d / (2 * sn * sn)) * std::exp(-t * t / (2 * st * st));
      step[i] = d > 1e-9 ? 1.0 : (std::abs(d) < 1e-9 ? 0.5 : 0.0);
      mean += K[i];
    }
  mean /= static_cast<double>(K.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < K.size(); ++i) {
    K[i] -= mean;
    norm += K[i] * step[i];
  }
  for (auto& v : K) v /= norm;
  return K;
}

struct ConvParams {
  int out, in, k;
  std::vector<float> w, b;
  ConvParams(int o, int i, int kk) : out(o), in(i), k(kk), w(static_cast<std::size_t>(o * i * kk * kk), 0.0f), b(static_cast<std::size_t>(o), 0.0f) {}
  float& at(int o, int i, int y, int x) { return w[((static_cast<std::size_t>(o) * in + i) * k + y) * k + x]; }
};

struct Weights {
  ConvParams conv1{10, 3, 7};
  ConvParams conv2{kD, 10, 11};
  ConvParams conv3{kD, kD, 1};
  std::vector<float> head_w = std::vector<float>(kClasses * kD, 0.0f);
  std::vector<float> head_b = std::vector<float>(kClasses, 0.0f);
};

Weights build_weights(bool gelu) {
  Weights W;
  const double thetas[4] = {0.0, std::numbers::pi / 4, std::numbers::pi / 2, 3 * std::numbers::pi / 4};
  for (int t = 0; t < 4; ++t) {
    const auto K = edge_kernel(thetas[t]);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) {
          const double v = K[static_cast<std::size_t>(y * 7 + x)] / 3.0;
          W.conv1.at(2 * t, c, y, x) = static_cast<float>(v);
          W.conv1.at(2 * t + 1, c, y, x) = static_cast<float>(-v);
        }
    W.conv1.b[static_cast<std::size_t>(2 * t)] = W.conv1.b[static_cast<std::size_t>(2 * t + 1)] = -0.45f;
  }
  for (int c = 0; c < 3; ++c) {
    for (int y = 2; y < 5; ++y)
      for (int x = 2; x < 5; ++x) W.conv1.at(8, c, y, x) = 1.0f;
    W.conv1.at(9, c, 3, 3) = static_cast<float>(1.0 / 3.0);
  }
  W.conv1.b[8] = -25.5f;

  // Edge channel order: 0 V+, 1 V-, 2 D45+, 3 D45-, 4 H+, 5 H-, 6 D135+, 7 D135-.
  auto window = [&](int o, int i, double w) {
    for (int y = 1; y < 10; ++y)
      for (int x = 1; x < 10; ++x) W.conv2.at(o, i, y, x) += static_cast<float>(w);
  };
  const std::vector<std::vector<std::pair<int, double>>> detectors = {
      {{0, 1.0}, {1, 1.0}},
      {{3, 1.0}, {7, 1.0}},
      {{5, 1.0}, {2, 1.0}, {6, 1.0}, {4, -2.0}, {3, -2.0}, {7, -2.0}, {0, -0.5}, {1, -0.5}}};
  for (int c = 0; c < kClasses; ++c) {
    for (const auto& [i, w] : detectors[static_cast<std::size_t>(c)]) {
      window(c, i, w);
      window(3 + c, i, 0.5 * w);
    }
    W.conv2.b[static_cast<std::size_t>(c)] = -0.5f;
    W.conv2.at(3 + c, 9, 5, 5) = 2.0f;
  }
  W.conv2.at(kWhiteChannel, 8, 5, 5) = 1.0f;
  for (int k = 0; k < 8; ++k) W.conv2.at(7 + k, k, 5, 5) = 1.0f;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x)
      for (int i : {0, 1}) {
        W.conv2.at(15, i, y, x) = 10.0f;
        W.conv2.at(16, i, y, x) = 10.0f;
      }
  W.conv2.b[15] = -5.0f;
  W.conv2.b[16] = -5.75f;
  W.conv2.at(17, 9, 5, 5) = 1.0f;

  for (int j = 0; j < 15; ++j) W.conv3.at(j, j, 0, 0) = 1.0f;
  if (gelu) {
    W.conv3.at(kNegativeChannel, 15, 0, 0) = -1.0f;
    W.conv3.at(kNegativeChannel, 16, 0, 0) = 1.0f;
    W.conv3.at(kNegativeChannel, 17, 0, 0) = -0.25f;
  }

  auto hw = [&](int c, int j) -> float& { return W.head_w[static_cast<std::size_t>(c * kD + j)]; };
  for (int c = 0; c < kClasses; ++c) {
    for (int k = 0; k < kClasses; ++k) {
      hw(c, k) = k == c ? 2.0f : -1.0f;
      hw(c, 3 + k) = k == c ? 0.0f : 0.3f;
    }
    hw(c, kWhiteChannel) = -0.1f;
    for (int j = 7; j < 15; ++j) hw(c, j) = -0.05f;
  }
  if (gelu) {
    hw(1, kNegativeChannel) = -5.0f;
    hw(2, kNegativeChannel) = -5.0f;
  }
  return W;
}

ModelManifest build_manifest(bool gelu, BlobWriter& blob, const Weights& W) {
  ModelManifest m;
  m.input_shape = {3, kSize, kSize};
  m.n_classes = kClasses;
  m.class_names = kClassNames;
  auto conv = [&](const std::string& name, const ConvParams& p, int padding) {
    blob.add(name + ".weight", {p.out, p.in, p.k, p.k}, p.w);
    blob.add(name + ".bias", {p.out}, p.b);
    LayerDescriptor l;
    l.kind = LayerKind::Conv2d;
    l.out_channels = p.out;
    l.kernel = p.k;
    l.stride = 1;
    l.padding = padding;
    l.weight = name + ".weight";
    l.bias = name + ".bias";
    return l;
  };
  auto simple = [](LayerKind k) {
    LayerDescriptor l;
    l.kind = k;
    return l;
  };
  auto pool = [](int k, int s) {
    LayerDescriptor l;
    l.kind = LayerKind::MaxPool;
    l.kernel = k;
    l.stride = s;
    return l;
  };
  m.layers.push_back(conv("conv1", W.conv1, 3));
  m.layers.push_back(simple(LayerKind::Relu));
  m.layers.push_back(pool(4, 4));
  m.layers.push_back(conv("conv2", W.conv2, 5));
  m.layers.push_back(simple(LayerKind::Relu));
  m.layers.push_back(pool(2, 1));
  m.layers.push_back(conv("conv3", W.conv3, 0));
  m.layers.push_back(simple(gelu ? LayerKind::Gelu : LayerKind::Relu));
  m.layers.push_back(simple(LayerKind::GlobalAvgPool));
  blob.add("head.weight", {kClasses, kD}, W.head_w);
  blob.add("head.bias", {kClasses}, W.head_b);
  LayerDescriptor lin;
  lin.kind = LayerKind::Linear;
  lin.out_features = kClasses;
  lin.weight = "head.weight";
  lin.bias = "head.bias";
  m.layers.push_back(lin);
  const auto shapes = infer_shapes(m);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const bool flat = m.layers[i].kind == LayerKind::GlobalAvgPool || m.layers[i].kind == LayerKind::Linear;
    m.layers[i].output_shape = flat ? std::vector<int>{shapes[i].c} : std::vector<int>{shapes[i].c, shapes[i].h, shapes[i].w};
  }
  m.tensor_index = blob.index();
  return m;
}

void write_bundle(const fs::path& dir, bool gelu, const std::vector<Sample>& samples) {
  fs::create_directories(dir / "dataset" / "images");
  fs::create_directories(dir / "dataset" / "masks");
  const Weights W = build_weights(gelu);
  BlobWriter blob;
  ModelManifest m = build_manifest(gelu, blob, W);
  write_bytes(dir / "weights.bin", blob.bytes());
  m.checksums["weights.bin"] = checksum_hex(fnv1a64(blob.bytes()));

  DatasetIndex idx;
  idx.root = dir / "dataset";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%03zu.png", i);
    DatasetEntry e;
    e.image_path = std::string("images/") + name;
    e.mask_path = std::string("masks/") + name;
    e.label = samples[i].label;
    e.split = static_cast<int>(i) < kTrain ? Split::Train : Split::Eval;
    png::write_rgb(idx.root / e.image_path, samples[i].image);
    png::write_mask(idx.root / *e.mask_path, samples[i].mask);
    m.checksums["dataset/" + e.image_path] = checksum_hex(fnv1a64(read_bytes(idx.root / e.image_path)));
    m.checksums["dataset/" + *e.mask_path] = checksum_hex(fnv1a64(read_bytes(idx.root / *e.mask_path)));
    idx.entries.push_back(e);
  }
  write_text(idx.root / "index.csv", format_dataset_index(idx));

  Model model;
  model.manifest = m;
  for (const auto& t : m.tensor_index)
    model.tensors[t.name] = decode_f32le(blob.bytes().data() + t.byte_offset, t.numel());
  const Engine engine(model);
  ActivationDump a;
  a.n_examples = static_cast<int>(samples.size());
  a.d = kD;
  a.n_classes = kClasses;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto trace = engine.forward(png::read_rgb(idx.root / idx.entries[i].image_path));
    a.Z.insert(a.Z.end(), trace.z.begin(), trace.z.end());
    a.teacher_logits.insert(a.teacher_logits.end(), trace.logits.begin(), trace.logits.end());
    a.labels.push_back(samples[i].label);
  }
  int correct_train = 0, correct_eval = 0;
  for (int i = 0; i < a.n_examples; ++i) {
    const bool ok = a.teacher_pred(i) == a.labels[static_cast<std::size_t>(i)];
    a.teacher_correct.push_back(ok);
    (i < kTrain ? correct_train : correct_eval) += ok;
  }
  write_activations(dir, a, m);
  write_text(dir / "manifest.json", dump_json(json(m)));
  std::printf("%s: teacher accuracy train %.4f eval %.4f\n", dir.filename().string().c_str(),
              static_cast<double>(correct_train) / kTrain, static_cast<double>(correct_eval) / kEval);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: make_fixture OUT_DIR [SEED]\n";
    return 2;
  }
  const fs::path out = argv[1];
  const std::uint64_t seed = argc > 2 ? std::stoull(argv[2]) : 11;
  try {
    Rng rng(seed);
    std::vector<Sample> samples;
    for (int i = 0; i < kTrain + kEval; ++i) samples.push_back(make_sample(i % kClasses, rng));
    fs::create_directories(out);
    write_bundle(out / "relu_bundle", false, samples);
    write_bundle(out / "gelu_bundle", true, samples);
    json info{{"seed", seed},
              {"class_names", kClassNames},
              {"oracle_channel", kWhiteChannel},
              {"negative_channel", kNegativeChannel},
              {"n_train", kTrain},
              {"n_eval", kEval}};
    std::vector<int> white;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].white) white.push_back(static_cast<int>(i));
    info["white_square_images"] = white;
    write_text(out / "fixture_info.json", dump_json(info));
  } catch (const std::exception& e) {
    std::cerr << "make_fixture: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
