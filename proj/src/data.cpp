#include "protoalign/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "protoalign/binary_io.hpp"
#include "protoalign/errors.hpp"

namespace protoalign {

namespace {

constexpr std::array<double, 5> kNoiseSigma = {0.06, 0.10, 0.15, 0.22, 0.32};
constexpr std::array<double, 5> kImpulseRate = {0.03, 0.06, 0.09, 0.17, 0.27};
constexpr std::array<double, 5> kContrast = {0.5, 0.4, 0.3, 0.2, 0.12};
constexpr std::array<double, 5> kBlurSigma = {0.6, 0.9, 1.2, 1.6, 2.2};
// Pixelation always renders at the coarsest grid and severity sets how much
// of it replaces the input. Varying the grid size instead aliases, and the
// distortion then stops growing with severity.
constexpr double kPixelateFraction = 0.4;
constexpr std::array<double, 5> kPixelateMix = {0.2, 0.4, 0.6, 0.8, 1.0};

void add_blob(Vector& img, const InputShape& shape, double cx, double cy, double sigma_major, double sigma_minor,
              double angle, const std::vector<double>& colour) {
  const double ca = std::cos(angle);
  const double sa = std::sin(angle);
  const Eigen::Index plane = static_cast<Eigen::Index>(shape.height) * shape.width;
  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) {
      const double dx = x + 0.5 - cx;
      const double dy = y + 0.5 - cy;
      const double u = ca * dx + sa * dy;
      const double v = -sa * dx + ca * dy;
      const double g = std::exp(-0.5 * (u * u / (sigma_major * sigma_major) + v * v / (sigma_minor * sigma_minor)));
      for (int c = 0; c < shape.channels; ++c) {
        img(c * plane + y * shape.width + x) += colour[static_cast<size_t>(c)] * g;
      }
    }
  }
}

// Bilinear resize of every channel plane to (h, w).
Vector resize(const Vector& input, const InputShape& from, int h, int w) {
  InputShape to{from.channels, h, w};
  Vector out(to.size());
  const Eigen::Index in_plane = static_cast<Eigen::Index>(from.height) * from.width;
  const Eigen::Index out_plane = static_cast<Eigen::Index>(h) * w;
  for (int c = 0; c < from.channels; ++c) {
    for (int i = 0; i < h; ++i) {
      const double y = std::clamp((i + 0.5) * from.height / h - 0.5, 0.0, from.height - 1.0);
      const int y0 = static_cast<int>(std::floor(y));
      const int y1 = std::min(y0 + 1, from.height - 1);
      const double fy = y - y0;
      for (int j = 0; j < w; ++j) {
        const double x = std::clamp((j + 0.5) * from.width / w - 0.5, 0.0, from.width - 1.0);
        const int x0 = static_cast<int>(std::floor(x));
        const int x1 = std::min(x0 + 1, from.width - 1);
        const double fx = x - x0;
        auto at = [&](int yy, int xx) { return input(c * in_plane + yy * from.width + xx); };
        out(c * out_plane + i * w + j) = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
    }
  }
  return out;
}

Vector nearest_upsample(const Vector& input, int h, int w, const InputShape& to) {
  Vector out(to.size());
  const Eigen::Index in_plane = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index out_plane = static_cast<Eigen::Index>(to.height) * to.width;
  for (int c = 0; c < to.channels; ++c) {
    for (int i = 0; i < to.height; ++i) {
      const int si = std::min(h - 1, i * h / to.height);
      for (int j = 0; j < to.width; ++j) {
        const int sj = std::min(w - 1, j * w / to.width);
        out(c * out_plane + i * to.width + j) = input(c * in_plane + si * w + sj);
      }
    }
  }
  return out;
}

}  // namespace

Dataset Dataset::subset(Split split) const {
  const auto idx = indices(split);
  Dataset out;
  out.meta = meta;
  out.inputs.resize(inputs.rows(), static_cast<Eigen::Index>(idx.size()));
  for (size_t i = 0; i < idx.size(); ++i) {
    out.inputs.col(static_cast<Eigen::Index>(i)) = inputs.col(idx[i]);
    out.labels.push_back(labels[static_cast<size_t>(idx[i])]);
    out.splits.push_back(split);
  }
  return out;
}

std::vector<int> Dataset::indices(Split split) const {
  std::vector<int> idx;
  for (size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

void Dataset::validate() const {
  if (inputs.rows() != meta.shape.size()) throw FormatError("dataset input dimension does not match its shape");
  if (static_cast<Eigen::Index>(labels.size()) != inputs.cols() ||
      static_cast<Eigen::Index>(splits.size()) != inputs.cols()) {
    throw FormatError("dataset labels/splits do not match sample count");
  }
  for (int y : labels) {
    if (y < 0 || y >= meta.num_classes) throw FormatError("dataset label " + std::to_string(y) + " out of range");
  }
}

Dataset generate_synthetic(int num_classes, int samples_per_class, const InputShape& shape, double difficulty,
                           uint64_t seed) {
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  if (samples_per_class < 1) throw ConfigError("samples_per_class must be positive");
  if (shape.channels < 1 || shape.height < 4 || shape.width < 4) {
    throw ConfigError("input grid must have >= 1 channel and be at least 4x4");
  }
  if (difficulty < 0.0 || difficulty > 1.0) throw ConfigError("difficulty must lie in [0, 1]");

  const int n = num_classes * samples_per_class;
  Dataset ds;
  ds.meta = DatasetMeta{num_classes, samples_per_class, shape, difficulty, seed, "anisotropic-blobs-v2"};
  ds.inputs.resize(shape.size(), n);
  ds.labels.resize(static_cast<size_t>(n));
  ds.splits.resize(static_cast<size_t>(n));

  const int n_test = static_cast<int>(std::lround(0.2 * samples_per_class));
  const int n_val = static_cast<int>(std::lround(0.2 * (samples_per_class - n_test)));
  if (n_test < 1 || n_val < 1 || samples_per_class - n_test - n_val < 1) {
    throw ConfigError("samples_per_class too small to populate train/val/test splits");
  }

  const double spacing = std::numbers::pi / num_classes;
  const double W = shape.width;
  const double H = shape.height;
  for (int i = 0; i < n; ++i) {
    const int label = i % num_classes;
    const int rank = i / num_classes;
    Rng rng = rng_stream(seed, {static_cast<uint64_t>(i)});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    Vector img = Vector::Constant(shape.size(), 0.0);
    const double angle = label * spacing + difficulty * 0.3 * spacing * normal(rng);
    const double cx = W * (0.4 + 0.2 * unit(rng));
    const double cy = H * (0.4 + 0.2 * unit(rng));
    const double major = W * (0.28 + 0.08 * unit(rng));
    const double minor = W * (0.07 + 0.03 * unit(rng));
    const double amplitude = 0.6 + 0.4 * unit(rng);
    std::vector<double> colour(static_cast<size_t>(shape.channels));
    for (double& c : colour) c = amplitude * (0.85 + 0.15 * unit(rng));
    add_blob(img, shape, cx, cy, major, minor, angle, colour);

    const int clutter = static_cast<int>(std::lround(3.0 * difficulty));
    for (int k = 0; k < clutter; ++k) {
      std::vector<double> cc(static_cast<size_t>(shape.channels));
      for (double& c : cc) c = 0.5 * difficulty * unit(rng);
      const double r = W * (0.06 + 0.06 * unit(rng));
      add_blob(img, shape, W * unit(rng), H * unit(rng), r, r, 0.0, cc);
    }
    const double background = 0.05 + 0.15 * unit(rng);
    const double noise = 0.02 + 0.08 * difficulty;
    for (Eigen::Index j = 0; j < img.size(); ++j) img(j) += background + noise * normal(rng);
    ds.inputs.col(i) = img.cwiseMax(0.0).cwiseMin(1.0);
    ds.labels[static_cast<size_t>(i)] = label;
    ds.splits[static_cast<size_t>(i)] =
        rank < n_test ? Split::Test : (rank < n_test + n_val ? Split::Val : Split::Train);
  }
  return ds;
}

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::GaussianNoise:
      return "gaussian_noise";
    case CorruptionKind::ImpulseNoise:
      return "impulse_noise";
    case CorruptionKind::Contrast:
      return "contrast";
    case CorruptionKind::Blur:
      return "blur";
    case CorruptionKind::Pixelate:
      return "pixelate";
  }
  return "unknown";
}

CorruptionKind parse_corruption(const std::string& name) {
  for (auto k : kAllCorruptions) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown corruption kind '" + name + "'");
}

void CorruptionSpec::validate() const {
  if (severity < 1 || severity > 5) throw ConfigError("severity must be in [1, 5], got " + std::to_string(severity));
}

double impulse_rate(int severity) {
  CorruptionSpec{CorruptionKind::ImpulseNoise, severity, 0}.validate();
  return kImpulseRate[static_cast<size_t>(severity - 1)];
}

Vector corrupt_sample(const Vector& input, const InputShape& shape, const CorruptionSpec& spec, uint64_t sample_key) {
  spec.validate();
  const size_t level = static_cast<size_t>(spec.severity - 1);
  Rng rng = rng_stream(spec.seed, {static_cast<uint64_t>(spec.kind), static_cast<uint64_t>(spec.severity),
                                   sample_key});
  Vector out = input;
  switch (spec.kind) {
    case CorruptionKind::GaussianNoise: {
      std::normal_distribution<double> normal(0.0, kNoiseSigma[level]);
      for (Eigen::Index j = 0; j < out.size(); ++j) out(j) += normal(rng);
      break;
    }
    case CorruptionKind::ImpulseNoise: {
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      for (Eigen::Index j = 0; j < out.size(); ++j) {
        const double u = unit(rng);
        const double salt = unit(rng);
        if (u < kImpulseRate[level]) out(j) = salt < 0.5 ? 0.0 : 1.0;
      }
      break;
    }
    case CorruptionKind::Contrast: {
      const Eigen::Index plane = static_cast<Eigen::Index>(shape.height) * shape.width;
      for (int c = 0; c < shape.channels; ++c) {
        auto seg = out.segment(c * plane, plane);
        const double mean = seg.mean();
        seg = ((seg.array() - mean) * kContrast[level] + mean).matrix();
      }
      break;
    }
    case CorruptionKind::Blur:
      out = gaussian_blur(out, shape, kBlurSigma[level]);
      break;
    case CorruptionKind::Pixelate: {
      const int h = std::max(2, static_cast<int>(std::lround(shape.height * kPixelateFraction)));
      const int w = std::max(2, static_cast<int>(std::lround(shape.width * kPixelateFraction)));
      const double mix = kPixelateMix[level];
      out = (1.0 - mix) * out + mix * nearest_upsample(resize(out, shape, h, w), h, w, shape);
      break;
    }
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

Dataset corrupt(const Dataset& dataset, const CorruptionSpec& spec) {
  spec.validate();
  Dataset out = dataset;
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    out.inputs.col(i) = corrupt_sample(dataset.inputs.col(i), dataset.meta.shape, spec, static_cast<uint64_t>(i));
  }
  out.meta.description += ";" + to_string(spec.kind) + "@" + std::to_string(spec.severity);
  return out;
}

namespace {
constexpr std::string_view kDatasetMagic = "PALGDSET";
constexpr uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const Dataset& dataset, const std::string& path) {
  dataset.validate();
  binary::Writer w;
  w.bytes(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.i32(dataset.meta.num_classes);
  w.i32(dataset.meta.samples_per_class);
  w.i32(dataset.meta.shape.channels);
  w.i32(dataset.meta.shape.height);
  w.i32(dataset.meta.shape.width);
  w.f64(dataset.meta.difficulty);
  w.u64(dataset.meta.seed);
  w.str(dataset.meta.description);
  w.u64(static_cast<uint64_t>(dataset.size()));
  for (size_t i = 0; i < dataset.labels.size(); ++i) {
    w.i32(dataset.labels[i]);
    w.scalar<uint8_t>(static_cast<uint8_t>(dataset.splits[i]));
  }
  for (Eigen::Index j = 0; j < dataset.inputs.cols(); ++j)
    for (Eigen::Index i = 0; i < dataset.inputs.rows(); ++i) w.f64(dataset.inputs(i, j));
  binary::write_file(path, w.buffer());
}

Dataset load_dataset(const std::string& path) {
  const auto data = binary::read_file(path);
  binary::Reader r(data, "dataset '" + path + "'");
  if (r.bytes(kDatasetMagic.size()) != kDatasetMagic) r.fail("bad magic");
  const uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("dataset '" + path + "': unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kDatasetVersion) + ")");
  }
  Dataset ds;
  ds.meta.num_classes = r.i32();
  ds.meta.samples_per_class = r.i32();
  ds.meta.shape.channels = r.i32();
  ds.meta.shape.height = r.i32();
  ds.meta.shape.width = r.i32();
  ds.meta.difficulty = r.f64();
  ds.meta.seed = r.u64();
  ds.meta.description = r.str();
  const uint64_t n = r.u64();
  const int64_t dim = static_cast<int64_t>(ds.meta.shape.channels) * ds.meta.shape.height * ds.meta.shape.width;
  if (dim <= 0 || n > (1ull << 26)) r.fail("implausible header");
  ds.labels.resize(n);
  ds.splits.resize(n);
  for (uint64_t i = 0; i < n; ++i) {
    ds.labels[i] = r.i32();
    const auto s = r.scalar<uint8_t>();
    if (s > 2) r.fail("invalid split tag");
    ds.splits[i] = static_cast<Split>(s);
  }
  ds.inputs.resize(dim, static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < ds.inputs.cols(); ++j)
    for (Eigen::Index i = 0; i < ds.inputs.rows(); ++i) ds.inputs(i, j) = r.f64();
  if (!r.at_end()) r.fail("trailing bytes");
  ds.validate();
  return ds;
}

}  // namespace protoalign
