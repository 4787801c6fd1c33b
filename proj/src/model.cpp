#include "protoalign/model.hpp"

#include <cmath>
#include <sstream>

#include "protoalign/binary_io.hpp"
#include "protoalign/errors.hpp"

namespace protoalign {

namespace {

constexpr double kMinNorm = 1e-12;

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_mask(const Matrix& grad, const Matrix& output) {
  return (output.array() > 0.0).select(grad, 0.0);
}

void require_finite(const Matrix& m, const std::string& layer) {
  if (!m.allFinite()) throw NumericalError("non-finite activation in layer '" + layer + "'");
}

struct LayerSpec {
  std::string id;
  BlockRole role;
  Eigen::Index rows;
  Eigen::Index cols;
  bool decays;
  enum class Init { FanIn, Zero, One } init;
  Eigen::Index fan_in;
};

std::vector<LayerSpec> layout(const ModelConfig& c) {
  std::vector<LayerSpec> specs;
  auto linear = [&](const std::string& name, BlockRole role, Eigen::Index out, Eigen::Index in) {
    specs.push_back({name + ".weight", role, out, in, true, LayerSpec::Init::FanIn, in});
    specs.push_back({name + ".bias", role, out, 1, false, LayerSpec::Init::Zero, in});
  };
  auto norm = [&](const std::string& name, BlockRole role, Eigen::Index ch) {
    specs.push_back({name + ".gamma", role, ch, 1, false, LayerSpec::Init::One, ch});
    specs.push_back({name + ".beta", role, ch, 1, false, LayerSpec::Init::Zero, ch});
  };
  linear("stem.fc", BlockRole::BackboneEarly, c.width, c.input_dim);
  norm("stem.gn", BlockRole::BackboneEarly, c.width);
  for (int i = 0; i < c.residual_blocks; ++i) {
    const BlockRole role = (i + 1 == c.residual_blocks) ? BlockRole::BackboneLast : BlockRole::BackboneEarly;
    const std::string p = "block" + std::to_string(i);
    linear(p + ".fc1", role, c.width, c.width);
    norm(p + ".gn1", role, c.width);
    linear(p + ".fc2", role, c.width, c.width);
    norm(p + ".gn2", role, c.width);
  }
  linear("proj.fc1", BlockRole::Projection, c.projection_hidden, c.width);
  norm("proj.gn", BlockRole::Projection, c.projection_hidden);
  linear("proj.fc2", BlockRole::Projection, c.projection_dim, c.projection_hidden);
  linear("cls", BlockRole::Classifier, c.num_classes, c.projection_dim);
  return specs;
}

std::string bp(int i) { return "block" + std::to_string(i); }

}  // namespace

const char* to_string(BlockRole role) {
  switch (role) {
    case BlockRole::BackboneEarly:
      return "backbone_early";
    case BlockRole::BackboneLast:
      return "backbone_last";
    case BlockRole::Projection:
      return "projection";
    case BlockRole::Classifier:
      return "classifier";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (input_dim < 1 || width < 1 || projection_hidden < 1 || projection_dim < 1 || num_classes < 2) {
    throw ConfigError("model dimensions must be positive and num_classes >= 2");
  }
  if (residual_blocks < 2) {
    throw ConfigError("backbone needs at least 2 residual blocks, got " + std::to_string(residual_blocks));
  }
  check_group_divisibility(width, num_groups);
  check_group_divisibility(projection_hidden, num_groups);
  if (!(gn_epsilon > 0.0)) throw ConfigError("group norm epsilon must be positive");
}

ModelParams::ModelParams(const ModelConfig& config, uint64_t rng_seed) : config_(config), rng_seed_(rng_seed) {
  config_.validate();
  std::mt19937_64 rng(rng_seed);
  for (const auto& s : layout(config_)) {
    ParamBlock b{s.id, s.role, Matrix(s.rows, s.cols), s.decays};
    switch (s.init) {
      case LayerSpec::Init::FanIn: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index j = 0; j < b.values.cols(); ++j)
          for (Eigen::Index i = 0; i < b.values.rows(); ++i) b.values(i, j) = u(rng);
        break;
      }
      case LayerSpec::Init::Zero:
        b.values.setZero();
        break;
      case LayerSpec::Init::One:
        b.values.setOnes();
        break;
    }
    blocks_.push_back(std::move(b));
  }
  index_blocks();
}

ModelParams ModelParams::from_blocks(const ModelConfig& config, uint64_t rng_seed, std::vector<ParamBlock> blocks) {
  config.validate();
  const auto specs = layout(config);
  if (specs.size() != blocks.size()) {
    throw ContractError("expected " + std::to_string(specs.size()) + " parameter blocks, got " +
                        std::to_string(blocks.size()));
  }
  for (size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].id != blocks[i].id || specs[i].rows != blocks[i].values.rows() ||
        specs[i].cols != blocks[i].values.cols()) {
      throw ContractError("parameter block '" + blocks[i].id + "' does not match architecture slot '" + specs[i].id +
                          "'");
    }
    blocks[i].role = specs[i].role;
    blocks[i].decays = specs[i].decays;
  }
  ModelParams m;
  m.config_ = config;
  m.rng_seed_ = rng_seed;
  m.blocks_ = std::move(blocks);
  m.index_blocks();
  return m;
}

void ModelParams::index_blocks() {
  index_.clear();
  for (size_t i = 0; i < blocks_.size(); ++i) index_.emplace(blocks_[i].id, i);
}

const ParamBlock& ModelParams::block(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) throw ContractError("unknown parameter block '" + std::string(id) + "'");
  return blocks_[it->second];
}

Matrix& ModelParams::mutable_values(std::string_view id) {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) throw ContractError("unknown parameter block '" + std::string(id) + "'");
  ++version_;
  return blocks_[it->second].values;
}

std::string ModelParams::signature() const {
  std::ostringstream os;
  for (const auto& b : blocks_) os << b.id << ':' << b.values.rows() << 'x' << b.values.cols() << ';';
  return os.str();
}

size_t ModelParams::parameter_count() const {
  size_t n = 0;
  for (const auto& b : blocks_) n += static_cast<size_t>(b.values.size());
  return n;
}

Matrix normalize_columns(const Matrix& v, Vector* norms) {
  Vector n = v.colwise().norm().transpose().cwiseMax(kMinNorm);
  Matrix out = v.array().rowwise() / n.transpose().array();
  if (norms != nullptr) *norms = std::move(n);
  return out;
}

ForwardResult forward(const ModelParams& model, const Matrix& inputs) {
  const auto& c = model.config();
  if (inputs.rows() != c.input_dim) {
    throw ShapeError("input dimension " + std::to_string(inputs.rows()) + " does not match backbone input " +
                     std::to_string(c.input_dim));
  }
  ForwardResult out;
  Tape& tape = out.tape;
  tape.version = model.version();
  tape.signature = model.signature();
  tape.input = inputs;

  auto affine = [&](const std::string& name, const Matrix& x) -> Matrix {
    Matrix y = model.values(name + ".weight") * x;
    y.colwise() += model.values(name + ".bias").col(0);
    return y;
  };
  auto gn = [&](const std::string& name, const Matrix& x, GroupNormCache<double>* cache) -> Matrix {
    Matrix y = group_normalize(x, c.num_groups, c.gn_epsilon, cache);
    y.array().colwise() *= model.values(name + ".gamma").col(0).array();
    y.colwise() += model.values(name + ".beta").col(0);
    return y;
  };

  tape.stem_output = relu(gn("stem.gn", affine("stem.fc", inputs), &tape.stem_gn));
  require_finite(tape.stem_output, "stem");
  const Matrix* h = &tape.stem_output;
  tape.residual.resize(static_cast<size_t>(c.residual_blocks));
  for (int i = 0; i < c.residual_blocks; ++i) {
    ResidualTape& rt = tape.residual[static_cast<size_t>(i)];
    rt.input = *h;
    rt.hidden = relu(gn(bp(i) + ".gn1", affine(bp(i) + ".fc1", rt.input), &rt.gn1));
    rt.output = relu(rt.input + gn(bp(i) + ".gn2", affine(bp(i) + ".fc2", rt.hidden), &rt.gn2));
    require_finite(rt.output, bp(i));
    h = &rt.output;
  }
  tape.proj_hidden = relu(gn("proj.gn", affine("proj.fc1", *h), &tape.proj_gn));
  const Matrix raw = affine("proj.fc2", tape.proj_hidden);
  require_finite(raw, "proj");
  tape.projections = normalize_columns(raw, &tape.proj_norms);
  out.projections = tape.projections;
  out.logits = classify(model, out.projections);
  require_finite(out.logits, "cls");
  return out;
}

Matrix classify(const ModelParams& model, const Matrix& projections) {
  if (projections.rows() != model.config().projection_dim) {
    throw ShapeError("classifier expects " + std::to_string(model.config().projection_dim) + "-dimensional inputs");
  }
  Matrix y = model.values("cls.weight") * projections;
  y.colwise() += model.values("cls.bias").col(0);
  return y;
}

std::vector<int> predict(const ModelParams& model, const Matrix& inputs) {
  const Matrix logits = forward(model, inputs).logits;
  std::vector<int> labels(static_cast<size_t>(logits.cols()));
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    Eigen::Index arg = 0;
    logits.col(b).maxCoeff(&arg);
    labels[static_cast<size_t>(b)] = static_cast<int>(arg);
  }
  return labels;
}

Gradients backward(const ModelParams& model, const Tape& tape, const Upstream& upstream, RoleSet requested) {
  if (tape.version != model.version() || tape.signature != model.signature()) {
    throw ContractError("tape was recorded against a different parameter version");
  }
  const auto& c = model.config();
  const Eigen::Index batch = tape.projections.cols();
  Gradients grads;

  auto linear_grads = [&](const std::string& name, BlockRole role, const Matrix& dy, const Matrix& x) {
    if (!requested.contains(role)) return;
    grads[name + ".weight"] = dy * x.transpose();
    grads[name + ".bias"] = dy.rowwise().sum();
  };
  // Returns the gradient with respect to the normalized (pre-affine) values.
  auto norm_grads = [&](const std::string& name, BlockRole role, const Matrix& dy,
                        const GroupNormCache<double>& cache) -> Matrix {
    if (requested.contains(role)) {
      grads[name + ".gamma"] = (dy.array() * cache.normalized.array()).rowwise().sum().matrix();
      grads[name + ".beta"] = dy.rowwise().sum();
    }
    Matrix dxhat = dy.array().colwise() * model.values(name + ".gamma").col(0).array();
    return group_normalize_backward(dxhat, cache);
  };

  if (!upstream.projections && !upstream.logits) return grads;

  Matrix dz = Matrix::Zero(c.projection_dim, batch);
  if (upstream.projections) {
    if (upstream.projections->rows() != dz.rows() || upstream.projections->cols() != batch) {
      throw ShapeError("projection upstream gradient has wrong shape");
    }
    dz += *upstream.projections;
  }
  if (upstream.logits) {
    if (upstream.logits->rows() != c.num_classes || upstream.logits->cols() != batch) {
      throw ShapeError("logit upstream gradient has wrong shape");
    }
    linear_grads("cls", BlockRole::Classifier, *upstream.logits, tape.projections);
    dz += model.values("cls.weight").transpose() * *upstream.logits;
  }

  // Depth below which no requested block lives: stop there.
  const bool need_early = requested.contains(BlockRole::BackboneEarly);
  const bool need_last = need_early || requested.contains(BlockRole::BackboneLast);
  const bool need_proj = need_last || requested.contains(BlockRole::Projection);
  if (!need_proj) return grads;

  // Unit-norm Jacobian: project onto the tangent space of the sphere.
  const Matrix& z = tape.projections;
  const Eigen::RowVectorXd radial = (z.array() * dz.array()).colwise().sum();
  Matrix dv = dz - z * radial.asDiagonal();
  dv.array().rowwise() /= tape.proj_norms.transpose().array();

  linear_grads("proj.fc2", BlockRole::Projection, dv, tape.proj_hidden);
  Matrix da = relu_mask(model.values("proj.fc2.weight").transpose() * dv, tape.proj_hidden);
  Matrix du = norm_grads("proj.gn", BlockRole::Projection, da, tape.proj_gn);
  const Matrix& backbone_out = tape.residual.back().output;
  linear_grads("proj.fc1", BlockRole::Projection, du, backbone_out);
  if (!need_last) return grads;
  Matrix dh = model.values("proj.fc1.weight").transpose() * du;

  for (int i = c.residual_blocks - 1; i >= 0; --i) {
    const bool last = (i + 1 == c.residual_blocks);
    if (!last && !need_early) return grads;
    const BlockRole role = last ? BlockRole::BackboneLast : BlockRole::BackboneEarly;
    const ResidualTape& rt = tape.residual[static_cast<size_t>(i)];
    const Matrix dpre = relu_mask(dh, rt.output);
    Matrix dy2 = norm_grads(bp(i) + ".gn2", role, dpre, rt.gn2);
    linear_grads(bp(i) + ".fc2", role, dy2, rt.hidden);
    Matrix da = relu_mask(model.values(bp(i) + ".fc2.weight").transpose() * dy2, rt.hidden);
    Matrix dy1 = norm_grads(bp(i) + ".gn1", role, da, rt.gn1);
    linear_grads(bp(i) + ".fc1", role, dy1, rt.input);
    dh = dpre + model.values(bp(i) + ".fc1.weight").transpose() * dy1;
  }
  if (!need_early) return grads;

  const Matrix dstem = relu_mask(dh, tape.stem_output);
  Matrix dy = norm_grads("stem.gn", BlockRole::BackboneEarly, dstem, tape.stem_gn);
  linear_grads("stem.fc", BlockRole::BackboneEarly, dy, tape.input);
  return grads;
}

ParamSnapshot snapshot(const ModelParams& model) {
  ParamSnapshot s;
  s.signature = model.signature();
  s.values.reserve(model.blocks().size());
  for (const auto& b : model.blocks()) s.values.push_back(b.values);
  return s;
}

void restore(ModelParams& model, const ParamSnapshot& snap) {
  if (snap.signature != model.signature()) {
    throw ContractError("snapshot architecture does not match model");
  }
  auto& blocks = model.mutable_blocks();
  for (size_t i = 0; i < blocks.size(); ++i) blocks[i].values = snap.values[i];
}

PrototypeBank PrototypeBank::random(int dim, int count, uint64_t seed) {
  if (dim < 1 || count < 1) throw ConfigError("prototype bank needs positive dimension and count");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  PrototypeBank bank;
  bank.values.resize(dim, count);
  for (Eigen::Index k = 0; k < count; ++k)
    for (Eigen::Index d = 0; d < dim; ++d) bank.values(d, k) = n(rng);
  bank.renormalize();
  return bank;
}

void PrototypeBank::renormalize() { values = normalize_columns(values); }

namespace {
constexpr std::string_view kCheckpointMagic = "PALGCKPT";
constexpr uint32_t kCheckpointVersion = 1;

void write_matrix(binary::Writer& w, const Matrix& m) {
  w.u32(static_cast<uint32_t>(m.rows()));
  w.u32(static_cast<uint32_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) w.f64(m(i, j));
}

Matrix read_matrix(binary::Reader& r) {
  const uint32_t rows = r.u32();
  const uint32_t cols = r.u32();
  if (static_cast<uint64_t>(rows) * cols > (1ull << 28)) r.fail("implausible matrix shape");
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = r.f64();
  return m;
}
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  binary::Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(ckpt.variant);
  w.str(ckpt.config_hash);
  w.u64(ckpt.rng_seed);
  w.u64(ckpt.rng_draws);
  const auto& c = ckpt.model.config();
  for (int v : {c.input_dim, c.width, c.residual_blocks, c.num_groups, c.projection_hidden, c.projection_dim,
                c.num_classes}) {
    w.i32(v);
  }
  w.f64(c.gn_epsilon);
  w.u64(ckpt.model.rng_seed());
  w.u32(static_cast<uint32_t>(ckpt.model.blocks().size()));
  for (const auto& b : ckpt.model.blocks()) {
    w.str(b.id);
    write_matrix(w, b.values);
  }
  write_matrix(w, ckpt.prototypes.values);
  binary::write_file(path, w.buffer());
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto data = binary::read_file(path);
  binary::Reader r(data, "checkpoint '" + path + "'");
  if (r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) r.fail("bad magic");
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }
  std::string variant = r.str();
  std::string hash = r.str();
  const uint64_t seed = r.u64();
  const uint64_t draws = r.u64();
  ModelConfig c;
  c.input_dim = r.i32();
  c.width = r.i32();
  c.residual_blocks = r.i32();
  c.num_groups = r.i32();
  c.projection_hidden = r.i32();
  c.projection_dim = r.i32();
  c.num_classes = r.i32();
  c.gn_epsilon = r.f64();
  const uint64_t model_seed = r.u64();
  const uint32_t count = r.u32();
  if (count > 4096) r.fail("implausible block count");
  std::vector<ParamBlock> blocks;
  for (uint32_t i = 0; i < count; ++i) {
    ParamBlock b;
    b.id = r.str();
    b.values = read_matrix(r);
    blocks.push_back(std::move(b));
  }
  PrototypeBank bank{read_matrix(r)};
  if (!r.at_end()) r.fail("trailing bytes");
  ModelParams model = [&] {
    try {
      return ModelParams::from_blocks(c, model_seed, std::move(blocks));
    } catch (const Error& e) {
      throw FormatError("checkpoint '" + path + "': " + e.what());
    }
  }();
  if (bank.dim() != c.projection_dim) throw FormatError("checkpoint '" + path + "': prototype dimension mismatch");
  return Checkpoint{std::move(model), std::move(bank), std::move(variant), std::move(hash), seed, draws};
}

}  // namespace protoalign
