#include "protoalign/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "protoalign/errors.hpp"

namespace protoalign {

namespace pt = boost::property_tree;

namespace {

template <typename T>
std::string join(const std::vector<T>& xs, auto&& fmt) {
  std::string s;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    s += fmt(xs[i]);
  }
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

class Section {
 public:
  Section(const pt::ptree& root, const std::string& name) : name_(name) {
    if (auto child = root.get_child_optional(name)) tree_ = *child;
    for (const auto& [key, _] : tree_) unused_.insert(key);
  }

  template <typename T>
  void read(const std::string& key, T& value) {
    auto v = tree_.get_optional<std::string>(key);
    if (!v) return;
    unused_.erase(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (*v == "true" || *v == "1") value = true;
        else if (*v == "false" || *v == "0") value = false;
        else throw std::invalid_argument(*v);
      } else if constexpr (std::is_same_v<T, std::string>) {
        value = *v;
      } else if constexpr (std::is_floating_point_v<T>) {
        size_t used = 0;
        value = static_cast<T>(std::stod(*v, &used));
        if (used != v->size()) throw std::invalid_argument(*v);
      } else {
        size_t used = 0;
        const long long parsed = std::stoll(*v, &used);
        if (used != v->size()) throw std::invalid_argument(*v);
        value = static_cast<T>(parsed);
      }
    } catch (const std::exception&) {
      throw ConfigError("[" + name_ + "] " + key + ": cannot parse '" + *v + "'");
    }
  }

  bool read_raw(const std::string& key, std::string& raw) {
    auto v = tree_.get_optional<std::string>(key);
    if (!v) return false;
    unused_.erase(key);
    raw = *v;
    return true;
  }

  void finish() const {
    if (!unused_.empty()) throw ConfigError("[" + name_ + "] unknown key '" + *unused_.begin() + "'");
  }

 private:
  std::string name_;
  pt::ptree tree_;
  std::set<std::string> unused_;
};

template <typename T>
std::vector<T> parse_ints(const std::string& section, const std::string& key, const std::string& raw) {
  std::vector<T> out;
  for (const auto& item : split_list(raw)) {
    try {
      size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<T>(v));
    } catch (const std::exception&) {
      throw ConfigError("[" + section + "] " + key + ": cannot parse list item '" + item + "'");
    }
  }
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  model_config().validate();
  train.validate();
  augment.validate();
  adapt.validate();
  if (!(baseline_lr > 0.0)) throw ConfigError("baseline_lr must be positive");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (data.samples_per_class < 1) throw ConfigError("samples_per_class must be positive");
  if (data.difficulty < 0.0 || data.difficulty > 1.0) throw ConfigError("difficulty must lie in [0, 1]");
  for (int s : sweep.severities) CorruptionSpec{CorruptionKind::GaussianNoise, s, 0}.validate();
  if (sweep.prototype_counts.empty()) throw ConfigError("at least one prototype count is required");
  for (int k : sweep.prototype_counts) {
    if (k < 1) throw ConfigError("prototype counts must be positive");
  }
  if (sweep.test_limit < 0) throw ConfigError("test_limit must be >= 0");
  if (threads < 0) throw ConfigError("threads must be >= 0");
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m = model;
  m.input_dim = data.shape.size();
  m.num_classes = data.num_classes;
  return m;
}

TrainConfig ExperimentConfig::train_config(Variant variant, int num_prototypes, uint64_t seed) const {
  TrainConfig t = train;
  t.variant = variant;
  t.num_prototypes = num_prototypes;
  t.seed = seed;
  if (variant == Variant::Baseline) t.base_lr = baseline_lr;
  return t;
}

std::string ExperimentConfig::dataset_path() const {
  return data.path.empty() ? out_dir + "/dataset.bin" : data.path;
}

std::string ExperimentConfig::to_ini() const {
  std::ostringstream os;
  os << "[data]\n"
     << "num_classes=" << data.num_classes << "\nsamples_per_class=" << data.samples_per_class
     << "\nchannels=" << data.shape.channels << "\nheight=" << data.shape.height << "\nwidth=" << data.shape.width
     << "\ndifficulty=" << num(data.difficulty) << "\nseed=" << data.seed << "\npath=" << data.path << "\n\n";
  os << "[model]\n"
     << "width=" << model.width << "\nresidual_blocks=" << model.residual_blocks << "\nnum_groups=" << model.num_groups
     << "\nprojection_hidden=" << model.projection_hidden << "\nprojection_dim=" << model.projection_dim
     << "\ngn_epsilon=" << num(model.gn_epsilon) << "\n\n";
  os << "[train]\n"
     << "epochs=" << train.epochs << "\nbatch_size=" << train.batch_size << "\nbase_lr=" << num(train.base_lr)
     << "\nbaseline_lr=" << num(baseline_lr) << "\nfinal_lr=" << num(train.final_lr)
     << "\nwarmup_epochs=" << train.warmup_epochs << "\nmomentum=" << num(train.momentum)
     << "\nweight_decay=" << num(train.weight_decay) << "\ngrad_clip=" << num(train.grad_clip) << "\ntau=" << num(train.temps.tau)
     << "\nepsilon=" << num(train.temps.epsilon) << "\ngamma1=" << num(train.gamma1)
     << "\ngamma2=" << num(train.gamma2) << "\nsinkhorn_iterations=" << train.sinkhorn_iterations
     << "\nprototype_momentum=" << (train.prototype_momentum ? "true" : "false") << "\n\n";
  os << "[augment]\n"
     << "crop_scale_min=" << num(augment.crop_scale_min) << "\ncrop_scale_max=" << num(augment.crop_scale_max)
     << "\njitter_strength=" << num(augment.jitter_strength) << "\nblur_sigma_min=" << num(augment.blur_sigma_min)
     << "\nblur_sigma_max=" << num(augment.blur_sigma_max) << "\nseed=" << augment.seed << "\n\n";
  os << "[adapt]\n"
     << "batch_repeats=" << adapt.batch_repeats << "\nsteps=" << adapt.steps << "\nalpha=" << num(adapt.alpha)
     << "\ntau=" << num(adapt.temps.tau) << "\nepsilon=" << num(adapt.temps.epsilon)
     << "\nscope=" << to_string(adapt.scope) << "\nseed=" << adapt.seed << "\n\n";
  os << "[experiment]\n"
     << "out_dir=" << out_dir << "\nseeds=" << join(seeds, [](uint64_t s) { return std::to_string(s); })
     << "\ncorruptions=" << join(sweep.corruptions, [](CorruptionKind k) { return to_string(k); })
     << "\nseverities=" << join(sweep.severities, [](int s) { return std::to_string(s); })
     << "\nprototypes=" << join(sweep.prototype_counts, [](int k) { return std::to_string(k); })
     << "\ncorruption_seed=" << sweep.corruption_seed << "\ntest_limit=" << sweep.test_limit << "\n";
  return os.str();
}

std::string ExperimentConfig::hash() const {
  // Output locations do not change results, so they stay out of the hash.
  ExperimentConfig canonical = *this;
  canonical.out_dir.clear();
  canonical.data.path.clear();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical.to_ini()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

ExperimentConfig parse_config(const std::string& ini_text) {
  pt::ptree root;
  try {
    std::istringstream in(ini_text);
    pt::read_ini(in, root);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  static const std::set<std::string> kSections = {"data", "model", "train", "augment", "adapt", "experiment"};
  for (const auto& [name, _] : root) {
    if (!kSections.count(name)) throw ConfigError("unknown config section [" + name + "]");
  }

  ExperimentConfig c;
  Section data(root, "data");
  data.read("num_classes", c.data.num_classes);
  data.read("samples_per_class", c.data.samples_per_class);
  data.read("channels", c.data.shape.channels);
  data.read("height", c.data.shape.height);
  data.read("width", c.data.shape.width);
  data.read("difficulty", c.data.difficulty);
  data.read("seed", c.data.seed);
  data.read("path", c.data.path);
  data.finish();

  Section model(root, "model");
  model.read("width", c.model.width);
  model.read("residual_blocks", c.model.residual_blocks);
  model.read("num_groups", c.model.num_groups);
  model.read("projection_hidden", c.model.projection_hidden);
  model.read("projection_dim", c.model.projection_dim);
  model.read("gn_epsilon", c.model.gn_epsilon);
  model.finish();

  Section train(root, "train");
  train.read("epochs", c.train.epochs);
  train.read("batch_size", c.train.batch_size);
  train.read("base_lr", c.train.base_lr);
  train.read("baseline_lr", c.baseline_lr);
  train.read("final_lr", c.train.final_lr);
  train.read("warmup_epochs", c.train.warmup_epochs);
  train.read("momentum", c.train.momentum);
  train.read("weight_decay", c.train.weight_decay);
  train.read("grad_clip", c.train.grad_clip);
  train.read("tau", c.train.temps.tau);
  train.read("epsilon", c.train.temps.epsilon);
  train.read("gamma1", c.train.gamma1);
  train.read("gamma2", c.train.gamma2);
  train.read("sinkhorn_iterations", c.train.sinkhorn_iterations);
  train.read("prototype_momentum", c.train.prototype_momentum);
  train.finish();

  Section augment(root, "augment");
  augment.read("crop_scale_min", c.augment.crop_scale_min);
  augment.read("crop_scale_max", c.augment.crop_scale_max);
  augment.read("jitter_strength", c.augment.jitter_strength);
  augment.read("blur_sigma_min", c.augment.blur_sigma_min);
  augment.read("blur_sigma_max", c.augment.blur_sigma_max);
  augment.read("seed", c.augment.seed);
  augment.finish();

  Section adapt(root, "adapt");
  adapt.read("batch_repeats", c.adapt.batch_repeats);
  adapt.read("steps", c.adapt.steps);
  adapt.read("alpha", c.adapt.alpha);
  adapt.read("tau", c.adapt.temps.tau);
  adapt.read("epsilon", c.adapt.temps.epsilon);
  std::string raw;
  if (adapt.read_raw("scope", raw)) c.adapt.scope = parse_scope(raw);
  adapt.read("seed", c.adapt.seed);
  adapt.finish();

  Section exp(root, "experiment");
  exp.read("out_dir", c.out_dir);
  exp.read("threads", c.threads);
  if (exp.read_raw("seeds", raw)) c.seeds = parse_ints<uint64_t>("experiment", "seeds", raw);
  if (exp.read_raw("corruptions", raw)) {
    c.sweep.corruptions.clear();
    for (const auto& item : split_list(raw)) c.sweep.corruptions.push_back(parse_corruption(item));
  }
  if (exp.read_raw("severities", raw)) c.sweep.severities = parse_ints<int>("experiment", "severities", raw);
  if (exp.read_raw("prototypes", raw)) c.sweep.prototype_counts = parse_ints<int>("experiment", "prototypes", raw);
  exp.read("corruption_seed", c.sweep.corruption_seed);
  exp.read("test_limit", c.sweep.test_limit);
  exp.finish();

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace protoalign
