#include "sidlab_cli/config.hpp"

#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <utility>
#include <vector>

namespace sidlab::cli {

namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

const char* type_name(const json& v) { return v.type_name(); }

template <typename T>
T convert(const json& v, const std::string& path);

template <>
bool convert<bool>(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean, got " + type_name(v));
  return v.get<bool>();
}

template <>
long long convert<long long>(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) {
    const auto u = v.get<std::uint64_t>();
    if (u > static_cast<std::uint64_t>(std::numeric_limits<long long>::max())) {
      throw ConfigError(path + ": integer out of range");
    }
    return static_cast<long long>(u);
  }
  if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer, got " + type_name(v));
  return v.get<long long>();
}

template <>
int convert<int>(const json& v, const std::string& path) {
  const long long x = convert<long long>(v, path);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    throw ConfigError(path + ": integer out of range");
  }
  return static_cast<int>(x);
}

template <>
std::uint64_t convert<std::uint64_t>(const json& v, const std::string& path) {
  if (!v.is_number_unsigned()) {
    throw ConfigError(path + ": expected a non-negative integer, got " + v.dump());
  }
  return v.get<std::uint64_t>();
}

template <>
double convert<double>(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path + ": expected a number, got " + type_name(v));
  return v.get<double>();
}

template <>
std::string convert<std::string>(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path + ": expected a string, got " + type_name(v));
  return v.get<std::string>();
}

template <>
std::vector<int> convert<std::vector<int>>(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path + ": expected an array, got " + type_name(v));
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(convert<int>(v[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

template <>
std::vector<double> convert<std::vector<double>>(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path + ": expected an array, got " + type_name(v));
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(convert<double>(v[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

// Reads keys from one JSON object and rejects whatever was not read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError((path_.empty() ? std::string("config") : path_) +
                        ": expected an object, got " + type_name(j_));
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string path(const std::string& key) const { return join(path_, key); }

  template <typename T>
  void read(const std::string& key, T& target) {
    seen_.insert(key);
    if (j_.contains(key)) target = convert<T>(j_.at(key), path(key));
  }

  template <typename T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(path(key) + ": required field is missing");
    return convert<T>(j_.at(key), path(key));
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(path(key) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Domain checks of the library types report through their own exceptions;
// re-raise them as config errors.
template <typename F>
void validated(const std::string& path, F&& check) {
  try {
    check();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

Vec2 read_vec2(const json& v, const std::string& path) {
  const auto xs = convert<std::vector<double>>(v, path);
  if (xs.size() != 2) throw ConfigError(path + ": expected 2 numbers");
  return {xs[0], xs[1]};
}

Sym2 read_cov(const json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 2) throw ConfigError(path + ": expected a 2x2 matrix");
  const Vec2 r0 = read_vec2(v[0], path + "[0]");
  const Vec2 r1 = read_vec2(v[1], path + "[1]");
  if (r0.y != r1.x) throw ConfigError(path + ": covariance must be symmetric");
  return {r0.x, r0.y, r1.y};
}

ConditionalMixture parse_mixture(const json& j) {
  const std::string path = "mixture";
  Section s(j, path);
  if (s.has("preset")) {
    const auto preset = s.require<std::string>("preset");
    ConditionalMixture mix = ConditionalMixture::rings();
    if (preset == "rings") {
      int num_classes = 4;
      double inner = 2.0;
      double outer = 4.0;
      double variance = 0.15;
      s.read("num_classes", num_classes);
      s.read("inner_radius", inner);
      s.read("outer_radius", outer);
      s.read("variance", variance);
      s.finish();
      validated(path, [&] { mix = ConditionalMixture::rings(num_classes, inner, outer, variance); });
    } else if (preset == "single_gaussian") {
      const json* mean = s.child("mean");
      const json* cov = s.child("cov");
      s.finish();
      Vec2 m{0.0, 0.0};
      Sym2 c{1.0, 0.0, 1.0};
      if (mean) m = read_vec2(*mean, s.path("mean"));
      if (cov) c = read_cov(*cov, s.path("cov"));
      validated(path, [&] { mix = ConditionalMixture::single_gaussian(m, c); });
    } else {
      throw ConfigError(s.path("preset") + ": unknown mixture preset '" + preset +
                        "' (expected rings or single_gaussian)");
    }
    return mix;
  }

  const json* classes = s.child("classes");
  const json* prior_json = s.child("prior");
  s.finish();
  if (!classes) throw ConfigError(s.path("classes") + ": required field is missing");
  if (!classes->is_array()) throw ConfigError(s.path("classes") + ": expected an array");
  std::vector<std::vector<Component>> comps_by_class;
  for (std::size_t ci = 0; ci < classes->size(); ++ci) {
    const std::string cpath = s.path("classes") + "[" + std::to_string(ci) + "]";
    Section cs((*classes)[ci], cpath);
    const json* comps = cs.child("components");
    cs.finish();
    if (!comps) throw ConfigError(cpath + ".components: required field is missing");
    if (!comps->is_array()) throw ConfigError(cpath + ".components: expected an array");
    std::vector<Component> list;
    for (std::size_t k = 0; k < comps->size(); ++k) {
      const std::string kpath = cpath + ".components[" + std::to_string(k) + "]";
      Section ks((*comps)[k], kpath);
      double weight = 1.0;
      ks.read("weight", weight);
      const json* mean = ks.child("mean");
      const json* cov = ks.child("cov");
      ks.finish();
      if (!mean) throw ConfigError(kpath + ".mean: required field is missing");
      if (!cov) throw ConfigError(kpath + ".cov: required field is missing");
      list.push_back({weight, read_vec2(*mean, kpath + ".mean"), read_cov(*cov, kpath + ".cov")});
    }
    comps_by_class.push_back(std::move(list));
  }
  std::vector<double> prior;
  if (prior_json) prior = convert<std::vector<double>>(*prior_json, s.path("prior"));
  ConditionalMixture mix = ConditionalMixture::rings();
  validated(path, [&] { mix = ConditionalMixture(std::move(comps_by_class), std::move(prior)); });
  return mix;
}

DiffusionSchedule parse_schedule(const json& j) {
  Section s(j, "schedule");
  int steps = 1000;
  double beta_1 = 1e-4;
  double beta_T = 0.02;
  std::string kind = "linear";
  s.read("kind", kind);
  if (kind != "linear") throw ConfigError(s.path("kind") + ": only \"linear\" is supported");
  s.read("T", steps);
  s.read("beta_1", beta_1);
  s.read("beta_T", beta_T);
  s.finish();
  DiffusionSchedule sched = DiffusionSchedule::linear(1000, 1e-4, 0.02);
  validated("schedule", [&] { sched = DiffusionSchedule::linear(steps, beta_1, beta_T); });
  return sched;
}

NetworkSpec parse_network(const json& j) {
  Section s(j, "network");
  NetworkSpec spec;
  s.read("hidden", spec.hidden);
  s.read("time_embed_dim", spec.time_embed_dim);
  s.read("sigma_data", spec.sigma_data);
  s.finish();
  return spec;
}

TeacherConfig parse_teacher(const json& j) {
  Section s(j, "teacher");
  TeacherConfig t;
  s.read("train_pairs", t.train_pairs);
  s.read("batch_size", t.batch_size);
  s.read("learning_rate", t.learning_rate);
  std::string lr_schedule = to_string(t.lr_schedule);
  s.read("lr_schedule", lr_schedule);
  s.read("cond_dropout", t.cond_dropout);
  s.read("log_every_pairs", t.log_every_pairs);
  s.finish();
  validated(s.path("lr_schedule"), [&] { t.lr_schedule = parse_lr_schedule(lr_schedule); });
  return t;
}

GuidanceStrategy parse_guidance(const json& j, double& kappa) {
  const std::string path = "distill.guidance";
  Section s(j, path);
  std::string preset = "lsg";
  s.read("preset", preset);
  s.read("kappa", kappa);
  std::optional<double> k[4];
  const char* names[4] = {"kappa1", "kappa2", "kappa3", "kappa4"};
  for (int i = 0; i < 4; ++i) {
    if (const json* v = s.child(names[i])) k[i] = convert<double>(*v, s.path(names[i]));
  }
  bool theta_only = false;
  s.read("kappa1_theta_only", theta_only);
  s.finish();

  GuidanceStrategy g;
  if (preset == "custom") {
    g = GuidanceStrategy::custom(k[0].value_or(1.0), k[1].value_or(1.0), k[2].value_or(1.0),
                                 k[3].value_or(1.0));
  } else {
    validated(s.path("preset"), [&] { g = GuidanceStrategy::from_preset(preset, kappa); });
    const double expected[4] = {g.kappa1, g.kappa2, g.kappa3, g.kappa4};
    for (int i = 0; i < 4; ++i) {
      if (k[i] && *k[i] != expected[i]) {
        std::ostringstream msg;
        msg << s.path(names[i]) << ": preset '" << preset << "' fixes this scale to "
            << expected[i] << " (use preset \"custom\" for free scales)";
        throw ConfigError(msg.str());
      }
    }
  }
  g.kappa1_theta_only = theta_only;
  validated(path, [&] { g.validate(); });
  return g;
}

DistillConfig parse_distill(const json& j, double& kappa) {
  Section s(j, "distill");
  DistillConfig d;
  s.read("K", d.K);
  std::string matching = to_string(d.matching);
  s.read("matching", matching);
  validated(s.path("matching"), [&] { d.matching = parse_matching(matching); });
  if (const json* g = s.child("guidance")) {
    d.guidance = parse_guidance(*g, kappa);
  } else {
    d.guidance = GuidanceStrategy::lsg(kappa);
  }
  s.read("lambda_sid", d.lambda_sid);
  s.read("lambda_adv_psi", d.lambda_adv_psi);
  s.read("lambda_adv_theta", d.lambda_adv_theta);
  s.read("data_enhanced", d.data_enhanced);
  s.read("real_pairs", d.real_pairs);
  s.read("warmup_images", d.warmup_images);
  s.read("b_switch_images", d.b_switch_images);
  s.read("t_min", d.time.t_min);
  s.read("t_init", d.time.t_init);
  s.read("t_max", d.time.t_max);
  s.read("lr_psi", d.lr_psi);
  s.read("lr_theta", d.lr_theta);
  s.read("batch_size", d.batch_size);
  s.read("ema_half_life_images", d.ema_half_life_images);
  s.read("budget_images", d.budget_images);
  s.read("init_generator", d.init_generator);
  s.finish();
  return d;
}

EvalConfig parse_eval(const json& j) {
  Section s(j, "eval");
  EvalConfig e;
  s.read("every_images", e.every_images);
  s.read("num_samples", e.num_samples);
  s.read("fisher_samples", e.fisher_samples);
  s.read("fisher_t_set", e.fisher_t_set);
  s.read("wall_clock", e.wall_clock);
  s.finish();
  return e;
}

json parse_matrix(const json& j) {
  if (!j.is_object()) throw ConfigError("matrix: expected an object of dotted path -> values");
  for (const auto& [key, values] : j.items()) {
    if (key.empty() || key == "matrix" || key.starts_with("matrix.")) {
      throw ConfigError("matrix." + key + ": invalid axis");
    }
    if (!values.is_array() || values.empty()) {
      throw ConfigError("matrix." + key + ": expected a non-empty array of values");
    }
  }
  return j;
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  Section root(doc, "");
  RunConfig cfg;
  const json* mixture = root.child("mixture");
  if (!mixture) throw ConfigError("mixture: required field is missing");
  cfg.mixture = parse_mixture(*mixture);
  if (const json* j = root.child("schedule")) cfg.schedule = parse_schedule(*j);
  if (const json* j = root.child("network")) cfg.network = parse_network(*j);
  cfg.network.data_dim = 2;
  cfg.network.num_classes = cfg.mixture.num_classes();
  validated("network", [&] { cfg.network.validate(); });
  if (const json* j = root.child("teacher")) cfg.teacher = parse_teacher(*j);
  if (const json* j = root.child("distill")) {
    cfg.distill = parse_distill(*j, cfg.guidance_kappa);
  } else {
    cfg.distill.guidance = GuidanceStrategy::lsg(cfg.guidance_kappa);
  }
  if (const json* j = root.child("eval")) cfg.eval = parse_eval(*j);
  if (const json* j = root.child("output_dir")) {
    cfg.output_dir = convert<std::string>(*j, "output_dir");
  }
  root.read("seed", cfg.seed);
  if (const json* j = root.child("matrix")) cfg.matrix = parse_matrix(*j);
  root.finish();

  cfg.teacher.seed = cfg.seed;
  cfg.distill.seed = cfg.seed;
  validated("teacher", [&] { cfg.teacher.validate(); });
  validated("distill", [&] { cfg.distill.validate(cfg.schedule.steps()); });
  validated("eval", [&] { cfg.eval.validate(cfg.schedule.steps()); });
  return cfg;
}

json RunConfig::to_json() const {
  json teacher_json = {{"train_pairs", teacher.train_pairs},
                       {"batch_size", teacher.batch_size},
                       {"learning_rate", teacher.learning_rate},
                       {"lr_schedule", to_string(teacher.lr_schedule)},
                       {"cond_dropout", teacher.cond_dropout},
                       {"log_every_pairs", teacher.log_every_pairs}};
  json distill_json = distill.to_json();
  distill_json.erase("seed");
  json& g = distill_json["guidance"];
  if (distill.guidance.preset == "lsg" || distill.guidance.preset == "cfg") {
    g["kappa"] = guidance_kappa;
  }
  json network_json = {{"hidden", network.hidden},
                       {"time_embed_dim", network.time_embed_dim},
                       {"sigma_data", network.sigma_data}};
  json out = {{"mixture", mixture.to_json()},
              {"schedule", schedule_to_json(schedule)},
              {"network", network_json},
              {"teacher", teacher_json},
              {"distill", distill_json},
              {"eval", eval.to_json()},
              {"seed", seed}};
  if (output_dir) out["output_dir"] = *output_dir;
  if (!matrix.is_null()) out["matrix"] = matrix;
  return out;
}

json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(load_json(path));
}

std::filesystem::path resolve_output_dir(const RunConfig& cfg, const std::string& command,
                                         const std::optional<std::string>& override_dir) {
  if (override_dir) return *override_dir;
  if (cfg.output_dir) return *cfg.output_dir;
  const char* root = std::getenv(kOutputRootEnv);
  const std::filesystem::path base = (root && *root) ? root : "runs";
  return base / (command + "-seed" + std::to_string(cfg.seed));
}

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& output_dir) {
  std::filesystem::create_directories(output_dir);
  RunConfig echoed = cfg;
  echoed.output_dir = output_dir.string();
  std::ofstream out(output_dir / kResolvedConfigName, std::ios::trunc);
  out << echoed.to_json().dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + (output_dir / kResolvedConfigName).string());
}

void set_dotted(json& doc, const std::string& path, const json& value) {
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("matrix." + path + ": empty path segment");
    if (!node->is_object()) throw ConfigError("matrix." + path + ": path crosses a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

}  // namespace sidlab::cli
