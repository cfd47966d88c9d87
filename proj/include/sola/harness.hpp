#pragma once

// Run management: configuration, training loops (supervised and weakly
// supervised), evaluation, Grad-CAM export, filter-evolution dumps and
// ground-truth export.

#include <algorithm>
#include <chrono>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sola/checkpoint.hpp"
#include "sola/data.hpp"
#include "sola/gradcam.hpp"
#include "sola/metrics.hpp"
#include "sola/model.hpp"
#include "sola/optim.hpp"
#include "sola/supervision.hpp"

namespace sola {

inline constexpr const char* kCodeVersion = "0.1.0";
inline constexpr const char* kEnvPrefix = "SOLA_";

using json = nlohmann::json;

enum class TrainMode { sup, weakly_sup };

inline std::string to_string(TrainMode m) { return m == TrainMode::sup ? "sup" : "weakly-sup"; }
inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "sup") return TrainMode::sup;
  if (s == "weakly-sup" || s == "weak") return TrainMode::weakly_sup;
  throw ConfigError("unknown mode '" + s + "' (expected sup|weakly-sup)");
}

inline json to_json(const BackboneSpec& s) {
  return {{"family", to_string(s.family)}, {"stages_used", s.stages_used}, {"widths", s.widths},
          {"grid", s.grid}, {"input_size", s.input_size}};
}
inline BackboneSpec backbone_spec_from_json(const json& j) {
  BackboneSpec s;
  s.family = backbone_family_from_string(j.at("family").get<std::string>());
  s.stages_used = j.at("stages_used").get<int>();
  s.widths = j.at("widths").get<std::vector<int>>();
  s.grid = j.at("grid").get<int>();
  s.input_size = j.at("input_size").get<int>();
  return s;
}
inline json to_json(const ModelFlags& f) {
  return {{"use_noise_branch", f.use_noise_branch}, {"use_lem", f.use_lem},
          {"constraint_mode", to_string(f.constraint)}, {"lem_stages", f.lem_stages},
          {"noise_consumes_fused", f.noise_consumes_fused}, {"head", to_string(f.head)}};
}
inline ModelFlags model_flags_from_json(const json& j) {
  ModelFlags f;
  f.use_noise_branch = j.at("use_noise_branch").get<bool>();
  f.use_lem = j.at("use_lem").get<bool>();
  f.constraint = constraint_mode_from_string(j.at("constraint_mode").get<std::string>());
  f.lem_stages = j.at("lem_stages").get<std::vector<int>>();
  f.noise_consumes_fused = j.at("noise_consumes_fused").get<bool>();
  f.head = head_kind_from_string(j.at("head").get<std::string>());
  return f;
}

/// Everything a training run depends on. Serialised as a flat JSON object so
/// that every key can be overridden from the environment as SOLA_<KEY>.
struct RunConfig {
  TrainMode mode = TrainMode::weakly_sup;
  AdamOptions adam;
  int batch_size = 32;
  int epochs = 20;
  long long max_steps = 0;  // 0: no limit
  LossWeights weights;
  std::string backbone = "tiny-cnn";
  int stages_used = 0;  // 0: the family default
  int grid = 16;
  ModelFlags flags;
  std::string train_dir, test_dir, out_dir = "run";
  std::uint64_t seed = 0;
  bool dump_filters = false;  // save ASRM weights at init and after every epoch
  int log_every = 10;         // steps between step records; 0 disables them
  double stop_at_auc = 0;     // stop after the first epoch whose selection AUC reaches this; 0 disables
  // beta and gamma are held at 0 for this many epochs (classification only).
  int anomaly_delay_epochs = 0;

  BackboneSpec backbone_spec() const {
    BackboneSpec s = backbone_family_from_string(backbone) == BackboneFamily::tiny ? BackboneSpec::tiny()
                                                                                   : BackboneSpec::resnet18();
    if (stages_used > 0) s.stages_used = stages_used;
    s.grid = grid;
    return s;
  }

  json to_json() const {
    return {{"mode", to_string(mode)},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"eps", adam.eps},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"max_steps", max_steps},
            {"alpha", weights.alpha},
            {"beta", weights.beta},
            {"gamma", weights.gamma},
            {"backbone", backbone},
            {"stages_used", stages_used},
            {"grid", grid},
            {"use_noise_branch", flags.use_noise_branch},
            {"use_lem", flags.use_lem},
            {"constraint_mode", sola::to_string(flags.constraint)},
            {"lem_stages", flags.lem_stages},
            {"noise_consumes_fused", flags.noise_consumes_fused},
            {"head", sola::to_string(flags.head)},
            {"train_dir", train_dir},
            {"test_dir", test_dir},
            {"out_dir", out_dir},
            {"seed", seed},
            {"dump_filters", dump_filters},
            {"log_every", log_every},
            {"stop_at_auc", stop_at_auc},
            {"anomaly_delay_epochs", anomaly_delay_epochs}};
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    const json defaults = c.to_json();
    for (const auto& [k, v] : j.items())
      if (!defaults.contains(k)) throw ConfigError("unknown config key '" + k + "'");
    json m = defaults;
    m.update(j);
    try {
      c.mode = train_mode_from_string(m["mode"].get<std::string>());
      c.adam.lr = m["lr"].get<double>();
      c.adam.beta1 = m["beta1"].get<double>();
      c.adam.beta2 = m["beta2"].get<double>();
      c.adam.eps = m["eps"].get<double>();
      c.batch_size = m["batch_size"].get<int>();
      c.epochs = m["epochs"].get<int>();
      c.max_steps = m["max_steps"].get<long long>();
      c.weights = {m["alpha"].get<double>(), m["beta"].get<double>(), m["gamma"].get<double>()};
      c.backbone = m["backbone"].get<std::string>();
      c.stages_used = m["stages_used"].get<int>();
      c.grid = m["grid"].get<int>();
      c.flags.use_noise_branch = m["use_noise_branch"].get<bool>();
      c.flags.use_lem = m["use_lem"].get<bool>();
      c.flags.constraint = constraint_mode_from_string(m["constraint_mode"].get<std::string>());
      c.flags.lem_stages = m["lem_stages"].get<std::vector<int>>();
      c.flags.noise_consumes_fused = m["noise_consumes_fused"].get<bool>();
      c.flags.head = head_kind_from_string(m["head"].get<std::string>());
      c.train_dir = m["train_dir"].get<std::string>();
      c.test_dir = m["test_dir"].get<std::string>();
      c.out_dir = m["out_dir"].get<std::string>();
      c.seed = m["seed"].get<std::uint64_t>();
      c.dump_filters = m["dump_filters"].get<bool>();
      c.log_every = m["log_every"].get<int>();
      c.stop_at_auc = m["stop_at_auc"].get<double>();
      c.anomaly_delay_epochs = m["anomaly_delay_epochs"].get<int>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
  }

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (anomaly_delay_epochs < 0) throw ConfigError("anomaly_delay_epochs must be >= 0");
    if (!(adam.lr > 0)) throw ConfigError("lr must be positive");
    backbone_spec().validate();
  }

  /// FNV-1a over the canonical (key-sorted) JSON, as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : to_json().dump()) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }
};

/// Applies SOLA_<KEY> environment variables on top of a JSON config. Values
/// are parsed according to the type of the key's default.
inline json apply_env_overrides(json j, const std::function<const char*(const char*)>& getenv_fn = std::getenv) {
  const json defaults = RunConfig{}.to_json();
  for (const auto& [key, def] : defaults.items()) {
    std::string var = kEnvPrefix;
    for (char ch : key) var += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    const char* raw = getenv_fn(var.c_str());
    if (!raw) continue;
    const std::string v = raw;
    try {
      if (def.is_string()) {
        j[key] = v;
      } else if (def.is_boolean()) {
        if (v == "1" || v == "true") j[key] = true;
        else if (v == "0" || v == "false") j[key] = false;
        else throw ConfigError(var + ": expected true/false/1/0, got '" + v + "'");
      } else {
        j[key] = json::parse(v);
      }
    } catch (const json::exception&) {
      throw ConfigError(var + ": cannot parse '" + v + "'");
    }
  }
  return j;
}

inline RunConfig load_run_config(const std::string& path, bool use_env = true) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config '" + path + "' must hold a JSON object");
  }
  if (use_env) j = apply_env_overrides(std::move(j));
  return RunConfig::from_json(j);
}

using Model = SolaModel<float>;

/// Writes `<path>` (weights) and `<path>.json` (backbone spec, flags, code
/// version and the run config).
inline void save_checkpoint(const std::string& path, Model& model, const RunConfig& config) {
  save_weights(path, model.params());
  json side{{"backbone", to_json(model.spec())}, {"flags", to_json(model.flags())}, {"code_version", kCodeVersion},
            {"config", config.to_json()}, {"config_hash", config.hash()}};
  std::ofstream out(path + ".json");
  if (!out) throw LoadError("cannot write checkpoint sidecar '" + path + ".json'");
  out << side.dump(2) << "\n";
}

struct LoadedModel {
  std::unique_ptr<Model> model;
  RunConfig config;
  std::string config_hash;
};

inline LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in) throw LoadError("checkpoint sidecar '" + path + ".json' not found");
  json side;
  try {
    side = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("checkpoint sidecar '" + path + ".json' is corrupt: " + e.what());
  }
  LoadedModel out;
  try {
    out.model = std::make_unique<Model>(backbone_spec_from_json(side.at("backbone")),
                                        model_flags_from_json(side.at("flags")));
    out.config = RunConfig::from_json(side.at("config"));
    out.config_hash = side.value("config_hash", "");
  } catch (const json::exception& e) {
    throw LoadError("checkpoint sidecar '" + path + ".json' is incomplete: " + e.what());
  }
  load_weights(path, out.model->params());
  out.model->set_training(false);
  return out;
}

inline double sigmoid_score(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Per-image anomaly magnitude: sum over groups of the mean |M| and mean |M'|
/// on valid positions (the single-side penalty an image would receive if real).
template <typename T>
std::vector<double> anomaly_magnitudes(const AnomalyMaps<T>& maps) {
  const int n = maps.first[0].n(), h = maps.first[0].h(), w = maps.first[0].w();
  std::vector<double> out(n, 0.0);
  for (Group g : kGroups) {
    const int k = static_cast<int>(g);
    for (const Tensor<T>* t : {&maps.first[k], &maps.second[k]}) {
      for (int b = 0; b < n; ++b) {
        double sum = 0;
        std::size_t count = 0;
        for (int c = 0; c < t->c(); ++c)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              if (has_neighbour(g, i, j)) {
                sum += std::abs(double((*t)(b, c, i, j)));
                ++count;
              }
        if (count) out[b] += sum / count;
      }
    }
  }
  return out;
}

struct EvalReport {
  std::vector<double> scores;  // sigmoid(logit)
  std::vector<int> labels;
  std::vector<std::string> files;
  std::vector<double> anomaly;  // per-image magnitude, empty for the plain head
  double auc = 0, accuracy = 0;
  double mean_anomaly_real = 0, mean_anomaly_fake = 0;
  json meta = json::object();

  json to_json(bool per_image = true) const {
    json j{{"auc", auc}, {"accuracy", accuracy}, {"n", labels.size()},
           {"n_fake", std::count(labels.begin(), labels.end(), 1)},
           {"mean_anomaly_real", mean_anomaly_real}, {"mean_anomaly_fake", mean_anomaly_fake}, {"meta", meta}};
    if (per_image) {
      j["scores"] = scores;
      j["labels"] = labels;
      j["files"] = files;
      if (!anomaly.empty()) j["anomaly"] = anomaly;
    }
    return j;
  }
};

/// Scores every sample in evaluation mode; the model's training flag is
/// restored afterwards and no parameter or statistic is modified.
inline EvalReport evaluate(Model& model, const std::vector<data::Sample>& samples, int batch_size = 32) {
  if (samples.empty()) throw MetricError("evaluate: empty dataset");
  const bool was_training = model.training();
  model.set_training(false);
  EvalReport r;
  for (std::size_t s = 0; s < samples.size(); s += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t k = s; k < std::min(samples.size(), s + batch_size); ++k) idx.push_back(k);
    const ModelOutput<float> out = model.forward(data::image_batch<float>(samples, idx));
    std::vector<double> mag;
    if (model.flags().head == HeadKind::sola) mag = anomaly_magnitudes(out.maps);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      r.scores.push_back(sigmoid_score(out.logits[b]));
      r.labels.push_back(samples[idx[b]].label);
      r.files.push_back(samples[idx[b]].file);
      if (!mag.empty()) r.anomaly.push_back(mag[b]);
    }
  }
  model.set_training(was_training);
  r.auc = roc_auc(r.scores, r.labels);
  r.accuracy = accuracy(r.scores, r.labels);
  if (!r.anomaly.empty()) {
    double sr = 0, sf = 0;
    int nr = 0, nf = 0;
    for (std::size_t i = 0; i < r.labels.size(); ++i) (r.labels[i] ? (sf += r.anomaly[i], ++nf) : (sr += r.anomaly[i], ++nr));
    r.mean_anomaly_real = nr ? sr / nr : 0;
    r.mean_anomaly_fake = nf ? sf / nf : 0;
  }
  return r;
}

inline EvalReport evaluate(const std::string& checkpoint, const std::string& dataset_dir, int batch_size = 32) {
  LoadedModel lm = load_checkpoint(checkpoint);
  EvalReport r = evaluate(*lm.model, data::load_dataset(dataset_dir), batch_size);
  r.meta = {{"checkpoint", checkpoint}, {"dataset", dataset_dir}, {"config_hash", lm.config_hash},
            {"code_version", kCodeVersion}};
  return r;
}

struct StepInfo {
  long long step = 0;
  int epoch = 0;
  double loss = 0, cls = 0, first = 0, second = 0;
};

struct EpochRecord {
  int epoch = 0;
  long long step = 0;
  double loss = 0, cls = 0, first = 0, second = 0;
  double train_auc = 0;
  std::optional<double> test_auc;
  double seconds = 0;
};

struct TrainHooks {
  std::function<void(const StepInfo&, Model&)> on_step;
  std::function<void(const EpochRecord&, Model&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  long long steps = 0;
  double best_auc = 0;
  int best_epoch = 0;
  std::string config_hash;
  std::string best_checkpoint, last_checkpoint, metrics_log;
};

/// Output-directory layout of a run.
struct RunPaths {
  std::filesystem::path root;
  std::string metrics() const { return (root / "metrics.jsonl").string(); }
  std::string best() const { return (root / "best.weights").string(); }
  std::string last() const { return (root / "last.weights").string(); }
  std::filesystem::path filters() const { return root / "filters"; }
  std::string filter_epoch(int e) const {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.weights", e);
    return (filters() / name).string();
  }
};

inline void dump_asrm_epoch(Model& model, const RunPaths& paths, int epoch, const RunConfig& cfg) {
  if (!model.has_noise_branch()) return;
  std::filesystem::create_directories(paths.filters());
  ParamList<float> only;
  model.asrm().collect(only, "asrm");
  save_weights(paths.filter_epoch(epoch), only);
  std::ofstream meta(paths.filters() / "run.json");
  meta << json{{"constraint_mode", to_string(cfg.flags.constraint)}, {"config_hash", cfg.hash()}}.dump(2) << "\n";
}

/// Trains on pre-loaded samples. `test` may be empty, in which case the best
/// checkpoint is selected by training AUC.
inline TrainResult train(const RunConfig& cfg, std::vector<data::Sample> train_set,
                         const std::vector<data::Sample>& test_set, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  const BackboneSpec spec = cfg.backbone_spec();
  const int patch = spec.input_size / spec.grid;
  const bool sup = cfg.mode == TrainMode::sup && cfg.flags.head == HeadKind::sola;
  std::vector<AnomalyGroundTruth> gt;
  if (sup) {
    for (const auto& s : train_set)
      if (s.label == 1 && !s.mask)
        throw ConfigError("train: mode=sup needs a mask for every fake sample, '" + s.file + "' has none");
    gt.reserve(train_set.size());
    for (const auto& s : train_set)
      gt.push_back(s.mask ? anomaly_ground_truth(*s.mask, patch) : zero_ground_truth(spec.grid, spec.grid));
  }

  const RunPaths paths{cfg.out_dir};
  std::filesystem::create_directories(paths.root);
  TrainResult result;
  result.config_hash = cfg.hash();
  result.metrics_log = paths.metrics();
  result.best_checkpoint = paths.best();
  result.last_checkpoint = paths.last();
  {
    std::ofstream c(paths.root / "config.json");
    c << cfg.to_json().dump(2) << "\n";
  }
  std::ofstream log(paths.metrics(), std::ios::app);
  if (!log) throw LoadError("cannot open metrics log '" + paths.metrics() + "'");

  Model model(spec, cfg.flags, cfg.seed);
  model.set_training(true);
  Adam<float> opt(model.params(), cfg.adam);
  if (cfg.dump_filters) dump_asrm_epoch(model, paths, 0, cfg);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(data::mix_seed(cfg.seed, 0x5EED));
  long long step = 0;
  bool best_set = false;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::vector<double> scores;
    std::vector<int> labels;
    int batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      std::vector<std::size_t> idx(order.begin() + s, order.begin() + std::min(order.size(), s + cfg.batch_size));
      std::vector<int> y;
      for (auto i : idx) y.push_back(train_set[i].label);
      const ModelOutput<float> out = model.forward(data::image_batch<float>(train_set, idx));
      LossWeights lw = cfg.weights;
      if (epoch <= cfg.anomaly_delay_epochs) lw.beta = lw.gamma = 0;
      LossResult<float> loss;
      if (cfg.flags.head == HeadKind::plain) {
        loss.cls = classification_loss(out.logits, y, &loss.dlogits);
        for (auto& v : loss.dlogits.vec()) v = static_cast<float>(v * cfg.weights.alpha);
        loss.total = cfg.weights.alpha * loss.cls;
      } else if (sup) {
        std::vector<AnomalyGroundTruth> g;
        for (auto i : idx) g.push_back(gt[i]);
        loss = supervised_loss(out.maps, std::span<const AnomalyGroundTruth>(g), out.logits, y, lw);
      } else {
        loss = weakly_supervised_loss(out.maps, out.logits, y, lw);
      }
      if (!std::isfinite(loss.total)) throw ValidationError("train: non-finite loss at step " + std::to_string(step));
      model.zero_grad();
      model.backward({std::move(loss.dmaps), std::move(loss.dlogits)});
      opt.step();
      model.project();
      ++step;
      ++batches;
      for (std::size_t b = 0; b < idx.size(); ++b) {
        scores.push_back(sigmoid_score(out.logits[b]));
        labels.push_back(y[b]);
      }
      rec.loss += loss.total;
      rec.cls += loss.cls;
      rec.first += loss.first;
      rec.second += loss.second;
      const StepInfo info{step, epoch, loss.total, loss.cls, loss.first, loss.second};
      if (cfg.log_every > 0 && step % cfg.log_every == 0)
        log << json{{"kind", "step"}, {"config_hash", result.config_hash}, {"step", step}, {"epoch", epoch},
                    {"loss", loss.total}, {"cls", loss.cls}, {"first", loss.first}, {"second", loss.second}}
                   .dump()
            << "\n"
            << std::flush;
      if (hooks.on_step) hooks.on_step(info, model);
    }
    if (batches == 0) break;
    rec.step = step;
    rec.loss /= batches;
    rec.cls /= batches;
    rec.first /= batches;
    rec.second /= batches;
    try {
      rec.train_auc = roc_auc(scores, labels);
    } catch (const MetricError&) {
      rec.train_auc = 0.5;
    }
    if (!test_set.empty()) rec.test_auc = evaluate(model, test_set).auc;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json line{{"kind", "epoch"}, {"config_hash", result.config_hash}, {"step", step}, {"epoch", epoch},
              {"loss", rec.loss}, {"cls", rec.cls}, {"first", rec.first}, {"second", rec.second},
              {"train_auc", rec.train_auc}, {"seconds", rec.seconds}};
    if (rec.test_auc) line["test_auc"] = *rec.test_auc;
    log << line.dump() << "\n" << std::flush;
    result.history.push_back(rec);

    const double sel = rec.test_auc.value_or(rec.train_auc);
    if (!best_set || sel > result.best_auc) {
      best_set = true;
      result.best_auc = sel;
      result.best_epoch = epoch;
      save_checkpoint(paths.best(), model, cfg);
    }
    save_checkpoint(paths.last(), model, cfg);
    if (cfg.dump_filters) dump_asrm_epoch(model, paths, epoch, cfg);
    if (hooks.on_epoch) hooks.on_epoch(rec, model);
    if (cfg.stop_at_auc > 0 && sel >= cfg.stop_at_auc) break;
  }
  result.steps = step;
  if (!best_set) save_checkpoint(paths.last(), model, cfg);
  return result;
}

inline TrainResult train(const RunConfig& cfg, const TrainHooks& hooks = {}) {
  if (cfg.train_dir.empty()) throw ConfigError("train: train_dir is not set");
  std::vector<data::Sample> test;
  if (!cfg.test_dir.empty()) test = data::load_dataset(cfg.test_dir);
  return train(cfg, data::load_dataset(cfg.train_dir), test, hooks);
}

/// Class-score Grad-CAM for one image at a named layer.
inline HeatMap gradcam(Model& model, const data::Sample& sample, const std::string& layer) {
  const auto names = model.layer_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw ParameterError("unknown layer '" + layer + "'; valid layers: " + valid);
  }
  const bool was_training = model.training();
  model.set_training(false);
  model.set_capture(true);
  const ModelOutput<float> out = model.forward(data::image_tensor<float>(sample.image));
  ModelGrads<float> g;
  g.dlogits = Tensor<float>(out.logits.shape());
  g.dlogits.fill(1.f);
  model.backward(g);
  HeatMap h = grad_cam(model.activation(layer), model.activation_grad(layer), sample.image.height, sample.image.width);
  model.zero_grad();
  model.set_capture(false);
  model.set_training(was_training);
  return h;
}

struct FilterEpochReport {
  int epoch = 0;
  ConstraintViolation violation;
  bool constraint_ok = false;
};

struct FilterReport {
  std::string constraint_mode;
  std::vector<FilterEpochReport> epochs;
  bool all_ok() const {
    return std::all_of(epochs.begin(), epochs.end(), [](const auto& e) { return e.constraint_ok; });
  }
  json to_json() const {
    json eps = json::array();
    for (const auto& e : epochs)
      eps.push_back({{"epoch", e.epoch}, {"center_violation", e.violation.center},
                     {"off_center_violation", e.violation.off_center}, {"constraint_ok", e.constraint_ok}});
    return {{"constraint_mode", constraint_mode}, {"epochs", eps}, {"constraint_ok", all_ok()}};
  }
};

inline constexpr double kConstraintTolerance = 1e-6;

/// Reads the per-epoch ASRM weights of a run and writes, per epoch, a text
/// dump of the kernels and one response image per output channel for the
/// probe image.
inline FilterReport dump_filters(const std::string& run_dir, const std::string& out_dir,
                                 const std::optional<ImageU8>& probe = {}) {
  const RunPaths paths{run_dir};
  std::vector<std::pair<int, std::string>> files;
  if (std::filesystem::is_directory(paths.filters()))
    for (const auto& e : std::filesystem::directory_iterator(paths.filters())) {
      const std::string n = e.path().filename().string();
      if (n.rfind("epoch_", 0) == 0 && e.path().extension() == ".weights")
        files.emplace_back(std::stoi(n.substr(6, 3)), e.path().string());
    }
  if (files.empty())
    throw LoadError("no per-epoch filter weights under '" + paths.filters().string() +
                    "'; re-run train with dump_filters=true (or SOLA_DUMP_FILTERS=1)");
  std::sort(files.begin(), files.end());
  FilterReport report;
  if (std::ifstream meta(paths.filters() / "run.json"); meta) report.constraint_mode = json::parse(meta).value("constraint_mode", "");

  const ImageU8 img = probe ? *probe : data::synthetic_source(0, 0);
  const Tensor<double> x = data::image_tensor<double>(img);
  std::filesystem::create_directories(out_dir);
  for (const auto& [epoch, file] : files) {
    const auto entries = read_weight_entries(file);
    if (entries.size() != 1 || entries[0].name != "asrm.weight")
      throw LoadError("'" + file + "' does not hold ASRM weights");
    const Shape s = entries[0].shape;
    std::mt19937_64 rng(0);
    auto layer = ConstrainedConvLayer<double>::random(s.n, s.c, rng);
    auto& w = layer.weight().value;
    if (!(w.shape() == s)) throw LoadError("'" + file + "': unexpected ASRM shape " + s.str());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = entries[0].values[i];

    FilterEpochReport er{epoch, layer.violation(), false};
    er.constraint_ok = er.violation.within(kConstraintTolerance);
    report.epochs.push_back(er);

    char stem[32];
    std::snprintf(stem, sizeof stem, "epoch_%03d", epoch);
    std::ofstream txt(std::filesystem::path(out_dir) / (std::string(stem) + ".txt"));
    txt << std::setprecision(9);
    for (int o = 0; o < s.n; ++o)
      for (int i = 0; i < s.c; ++i) {
        txt << "# out " << o << " in " << i << "\n";
        for (int r = 0; r < s.h; ++r) {
          for (int c = 0; c < s.w; ++c) txt << (c ? " " : "") << w(o, i, r, c);
          txt << "\n";
        }
      }
    const Tensor<double> resp = layer.apply(x);
    for (int o = 0; o < resp.c(); ++o) {
      std::vector<double> plane(resp.plane(0, o), resp.plane(0, o) + resp.plane_stride());
      for (double& v : plane) v = std::abs(v);
      normalize_unit(plane);
      write_png((std::filesystem::path(out_dir) / (std::string(stem) + "_response" + std::to_string(o) + ".png")).string(),
                to_gray_u8(plane, resp.h(), resp.w()));
    }
  }
  std::ofstream(std::filesystem::path(out_dir) / "constraint_report.json") << report.to_json().dump(2) << "\n";
  return report;
}

/// Bit-packed GT file: "SOLAGT01", rows and cols as uint32, then the 16 grids
/// (first order labels v1 v2 h1 h2, their validity, then the same for second
/// order), each row-major with 8 cells per byte, least significant bit first.
inline void write_gt_file(const std::string& path, const AnomalyGroundTruth& gt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out.write("SOLAGT01", 8);
  const std::uint32_t dims[2] = {static_cast<std::uint32_t>(gt.first.labels[0].rows),
                                 static_cast<std::uint32_t>(gt.first.labels[0].cols)};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  for (const GroupGrids* gg : {&gt.first, &gt.second})
    for (const auto* set : {&gg->labels, &gg->valid})
      for (const BinaryGrid& g : *set) {
        std::vector<std::uint8_t> bytes((g.cells.size() + 7) / 8, 0);
        for (std::size_t k = 0; k < g.cells.size(); ++k)
          if (g.cells[k]) bytes[k / 8] |= static_cast<std::uint8_t>(1u << (k % 8));
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      }
}

inline AnomalyGroundTruth read_gt_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != "SOLAGT01") throw LoadError("'" + path + "' is not a GT file");
  std::uint32_t dims[2];
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  AnomalyGroundTruth gt;
  for (GroupGrids* gg : {&gt.first, &gt.second})
    for (auto* set : {&gg->labels, &gg->valid})
      for (BinaryGrid& g : *set) {
        g = BinaryGrid(static_cast<int>(dims[0]), static_cast<int>(dims[1]));
        std::vector<std::uint8_t> bytes((g.cells.size() + 7) / 8);
        in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        for (std::size_t k = 0; k < g.cells.size(); ++k) g.cells[k] = (bytes[k / 8] >> (k % 8)) & 1u;
      }
  if (!in) throw LoadError("'" + path + "' is truncated");
  return gt;
}

/// Mask PNG in, GT file (plus optional nearest-upsampled previews) out.
inline AnomalyGroundTruth make_gt(const std::string& mask_png, const std::string& out_path, int patch = 16,
                                  const std::string& preview_dir = "") {
  const ImageU8 m = read_png(mask_png, 1);
  ForgeryMask mask(m.height, m.width);
  for (std::size_t i = 0; i < m.pixels.size(); ++i) {
    if (m.pixels[i] != 0 && m.pixels[i] != 255)
      throw ValidationError("mask '" + mask_png + "' is not binary (value " + std::to_string(m.pixels[i]) + ")");
    mask.pixels[i] = m.pixels[i] ? 1 : 0;
  }
  const AnomalyGroundTruth gt = anomaly_ground_truth(mask, patch);
  write_gt_file(out_path, gt);
  if (!preview_dir.empty()) {
    std::filesystem::create_directories(preview_dir);
    for (int order = 0; order < 2; ++order)
      for (Group g : kGroups) {
        const BinaryGrid& grid = (order == 0 ? gt.first : gt.second).labels[static_cast<int>(g)];
        ImageU8 img(grid.rows * patch, grid.cols * patch, 1);
        for (int y = 0; y < img.height; ++y)
          for (int x = 0; x < img.width; ++x) img.at(y, x) = grid.at(y / patch, x / patch) ? 255 : 0;
        const std::string name = std::string(order == 0 ? "first_" : "second_") + kGroupNames[static_cast<int>(g)] + ".png";
        write_png((std::filesystem::path(preview_dir) / name).string(), img);
      }
  }
  return gt;
}

}  // namespace sola
