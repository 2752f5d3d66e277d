#include "facecycle/runner.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

namespace facecycle {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Frozen guidance networks stand in for pretrained models, so every run and
// every evaluation shares one seed.
constexpr uint64_t kGuidanceSeed = 0;

struct Field {
  std::string section;  // empty for top-level keys
  std::string key;
  std::function<void(const json&)> set;
  std::function<json()> get;

  std::string name() const { return section.empty() ? key : section + "." + key; }
};

[[noreturn]] void type_error(const std::string& name, const char* expected) {
  throw ConfigError("field '" + name + "': expected " + expected);
}

template <typename T>
T typed(const json& j, const std::string& name) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) type_error(name, "true or false");
    return j.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) type_error(name, "an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned()) return j.get<T>();
      if (j.get<int64_t>() < 0) type_error(name, "a non-negative integer");
    }
    return j.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) type_error(name, "a number");
    return j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) type_error(name, "a string");
    return j.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::vector<int>>) {
    if (!j.is_array()) type_error(name, "a list of integers");
    std::vector<int> out;
    for (const auto& e : j) {
      if (!e.is_number_integer()) type_error(name, "a list of integers");
      out.push_back(e.get<int>());
    }
    return out;
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

template <typename T>
Field field(const std::string& section, const std::string& key, T& ref) {
  const std::string full = section.empty() ? key : section + "." + key;
  return {section, key, [&ref, full](const json& j) { ref = typed<T>(j, full); }, [&ref] { return json(ref); }};
}

Field path_field(const std::string& section, const std::string& key, fs::path& ref) {
  const std::string full = section.empty() ? key : section + "." + key;
  return {section, key, [&ref, full](const json& j) { ref = typed<std::string>(j, full); },
          [&ref] { return json(ref.string()); }};
}

template <typename E>
Field enum_field(const std::string& section, const std::string& key, E& ref,
                std::vector<std::pair<std::string, E>> names) {
  const std::string full = section.empty() ? key : section + "." + key;
  return {section, key,
          [&ref, full, names](const json& j) {
            const auto text = typed<std::string>(j, full);
            std::string allowed;
            for (const auto& [n, v] : names) {
              if (n == text) {
                ref = v;
                return;
              }
              allowed += (allowed.empty() ? "" : ", ") + n;
            }
            throw ConfigError("field '" + full + "': '" + text + "' is not one of " + allowed);
          },
          [&ref, names] {
            for (const auto& [n, v] : names) {
              if (v == ref) return json(n);
            }
            return json(nullptr);
          }};
}

std::vector<Field> fields_of(RunConfig& c) {
  auto& s = c.schedule;
  auto& w = c.weights;
  auto& g = c.generator;
  auto& d = c.discriminator;
  auto& a = c.augment;
  auto& n = c.nce;
  auto& v = c.vae;
  auto& p = c.pix2pix;
  auto& m = c.metrics;
  auto& o = c.output;
  return {
      enum_field("", "model", c.model,
                {{"cyclegan_guided", ModelKind::CycleGanGuided},
                 {"vae", ModelKind::Vae},
                 {"pix2pix", ModelKind::Pix2pix},
                 {"identity", ModelKind::Identity}}),
      field("", "seed", c.seed),
      path_field("", "output_dir", c.output_dir),
      enum_field("", "precision", c.precision, {{"fp32", Precision::FP32}, {"mixed", Precision::Mixed}}),
      path_field("data", "x_dir", c.data.x_dir),
      path_field("data", "y_dir", c.data.y_dir),
      field("data", "train_frac", c.data.train_frac),
      enum_field("data", "missing_sidecars", c.data.missing_sidecars,
                {{"strict", MissingSidecarPolicy::Strict}, {"neutral", MissingSidecarPolicy::NeutralDefault}}),
      field("schedule", "total_iters", s.total_iters),
      field("schedule", "ttur", s.ttur),
      field("schedule", "ttur_phase_frac", s.ttur_phase_frac),
      field("schedule", "ttur_ratio", s.ttur_ratio),
      field("schedule", "lr0", s.lr0),
      field("schedule", "adam_beta1", s.adam_beta1),
      field("schedule", "adam_beta2", s.adam_beta2),
      field("schedule", "ema", s.ema),
      field("schedule", "ema_decay", s.ema_decay),
      field("schedule", "clip_max_norm", s.clip_max_norm),
      field("schedule", "resize_switch_frac", s.resize_switch_frac),
      field("schedule", "resolutions", s.resolutions),
      field("schedule", "batch_size", s.batch_size),
      field("schedule", "accumulation", s.accumulation),
      field("weights", "lambda_cyc", w.cyc),
      field("weights", "lambda_id", w.id),
      field("weights", "lambda_perc", w.perc),
      field("weights", "lambda_sem", w.sem),
      field("weights", "lambda_lmk", w.lmk),
      field("weights", "lambda_con", w.con),
      field("weights", "lambda_paired", w.paired),
      field("generator", "n_res_blocks", g.n_res_blocks),
      field("generator", "base_channels", g.base_channels),
      field("generator", "max_channels", g.max_channels),
      field("generator", "n_downsample", g.n_downsample),
      field("generator", "attention_scales", g.attention_scales),
      field("generator", "skip_scales", g.skip_scales),
      field("generator", "adain_in_late_blocks", g.adain_in_late_blocks),
      field("generator", "n_adain_blocks", g.n_adain_blocks),
      field("generator", "style_dim", g.style_dim),
      field("generator", "use_sn", g.use_sn_on_g),
      field("discriminator", "n_layers", d.n_layers),
      field("discriminator", "scales", d.scales),
      field("discriminator", "base_channels", d.base_channels),
      field("discriminator", "max_channels", d.max_channels),
      field("discriminator", "use_sn", d.use_sn),
      field("discriminator", "use_norm", d.use_norm),
      field("augment", "enabled", c.diff_augment),
      field("augment", "translate_frac", a.translate_frac),
      field("augment", "brightness", a.brightness),
      field("augment", "saturation_lo", a.saturation_lo),
      field("augment", "saturation_hi", a.saturation_hi),
      field("augment", "contrast_lo", a.contrast_lo),
      field("augment", "contrast_hi", a.contrast_hi),
      field("augment", "cutout_frac", a.cutout_frac),
      field("augment", "apply_prob", a.apply_prob),
      field("nce", "n_patches", n.n_patches),
      field("nce", "tap_scales", n.tap_scales),
      field("nce", "temperature", n.temperature),
      field("nce", "projection_dim", n.projection_dim),
      field("nce", "batch_negatives", n.batch_negatives),
      field("cyclegan", "saturating_gan", c.saturating_gan),
      field("cyclegan", "history_size", c.history_size),
      field("cyclegan", "eval_ema", c.eval_ema),
      enum_field("cyclegan", "retrieval", c.retrieval, {{"cosine", RetrievalMetric::Cosine}, {"l2", RetrievalMetric::L2}}),
      field("vae", "latent_dim", v.latent_dim),
      field("vae", "lr", v.lr),
      field("vae", "beta", v.beta),
      field("vae", "base_channels", v.base_channels),
      field("vae", "max_channels", v.max_channels),
      field("vae", "n_downsample", v.n_downsample),
      field("pix2pix", "base_channels", p.base_channels),
      field("pix2pix", "max_channels", p.max_channels),
      field("pix2pix", "depth", p.depth),
      field("pix2pix", "lr", p.lr),
      field("pix2pix", "lambda_l1", p.lambda_l1),
      field("pix2pix", "n_layers", p.discriminator.n_layers),
      field("pix2pix", "use_sn", p.discriminator.use_sn),
      field("pix2pix", "diff_augment", p.diff_augment),
      field("metrics", "fid_splits", m.fid_splits),
      field("metrics", "timing_images", m.timing_images),
      field("metrics", "timing_warmup", m.timing_warmup),
      field("metrics", "eval_batch", m.eval_batch),
      field("metrics", "probe_size", m.probe_size),
      field("metrics", "stability_tail_steps", m.stability_tail_steps),
      field("output", "checkpoint_every", o.checkpoint_every),
      field("output", "sample_every", o.sample_every),
      field("output", "log_every", o.log_every),
  };
}

Field* find_field(std::vector<Field>& fields, const std::string& section, const std::string& key) {
  for (auto& f : fields) {
    if (f.section == section && f.key == key) return &f;
  }
  return nullptr;
}

void prefixed(const std::string& section, const std::function<void()>& check) {
  try {
    check();
  } catch (const ConfigError& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// Mean over feature dims of the per-dim std across probe samples.
double probe_std(TranslationModel& model, const torch::Tensor& probe, const FeatureExtractor& fx, int64_t batch) {
  auto feats = fx(translate_all(model, probe, Direction::XtoY, batch));
  return feats.std(0).mean().item<double>();
}

void write_sample_grid(const fs::path& path, TranslationModel& model, const torch::Tensor& x) {
  torch::NoGradGuard guard;
  auto fake = translate_all(model, x, Direction::XtoY, 8);
  auto top = torch::cat(x.unbind(0), 2), bottom = torch::cat(fake.to(x.device()).unbind(0), 2);
  auto grid = to_unit_range(torch::cat({top, bottom}, 1).cpu().to(torch::kFloat));
  write_png(path, tensor_to_image(grid));
}

json manifest_ids(const DatasetManifest& m) { return json(m.ids); }

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::CycleGanGuided: return "cyclegan_guided";
    case ModelKind::Vae: return "vae";
    case ModelKind::Pix2pix: return "pix2pix";
    case ModelKind::Identity: return "identity";
  }
  return "unknown";
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "cyclegan_guided") return ModelKind::CycleGanGuided;
  if (text == "vae") return ModelKind::Vae;
  if (text == "pix2pix") return ModelKind::Pix2pix;
  if (text == "identity") return ModelKind::Identity;
  throw ConfigError("model must be one of cyclegan_guided, vae, pix2pix (got '" + std::string(text) + "')");
}

void RunConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (!(data.train_frac > 0.0 && data.train_frac < 1.0)) throw ConfigError("data.train_frac must be in (0, 1)");
  prefixed("schedule", [&] { schedule.validate(); });
  prefixed("weights", [&] { weights.validate(); });
  prefixed("augment", [&] { augment.validate(); });
  const int r_min = *std::min_element(schedule.resolutions.begin(), schedule.resolutions.end());
  switch (model) {
    case ModelKind::CycleGanGuided: {
      prefixed("generator", [&] { generator.validate(); });
      prefixed("discriminator", [&] { discriminator.validate(); });
      if (weights.con > 0.0) prefixed("nce", [&] { nce.validate(); });
      if (history_size < 0) throw ConfigError("cyclegan.history_size must be >= 0");
      if (r_min < generator.min_resolution()) {
        throw ConfigError("schedule.resolutions: " + std::to_string(r_min) + " is below the generator minimum " +
                          std::to_string(generator.min_resolution()));
      }
      for (int r : schedule.resolutions) {
        if (r % (1 << generator.n_downsample) != 0) {
          throw ConfigError("schedule.resolutions: " + std::to_string(r) + " not divisible by 2^generator.n_downsample");
        }
      }
      if (weights.con > 0.0) {
        for (int s : nce.tap_scales) {
          if (s > (1 << generator.n_downsample)) {
            throw ConfigError("nce.tap_scales: 1/" + std::to_string(s) + " is deeper than the encoder (2^" +
                              std::to_string(generator.n_downsample) + ")");
          }
          const int64_t side = r_min / s;
          if (nce.n_patches > side * side) {
            throw ConfigError("nce.n_patches " + std::to_string(nce.n_patches) + " exceeds the " +
                              std::to_string(side * side) + " locations of the 1/" + std::to_string(s) + " tap at " +
                              std::to_string(r_min) + " px");
          }
        }
      }
      break;
    }
    case ModelKind::Vae: {
      if (schedule.resolutions.size() != 1) {
        throw ConfigError("schedule.resolutions: the vae trains at a single resolution");
      }
      prefixed("vae", [&] { vae_config().validate(); });
      break;
    }
    case ModelKind::Pix2pix:
      prefixed("pix2pix", [&] { pix2pix_config().validate(); });
      break;
    case ModelKind::Identity:
      break;
  }
  if (metrics.fid_splits < 1) throw ConfigError("metrics.fid_splits must be >= 1");
  if (metrics.timing_images < 0) throw ConfigError("metrics.timing_images must be >= 0");
  if (metrics.timing_warmup < 0) throw ConfigError("metrics.timing_warmup must be >= 0");
  if (metrics.eval_batch < 1) throw ConfigError("metrics.eval_batch must be >= 1");
  if (metrics.probe_size < 2) throw ConfigError("metrics.probe_size must be >= 2");
  if (metrics.stability_tail_steps < 0) throw ConfigError("metrics.stability_tail_steps must be >= 0");
  if (output.checkpoint_every < 0 || output.sample_every < 0 || output.log_every < 0) {
    throw ConfigError("output cadences must be >= 0");
  }
}

std::string RunConfig::to_json() const {
  auto fields = fields_of(const_cast<RunConfig&>(*this));
  json j = json::object();
  for (const auto& f : fields) {
    if (f.section.empty()) {
      j[f.key] = f.get();
    } else {
      j[f.section][f.key] = f.get();
    }
  }
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  auto fields = fields_of(c);
  for (const auto& [key, value] : j.items()) {
    if (auto* f = find_field(fields, "", key)) {
      f->set(value);
      continue;
    }
    if (!value.is_object()) throw ConfigError("unknown config key '" + key + "'");
    bool section_known = false;
    for (const auto& f : fields) section_known = section_known || f.section == key;
    if (!section_known) throw ConfigError("unknown config section '" + key + "'");
    for (const auto& [sub, sub_value] : value.items()) {
      auto* f = find_field(fields, key, sub);
      if (!f) throw ConfigError("unknown config key '" + key + "." + sub + "'");
      f->set(sub_value);
    }
  }
  return c;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key=value");
  const auto name = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  const auto dot = name.find('.');
  const auto section = dot == std::string::npos ? std::string() : name.substr(0, dot);
  const auto key = dot == std::string::npos ? name : name.substr(dot + 1);
  auto fields = fields_of(*this);
  auto* f = find_field(fields, section, key);
  if (!f) throw ConfigError("unknown config key '" + name + "'");
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    // "4,8" is a list; other bare strings need no quotes on the command line
    try {
      value = json::parse("[" + text + "]");
    } catch (const json::parse_error&) {
      value = text;
    }
  }
  try {
    f->set(value);
  } catch (const ConfigError&) {
    if (!value.is_number_integer()) throw;
    f->set(json::array({value}));  // single-element list
  }
}

CycleGanConfig RunConfig::cyclegan_config() const {
  CycleGanConfig c;
  c.generator = generator;
  c.discriminator = discriminator;
  c.weights = weights;
  c.nce = nce;
  c.augment = augment;
  c.diff_augment = diff_augment;
  c.saturating_gan = saturating_gan;
  c.retrieval = retrieval;
  c.history_size = history_size;
  c.precision = precision;
  c.eval_ema = eval_ema && schedule.ema;
  c.seed = seed;
  return c;
}

VaeConfig RunConfig::vae_config() const {
  auto c = vae;
  c.resolution = resolution();
  c.seed = seed;
  return c;
}

Pix2pixConfig RunConfig::pix2pix_config() const {
  auto c = pix2pix;
  c.augment = augment;
  c.seed = seed;
  return c;
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto cfg = RunConfig::from_json(ss.str());
  for (const auto& o : overrides) cfg.apply_override(o);
  cfg.validate();
  return cfg;
}

torch::Device run_device() {
  const char* env = std::getenv("RUN_DEVICE");
  if (!env || std::string(env).empty()) return torch::kCPU;
  try {
    torch::Device device{std::string(env)};
    if (device.is_cuda() && !torch::cuda::is_available()) throw ConfigError("RUN_DEVICE=" + std::string(env) + " but CUDA is unavailable");
    return device;
  } catch (const c10::Error&) {
    throw ConfigError("RUN_DEVICE '" + std::string(env) + "' is not a device (cpu, cuda, cuda:N)");
  }
}

std::unique_ptr<TranslationModel> make_model(const RunConfig& cfg) {
  switch (cfg.model) {
    case ModelKind::CycleGanGuided:
      return std::make_unique<CycleGanModel>(cfg.cyclegan_config(), cfg.schedule, GuidanceSet::toy(kGuidanceSeed));
    case ModelKind::Vae:
      return std::make_unique<VaeModel>(cfg.vae_config(), cfg.schedule);
    case ModelKind::Pix2pix: {
      const int r_min = *std::min_element(cfg.schedule.resolutions.begin(), cfg.schedule.resolutions.end());
      return std::make_unique<Pix2pixModel>(cfg.pix2pix_config(), cfg.schedule, r_min);
    }
    case ModelKind::Identity:
      return std::make_unique<IdentityModel>();
  }
  throw ConfigError("unknown model kind");
}

void save_checkpoint(const fs::path& path, TranslationModel& model, const RunConfig& cfg) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive, body;
  archive.write("format_version", c10::IValue(static_cast<int64_t>(kCheckpointFormatVersion)));
  archive.write("model_kind", c10::IValue(model.kind()));
  archive.write("config", c10::IValue(cfg.to_json()));
  model.save(body);
  archive.write("model", body);
  archive.save_to(path.string());
}

LoadedModel load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw Error("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  c10::IValue version, kind, config;
  if (!archive.try_read("format_version", version) || !archive.try_read("model_kind", kind) ||
      !archive.try_read("config", config)) {
    throw Error("checkpoint header incomplete: " + path.string());
  }
  if (version.toInt() != kCheckpointFormatVersion) {
    throw Error("unsupported checkpoint format_version " + std::to_string(version.toInt()));
  }
  LoadedModel out{RunConfig::from_json(config.toStringRef()), nullptr};
  out.model = make_model(out.config);
  if (out.model->kind() != kind.toStringRef()) throw Error("checkpoint model_kind does not match its config");
  torch::serialize::InputArchive body;
  if (!archive.try_read("model", body)) throw Error("checkpoint lacks model weights");
  out.model->load(body);
  return out;
}

RunSplits make_splits(const RunConfig& cfg) {
  if (cfg.data.x_dir.empty() || cfg.data.y_dir.empty()) throw ConfigError("data.x_dir and data.y_dir are required");
  auto mx = ingest_directory(cfg.data.x_dir, Domain::X);
  auto my = ingest_directory(cfg.data.y_dir, Domain::Y);
  const SplitSpec spec{cfg.data.train_frac, cfg.seed};
  auto [x_train, x_test] = split(mx, spec);
  auto [y_train, y_test] = split(my, spec);
  return {x_train, x_test, y_train, y_test};
}

void save_splits(const fs::path& run_dir, const RunSplits& s) {
  json j;
  j["x"] = {{"root", s.x_train.root.string()}, {"train", manifest_ids(s.x_train)}, {"test", manifest_ids(s.x_test)}};
  j["y"] = {{"root", s.y_train.root.string()}, {"train", manifest_ids(s.y_train)}, {"test", manifest_ids(s.y_test)}};
  std::ofstream(run_dir / "splits.json") << j.dump(2) << "\n";
}

RunSplits load_splits(const fs::path& run_dir) {
  std::ifstream in(run_dir / "splits.json");
  if (!in) throw Error("no splits.json in " + run_dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed splits.json: ") + e.what());
  }
  auto side = [&](const char* key, Domain domain) {
    auto m = ingest_directory(j.at(key).at("root").get<std::string>(), domain);
    return std::make_pair(m.subset(j.at(key).at("train").get<std::vector<std::string>>()),
                          m.subset(j.at(key).at("test").get<std::vector<std::string>>()));
  };
  auto [xt, xe] = side("x", Domain::X);
  auto [yt, ye] = side("y", Domain::Y);
  return {xt, xe, yt, ye};
}

TrainResult cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const auto run_dir = cfg.output_dir;
  fs::create_directories(run_dir);
  std::ofstream(run_dir / "config.snapshot.json") << cfg.to_json() << "\n";
  set_event_log_file(run_dir / "events.log");
  struct LogCloser {
    ~LogCloser() { close_event_log_file(); }
  } closer;
  log_event(LogLevel::Info, "train " + std::string(to_string(cfg.model)) + " seed " + std::to_string(cfg.seed) +
                                " for " + std::to_string(cfg.schedule.total_iters) + " iterations");

  const auto splits = make_splits(cfg);
  save_splits(run_dir, splits);
  const int r_max = cfg.resolution();
  const auto device = run_device();
  const auto train_x = ImageDataset::load(splits.x_train, r_max, cfg.data.missing_sidecars);
  const auto train_y = ImageDataset::load(splits.y_train, r_max, cfg.data.missing_sidecars);
  const auto test_x = ImageDataset::load(splits.x_test, r_max, cfg.data.missing_sidecars);
  log_event(LogLevel::Info, "train X " + std::to_string(train_x.size()) + ", train Y " +
                                std::to_string(train_y.size()) + ", test X " + std::to_string(test_x.size()));

  auto model = make_model(cfg);
  model->to(device);

  const bool wants_pairs = model->needs_pairs() || (cfg.model == ModelKind::CycleGanGuided && cfg.weights.paired > 0.0);
  PairIndex pairs;
  if (wants_pairs) {
    pairs = paired_rows(train_x, train_y, splits.x_train);
    if (pairs.rows_x.empty() && model->needs_pairs()) {
      throw ConfigError("pix2pix requires pairs: the training split has no paired_with entries");
    }
    if (static_cast<int64_t>(pairs.rows_x.size()) < cfg.schedule.batch_size && !pairs.rows_x.empty()) {
      throw ConfigError("schedule.batch_size exceeds the " + std::to_string(pairs.rows_x.size()) + " curated pairs");
    }
  }
  const bool pair_driven = model->needs_pairs();
  const int64_t batch = cfg.schedule.batch_size;
  UnpairedSampler sampler(train_x.size(), train_y.size(), batch, mix_seed(cfg.seed, 0x5a));
  const int64_t batches_per_epoch =
      pair_driven ? static_cast<int64_t>(pairs.rows_x.size()) / batch : sampler.batches_per_epoch();

  std::vector<int64_t> pair_perm;
  size_t pair_cursor = 0;
  int64_t pair_epoch = 0;
  auto next_pair_positions = [&] {
    const auto n = static_cast<int64_t>(pairs.rows_x.size());
    if (pair_perm.empty() || pair_cursor + batch > pair_perm.size()) {
      auto gen = make_generator(mix_seed(mix_seed(cfg.seed, 0x9a), static_cast<uint64_t>(pair_epoch++)));
      auto perm = torch::randperm(n, gen, torch::kLong);
      pair_perm.assign(perm.data_ptr<int64_t>(), perm.data_ptr<int64_t>() + n);
      pair_cursor = 0;
    }
    std::vector<int64_t> out(pair_perm.begin() + static_cast<std::ptrdiff_t>(pair_cursor),
                             pair_perm.begin() + static_cast<std::ptrdiff_t>(pair_cursor + batch));
    pair_cursor += batch;
    return out;
  };

  std::vector<int64_t> probe_rows;
  for (int64_t i = 0; i < std::min<int64_t>(cfg.metrics.probe_size, train_x.size()); ++i) probe_rows.push_back(i);
  const auto fx = FeatureExtractor::toy();
  std::vector<int64_t> sample_rows;
  for (int64_t i = 0; i < std::min<int64_t>(8, test_x.size()); ++i) sample_rows.push_back(i);

  // No training batch may contain a test id of its domain.
  const std::set<std::string> held_out_x(splits.x_test.ids.begin(), splits.x_test.ids.end());
  const std::set<std::string> held_out_y(splits.y_test.ids.begin(), splits.y_test.ids.end());

  std::ofstream csv(run_dir / "losses.csv", std::ios::trunc);
  std::vector<std::string> columns;
  fs::path last_checkpoint;
  const int64_t total = cfg.schedule.total_iters;
  for (int64_t iter = 0; iter < total; ++iter) {
    const int res = current_resolution(iter, cfg.schedule);
    auto [rx, ry] = sampler.next();
    StepInputs inputs{train_x.gather(rx, res).to(device), train_y.gather(ry, res).to(device), std::nullopt};
    for (const auto& [ids, test] : {std::pair{&inputs.x.ids, &held_out_x}, std::pair{&inputs.y.ids, &held_out_y}}) {
      for (const auto& id : *ids) {
        if (test->count(id)) throw Error("held-out image '" + id + "' reached a training batch");
      }
    }
    if (wants_pairs && !pairs.rows_x.empty()) {
      auto pb = gather_pairs(train_x, train_y, pairs, next_pair_positions(), res);
      inputs.paired = PairedBatch{pb.x.to(device), pb.y.to(device)};
    }
    LossReport report;
    try {
      report = model->step(inputs, iter);
    } catch (const NumericError& e) {
      log_event(LogLevel::Error, std::string("numeric failure: ") + e.what());
      throw;
    }
    if (!report.all_finite()) {
      log_event(LogLevel::Error, "non-finite loss at iteration " + std::to_string(iter));
      throw NumericError("non-finite loss at iteration " + std::to_string(iter));
    }

    const int64_t epoch = batches_per_epoch > 0 ? iter / batches_per_epoch : 0;
    const bool epoch_end = batches_per_epoch > 0 && (iter + 1) % batches_per_epoch == 0;
    double probe = std::numeric_limits<double>::quiet_NaN();
    if (iter == 0 || epoch_end) {
      probe = probe_std(*model, train_x.gather(probe_rows, res).images.to(device), fx, cfg.metrics.eval_batch);
    }
    if (columns.empty()) {
      for (const auto& [name, _] : report.components) columns.push_back(name);
      csv << "step,epoch";
      for (const auto& c : columns) csv << "," << c;
      csv << ",total,probe_std\n";
    }
    csv << iter << "," << epoch;
    for (const auto& c : columns) {
      auto it = report.components.find(c);
      csv << "," << (it == report.components.end() ? std::string() : csv_number(it->second));
    }
    csv << "," << csv_number(report.total) << "," << csv_number(probe) << "\n";

    const bool last = iter + 1 == total;
    if (cfg.output.log_every > 0 && ((iter + 1) % cfg.output.log_every == 0 || last)) {
      csv.flush();
      log_event(LogLevel::Info, "iter " + std::to_string(iter + 1) + " total " + csv_number(report.total));
    }
    if (last || (cfg.output.checkpoint_every > 0 && (iter + 1) % cfg.output.checkpoint_every == 0)) {
      last_checkpoint = run_dir / "checkpoints" / ("iter_" + std::to_string(iter + 1) + ".ckpt");
      save_checkpoint(last_checkpoint, *model, cfg);
    }
    if (!sample_rows.empty() && (last || (cfg.output.sample_every > 0 && (iter + 1) % cfg.output.sample_every == 0))) {
      fs::create_directories(run_dir / "samples");
      write_sample_grid(run_dir / "samples" / ("iter_" + std::to_string(iter + 1) + ".png"), *model,
                        test_x.gather(sample_rows, res).images.to(device));
    }
  }
  csv.close();
  log_event(LogLevel::Info, "finished; d updates " + std::to_string(model->d_updates()) + ", g updates " +
                                std::to_string(model->g_updates()));
  return {run_dir, last_checkpoint, total};
}

int64_t cmd_translate(const fs::path& checkpoint, const fs::path& input_dir, Direction direction,
                      const fs::path& out_dir) {
  auto loaded = load_checkpoint(checkpoint);
  auto& model = *loaded.model;
  if (!model.supports(direction)) {
    throw ConfigError(model.kind() + " cannot translate " + std::string(to_string(direction)));
  }
  const int res = loaded.config.resolution();
  if (loaded.config.model == ModelKind::CycleGanGuided && res < loaded.config.generator.min_resolution()) {
    throw ConfigError("resolution " + std::to_string(res) + " below the generator minimum");
  }
  auto manifest = ingest_directory(input_dir, source_domain(direction));
  const auto device = run_device();
  model.to(device);
  fs::create_directories(out_dir);
  int64_t written = 0;
  for (const auto& id : manifest.ids) {
    auto x = preprocess(read_image(input_dir / manifest.files.at(id)), res).unsqueeze(0).to(device);
    auto y = model.translate(x, direction)[0].cpu();
    write_png(out_dir / (id + ".png"), tensor_to_image(to_unit_range(y)));
    ++written;
  }
  return written;
}

std::vector<MetricReport> cmd_evaluate(const EvaluateRequest& request) {
  if (request.checkpoints.empty()) throw ConfigError("evaluate needs at least one checkpoint");
  std::vector<LoadedModel> models;
  for (const auto& path : request.checkpoints) {
    models.push_back(load_checkpoint(path));
    resolve_protocol(*models.back().model, request.protocol);  // reject before any compute
  }
  const auto device = run_device();
  std::vector<MetricReport> reports;
  for (size_t i = 0; i < models.size(); ++i) {
    auto& [cfg, model] = models[i];
    const auto run_dir = request.checkpoints[i].parent_path().parent_path();
    DatasetManifest mx, my;
    if (request.x_test_dir && request.y_test_dir) {
      mx = ingest_directory(*request.x_test_dir, Domain::X);
      my = ingest_directory(*request.y_test_dir, Domain::Y);
    } else {
      auto splits = load_splits(run_dir);
      mx = splits.x_test;
      my = splits.y_test;
    }
    const int res = cfg.resolution();
    auto test_x = ImageDataset::load(mx, res, cfg.data.missing_sidecars);
    auto test_y = ImageDataset::load(my, res, cfg.data.missing_sidecars);
    PairIndex pairs = paired_rows(test_x, test_y, mx);
    model->to(device);

    EvalOptions opts;
    opts.fid_splits = cfg.metrics.fid_splits;
    opts.seed = cfg.seed;
    opts.timing_images = request.timing_images.value_or(cfg.metrics.timing_images);
    opts.timing_warmup = cfg.metrics.timing_warmup;
    opts.batch = cfg.metrics.eval_batch;
    auto guidance = GuidanceSet::toy(kGuidanceSeed);
    opts.perceptual = guidance.perceptual;
    opts.identity = guidance.identity;
    opts.landmarks = guidance.landmarks;
    auto report = evaluate_model(*model, test_x, test_y, request.protocol, &pairs, opts);
    if (fs::exists(run_dir / "losses.csv")) {
      auto log = LossLog::read_csv(run_dir / "losses.csv");
      std::optional<int64_t> tail;
      if (cfg.metrics.stability_tail_steps > 0) tail = cfg.metrics.stability_tail_steps;
      if (!log.total.empty()) {
        auto s = stability_indicators(log, tail);
        report.d_loss_variance = s.d_loss_variance;
        report.epochs_to_stabilization = s.epochs_to_stabilization;
        report.collapse_events = s.collapse_events;
      }
    }
    reports.push_back(report);
  }
  fs::create_directories(request.out_dir);
  std::ofstream(request.out_dir / "report.json") << reports_to_json(reports) << "\n";
  std::ofstream(request.out_dir / "report.md") << render_markdown(reports) << "";
  return reports;
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"sn",        "id",         "perc", "sem", "lmk",    "con",
                                             "attention", "multiscale", "ttur", "ema", "diffaug"};
  return axes;
}

RunConfig ablate_variant(const RunConfig& cfg, const std::string& axis) {
  RunConfig v = cfg;
  if (axis == "sn") {
    v.discriminator.use_sn = false;
  } else if (axis == "id") {
    v.weights.id = 0.0;
  } else if (axis == "perc") {
    v.weights.perc = 0.0;
  } else if (axis == "sem") {
    v.weights.sem = 0.0;
  } else if (axis == "lmk") {
    v.weights.lmk = 0.0;
  } else if (axis == "con") {
    v.weights.con = 0.0;
  } else if (axis == "attention") {
    v.generator.attention_scales.clear();
  } else if (axis == "multiscale") {
    v.discriminator.scales = {1};
  } else if (axis == "ttur") {
    v.schedule.ttur = false;
  } else if (axis == "ema") {
    v.schedule.ema = false;
  } else if (axis == "diffaug") {
    v.diff_augment = false;
  } else {
    std::string known;
    for (const auto& a : ablation_axes()) known += (known.empty() ? "" : ", ") + a;
    throw ConfigError("unknown ablation axis '" + axis + "' (known: " + known + ")");
  }
  return v;
}

AblateResult cmd_ablate(const RunConfig& cfg, const AblateRequest& request) {
  if (cfg.model != ModelKind::CycleGanGuided) throw ConfigError("ablate applies to cyclegan_guided configs");
  std::vector<std::pair<std::string, RunConfig>> variants{{"base", cfg}};
  for (const auto& axis : request.axes) variants.emplace_back("no_" + axis, ablate_variant(cfg, axis));
  for (auto& [_, v] : variants) v.validate();
  const auto seeds = request.seeds.empty() ? std::vector<uint64_t>{cfg.seed} : request.seeds;
  const auto root = cfg.output_dir / "ablate";

  AblateResult result;
  std::optional<int64_t> tail;
  if (cfg.metrics.stability_tail_steps > 0) tail = cfg.metrics.stability_tail_steps;
  for (const auto& [name, base] : variants) {
    std::vector<double> variances;
    for (auto seed : seeds) {
      RunConfig run = base;
      run.seed = seed;
      run.output_dir = root / (name + "_s" + std::to_string(seed));
      auto trained = cmd_train(run);
      AblateEntry entry{name, seed, stability_indicators(LossLog::read_csv(trained.run_dir / "losses.csv"), tail),
                        std::nullopt};
      if (request.evaluate) {
        EvaluateRequest er;
        er.checkpoints = {trained.final_checkpoint};
        er.protocol = EvalProtocol::Unpaired;
        er.out_dir = trained.run_dir / "eval";
        entry.report = cmd_evaluate(er).front();
        entry.report->label = name + " (seed " + std::to_string(seed) + ")";
      }
      variances.push_back(entry.stability.d_loss_variance);
      result.entries.push_back(entry);
    }
    std::sort(variances.begin(), variances.end());
    const auto k = variances.size();
    result.median_d_loss_variance[name] =
        k % 2 == 1 ? variances[k / 2] : 0.5 * (variances[k / 2 - 1] + variances[k / 2]);
  }

  json j;
  j["seeds"] = seeds;
  j["axes"] = request.axes;
  j["stability_tail_steps"] = cfg.metrics.stability_tail_steps;
  json entries = json::array();
  for (const auto& e : result.entries) {
    json je{{"variant", e.variant},
            {"seed", e.seed},
            {"d_loss_variance", e.stability.d_loss_variance},
            {"epochs_to_stabilization", e.stability.epochs_to_stabilization},
            {"collapse_events", e.stability.collapse_events}};
    if (e.report) je["report"] = json::parse(e.report->to_json());
    entries.push_back(je);
  }
  j["runs"] = entries;
  j["median_d_loss_variance"] = result.median_d_loss_variance;
  if (result.median_d_loss_variance.count("no_sn")) {
    j["sn_lowers_d_loss_variance"] = result.median_d_loss_variance.at("base") < result.median_d_loss_variance.at("no_sn");
  }
  fs::create_directories(root);
  std::ofstream(root / "ablate_report.json") << j.dump(2) << "\n";

  std::ostringstream md;
  md << "| Variant | Seeds | Median D-loss variance |\n|---|---|---|\n";
  for (const auto& [name, _] : variants) {
    md << "| " << name << " | " << seeds.size() << " | " << csv_number(result.median_d_loss_variance.at(name))
       << " |\n";
  }
  if (result.median_d_loss_variance.count("no_sn")) {
    const bool lower = result.median_d_loss_variance.at("base") < result.median_d_loss_variance.at("no_sn");
    md << "\nSpectral norm " << (lower ? "lowers" : "does not lower")
       << " the median discriminator-loss variance on this task.\n";
  }
  std::vector<MetricReport> reports;
  for (const auto& e : result.entries) {
    if (e.report) reports.push_back(*e.report);
  }
  if (!reports.empty()) md << "\n" << render_markdown(reports);
  std::ofstream(root / "ablate_report.md") << md.str();
  return result;
}

std::vector<double> moving_average(const std::vector<double>& values, int window) {
  if (window < 1) throw ConfigError("smoothing window must be >= 1");
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    sum += values[i];
    if (i >= static_cast<size_t>(window)) sum -= values[i - window];
    out[i] = sum / static_cast<double>(std::min<size_t>(i + 1, window));
  }
  return out;
}

std::string cmd_plot(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, int smoothing_window) {
  if (run_dirs.empty()) throw ConfigError("plot needs at least one run directory");
  struct Curve {
    std::string label;
    std::vector<int64_t> steps;
    std::vector<double> smooth;
    StabilityIndicators stability;
    bool has_stability = false;
  };
  std::vector<Curve> curves;
  for (const auto& dir : run_dirs) {
    const auto csv = dir / "losses.csv";
    if (!fs::exists(csv)) throw Error("missing losses.csv in " + dir.string());
    auto log = LossLog::read_csv(csv);
    if (log.total.empty()) throw Error("empty losses.csv in " + dir.string());
    Curve c;
    c.label = dir.filename().string();
    if (fs::exists(dir / "config.snapshot.json")) {
      std::ifstream in(dir / "config.snapshot.json");
      json j = json::parse(in, nullptr, false);
      if (!j.is_discarded() && j.contains("model")) c.label += " (" + j["model"].get<std::string>() + ")";
    }
    c.steps = log.steps;
    c.smooth = moving_average(log.total, smoothing_window);
    if (log.epochs.back() >= 1) {
      c.stability = stability_indicators(log);
      c.has_stability = true;
    }
    curves.push_back(std::move(c));
  }

  constexpr double kW = 720, kH = 420, kLeft = 70, kRight = 220, kTop = 30, kBottom = 50;
  double y_lo = std::numeric_limits<double>::infinity(), y_hi = -y_lo, x_hi = 1;
  for (const auto& c : curves) {
    for (double v : c.smooth) {
      if (std::isfinite(v)) {
        y_lo = std::min(y_lo, v);
        y_hi = std::max(y_hi, v);
      }
    }
    x_hi = std::max(x_hi, static_cast<double>(c.steps.back()));
  }
  if (!(y_hi > y_lo)) y_hi = y_lo + 1.0;
  auto px = [&](double s) { return kLeft + (kW - kLeft - kRight) * s / x_hi; };
  auto py = [&](double v) { return kTop + (kH - kTop - kBottom) * (1.0 - (v - y_lo) / (y_hi - y_lo)); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream svg;
  svg << std::setprecision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
      << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << (kW - kRight + kLeft) / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">iteration</text>\n";
  svg << "<text x=\"16\" y=\"" << kH / 2 << "\" transform=\"rotate(-90 16 " << kH / 2
      << ")\" text-anchor=\"middle\">total loss (moving average " << smoothing_window << ")</text>\n";
  svg << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(y_hi) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << y_hi << "</text>\n";
  svg << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(y_lo) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << y_lo << "</text>\n";
  svg << "<text x=\"" << px(x_hi) << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"end\" font-size=\"11\">"
      << x_hi << "</text>\n";
  for (size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* colour = palette[i % std::size(palette)];
    svg << "<polyline class=\"curve\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (size_t k = 0; k < c.smooth.size(); ++k) {
      if (std::isfinite(c.smooth[k])) svg << px(static_cast<double>(c.steps[k])) << "," << py(c.smooth[k]) << " ";
    }
    svg << "\"/>\n";
    const double ly = kTop + 18.0 * static_cast<double>(i);
    svg << "<g class=\"legend-entry\"><line x1=\"" << kW - kRight + 12 << "\" y1=\"" << ly << "\" x2=\""
        << kW - kRight + 32 << "\" y2=\"" << ly << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/><text x=\""
        << kW - kRight + 38 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << c.label << "</text></g>\n";
  }
  svg << "</svg>\n";

  std::ostringstream table;
  table << "| Run | Epochs to stabilization | Final smoothed total |\n|---|---|---|\n";
  for (const auto& c : curves) {
    table << "| " << c.label << " | " << (c.has_stability ? std::to_string(c.stability.epochs_to_stabilization) : "n/a")
          << " | " << csv_number(c.smooth.back()) << " |\n";
  }
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "loss_curves.svg") << svg.str();
  std::ofstream(out_dir / "convergence.md") << table.str();
  return table.str();
}

}  // namespace facecycle
