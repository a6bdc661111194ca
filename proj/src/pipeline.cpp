#include "alea/pipeline.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "alea/util.hpp"

namespace alea {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

json edit_config_json(const EditStageConfig& e) {
  return {{"lambda", e.edit.lambda},
          {"lr", e.edit.lr},
          {"weight_decay", e.edit.weight_decay},
          {"epochs", e.edit.epochs},
          {"batch_size", e.edit.batch_size},
          {"target_layer", e.edit.target_layer ? json(*e.edit.target_layer) : json(nullptr)},
          {"reference_max_new", e.edit.reference_max_new},
          {"caption_pairs", e.caption_pairs},
          {"pope_pairs", e.pope_pairs}};
}

std::string join_path(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

bool compatible(const json& expected, const json& given) {
  if (expected.is_null()) return given.is_null() || given.is_number_integer() || given.is_number_unsigned();
  if (expected.is_boolean()) return given.is_boolean();
  if (expected.is_string()) return given.is_string();
  if (expected.is_number_unsigned()) return given.is_number_unsigned();
  if (expected.is_number_integer()) return given.is_number_integer() || given.is_number_unsigned();
  if (expected.is_number_float()) return given.is_number();
  if (expected.is_object()) return given.is_object();
  return false;
}

std::string type_name(const json& j) {
  if (j.is_null()) return "null or integer";
  if (j.is_number_unsigned()) return "non-negative integer";
  if (j.is_number_integer()) return "integer";
  return j.type_name();
}

template <typename T>
void read_field(const json& section, const std::string& path, const char* key, T& out) {
  try {
    out = section.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, "config field " + join_path(path, key) + ": " + e.what());
  }
}

}  // namespace

json to_json(const PipelineConfig& c) {
  return {
      {"seed", c.seed},
      {"world",
       {{"grid_size", c.world.grid_size},
        {"n_objects", c.world.n_objects},
        {"n_attributes", c.world.n_attributes},
        {"min_objects", c.world.min_objects},
        {"max_objects", c.world.max_objects},
        {"swap_probability", c.world.swap_probability}}},
      {"data",
       {{"train_scenes", c.data.train_scenes},
        {"mix_ratio", c.data.mix_ratio},
        {"include_grounded", c.data.include_grounded},
        {"include_prior", c.data.include_prior},
        {"pope_per_scene", c.data.pope_per_scene},
        {"pope_bias_probability", c.data.pope_bias_probability},
        {"bias_probability", c.data.bias_probability},
        {"eval_table_entries", c.data.eval_table_entries},
        {"activation_pool", c.data.activation_pool},
        {"activation_pairs", c.data.activation_pairs},
        {"scan_factor", c.data.scan_factor},
        {"max_new", c.data.max_new}}},
      {"model",
       {{"n_layers", c.model.n_layers},
        {"d_model", c.model.d_model},
        {"n_heads", c.model.n_heads},
        {"ffn_hidden", c.model.ffn_hidden},
        {"max_seq", c.model.max_seq}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"lr", c.pretrain.lr},
        {"batch_size", c.pretrain.batch_size},
        {"weight_decay", c.pretrain.weight_decay},
        {"warmup_steps", c.pretrain.warmup_steps},
        {"min_lr_fraction", c.pretrain.min_lr_fraction},
        {"grad_clip", c.pretrain.grad_clip},
        {"probe_samples", c.pretrain.probe_samples}}},
      {"locate", {{"n_pairs", c.locate.n_pairs}, {"pooling", c.locate.pooling}}},
      {"prefix",
       {{"length", c.prefix.length},
        {"lr", c.prefix.lr},
        {"epochs", c.prefix.epochs},
        {"batch_size", c.prefix.batch_size},
        {"dataset_size", c.prefix.dataset_size}}},
      {"edit", edit_config_json(c.edit)},
      {"eval",
       {{"test_scenes", c.eval.test_scenes},
        {"pope_scenes", c.eval.pope_scenes},
        {"generalization_scenes", c.eval.generalization_scenes},
        {"attention_scenes", c.eval.attention_scenes},
        {"heatmaps", c.eval.heatmaps},
        {"max_new", c.eval.max_new},
        {"candidate", c.eval.candidate}}},
  };
}

json default_config_json() { return to_json(PipelineConfig{}); }

void merge_config(json& base, const json& patch, const std::string& path) {
  require(patch.is_object(), ErrorKind::kConfig,
          "config " + (path.empty() ? std::string("document") : "field " + path) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string field = join_path(path, it.key());
    require(base.contains(it.key()), ErrorKind::kConfig, "unknown config key " + field);
    json& slot = base[it.key()];
    require(compatible(slot, it.value()), ErrorKind::kConfig,
            "config field " + field + " expects " + type_name(slot) + ", got " + it.value().type_name());
    if (slot.is_object())
      merge_config(slot, it.value(), field);
    else if (slot.is_number_float())
      slot = it.value().get<double>();
    else
      slot = it.value();
  }
}

void apply_override(json& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string_view::npos && eq > 0, ErrorKind::kConfig,
          "override '" + std::string(assignment) + "' must look like key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    require(!part.empty(), ErrorKind::kConfig, "override key '" + key + "' has an empty segment");
    parts.push_back(part);
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_config(config, patch);
}

PipelineConfig config_from_json(const json& input) {
  json j = default_config_json();
  merge_config(j, input);

  PipelineConfig c;
  read_field(j, "", "seed", c.seed);
  const auto& w = j.at("world");
  read_field(w, "world", "grid_size", c.world.grid_size);
  read_field(w, "world", "n_objects", c.world.n_objects);
  read_field(w, "world", "n_attributes", c.world.n_attributes);
  read_field(w, "world", "min_objects", c.world.min_objects);
  read_field(w, "world", "max_objects", c.world.max_objects);
  read_field(w, "world", "swap_probability", c.world.swap_probability);
  const auto& d = j.at("data");
  read_field(d, "data", "train_scenes", c.data.train_scenes);
  read_field(d, "data", "mix_ratio", c.data.mix_ratio);
  read_field(d, "data", "include_grounded", c.data.include_grounded);
  read_field(d, "data", "include_prior", c.data.include_prior);
  read_field(d, "data", "pope_per_scene", c.data.pope_per_scene);
  read_field(d, "data", "pope_bias_probability", c.data.pope_bias_probability);
  read_field(d, "data", "bias_probability", c.data.bias_probability);
  read_field(d, "data", "eval_table_entries", c.data.eval_table_entries);
  read_field(d, "data", "activation_pool", c.data.activation_pool);
  read_field(d, "data", "activation_pairs", c.data.activation_pairs);
  read_field(d, "data", "scan_factor", c.data.scan_factor);
  read_field(d, "data", "max_new", c.data.max_new);
  const auto& m = j.at("model");
  read_field(m, "model", "n_layers", c.model.n_layers);
  read_field(m, "model", "d_model", c.model.d_model);
  read_field(m, "model", "n_heads", c.model.n_heads);
  read_field(m, "model", "ffn_hidden", c.model.ffn_hidden);
  read_field(m, "model", "max_seq", c.model.max_seq);
  const auto& p = j.at("pretrain");
  read_field(p, "pretrain", "epochs", c.pretrain.epochs);
  read_field(p, "pretrain", "lr", c.pretrain.lr);
  read_field(p, "pretrain", "batch_size", c.pretrain.batch_size);
  read_field(p, "pretrain", "weight_decay", c.pretrain.weight_decay);
  read_field(p, "pretrain", "warmup_steps", c.pretrain.warmup_steps);
  read_field(p, "pretrain", "min_lr_fraction", c.pretrain.min_lr_fraction);
  read_field(p, "pretrain", "grad_clip", c.pretrain.grad_clip);
  read_field(p, "pretrain", "probe_samples", c.pretrain.probe_samples);
  const auto& l = j.at("locate");
  read_field(l, "locate", "n_pairs", c.locate.n_pairs);
  read_field(l, "locate", "pooling", c.locate.pooling);
  const auto& x = j.at("prefix");
  read_field(x, "prefix", "length", c.prefix.length);
  read_field(x, "prefix", "lr", c.prefix.lr);
  read_field(x, "prefix", "epochs", c.prefix.epochs);
  read_field(x, "prefix", "batch_size", c.prefix.batch_size);
  read_field(x, "prefix", "dataset_size", c.prefix.dataset_size);
  const auto& e = j.at("edit");
  read_field(e, "edit", "lambda", c.edit.edit.lambda);
  read_field(e, "edit", "lr", c.edit.edit.lr);
  read_field(e, "edit", "weight_decay", c.edit.edit.weight_decay);
  read_field(e, "edit", "epochs", c.edit.edit.epochs);
  read_field(e, "edit", "batch_size", c.edit.edit.batch_size);
  if (!e.at("target_layer").is_null()) c.edit.edit.target_layer = e.at("target_layer").get<int>();
  read_field(e, "edit", "reference_max_new", c.edit.edit.reference_max_new);
  read_field(e, "edit", "caption_pairs", c.edit.caption_pairs);
  read_field(e, "edit", "pope_pairs", c.edit.pope_pairs);
  const auto& v = j.at("eval");
  read_field(v, "eval", "test_scenes", c.eval.test_scenes);
  read_field(v, "eval", "pope_scenes", c.eval.pope_scenes);
  read_field(v, "eval", "generalization_scenes", c.eval.generalization_scenes);
  read_field(v, "eval", "attention_scenes", c.eval.attention_scenes);
  read_field(v, "eval", "heatmaps", c.eval.heatmaps);
  read_field(v, "eval", "max_new", c.eval.max_new);
  read_field(v, "eval", "candidate", c.eval.candidate);
  c.validate();
  return c;
}

void PipelineConfig::validate() const {
  auto check = [](bool ok, const std::string& field, const std::string& what) {
    require(ok, ErrorKind::kConfig, "config field " + field + " " + what);
  };
  world.validate();
  check(data.train_scenes >= 1, "data.train_scenes", "must be >= 1");
  check(data.mix_ratio >= 0.0 && data.mix_ratio <= 1.0, "data.mix_ratio", "must be in [0,1]");
  check(data.pope_per_scene >= 0, "data.pope_per_scene", "must be >= 0");
  check(data.pope_bias_probability >= 0.0 && data.pope_bias_probability <= 1.0, "data.pope_bias_probability",
        "must be in [0,1]");
  check(data.bias_probability > 0.0 && data.bias_probability <= 1.0, "data.bias_probability", "must be in (0,1]");
  check(data.eval_table_entries >= 1, "data.eval_table_entries", "must be >= 1");
  check(data.activation_pairs >= 1, "data.activation_pairs", "must be >= 1");
  check(data.activation_pool >= data.activation_pairs, "data.activation_pool", "must be >= data.activation_pairs");
  check(data.scan_factor >= 1, "data.scan_factor", "must be >= 1");
  check(data.max_new >= 1, "data.max_new", "must be >= 1");
  check(model.n_layers >= 1, "model.n_layers", "must be >= 1");
  check(model.d_model >= 1, "model.d_model", "must be >= 1");
  check(model.n_heads >= 1 && model.d_model % model.n_heads == 0, "model.n_heads", "must divide model.d_model");
  check(model.ffn_hidden >= 1, "model.ffn_hidden", "must be >= 1");
  const int longest = std::max({data.max_new, eval.max_new, edit.edit.reference_max_new});
  check(world.n_cells() + prefix.length + 5 + longest <= model.max_seq, "model.max_seq",
        "is too short for grid cells + prefix + prompt + max_new");
  pretrain.validate();
  check(locate.n_pairs >= 1, "locate.n_pairs", "must be >= 1");
  check(locate.pooling == "mean" || locate.pooling == "last", "locate.pooling", "must be mean or last");
  prefix.validate();
  check(prefix.dataset_size <= data.activation_pairs, "prefix.dataset_size", "must be <= data.activation_pairs");
  edit.edit.validate();
  check(edit.edit.lambda > 0.0, "edit.lambda", "must be > 0");
  check(!edit.edit.target_layer || (*edit.edit.target_layer >= 1 && *edit.edit.target_layer <= model.n_layers),
        "edit.target_layer", "must be null or in [1, model.n_layers]");
  check(edit.caption_pairs >= 1 && edit.caption_pairs <= data.activation_pairs, "edit.caption_pairs",
        "must be in [1, data.activation_pairs]");
  check(edit.pope_pairs >= 0, "edit.pope_pairs", "must be >= 0");
  check(eval.test_scenes >= 1, "eval.test_scenes", "must be >= 1");
  check(eval.pope_scenes >= 1, "eval.pope_scenes", "must be >= 1");
  check(eval.generalization_scenes >= 1, "eval.generalization_scenes", "must be >= 1");
  check(eval.attention_scenes >= 1, "eval.attention_scenes", "must be >= 1");
  check(eval.heatmaps >= 0 && eval.heatmaps <= eval.attention_scenes, "eval.heatmaps",
        "must be in [0, eval.attention_scenes]");
  check(eval.max_new >= 1, "eval.max_new", "must be >= 1");
  check(eval.candidate == "edited" || eval.candidate == "base", "eval.candidate", "must be edited or base");
}

std::map<std::string, std::uint64_t> seed_everything(std::uint64_t master) {
  std::map<std::string, std::uint64_t> seeds;
  for (auto stage : kStages) seeds[std::string(stage)] = derive_seed(master, stage);
  return seeds;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kDependency: return kExitValidation;
    default: return kExitRuntime;
  }
}

fs::path default_run_dir(std::uint64_t seed) {
  const char* root = std::getenv("ALEA_RUN_DIR");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return base / ("seed-" + std::to_string(seed));
}

GateResult evaluate_gate(const ChairReport& base, const ChairReport& candidate, const PopeReport& base_pope,
                         const PopeReport& candidate_pope) {
  GateResult g;
  auto need = [&](bool ok, std::string reason) {
    if (!ok) g.reasons.push_back(std::move(reason));
  };
  need(candidate.chair_i < base.chair_i, "CHAIR_i did not decrease");
  need(candidate.chair_i <= 0.75 * base.chair_i, "CHAIR_i above 0.75x base");
  need(candidate.chair_s <= 0.85 * base.chair_s, "CHAIR_s above 0.85x base");
  need(base.recall - candidate.recall <= 0.05, "recall dropped by more than 0.05");
  for (auto s : kPopeSettings)
    need(candidate_pope.at(s).accuracy >= base_pope.at(s).accuracy,
         "POPE " + std::string(to_string(s)) + " accuracy below base");
  g.pass = g.reasons.empty();
  return g;
}

// ---------------------------------------------------------------------------
// Edit samples

json edit_sample_to_json(const EditSample& s) {
  return {{"schema_version", kSchemaVersion}, {"scene", scene_to_json(s.scene)}, {"prompt_ids", s.prompt},
          {"positive_ids", s.positive},       {"negative_ids", s.negative},      {"source", s.source}};
}

EditSample edit_sample_from_json(const json& j) {
  try {
    require(j.at("schema_version").get<int>() == kSchemaVersion, ErrorKind::kFormat,
            "edit sample schema_version mismatch");
    return EditSample{scene_from_json(j.at("scene")), j.at("prompt_ids").get<std::vector<int>>(),
                      j.at("positive_ids").get<std::vector<int>>(), j.at("negative_ids").get<std::vector<int>>(),
                      j.at("source").get<std::string>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed edit sample: ") + e.what());
  }
}

std::vector<EditSample> build_edit_samples(const Tokenizer& tok, const std::vector<ActivationPair>& pairs,
                                           const BiasTable& bias, const std::vector<double>& corpus_frequency,
                                           int caption_pairs, int pope_pairs) {
  require(!pairs.empty(), ErrorKind::kDataset, "build_edit_samples: no activation pairs");
  std::vector<EditSample> out;
  const std::size_t n = pairs.size();
  const std::size_t n_caption = std::min(n, static_cast<std::size_t>(caption_pairs));
  const auto benign = tok.prompt(PromptKind::kBenign);
  for (std::size_t i = 0; i < n_caption; ++i)
    out.push_back({pairs[i].scene, benign, pairs[i].positive_response, pairs[i].negative_response, "caption"});

  int added = 0;
  for (std::size_t k = 0; k < n && added < pope_pairs; ++k) {
    const Scene& scene = pairs[(n_caption + k) % n].scene;
    const auto present = scene.present_objects();
    int best = -1;
    for (int o = 0; o < static_cast<int>(corpus_frequency.size()); ++o) {
      if (scene.contains(o)) continue;
      if (best < 0) {
        best = o;
        continue;
      }
      const double a = bias.affinity(o, present), b = bias.affinity(best, present);
      if (a > b || (a == b && corpus_frequency[o] > corpus_frequency[best])) best = o;
    }
    if (best < 0) continue;
    out.push_back({scene, tok.prompt(PromptKind::kPope, best), pope_response(tok, false), pope_response(tok, true),
                   "pope"});
    ++added;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run directory

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_EXCL, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        const auto written = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        require(written == static_cast<ssize_t>(pid.size()), ErrorKind::kIo, "cannot write lock file");
        held_ = true;
        return;
      }
      require(errno == EEXIST, ErrorKind::kIo, "cannot create lock file " + path_.string());
      // A lock left by a dead process is stale.
      const std::string owner = read_file(path_);
      const long pid = std::strtol(owner.c_str(), nullptr, 10);
      if (pid > 0 && (::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM))
        fail(ErrorKind::kDependency, "run directory " + path_.parent_path().string() + " is locked by process " +
                                         std::to_string(pid));
      fs::remove(path_);
    }
    fail(ErrorKind::kDependency, "could not acquire lock " + path_.string());
  }
  ~RunLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  bool held_ = false;
};

// Owns the manifest of one run directory. Every file written through it is
// digested; every file read through it is checked against that digest.
class RunContext {
 public:
  RunContext(fs::path dir, const RunOptions& options) : dir_(std::move(dir)), quiet_(options.quiet) {
    fs::create_directories(dir_);
    lock_.emplace(dir_);
    for (const char* sub : {"data", "ckpt", "reports", "heatmaps"}) fs::create_directories(dir_ / sub);
    const fs::path manifest_path = dir_ / "manifest.json";
    if (fs::exists(manifest_path)) {
      manifest_ = json::parse(read_file(manifest_path), nullptr, false);
      require(!manifest_.is_discarded() && manifest_.is_object(), ErrorKind::kFormat,
              "malformed manifest " + manifest_path.string());
    } else {
      manifest_ = {{"schema_version", kSchemaVersion},
                   {"run_id", dir_.filename().string()},
                   {"created", utc_timestamp()},
                   {"schema_versions",
                    {{"manifest", kSchemaVersion}, {"jsonl", kSchemaVersion}, {"reports", kSchemaVersion},
                     {"container", "ALEA1"}}},
                   {"stages", json::object()},
                   {"files", json::object()},
                   {"events", json::array()}};
    }
    json config = default_config_json();
    if (options.config_given || !manifest_.contains("config")) {
      config = options.config;
    } else {
      merge_config(config, manifest_.at("config"));
    }
    config_ = config_from_json(config);
    if (manifest_.contains("config") && manifest_.at("config") != to_json(config_)) event("config", "config replaced");
    manifest_["config"] = to_json(config_);
    manifest_["master_seed"] = config_.seed;
    json seeds = json::object();
    for (const auto& [k, v] : seed_everything(config_.seed)) seeds[k] = v;
    manifest_["seeds"] = seeds;
    save_manifest();
  }

  const PipelineConfig& config() const { return config_; }
  std::uint64_t seed(std::string_view stage) const { return derive_seed(config_.seed, stage); }
  fs::path path(const std::string& rel) const { return dir_ / rel; }

  void log(const std::string& msg) const {
    if (!quiet_) std::cerr << "[alea] " << msg << std::endl;
  }

  void event(const std::string& stage, const std::string& what) {
    manifest_["events"].push_back({{"time", utc_timestamp()}, {"stage", stage}, {"event", what}});
  }

  void begin(const std::string& stage) {
    manifest_["stages"][stage] = {{"status", "running"}, {"started", utc_timestamp()}};
    event(stage, "started");
    save_manifest();
    started_ = std::chrono::steady_clock::now();
  }

  void finish(const std::string& stage, const std::string& status) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    auto& s = manifest_["stages"][stage];
    s["status"] = status;
    s["finished"] = utc_timestamp();
    s["seconds"] = secs;
    event(stage, status);
    save_manifest();
  }

  void write(const std::string& rel, std::string_view contents, const std::string& stage) {
    const fs::path p = path(rel);
    fs::create_directories(p.parent_path());
    write_file_atomic(p, contents);
    record(rel, stage);
  }
  void write_json(const std::string& rel, const json& j, const std::string& stage) { write(rel, dump(j), stage); }

  // For files written by other means (checkpoint containers).
  void record(const std::string& rel, const std::string& stage) {
    manifest_["files"][rel] = {{"digest", sha256_file(path(rel))},
                               {"bytes", fs::file_size(path(rel))},
                               {"stage", stage}};
    save_manifest();
  }

  // Missing inputs name the stage that produces them.
  void require_inputs(const std::string& stage, const std::vector<std::pair<std::string, std::string>>& inputs) const {
    std::vector<std::string> stages, files;
    for (const auto& [rel, producer] : inputs) {
      if (fs::exists(path(rel)) && manifest_["files"].contains(rel)) continue;
      if (std::find(stages.begin(), stages.end(), producer) == stages.end()) stages.push_back(producer);
      files.push_back(rel);
    }
    if (stages.empty()) return;
    std::string msg = "stage '" + stage + "' requires prior stage";
    msg += stages.size() > 1 ? "s " : " ";
    for (std::size_t i = 0; i < stages.size(); ++i) msg += (i ? ", '" : "'") + stages[i] + "'";
    msg += " (missing";
    for (const auto& f : files) msg += " " + f;
    msg += ")";
    fail(ErrorKind::kDependency, msg);
  }

  fs::path checked(const std::string& rel) const {
    const auto& files = manifest_["files"];
    require(files.contains(rel), ErrorKind::kDependency, rel + " is not recorded in the manifest");
    const std::string actual = sha256_file(path(rel));
    require(actual == files[rel]["digest"].get<std::string>(), ErrorKind::kDependency,
            rel + " does not match its manifest digest; rerun stage '" + files[rel]["stage"].get<std::string>() +
                "'");
    return path(rel);
  }
  std::string read(const std::string& rel) const { return read_file(checked(rel)); }
  json read_json(const std::string& rel) const {
    auto j = json::parse(read(rel), nullptr, false);
    require(!j.is_discarded(), ErrorKind::kFormat, "malformed JSON in " + rel);
    return j;
  }
  std::vector<json> read_jsonl(const std::string& rel) const { return parse_jsonl(read(rel)); }

 private:
  void save_manifest() { write_file_atomic(dir_ / "manifest.json", dump(manifest_)); }

  fs::path dir_;
  bool quiet_;
  std::optional<RunLock> lock_;
  json manifest_;
  PipelineConfig config_;
  std::chrono::steady_clock::time_point started_;
};

// ---------------------------------------------------------------------------
// Shared loaders

json scene_row(const Scene& s) { return {{"schema_version", kSchemaVersion}, {"scene", scene_to_json(s)}}; }

std::string scenes_jsonl(const std::vector<Scene>& scenes) {
  std::vector<json> rows;
  rows.reserve(scenes.size());
  for (const auto& s : scenes) rows.push_back(scene_row(s));
  return to_jsonl(rows);
}

std::vector<Scene> load_scenes(const RunContext& run, const std::string& rel) {
  std::vector<Scene> out;
  for (const auto& row : run.read_jsonl(rel)) {
    require(row.value("schema_version", 0) == kSchemaVersion, ErrorKind::kFormat, rel + ": schema_version mismatch");
    out.push_back(scene_from_json(row.at("scene")));
  }
  return out;
}

struct WorldData {
  BiasTable table_a, table_b;
  std::vector<double> frequency;
};

WorldData load_world(const RunContext& run) {
  const auto j = run.read_json("data/bias_tables.json");
  try {
    return WorldData{bias_table_from_json(j.at("edit_table")), bias_table_from_json(j.at("eval_table")),
                     j.at("corpus_frequency").get<std::vector<double>>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed data/bias_tables.json: ") + e.what());
  }
}

std::vector<ActivationPair> load_pairs(const RunContext& run) {
  std::vector<ActivationPair> out;
  for (const auto& row : run.read_jsonl("data/activation_pairs.jsonl")) out.push_back(pair_from_json(row));
  return out;
}

std::vector<EditSample> load_edit_samples(const RunContext& run) {
  std::vector<EditSample> out;
  for (const auto& row : run.read_jsonl("data/edit_samples.jsonl")) out.push_back(edit_sample_from_json(row));
  return out;
}

ToyVLM<float> load_model(const RunContext& run, const std::string& rel) { return load_checkpoint(run.checked(rel)); }

EditConfig stage_edit_config(const RunContext& run) {
  EditConfig ec = run.config().edit.edit;
  ec.seed = derive_seed(run.seed("edit"), "shuffle");
  return ec;
}

const std::vector<std::pair<std::string, std::string>> kBaseInputs = {{"data/bias_tables.json", "gen-data"},
                                                                      {"ckpt/base.alea", "pretrain"}};

// ---------------------------------------------------------------------------
// Stages

void stage_gen_data(RunContext& run) {
  const auto& c = run.config();
  const std::string stage = "gen-data";
  const auto s = run.seed(stage);
  const Tokenizer tok(c.world);

  BiasTable table_a = default_bias_table(c.data.bias_probability);
  table_a.table_id = "A";
  Rng table_rng(derive_seed(s, "eval-table"));
  const BiasTable table_b =
      random_bias_table(table_rng, c.world, c.data.eval_table_entries, c.data.bias_probability, "B");

  const auto train = generate_scenes(derive_seed(s, "train"), c.world, c.data.train_scenes, 0);
  CorpusOptions opts;
  opts.mix_ratio = c.data.mix_ratio;
  opts.include_grounded = c.data.include_grounded;
  opts.include_prior = c.data.include_prior;
  opts.pope_per_scene = c.data.pope_per_scene;
  opts.pope_bias_probability = c.data.pope_bias_probability;
  Rng corpus_rng(derive_seed(s, "corpus"));
  const auto corpus = build_pretrain_corpus(tok, train, table_a, c.world, opts, corpus_rng);
  const auto frequency = corpus_object_frequency(tok, corpus, c.world.n_objects);

  const auto pool = generate_scenes(derive_seed(s, "pool"), c.world, c.data.activation_pool, 1'000'000);
  const auto eval = generate_scenes(derive_seed(s, "eval"), c.world, c.eval.test_scenes, 2'000'000);
  const auto pope_scenes = generate_scenes(derive_seed(s, "pope"), c.world, c.eval.pope_scenes, 3'000'000);
  const auto general = generate_scenes(derive_seed(s, "generalization"), c.world, c.eval.generalization_scenes, 4'000'000);
  const auto attention = generate_scenes(derive_seed(s, "attention"), c.world, c.eval.attention_scenes, 5'000'000);
  std::vector<std::string> warnings;
  Rng pope_rng(derive_seed(s, "pope-items"));
  const auto pope = build_pope_dataset(pope_scenes, table_a, frequency, c.world, pope_rng, &warnings);

  std::vector<json> rows;
  rows.reserve(corpus.size());
  int biased = 0;
  for (const auto& sample : corpus) {
    rows.push_back(sample_to_json(sample));
    biased += std::count(sample.flags.begin(), sample.flags.end(), "biased") > 0 ? 1 : 0;
  }
  run.write("data/corpus.jsonl", to_jsonl(rows), stage);
  rows.clear();
  for (const auto& item : pope) rows.push_back(pope_item_to_json(item));
  run.write("data/pope.jsonl", to_jsonl(rows), stage);
  run.write("data/pool_scenes.jsonl", scenes_jsonl(pool), stage);
  run.write("data/eval_scenes.jsonl", scenes_jsonl(eval), stage);
  run.write("data/generalization_scenes.jsonl", scenes_jsonl(general), stage);
  run.write("data/attention_scenes.jsonl", scenes_jsonl(attention), stage);
  run.write_json("data/bias_tables.json",
                 {{"schema_version", kSchemaVersion},
                  {"edit_table", bias_table_to_json(table_a)},
                  {"eval_table", bias_table_to_json(table_b)},
                  {"corpus_frequency", frequency}},
                 stage);
  run.write_json("reports/data.json",
                 {{"schema_version", kSchemaVersion},
                  {"corpus_samples", corpus.size()},
                  {"biased_samples", biased},
                  {"train_scenes", train.size()},
                  {"pool_scenes", pool.size()},
                  {"eval_scenes", eval.size()},
                  {"pope_items", pope.size()},
                  {"generalization_scenes", general.size()},
                  {"attention_scenes", attention.size()},
                  {"warnings", warnings}},
                 stage);
  run.log("gen-data: " + std::to_string(corpus.size()) + " corpus samples, " + std::to_string(pope.size()) +
          " POPE items");
}

void stage_pretrain(RunContext& run) {
  const auto& c = run.config();
  const std::string stage = "pretrain";
  run.require_inputs(stage, {{"data/corpus.jsonl", "gen-data"}});
  const auto s = run.seed(stage);
  const Tokenizer tok(c.world);
  std::vector<CaptionSample> corpus;
  for (const auto& row : run.read_jsonl("data/corpus.jsonl")) corpus.push_back(sample_from_json(row));

  VLMConfig vc = VLMConfig::for_world(c.world, tok);
  vc.n_layers = c.model.n_layers;
  vc.d_model = c.model.d_model;
  vc.n_heads = c.model.n_heads;
  vc.ffn_hidden = c.model.ffn_hidden;
  vc.max_seq = c.model.max_seq;
  vc.seed = derive_seed(s, "init");
  auto model = ToyVLM<float>::initialize(vc, vc.seed);
  PretrainConfig pc = c.pretrain;
  pc.seed = derive_seed(s, "shuffle");
  run.log("pretrain: " + std::to_string(model.parameter_count()) + " parameters, " + std::to_string(corpus.size()) +
          " samples x " + std::to_string(pc.epochs) + " epochs");
  const auto result = train_base(model, corpus, pc);
  model.freeze_all();
  save_checkpoint(model, run.path("ckpt/base.alea"), {{"stage", stage}});
  run.record("ckpt/base.alea", stage);
  run.write_json("reports/pretrain.json",
                 {{"schema_version", kSchemaVersion},
                  {"parameters", model.parameter_count()},
                  {"initial_nll", result.initial_nll},
                  {"final_nll", result.final_nll},
                  {"epoch_loss", result.epoch_loss},
                  {"steps", result.steps}},
                 stage);
  run.log("pretrain: probe NLL " + std::to_string(result.initial_nll) + " -> " + std::to_string(result.final_nll));
}

void stage_locate(RunContext& run) {
  const auto& c = run.config();
  const std::string stage = "locate";
  auto inputs = kBaseInputs;
  inputs.push_back({"data/pool_scenes.jsonl", "gen-data"});
  run.require_inputs(stage, inputs);
  const Tokenizer tok(c.world);
  const auto world = load_world(run);
  const auto base = load_model(run, "ckpt/base.alea");
  const auto pool = load_scenes(run, "data/pool_scenes.jsonl");

  Rng rng(derive_seed(run.seed(stage), "fallback"));
  ActivationStats stats;
  const auto pairs = build_activation_dataset(base, tok, pool, c.data.activation_pairs, world.table_a, c.world, rng,
                                              c.data.max_new, c.data.scan_factor, &stats);
  std::vector<json> rows;
  for (const auto& p : pairs) rows.push_back(pair_to_json(p));
  run.write("data/activation_pairs.jsonl", to_jsonl(rows), stage);

  const auto report = locate_layer(base, pairs, c.locate.n_pairs, pooling_from_string(c.locate.pooling));
  json j = to_json(report);
  j["activation"] = {{"scanned", stats.scanned},
                     {"model_pairs", stats.model_pairs},
                     {"fallback_pairs", stats.fallback_pairs},
                     {"yield", stats.yield()}};
  run.write_json("reports/locate.json", j, stage);
  run.log("locate: layer " + std::to_string(report.layer) + " (" + report.target_tensor + "), " +
          std::to_string(stats.model_pairs) + "/" + std::to_string(stats.scanned) + " model pairs");
}

void stage_tune_prefix(RunContext& run) {
  const auto& c = run.config();
  const std::string stage = "tune-prefix";
  auto inputs = kBaseInputs;
  inputs.push_back({"data/activation_pairs.jsonl", "locate"});
  inputs.push_back({"data/eval_scenes.jsonl", "gen-data"});
  run.require_inputs(stage, inputs);
  const auto s = run.seed(stage);
  const Tokenizer tok(c.world);
  const auto base = load_model(run, "ckpt/base.alea");
  const auto pairs = load_pairs(run);
  const auto eval = load_scenes(run, "data/eval_scenes.jsonl");

  std::vector<PrefixSample> samples;
  const auto benign = tok.prompt(PromptKind::kBenign);
  const std::size_t n = std::min(pairs.size(), static_cast<std::size_t>(c.prefix.dataset_size));
  for (std::size_t i = 0; i < n; ++i) samples.push_back({pairs[i].scene, benign, pairs[i].negative_response});
  PrefixTuneConfig pc = c.prefix;
  pc.seed = derive_seed(s, "shuffle");
  const auto init = init_prefix(derive_seed(s, "init"), pc.length, base.config().d_model);
  const auto result = tune_prefix(base, samples, pc, init);
  const auto effect = adversarial_effect(base, result.prefix, tok, eval, c.eval.max_new);
  save_prefix(result.prefix, run.path("ckpt/prefix.alea"));
  run.record("ckpt/prefix.alea", stage);
  json j = to_json(result);
  j["n_samples"] = samples.size();
  j["adversarial_effect"] = {{"hallu_rate_benign", effect.hallu_rate_benign},
                             {"hallu_rate_prefixed", effect.hallu_rate_prefixed},
                             {"n", effect.n}};
  run.write_json("reports/prefix.json", j, stage);
  run.log("tune-prefix: L_q " + std::to_string(result.initial_loss) + " -> " + std::to_string(result.final_loss) +
          ", hallucination rate " + std::to_string(effect.hallu_rate_benign) + " -> " +
          std::to_string(effect.hallu_rate_prefixed));
}

void stage_edit(RunContext& run) {
  const auto& c = run.config();
  const std::string stage = "edit";
  auto inputs = kBaseInputs;
  inputs.push_back({"reports/locate.json", "locate"});
  inputs.push_back({"data/activation_pairs.jsonl", "locate"});
  inputs.push_back({"ckpt/prefix.alea", "tune-prefix"});
  run.require_inputs(stage, inputs);
  const Tokenizer tok(c.world);
  const auto world = load_world(run);
  const auto base = load_model(run, "ckpt/base.alea");
  const auto locate = locate_report_from_json(run.read_json("reports/locate.json"));
  const auto pairs = load_pairs(run);
  const auto prefix = load_prefix(run.checked("ckpt/prefix.alea"));

  const auto samples = build_edit_samples(tok, pairs, world.table_a, world.frequency, c.edit.caption_pairs,
                                          c.edit.pope_pairs);
  std::vector<json> rows;
  for (const auto& e : samples) rows.push_back(edit_sample_to_json(e));
  run.write("data/edit_samples.jsonl", to_jsonl(rows), stage);

  auto result = edit_parameters(base, &prefix, samples, stage_edit_config(run), locate, tok.eos());
  save_checkpoint(result.model, run.path("ckpt/edited.alea"),
                  {{"stage", stage}, {"target_tensor", result.report.target_tensor}, {"prefix_id", prefix.id}});
  run.record("ckpt/edited.alea", stage);

  // Locality is re-proved from the two files on disk.
  const auto changed = verify_locality(container_digests(load_container(run.checked("ckpt/base.alea"))),
                                       container_digests(load_container(run.checked("ckpt/edited.alea"))));
  json j = to_json(result.report);
  j["checkpoint_changed_tensors"] = changed;
  run.write_json("reports/edit.json", j, stage);
  run.log("edit: " + result.report.target_tensor + " over " + std::to_string(samples.size()) + " samples");
}

int stage_eval(RunContext& run, bool gate) {
  const auto& c = run.config();
  const std::string stage = "eval";
  auto inputs = kBaseInputs;
  inputs.push_back({"data/eval_scenes.jsonl", "gen-data"});
  inputs.push_back({"data/pope.jsonl", "gen-data"});
  inputs.push_back({"data/generalization_scenes.jsonl", "gen-data"});
  const bool edited = c.eval.candidate == "edited";
  if (edited) inputs.push_back({"ckpt/edited.alea", "edit"});
  run.require_inputs(stage, inputs);
  const Tokenizer tok(c.world);
  const auto world = load_world(run);
  const auto base = load_model(run, "ckpt/base.alea");
  const auto candidate = edited ? load_model(run, "ckpt/edited.alea") : base.clone();
  const auto scenes = load_scenes(run, "data/eval_scenes.jsonl");
  std::vector<PopeItem> pope;
  for (const auto& row : run.read_jsonl("data/pope.jsonl")) pope.push_back(pope_item_from_json(row));
  const auto general = load_scenes(run, "data/generalization_scenes.jsonl");

  const auto chair_base = chair_eval(base, tok, scenes, PromptKind::kBenign, c.eval.max_new);
  const auto chair_cand = chair_eval(candidate, tok, scenes, PromptKind::kBenign, c.eval.max_new);
  const auto pope_base = pope_eval(base, tok, pope);
  const auto pope_cand = pope_eval(candidate, tok, pope);
  const double kl = probe_kl(candidate, base, tok, scenes, PromptKind::kBenign, c.eval.max_new);
  Rng rng(derive_seed(run.seed(stage), "generalization"));
  const auto gen = generalization_eval(base, candidate, tok, world.table_a, world.table_b, general, world.frequency,
                                       c.world, rng);
  const auto g = evaluate_gate(chair_base, chair_cand, pope_base, pope_cand);

  run.write_json("reports/chair.json",
                 {{"schema_version", kSchemaVersion},
                  {"candidate", c.eval.candidate},
                  {"base", to_json(chair_base)},
                  {"candidate_report", to_json(chair_cand)}},
                 stage);
  run.write("reports/chair_base.csv", to_csv(chair_base), stage);
  run.write("reports/chair_candidate.csv", to_csv(chair_cand), stage);
  run.write_json("reports/pope.json",
                 {{"schema_version", kSchemaVersion},
                  {"candidate", c.eval.candidate},
                  {"base", to_json(pope_base)},
                  {"candidate_report", to_json(pope_cand)}},
                 stage);
  run.write("reports/pope_base.csv", to_csv(pope_base), stage);
  run.write("reports/pope_candidate.csv", to_csv(pope_cand), stage);
  run.write_json("reports/generalization.json", to_json(gen), stage);

  json pope_delta = json::object();
  for (auto s : kPopeSettings)
    pope_delta[std::string(to_string(s))] = pope_cand.at(s).accuracy - pope_base.at(s).accuracy;
  run.write_json("reports/eval.json",
                 {{"schema_version", kSchemaVersion},
                  {"candidate", c.eval.candidate},
                  {"chair_i", {{"base", chair_base.chair_i}, {"candidate", chair_cand.chair_i}}},
                  {"chair_s", {{"base", chair_base.chair_s}, {"candidate", chair_cand.chair_s}}},
                  {"recall", {{"base", chair_base.recall}, {"candidate", chair_cand.recall}}},
                  {"pope_accuracy_delta", pope_delta},
                  {"probe_kl", kl},
                  {"gate", {{"pass", g.pass}, {"reasons", g.reasons}}}},
                 stage);
  run.log("eval: CHAIR_i " + std::to_string(chair_base.chair_i) + " -> " + std::to_string(chair_cand.chair_i) +
          ", CHAIR_s " + std::to_string(chair_base.chair_s) + " -> " + std::to_string(chair_cand.chair_s) +
          ", KL " + std::to_string(kl));
  if (gate && !g.pass) {
    std::cerr << "[alea] gate failed:";
    for (const auto& r : g.reasons) std::cerr << " " << r << ";";
    std::cerr << std::endl;
    return kExitGate;
  }
  return kExitOk;
}

void stage_ablate(RunContext& run) {
  const auto& c = run.config();
  const std::string stage = "ablate";
  auto inputs = kBaseInputs;
  inputs.push_back({"reports/locate.json", "locate"});
  inputs.push_back({"ckpt/prefix.alea", "tune-prefix"});
  inputs.push_back({"data/edit_samples.jsonl", "edit"});
  inputs.push_back({"data/eval_scenes.jsonl", "gen-data"});
  run.require_inputs(stage, inputs);
  const Tokenizer tok(c.world);
  const auto base = load_model(run, "ckpt/base.alea");
  const auto locate = locate_report_from_json(run.read_json("reports/locate.json"));
  const auto prefix = load_prefix(run.checked("ckpt/prefix.alea"));

  AblationInputs in;
  in.base = &base;
  in.tok = &tok;
  in.prefix = &prefix;
  in.locate = &locate;
  in.edit_samples = load_edit_samples(run);
  in.edit = stage_edit_config(run);
  in.eval_scenes = load_scenes(run, "data/eval_scenes.jsonl");
  in.max_new = c.eval.max_new;
  in.seed = derive_seed(run.seed(stage), "location");
  const auto table = ablation_suite(in);
  run.write_json("reports/ablation.json", to_json(table), stage);
  run.write("reports/ablation.csv", to_csv(table), stage);
  run.log("ablate: " + std::to_string(table.violations.size()) + " variant(s) beat the full method on CHAIR_i");
}

void stage_attention(RunContext& run) {
  const auto& c = run.config();
  const std::string stage = "attention";
  auto inputs = kBaseInputs;
  inputs.push_back({"ckpt/edited.alea", "edit"});
  inputs.push_back({"data/attention_scenes.jsonl", "gen-data"});
  run.require_inputs(stage, inputs);
  const Tokenizer tok(c.world);
  const auto base = load_model(run, "ckpt/base.alea");
  const auto edited = load_model(run, "ckpt/edited.alea");
  const auto scenes = load_scenes(run, "data/attention_scenes.jsonl");

  const auto rb = attention_proportion(base, tok, scenes);
  const auto re = attention_proportion(edited, tok, scenes);
  run.write_json("reports/attention.json",
                 {{"schema_version", kSchemaVersion},
                  {"base", to_json(rb)},
                  {"edited", to_json(re)},
                  {"delta", re.mean - rb.mean},
                  {"edited_greater", re.mean > rb.mean}},
                 stage);
  for (int i = 0; i < c.eval.heatmaps; ++i) {
    const auto& scene = scenes[static_cast<std::size_t>(i)];
    const Matrixd mb = visual_attention_map(base, tok, scene);
    const Matrixd me = visual_attention_map(edited, tok, scene);
    const double top = std::max({mb.maxCoeff(), me.maxCoeff(), 1e-12});
    const std::string stem = "heatmaps/scene-" + std::to_string(scene.scene_id);
    for (const auto& [suffix, map] : {std::pair{"-base.pgm", &mb}, std::pair{"-edited.pgm", &me}}) {
      const std::string rel = stem + suffix;
      write_pgm(run.path(rel), *map, top);
      run.record(rel, stage);
    }
  }
  run.log("attention: visual share " + std::to_string(rb.mean) + " -> " + std::to_string(re.mean));
}

int dispatch(RunContext& run, std::string_view stage, bool gate) {
  const std::string name(stage);
  run.begin(name);
  int code = kExitOk;
  try {
    if (stage == "gen-data") stage_gen_data(run);
    else if (stage == "pretrain") stage_pretrain(run);
    else if (stage == "locate") stage_locate(run);
    else if (stage == "tune-prefix") stage_tune_prefix(run);
    else if (stage == "edit") stage_edit(run);
    else if (stage == "eval") code = stage_eval(run, gate);
    else if (stage == "ablate") stage_ablate(run);
    else if (stage == "attention") stage_attention(run);
  } catch (const Error& e) {
    run.finish(name, "failed");
    throw;
  } catch (const std::exception& e) {
    run.finish(name, "failed");
    throw;
  }
  run.finish(name, code == kExitGate ? "gate_failed" : "ok");
  return code;
}

}  // namespace

int run_stage(std::string_view stage, const RunOptions& options) {
  const bool known = stage == "all" || std::find(kStages.begin(), kStages.end(), stage) != kStages.end();
  if (!known) {
    std::cerr << "[alea] error: unknown stage '" << stage << "'" << std::endl;
    return kExitValidation;
  }
  try {
    const PipelineConfig validated = config_from_json(options.config);
    const fs::path dir = options.run_dir.empty() ? default_run_dir(validated.seed) : options.run_dir;
    RunContext run(dir, options);
    if (stage != "all") return dispatch(run, stage, options.gate);
    int code = kExitOk;
    for (auto s : kStages) {
      const int c = dispatch(run, s, options.gate);
      if (c != kExitOk) code = c;
    }
    return code;
  } catch (const Error& e) {
    std::cerr << "[alea] error: " << e.what() << std::endl;
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "[alea] error: " << e.what() << std::endl;
    return kExitRuntime;
  }
}

}  // namespace alea
