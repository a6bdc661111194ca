#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "alea/activation.hpp"
#include "alea/adversary.hpp"
#include "alea/editor.hpp"
#include "alea/eval.hpp"
#include "alea/world.hpp"

namespace alea {

struct DataConfig {
  int train_scenes = 2000;
  double mix_ratio = 0.65;
  bool include_grounded = true;
  bool include_prior = true;
  int pope_per_scene = 2;
  double pope_bias_probability = 0.6;
  double bias_probability = 0.8;
  int eval_table_entries = 8;  // size of the second bias table (generalization)
  int activation_pool = 3000;
  int activation_pairs = 1500;
  int scan_factor = 4;
  int max_new = 64;
};

struct ModelShape {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int ffn_hidden = 256;
  int max_seq = 128;
};

struct LocateStageConfig {
  int n_pairs = 500;
  std::string pooling = "mean";
};

struct EditStageConfig {
  EditStageConfig() { edit.lambda = 1.0; }  // toy-scale weighting; 0.1 stays selectable

  EditConfig edit;
  int caption_pairs = 500;
  int pope_pairs = 200;
};

struct EvalStageConfig {
  int test_scenes = 200;
  int pope_scenes = 250;  // 6 items each
  int generalization_scenes = 250;
  int attention_scenes = 500;
  int heatmaps = 8;
  int max_new = 64;
  std::string candidate = "edited";  // or "base"
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  WorldConfig world;
  DataConfig data;
  ModelShape model;
  PretrainConfig pretrain;
  LocateStageConfig locate;
  PrefixTuneConfig prefix;
  EditStageConfig edit;
  EvalStageConfig eval;

  void validate() const;
};

// Full default document; every accepted key appears here.
nlohmann::json default_config_json();
nlohmann::json to_json(const PipelineConfig& c);
// Rejects unknown keys and mistyped values with a field path.
PipelineConfig config_from_json(const nlohmann::json& j);
// Overlays `patch` onto `base`; keys absent from `base` are errors.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& path = "");
// "edit.lambda=0.5"; the value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& config, std::string_view assignment);

inline constexpr std::array<std::string_view, 8> kStages = {"gen-data", "pretrain", "locate", "tune-prefix",
                                                            "edit",     "eval",     "ablate", "attention"};

std::map<std::string, std::uint64_t> seed_everything(std::uint64_t master);

// Exit codes of run_stage.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitGate = 3;

int exit_code_for(ErrorKind kind);

struct RunOptions {
  nlohmann::json config = default_config_json();
  bool config_given = false;  // --config or --set used
  std::filesystem::path run_dir;
  bool gate = false;
  bool quiet = false;
};

// Default run directory: $ALEA_RUN_DIR (or ./runs) / "seed-<seed>".
std::filesystem::path default_run_dir(std::uint64_t seed);

struct GateResult {
  bool pass = false;
  std::vector<std::string> reasons;
};

// Compare-mode gate: the candidate must strictly improve on the base.
GateResult evaluate_gate(const ChairReport& base, const ChairReport& candidate, const PopeReport& base_pope,
                         const PopeReport& candidate_pope);

// Runs one stage (or "all") in the run directory; never throws.
int run_stage(std::string_view stage, const RunOptions& options);

nlohmann::json edit_sample_to_json(const EditSample& s);
EditSample edit_sample_from_json(const nlohmann::json& j);

// Caption pairs from the activation set plus yes/no pairs asking about the
// most bias-prone absent object (gold "no").
std::vector<EditSample> build_edit_samples(const Tokenizer& tok, const std::vector<ActivationPair>& pairs,
                                           const BiasTable& bias, const std::vector<double>& corpus_frequency,
                                           int caption_pairs, int pope_pairs);

}  // namespace alea
