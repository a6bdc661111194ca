#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "alea/adversary.hpp"
#include "alea/editor.hpp"
#include "alea/locate.hpp"
#include "alea/model.hpp"
#include "alea/world.hpp"

namespace alea {

// ---------------------------------------------------------------------------
// CHAIR

struct ChairDetail {
  std::uint64_t scene_id = 0;
  std::vector<int> tokens;
  int mentions = 0;      // distinct objects mentioned
  int hallucinated = 0;  // distinct mentioned objects absent from the scene
  int recalled = 0;      // distinct present objects mentioned
  int ground_truth = 0;  // present objects
  bool parse_failed = false;
};

struct ChairReport {
  double chair_s = 0.0;
  double chair_i = 0.0;
  double recall = 0.0;
  double mean_len = 0.0;
  int n_captions = 0;
  int mentions = 0;
  int hallucinated_mentions = 0;
  int hallucinated_captions = 0;
  int recalled = 0;
  int ground_truth = 0;
  std::vector<std::string> flags;
  std::vector<ChairDetail> details;
};

ChairDetail chair_detail(const Tokenizer& tok, const Scene& scene, const std::vector<int>& caption);

// Corpus-pooled metrics over precomputed captions. An unparseable caption
// counts as one hallucinated mention with nothing recalled.
ChairReport chair_from_captions(const Tokenizer& tok, const std::vector<Scene>& scenes,
                                const std::vector<std::vector<int>>& captions);

ChairReport chair_eval(const ToyVLM<float>& model, const Tokenizer& tok, const std::vector<Scene>& scenes,
                       PromptKind prompt = PromptKind::kBenign, int max_new = 64,
                       const Tensor<float>* prefix = nullptr);

nlohmann::json to_json(const ChairReport& r, bool with_details = true);

// ---------------------------------------------------------------------------
// POPE

struct PopeMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int n = 0;
  int tp = 0, fp = 0, tn = 0, fn = 0;
  int missing = 0;  // no yes/no token; scored as wrong
};

struct PopeReport {
  std::array<PopeMetrics, 3> settings;  // indexed by PopeSetting
  std::vector<std::string> flags;

  const PopeMetrics& at(PopeSetting s) const { return settings[static_cast<std::size_t>(s)]; }
};

// First yes/no token of a response, if any.
std::optional<bool> extract_answer(const Tokenizer& tok, const std::vector<int>& response);

PopeReport pope_from_answers(const std::vector<PopeItem>& items, const std::vector<std::optional<bool>>& answers);

PopeReport pope_eval(const ToyVLM<float>& model, const Tokenizer& tok, const std::vector<PopeItem>& items,
                     int max_new = 2);

nlohmann::json to_json(const PopeReport& r);

// ---------------------------------------------------------------------------
// Visual attention

struct AttentionReport {
  double mean = 0.0;
  std::vector<double> per_sample;
  int n = 0;
};

// Mass that the last position puts on the first `visual_len` keys, averaged
// over heads, then layers.
double visual_attention_share(const std::vector<std::vector<MatrixX<float>>>& attention, Index visual_len);

AttentionReport attention_proportion(const ToyVLM<float>& model, const Tokenizer& tok,
                                     const std::vector<Scene>& scenes, PromptKind prompt = PromptKind::kBenign);

nlohmann::json to_json(const AttentionReport& r);

// G x G map of the last prompt position's attention on each visual cell
// (head and layer mean).
Matrixd visual_attention_map(const ToyVLM<float>& model, const Tokenizer& tok, const Scene& scene,
                             PromptKind prompt = PromptKind::kBenign);

// Binary PGM (P5); values are scaled by `max_value` and clamped to [0,1].
// Each cell becomes a `scale` x `scale` block.
void write_pgm(const std::filesystem::path& path, const Matrixd& values, double max_value, int scale = 16);

// ---------------------------------------------------------------------------
// Drift

// Mean per-token KL(P_edited || P_base) over the base model's greedy
// continuation of the prompt, pooled over tokens and scenes.
double probe_kl(const ToyVLM<float>& edited, const ToyVLM<float>& base, const Tokenizer& tok,
                const std::vector<Scene>& scenes, PromptKind prompt = PromptKind::kBenign, int max_new = 64);

// ---------------------------------------------------------------------------
// Generalization

struct GeneralizationReport {
  std::string edit_table;
  std::string eval_table;
  PopeReport base;
  PopeReport edited;
};

GeneralizationReport generalization_eval(const ToyVLM<float>& base, const ToyVLM<float>& edited,
                                         const Tokenizer& tok, const BiasTable& edit_table,
                                         const BiasTable& eval_table, const std::vector<Scene>& scenes,
                                         const std::vector<double>& corpus_frequency, const WorldConfig& world,
                                         Rng& rng);

nlohmann::json to_json(const GeneralizationReport& r);

// ---------------------------------------------------------------------------
// Ablations

struct AblationInputs {
  const ToyVLM<float>* base = nullptr;
  const Tokenizer* tok = nullptr;
  const AdversarialPrefix* prefix = nullptr;  // tuned prefix from Stage 1
  const LocateReport* locate = nullptr;
  std::vector<EditSample> edit_samples;
  EditConfig edit;
  std::vector<Scene> eval_scenes;
  int max_new = 64;
  std::uint64_t seed = 0;  // drives the w/o Location layer draw
};

struct AblationRow {
  std::string variant;
  ChairReport chair;
  double kl = 0.0;  // probe KL vs base on eval scenes
  int layer = 0;    // edited layer, 0 if none
};

struct AblationTable {
  std::vector<AblationRow> rows;  // Regular, w/o Tune, w/o Location, w/o Editing, w/o Constraint, w/o Prefix Tuning, Full
  std::vector<std::string> violations;  // variants beating the full method on CHAIR_i
};

inline constexpr int kFixedPrefixTokenRepeat = 5;

AblationTable ablation_suite(const AblationInputs& in);

nlohmann::json to_json(const AblationTable& t);
std::string to_csv(const AblationTable& t);
std::string to_csv(const PopeReport& r);
std::string to_csv(const ChairReport& r);

}  // namespace alea
