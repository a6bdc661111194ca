#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace alea {

using Rng = std::mt19937_64;

struct BiasEntry {
  int companion = 0;
  double probability = 0.0;
};

// Co-occurrence contamination: a present key object drags its (absent)
// companion into biased captions.
struct BiasTable {
  std::string table_id;
  std::map<int, BiasEntry> entries;

  void validate(int n_objects) const;
  // Sum of injection probabilities of present objects whose companion is
  // `object`.
  double affinity(int object, const std::vector<int>& present) const;
};

struct WorldConfig {
  int grid_size = 3;
  int n_objects = 12;
  int n_attributes = 6;
  int min_objects = 1;
  int max_objects = 5;
  double swap_probability = 0.3;

  int n_cells() const { return grid_size * grid_size; }
  void validate() const;
};

// Eight-entry default table, injection probability 0.8.
BiasTable default_bias_table(double probability = 0.8);
// A different table over the same objects (used for cross-world checks).
BiasTable random_bias_table(Rng& rng, const WorldConfig& world, int n_entries, double probability,
                            std::string table_id);

// ---------------------------------------------------------------------------
// Vocabulary

enum class PromptKind { kBenign, kGrounded, kPrior, kPope };
std::string_view to_string(PromptKind kind);
PromptKind prompt_kind_from_string(std::string_view s);

class Tokenizer {
 public:
  explicit Tokenizer(const WorldConfig& world);

  int size() const { return static_cast<int>(words_.size()); }
  int id(std::string_view word) const;
  const std::string& word(int id) const;
  std::vector<int> encode(std::string_view text) const;  // whitespace separated
  std::string decode(const std::vector<int>& ids) const;

  int pad() const { return 0; }
  int bos() const { return 1; }
  int eos() const { return 2; }
  int sep() const { return 3; }
  int yes() const { return 4; }
  int no() const { return 5; }
  int kw_describe() const { return 6; }
  int kw_precise() const { return 7; }
  int kw_imagine() const { return 8; }
  int kw_is() const { return 9; }
  int kw_present() const { return 10; }

  int object_token(int object) const { return object_base_ + object; }
  int attribute_token(int attribute) const { return attribute_base_ + attribute; }
  int row_token(int row) const { return row_base_ + row; }
  int col_token(int col) const { return col_base_ + col; }

  std::optional<int> as_object(int token) const;
  std::optional<int> as_attribute(int token) const;
  std::optional<int> as_row(int token) const;
  std::optional<int> as_col(int token) const;

  std::vector<int> prompt(PromptKind kind, int pope_object = -1) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> index_;
  int n_objects_, n_attributes_, grid_;
  int object_base_, attribute_base_, row_base_, col_base_;
};

// ---------------------------------------------------------------------------
// Scenes

struct Cell {
  int object = 0;
  int attribute = 0;
  bool operator==(const Cell&) const = default;
};

struct Scene {
  std::uint64_t scene_id = 0;
  std::uint64_t seed = 0;
  int grid_size = 3;
  std::vector<std::optional<Cell>> cells;  // raster order

  std::vector<int> present_objects() const;
  bool contains(int object) const;
  std::optional<int> cell_of(int object) const;
  int occupied() const;
  void validate(const WorldConfig& world) const;
};

Scene generate_scene(Rng& rng, const WorldConfig& world, std::uint64_t scene_id = 0);
// Scenes derived from independent per-index seeds.
std::vector<Scene> generate_scenes(std::uint64_t seed, const WorldConfig& world, int count,
                                   std::uint64_t first_id = 0);

nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json bias_table_to_json(const BiasTable& table);
BiasTable bias_table_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Caption grammar and the hallucination oracle

struct Clause {
  int attribute = 0;
  int object = 0;
  int row = 0;
  int col = 0;
};

std::vector<int> clauses_to_tokens(const Tokenizer& tok, const std::vector<Clause>& clauses);
std::vector<Clause> grounded_clauses(const Scene& scene);
std::vector<int> grounded_caption(const Tokenizer& tok, const Scene& scene);
std::vector<int> biased_caption(const Tokenizer& tok, const Scene& scene, const BiasTable& bias,
                                const WorldConfig& world, Rng& rng);

struct ParsedCaption {
  bool ok = false;
  std::vector<Clause> clauses;
  std::string error;
};
// Clauses "attr obj row col <sep>", optionally terminated by <eos>.
ParsedCaption parse_caption(const Tokenizer& tok, const std::vector<int>& tokens);

struct HalluScore {
  int score = 0;  // 0 grounded, 1 wrong attribute/position, 2 absent object
  bool parse_failed = false;
  int mentions = 0;
  int hallucinated_mentions = 0;
  std::vector<int> mentioned_objects;
};
HalluScore score_hallucination(const Tokenizer& tok, const Scene& scene,
                               const std::vector<int>& response);

// ---------------------------------------------------------------------------
// Datasets

struct CaptionSample {
  Scene scene;
  PromptKind prompt_kind = PromptKind::kBenign;
  std::vector<int> prompt_ids;
  std::vector<int> response_ids;
  std::optional<int> hallu_score;
  std::vector<std::string> flags;
};

struct CorpusOptions {
  double mix_ratio = 0.3;
  // Extra instruction samples per scene so the grounded/prior prompts and
  // the yes/no question format exist in the base model.
  bool include_grounded = true;
  bool include_prior = true;
  int pope_per_scene = 2;
  // Chance that a question about an absent companion of a present object is
  // labelled "yes" in the corpus.
  double pope_bias_probability = 0.0;
};

std::vector<CaptionSample> build_pretrain_corpus(const Tokenizer& tok,
                                                 const std::vector<Scene>& scenes,
                                                 const BiasTable& bias, const WorldConfig& world,
                                                 const CorpusOptions& options, Rng& rng);

// Object mention counts over the responses of a corpus.
std::vector<double> corpus_object_frequency(const Tokenizer& tok,
                                            const std::vector<CaptionSample>& corpus,
                                            int n_objects);

enum class PopeSetting { kRandom, kPopular, kAdversarial };
std::string_view to_string(PopeSetting s);
PopeSetting pope_setting_from_string(std::string_view s);
inline constexpr PopeSetting kPopeSettings[] = {PopeSetting::kRandom, PopeSetting::kPopular,
                                                PopeSetting::kAdversarial};

struct PopeItem {
  Scene scene;
  int object = 0;
  bool gold_yes = false;
  PopeSetting setting = PopeSetting::kRandom;
};

// Per scene: one yes-item and one no-item per setting.
std::vector<PopeItem> build_pope_dataset(const std::vector<Scene>& scenes, const BiasTable& bias,
                                         const std::vector<double>& corpus_frequency,
                                         const WorldConfig& world, Rng& rng,
                                         std::vector<std::string>* warnings = nullptr);

std::vector<int> pope_response(const Tokenizer& tok, bool yes);

// JSONL
inline constexpr int kSchemaVersion = 1;
nlohmann::json sample_to_json(const CaptionSample& s);
CaptionSample sample_from_json(const nlohmann::json& j);
nlohmann::json pope_item_to_json(const PopeItem& item);
PopeItem pope_item_from_json(const nlohmann::json& j);

std::string to_jsonl(const std::vector<nlohmann::json>& rows);
std::vector<nlohmann::json> parse_jsonl(std::string_view text);

}  // namespace alea
