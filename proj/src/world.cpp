#include "alea/world.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "alea/error.hpp"
#include "alea/util.hpp"

namespace alea {

namespace {

const std::vector<std::string> kObjectNames = {"cat", "dog",  "table", "chair", "cup",   "plate",
                                               "car", "road", "tree",  "bench", "bird",  "kite"};
const std::vector<std::string> kAttributeNames = {"red", "blue", "green", "yellow", "black", "white"};

int uniform_int(Rng& rng, int lo, int hi) {  // inclusive
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

bool bernoulli(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::bernoulli_distribution(p)(rng);
}

}  // namespace

// ---------------------------------------------------------------------------

void BiasTable::validate(int n_objects) const {
  for (const auto& [key, entry] : entries) {
    require(key >= 0 && key < n_objects, ErrorKind::kConfig,
            "bias table " + table_id + ": key " + std::to_string(key) + " out of range");
    require(entry.companion >= 0 && entry.companion < n_objects, ErrorKind::kConfig,
            "bias table " + table_id + ": companion out of range");
    require(entry.companion != key, ErrorKind::kConfig,
            "bias table " + table_id + ": companion equals key " + std::to_string(key));
    require(entry.probability >= 0.0 && entry.probability <= 1.0, ErrorKind::kConfig,
            "bias table " + table_id + ": probability outside [0,1]");
  }
}

double BiasTable::affinity(int object, const std::vector<int>& present) const {
  double total = 0.0;
  for (int p : present) {
    auto it = entries.find(p);
    if (it != entries.end() && it->second.companion == object) total += it->second.probability;
  }
  return total;
}

void WorldConfig::validate() const {
  require(grid_size >= 1 && grid_size <= 9, ErrorKind::kConfig, "world.grid_size must be in [1,9]");
  require(n_attributes >= 2, ErrorKind::kConfig, "world.n_attributes must be >= 2");
  require(min_objects >= 1 && min_objects <= max_objects, ErrorKind::kConfig,
          "world.min_objects must be in [1, max_objects]");
  require(max_objects <= n_cells(), ErrorKind::kConfig, "world.max_objects exceeds the grid");
  require(n_objects >= max_objects, ErrorKind::kConfig,
          "world.n_objects (" + std::to_string(n_objects) + ") must be >= max_objects (" +
              std::to_string(max_objects) + ")");
  require(swap_probability >= 0.0 && swap_probability <= 1.0, ErrorKind::kConfig,
          "world.swap_probability must be in [0,1]");
}

BiasTable default_bias_table(double probability) {
  // dog->cat, table->chair, cup->plate, car->road, tree->bird, bench->tree,
  // kite->bird, plate->cup
  BiasTable t;
  t.table_id = "A";
  const std::pair<int, int> pairs[] = {{1, 0}, {2, 3}, {4, 5}, {6, 7},
                                       {8, 10}, {9, 8}, {11, 10}, {5, 4}};
  for (auto [key, companion] : pairs) t.entries[key] = BiasEntry{companion, probability};
  return t;
}

BiasTable random_bias_table(Rng& rng, const WorldConfig& world, int n_entries, double probability,
                            std::string table_id) {
  require(n_entries >= 0 && n_entries <= world.n_objects, ErrorKind::kConfig,
          "bias table entry count out of range");
  std::vector<int> keys(static_cast<std::size_t>(world.n_objects));
  std::iota(keys.begin(), keys.end(), 0);
  std::shuffle(keys.begin(), keys.end(), rng);
  BiasTable t;
  t.table_id = std::move(table_id);
  for (int i = 0; i < n_entries; ++i) {
    const int key = keys[static_cast<std::size_t>(i)];
    int companion = uniform_int(rng, 0, world.n_objects - 2);
    if (companion >= key) ++companion;
    t.entries[key] = BiasEntry{companion, probability};
  }
  return t;
}

// ---------------------------------------------------------------------------

std::string_view to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::kBenign: return "benign";
    case PromptKind::kGrounded: return "grounded";
    case PromptKind::kPrior: return "prior";
    case PromptKind::kPope: return "pope";
  }
  return "benign";
}

PromptKind prompt_kind_from_string(std::string_view s) {
  if (s == "benign") return PromptKind::kBenign;
  if (s == "grounded") return PromptKind::kGrounded;
  if (s == "prior") return PromptKind::kPrior;
  if (s == "pope") return PromptKind::kPope;
  fail(ErrorKind::kFormat, "unknown prompt kind '" + std::string(s) + "'");
}

Tokenizer::Tokenizer(const WorldConfig& world)
    : n_objects_(world.n_objects), n_attributes_(world.n_attributes), grid_(world.grid_size) {
  words_ = {"<pad>", "<bos>", "<eos>", "<sep>", "yes", "no",
            "describe", "precise", "imagine", "is", "present"};
  object_base_ = static_cast<int>(words_.size());
  for (int i = 0; i < n_objects_; ++i)
    words_.push_back(i < static_cast<int>(kObjectNames.size()) ? kObjectNames[i]
                                                               : "obj" + std::to_string(i));
  attribute_base_ = static_cast<int>(words_.size());
  for (int i = 0; i < n_attributes_; ++i)
    words_.push_back(i < static_cast<int>(kAttributeNames.size()) ? kAttributeNames[i]
                                                                  : "attr" + std::to_string(i));
  row_base_ = static_cast<int>(words_.size());
  for (int i = 0; i < grid_; ++i) words_.push_back("r" + std::to_string(i));
  col_base_ = static_cast<int>(words_.size());
  for (int i = 0; i < grid_; ++i) words_.push_back("c" + std::to_string(i));
  for (int i = 0; i < size(); ++i) index_.emplace(words_[static_cast<std::size_t>(i)], i);
}

int Tokenizer::id(std::string_view word) const {
  auto it = index_.find(word);
  if (it == index_.end()) fail(ErrorKind::kVocabulary, "unknown word '" + std::string(word) + "'");
  return it->second;
}

const std::string& Tokenizer::word(int id) const {
  if (id < 0 || id >= size()) fail(ErrorKind::kVocabulary, "token id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) ids.push_back(id(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += word(id);
  }
  return out;
}

namespace {
std::optional<int> in_range(int token, int base, int count) {
  if (token >= base && token < base + count) return token - base;
  return std::nullopt;
}
}  // namespace

std::optional<int> Tokenizer::as_object(int t) const { return in_range(t, object_base_, n_objects_); }
std::optional<int> Tokenizer::as_attribute(int t) const { return in_range(t, attribute_base_, n_attributes_); }
std::optional<int> Tokenizer::as_row(int t) const { return in_range(t, row_base_, grid_); }
std::optional<int> Tokenizer::as_col(int t) const { return in_range(t, col_base_, grid_); }

std::vector<int> Tokenizer::prompt(PromptKind kind, int pope_object) const {
  switch (kind) {
    case PromptKind::kBenign: return {bos(), kw_describe()};
    case PromptKind::kGrounded: return {bos(), kw_precise(), kw_describe()};
    case PromptKind::kPrior: return {bos(), kw_imagine(), kw_describe()};
    case PromptKind::kPope:
      require(pope_object >= 0 && pope_object < n_objects_, ErrorKind::kVocabulary,
              "pope prompt needs a valid object id");
      return {bos(), kw_is(), object_token(pope_object), kw_present(), sep()};
  }
  return {};
}

// ---------------------------------------------------------------------------

std::vector<int> Scene::present_objects() const {
  std::vector<int> out;
  for (const auto& c : cells)
    if (c) out.push_back(c->object);
  return out;
}

bool Scene::contains(int object) const { return cell_of(object).has_value(); }

std::optional<int> Scene::cell_of(int object) const {
  for (std::size_t k = 0; k < cells.size(); ++k)
    if (cells[k] && cells[k]->object == object) return static_cast<int>(k);
  return std::nullopt;
}

int Scene::occupied() const {
  return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.has_value(); }));
}

void Scene::validate(const WorldConfig& world) const {
  require(grid_size == world.grid_size && static_cast<int>(cells.size()) == world.n_cells(),
          ErrorKind::kDimension, "scene grid does not match world config");
  const int n = occupied();
  require(n >= 1 && n <= world.n_cells(), ErrorKind::kContract, "scene must have >= 1 occupied cell");
  std::set<int> seen;
  for (const auto& c : cells) {
    if (!c) continue;
    require(c->object >= 0 && c->object < world.n_objects, ErrorKind::kVocabulary, "scene object id out of range");
    require(c->attribute >= 0 && c->attribute < world.n_attributes, ErrorKind::kVocabulary,
            "scene attribute id out of range");
    require(seen.insert(c->object).second, ErrorKind::kContract, "duplicate object in scene");
  }
}

Scene generate_scene(Rng& rng, const WorldConfig& world, std::uint64_t scene_id) {
  world.validate();
  Scene s;
  s.scene_id = scene_id;
  s.grid_size = world.grid_size;
  s.cells.assign(static_cast<std::size_t>(world.n_cells()), std::nullopt);
  const int count = uniform_int(rng, world.min_objects, world.max_objects);
  std::vector<int> cells(static_cast<std::size_t>(world.n_cells()));
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  std::vector<int> objects(static_cast<std::size_t>(world.n_objects));
  std::iota(objects.begin(), objects.end(), 0);
  std::shuffle(objects.begin(), objects.end(), rng);
  for (int i = 0; i < count; ++i) {
    const int attribute = uniform_int(rng, 0, world.n_attributes - 1);
    s.cells[static_cast<std::size_t>(cells[static_cast<std::size_t>(i)])] =
        Cell{objects[static_cast<std::size_t>(i)], attribute};
  }
  return s;
}

std::vector<Scene> generate_scenes(std::uint64_t seed, const WorldConfig& world, int count,
                                   std::uint64_t first_id) {
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t id = first_id + static_cast<std::uint64_t>(i);
    const std::uint64_t scene_seed = derive_seed(seed, id);
    Rng rng(scene_seed);
    Scene s = generate_scene(rng, world, id);
    s.seed = scene_seed;
    out.push_back(std::move(s));
  }
  return out;
}

nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : scene.cells) {
    if (c)
      cells.push_back({{"object", c->object}, {"attribute", c->attribute}});
    else
      cells.push_back(nullptr);
  }
  return {{"scene_id", scene.scene_id}, {"seed", scene.seed}, {"grid", scene.grid_size}, {"cells", cells}};
}

Scene scene_from_json(const nlohmann::json& j) {
  try {
    Scene s;
    s.scene_id = j.at("scene_id").get<std::uint64_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.grid_size = j.at("grid").get<int>();
    for (const auto& c : j.at("cells")) {
      if (c.is_null())
        s.cells.emplace_back(std::nullopt);
      else
        s.cells.emplace_back(Cell{c.at("object").get<int>(), c.at("attribute").get<int>()});
    }
    require(static_cast<int>(s.cells.size()) == s.grid_size * s.grid_size, ErrorKind::kFormat,
            "scene cell count does not match grid");
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed scene: ") + e.what());
  }
}

nlohmann::json bias_table_to_json(const BiasTable& table) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [key, e] : table.entries)
    entries.push_back({{"object", key}, {"companion", e.companion}, {"probability", e.probability}});
  return {{"schema_version", kSchemaVersion}, {"table_id", table.table_id}, {"entries", entries}};
}

BiasTable bias_table_from_json(const nlohmann::json& j) {
  try {
    BiasTable t;
    t.table_id = j.at("table_id").get<std::string>();
    for (const auto& e : j.at("entries"))
      t.entries[e.at("object").get<int>()] =
          BiasEntry{e.at("companion").get<int>(), e.at("probability").get<double>()};
    return t;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed bias table: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

std::vector<int> clauses_to_tokens(const Tokenizer& tok, const std::vector<Clause>& clauses) {
  std::vector<int> out;
  out.reserve(clauses.size() * 5 + 1);
  for (const auto& c : clauses) {
    out.push_back(tok.attribute_token(c.attribute));
    out.push_back(tok.object_token(c.object));
    out.push_back(tok.row_token(c.row));
    out.push_back(tok.col_token(c.col));
    out.push_back(tok.sep());
  }
  out.push_back(tok.eos());
  return out;
}

std::vector<Clause> grounded_clauses(const Scene& scene) {
  std::vector<Clause> out;
  for (std::size_t k = 0; k < scene.cells.size(); ++k) {
    if (!scene.cells[k]) continue;
    const int kk = static_cast<int>(k);
    out.push_back(Clause{scene.cells[k]->attribute, scene.cells[k]->object, kk / scene.grid_size,
                         kk % scene.grid_size});
  }
  return out;
}

std::vector<int> grounded_caption(const Tokenizer& tok, const Scene& scene) {
  return clauses_to_tokens(tok, grounded_clauses(scene));
}

std::vector<int> biased_caption(const Tokenizer& tok, const Scene& scene, const BiasTable& bias,
                                const WorldConfig& world, Rng& rng) {
  const auto base = grounded_clauses(scene);
  bool can_inject = false;
  for (const auto& c : base) {
    auto it = bias.entries.find(c.object);
    if (it != bias.entries.end() && it->second.probability > 0.0 && !scene.contains(it->second.companion))
      can_inject = true;
  }
  can_inject = can_inject && scene.occupied() < world.n_cells();
  if (!can_inject && world.swap_probability <= 0.0) {
    fail(ErrorKind::kConfig, "biased_caption: no applicable bias entry and attribute swap disabled");
  }

  std::vector<int> empty_cells;
  for (std::size_t k = 0; k < scene.cells.size(); ++k)
    if (!scene.cells[k]) empty_cells.push_back(static_cast<int>(k));

  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<Clause> out;
    std::vector<std::size_t> original_slots;
    std::set<int> injected;
    std::vector<int> free_cells = empty_cells;
    for (const auto& c : base) {
      original_slots.push_back(out.size());
      out.push_back(c);
      auto it = bias.entries.find(c.object);
      if (it == bias.entries.end()) continue;
      const int companion = it->second.companion;
      if (scene.contains(companion) || injected.count(companion) || free_cells.empty()) continue;
      if (!bernoulli(rng, it->second.probability)) continue;
      // The companion clause follows its key and copies the key's attribute,
      // placed at a random empty cell.
      const int pick = uniform_int(rng, 0, static_cast<int>(free_cells.size()) - 1);
      const int cell = free_cells[static_cast<std::size_t>(pick)];
      free_cells.erase(free_cells.begin() + pick);
      out.push_back(Clause{c.attribute, companion, cell / scene.grid_size, cell % scene.grid_size});
      injected.insert(companion);
    }
    if (bernoulli(rng, world.swap_probability)) {
      const int which = uniform_int(rng, 0, static_cast<int>(original_slots.size()) - 1);
      Clause& c = out[original_slots[static_cast<std::size_t>(which)]];
      int attribute = uniform_int(rng, 0, world.n_attributes - 2);
      if (attribute >= c.attribute) ++attribute;
      c.attribute = attribute;
    }
    auto tokens = clauses_to_tokens(tok, out);
    if (score_hallucination(tok, scene, tokens).score >= 1) return tokens;
  }
  fail(ErrorKind::kConfig, "biased_caption: could not produce a mutated caption");
}

ParsedCaption parse_caption(const Tokenizer& tok, const std::vector<int>& tokens) {
  ParsedCaption p;
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (tokens[i] == tok.eos()) {
      if (i + 1 != tokens.size()) {
        p.error = "tokens after <eos>";
        return p;
      }
      break;
    }
    if (i + 5 > tokens.size()) {
      p.error = "truncated clause at token " + std::to_string(i);
      return p;
    }
    auto attribute = tok.as_attribute(tokens[i]);
    auto object = tok.as_object(tokens[i + 1]);
    auto row = tok.as_row(tokens[i + 2]);
    auto col = tok.as_col(tokens[i + 3]);
    if (!attribute || !object || !row || !col || tokens[i + 4] != tok.sep()) {
      p.error = "malformed clause at token " + std::to_string(i);
      return p;
    }
    p.clauses.push_back(Clause{*attribute, *object, *row, *col});
    i += 5;
  }
  p.ok = true;
  return p;
}

HalluScore score_hallucination(const Tokenizer& tok, const Scene& scene,
                               const std::vector<int>& response) {
  HalluScore s;
  const auto parsed = parse_caption(tok, response);
  if (!parsed.ok) {
    s.score = 2;
    s.parse_failed = true;
    return s;
  }
  std::set<int> mentioned, hallucinated;
  bool wrong_detail = false;
  for (const auto& c : parsed.clauses) {
    mentioned.insert(c.object);
    const auto cell = scene.cell_of(c.object);
    if (!cell) {
      hallucinated.insert(c.object);
      continue;
    }
    const auto& truth = *scene.cells[static_cast<std::size_t>(*cell)];
    const int row = *cell / scene.grid_size;
    const int col = *cell % scene.grid_size;
    if (truth.attribute != c.attribute || row != c.row || col != c.col) wrong_detail = true;
  }
  s.mentions = static_cast<int>(mentioned.size());
  s.hallucinated_mentions = static_cast<int>(hallucinated.size());
  s.mentioned_objects.assign(mentioned.begin(), mentioned.end());
  s.score = !hallucinated.empty() ? 2 : (wrong_detail ? 1 : 0);
  return s;
}

// ---------------------------------------------------------------------------

std::vector<int> pope_response(const Tokenizer& tok, bool yes) {
  return {yes ? tok.yes() : tok.no(), tok.eos()};
}

std::vector<CaptionSample> build_pretrain_corpus(const Tokenizer& tok,
                                                 const std::vector<Scene>& scenes,
                                                 const BiasTable& bias, const WorldConfig& world,
                                                 const CorpusOptions& options, Rng& rng) {
  require(options.mix_ratio >= 0.0 && options.mix_ratio <= 1.0, ErrorKind::kConfig,
          "mix_ratio must be in [0,1]");
  require(options.pope_bias_probability >= 0.0 && options.pope_bias_probability <= 1.0,
          ErrorKind::kConfig, "pope_bias_probability must be in [0,1]");
  bias.validate(world.n_objects);
  std::vector<CaptionSample> out;
  auto make = [&](const Scene& s, PromptKind kind, std::vector<int> prompt, std::vector<int> response,
                  std::optional<int> score, std::vector<std::string> flags) {
    CaptionSample c;
    c.scene = s;
    c.prompt_kind = kind;
    c.prompt_ids = std::move(prompt);
    c.response_ids = std::move(response);
    c.hallu_score = score;
    c.flags = std::move(flags);
    out.push_back(std::move(c));
  };
  for (const auto& scene : scenes) {
    const bool biased = bernoulli(rng, options.mix_ratio);
    auto benign = biased ? biased_caption(tok, scene, bias, world, rng) : grounded_caption(tok, scene);
    const int benign_score = score_hallucination(tok, scene, benign).score;
    make(scene, PromptKind::kBenign, tok.prompt(PromptKind::kBenign), std::move(benign), benign_score,
         biased ? std::vector<std::string>{"biased"} : std::vector<std::string>{});
    if (options.include_grounded)
      make(scene, PromptKind::kGrounded, tok.prompt(PromptKind::kGrounded), grounded_caption(tok, scene), 0, {});
    if (options.include_prior) {
      auto prior = biased_caption(tok, scene, bias, world, rng);
      const int score = score_hallucination(tok, scene, prior).score;
      make(scene, PromptKind::kPrior, tok.prompt(PromptKind::kPrior), std::move(prior), score, {"biased"});
    }
    const auto present = scene.present_objects();
    std::vector<int> absent, companions;
    for (int o = 0; o < world.n_objects; ++o) {
      if (scene.contains(o)) continue;
      absent.push_back(o);
      if (bias.affinity(o, present) > 0.0) companions.push_back(o);
    }
    for (int q = 0; q < options.pope_per_scene; ++q) {
      const bool ask_present = (q % 2 == 0) || absent.empty();
      if (ask_present) {
        const int o = present[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(present.size()) - 1))];
        make(scene, PromptKind::kPope, tok.prompt(PromptKind::kPope, o), pope_response(tok, true), std::nullopt, {});
        continue;
      }
      const bool pick_companion = !companions.empty() && bernoulli(rng, 0.5);
      const auto& pool = pick_companion ? companions : absent;
      const int o = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
      const bool contaminated = bias.affinity(o, present) > 0.0 && bernoulli(rng, options.pope_bias_probability);
      make(scene, PromptKind::kPope, tok.prompt(PromptKind::kPope, o), pope_response(tok, contaminated),
           std::nullopt, contaminated ? std::vector<std::string>{"biased"} : std::vector<std::string>{});
    }
  }
  return out;
}

std::vector<double> corpus_object_frequency(const Tokenizer& tok,
                                            const std::vector<CaptionSample>& corpus,
                                            int n_objects) {
  std::vector<double> freq(static_cast<std::size_t>(n_objects), 0.0);
  for (const auto& s : corpus)
    for (int t : s.response_ids)
      if (auto o = tok.as_object(t); o && *o < n_objects) freq[static_cast<std::size_t>(*o)] += 1.0;
  return freq;
}

std::string_view to_string(PopeSetting s) {
  switch (s) {
    case PopeSetting::kRandom: return "random";
    case PopeSetting::kPopular: return "popular";
    case PopeSetting::kAdversarial: return "adversarial";
  }
  return "random";
}

PopeSetting pope_setting_from_string(std::string_view s) {
  if (s == "random") return PopeSetting::kRandom;
  if (s == "popular") return PopeSetting::kPopular;
  if (s == "adversarial") return PopeSetting::kAdversarial;
  fail(ErrorKind::kFormat, "unknown POPE setting '" + std::string(s) + "'");
}

std::vector<PopeItem> build_pope_dataset(const std::vector<Scene>& scenes, const BiasTable& bias,
                                         const std::vector<double>& corpus_frequency,
                                         const WorldConfig& world, Rng& rng,
                                         std::vector<std::string>* warnings) {
  require(static_cast<int>(corpus_frequency.size()) == world.n_objects, ErrorKind::kContract,
          "build_pope_dataset: corpus statistics do not cover every object");
  std::vector<PopeItem> items;
  for (const auto& scene : scenes) {
    const auto present = scene.present_objects();
    std::vector<int> absent;
    for (int o = 0; o < world.n_objects; ++o)
      if (!scene.contains(o)) absent.push_back(o);
    if (absent.empty()) {
      if (warnings) warnings->push_back("scene " + std::to_string(scene.scene_id) + " contains every object; skipped");
      continue;
    }
    // yes-items: distinct present objects, topped up with resampling
    std::vector<int> yes_objects = present;
    std::shuffle(yes_objects.begin(), yes_objects.end(), rng);
    while (yes_objects.size() < 3)
      yes_objects.push_back(present[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(present.size()) - 1))]);

    const int random_no = absent[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(absent.size()) - 1))];
    int popular_no = absent.front();
    for (int o : absent)
      if (corpus_frequency[static_cast<std::size_t>(o)] > corpus_frequency[static_cast<std::size_t>(popular_no)])
        popular_no = o;
    int adversarial_no = absent.front();
    for (int o : absent) {
      const double a = bias.affinity(o, present);
      const double best = bias.affinity(adversarial_no, present);
      if (a > best || (a == best && corpus_frequency[static_cast<std::size_t>(o)] >
                                        corpus_frequency[static_cast<std::size_t>(adversarial_no)]))
        adversarial_no = o;
    }
    const int no_objects[] = {random_no, popular_no, adversarial_no};
    for (int k = 0; k < 3; ++k) {
      items.push_back(PopeItem{scene, yes_objects[static_cast<std::size_t>(k)], true, kPopeSettings[k]});
      items.push_back(PopeItem{scene, no_objects[k], false, kPopeSettings[k]});
    }
  }
  return items;
}

// ---------------------------------------------------------------------------

nlohmann::json sample_to_json(const CaptionSample& s) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["scene"] = scene_to_json(s.scene);
  j["prompt_kind"] = std::string(to_string(s.prompt_kind));
  j["prompt_ids"] = s.prompt_ids;
  j["response_ids"] = s.response_ids;
  j["hallu_score"] = s.hallu_score ? nlohmann::json(*s.hallu_score) : nlohmann::json(nullptr);
  j["flags"] = s.flags;
  return j;
}

CaptionSample sample_from_json(const nlohmann::json& j) {
  try {
    require(j.at("schema_version").get<int>() == kSchemaVersion, ErrorKind::kFormat,
            "caption sample schema_version mismatch");
    CaptionSample s;
    s.scene = scene_from_json(j.at("scene"));
    s.prompt_kind = prompt_kind_from_string(j.at("prompt_kind").get<std::string>());
    s.prompt_ids = j.at("prompt_ids").get<std::vector<int>>();
    s.response_ids = j.at("response_ids").get<std::vector<int>>();
    if (!j.at("hallu_score").is_null()) s.hallu_score = j.at("hallu_score").get<int>();
    s.flags = j.at("flags").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed caption sample: ") + e.what());
  }
}

nlohmann::json pope_item_to_json(const PopeItem& item) {
  return {{"schema_version", kSchemaVersion},
          {"scene", scene_to_json(item.scene)},
          {"object", item.object},
          {"gold", item.gold_yes ? "yes" : "no"},
          {"setting", std::string(to_string(item.setting))}};
}

PopeItem pope_item_from_json(const nlohmann::json& j) {
  try {
    require(j.at("schema_version").get<int>() == kSchemaVersion, ErrorKind::kFormat,
            "POPE item schema_version mismatch");
    PopeItem item;
    item.scene = scene_from_json(j.at("scene"));
    item.object = j.at("object").get<int>();
    const auto gold = j.at("gold").get<std::string>();
    require(gold == "yes" || gold == "no", ErrorKind::kFormat, "POPE gold must be yes/no");
    item.gold_yes = gold == "yes";
    item.setting = pope_setting_from_string(j.at("setting").get<std::string>());
    return item;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed POPE item: ") + e.what());
  }
}

std::string to_jsonl(const std::vector<nlohmann::json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out.push_back('\n');
  }
  return out;
}

std::vector<nlohmann::json> parse_jsonl(std::string_view text) {
  std::vector<nlohmann::json> rows;
  std::size_t start = 0;
  int line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const auto line = text.substr(start, end - start);
    if (!line.empty()) {
      try {
        rows.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::kFormat, "JSONL line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    start = end + 1;
  }
  return rows;
}

}  // namespace alea
