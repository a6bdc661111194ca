#include "alea/eval.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "alea/ops.hpp"
#include "alea/util.hpp"

namespace alea {

namespace {

double ratio(int num, int den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }

std::vector<int> decode_caption(const ToyVLM<float>& model, const Tokenizer& tok, const Scene& scene,
                                const std::vector<int>& prompt, int max_new, const Tensor<float>* prefix) {
  const auto visual = encode_scene(model, scene);
  return greedy_decode(model, visual, std::span<const int>(prompt), max_new, tok.eos(), prefix).tokens;
}

}  // namespace

// ---------------------------------------------------------------------------
// CHAIR

ChairDetail chair_detail(const Tokenizer& tok, const Scene& scene, const std::vector<int>& caption) {
  ChairDetail d;
  d.scene_id = scene.scene_id;
  d.tokens = caption;
  const auto present = scene.present_objects();
  d.ground_truth = static_cast<int>(present.size());
  const auto parsed = parse_caption(tok, caption);
  if (!parsed.ok) {
    d.parse_failed = true;
    d.mentions = 1;
    d.hallucinated = 1;
    return d;
  }
  std::set<int> mentioned;
  for (const auto& c : parsed.clauses) mentioned.insert(c.object);
  d.mentions = static_cast<int>(mentioned.size());
  for (int o : mentioned) {
    if (scene.contains(o))
      ++d.recalled;
    else
      ++d.hallucinated;
  }
  return d;
}

ChairReport chair_from_captions(const Tokenizer& tok, const std::vector<Scene>& scenes,
                                const std::vector<std::vector<int>>& captions) {
  require(scenes.size() == captions.size(), ErrorKind::kContract, "chair: scene and caption counts differ");
  ChairReport r;
  r.n_captions = static_cast<int>(scenes.size());
  std::size_t tokens = 0;
  int parse_failures = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    auto d = chair_detail(tok, scenes[i], captions[i]);
    r.mentions += d.mentions;
    r.hallucinated_mentions += d.hallucinated;
    r.hallucinated_captions += d.hallucinated > 0 ? 1 : 0;
    r.recalled += d.recalled;
    r.ground_truth += d.ground_truth;
    parse_failures += d.parse_failed ? 1 : 0;
    tokens += captions[i].size();
    r.details.push_back(std::move(d));
  }
  r.chair_i = ratio(r.hallucinated_mentions, r.mentions);
  r.chair_s = ratio(r.hallucinated_captions, r.n_captions);
  r.recall = ratio(r.recalled, r.ground_truth);
  r.mean_len = r.n_captions == 0 ? 0.0 : static_cast<double>(tokens) / r.n_captions;
  if (r.mentions == 0) r.flags.push_back("chair_i: no object mentions (0/0 reported as 0)");
  if (r.n_captions == 0) r.flags.push_back("chair_s: no captions (0/0 reported as 0)");
  if (r.ground_truth == 0) r.flags.push_back("recall: no ground-truth objects (0/0 reported as 0)");
  if (parse_failures > 0) r.flags.push_back(std::to_string(parse_failures) + " unparseable captions");
  return r;
}

ChairReport chair_eval(const ToyVLM<float>& model, const Tokenizer& tok, const std::vector<Scene>& scenes,
                       PromptKind prompt, int max_new, const Tensor<float>* prefix) {
  require(prompt != PromptKind::kPope, ErrorKind::kContract, "chair_eval: captions need a caption prompt");
  NoGradGuard no_grad;
  const auto ids = tok.prompt(prompt);
  std::vector<std::vector<int>> captions;
  captions.reserve(scenes.size());
  for (const auto& s : scenes) captions.push_back(decode_caption(model, tok, s, ids, max_new, prefix));
  return chair_from_captions(tok, scenes, captions);
}

nlohmann::json to_json(const ChairReport& r, bool with_details) {
  nlohmann::json j = {{"chair_s", r.chair_s},
                      {"chair_i", r.chair_i},
                      {"recall", r.recall},
                      {"mean_len", r.mean_len},
                      {"n_captions", r.n_captions},
                      {"mentions", r.mentions},
                      {"hallucinated_mentions", r.hallucinated_mentions},
                      {"hallucinated_captions", r.hallucinated_captions},
                      {"recalled", r.recalled},
                      {"ground_truth", r.ground_truth},
                      {"flags", r.flags}};
  if (with_details) {
    auto rows = nlohmann::json::array();
    for (const auto& d : r.details)
      rows.push_back({{"scene_id", d.scene_id},
                      {"tokens", d.tokens},
                      {"mentions", d.mentions},
                      {"hallucinated", d.hallucinated},
                      {"recalled", d.recalled},
                      {"ground_truth", d.ground_truth},
                      {"parse_failed", d.parse_failed}});
    j["details"] = std::move(rows);
  }
  return j;
}

std::string to_csv(const ChairReport& r) {
  std::ostringstream out;
  out << "scene_id,mentions,hallucinated,recalled,ground_truth,parse_failed,length\n";
  for (const auto& d : r.details)
    out << d.scene_id << ',' << d.mentions << ',' << d.hallucinated << ',' << d.recalled << ',' << d.ground_truth
        << ',' << (d.parse_failed ? 1 : 0) << ',' << d.tokens.size() << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// POPE

std::optional<bool> extract_answer(const Tokenizer& tok, const std::vector<int>& response) {
  for (int t : response) {
    if (t == tok.yes()) return true;
    if (t == tok.no()) return false;
  }
  return std::nullopt;
}

PopeReport pope_from_answers(const std::vector<PopeItem>& items, const std::vector<std::optional<bool>>& answers) {
  require(items.size() == answers.size(), ErrorKind::kContract, "pope: item and answer counts differ");
  PopeReport r;
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& m = r.settings[static_cast<std::size_t>(items[i].setting)];
    ++m.n;
    const bool gold = items[i].gold_yes;
    if (!answers[i]) {
      ++m.missing;
      // Missing answers are wrong: a missed "yes" is a false negative, a
      // missed "no" a false positive.
      if (gold)
        ++m.fn;
      else
        ++m.fp;
      continue;
    }
    const bool yes = *answers[i];
    if (gold && yes) ++m.tp;
    if (gold && !yes) ++m.fn;
    if (!gold && yes) ++m.fp;
    if (!gold && !yes) ++m.tn;
  }
  for (auto s : kPopeSettings) {
    auto& m = r.settings[static_cast<std::size_t>(s)];
    const std::string name(to_string(s));
    if (m.n == 0) {
      r.flags.push_back(name + ": no items");
      continue;
    }
    m.accuracy = ratio(m.tp + m.tn, m.n);
    m.precision = ratio(m.tp, m.tp + m.fp);
    m.recall = ratio(m.tp, m.tp + m.fn);
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    if (m.tp + m.fp == 0) r.flags.push_back(name + ": precision 0/0 reported as 0");
    if (m.missing > 0) r.flags.push_back(name + ": " + std::to_string(m.missing) + " responses without yes/no");
  }
  return r;
}

PopeReport pope_eval(const ToyVLM<float>& model, const Tokenizer& tok, const std::vector<PopeItem>& items,
                     int max_new) {
  NoGradGuard no_grad;
  std::vector<std::optional<bool>> answers;
  answers.reserve(items.size());
  for (const auto& item : items)
    answers.push_back(
        extract_answer(tok, decode_caption(model, tok, item.scene, tok.prompt(PromptKind::kPope, item.object),
                                           max_new, nullptr)));
  return pope_from_answers(items, answers);
}

nlohmann::json to_json(const PopeReport& r) {
  nlohmann::json j = {{"positive_class", "yes"}, {"flags", r.flags}};
  for (auto s : kPopeSettings) {
    const auto& m = r.at(s);
    j[std::string(to_string(s))] = {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall},
                                    {"f1", m.f1},             {"n", m.n},                 {"tp", m.tp},
                                    {"fp", m.fp},             {"tn", m.tn},               {"fn", m.fn},
                                    {"missing", m.missing}};
  }
  return j;
}

std::string to_csv(const PopeReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "setting,accuracy,precision,recall,f1,n,missing\n";
  for (auto s : kPopeSettings) {
    const auto& m = r.at(s);
    out << to_string(s) << ',' << m.accuracy << ',' << m.precision << ',' << m.recall << ',' << m.f1 << ',' << m.n
        << ',' << m.missing << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Visual attention

double visual_attention_share(const std::vector<std::vector<MatrixX<float>>>& attention, Index visual_len) {
  require(!attention.empty(), ErrorKind::kContract, "visual_attention_share: no layers");
  double layer_sum = 0.0;
  for (const auto& heads : attention) {
    require(!heads.empty(), ErrorKind::kContract, "visual_attention_share: layer without heads");
    double head_sum = 0.0;
    for (const auto& a : heads) {
      require(a.cols() >= visual_len && a.rows() >= 1, ErrorKind::kDimension,
              "visual_attention_share: attention smaller than the visual span");
      head_sum += a.row(a.rows() - 1).head(visual_len).cast<double>().sum();
    }
    layer_sum += head_sum / static_cast<double>(heads.size());
  }
  return std::clamp(layer_sum / static_cast<double>(attention.size()), 0.0, 1.0);
}

AttentionReport attention_proportion(const ToyVLM<float>& model, const Tokenizer& tok,
                                     const std::vector<Scene>& scenes, PromptKind prompt) {
  require(!scenes.empty(), ErrorKind::kContract, "attention_proportion: no scenes");
  NoGradGuard no_grad;
  const auto ids = tok.prompt(prompt);
  AttentionReport r;
  double total = 0.0;
  for (const auto& s : scenes) {
    const auto visual = encode_scene(model, s);
    const auto trace =
        forward_with_trace<float>(model, visual, std::span<const int>(ids), nullptr, TraceOptions{false, true});
    const double p = visual_attention_share(trace.attention, trace.visual_len);
    r.per_sample.push_back(p);
    total += p;
  }
  r.n = static_cast<int>(scenes.size());
  r.mean = total / r.n;
  return r;
}

nlohmann::json to_json(const AttentionReport& r) {
  return {{"mean", r.mean}, {"n", r.n}, {"per_sample", r.per_sample}, {"averaging", "heads, then layers, then samples"}};
}

Matrixd visual_attention_map(const ToyVLM<float>& model, const Tokenizer& tok, const Scene& scene,
                             PromptKind prompt) {
  NoGradGuard no_grad;
  const auto ids = tok.prompt(prompt);
  const auto visual = encode_scene(model, scene);
  const auto trace =
      forward_with_trace<float>(model, visual, std::span<const int>(ids), nullptr, TraceOptions{false, true});
  const int g = scene.grid_size;
  Matrixd map = Matrixd::Zero(g, g);
  double count = 0.0;
  for (const auto& heads : trace.attention)
    for (const auto& a : heads) {
      const auto last = a.row(a.rows() - 1);
      for (int k = 0; k < g * g; ++k) map(k / g, k % g) += last(k);
      count += 1.0;
    }
  return map / count;
}

void write_pgm(const std::filesystem::path& path, const Matrixd& values, double max_value, int scale) {
  require(scale >= 1 && values.size() > 0, ErrorKind::kContract, "write_pgm: empty image");
  require(max_value > 0.0, ErrorKind::kContract, "write_pgm: max_value must be positive");
  const Index h = values.rows() * scale, w = values.cols() * scale;
  std::string data = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double v = std::clamp(values(y / scale, x / scale) / max_value, 0.0, 1.0);
      data.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  write_file_atomic(path, data);
}

// ---------------------------------------------------------------------------
// Drift

double probe_kl(const ToyVLM<float>& edited, const ToyVLM<float>& base, const Tokenizer& tok,
                const std::vector<Scene>& scenes, PromptKind prompt, int max_new) {
  require(!scenes.empty(), ErrorKind::kContract, "probe_kl: no scenes");
  NoGradGuard no_grad;
  const auto ids = tok.prompt(prompt);
  double total = 0.0;
  std::size_t positions = 0;
  for (const auto& s : scenes) {
    const auto vb = encode_scene(base, s);
    auto ref = greedy_decode(base, vb, std::span<const int>(ids), max_new, tok.eos()).tokens;
    if (ref.empty()) ref.push_back(tok.eos());
    const Matrixd lq =
        log_softmax_rows_value(response_logits(base, vb, std::span<const int>(ids), std::span<const int>(ref)).value())
            .cast<double>();
    const auto ve = encode_scene(edited, s);
    const Matrixd lp = log_softmax_rows_value(
                           response_logits(edited, ve, std::span<const int>(ids), std::span<const int>(ref)).value())
                           .cast<double>();
    total += (lp.array().exp() * (lp - lq).array()).sum();
    positions += ref.size();
  }
  return total / static_cast<double>(positions);
}

// ---------------------------------------------------------------------------
// Generalization

GeneralizationReport generalization_eval(const ToyVLM<float>& base, const ToyVLM<float>& edited,
                                         const Tokenizer& tok, const BiasTable& edit_table,
                                         const BiasTable& eval_table, const std::vector<Scene>& scenes,
                                         const std::vector<double>& corpus_frequency, const WorldConfig& world,
                                         Rng& rng) {
  require(edit_table.table_id != eval_table.table_id, ErrorKind::kContract,
          "generalization_eval: edit and eval bias tables share id '" + edit_table.table_id + "'");
  const auto items = build_pope_dataset(scenes, eval_table, corpus_frequency, world, rng);
  GeneralizationReport r;
  r.edit_table = edit_table.table_id;
  r.eval_table = eval_table.table_id;
  r.base = pope_eval(base, tok, items);
  r.edited = pope_eval(edited, tok, items);
  return r;
}

nlohmann::json to_json(const GeneralizationReport& r) {
  return {{"schema_version", kSchemaVersion},
          {"edit_table", r.edit_table},
          {"eval_table", r.eval_table},
          {"base", to_json(r.base)},
          {"edited", to_json(r.edited)}};
}

// ---------------------------------------------------------------------------
// Ablations

AblationTable ablation_suite(const AblationInputs& in) {
  require(in.base && in.tok && in.locate, ErrorKind::kContract, "ablation_suite: base, tokenizer and locate report required");
  require(in.prefix && in.prefix->tuned, ErrorKind::kDependency, "ablation_suite: a tuned prefix is required");
  const auto& base = *in.base;
  const auto& tok = *in.tok;
  AblationTable table;

  auto edited_row = [&](std::string name, const AdversarialPrefix* prefix, EditConfig cfg) {
    auto result = edit_parameters(base, prefix, in.edit_samples, cfg, *in.locate, tok.eos());
    AblationRow row{std::move(name), chair_eval(result.model, tok, in.eval_scenes, PromptKind::kBenign, in.max_new),
                    probe_kl(result.model, base, tok, in.eval_scenes, PromptKind::kBenign, in.max_new),
                    result.report.layer};
    table.rows.push_back(std::move(row));
  };

  table.rows.push_back({"Regular", chair_eval(base, tok, in.eval_scenes, PromptKind::kBenign, in.max_new), 0.0, 0});
  table.rows.push_back({"w/o Tune", chair_eval(base, tok, in.eval_scenes, PromptKind::kGrounded, in.max_new), 0.0, 0});

  {
    const int n_layers = base.config().n_layers;
    std::vector<int> others;
    for (int l = 1; l <= n_layers; ++l)
      if (l != in.locate->layer) others.push_back(l);
    EditConfig cfg = in.edit;
    if (others.empty()) {
      cfg.target_layer = in.locate->layer;
    } else {
      std::mt19937_64 rng(in.seed);
      std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
      cfg.target_layer = others[pick(rng)];
    }
    edited_row("w/o Location", in.prefix, cfg);
  }
  {
    EditConfig cfg = in.edit;
    cfg.objective = EditConfig::Objective::kConstraintOnly;
    edited_row("w/o Editing", in.prefix, cfg);
  }
  {
    EditConfig cfg = in.edit;
    cfg.objective = EditConfig::Objective::kEditingOnly;
    edited_row("w/o Constraint", in.prefix, cfg);
  }
  {
    const std::vector<int> tokens(kFixedPrefixTokenRepeat, tok.kw_imagine());
    const auto fixed = fixed_prefix(base, tokens, "fixed-imagine");
    edited_row("w/o Prefix Tuning", &fixed, in.edit);
  }
  edited_row("Full", in.prefix, in.edit);

  const double full = table.rows.back().chair.chair_i;
  for (std::size_t i = 1; i + 1 < table.rows.size(); ++i)
    if (table.rows[i].chair.chair_i < full) table.violations.push_back(table.rows[i].variant);
  return table;
}

nlohmann::json to_json(const AblationTable& t) {
  auto rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"variant", r.variant},
                    {"chair_s", r.chair.chair_s},
                    {"chair_i", r.chair.chair_i},
                    {"recall", r.chair.recall},
                    {"mean_len", r.chair.mean_len},
                    {"kl", r.kl},
                    {"layer", r.layer}});
  return {{"schema_version", kSchemaVersion},
          {"rows", rows},
          {"violations", t.violations},
          {"soft_gate_pass", t.violations.size() < 2}};
}

std::string to_csv(const AblationTable& t) {
  std::ostringstream out;
  out.precision(17);
  out << "variant,chair_s,chair_i,recall,mean_len,kl,layer\n";
  for (const auto& r : t.rows)
    out << r.variant << ',' << r.chair.chair_s << ',' << r.chair.chair_i << ',' << r.chair.recall << ','
        << r.chair.mean_len << ',' << r.kl << ',' << r.layer << '\n';
  return out.str();
}

}  // namespace alea
