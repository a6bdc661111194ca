#include "alea/activation.hpp"

#include <algorithm>

namespace alea {

void validate_pair(const Tokenizer& tok, const ActivationPair& pair) {
  const auto pos = score_hallucination(tok, pair.scene, pair.positive_response);
  const auto neg = score_hallucination(tok, pair.scene, pair.negative_response);
  require(pos.score == 0, ErrorKind::kDataset, "activation pair positive does not score 0");
  require(neg.score >= 1, ErrorKind::kDataset, "activation pair negative scores 0");
}

std::vector<ActivationPair> build_activation_dataset(const ToyVLM<float>& model, const Tokenizer& tok,
                                                     const std::vector<Scene>& scenes, int target_pairs,
                                                     const BiasTable& bias, const WorldConfig& world,
                                                     Rng& rng, int max_new, int scan_factor,
                                                     ActivationStats* stats) {
  require(target_pairs > 0, ErrorKind::kContract, "build_activation_dataset: target must be positive");
  NoGradGuard no_grad;
  const auto grounded = tok.prompt(PromptKind::kGrounded);
  const auto prior = tok.prompt(PromptKind::kPrior);
  const std::size_t limit =
      std::min(scenes.size(), static_cast<std::size_t>(scan_factor) * static_cast<std::size_t>(target_pairs));

  ActivationStats local;
  std::vector<ActivationPair> pairs;
  std::vector<std::size_t> unused;
  for (std::size_t i = 0; i < limit && static_cast<int>(pairs.size()) < target_pairs; ++i) {
    const Scene& scene = scenes[i];
    ++local.scanned;
    const auto visual = encode_scene(model, scene);
    auto pos = greedy_decode(model, visual, std::span<const int>(grounded), max_new, tok.eos());
    auto neg = greedy_decode(model, visual, std::span<const int>(prior), max_new, tok.eos());
    const auto pos_score = score_hallucination(tok, scene, pos.tokens);
    const auto neg_score = score_hallucination(tok, scene, neg.tokens);
    if (pos_score.score == 0 && pos_score.mentions > 0 && neg_score.score >= 1) {
      pairs.push_back(ActivationPair{scene, grounded, std::move(pos.tokens), prior, std::move(neg.tokens),
                                     neg_score.score, false});
      ++local.model_pairs;
    } else {
      unused.push_back(i);
    }
  }
  for (std::size_t i = limit; i < scenes.size(); ++i) unused.push_back(i);
  for (std::size_t idx : unused) {
    if (static_cast<int>(pairs.size()) >= target_pairs) break;
    const Scene& scene = scenes[idx];
    auto negative = biased_caption(tok, scene, bias, world, rng);
    const int score = score_hallucination(tok, scene, negative).score;
    pairs.push_back(ActivationPair{scene, grounded, grounded_caption(tok, scene), prior, std::move(negative), score, true});
    ++local.fallback_pairs;
  }
  if (stats) *stats = local;
  if (static_cast<int>(pairs.size()) < target_pairs) {
    fail(ErrorKind::kDataset, "only " + std::to_string(pairs.size()) + " activation pairs for a target of " +
                                  std::to_string(target_pairs));
  }
  return pairs;
}

nlohmann::json pair_to_json(const ActivationPair& p) {
  return {{"schema_version", kSchemaVersion},
          {"scene", scene_to_json(p.scene)},
          {"positive", {{"prompt_ids", p.positive_prompt}, {"response_ids", p.positive_response}, {"hallu_score", 0}}},
          {"negative",
           {{"prompt_ids", p.negative_prompt}, {"response_ids", p.negative_response}, {"hallu_score", p.negative_score}}},
          {"flags", p.fallback ? nlohmann::json::array({"fallback"}) : nlohmann::json::array()}};
}

ActivationPair pair_from_json(const nlohmann::json& j) {
  try {
    require(j.at("schema_version").get<int>() == kSchemaVersion, ErrorKind::kFormat,
            "activation pair schema_version mismatch");
    ActivationPair p;
    p.scene = scene_from_json(j.at("scene"));
    p.positive_prompt = j.at("positive").at("prompt_ids").get<std::vector<int>>();
    p.positive_response = j.at("positive").at("response_ids").get<std::vector<int>>();
    p.negative_prompt = j.at("negative").at("prompt_ids").get<std::vector<int>>();
    p.negative_response = j.at("negative").at("response_ids").get<std::vector<int>>();
    p.negative_score = j.at("negative").at("hallu_score").get<int>();
    for (const auto& f : j.at("flags"))
      if (f == "fallback") p.fallback = true;
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed activation pair: ") + e.what());
  }
}

}  // namespace alea
