#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "alea/model.hpp"
#include "alea/world.hpp"

namespace alea {

// Positive [v, x+, y+] (score 0) and negative [v, x-, y-] (score >= 1) for
// one scene.
struct ActivationPair {
  Scene scene;
  std::vector<int> positive_prompt, positive_response;
  std::vector<int> negative_prompt, negative_response;
  int negative_score = 0;
  bool fallback = false;  // grammar-generated rather than model-generated
};

struct ActivationStats {
  int scanned = 0;
  int model_pairs = 0;
  int fallback_pairs = 0;
  double yield() const { return scanned > 0 ? static_cast<double>(model_pairs) / scanned : 0.0; }
};

// Decodes y+ under the grounded prompt and y- under the prior prompt, keeps
// pairs passing the oracle filter. Scans at most scan_factor x target scenes,
// then fills the remainder from the grammar (flagged).
std::vector<ActivationPair> build_activation_dataset(const ToyVLM<float>& model, const Tokenizer& tok,
                                                     const std::vector<Scene>& scenes, int target_pairs,
                                                     const BiasTable& bias, const WorldConfig& world,
                                                     Rng& rng, int max_new = 64, int scan_factor = 4,
                                                     ActivationStats* stats = nullptr);

void validate_pair(const Tokenizer& tok, const ActivationPair& pair);

nlohmann::json pair_to_json(const ActivationPair& p);
ActivationPair pair_from_json(const nlohmann::json& j);

}  // namespace alea
