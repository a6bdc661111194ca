#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "alea/model.hpp"
#include "alea/world.hpp"

namespace alea {

struct AdversarialPrefix {
  Tensor<float> embedding;  // r x d
  std::string id;
  std::uint64_t seed = 0;
  int steps = 0;
  double final_loss = 0.0;
  bool tuned = false;

  int length() const { return static_cast<int>(embedding.rows()); }
};

// Gaussian entries, sigma 0.02.
AdversarialPrefix init_prefix(std::uint64_t seed, int length, int d_model);

// Embedding rows of a fixed token sequence (hand-written prefix ablation).
AdversarialPrefix fixed_prefix(const ToyVLM<float>& model, std::span<const int> tokens, std::string id);

struct PrefixTuneConfig {
  int length = 5;
  double lr = 1e-2;
  int epochs = 3;
  int batch_size = 10;
  int dataset_size = 1500;
  std::uint64_t seed = 0;

  void validate() const;
};

// (scene, benign x, y-) triples.
struct PrefixSample {
  Scene scene;
  std::vector<int> prompt;
  std::vector<int> negative;
};

struct PrefixTuneResult {
  AdversarialPrefix prefix;
  std::vector<double> step_loss;
  double initial_loss = 0.0;  // mean L_q over the dataset before tuning
  double final_loss = 0.0;    // same, after
};

double mean_prefix_loss(const ToyVLM<float>& model, const AdversarialPrefix& prefix,
                        const std::vector<PrefixSample>& samples);

// Adam on the prefix only; the model is never modified (verified by digest).
PrefixTuneResult tune_prefix(const ToyVLM<float>& model, const std::vector<PrefixSample>& samples,
                             const PrefixTuneConfig& config, AdversarialPrefix prefix);

struct AdversarialEffect {
  double hallu_rate_benign = 0.0;
  double hallu_rate_prefixed = 0.0;
  int n = 0;
};

AdversarialEffect adversarial_effect(const ToyVLM<float>& model, const AdversarialPrefix& prefix,
                                     const Tokenizer& tok, const std::vector<Scene>& scenes, int max_new = 64);

void save_prefix(const AdversarialPrefix& prefix, const std::filesystem::path& path);
AdversarialPrefix load_prefix(const std::filesystem::path& path);

nlohmann::json to_json(const PrefixTuneResult& r);

}  // namespace alea
