#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "alea/adam.hpp"
#include "alea/adversary.hpp"
#include "alea/locate.hpp"
#include "alea/model.hpp"
#include "alea/world.hpp"

namespace alea {

// ---------------------------------------------------------------------------
// Base pretraining

struct PretrainConfig {
  int epochs = 6;
  double lr = 3e-3;
  int batch_size = 16;
  double weight_decay = 2e-5;
  int warmup_steps = 100;
  double min_lr_fraction = 0.1;
  double grad_clip = 1.0;
  int probe_samples = 256;  // fixed subset for initial/final NLL
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainResult {
  double initial_nll = 0.0;
  double final_nll = 0.0;
  std::vector<double> epoch_loss;
  std::int64_t steps = 0;
};

// Teacher-forced NLL training of every parameter on the corpus.
PretrainResult train_base(ToyVLM<float>& model, const std::vector<CaptionSample>& corpus,
                          const PretrainConfig& config);

double mean_corpus_nll(const ToyVLM<float>& model, const std::vector<CaptionSample>& samples);

// ---------------------------------------------------------------------------
// Constrained editing

struct EditSample {
  Scene scene;
  std::vector<int> prompt;    // benign prompt x (caption or yes/no question)
  std::vector<int> positive;  // y+
  std::vector<int> negative;  // y- (kept for reporting)
  std::string source;         // "caption" or "pope"
};

struct EditConfig {
  double lambda = 0.1;
  double lr = 1e-3;  // 2e-5 at 7B scale
  double weight_decay = 2e-5;
  int epochs = 5;
  int batch_size = 10;
  std::optional<int> target_layer;  // overrides the located layer
  int reference_max_new = 64;
  std::uint64_t seed = 0;

  enum class Objective { kFull, kEditingOnly, kConstraintOnly };
  Objective objective = Objective::kFull;

  void validate() const;
};

struct EditStep {
  double editing = 0.0;
  double constraint = 0.0;
  double total = 0.0;
};

struct EditReport {
  std::vector<EditStep> steps;
  std::vector<std::string> changed_tensors;
  int layer = 0;
  std::string target_tensor;
  std::string prefix_id;
  double lambda = 0.0;
  std::string objective;
  int n_samples = 0;
  std::vector<std::string> warnings;
};

nlohmann::json to_json(const EditReport& r);

// -log P(y+ | [V; prefix; x]) under the model being edited.
Tensor<float> editing_loss(const ToyVLM<float>& model, const Tensor<float>* prefix, const Scene& scene,
                           std::span<const int> prompt, std::span<const int> positive);

// Reference continuation y0 = greedy_decode(base, V, x); empty y0 falls back
// to the first generation position.
std::vector<int> reference_continuation(const ToyVLM<float>& base, const Scene& scene,
                                        std::span<const int> prompt, int max_new, int eos_token);

// Mean per-position KL(P_edited || P_base) over the reference continuation.
Tensor<float> constraint_loss(const ToyVLM<float>& model, const ToyVLM<float>& base, const Scene& scene,
                              std::span<const int> prompt, std::span<const int> reference);

struct EditResult {
  ToyVLM<float> model;
  EditReport report;
};

// Adam on W2 at the located (or overridden) layer only. A null or untuned
// prefix is allowed (ablations) and recorded as a warning.
EditResult edit_parameters(const ToyVLM<float>& base, const AdversarialPrefix* prefix,
                           const std::vector<EditSample>& samples, const EditConfig& config,
                           const LocateReport& locate, int eos_token);

// Names of tensors whose digests differ.
std::vector<std::string> verify_locality(const std::vector<TensorDigest>& before,
                                         const std::vector<TensorDigest>& after);

}  // namespace alea
