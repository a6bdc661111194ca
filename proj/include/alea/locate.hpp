#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "alea/activation.hpp"
#include "alea/model.hpp"

namespace alea {

enum class Pooling { kMean, kLast };
std::string_view to_string(Pooling p);
Pooling pooling_from_string(std::string_view s);

// Per-layer pooled response hidden states (L x d, row l-1 = layer l).
struct HiddenSummary {
  Matrixd layers;
  Pooling pooling = Pooling::kMean;
  std::string source;
};

HiddenSummary pooled_response_hidden(const ToyVLM<float>& model, const Scene& scene,
                                     std::span<const int> prompt, std::span<const int> response,
                                     Pooling pooling = Pooling::kMean);

std::vector<double> layer_distances(const HiddenSummary& pos, const HiddenSummary& neg);

struct LocateReport {
  std::vector<double> distances;  // mean over pairs, index l-1 = layer l
  int layer = 0;                  // 1-based
  int n_pairs = 0;
  bool tie = false;
  std::string target_tensor;
  int half_set_layer = 0;  // argmax over the first n/2 pairs
  std::string pooling = "mean";
};

nlohmann::json to_json(const LocateReport& r);
LocateReport locate_report_from_json(const nlohmann::json& j);

// argmax over mean distances, ties toward the deepest layer.
LocateReport locate_from_distances(const std::vector<std::vector<double>>& per_pair_distances);

LocateReport locate_layer(const ToyVLM<float>& model, const std::vector<ActivationPair>& pairs,
                          int n_pairs = 500, Pooling pooling = Pooling::kMean);

struct ParameterHandle {
  std::string name;
  Tensor<float> tensor;
};

// W2 of the MLP at `layer` (1-based).
ParameterHandle select_target(const ToyVLM<float>& model, int layer);
// Freezes everything except `target`.
void mark_only_trainable(ToyVLM<float>& model, const ParameterHandle& target);

}  // namespace alea
