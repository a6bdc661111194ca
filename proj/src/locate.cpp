#include "alea/locate.hpp"

#include <algorithm>
#include <cmath>

namespace alea {

std::string_view to_string(Pooling p) { return p == Pooling::kMean ? "mean" : "last"; }

Pooling pooling_from_string(std::string_view s) {
  if (s == "mean") return Pooling::kMean;
  if (s == "last") return Pooling::kLast;
  fail(ErrorKind::kConfig, "unknown pooling '" + std::string(s) + "' (expected mean|last)");
}

HiddenSummary pooled_response_hidden(const ToyVLM<float>& model, const Scene& scene,
                                     std::span<const int> prompt, std::span<const int> response,
                                     Pooling pooling) {
  require(!response.empty(), ErrorKind::kContract, "pooled_response_hidden: empty response");
  NoGradGuard no_grad;
  std::vector<int> ids(prompt.begin(), prompt.end());
  ids.insert(ids.end(), response.begin(), response.end());
  const auto visual = encode_scene(model, scene);
  const auto trace = forward_with_trace<float>(model, visual, std::span<const int>(ids), nullptr, TraceOptions{true, false});
  const Index start = visual.rows() + static_cast<Index>(prompt.size());
  const Index count = static_cast<Index>(response.size());

  HiddenSummary s;
  s.pooling = pooling;
  s.layers.resize(static_cast<Index>(trace.hidden.size()), model.config().d_model);
  for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
    const auto& h = trace.hidden[l];
    auto row = s.layers.row(static_cast<Index>(l));
    if (pooling == Pooling::kLast) {
      row = h.row(start + count - 1).cast<double>();
      continue;
    }
    // Sequential accumulation in token order.
    row.setZero();
    for (Index t = start; t < start + count; ++t)
      for (Index j = 0; j < h.cols(); ++j) row(j) += static_cast<double>(h(t, j));
    row /= static_cast<double>(count);
  }
  return s;
}

std::vector<double> layer_distances(const HiddenSummary& pos, const HiddenSummary& neg) {
  require(pos.layers.rows() == neg.layers.rows() && pos.layers.cols() == neg.layers.cols(), ErrorKind::kContract,
          "layer_distances: summaries differ in layer count or width");
  require(pos.pooling == neg.pooling, ErrorKind::kContract, "layer_distances: pooling methods differ");
  std::vector<double> d(static_cast<std::size_t>(pos.layers.rows()));
  for (Index l = 0; l < pos.layers.rows(); ++l) {
    double sq = 0.0;
    for (Index j = 0; j < pos.layers.cols(); ++j) {
      const double diff = pos.layers(l, j) - neg.layers(l, j);
      sq += diff * diff;
    }
    d[static_cast<std::size_t>(l)] = std::sqrt(sq);
  }
  return d;
}

namespace {

std::pair<int, bool> argmax_deepest(const std::vector<double>& d) {
  int best = 0;
  for (std::size_t l = 1; l < d.size(); ++l)
    if (d[l] >= d[static_cast<std::size_t>(best)]) best = static_cast<int>(l);
  const auto ties = std::count(d.begin(), d.end(), d[static_cast<std::size_t>(best)]);
  return {best + 1, ties > 1};
}

std::vector<double> mean_rows(const std::vector<std::vector<double>>& rows, std::size_t count) {
  std::vector<double> mean(rows.front().size(), 0.0);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t l = 0; l < mean.size(); ++l) mean[l] += rows[i][l];
  for (auto& m : mean) m /= static_cast<double>(count);
  return mean;
}

}  // namespace

LocateReport locate_from_distances(const std::vector<std::vector<double>>& per_pair) {
  require(!per_pair.empty(), ErrorKind::kContract, "locate: no pairs");
  for (const auto& row : per_pair)
    require(row.size() == per_pair.front().size() && !row.empty(), ErrorKind::kContract,
            "locate: inconsistent layer counts");
  LocateReport r;
  r.n_pairs = static_cast<int>(per_pair.size());
  r.distances = mean_rows(per_pair, per_pair.size());
  std::tie(r.layer, r.tie) = argmax_deepest(r.distances);
  r.target_tensor = mlp_w2_name(r.layer);
  const std::size_t half = per_pair.size() / 2;
  r.half_set_layer = half > 0 ? argmax_deepest(mean_rows(per_pair, half)).first : r.layer;
  return r;
}

LocateReport locate_layer(const ToyVLM<float>& model, const std::vector<ActivationPair>& pairs, int n_pairs,
                          Pooling pooling) {
  require(!pairs.empty(), ErrorKind::kContract, "locate_layer: empty pair list");
  require(n_pairs >= 1, ErrorKind::kContract, "locate_layer: n_pairs must be >= 1");
  const std::size_t n = std::min(pairs.size(), static_cast<std::size_t>(n_pairs));
  std::vector<std::vector<double>> per_pair;
  per_pair.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = pairs[i];
    const auto pos = pooled_response_hidden(model, p.scene, p.positive_prompt, p.positive_response, pooling);
    const auto neg = pooled_response_hidden(model, p.scene, p.negative_prompt, p.negative_response, pooling);
    per_pair.push_back(layer_distances(pos, neg));
  }
  auto r = locate_from_distances(per_pair);
  r.pooling = std::string(to_string(pooling));
  return r;
}

nlohmann::json to_json(const LocateReport& r) {
  return {{"schema_version", kSchemaVersion},
          {"distances", r.distances},
          {"layer", r.layer},
          {"n_pairs", r.n_pairs},
          {"tie", r.tie},
          {"target_tensor", r.target_tensor},
          {"half_set_layer", r.half_set_layer},
          {"pooling", r.pooling},
          {"pooling_note", "interpretation: response hidden states pooled per layer"}};
}

LocateReport locate_report_from_json(const nlohmann::json& j) {
  try {
    LocateReport r;
    r.distances = j.at("distances").get<std::vector<double>>();
    r.layer = j.at("layer").get<int>();
    r.n_pairs = j.at("n_pairs").get<int>();
    r.tie = j.at("tie").get<bool>();
    r.target_tensor = j.at("target_tensor").get<std::string>();
    r.half_set_layer = j.at("half_set_layer").get<int>();
    r.pooling = j.at("pooling").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed locate report: ") + e.what());
  }
}

ParameterHandle select_target(const ToyVLM<float>& model, int layer) {
  require(layer >= 1 && layer <= model.config().n_layers, ErrorKind::kContract,
          "select_target: layer " + std::to_string(layer) + " outside [1," +
              std::to_string(model.config().n_layers) + "]");
  const auto name = mlp_w2_name(layer);
  return ParameterHandle{name, model.parameter(name)};
}

void mark_only_trainable(ToyVLM<float>& model, const ParameterHandle& target) {
  model.freeze_all();
  model.set_trainable(target.name, true);
}

}  // namespace alea
