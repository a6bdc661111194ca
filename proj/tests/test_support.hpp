#pragma once

#include <random>

#include "alea/model.hpp"
#include "alea/world.hpp"

namespace alea::test {

inline WorldConfig small_world() { return WorldConfig{}; }

inline VLMConfig tiny_config(const Tokenizer& tok, int layers = 2, int d = 8) {
  VLMConfig c = VLMConfig::for_world(small_world(), tok);
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = 2;
  c.ffn_hidden = 2 * d;
  c.max_seq = 64;
  return c;
}

// Every parameter (LayerNorm included) filled with U(-scale, scale).
template <typename Scalar>
ToyVLM<Scalar> random_model(const VLMConfig& c, std::uint64_t seed, double scale = 0.5) {
  auto m = ToyVLM<Scalar>::initialize(c, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : m.named_parameters()) {
    auto& v = p.tensor.mutable_value();
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<Scalar>(u(rng));
  }
  return m;
}

inline Scene scene_from_cells(std::initializer_list<std::tuple<int, int, int>> cells, std::uint64_t id = 0) {
  Scene s;
  s.scene_id = id;
  s.grid_size = 3;
  s.cells.assign(9, std::nullopt);
  for (const auto& [k, obj, attr] : cells) s.cells[static_cast<std::size_t>(k)] = Cell{obj, attr};
  return s;
}

}  // namespace alea::test

#include "alea/locate.hpp"

namespace alea::test {

struct PlantedFixture {
  std::vector<std::vector<double>> per_pair;
  int planted = 0;  // 1-based
};

// Pairs of pooled summaries whose positive/negative gap is largest at one
// randomly chosen layer on every pair.
inline PlantedFixture planted_fixture(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int layers = std::uniform_int_distribution<int>(2, 8)(rng);
  const int d = std::uniform_int_distribution<int>(4, 32)(rng);
  const int pairs = std::uniform_int_distribution<int>(1, 40)(rng);
  PlantedFixture f;
  f.planted = std::uniform_int_distribution<int>(1, layers)(rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> gap(0.0, 0.5);
  for (int p = 0; p < pairs; ++p) {
    HiddenSummary pos, neg;
    pos.layers.resize(layers, d);
    for (Index i = 0; i < pos.layers.size(); ++i) pos.layers.data()[i] = 3.0 * noise(rng);
    neg.layers = pos.layers;
    for (int l = 0; l < layers; ++l) {
      Matrixd dir(1, d);
      for (Index j = 0; j < d; ++j) dir(0, j) = noise(rng);
      dir /= dir.norm();
      const double size = l + 1 == f.planted ? 2.0 + gap(rng) : gap(rng);
      neg.layers.row(l) += size * dir;
    }
    f.per_pair.push_back(layer_distances(pos, neg));
  }
  return f;
}

}  // namespace alea::test
