#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "alea/adam.hpp"
#include "alea/editor.hpp"
#include "alea/locate.hpp"
#include "test_support.hpp"

using namespace alea;
using alea::test::random_model;
using alea::test::scene_from_cells;
using alea::test::tiny_config;

namespace {

const Tokenizer& tok() {
  static const Tokenizer t(WorldConfig{});
  return t;
}

HiddenSummary summary(const Matrixd& m) {
  HiddenSummary s;
  s.layers = m;
  return s;
}

}  // namespace

TEST_CASE("pooled_response_hidden") {
  const auto m = random_model<float>(tiny_config(tok(), 3), 1);
  auto scene = scene_from_cells({{0, 1, 2}, {5, 3, 0}});
  std::vector<int> prompt{1, 7, 6};
  std::vector<int> one{14};
  const auto visual = encode_scene(m, scene);

  std::vector<int> ids = prompt;
  ids.push_back(14);
  auto trace = forward_with_trace<float>(m, visual, std::span<const int>(ids));
  auto s = pooled_response_hidden(m, scene, prompt, one);
  REQUIRE(s.layers.rows() == 3);
  for (Index l = 0; l < 3; ++l)
    CHECK(s.layers.row(l) == trace.hidden[static_cast<std::size_t>(l)].row(12).cast<double>());

  // Mean over response rows, recomputed with a plain loop.
  std::vector<int> response{14, 24, 30, 33, 3, 2};
  std::vector<int> all = prompt;
  all.insert(all.end(), response.begin(), response.end());
  auto full = forward_with_trace<float>(m, visual, std::span<const int>(all));
  auto mean = pooled_response_hidden(m, scene, prompt, response);
  auto again = pooled_response_hidden(m, scene, prompt, response);
  CHECK(mean.layers == again.layers);
  for (Index l = 0; l < 3; ++l) {
    for (Index j = 0; j < 8; ++j) {
      double acc = 0;
      for (Index t = 12; t < 18; ++t) acc += full.hidden[static_cast<std::size_t>(l)](t, j);
      CHECK(std::abs(mean.layers(l, j) - acc / 6.0) < 1e-6);
    }
  }
  auto last = pooled_response_hidden(m, scene, prompt, response, Pooling::kLast);
  CHECK(last.layers.row(1) == full.hidden[1].row(17).cast<double>());

  std::vector<int> none;
  CHECK_THROWS_AS(pooled_response_hidden(m, scene, prompt, none), Error);
}

TEST_CASE("layer_distances") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  Matrixd a(4, 6);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  for (double d : layer_distances(summary(a), summary(a))) CHECK(d == 0.0);

  Matrixd b = a;
  Matrixd delta(1, 6);
  delta << 3, 0, -4, 0, 0, 0;
  b.row(1) += delta;
  auto d = layer_distances(summary(a), summary(b));
  CHECK(d[0] == 0.0);
  CHECK(d[1] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(d[2] == 0.0);
  CHECK(d[3] == 0.0);

  for (Index i = 0; i < b.size(); ++i) b.data()[i] = n(rng);
  d = layer_distances(summary(a), summary(b));
  for (Index l = 0; l < 4; ++l) {
    long double acc = 0;
    for (Index j = 0; j < 6; ++j) acc += (a(l, j) - b(l, j)) * static_cast<long double>(a(l, j) - b(l, j));
    CHECK(std::abs(d[static_cast<std::size_t>(l)] - std::sqrt(static_cast<double>(acc))) < 1e-6);
  }

  CHECK_THROWS_AS(layer_distances(summary(a), summary(Matrixd::Zero(3, 6))), Error);
  auto last = summary(a);
  last.pooling = Pooling::kLast;
  CHECK_THROWS_AS(layer_distances(summary(a), last), Error);
}

TEST_CASE("locate_from_distances") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto f = alea::test::planted_fixture(seed);
    auto r = locate_from_distances(f.per_pair);
    CHECK(r.layer == f.planted);
    CHECK_FALSE(r.tie);
    CHECK(r.target_tensor == mlp_w2_name(f.planted));
  }

  auto zero = locate_from_distances({{0, 0, 0, 0}, {0, 0, 0, 0}});
  CHECK(zero.tie);
  CHECK(zero.layer == 4);

  auto tie = locate_from_distances({{1, 3, 3, 2}});
  CHECK(tie.tie);
  CHECK(tie.layer == 3);

  // Half-set result uses the first n/2 pairs only.
  auto half = locate_from_distances({{5, 0}, {0, 1}, {0, 10}, {0, 10}});
  CHECK(half.half_set_layer == 1);
  CHECK(half.layer == 2);
  CHECK(half.distances[1] == doctest::Approx(21.0 / 4.0));

  CHECK_THROWS_AS(locate_from_distances({}), Error);

  // Common positive scaling leaves the argmax unchanged.
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    auto f = alea::test::planted_fixture(seed);
    auto scaled = f.per_pair;
    for (auto& row : scaled)
      for (auto& v : row) v *= 7.5;
    CHECK(locate_from_distances(scaled).layer == locate_from_distances(f.per_pair).layer);
  }

  auto r = locate_from_distances({{1, 2}, {3, 1}});
  auto back = locate_report_from_json(to_json(r));
  CHECK(back.layer == r.layer);
  CHECK(back.distances == r.distances);
}

TEST_CASE("locate_layer on a model matches a brute-force recomputation") {
  const auto m = random_model<float>(tiny_config(tok(), 3), 2);
  auto scenes = generate_scenes(4, WorldConfig{}, 12);
  std::vector<ActivationPair> pairs;
  Rng rng(1);
  for (const auto& s : scenes) {
    ActivationPair p;
    p.scene = s;
    p.positive_prompt = tok().prompt(PromptKind::kGrounded);
    p.positive_response = grounded_caption(tok(), s);
    p.negative_prompt = tok().prompt(PromptKind::kPrior);
    p.negative_response = biased_caption(tok(), s, default_bias_table(), WorldConfig{}, rng);
    pairs.push_back(p);
  }
  auto r = locate_layer(m, pairs, 10);
  CHECK(r.n_pairs == 10);
  CHECK(locate_layer(m, pairs, 10).distances == r.distances);

  std::vector<double> brute(3, 0.0);
  auto pooled = [&](const Scene& s, const std::vector<int>& x, const std::vector<int>& y, int layer) {
    std::vector<int> ids = x;
    ids.insert(ids.end(), y.begin(), y.end());
    const Matrixd h = forward_with_trace<float>(m, encode_scene(m, s), std::span<const int>(ids)).hidden[static_cast<std::size_t>(layer)].cast<double>();
    Matrixd acc = Matrixd::Zero(1, h.cols());
    for (std::size_t t = 0; t < y.size(); ++t) acc += h.row(9 + static_cast<Index>(x.size() + t));
    return Matrixd(acc / static_cast<double>(y.size()));
  };
  for (std::size_t i = 0; i < 10; ++i)
    for (int l = 0; l < 3; ++l)
      brute[static_cast<std::size_t>(l)] +=
          (pooled(pairs[i].scene, pairs[i].positive_prompt, pairs[i].positive_response, l) -
           pooled(pairs[i].scene, pairs[i].negative_prompt, pairs[i].negative_response, l))
              .norm();
  for (auto& b : brute) b /= 10.0;
  for (int l = 0; l < 3; ++l) CHECK(std::abs(r.distances[static_cast<std::size_t>(l)] - brute[static_cast<std::size_t>(l)]) < 1e-9);

  CHECK_THROWS_AS(locate_layer(m, {}, 10), Error);
}

TEST_CASE("select_target") {
  auto m = random_model<float>(tiny_config(tok(), 3), 5);
  auto h = select_target(m, 2);
  CHECK(h.name == "layer2.mlp.w2");
  CHECK(h.tensor.same_node(m.layers[1].w2));
  CHECK_THROWS_AS(select_target(m, 0), Error);
  CHECK_THROWS_AS(select_target(m, 4), Error);

  mark_only_trainable(m, h);
  auto trainable = m.trainable_parameters();
  REQUIRE(trainable.size() == 1);
  CHECK(trainable[0].size() == m.config().ffn_hidden * m.config().d_model);

  // An optimizer step with synthetic gradients changes only that tensor.
  auto before = model_digests(m);
  trainable[0].node()->grad = Matrixf::Ones(trainable[0].rows(), trainable[0].cols());
  AdamOptions o;
  o.lr = 0.01;
  auto state = make_adam_state<float>(std::span<const Tensorf>(trainable), o);
  adam_step<float>(std::span<Tensorf>(trainable), state);
  CHECK(verify_locality(before, model_digests(m)) == std::vector<std::string>{"layer2.mlp.w2"});

  CHECK(pooling_from_string("last") == Pooling::kLast);
  CHECK_THROWS_AS(pooling_from_string("max"), Error);
}
