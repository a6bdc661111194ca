#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "alea/editor.hpp"
#include "alea/grad_check.hpp"
#include "alea/model.hpp"
#include "alea/util.hpp"
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

Matrixd ln_ref(const Matrixd& x, const Matrixd& g, const Matrixd& b) {
  Matrixd out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mu = 0, var = 0;
    for (Index j = 0; j < x.cols(); ++j) mu += x(r, j);
    mu /= static_cast<double>(x.cols());
    for (Index j = 0; j < x.cols(); ++j) var += (x(r, j) - mu) * (x(r, j) - mu);
    var /= static_cast<double>(x.cols());
    for (Index j = 0; j < x.cols(); ++j) out(r, j) = (x(r, j) - mu) / std::sqrt(var + 1e-5) * g(0, j) + b(0, j);
  }
  return out;
}

double gelu_ref(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
}

// Straight-line forward with explicit loops; returns per-layer hidden states
// and the logits.
std::pair<std::vector<Matrixd>, Matrixd> reference_forward(const ToyVLM<double>& m, const Scene& scene,
                                                           const std::vector<int>& ids) {
  const auto& c = m.config();
  const Index d = c.d_model;
  const Index n = c.n_cells() + static_cast<Index>(ids.size());
  Matrixd x = Matrixd::Zero(n, d);
  for (int k = 0; k < c.n_cells(); ++k) {
    const auto& cell = scene.cells[static_cast<std::size_t>(k)];
    Matrixd row = m.visual_cells.value().row(k);
    if (cell) {
      row += m.visual_objects.value().row(cell->object) + m.visual_attributes.value().row(cell->attribute);
    } else {
      row += m.visual_objects.value().row(c.n_objects);
    }
    x.row(k) = row * m.visual_projection.value();
  }
  for (std::size_t i = 0; i < ids.size(); ++i)
    x.row(c.n_cells() + static_cast<Index>(i)) = m.token_embedding.value().row(ids[i]);
  for (Index t = 0; t < n; ++t) x.row(t) += m.position_embedding.value().row(t);

  std::vector<Matrixd> hidden;
  const Index dh = d / c.n_heads;
  for (const auto& L : m.layers) {
    Matrixd a = ln_ref(x, L.ln1_gamma.value(), L.ln1_beta.value());
    Matrixd q = a * L.wq.value(), k = a * L.wk.value(), v = a * L.wv.value();
    Matrixd att = Matrixd::Zero(n, d);
    for (int h = 0; h < c.n_heads; ++h) {
      for (Index i = 0; i < n; ++i) {
        std::vector<double> s(static_cast<std::size_t>(i + 1));
        double mx = -1e300;
        for (Index j = 0; j <= i; ++j) {
          double dot = 0;
          for (Index e = 0; e < dh; ++e) dot += q(i, h * dh + e) * k(j, h * dh + e);
          s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[static_cast<std::size_t>(j)]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (Index j = 0; j <= i; ++j)
          for (Index e = 0; e < dh; ++e) att(i, h * dh + e) += s[static_cast<std::size_t>(j)] / z * v(j, h * dh + e);
      }
    }
    x += att * L.wo.value();
    Matrixd b = ln_ref(x, L.ln2_gamma.value(), L.ln2_beta.value());
    Matrixd u = b * L.w1.value();
    for (Index r = 0; r < u.rows(); ++r)
      for (Index j = 0; j < u.cols(); ++j) u(r, j) = gelu_ref(u(r, j) + L.b1.value()(0, j));
    Matrixd out = u * L.w2.value();
    out.rowwise() += L.b2.value().row(0);
    x += out;
    hidden.push_back(x);
  }
  Matrixd logits = ln_ref(x, m.final_gamma.value(), m.final_beta.value()) * m.head.value();
  return {hidden, logits};
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "alea_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("tokenizer declaration order and round trip") {
  const auto& t = tok();
  CHECK(t.pad() == 0);
  CHECK(t.id("<bos>") == 1);
  CHECK(t.id("<eos>") == 2);
  CHECK(t.id("yes") == 4);
  CHECK(t.id("present") == 10);
  CHECK(t.id("cat") == 11);
  CHECK(t.id("red") == 23);
  CHECK(t.id("r0") == 29);
  CHECK(t.id("c2") == 34);
  CHECK(t.size() == 35);
  std::vector<int> ids;
  for (int i = 0; i < t.size(); ++i) ids.push_back(i);
  CHECK(t.encode(t.decode(ids)) == ids);
  CHECK_THROWS_AS(t.id("zebra"), Error);
}

TEST_CASE("config validation") {
  VLMConfig c = tiny_config(tok());
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config(tok());
  c.ffn_hidden = c.d_model;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("encode_scene") {
  auto m = random_model<double>(tiny_config(tok()), 1);
  auto s1 = scene_from_cells({{0, 2, 1}, {4, 5, 3}, {8, 7, 0}});
  CHECK(encode_scene(m, s1).value() == encode_scene(m, s1).value());

  // Swapping two cells changes only those two rows, each by its content term.
  auto s2 = scene_from_cells({{0, 7, 0}, {4, 5, 3}, {8, 2, 1}});
  Matrixd v1 = encode_scene(m, s1).value(), v2 = encode_scene(m, s2).value();
  const Matrixd& P = m.visual_projection.value();
  for (int k = 0; k < 9; ++k) {
    if (k == 0 || k == 8) {
      CHECK_FALSE(v1.row(k).isApprox(v2.row(k)));
      Matrixd content1 = m.visual_objects.value().row(k == 0 ? 2 : 7) + m.visual_attributes.value().row(k == 0 ? 1 : 0);
      Matrixd content2 = m.visual_objects.value().row(k == 0 ? 7 : 2) + m.visual_attributes.value().row(k == 0 ? 0 : 1);
      CHECK((v2.row(k) - v1.row(k)).isApprox((content2 - content1) * P, 1e-12));
    } else {
      CHECK(v1.row(k) == v2.row(k));
    }
  }

  // Empty scene: project(empty + position_k), distinct per cell.
  Scene empty = scene_from_cells({});
  Matrixd ve = encode_scene(m, empty).value();
  for (int k = 0; k < 9; ++k) {
    Matrixd expected = (m.visual_objects.value().row(12) + m.visual_cells.value().row(k)) * P;
    CHECK(ve.row(k).isApprox(expected, 1e-12));
    for (int j = 0; j < k; ++j) CHECK_FALSE(ve.row(k).isApprox(ve.row(j)));
  }

  auto bad = scene_from_cells({{0, 12, 0}});
  CHECK_THROWS_AS(encode_scene(m, bad), Error);
}

TEST_CASE("forward matches a straight-line reimplementation") {
  auto m = random_model<double>(tiny_config(tok()), 3);
  auto scene = scene_from_cells({{1, 3, 2}, {5, 0, 5}});
  std::vector<int> ids{1, 6, 14, 25, 30, 33, 3};
  auto visual = encode_scene(m, scene);
  auto trace = forward_with_trace<double>(m, visual, std::span<const int>(ids));
  auto [hidden, logits] = reference_forward(m, scene, ids);
  REQUIRE(trace.hidden.size() == 2);
  for (std::size_t l = 0; l < 2; ++l) CHECK((trace.hidden[l] - hidden[l]).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((trace.logits.value() - logits).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("causal attention and prefix neutrality") {
  auto m = random_model<float>(tiny_config(tok()), 4);
  auto scene = scene_from_cells({{2, 1, 1}});
  auto visual = encode_scene(m, scene);
  std::vector<int> ids{1, 6, 12, 24, 29, 32};
  auto trace = forward_with_trace<float>(m, visual, std::span<const int>(ids));
  for (const auto& layer : trace.attention) {
    for (const auto& p : layer) {
      for (Index i = 0; i < p.rows(); ++i) {
        CHECK(std::abs(p.row(i).sum() - 1.0f) < 1e-5f);
        for (Index j = i + 1; j < p.cols(); ++j) CHECK(p(i, j) == 0.0f);
      }
    }
  }

  // Later tokens do not affect earlier logits.
  std::vector<int> ids2 = ids;
  ids2.back() = 33;
  auto logits2 = forward_logits<float>(m, visual, std::span<const int>(ids2)).value();
  const Index n = trace.logits.rows();
  CHECK(logits2.topRows(n - 1) == trace.logits.value().topRows(n - 1));

  Tensorf empty_prefix(Matrixf(0, 8));
  auto with = forward_with_trace<float>(m, visual, std::span<const int>(ids), &empty_prefix);
  CHECK(with.logits.value() == trace.logits.value());
  for (std::size_t l = 0; l < with.hidden.size(); ++l) CHECK(with.hidden[l] == trace.hidden[l]);

  std::vector<int> too_long(60, 6);
  CHECK_THROWS_AS(forward_logits<float>(m, visual, std::span<const int>(too_long)), Error);
}

TEST_CASE("response_nll") {
  auto m = random_model<double>(tiny_config(tok()), 5);
  auto scene = scene_from_cells({{3, 4, 4}, {7, 9, 2}});
  auto visual = encode_scene(m, scene);
  std::vector<int> prompt{1, 6}, response{15, 27, 30, 33, 3, 2};
  const double nll = response_nll<double>(m, visual, std::span<const int>(prompt), std::span<const int>(response)).item();

  // Replay from the full logits.
  std::vector<int> ids = prompt;
  ids.insert(ids.end(), response.begin(), response.end());
  auto logits = forward_logits<double>(m, visual, std::span<const int>(ids)).value();
  double expected = 0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const Index row = 9 + static_cast<Index>(prompt.size() + i) - 1;
    double z = 0;
    for (Index v = 0; v < logits.cols(); ++v) z += std::exp(logits(row, v));
    expected += std::log(z) - logits(row, response[i]);
  }
  expected /= static_cast<double>(response.size());
  CHECK(nll == doctest::Approx(expected).epsilon(1e-12));

  std::vector<int> none;
  CHECK_THROWS_AS(response_nll<double>(m, visual, std::span<const int>(prompt), std::span<const int>(none)), Error);

  // Zero weights give a uniform head.
  ToyVLM<float> zero(tiny_config(tok()));
  auto zv = encode_scene(zero, scene);
  CHECK(response_nll<float>(zero, zv, std::span<const int>(prompt), std::span<const int>(response)).item() ==
        doctest::Approx(std::log(35.0)).epsilon(1e-5));
}

TEST_CASE("response_nll gradient passes finite differences on d=8") {
  auto m = random_model<double>(tiny_config(tok()), 6);
  auto scene = scene_from_cells({{0, 1, 0}, {4, 11, 5}});
  std::vector<int> prompt{1, 6}, response{12, 23, 29, 32, 3, 2};
  std::vector<Tensord> params;
  for (auto& p : m.named_parameters()) {
    p.tensor.set_requires_grad(true);
    params.push_back(p.tensor);
  }
  GradCheckOptions o;
  o.eps = 1e-5;
  o.coords_per_param = 12;
  auto r = grad_check<double>(
      [&] {
        auto visual = encode_scene(m, scene);
        return response_nll<double>(m, visual, std::span<const int>(prompt), std::span<const int>(response));
      },
      std::span<Tensord>(params), o);
  CHECK(r.max_rel_error <= 1e-3);
  CHECK(r.n_checked > 100);
}

TEST_CASE("greedy decode") {
  auto m = random_model<float>(tiny_config(tok()), 7, 1.0);
  auto scene = scene_from_cells({{4, 3, 3}});
  auto visual = encode_scene(m, scene);
  std::vector<int> prompt{1, 6};
  auto a = greedy_decode<float>(m, visual, std::span<const int>(prompt), 20, 2);
  auto b = greedy_decode<float>(m, visual, std::span<const int>(prompt), 20, 2);
  CHECK(a.tokens == b.tokens);

  // Same tokens as an uncached argmax loop.
  std::vector<int> ids = prompt, expected;
  for (int step = 0; step < 20; ++step) {
    auto logits = forward_logits<float>(m, visual, std::span<const int>(ids)).value();
    Index best = 0;
    for (Index v = 1; v < logits.cols(); ++v)
      if (logits(logits.rows() - 1, v) > logits(logits.rows() - 1, best)) best = v;
    expected.push_back(static_cast<int>(best));
    ids.push_back(static_cast<int>(best));
    if (best == 2) break;
  }
  CHECK(a.tokens == expected);

  // A head that always peaks at <eos>.
  ToyVLM<float> eos_model = random_model<float>(tiny_config(tok()), 8);
  eos_model.final_gamma.mutable_value().setZero();
  eos_model.final_beta.mutable_value().setOnes();
  eos_model.head.mutable_value().setZero();
  eos_model.head.mutable_value().col(2).setOnes();
  auto r = greedy_decode<float>(eos_model, encode_scene(eos_model, scene), std::span<const int>(prompt), 20, 2);
  CHECK(r.tokens == std::vector<int>{2});
  CHECK(r.hit_eos);
}

TEST_CASE("sample decode") {
  auto m = random_model<float>(tiny_config(tok()), 9, 0.3);
  auto scene = scene_from_cells({{1, 2, 3}});
  auto visual = encode_scene(m, scene);
  std::vector<int> prompt{1, 6};
  std::mt19937_64 r1(5), r2(5);
  auto a = sample_decode<float>(m, visual, std::span<const int>(prompt), 16, 2, 1.0, r1);
  auto b = sample_decode<float>(m, visual, std::span<const int>(prompt), 16, 2, 1.0, r2);
  CHECK(a.tokens == b.tokens);

  std::mt19937_64 r3(1);
  auto cold = sample_decode<float>(m, visual, std::span<const int>(prompt), 16, 2, 1e-4, r3);
  CHECK(cold.tokens == greedy_decode<float>(m, visual, std::span<const int>(prompt), 16, 2).tokens);
  CHECK_THROWS_AS(sample_decode<float>(m, visual, std::span<const int>(prompt), 4, 2, 0.0, r3), Error);

  // Empirical first-token frequencies within 3 sigma of the softmax.
  auto logits = next_token_logits<float>(m, visual, std::span<const int>(prompt));
  Matrixd probs = softmax_rows_value(Matrixd(logits.cast<double>()));
  const int draws = 10000;
  std::vector<int> counts(static_cast<std::size_t>(probs.cols()), 0);
  std::mt19937_64 rng(2024);
  for (int i = 0; i < draws; ++i)
    ++counts[static_cast<std::size_t>(
        sample_decode<float>(m, visual, std::span<const int>(prompt), 1, 2, 1.0, rng).tokens.at(0))];
  for (Index v = 0; v < probs.cols(); ++v) {
    const double p = probs(0, v);
    const double sigma = std::sqrt(draws * p * (1 - p));
    CHECK(std::abs(counts[static_cast<std::size_t>(v)] - draws * p) <= 3 * sigma + 1e-9);
  }
}

TEST_CASE("checkpoint container") {
  auto m = random_model<float>(tiny_config(tok()), 10);
  const auto p1 = temp_path("a.alea"), p2 = temp_path("b.alea");
  save_checkpoint(m, p1);
  auto loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  CHECK(read_file(p1) == read_file(p2));
  const auto src = m.named_parameters();
  const auto dst = loaded.named_parameters();
  REQUIRE(src.size() == dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    CHECK(src[i].name == dst[i].name);
    CHECK(src[i].tensor.value() == dst[i].tensor.value());
  }

  const std::string bytes = read_file(p1);
  std::string corrupt = bytes;
  corrupt[corrupt.size() - 3] ^= 0x01;
  CHECK_THROWS_AS(parse_container(corrupt), Error);
  CHECK_THROWS_AS(parse_container(bytes.substr(0, bytes.size() - 4)), Error);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(parse_container(bad_magic), Error);
  try {
    parse_container(corrupt);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kFormat);
  }

  // Digest diff names exactly the touched tensor.
  auto before = model_digests(m);
  auto edited = m.clone();
  auto w = edited.parameter("layer2.attn.wq");
  unsigned char* raw = reinterpret_cast<unsigned char*>(w.mutable_value().data());
  raw[0] ^= 0x01;
  CHECK(verify_locality(before, model_digests(edited)) == std::vector<std::string>{"layer2.attn.wq"});
  CHECK(verify_locality(before, model_digests(m)).empty());
}
