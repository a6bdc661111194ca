#include "alea/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <random>

#include "alea/util.hpp"

namespace alea {

// ---------------------------------------------------------------------------
// Config

void VLMConfig::validate() const {
  require(n_layers >= 1, ErrorKind::kConfig, "model.n_layers must be >= 1");
  require(d_model >= 1 && n_heads >= 1, ErrorKind::kConfig, "model.d_model and model.n_heads must be >= 1");
  require(d_model % n_heads == 0, ErrorKind::kConfig, "model.d_model must be divisible by model.n_heads");
  require(ffn_hidden > d_model, ErrorKind::kConfig, "model.ffn_hidden must exceed model.d_model");
  require(vocab_size >= 1, ErrorKind::kConfig, "model vocab_size must be >= 1");
  require(grid_size >= 1 && n_objects >= 1 && n_attributes >= 1, ErrorKind::kConfig,
          "model world dimensions must be positive");
  require(max_seq > n_cells(), ErrorKind::kConfig, "model.max_seq must exceed the number of visual tokens");
}

VLMConfig VLMConfig::for_world(const WorldConfig& world, const Tokenizer& tok) {
  VLMConfig c;
  c.grid_size = world.grid_size;
  c.n_objects = world.n_objects;
  c.n_attributes = world.n_attributes;
  c.vocab_size = tok.size();
  return c;
}

nlohmann::json to_json(const VLMConfig& c) {
  return {{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"ffn_hidden", c.ffn_hidden}, {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
          {"grid_size", c.grid_size},   {"n_objects", c.n_objects},   {"n_attributes", c.n_attributes},
          {"seed", c.seed}};
}

VLMConfig vlm_config_from_json(const nlohmann::json& j) {
  try {
    VLMConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ffn_hidden = j.at("ffn_hidden").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.grid_size = j.at("grid_size").get<int>();
    c.n_objects = j.at("n_objects").get<int>();
    c.n_attributes = j.at("n_attributes").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed model config: ") + e.what());
  }
}

std::string mlp_w2_name(int layer) { return "layer" + std::to_string(layer) + ".mlp.w2"; }

// ---------------------------------------------------------------------------
// Parameters

template <typename Scalar>
ToyVLM<Scalar>::ToyVLM(const VLMConfig& config) : config_(config) {
  config_.validate();
  const Index d = config_.d_model;
  const Index f = config_.ffn_hidden;
  auto zeros = [](Index r, Index c) { return Tensor<Scalar>(MatrixX<Scalar>::Zero(r, c)); };
  auto ones = [](Index r, Index c) { return Tensor<Scalar>(MatrixX<Scalar>::Ones(r, c)); };
  token_embedding = zeros(config_.vocab_size, d);
  position_embedding = zeros(config_.max_seq, d);
  visual_objects = zeros(config_.n_objects + 1, d);
  visual_attributes = zeros(config_.n_attributes, d);
  visual_cells = zeros(config_.n_cells(), d);
  visual_projection = zeros(d, d);
  for (int l = 0; l < config_.n_layers; ++l) {
    DecoderLayer<Scalar> L;
    L.ln1_gamma = ones(1, d);
    L.ln1_beta = zeros(1, d);
    L.wq = zeros(d, d);
    L.wk = zeros(d, d);
    L.wv = zeros(d, d);
    L.wo = zeros(d, d);
    L.ln2_gamma = ones(1, d);
    L.ln2_beta = zeros(1, d);
    L.w1 = zeros(d, f);
    L.b1 = zeros(1, f);
    L.w2 = zeros(f, d);
    L.b2 = zeros(1, d);
    layers.push_back(std::move(L));
  }
  final_gamma = ones(1, d);
  final_beta = zeros(1, d);
  head = zeros(d, config_.vocab_size);
  for (auto& p : named_parameters()) p.tensor.set_requires_grad(true);
}

template <typename Scalar>
ToyVLM<Scalar> ToyVLM<Scalar>::initialize(const VLMConfig& config, std::uint64_t seed) {
  ToyVLM model(config);
  model.config_.seed = seed;
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Tensor<Scalar>& t, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    auto& v = t.mutable_value();
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<Scalar>(dist(rng));
  };
  const double d = config.d_model;
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  fill(model.token_embedding, 0.5);
  fill(model.position_embedding, 0.1);
  fill(model.visual_objects, 0.5);
  fill(model.visual_attributes, 0.5);
  fill(model.visual_cells, 0.5);
  fill(model.visual_projection, 1.0 / std::sqrt(d));
  for (auto& L : model.layers) {
    fill(L.wq, 1.0 / std::sqrt(d));
    fill(L.wk, 1.0 / std::sqrt(d));
    fill(L.wv, 1.0 / std::sqrt(d));
    fill(L.wo, residual_scale / std::sqrt(d));
    fill(L.w1, 1.0 / std::sqrt(d));
    fill(L.w2, residual_scale / std::sqrt(static_cast<double>(config.ffn_hidden)));
  }
  fill(model.head, 1.0 / std::sqrt(d));
  return model;
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> ToyVLM<Scalar>::named_parameters() const {
  std::vector<NamedTensor<Scalar>> out = {
      {"embed.tokens", token_embedding},      {"embed.positions", position_embedding},
      {"visual.objects", visual_objects},     {"visual.attributes", visual_attributes},
      {"visual.cells", visual_cells},         {"visual.projection", visual_projection},
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i + 1) + ".";
    const auto& L = layers[i];
    out.push_back({p + "ln1.gamma", L.ln1_gamma});
    out.push_back({p + "ln1.beta", L.ln1_beta});
    out.push_back({p + "attn.wq", L.wq});
    out.push_back({p + "attn.wk", L.wk});
    out.push_back({p + "attn.wv", L.wv});
    out.push_back({p + "attn.wo", L.wo});
    out.push_back({p + "ln2.gamma", L.ln2_gamma});
    out.push_back({p + "ln2.beta", L.ln2_beta});
    out.push_back({p + "mlp.w1", L.w1});
    out.push_back({p + "mlp.b1", L.b1});
    out.push_back({p + "mlp.w2", L.w2});
    out.push_back({p + "mlp.b2", L.b2});
  }
  out.push_back({"final_ln.gamma", final_gamma});
  out.push_back({"final_ln.beta", final_beta});
  out.push_back({"head", head});
  return out;
}

template <typename Scalar>
Tensor<Scalar> ToyVLM<Scalar>::parameter(std::string_view name) const {
  for (auto& p : named_parameters())
    if (p.name == name) return p.tensor;
  fail(ErrorKind::kContract, "no parameter named '" + std::string(name) + "'");
}

template <typename Scalar>
std::size_t ToyVLM<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += static_cast<std::size_t>(p.tensor.size());
  return n;
}

template <typename Scalar>
void ToyVLM<Scalar>::freeze_all() {
  for (auto& p : named_parameters()) {
    p.tensor.set_requires_grad(false);
    p.tensor.clear_grad();
  }
}

template <typename Scalar>
void ToyVLM<Scalar>::set_trainable(std::string_view name, bool trainable) {
  parameter(name).set_requires_grad(trainable);
}

template <typename Scalar>
std::vector<Tensor<Scalar>> ToyVLM<Scalar>::trainable_parameters() const {
  std::vector<Tensor<Scalar>> out;
  for (const auto& p : named_parameters())
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

template <typename Scalar>
void ToyVLM<Scalar>::clear_grads() {
  for (auto& p : named_parameters()) p.tensor.clear_grad();
}

template <typename Scalar>
ToyVLM<Scalar> ToyVLM<Scalar>::clone() const {
  return cast<Scalar>();
}

// ---------------------------------------------------------------------------
// Forward

template <typename Scalar>
Tensor<Scalar> encode_scene(const ToyVLM<Scalar>& model, const Scene& scene) {
  const auto& c = model.config();
  require(scene.grid_size == c.grid_size && static_cast<int>(scene.cells.size()) == c.n_cells(),
          ErrorKind::kDimension, "encode_scene: scene grid does not match model config");
  std::vector<int> objects, attributes;
  MatrixX<Scalar> attribute_mask = MatrixX<Scalar>::Zero(c.n_cells(), c.d_model);
  for (int k = 0; k < c.n_cells(); ++k) {
    const auto& cell = scene.cells[static_cast<std::size_t>(k)];
    if (cell) {
      if (cell->object < 0 || cell->object >= c.n_objects || cell->attribute < 0 ||
          cell->attribute >= c.n_attributes) {
        fail(ErrorKind::kVocabulary, "encode_scene: object/attribute id out of range");
      }
      objects.push_back(cell->object);
      attributes.push_back(cell->attribute);
      attribute_mask.row(k).setOnes();
    } else {
      objects.push_back(c.n_objects);
      attributes.push_back(0);
    }
  }
  auto content = add(gather_rows(model.visual_objects, std::span<const int>(objects)),
                     mul(gather_rows(model.visual_attributes, std::span<const int>(attributes)),
                         Tensor<Scalar>(std::move(attribute_mask))));
  return matmul(add(content, model.visual_cells), model.visual_projection);
}

template <typename Scalar>
ForwardTrace<Scalar> forward_with_trace(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                                        std::span<const int> token_ids, const Tensor<Scalar>* prefix,
                                        TraceOptions options) {
  const auto& c = model.config();
  const Index prefix_len = prefix != nullptr ? prefix->rows() : 0;
  const Index total = visual.rows() + prefix_len + static_cast<Index>(token_ids.size());
  require(visual.rows() == c.n_cells() && visual.cols() == c.d_model, ErrorKind::kDimension,
          "forward: visual tokens must be G^2 x d");
  if (prefix_len > 0)
    require(prefix->cols() == c.d_model, ErrorKind::kDimension, "forward: prefix width must equal d_model");
  if (total > c.max_seq) {
    fail(ErrorKind::kCapacity, "sequence length " + std::to_string(total) + " exceeds max_seq " +
                                   std::to_string(c.max_seq));
  }

  std::vector<Tensor<Scalar>> parts{visual};
  if (prefix_len > 0) parts.push_back(*prefix);
  if (!token_ids.empty()) parts.push_back(gather_rows(model.token_embedding, token_ids));
  Tensor<Scalar> x = parts.size() == 1 ? parts.front() : concat_rows(std::span<const Tensor<Scalar>>(parts));
  x = add(x, slice_rows(model.position_embedding, 0, total));

  ForwardTrace<Scalar> trace;
  trace.visual_len = visual.rows();
  trace.prefix_len = prefix_len;
  for (const auto& L : model.layers) {
    auto a = layer_norm(x, L.ln1_gamma, L.ln1_beta);
    std::vector<MatrixX<Scalar>> probs;
    auto att = causal_attention(matmul(a, L.wq), matmul(a, L.wk), matmul(a, L.wv), c.n_heads,
                                options.capture_attention ? &probs : nullptr);
    x = add(x, matmul(att, L.wo));
    auto b = layer_norm(x, L.ln2_gamma, L.ln2_beta);
    auto h = gelu(add_row(matmul(b, L.w1), L.b1));
    x = add(x, add_row(matmul(h, L.w2), L.b2));
    if (options.capture_hidden) trace.hidden.push_back(x.value());
    if (options.capture_attention) trace.attention.push_back(std::move(probs));
  }
  trace.logits = matmul(layer_norm(x, model.final_gamma, model.final_beta), model.head);
  return trace;
}

template <typename Scalar>
Tensor<Scalar> forward_logits(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                              std::span<const int> token_ids, const Tensor<Scalar>* prefix) {
  return forward_with_trace(model, visual, token_ids, prefix, TraceOptions{false, false}).logits;
}

template <typename Scalar>
Tensor<Scalar> response_logits(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                               std::span<const int> prompt, std::span<const int> response,
                               const Tensor<Scalar>* prefix) {
  require(!response.empty(), ErrorKind::kContract, "response must be non-empty");
  std::vector<int> ids(prompt.begin(), prompt.end());
  ids.insert(ids.end(), response.begin(), response.end() - 1);
  auto logits = forward_logits(model, visual, std::span<const int>(ids), prefix);
  const Index first = logits.rows() - static_cast<Index>(response.size());
  require(first >= 0, ErrorKind::kContract, "response_logits: nothing precedes the response");
  return slice_rows(logits, first, static_cast<Index>(response.size()));
}

template <typename Scalar>
Tensor<Scalar> response_nll(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                            std::span<const int> prompt, std::span<const int> response,
                            const Tensor<Scalar>* prefix) {
  auto logits = response_logits(model, visual, prompt, response, prefix);
  std::vector<std::uint8_t> mask(response.size(), 1);
  return cross_entropy_nll(logits, response, std::span<const std::uint8_t>(mask));
}

// ---------------------------------------------------------------------------
// Incremental decoding: the same block math on plain matrices with per-layer
// key/value caches, so each generated token costs one row.

namespace {

template <typename Scalar>
MatrixX<Scalar> layer_norm_plain(const MatrixX<Scalar>& x, const MatrixX<Scalar>& gamma,
                                 const MatrixX<Scalar>& beta) {
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.row(r).mean();
    const auto centered = x.row(r).array() - mu;
    const Scalar var = centered.square().mean();
    const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(1e-5));
    out.row(r) = (centered * inv) * gamma.row(0).array() + beta.row(0).array();
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> gelu_plain(const MatrixX<Scalar>& v) {
  constexpr Scalar kC = Scalar(0.7978845608028654);
  constexpr Scalar kA = Scalar(0.044715);
  return (Scalar(0.5) * v.array() * (Scalar(1) + (kC * (v.array() + kA * v.array().cube())).tanh())).matrix();
}

template <typename Scalar>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ToyVLM<Scalar>& model)
      : model_(model), keys_(model.layers.size()), values_(model.layers.size()) {}

  Index length() const { return length_; }

  // Appends embedded rows (without positions) and returns the next-token
  // logits of the last row.
  RowVectorX<Scalar> feed(const MatrixX<Scalar>& rows) {
    const auto& c = model_.config();
    const Index n = rows.rows();
    if (length_ + n > c.max_seq) {
      fail(ErrorKind::kCapacity, "sequence length " + std::to_string(length_ + n) + " exceeds max_seq " +
                                     std::to_string(c.max_seq));
    }
    const Index dh = c.d_model / c.n_heads;
    const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    MatrixX<Scalar> x = rows + model_.position_embedding.value().middleRows(length_, n);
    for (std::size_t l = 0; l < model_.layers.size(); ++l) {
      const auto& L = model_.layers[l];
      const MatrixX<Scalar> a = layer_norm_plain<Scalar>(x, L.ln1_gamma.value(), L.ln1_beta.value());
      const MatrixX<Scalar> q = a * L.wq.value();
      auto& K = keys_[l];
      auto& V = values_[l];
      K.conservativeResize(length_ + n, c.d_model);
      V.conservativeResize(length_ + n, c.d_model);
      K.bottomRows(n) = a * L.wk.value();
      V.bottomRows(n) = a * L.wv.value();
      MatrixX<Scalar> att(n, c.d_model);
      for (int h = 0; h < c.n_heads; ++h) {
        MatrixX<Scalar> scores = (q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * inv_sqrt;
        MatrixX<Scalar> p = MatrixX<Scalar>::Zero(n, length_ + n);
        for (Index i = 0; i < n; ++i) {
          const Index visible = length_ + i + 1;
          const auto row = scores.row(i).head(visible);
          const Scalar mx = row.maxCoeff();
          p.row(i).head(visible) = (row.array() - mx).exp();
          p.row(i).head(visible) /= p.row(i).head(visible).sum();
        }
        att.middleCols(h * dh, dh) = p * V.middleCols(h * dh, dh);
      }
      x += att * L.wo.value();
      const MatrixX<Scalar> b = layer_norm_plain<Scalar>(x, L.ln2_gamma.value(), L.ln2_beta.value());
      MatrixX<Scalar> hidden = b * L.w1.value();
      hidden.rowwise() += L.b1.value().row(0);
      MatrixX<Scalar> mlp = gelu_plain<Scalar>(hidden) * L.w2.value();
      mlp.rowwise() += L.b2.value().row(0);
      x += mlp;
    }
    length_ += n;
    const MatrixX<Scalar> last = layer_norm_plain<Scalar>(x.bottomRows(1), model_.final_gamma.value(),
                                                          model_.final_beta.value());
    return last * model_.head.value();
  }

  RowVectorX<Scalar> feed_tokens(std::span<const int> ids) {
    MatrixX<Scalar> rows(static_cast<Index>(ids.size()), model_.config().d_model);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      require(ids[i] >= 0 && ids[i] < model_.config().vocab_size, ErrorKind::kVocabulary,
              "token id out of range");
      rows.row(static_cast<Index>(i)) = model_.token_embedding.value().row(ids[i]);
    }
    return feed(rows);
  }

 private:
  const ToyVLM<Scalar>& model_;
  std::vector<MatrixX<Scalar>> keys_, values_;
  Index length_ = 0;
};

template <typename Scalar>
MatrixX<Scalar> stacked_inputs(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                               std::span<const int> ids, const Tensor<Scalar>* prefix) {
  const auto& c = model.config();
  require(visual.rows() == c.n_cells() && visual.cols() == c.d_model, ErrorKind::kDimension,
          "decode: visual tokens must be G^2 x d");
  const Index prefix_len = prefix != nullptr ? prefix->rows() : 0;
  MatrixX<Scalar> rows(visual.rows() + prefix_len + static_cast<Index>(ids.size()), c.d_model);
  rows.topRows(visual.rows()) = visual.value();
  if (prefix_len > 0) rows.middleRows(visual.rows(), prefix_len) = prefix->value();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < c.vocab_size, ErrorKind::kVocabulary, "token id out of range");
    rows.row(visual.rows() + prefix_len + static_cast<Index>(i)) = model.token_embedding.value().row(ids[i]);
  }
  return rows;
}

template <typename Scalar, typename Choose>
DecodeResult run_decode(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual, std::span<const int> prompt,
                        int max_new, int eos_token, const Tensor<Scalar>* prefix, Choose&& choose) {
  DecodeResult result;
  if (max_new <= 0) return result;
  IncrementalDecoder<Scalar> decoder(model);
  RowVectorX<Scalar> logits = decoder.feed(stacked_inputs(model, visual, prompt, prefix));
  for (int step = 0; step < max_new; ++step) {
    const int token = choose(logits);
    result.tokens.push_back(token);
    if (token == eos_token) {
      result.hit_eos = true;
      break;
    }
    if (step + 1 == max_new || decoder.length() + 1 > model.config().max_seq) break;
    const int next[] = {token};
    logits = decoder.feed_tokens(next);
  }
  return result;
}

}  // namespace

template <typename Scalar>
RowVectorX<Scalar> next_token_logits(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                                     std::span<const int> ids, const Tensor<Scalar>* prefix) {
  IncrementalDecoder<Scalar> decoder(model);
  return decoder.feed(stacked_inputs(model, visual, ids, prefix));
}

template <typename Scalar>
DecodeResult greedy_decode(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                           std::span<const int> prompt, int max_new, int eos_token,
                           const Tensor<Scalar>* prefix) {
  return run_decode(model, visual, prompt, max_new, eos_token, prefix, [](const RowVectorX<Scalar>& logits) {
    Index best = 0;
    logits.maxCoeff(&best);  // first maximum -> lowest id on ties
    return static_cast<int>(best);
  });
}

template <typename Scalar>
DecodeResult sample_decode(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                           std::span<const int> prompt, int max_new, int eos_token, double temperature,
                           std::mt19937_64& rng, const Tensor<Scalar>* prefix) {
  require(temperature > 0.0, ErrorKind::kContract, "sample_decode: temperature must be positive");
  return run_decode(model, visual, prompt, max_new, eos_token, prefix, [&](const RowVectorX<Scalar>& logits) {
    const Eigen::RowVectorXd l = logits.template cast<double>();
    const Eigen::RowVectorXd w = ((l.array() - l.maxCoeff()) / temperature).exp();
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * w.sum();
    double acc = 0.0;
    for (Index i = 0; i < w.size(); ++i) {
      acc += w(i);
      if (u < acc) return static_cast<int>(i);
    }
    Index best = 0;
    w.maxCoeff(&best);
    return static_cast<int>(best);
  });
}

// ---------------------------------------------------------------------------
// Container format

namespace {

constexpr char kMagic[] = {'A', 'L', 'E', 'A', '1'};

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(std::string_view s, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

std::string le_bytes(const Matrixf& m) {
  std::string out(static_cast<std::size_t>(m.size()) * 4, '\0');
  for (Index i = 0; i < m.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(m.data()[i]);
    for (int b = 0; b < 4; ++b) out[static_cast<std::size_t>(i) * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

Matrixf from_le_bytes(std::string_view bytes, Index rows, Index cols) {
  Matrixf m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i) * 4 + b])) << (8 * b);
    m.data()[i] = std::bit_cast<float>(bits);
  }
  return m;
}

}  // namespace

std::string tensor_digest(const Matrixf& m) { return sha256_hex(le_bytes(m)); }

std::string serialize_container(const TensorContainer& c) {
  nlohmann::json manifest = nlohmann::json::array();
  std::string payload;
  for (const auto& t : c.tensors) {
    const auto bytes = le_bytes(t.value);
    manifest.push_back({{"name", t.name},
                        {"rows", t.value.rows()},
                        {"cols", t.value.cols()},
                        {"offset", payload.size()},
                        {"digest", sha256_hex(bytes)}});
    payload += bytes;
  }
  nlohmann::json header = {{"schema_version", kSchemaVersion}, {"metadata", c.metadata}, {"tensors", manifest}};
  const std::string header_text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  append_u64(out, header_text.size());
  out += header_text;
  out += payload;
  return out;
}

TensorContainer parse_container(std::string_view bytes) {
  require(bytes.size() >= sizeof(kMagic) + 8 && bytes.substr(0, sizeof(kMagic)) == std::string_view(kMagic, sizeof(kMagic)),
          ErrorKind::kFormat, "bad magic (expected ALEA1)");
  const std::uint64_t header_len = read_u64(bytes, sizeof(kMagic));
  const std::size_t header_at = sizeof(kMagic) + 8;
  require(header_len <= bytes.size() - header_at, ErrorKind::kFormat, "truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_at, header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed container header: ") + e.what());
  }
  const std::string_view payload = bytes.substr(header_at + header_len);
  TensorContainer c;
  try {
    require(header.at("schema_version").get<int>() == kSchemaVersion, ErrorKind::kFormat,
            "container schema_version mismatch");
    c.metadata = header.at("metadata");
    std::size_t expected = 0;
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto rows = t.at("rows").get<Index>();
      const auto cols = t.at("cols").get<Index>();
      const auto offset = t.at("offset").get<std::size_t>();
      require(rows >= 0 && cols >= 0, ErrorKind::kFormat, "negative shape for " + name);
      const std::size_t len = static_cast<std::size_t>(rows * cols) * 4;
      require(offset == expected, ErrorKind::kFormat, "manifest offset disagrees with shapes at " + name);
      require(offset + len <= payload.size(), ErrorKind::kFormat, "truncated payload at " + name);
      const auto slice = payload.substr(offset, len);
      require(sha256_hex(slice) == t.at("digest").get<std::string>(), ErrorKind::kFormat,
              "digest mismatch for tensor " + name);
      c.tensors.push_back(TensorRecord{name, from_le_bytes(slice, rows, cols)});
      expected += len;
    }
    require(expected == payload.size(), ErrorKind::kFormat, "payload size disagrees with manifest");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed tensor manifest: ") + e.what());
  }
  return c;
}

void save_container(const TensorContainer& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_container(c));
}

TensorContainer load_container(const std::filesystem::path& path) { return parse_container(read_file(path)); }

std::vector<TensorDigest> container_digests(const TensorContainer& c) {
  std::vector<TensorDigest> out;
  for (const auto& t : c.tensors) out.push_back({t.name, t.value.rows(), t.value.cols(), tensor_digest(t.value)});
  return out;
}

TensorContainer checkpoint_container(const ToyVLM<float>& model, const nlohmann::json& metadata) {
  TensorContainer c;
  c.metadata = metadata;
  c.metadata["kind"] = "toyvlm";
  c.metadata["config"] = to_json(model.config());
  for (const auto& p : model.named_parameters()) c.tensors.push_back({p.name, p.tensor.value()});
  return c;
}

ToyVLM<float> model_from_container(const TensorContainer& c) {
  require(c.metadata.contains("kind") && c.metadata["kind"] == "toyvlm", ErrorKind::kFormat,
          "container does not hold a model checkpoint");
  ToyVLM<float> model(vlm_config_from_json(c.metadata.at("config")));
  const auto params = model.named_parameters();
  require(params.size() == c.tensors.size(), ErrorKind::kFormat, "checkpoint tensor count does not match config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& rec = c.tensors[i];
    auto t = params[i].tensor;
    require(rec.name == params[i].name, ErrorKind::kFormat,
            "checkpoint tensor '" + rec.name + "' where '" + params[i].name + "' was expected");
    require(rec.value.rows() == t.rows() && rec.value.cols() == t.cols(), ErrorKind::kFormat,
            "checkpoint shape mismatch for " + rec.name);
    t.mutable_value() = rec.value;
  }
  return model;
}

void save_checkpoint(const ToyVLM<float>& model, const std::filesystem::path& path, const nlohmann::json& metadata) {
  save_container(checkpoint_container(model, metadata), path);
}

ToyVLM<float> load_checkpoint(const std::filesystem::path& path) { return model_from_container(load_container(path)); }

std::vector<TensorDigest> model_digests(const ToyVLM<float>& model) {
  std::vector<TensorDigest> out;
  for (const auto& p : model.named_parameters())
    out.push_back({p.name, p.tensor.rows(), p.tensor.cols(), tensor_digest(p.tensor.value())});
  return out;
}

// ---------------------------------------------------------------------------

#define ALEA_INSTANTIATE_MODEL(S)                                                                          \
  template class ToyVLM<S>;                                                                                \
  template Tensor<S> encode_scene<S>(const ToyVLM<S>&, const Scene&);                                     \
  template ForwardTrace<S> forward_with_trace<S>(const ToyVLM<S>&, const Tensor<S>&, std::span<const int>, \
                                                 const Tensor<S>*, TraceOptions);                          \
  template Tensor<S> forward_logits<S>(const ToyVLM<S>&, const Tensor<S>&, std::span<const int>,          \
                                       const Tensor<S>*);                                                  \
  template Tensor<S> response_logits<S>(const ToyVLM<S>&, const Tensor<S>&, std::span<const int>,         \
                                        std::span<const int>, const Tensor<S>*);                           \
  template Tensor<S> response_nll<S>(const ToyVLM<S>&, const Tensor<S>&, std::span<const int>,            \
                                     std::span<const int>, const Tensor<S>*);                              \
  template DecodeResult greedy_decode<S>(const ToyVLM<S>&, const Tensor<S>&, std::span<const int>, int,   \
                                         int, const Tensor<S>*);                                           \
  template DecodeResult sample_decode<S>(const ToyVLM<S>&, const Tensor<S>&, std::span<const int>, int,   \
                                         int, double, std::mt19937_64&, const Tensor<S>*);                 \
  template RowVectorX<S> next_token_logits<S>(const ToyVLM<S>&, const Tensor<S>&, std::span<const int>,   \
                                              const Tensor<S>*);

ALEA_INSTANTIATE_MODEL(float)
ALEA_INSTANTIATE_MODEL(double)

#undef ALEA_INSTANTIATE_MODEL

}  // namespace alea
