#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "alea/ops.hpp"
#include "alea/tensor.hpp"
#include "alea/world.hpp"

namespace alea {

struct VLMConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int ffn_hidden = 256;
  int vocab_size = 0;  // filled from the tokenizer
  int max_seq = 128;
  int grid_size = 3;
  int n_objects = 12;
  int n_attributes = 6;
  std::uint64_t seed = 0;

  int n_cells() const { return grid_size * grid_size; }
  void validate() const;
  static VLMConfig for_world(const WorldConfig& world, const Tokenizer& tok);
};

nlohmann::json to_json(const VLMConfig& c);
VLMConfig vlm_config_from_json(const nlohmann::json& j);

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
struct DecoderLayer {
  Tensor<Scalar> ln1_gamma, ln1_beta;
  Tensor<Scalar> wq, wk, wv, wo;
  Tensor<Scalar> ln2_gamma, ln2_beta;
  Tensor<Scalar> w1, b1, w2, b2;
};

// Causal decoder-only transformer over [visual tokens; optional prefix;
// text tokens], pre-LayerNorm blocks with GELU MLPs and an untied output
// head. Layers are numbered 1..L in tensor names ("layer3.mlp.w2").
template <typename Scalar>
class ToyVLM {
 public:
  explicit ToyVLM(const VLMConfig& config);  // zero weights, unit LayerNorm scales
  static ToyVLM initialize(const VLMConfig& config, std::uint64_t seed);

  const VLMConfig& config() const { return config_; }

  // Stable order; handles share storage with the model.
  std::vector<NamedTensor<Scalar>> named_parameters() const;
  Tensor<Scalar> parameter(std::string_view name) const;
  std::size_t parameter_count() const;

  void freeze_all();
  void set_trainable(std::string_view name, bool trainable = true);
  std::vector<Tensor<Scalar>> trainable_parameters() const;
  void clear_grads();

  ToyVLM clone() const;
  template <typename Other>
  ToyVLM<Other> cast() const;

  Tensor<Scalar> token_embedding, position_embedding;
  Tensor<Scalar> visual_objects;     // (n_objects + 1) x d, last row = empty cell
  Tensor<Scalar> visual_attributes;  // n_attributes x d
  Tensor<Scalar> visual_cells;       // G^2 x d
  Tensor<Scalar> visual_projection;  // d x d
  std::vector<DecoderLayer<Scalar>> layers;
  Tensor<Scalar> final_gamma, final_beta;
  Tensor<Scalar> head;  // d x vocab

 private:
  VLMConfig config_;
};

template <typename Scalar>
template <typename Other>
ToyVLM<Other> ToyVLM<Scalar>::cast() const {
  ToyVLM<Other> out(config_);
  const auto src = named_parameters();
  const auto dst = out.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto dst_tensor = dst[i].tensor;
    dst_tensor.mutable_value() = src[i].tensor.value().template cast<Other>();
    dst_tensor.set_requires_grad(src[i].tensor.requires_grad());
  }
  return out;
}

std::string mlp_w2_name(int layer);  // 1-based

// G^2 x d visual tokens: cell k -> (object + attribute + cell_k) * projection,
// empty cells use the reserved empty-object row and no attribute.
template <typename Scalar>
Tensor<Scalar> encode_scene(const ToyVLM<Scalar>& model, const Scene& scene);

template <typename Scalar>
struct ForwardTrace {
  std::vector<MatrixX<Scalar>> hidden;                   // per layer, T x d after the block
  std::vector<std::vector<MatrixX<Scalar>>> attention;  // [layer][head] T x T
  Tensor<Scalar> logits;                                 // T x vocab, differentiable
  Index visual_len = 0;
  Index prefix_len = 0;
};

struct TraceOptions {
  bool capture_hidden = true;
  bool capture_attention = true;
};

// Forward over [visual; prefix; embed(token_ids)] with absolute learned
// positions starting at 0 for the first visual token.
template <typename Scalar>
ForwardTrace<Scalar> forward_with_trace(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                                        std::span<const int> token_ids,
                                        const Tensor<Scalar>* prefix = nullptr,
                                        TraceOptions options = {});

template <typename Scalar>
Tensor<Scalar> forward_logits(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                              std::span<const int> token_ids, const Tensor<Scalar>* prefix = nullptr);

// Teacher-forced mean NLL of `response` given [visual; prefix; prompt].
template <typename Scalar>
Tensor<Scalar> response_nll(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                            std::span<const int> prompt, std::span<const int> response,
                            const Tensor<Scalar>* prefix = nullptr);

// Logits at the positions that predict each response token
// (|response| x vocab), from one forward pass.
template <typename Scalar>
Tensor<Scalar> response_logits(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                               std::span<const int> prompt, std::span<const int> response,
                               const Tensor<Scalar>* prefix = nullptr);

struct DecodeResult {
  std::vector<int> tokens;  // generated tokens, <eos> included when emitted
  bool hit_eos = false;
};

// Argmax decoding (ties -> lowest id) until <eos> or max_new tokens.
template <typename Scalar>
DecodeResult greedy_decode(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                           std::span<const int> prompt, int max_new, int eos_token,
                           const Tensor<Scalar>* prefix = nullptr);

template <typename Scalar>
DecodeResult sample_decode(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                           std::span<const int> prompt, int max_new, int eos_token,
                           double temperature, std::mt19937_64& rng,
                           const Tensor<Scalar>* prefix = nullptr);

// Next-token logits for the last position of [visual; prefix; ids] (no graph).
template <typename Scalar>
RowVectorX<Scalar> next_token_logits(const ToyVLM<Scalar>& model, const Tensor<Scalar>& visual,
                                     std::span<const int> ids, const Tensor<Scalar>* prefix = nullptr);

// ---------------------------------------------------------------------------
// Tensor container ("ALEA1"): magic, u64 header length, canonical JSON
// header, little-endian f32 payloads.

struct TensorRecord {
  std::string name;
  Matrixf value;
};

struct TensorContainer {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<TensorRecord> tensors;
};

struct TensorDigest {
  std::string name;
  Index rows = 0, cols = 0;
  std::string digest;
};

std::string tensor_digest(const Matrixf& m);
std::string serialize_container(const TensorContainer& c);
TensorContainer parse_container(std::string_view bytes);
void save_container(const TensorContainer& c, const std::filesystem::path& path);
TensorContainer load_container(const std::filesystem::path& path);
std::vector<TensorDigest> container_digests(const TensorContainer& c);

void save_checkpoint(const ToyVLM<float>& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());
ToyVLM<float> load_checkpoint(const std::filesystem::path& path);
TensorContainer checkpoint_container(const ToyVLM<float>& model,
                                     const nlohmann::json& metadata = nlohmann::json::object());
ToyVLM<float> model_from_container(const TensorContainer& c);
std::vector<TensorDigest> model_digests(const ToyVLM<float>& model);

}  // namespace alea
