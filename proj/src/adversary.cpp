#include "alea/adversary.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "alea/adam.hpp"

namespace alea {

void PrefixTuneConfig::validate() const {
  require(length >= 1, ErrorKind::kConfig, "prefix.length must be >= 1");
  require(lr > 0.0, ErrorKind::kConfig, "prefix.lr must be positive");
  require(epochs >= 0, ErrorKind::kConfig, "prefix.epochs must be >= 0");
  require(batch_size >= 1, ErrorKind::kConfig, "prefix.batch_size must be >= 1");
  require(dataset_size >= 1, ErrorKind::kConfig, "prefix.dataset_size must be >= 1");
}

AdversarialPrefix init_prefix(std::uint64_t seed, int length, int d_model) {
  require(length > 0 && d_model > 0, ErrorKind::kContract, "init_prefix: r and d must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  Matrixf m(length, d_model);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng));
  AdversarialPrefix p;
  p.embedding = Tensor<float>(std::move(m));
  p.seed = seed;
  p.id = "prefix-" + tensor_digest(p.embedding.value()).substr(0, 12);
  return p;
}

AdversarialPrefix fixed_prefix(const ToyVLM<float>& model, std::span<const int> tokens, std::string id) {
  require(!tokens.empty(), ErrorKind::kContract, "fixed_prefix: empty token sequence");
  Matrixf m(static_cast<Index>(tokens.size()), model.config().d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(tokens[i] >= 0 && tokens[i] < model.config().vocab_size, ErrorKind::kVocabulary,
            "fixed_prefix: token out of range");
    m.row(static_cast<Index>(i)) = model.token_embedding.value().row(tokens[i]);
  }
  AdversarialPrefix p;
  p.embedding = Tensor<float>(std::move(m));
  p.id = std::move(id);
  p.tuned = true;  // deliberate hard prompt, not an untuned init
  return p;
}

double mean_prefix_loss(const ToyVLM<float>& model, const AdversarialPrefix& prefix,
                        const std::vector<PrefixSample>& samples) {
  require(!samples.empty(), ErrorKind::kContract, "mean_prefix_loss: no samples");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& s : samples) {
    const auto visual = encode_scene(model, s.scene);
    total += response_nll(model, visual, s.prompt, s.negative, &prefix.embedding).item();
  }
  return total / static_cast<double>(samples.size());
}

PrefixTuneResult tune_prefix(const ToyVLM<float>& model, const std::vector<PrefixSample>& samples,
                             const PrefixTuneConfig& config, AdversarialPrefix prefix) {
  config.validate();
  require(!samples.empty(), ErrorKind::kContract, "tune_prefix: empty dataset");
  require(prefix.embedding.cols() == model.config().d_model, ErrorKind::kDimension,
          "tune_prefix: prefix width must equal d_model");
  const auto before = model_digests(model);

  ToyVLM<float> frozen = model.clone();
  frozen.freeze_all();
  std::vector<Tensor<float>> visual;
  {
    NoGradGuard no_grad;
    for (const auto& s : samples) visual.push_back(encode_scene(frozen, s.scene));
  }

  PrefixTuneResult result;
  Tensor<float> embedding = prefix.embedding.clone(true);
  prefix.embedding = embedding;
  result.initial_loss = mean_prefix_loss(frozen, prefix, samples);

  std::vector<Tensor<float>> params{embedding};
  auto state = make_adam_state<float>(params, AdamOptions{config.lr, 0.9, 0.999, 1e-8, 0.0});
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  int steps = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(config.batch_size));
      embedding.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t k = at; k < end; ++k) {
        const auto& s = samples[order[k]];
        auto loss = response_nll(frozen, visual[order[k]], s.prompt, s.negative, &embedding);
        batch_loss += loss.item();
        scale(loss, 1.0f / static_cast<float>(end - at)).backward();
      }
      batch_loss /= static_cast<double>(end - at);
      require(std::isfinite(batch_loss), ErrorKind::kTraining, "prefix tuning loss is not finite");
      adam_step<float>(params, state);
      result.step_loss.push_back(batch_loss);
      ++steps;
    }
  }
  embedding.set_requires_grad(false);
  embedding.clear_grad();
  prefix.steps = steps;
  prefix.tuned = steps > 0;
  prefix.seed = config.seed;
  result.final_loss = mean_prefix_loss(frozen, prefix, samples);
  prefix.final_loss = result.final_loss;
  prefix.id = "prefix-" + tensor_digest(embedding.value()).substr(0, 12);

  const auto after = model_digests(model);
  for (std::size_t i = 0; i < before.size(); ++i)
    require(before[i].digest == after[i].digest, ErrorKind::kLocality,
            "prefix tuning modified model tensor " + before[i].name);
  result.prefix = std::move(prefix);
  return result;
}

AdversarialEffect adversarial_effect(const ToyVLM<float>& model, const AdversarialPrefix& prefix,
                                     const Tokenizer& tok, const std::vector<Scene>& scenes, int max_new) {
  NoGradGuard no_grad;
  const auto prompt = tok.prompt(PromptKind::kBenign);
  AdversarialEffect e;
  int benign = 0, prefixed = 0;
  for (const auto& scene : scenes) {
    const auto visual = encode_scene(model, scene);
    const auto plain = greedy_decode(model, visual, std::span<const int>(prompt), max_new, tok.eos());
    const auto adv = greedy_decode(model, visual, std::span<const int>(prompt), max_new, tok.eos(), &prefix.embedding);
    benign += score_hallucination(tok, scene, plain.tokens).score >= 1 ? 1 : 0;
    prefixed += score_hallucination(tok, scene, adv.tokens).score >= 1 ? 1 : 0;
  }
  e.n = static_cast<int>(scenes.size());
  if (e.n > 0) {
    e.hallu_rate_benign = static_cast<double>(benign) / e.n;
    e.hallu_rate_prefixed = static_cast<double>(prefixed) / e.n;
  }
  return e;
}

void save_prefix(const AdversarialPrefix& prefix, const std::filesystem::path& path) {
  TensorContainer c;
  c.metadata = {{"kind", "adversarial_prefix"}, {"id", prefix.id},          {"seed", prefix.seed},
                {"steps", prefix.steps},        {"final_loss", prefix.final_loss}, {"tuned", prefix.tuned},
                {"length", prefix.length()}};
  c.tensors.push_back({"adversarial.prefix", prefix.embedding.value()});
  save_container(c, path);
}

AdversarialPrefix load_prefix(const std::filesystem::path& path) {
  const auto c = load_container(path);
  require(c.metadata.value("kind", "") == "adversarial_prefix" && c.tensors.size() == 1 &&
              c.tensors[0].name == "adversarial.prefix",
          ErrorKind::kFormat, "container does not hold an adversarial prefix");
  AdversarialPrefix p;
  p.embedding = Tensor<float>(c.tensors[0].value);
  try {
    p.id = c.metadata.at("id").get<std::string>();
    p.seed = c.metadata.at("seed").get<std::uint64_t>();
    p.steps = c.metadata.at("steps").get<int>();
    p.final_loss = c.metadata.at("final_loss").get<double>();
    p.tuned = c.metadata.at("tuned").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed prefix metadata: ") + e.what());
  }
  return p;
}

nlohmann::json to_json(const PrefixTuneResult& r) {
  return {{"schema_version", kSchemaVersion}, {"prefix_id", r.prefix.id},   {"length", r.prefix.length()},
          {"steps", r.prefix.steps},          {"initial_loss", r.initial_loss}, {"final_loss", r.final_loss},
          {"step_loss", r.step_loss}};
}

}  // namespace alea
