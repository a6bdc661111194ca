#include "alea/editor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "alea/ops.hpp"

namespace alea {

namespace {

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void clip_global_norm(std::span<Tensor<float>> params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad()) sq += p.grad().cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  require(std::isfinite(norm), ErrorKind::kTraining, "gradient norm is not finite");
  if (norm <= max_norm) return;
  const float factor = static_cast<float>(max_norm / norm);
  for (auto& p : params)
    if (p.has_grad()) p.node()->grad *= factor;
}

}  // namespace

void PretrainConfig::validate() const {
  require(epochs >= 0, ErrorKind::kConfig, "pretrain.epochs must be >= 0");
  require(lr > 0.0, ErrorKind::kConfig, "pretrain.lr must be positive");
  require(batch_size >= 1, ErrorKind::kConfig, "pretrain.batch_size must be >= 1");
  require(weight_decay >= 0.0, ErrorKind::kConfig, "pretrain.weight_decay must be >= 0");
  require(warmup_steps >= 0, ErrorKind::kConfig, "pretrain.warmup_steps must be >= 0");
  require(min_lr_fraction >= 0.0 && min_lr_fraction <= 1.0, ErrorKind::kConfig,
          "pretrain.min_lr_fraction must be in [0,1]");
  require(probe_samples >= 1, ErrorKind::kConfig, "pretrain.probe_samples must be >= 1");
}

double mean_corpus_nll(const ToyVLM<float>& model, const std::vector<CaptionSample>& samples) {
  require(!samples.empty(), ErrorKind::kContract, "mean_corpus_nll: no samples");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& s : samples) {
    const auto visual = encode_scene(model, s.scene);
    total += response_nll(model, visual, std::span<const int>(s.prompt_ids), std::span<const int>(s.response_ids))
                 .item();
  }
  return total / static_cast<double>(samples.size());
}

PretrainResult train_base(ToyVLM<float>& model, const std::vector<CaptionSample>& corpus,
                          const PretrainConfig& config) {
  config.validate();
  require(!corpus.empty(), ErrorKind::kDataset, "train_base: empty corpus");
  std::mt19937_64 rng(config.seed);
  auto order = iota_indices(corpus.size());

  std::vector<CaptionSample> probe;
  {
    auto idx = order;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), static_cast<std::size_t>(config.probe_samples)));
    for (auto i : idx) probe.push_back(corpus[i]);
  }

  PretrainResult result;
  result.initial_nll = mean_corpus_nll(model, probe);

  auto params = model.trainable_parameters();
  require(!params.empty(), ErrorKind::kTraining, "train_base: no trainable parameters");
  auto state = make_adam_state<float>(params, AdamOptions{config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((corpus.size() + batch - 1) / batch);
  const std::int64_t total_steps = std::max<std::int64_t>(1, steps_per_epoch * config.epochs);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t at = 0; at < order.size(); at += batch) {
      const std::size_t end = std::min(order.size(), at + batch);
      const std::int64_t step = result.steps;
      double lr = config.lr;
      if (step < config.warmup_steps) {
        lr *= static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
      } else {
        const double t = static_cast<double>(step - config.warmup_steps) /
                         static_cast<double>(std::max<std::int64_t>(1, total_steps - config.warmup_steps));
        const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, t)));
        lr *= config.min_lr_fraction + (1.0 - config.min_lr_fraction) * cosine;
      }
      state.options.lr = lr;

      for (auto& p : params) p.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t k = at; k < end; ++k) {
        const auto& s = corpus[order[k]];
        const auto visual = encode_scene(model, s.scene);
        auto loss = response_nll(model, visual, std::span<const int>(s.prompt_ids),
                                 std::span<const int>(s.response_ids));
        batch_loss += loss.item();
        scale(loss, 1.0f / static_cast<float>(end - at)).backward();
      }
      require(std::isfinite(batch_loss), ErrorKind::kTraining,
              "pretraining loss is not finite at step " + std::to_string(step));
      clip_global_norm(params, config.grad_clip);
      adam_step<float>(params, state);
      epoch_loss += batch_loss;
      ++result.steps;
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(corpus.size()));
  }
  model.clear_grads();
  result.final_nll = mean_corpus_nll(model, probe);
  return result;
}

// ---------------------------------------------------------------------------

void EditConfig::validate() const {
  require(lambda > 0.0 && std::isfinite(lambda), ErrorKind::kConfig, "edit.lambda must be positive");
  require(lr > 0.0, ErrorKind::kConfig, "edit.lr must be positive");
  require(weight_decay >= 0.0, ErrorKind::kConfig, "edit.weight_decay must be >= 0");
  require(epochs >= 1, ErrorKind::kConfig, "edit.epochs must be >= 1");
  require(batch_size >= 1, ErrorKind::kConfig, "edit.batch_size must be >= 1");
  require(reference_max_new >= 1, ErrorKind::kConfig, "edit.reference_max_new must be >= 1");
}

namespace {

std::string_view objective_name(EditConfig::Objective o) {
  switch (o) {
    case EditConfig::Objective::kFull: return "full";
    case EditConfig::Objective::kEditingOnly: return "editing_only";
    case EditConfig::Objective::kConstraintOnly: return "constraint_only";
  }
  return "full";
}

}  // namespace

nlohmann::json to_json(const EditReport& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps) steps.push_back({{"editing", s.editing}, {"constraint", s.constraint}, {"total", s.total}});
  return {{"schema_version", kSchemaVersion}, {"layer", r.layer},
          {"target_tensor", r.target_tensor}, {"prefix_id", r.prefix_id},
          {"lambda", r.lambda},               {"objective", r.objective},
          {"n_samples", r.n_samples},         {"changed_tensors", r.changed_tensors},
          {"warnings", r.warnings},           {"steps", steps}};
}

Tensor<float> editing_loss(const ToyVLM<float>& model, const Tensor<float>* prefix, const Scene& scene,
                           std::span<const int> prompt, std::span<const int> positive) {
  const auto visual = encode_scene(model, scene);
  return response_nll(model, visual, prompt, positive, prefix);
}

std::vector<int> reference_continuation(const ToyVLM<float>& base, const Scene& scene, std::span<const int> prompt,
                                        int max_new, int eos_token) {
  NoGradGuard no_grad;
  const auto visual = encode_scene(base, scene);
  auto out = greedy_decode(base, visual, prompt, max_new, eos_token).tokens;
  if (out.empty()) out.push_back(eos_token);
  return out;
}

Tensor<float> constraint_loss(const ToyVLM<float>& model, const ToyVLM<float>& base, const Scene& scene,
                              std::span<const int> prompt, std::span<const int> reference) {
  require(!reference.empty(), ErrorKind::kContract, "constraint_loss: empty reference continuation");
  Tensor<float> base_logits;
  {
    NoGradGuard no_grad;
    base_logits = response_logits(base, encode_scene(base, scene), prompt, reference);
  }
  const auto logits = response_logits(model, encode_scene(model, scene), prompt, reference);
  const std::vector<std::uint8_t> mask(reference.size(), 1);
  return kl_divergence(logits, base_logits, std::span<const std::uint8_t>(mask));
}

std::vector<std::string> verify_locality(const std::vector<TensorDigest>& before,
                                         const std::vector<TensorDigest>& after) {
  require(before.size() == after.size(), ErrorKind::kContract, "verify_locality: tensor sets differ");
  std::vector<std::string> changed;
  for (std::size_t i = 0; i < before.size(); ++i) {
    require(before[i].name == after[i].name, ErrorKind::kContract, "verify_locality: tensor order differs");
    if (before[i].digest != after[i].digest) changed.push_back(before[i].name);
  }
  return changed;
}

EditResult edit_parameters(const ToyVLM<float>& base, const AdversarialPrefix* prefix,
                           const std::vector<EditSample>& samples, const EditConfig& config,
                           const LocateReport& locate, int eos_token) {
  config.validate();
  require(!samples.empty(), ErrorKind::kDataset, "edit_parameters: empty edit dataset");
  const int layer = config.target_layer.value_or(locate.layer);

  EditReport report;
  report.layer = layer;
  report.lambda = config.lambda;
  report.objective = std::string(objective_name(config.objective));
  report.n_samples = static_cast<int>(samples.size());
  if (prefix == nullptr) {
    report.warnings.push_back("no adversarial prefix: editing loss uses the benign prompt");
  } else {
    report.prefix_id = prefix->id;
    if (!prefix->tuned) report.warnings.push_back("adversarial prefix " + prefix->id + " is untuned");
    require(prefix->embedding.cols() == base.config().d_model, ErrorKind::kDimension,
            "edit_parameters: prefix width must equal d_model");
  }

  ToyVLM<float> frozen_base = base.clone();
  frozen_base.freeze_all();
  ToyVLM<float> model = base.clone();
  const auto target = select_target(model, layer);
  report.target_tensor = target.name;
  mark_only_trainable(model, target);
  const auto before = model_digests(model);

  // The visual encoder is frozen, so its tokens and the base distributions
  // over each reference continuation are fixed for the whole run.
  const bool use_constraint = config.objective != EditConfig::Objective::kEditingOnly;
  const bool use_editing = config.objective != EditConfig::Objective::kConstraintOnly;
  std::vector<Tensor<float>> visual;
  std::vector<std::vector<int>> reference;
  std::vector<Tensor<float>> base_logits;
  {
    NoGradGuard no_grad;
    for (const auto& s : samples) {
      visual.push_back(encode_scene(frozen_base, s.scene));
      if (use_constraint) {
        auto ref = greedy_decode(frozen_base, visual.back(), std::span<const int>(s.prompt),
                                 config.reference_max_new, eos_token)
                       .tokens;
        if (ref.empty()) ref.push_back(eos_token);
        base_logits.push_back(response_logits(frozen_base, visual.back(), std::span<const int>(s.prompt),
                                              std::span<const int>(ref)));
        reference.push_back(std::move(ref));
      }
    }
  }

  std::vector<Tensor<float>> params{target.tensor};
  auto state = make_adam_state<float>(params, AdamOptions{config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  const Tensor<float>* prefix_tensor = prefix ? &prefix->embedding : nullptr;
  const float lambda = static_cast<float>(config.lambda);
  std::mt19937_64 rng(config.seed);
  auto order = iota_indices(samples.size());
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < order.size(); at += batch) {
      const std::size_t end = std::min(order.size(), at + batch);
      const float inv = 1.0f / static_cast<float>(end - at);
      params[0].zero_grad();
      EditStep step;
      for (std::size_t k = at; k < end; ++k) {
        const std::size_t i = order[k];
        const auto& s = samples[i];
        std::vector<Tensor<float>> terms;
        if (use_editing) {
          auto le = response_nll(model, visual[i], std::span<const int>(s.prompt), std::span<const int>(s.positive),
                                 prefix_tensor);
          step.editing += le.item() * inv;
          terms.push_back(config.objective == EditConfig::Objective::kFull ? scale(le, lambda) : le);
        }
        if (use_constraint) {
          const auto logits =
              response_logits(model, visual[i], std::span<const int>(s.prompt), std::span<const int>(reference[i]));
          const std::vector<std::uint8_t> mask(reference[i].size(), 1);
          auto lc = kl_divergence(logits, base_logits[i], std::span<const std::uint8_t>(mask));
          step.constraint += lc.item() * inv;
          terms.push_back(lc);
        }
        auto total = terms.size() == 1 ? terms[0] : add_scalars<float>(terms);
        step.total += total.item() * inv;
        scale(total, inv).backward();
      }
      require(std::isfinite(step.total), ErrorKind::kTraining, "editing loss is not finite");
      adam_step<float>(params, state);
      report.steps.push_back(step);
    }
  }
  params[0].clear_grad();

  const auto after = model_digests(model);
  report.changed_tensors = verify_locality(before, after);
  for (const auto& name : report.changed_tensors)
    require(name == target.name, ErrorKind::kLocality, "editing modified tensor " + name + " outside the target");
  model.freeze_all();
  return EditResult{std::move(model), std::move(report)};
}

}  // namespace alea
