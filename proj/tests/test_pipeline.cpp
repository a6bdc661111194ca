#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <functional>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "alea/pipeline.hpp"
#include "alea/util.hpp"
#include "test_support.hpp"

using namespace alea;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string error_message(const std::function<void()>& f, ErrorKind expected) {
  try {
    f();
  } catch (const Error& e) {
    CHECK(e.kind() == expected);
    return e.what();
  }
  FAIL("expected an error");
  return "";
}

ChairReport chair(double chair_i, double chair_s, double recall) {
  ChairReport r;
  r.chair_i = chair_i;
  r.chair_s = chair_s;
  r.recall = recall;
  return r;
}

PopeReport pope(double random, double popular, double adversarial) {
  PopeReport r;
  r.settings[0].accuracy = random;
  r.settings[1].accuracy = popular;
  r.settings[2].accuracy = adversarial;
  return r;
}

const char* cli() {
  const char* path = std::getenv("ALEA_CLI");
  return path && *path ? path : nullptr;
}

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(cli()) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = read_file(log);
  return r;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("alea_test_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const std::string kTinyOverrides =
    " --set data.train_scenes=60 --set data.activation_pool=80 --set data.activation_pairs=40"
    " --set data.max_new=24 --set prefix.dataset_size=40 --set prefix.epochs=1 --set edit.caption_pairs=30"
    " --set edit.pope_pairs=10 --set edit.epochs=1 --set edit.reference_max_new=24 --set locate.n_pairs=20"
    " --set model.d_model=16 --set model.n_heads=2 --set model.ffn_hidden=32 --set model.max_seq=64"
    " --set pretrain.epochs=1 --set pretrain.probe_samples=16 --set eval.test_scenes=10 --set eval.pope_scenes=5"
    " --set eval.generalization_scenes=5 --set eval.attention_scenes=5 --set eval.heatmaps=1 --set eval.max_new=24";

}  // namespace

TEST_CASE("default config round-trips and validates") {
  const json d = default_config_json();
  const PipelineConfig c = config_from_json(d);
  CHECK(to_json(c) == d);
  CHECK(c.edit.edit.lambda == doctest::Approx(1.0));
  CHECK(c.data.mix_ratio == doctest::Approx(0.65));
  CHECK(c.pretrain.epochs == 6);
}

TEST_CASE("unknown keys and mistyped values are rejected with the field path") {
  auto msg = error_message([] { config_from_json(json{{"edit", {{"lamda", 0.1}}}}); }, ErrorKind::kConfig);
  CHECK(msg.find("edit.lamda") != std::string::npos);

  msg = error_message([] { config_from_json(json{{"model", {{"d_model", "wide"}}}}); }, ErrorKind::kConfig);
  CHECK(msg.find("model.d_model") != std::string::npos);

  msg = error_message([] { config_from_json(json{{"data", 3}}); }, ErrorKind::kConfig);
  CHECK(msg.find("data") != std::string::npos);

  msg = error_message([] { config_from_json(json{{"edit", {{"lambda", 0.0}}}}); }, ErrorKind::kConfig);
  CHECK(msg.find("edit.lambda") != std::string::npos);

  msg = error_message([] { config_from_json(json{{"model", {{"n_heads", 5}}}}); }, ErrorKind::kConfig);
  CHECK(msg.find("model.n_heads") != std::string::npos);

  msg = error_message([] { config_from_json(json{{"eval", {{"candidate", "other"}}}}); }, ErrorKind::kConfig);
  CHECK(msg.find("eval.candidate") != std::string::npos);
}

TEST_CASE("integer fields accept integers into float slots but not the reverse") {
  json c = default_config_json();
  merge_config(c, json{{"edit", {{"lambda", 1}}}});
  CHECK(c["edit"]["lambda"].is_number_float());
  auto msg = error_message([&] { merge_config(c, json{{"model", {{"d_model", 16.5}}}}); }, ErrorKind::kConfig);
  CHECK(msg.find("model.d_model") != std::string::npos);
}

TEST_CASE("dotted overrides") {
  json c = default_config_json();
  apply_override(c, "edit.lambda=0.1");
  apply_override(c, "locate.pooling=last");
  apply_override(c, "edit.target_layer=3");
  apply_override(c, "data.include_prior=false");
  const PipelineConfig p = config_from_json(c);
  CHECK(p.edit.edit.lambda == doctest::Approx(0.1));
  CHECK(p.locate.pooling == "last");
  REQUIRE(p.edit.edit.target_layer.has_value());
  CHECK(*p.edit.edit.target_layer == 3);
  CHECK_FALSE(p.data.include_prior);

  CHECK(error_message([&] { apply_override(c, "edit.lambda"); }, ErrorKind::kConfig).find("key=value") !=
        std::string::npos);
  CHECK(error_message([&] { apply_override(c, "edit..lambda=1"); }, ErrorKind::kConfig).find("empty segment") !=
        std::string::npos);
  CHECK(error_message([&] { apply_override(c, "edit.nope=1"); }, ErrorKind::kConfig).find("edit.nope") !=
        std::string::npos);
}

TEST_CASE("stage seeds are stable and distinct") {
  const auto a = seed_everything(0);
  const auto b = seed_everything(0);
  const auto c = seed_everything(1);
  CHECK(a == b);
  CHECK(a.size() == kStages.size());
  std::set<std::uint64_t> distinct;
  for (const auto& [name, seed] : a) {
    distinct.insert(seed);
    CHECK(seed != c.at(name));
  }
  CHECK(distinct.size() == a.size());
}

TEST_CASE("exit codes by error kind") {
  CHECK(exit_code_for(ErrorKind::kConfig) == kExitValidation);
  CHECK(exit_code_for(ErrorKind::kDependency) == kExitValidation);
  CHECK(exit_code_for(ErrorKind::kNumeric) == kExitRuntime);
  CHECK(exit_code_for(ErrorKind::kLocality) == kExitRuntime);
  CHECK(exit_code_for(ErrorKind::kIo) == kExitRuntime);
}

TEST_CASE("gate thresholds") {
  const ChairReport base = chair(0.2, 0.4, 0.9);
  const PopeReport bp = pope(0.9, 0.85, 0.8);

  auto g = evaluate_gate(base, chair(0.14, 0.33, 0.86), bp, pope(0.9, 0.85, 0.8));
  CHECK(g.pass);
  CHECK(g.reasons.empty());

  g = evaluate_gate(base, chair(0.151, 0.33, 0.86), bp, bp);
  CHECK_FALSE(g.pass);
  CHECK(g.reasons.size() == 1);

  g = evaluate_gate(base, chair(0.1, 0.35, 0.86), bp, bp);
  CHECK_FALSE(g.pass);

  g = evaluate_gate(base, chair(0.1, 0.2, 0.849), bp, bp);
  CHECK_FALSE(g.pass);

  g = evaluate_gate(base, chair(0.1, 0.2, 0.9), bp, pope(0.9, 0.849, 0.8));
  CHECK_FALSE(g.pass);
  REQUIRE(g.reasons.size() == 1);
  CHECK(g.reasons[0].find("popular") != std::string::npos);

  g = evaluate_gate(base, base, bp, bp);
  CHECK_FALSE(g.pass);
  CHECK(g.reasons.size() == 3);

  const ChairReport zero = chair(0.0, 0.0, 1.0);
  CHECK_FALSE(evaluate_gate(zero, zero, bp, bp).pass);
}

TEST_CASE("edit samples round-trip through JSON") {
  const WorldConfig world;
  const Tokenizer tok(world);
  const Scene s = generate_scenes(5, world, 1).front();
  const EditSample e{s, tok.prompt(PromptKind::kBenign), grounded_caption(tok, s), {tok.bos(), tok.eos()}, "caption"};
  const EditSample back = edit_sample_from_json(json::parse(edit_sample_to_json(e).dump()));
  CHECK(back.scene.scene_id == s.scene_id);
  CHECK(back.scene.cells == s.cells);
  CHECK(back.prompt == e.prompt);
  CHECK(back.positive == e.positive);
  CHECK(back.negative == e.negative);
  CHECK(back.source == e.source);

  json bad = edit_sample_to_json(e);
  bad.erase("positive_ids");
  CHECK(error_message([&] { edit_sample_from_json(bad); }, ErrorKind::kFormat).find("malformed") !=
        std::string::npos);
}

TEST_CASE("run_stage rejects unknown stages and bad configs") {
  RunOptions o;
  o.run_dir = scratch_dir("reject");
  o.quiet = true;
  CHECK(run_stage("finetune", o) == kExitValidation);
  o.config["edit"]["lambda"] = -1.0;
  CHECK(run_stage("gen-data", o) == kExitValidation);
}

TEST_CASE("cli: missing inputs name the prior stage") {
  if (!cli()) {
    MESSAGE("ALEA_CLI not set; skipped");
    return;
  }
  const fs::path dir = scratch_dir("missing");
  const auto r = run_cli("run edit --run-dir " + (dir / "run").string(), dir / "log.txt");
  CHECK(r.code == 1);
  CHECK(r.output.find("locate") != std::string::npos);

  CHECK(run_cli("run nonsense --run-dir " + (dir / "run").string(), dir / "log.txt").code == 1);
  const auto bad = run_cli("run gen-data --set edit.lamda=0.1 --run-dir " + (dir / "run").string(), dir / "log.txt");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("edit.lamda") != std::string::npos);
}

TEST_CASE("cli: tiny end-to-end run and gate exit code") {
  if (!cli()) {
    MESSAGE("ALEA_CLI not set; skipped");
    return;
  }
  const fs::path dir = scratch_dir("tiny");
  const std::string run_dir = (dir / "run").string();
  const auto all = run_cli("run all --quiet --run-dir " + run_dir + kTinyOverrides, dir / "all.txt");
  INFO(all.output);
  REQUIRE(all.code == 0);
  for (const char* report : {"data", "pretrain", "locate", "prefix", "edit", "eval", "chair", "pope",
                             "generalization", "ablation", "attention"})
    CHECK(fs::exists(dir / "run" / "reports" / (std::string(report) + ".json")));
  CHECK(fs::exists(dir / "run" / "manifest.json"));

  const json edit = json::parse(read_file(dir / "run" / "reports" / "edit.json"));
  const json locate = json::parse(read_file(dir / "run" / "reports" / "locate.json"));
  CHECK(edit.at("changed_tensors") == json::array({mlp_w2_name(locate.at("layer").get<int>())}));

  // The base model cannot improve on itself, so the gate must fail.
  const auto gated =
      run_cli("run eval --gate --quiet --run-dir " + run_dir + " --set eval.candidate=base" + kTinyOverrides, dir / "gate.txt");
  CHECK(gated.code == 3);
  CHECK(gated.output.find("gate failed") != std::string::npos);
}
