// btraits: train -> encode -> mine -> localize -> caption -> emit, plus
// topk / validate / stats. Exit codes: 0 ok, 1 usage, 2 data, 3 endpoint.

#include <CLI11.hpp>

#include <iostream>

#include "btraits/error.hpp"
#include "btraits/log.hpp"
#include "btraits/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitEndpoint = 3;

int exit_code(btraits::ErrorKind k) {
  switch (k) {
    case btraits::ErrorKind::Usage: return kExitUsage;
    case btraits::ErrorKind::Endpoint: return kExitEndpoint;
    default: return kExitData;
  }
}

void print(const btraits::StageResult& r) {
  btraits::json j{{"stage", r.stage}, {"skipped", r.skipped}, {"summary", r.summary}};
  std::cout << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Species-contrastive trait mining with sparse autoencoders"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides, shards;
  std::string out_dir;
  std::int64_t seed = -1;
  bool force = false, verbose = false, quiet = false;
  app.add_option("-c,--config", config_path, "key = value config file");
  app.add_option("--set", overrides, "override a config key (key=value), repeatable");
  app.add_option("--shards", shards, "shard paths or globs (replaces the config list)");
  app.add_option("-o,--out", out_dir, "output directory");
  app.add_option("--seed", seed, "RNG seed for training");
  app.add_flag("-f,--force", force, "rerun stages even if their manifests are current");
  app.add_flag("-v,--verbose", verbose, "debug logging");
  app.add_flag("-q,--quiet", quiet, "warnings and errors only");

  auto* train = app.add_subcommand("train", "train the SAE on the shard corpus");
  auto* encode = app.add_subcommand("encode", "aggregate per-image SAE codes");
  auto* mine = app.add_subcommand("mine", "select species-salient latents");
  auto* localize = app.add_subcommand("localize", "boxes and annotated images per salient trait");

  auto* caption = app.add_subcommand("caption", "describe each salient trait with the MLLM");
  std::string mode, cache_dir, endpoint, model, template_dir;
  std::size_t concurrency = 0;
  bool dry_run = false;
  caption->add_option("--mode", mode, "single or multi")->check(CLI::IsMember({"single", "multi"}));
  caption->add_option("--concurrency", concurrency, "maximum in-flight requests")
      ->check(CLI::PositiveNumber);
  caption->add_option("--cache-dir", cache_dir, "response cache directory");
  caption->add_option("--endpoint", endpoint, "chat-completions base URL");
  caption->add_option("--model", model, "model id");
  caption->add_option("--template-dir", template_dir, "directory of prompt templates");
  caption->add_flag("--dry-run", dry_run, "write prompts to disk without calling the endpoint");

  auto* emit = app.add_subcommand("emit", "write the trait dataset and its statistics");
  bool expand = false;
  emit->add_flag("--expand-per-image", expand, "one row per image instead of per image set");

  auto* run = app.add_subcommand("run", "train through emit");
  run->add_flag("--dry-run", dry_run, "stop after writing prompts");

  auto* topk = app.add_subcommand("topk", "top-activating images for one latent");
  std::uint32_t latent = 0;
  std::size_t k = 10;
  topk->add_option("--latent", latent, "latent id")->required();
  topk->add_option("-k", k, "number of images");

  auto* validate = app.add_subcommand("validate", "check a dataset file");
  std::string dataset;
  validate->add_option("dataset", dataset, "dataset file (default <out>/dataset.jsonl)");

  auto* stats = app.add_subcommand("stats", "corpus, dataset and timing statistics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  if (verbose) btraits::log::set_level(btraits::log::Level::Debug);
  if (quiet) btraits::log::set_level(btraits::log::Level::Warn);

  try {
    auto config = config_path.empty() ? btraits::PipelineConfig{}
                                      : btraits::PipelineConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw btraits::usage_error("--set expects key=value, got " + kv);
      config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!shards.empty()) config.shards = shards;
    if (!out_dir.empty()) config.out_dir = out_dir;
    if (seed >= 0) config.train.seed = static_cast<std::uint64_t>(seed);
    if (!mode.empty()) config.mode = btraits::caption::parse_mode(mode);
    if (concurrency > 0) config.concurrency = concurrency;
    if (!cache_dir.empty()) config.cache_dir = cache_dir;
    if (!endpoint.empty()) config.endpoint = endpoint;
    if (!model.empty()) config.model = model;
    if (!template_dir.empty()) config.template_dir = template_dir;
    if (dry_run) config.dry_run = true;
    if (expand) config.expand_per_image = true;

    btraits::Pipeline pipeline(config, force);
    if (*train) print(pipeline.train());
    if (*encode) print(pipeline.encode());
    if (*mine) print(pipeline.mine());
    if (*localize) print(pipeline.localize());
    if (*caption) print(pipeline.caption());
    if (*emit) print(pipeline.emit());
    if (*run) {
      for (const auto& r : pipeline.run_all()) print(r);
    }
    if (*topk) print(pipeline.topk(latent, k));
    if (*validate) print(pipeline.validate(dataset));
    if (*stats) print(pipeline.stats());
  } catch (const btraits::Error& e) {
    btraits::log::error(e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    btraits::log::error(e.what());
    return kExitData;
  }
  return kExitOk;
}
