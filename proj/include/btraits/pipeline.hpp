#pragma once

// Stage orchestration behind the CLI. Every stage reads and writes files
// under out_dir and records a manifest in out_dir/manifests/<stage>.json;
// a stage whose manifest matches the current config and input digests is
// skipped unless forced.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "btraits/captioner.hpp"
#include "btraits/localizer.hpp"
#include "btraits/sae_train.hpp"
#include "btraits/util.hpp"

namespace btraits {

struct PipelineConfig {
  std::vector<std::string> shards;  // globs
  std::filesystem::path out_dir = "run";
  std::filesystem::path checkpoint;  // empty -> out_dir/sae.ckpt
  std::filesystem::path image_root;  // base for relative source paths

  sae::TrainConfig train;
  std::int64_t log_every = 1;
  double t_activation = 0.9;
  double t_freq = 3e-3;
  sae::Aggregation aggregation = sae::Aggregation::Max;

  caption::PromptMode mode = caption::PromptMode::Multi;
  localize::BoxOptions boxes;
  localize::BoxStyle style;

  std::string endpoint;  // empty -> environment
  std::string model;     // empty -> environment
  std::string template_id;
  std::filesystem::path template_dir;
  std::filesystem::path cache_dir;  // empty -> out_dir/cache
  std::size_t concurrency = 4;
  caption::RetryPolicy retry;
  caption::RequestOptions request;
  bool dry_run = false;

  bool expand_per_image = false;
  std::string timestamp;  // created_at for emitted rows; empty -> now
  unsigned threads = 1;

  /// key = value lines, '#' comments.
  static PipelineConfig load(const std::filesystem::path& path);
  /// Usage error for an unknown key or a bad value.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  json to_json() const;

  std::filesystem::path checkpoint_path() const;
  std::filesystem::path cache_path() const;
  std::filesystem::path path(const std::string& name) const { return out_dir / name; }
};

struct StageResult {
  std::string stage;
  bool skipped = false;
  json summary = json::object();
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config, bool force = false);

  const PipelineConfig& config() const { return config_; }
  /// Overrides the HTTP transport; used by tests against an in-process mock.
  void set_transport(caption::Transport* transport) { transport_ = transport; }

  StageResult train();
  StageResult encode();
  StageResult mine();
  StageResult localize();
  /// Throws an endpoint error after writing results when any job failed.
  StageResult caption();
  StageResult emit();
  /// train through emit.
  std::vector<StageResult> run_all();

  /// Top-k images for one latent across the corpus with heatmaps and
  /// annotated PNGs under out_dir/topk/latent_<id>/.
  StageResult topk(std::uint32_t latent, std::size_t k);
  /// Throws a data error when the dataset has violations.
  StageResult validate(const std::filesystem::path& dataset = {});
  StageResult stats();

 private:
  std::vector<std::filesystem::path> shard_paths() const;
  std::filesystem::path resolve_image(const std::string& source_path) const;
  void record_timing(const json& fields);

  PipelineConfig config_;
  bool force_;
  caption::Transport* transport_ = nullptr;
};

}  // namespace btraits
