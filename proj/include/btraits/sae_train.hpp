#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "btraits/activation_store.hpp"
#include "btraits/sae.hpp"
#include "btraits/util.hpp"

namespace btraits::sae {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double alpha = 4e-4;
  std::int64_t alpha_warmup_steps = 500;
  double lr = 1e-3;
  std::int64_t lr_warmup_steps = 500;
  std::int64_t batch_size = 16384;
  std::int64_t steps = 10000;
  std::int64_t expansion = 32;
  std::uint64_t seed = 0;
  AdamConfig adam;

  /// Throws a usage error naming the first invalid field.
  void validate() const;
};

/// alpha * s / warmup for s < warmup, alpha afterwards. Steps count from 1.
double effective_alpha(const TrainConfig& c, std::int64_t step);
double effective_lr(const TrainConfig& c, std::int64_t step);

struct TrainMetrics {
  std::int64_t step = 0;
  double mse = 0.0;
  double l0 = 0.0;
  double loss = 0.0;
  double alpha_effective = 0.0;
  double lr_effective = 0.0;

  bool operator==(const TrainMetrics&) const = default;
};

json to_json(const TrainMetrics& m);

/// Raised when the objective stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, TrainMetrics last)
      : std::runtime_error(what), last_(last) {}
  const TrainMetrics& last() const { return last_; }

 private:
  TrainMetrics last_;
};

/// Decoder columns uniform on the unit sphere, w_enc = w_dec^T, b_enc = 0,
/// b_dec = mean of `first_batch` rows.
template <typename Scalar>
SaeParams<Scalar> init_params(Eigen::Index d, Eigen::Index n, const Matrix<Scalar>& first_batch,
                              Rng& rng);

/// Adam moment buffers shaped like SaeParams.
template <typename Scalar>
struct AdamState {
  SaeParams<Scalar> m;
  SaeParams<Scalar> v;
  std::int64_t t = 0;

  explicit AdamState(const SaeParams<Scalar>& like)
      : m(SaeParams<Scalar>::Zero(like.input_dim(), like.latent_dim())),
        v(SaeParams<Scalar>::Zero(like.input_dim(), like.latent_dim())) {}

  void step(SaeParams<Scalar>& params, SaeParams<Scalar>& grad, double lr, const AdamConfig& c);
};

struct TrainResult {
  SaeParamsf params;
  std::vector<TrainMetrics> metrics;
};

using MetricsSink = std::function<void(const TrainMetrics&)>;

/// Runs config.steps Adam updates on minibatches drawn uniformly with
/// replacement from `data`. Deterministic for a given seed.
TrainResult train(const TrainConfig& config, const PatchSource& data,
                  const MetricsSink& sink = {});

/// Objective over every vector of `data`, evaluated in chunks.
BatchMetrics evaluate(const SaeParamsf& params, const PatchSource& data, double alpha,
                      std::size_t chunk = 8192);

// ---------------------------------------------------------------------------

/// In-memory rows as a PatchSource.
class MatrixPatchSource : public PatchSource {
 public:
  explicit MatrixPatchSource(PatchMatrix rows) : rows_(std::move(rows)) {}
  std::size_t dim() const override { return static_cast<std::size_t>(rows_.cols()); }
  std::uint64_t size() const override { return static_cast<std::uint64_t>(rows_.rows()); }
  void fetch(std::uint64_t index, std::span<float> out) const override;
  const PatchMatrix& rows() const { return rows_; }

 private:
  PatchMatrix rows_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "BTSAE001", d u32, n u32, then w_enc, b_enc, w_dec, b_dec as
// row-major f32le.

std::string encode_checkpoint(const SaeParamsf& params);
SaeParamsf decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const SaeParamsf& params, const std::filesystem::path& path);
SaeParamsf load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Per-image aggregation

enum class Aggregation { Max, Mean };

Aggregation parse_aggregation(const std::string& s);
std::string to_string(Aggregation a);

/// One image's per-latent aggregate, keeping only strictly positive entries,
/// sorted by latent id.
struct ImageActivations {
  std::string image_id;
  std::optional<std::string> species;
  std::optional<std::string> genus;
  std::vector<std::pair<std::uint32_t, float>> entries;

  float at(std::uint32_t latent) const;
  bool operator==(const ImageActivations&) const = default;
};

void to_json(json& j, const ImageActivations& a);
void from_json(const json& j, ImageActivations& a);

/// Per-patch codes for one image: patches x n.
Matrix<float> patch_codes(const SaeParamsf& params, const PatchMatrix& patches);

/// Aggregates a patches x n code matrix over patches.
ImageActivations aggregate_codes(const Matrix<float>& codes, Aggregation agg);

/// Encodes every image of `shards` in shard order. `threads` > 1 fans out
/// over images; results are still delivered in input order.
std::vector<ImageActivations> batch_encode(const SaeParamsf& params, const ShardSet& shards,
                                           Aggregation agg, unsigned threads = 1);

}  // namespace btraits::sae
