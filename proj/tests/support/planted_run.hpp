#pragma once

// Planted corpus plus a pipeline config sized for it.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "btraits/pipeline.hpp"
#include "btraits/sae_train.hpp"
#include "btraits/synthetic.hpp"

namespace btraits::testing {

inline PipelineConfig planted_config(const synth::PlantedCorpus& corpus,
                                     const std::filesystem::path& out, std::int64_t steps = 2000) {
  PipelineConfig c;
  c.shards = {corpus.shard.string()};
  c.out_dir = out;
  c.train.steps = steps;
  c.train.batch_size = 256;
  c.train.expansion = 4;
  c.train.alpha = 1.0;
  c.train.seed = 3;
  c.t_activation = 0.9;
  c.t_freq = 3e-3;
  c.concurrency = 2;
  c.model = "mock-model";
  c.retry.base_delay = std::chrono::milliseconds(10);
  c.timestamp = "2026-01-01T00:00:00Z";
  return c;
}

/// For each species, the latents that fire above `t_activation` on its trait
/// atom at the largest planted coefficient and stay at or below it on every
/// other species' atom and on the background.
inline std::map<std::string, std::vector<std::uint32_t>> planted_latents(
    const synth::PlantedCorpus& corpus, const sae::SaeParamsf& params, double t_activation,
    double coef = synth::PlantedSpec{}.coef_max) {
  auto response = [&](const Eigen::VectorXd& atom) {
    return sae::encode(params, sae::Vector<float>((coef * atom).cast<float>())).code;
  };
  const auto bg = response(corpus.background.col(0));
  std::map<std::string, sae::Vector<float>> resp;
  for (const auto& [species, atom] : corpus.traits) resp.emplace(species, response(atom));
  std::map<std::string, std::vector<std::uint32_t>> out;
  for (const auto& [species, r] : resp) {
    for (Eigen::Index j = 0; j < r.size(); ++j) {
      if (!(r[j] > t_activation) || bg[j] > t_activation) continue;
      bool exclusive = true;
      for (const auto& [other, ro] : resp) {
        if (other != species && ro[j] > t_activation) exclusive = false;
      }
      if (exclusive) out[species].push_back(static_cast<std::uint32_t>(j));
    }
  }
  return out;
}

}  // namespace btraits::testing
