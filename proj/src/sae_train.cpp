#include "btraits/sae_train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <thread>

#include "btraits/error.hpp"

namespace btraits::sae {

namespace {

constexpr char kCheckpointMagic[8] = {'B', 'T', 'S', 'A', 'E', '0', '0', '1'};
constexpr std::size_t kCheckpointHeaderBytes = 16;

template <typename Scalar>
Matrix<Scalar> draw_batch(const PatchSource& data, Eigen::Index m, Rng& rng) {
  const auto d = static_cast<Eigen::Index>(data.dim());
  // Row-major staging buffer so each fetch lands contiguously.
  PatchMatrix staged(m, d);
  for (Eigen::Index i = 0; i < m; ++i) {
    data.fetch(rng.below(data.size()), {staged.row(i).data(), static_cast<std::size_t>(d)});
  }
  if (!staged.allFinite()) throw data_error("training batch contains non-finite features");
  return staged.cast<Scalar>();
}

void append_floats(std::string& out, const float* data, std::size_t count) {
  out.append(reinterpret_cast<const char*>(data), count * sizeof(float));
}

template <typename Derived>
void append_row_major(std::string& out, const Eigen::MatrixBase<Derived>& m) {
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  append_floats(out, rm.data(), static_cast<std::size_t>(rm.size()));
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw usage_error("invalid train config: " + what); };
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail("alpha must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (steps < 0) fail("steps must be >= 0");
  if (alpha_warmup_steps < 0 || lr_warmup_steps < 0) fail("warmup steps must be >= 0");
  if (expansion < 1) fail("expansion must be >= 1");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    fail("adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) fail("adam eps must be > 0");
}

double effective_alpha(const TrainConfig& c, std::int64_t step) {
  if (step >= c.alpha_warmup_steps) return c.alpha;
  return c.alpha * static_cast<double>(step) / static_cast<double>(c.alpha_warmup_steps);
}

double effective_lr(const TrainConfig& c, std::int64_t step) {
  if (step >= c.lr_warmup_steps) return c.lr;
  return c.lr * static_cast<double>(step) / static_cast<double>(c.lr_warmup_steps);
}

json to_json(const TrainMetrics& m) {
  return {{"step", m.step},
          {"mse", m.mse},
          {"l0", m.l0},
          {"loss", m.loss},
          {"alpha_effective", m.alpha_effective},
          {"lr_effective", m.lr_effective}};
}

template <typename Scalar>
SaeParams<Scalar> init_params(Eigen::Index d, Eigen::Index n, const Matrix<Scalar>& first_batch,
                              Rng& rng) {
  auto p = SaeParams<Scalar>::Zero(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Vector<double> col(d);
    do {
      for (Eigen::Index i = 0; i < d; ++i) col[i] = rng.normal();
    } while (col.norm() == 0.0);
    p.w_dec.col(j) = (col / col.norm()).template cast<Scalar>();
  }
  p.w_enc = p.w_dec.transpose();
  if (first_batch.rows() > 0) p.b_dec = first_batch.colwise().mean().transpose();
  return p;
}

template SaeParams<float> init_params(Eigen::Index, Eigen::Index, const Matrix<float>&, Rng&);
template SaeParams<double> init_params(Eigen::Index, Eigen::Index, const Matrix<double>&, Rng&);

template <typename Scalar>
void AdamState<Scalar>::step(SaeParams<Scalar>& params, SaeParams<Scalar>& grad, double lr,
                             const AdamConfig& c) {
  ++t;
  const auto b1 = static_cast<Scalar>(c.beta1);
  const auto b2 = static_cast<Scalar>(c.beta2);
  const auto eps = static_cast<Scalar>(c.eps);
  const auto step_size =
      static_cast<Scalar>(lr / (1.0 - std::pow(c.beta1, static_cast<double>(t))));
  const auto v_correction =
      static_cast<Scalar>(1.0 / std::sqrt(1.0 - std::pow(c.beta2, static_cast<double>(t))));

  auto update = [&](auto& param, auto& g, auto& m1, auto& m2) {
    m1 = b1 * m1 + (Scalar(1) - b1) * g;
    m2 = b2 * m2 + (Scalar(1) - b2) * g.cwiseAbs2();
    param.array() -= step_size * m1.array() / (m2.array().sqrt() * v_correction + eps);
  };
  update(params.w_enc, grad.w_enc, m.w_enc, v.w_enc);
  update(params.b_enc, grad.b_enc, m.b_enc, v.b_enc);
  update(params.w_dec, grad.w_dec, m.w_dec, v.w_dec);
  update(params.b_dec, grad.b_dec, m.b_dec, v.b_dec);
}

template struct AdamState<float>;
template struct AdamState<double>;

TrainResult train(const TrainConfig& config, const PatchSource& data, const MetricsSink& sink) {
  config.validate();
  if (data.size() == 0) throw data_error("training data is empty");
  const auto d = static_cast<Eigen::Index>(data.dim());
  const auto n = d * static_cast<Eigen::Index>(config.expansion);
  const auto m = static_cast<Eigen::Index>(config.batch_size);

  Rng rng(config.seed);
  TrainResult result;
  Matrix<float> batch = draw_batch<float>(data, m, rng);
  result.params = init_params<float>(d, n, batch, rng);
  result.metrics.reserve(static_cast<std::size_t>(config.steps));

  AdamState<float> adam(result.params);
  auto grad = SaeParamsf::Zero(d, n);
  for (std::int64_t s = 1; s <= config.steps; ++s) {
    if (s > 1) batch = draw_batch<float>(data, m, rng);
    TrainMetrics tm;
    tm.step = s;
    tm.alpha_effective = effective_alpha(config, s);
    tm.lr_effective = effective_lr(config, s);
    const auto bm =
        loss_and_grad(result.params, batch, static_cast<float>(tm.alpha_effective), grad);
    tm.mse = bm.mse;
    tm.l0 = bm.l0;
    tm.loss = bm.loss;
    if (!std::isfinite(tm.loss) || !grad.all_finite()) {
      std::ostringstream msg;
      msg << "training diverged at step " << s << " (loss=" << tm.loss << ", mse=" << tm.mse
          << ", l0=" << tm.l0 << ", alpha=" << tm.alpha_effective << ", lr=" << tm.lr_effective
          << ")";
      throw DivergenceError(msg.str(), tm);
    }
    adam.step(result.params, grad, tm.lr_effective, config.adam);
    result.metrics.push_back(tm);
    if (sink) sink(tm);
  }
  return result;
}

BatchMetrics evaluate(const SaeParamsf& params, const PatchSource& data, double alpha,
                      std::size_t chunk) {
  BatchMetrics total;
  const auto count = data.size();
  if (count == 0) return total;
  const auto d = static_cast<Eigen::Index>(data.dim());
  PatchMatrix staged;
  for (std::uint64_t start = 0; start < count; start += chunk) {
    const auto rows = static_cast<Eigen::Index>(std::min<std::uint64_t>(chunk, count - start));
    staged.resize(rows, d);
    for (Eigen::Index i = 0; i < rows; ++i) {
      data.fetch(start + static_cast<std::uint64_t>(i),
                 {staged.row(i).data(), static_cast<std::size_t>(d)});
    }
    const Matrix<float> batch = staged;
    const auto bm = evaluate_batch(params, batch, static_cast<float>(alpha));
    const auto w = static_cast<double>(rows);
    total.mse += bm.mse * w;
    total.l0 += bm.l0 * w;
    total.l1 += bm.l1 * w;
  }
  const auto inv = 1.0 / static_cast<double>(count);
  total.mse *= inv;
  total.l0 *= inv;
  total.l1 *= inv;
  total.loss = total.mse + alpha * total.l1;
  return total;
}

void MatrixPatchSource::fetch(std::uint64_t index, std::span<float> out) const {
  const auto row = rows_.row(static_cast<Eigen::Index>(index));
  std::copy(row.data(), row.data() + rows_.cols(), out.begin());
}

// ---------------------------------------------------------------------------

std::string encode_checkpoint(const SaeParamsf& p) {
  if (!p.consistent()) throw std::invalid_argument("encode_checkpoint: inconsistent shapes");
  const auto d = static_cast<std::uint32_t>(p.input_dim());
  const auto n = static_cast<std::uint32_t>(p.latent_dim());
  std::string out(kCheckpointMagic, 8);
  out.append(reinterpret_cast<const char*>(&d), 4);
  out.append(reinterpret_cast<const char*>(&n), 4);
  append_row_major(out, p.w_enc);
  append_floats(out, p.b_enc.data(), n);
  append_row_major(out, p.w_dec);
  append_floats(out, p.b_dec.data(), d);
  return out;
}

SaeParamsf decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointHeaderBytes) throw data_error("checkpoint truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw data_error("checkpoint has bad magic");
  std::uint32_t d = 0, n = 0;
  std::memcpy(&d, bytes.data() + 8, 4);
  std::memcpy(&n, bytes.data() + 12, 4);
  if (d == 0 || n == 0) throw data_error("checkpoint has a zero dimension");
  const std::uint64_t floats = 2ull * d * n + d + n;
  if (bytes.size() != kCheckpointHeaderBytes + floats * sizeof(float)) {
    throw data_error("checkpoint size does not match its header");
  }
  const auto* src = bytes.data() + kCheckpointHeaderBytes;
  auto take = [&](float* dst, std::size_t count) {
    std::memcpy(dst, src, count * sizeof(float));
    src += count * sizeof(float);
  };
  using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  SaeParamsf p;
  RowMajor enc(n, d), dec(d, n);
  p.b_enc.resize(n);
  p.b_dec.resize(d);
  take(enc.data(), std::size_t{n} * d);
  take(p.b_enc.data(), n);
  take(dec.data(), std::size_t{d} * n);
  take(p.b_dec.data(), d);
  p.w_enc = enc;
  p.w_dec = dec;
  if (!p.all_finite()) throw data_error("checkpoint contains non-finite parameters");
  return p;
}

void save_checkpoint(const SaeParamsf& params, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(params));
}

SaeParamsf load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------------------

Aggregation parse_aggregation(const std::string& s) {
  if (s == "max") return Aggregation::Max;
  if (s == "mean") return Aggregation::Mean;
  throw usage_error("unknown aggregation '" + s + "' (expected max or mean)");
}

std::string to_string(Aggregation a) { return a == Aggregation::Max ? "max" : "mean"; }

float ImageActivations::at(std::uint32_t latent) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), latent,
                             [](const auto& e, std::uint32_t l) { return e.first < l; });
  return (it != entries.end() && it->first == latent) ? it->second : 0.0f;
}

void to_json(json& j, const ImageActivations& a) {
  json latents = json::array(), values = json::array();
  for (const auto& [latent, value] : a.entries) {
    latents.push_back(latent);
    values.push_back(value);
  }
  j = json{{"image_id", a.image_id},
           {"species", a.species ? json(*a.species) : json(nullptr)},
           {"genus", a.genus ? json(*a.genus) : json(nullptr)},
           {"latents", std::move(latents)},
           {"values", std::move(values)}};
}

void from_json(const json& j, ImageActivations& a) {
  a.image_id = j.at("image_id").get<std::string>();
  a.species = j.at("species").is_null() ? std::nullopt
                                        : std::optional(j.at("species").get<std::string>());
  a.genus = j.at("genus").is_null() ? std::nullopt : std::optional(j.at("genus").get<std::string>());
  const auto& latents = j.at("latents");
  const auto& values = j.at("values");
  if (latents.size() != values.size()) throw data_error("activation record length mismatch");
  a.entries.clear();
  for (std::size_t i = 0; i < latents.size(); ++i) {
    a.entries.emplace_back(latents[i].get<std::uint32_t>(), values[i].get<float>());
  }
}

Matrix<float> patch_codes(const SaeParamsf& params, const PatchMatrix& patches) {
  if (patches.cols() != params.input_dim()) {
    throw data_error("patch features have dimension " + std::to_string(patches.cols()) +
                     ", checkpoint expects " + std::to_string(params.input_dim()));
  }
  return encode_rows(params, patches);
}

ImageActivations aggregate_codes(const Matrix<float>& codes, Aggregation agg) {
  ImageActivations out;
  if (codes.rows() == 0) return out;
  const Vector<float> pooled = agg == Aggregation::Max
                                   ? Vector<float>(codes.colwise().maxCoeff().transpose())
                                   : Vector<float>(codes.colwise().mean().transpose());
  for (Eigen::Index j = 0; j < pooled.size(); ++j) {
    if (pooled[j] > 0.0f) out.entries.emplace_back(static_cast<std::uint32_t>(j), pooled[j]);
  }
  return out;
}

std::vector<ImageActivations> batch_encode(const SaeParamsf& params, const ShardSet& shards,
                                           Aggregation agg, unsigned threads) {
  if (shards.dim() != static_cast<std::size_t>(params.input_dim())) {
    throw data_error("shard feature dimension " + std::to_string(shards.dim()) +
                     " does not match checkpoint dimension " +
                     std::to_string(params.input_dim()));
  }
  std::vector<std::pair<const ShardReader*, std::uint64_t>> work;
  work.reserve(shards.image_count());
  for (const auto& s : shards.shards()) {
    for (std::uint64_t i = 0; i < s.size(); ++i) work.emplace_back(&s, i);
  }
  std::vector<ImageActivations> out(work.size());

  auto run = [&](std::size_t begin, std::size_t end) {
    PatchMatrix buf;
    for (std::size_t k = begin; k < end; ++k) {
      const auto& [reader, idx] = work[k];
      reader->read_patches(idx, buf);
      auto act = aggregate_codes(patch_codes(params, buf), agg);
      const auto& rec = reader->record(idx);
      act.image_id = rec.image_id;
      act.species = rec.species;
      act.genus = rec.genus;
      out[k] = std::move(act);
    }
  };

  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(work.size())));
  if (threads <= 1) {
    run(0, work.size());
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t per = (work.size() + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t b = t * per, e = std::min(work.size(), b + per);
    pool.emplace_back([&, t, b, e] {
      try {
        run(b, e);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  return out;
}

}  // namespace btraits::sae
