#include <doctest.h>

#include <Eigen/Dense>

#include <cstring>
#include <limits>

#include "btraits/error.hpp"
#include "btraits/sae_train.hpp"
#include "btraits/synthetic.hpp"
#include "support/fd_check.hpp"
#include "support/temp_dir.hpp"

using namespace btraits;
using namespace btraits::sae;

TEST_CASE("identity encoder example") {
  auto p = SaeParamsd::Zero(2, 2);
  p.w_enc.setIdentity();
  p.w_dec.setIdentity();
  Vector<double> z(2);
  z << 1, -2;
  const auto c = encode(p, z);
  CHECK(c.pre_activation == Vector<double>((Vector<double>(2) << 1, -2).finished()));
  CHECK(c.code == Vector<double>((Vector<double>(2) << 1, 0).finished()));
  CHECK(decode(p, c.code) == c.code);
}

TEST_CASE("input equal to b_dec gives a zero code") {
  Rng rng(1);
  auto p = btraits::testing::random_params(rng, 5, 7);
  p.b_enc.setZero();
  const auto c = encode(p, p.b_dec);
  CHECK(c.code.isZero(0));
  CHECK(decode(p, Vector<double>::Zero(7)) == p.b_dec);
}

TEST_CASE("encode and decode match an explicit loop") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto p = btraits::testing::random_params(rng, 5, 9);
    Vector<double> z(5);
    for (int i = 0; i < 5; ++i) z[i] = rng.normal();
    const auto f = forward(p, z);
    for (int j = 0; j < 9; ++j) {
      double u = p.b_enc[j];
      for (int i = 0; i < 5; ++i) u += p.w_enc(j, i) * (z[i] - p.b_dec[i]);
      CHECK(f.pre_activation[j] == doctest::Approx(u).epsilon(1e-12));
      CHECK(f.code[j] == doctest::Approx(u > 0 ? u : 0.0).epsilon(1e-12));
    }
    for (int i = 0; i < 5; ++i) {
      double r = p.b_dec[i];
      for (int j = 0; j < 9; ++j) r += p.w_dec(i, j) * f.code[j];
      CHECK(f.reconstruction[i] == doctest::Approx(r).epsilon(1e-12));
    }
    Matrix<double> rows(3, 5);
    for (int i = 0; i < rows.size(); ++i) rows.data()[i] = rng.normal();
    const auto batch_codes = encode_rows(p, rows);
    for (int r = 0; r < 3; ++r) {
      CHECK(batch_codes.row(r).transpose().isApprox(encode(p, rows.row(r).transpose()).code));
    }
  }
}

TEST_CASE("encode and decode reject bad input") {
  auto p = SaeParamsd::Zero(3, 4);
  CHECK_THROWS(encode(p, Vector<double>::Zero(2)));
  Vector<double> z = Vector<double>::Zero(3);
  z[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(encode(p, z));
  Vector<double> g = Vector<double>::Zero(4);
  g[0] = -1;
  CHECK_THROWS(decode(p, g));
}

TEST_CASE("alpha = 0 makes the loss the mse") {
  Rng rng(3);
  const auto p = btraits::testing::random_params(rng, 6, 10);
  const auto b = btraits::testing::random_batch(rng, 8, 6);
  const auto m = evaluate_batch(p, b, 0.0);
  CHECK(m.loss == m.mse);
  const auto m2 = evaluate_batch(p, b, 0.5);
  CHECK(m2.loss >= m2.mse);
  CHECK(m2.l0 >= 0);
  CHECK(m2.l0 <= 10);
}

TEST_CASE("perfect reconstruction has zero reconstruction gradient") {
  // W_dec = W_enc^-1, zero biases, inputs W_dec c with c > 0.
  Rng rng(4);
  auto p = SaeParamsd::Zero(4, 4);
  for (int i = 0; i < 16; ++i) p.w_enc.data()[i] = (i % 5 == 0 ? 1.0 : 0.0) + 0.1 * rng.normal();
  p.w_dec = p.w_enc.inverse();
  Matrix<double> c(6, 4);
  for (int i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(0.5, 1.5);
  const Matrix<double> b = c * p.w_dec.transpose();
  auto grad = SaeParamsd::Zero(4, 4);
  const auto m = loss_and_grad(p, b, 0.0, grad);
  CHECK(m.mse < 1e-20);
  CHECK(m.l0 == 4.0);
  CHECK(grad.w_enc.norm() < 1e-9);
  CHECK(grad.w_dec.norm() < 1e-9);
  CHECK(grad.b_enc.norm() < 1e-9);
  CHECK(grad.b_dec.norm() < 1e-9);
}

TEST_CASE("analytic gradient matches central differences") {
  Rng rng(5);
  int checked = 0;
  while (checked < 10) {
    const auto p = btraits::testing::random_params(rng, 8, 16);
    const auto b = btraits::testing::random_batch(rng, 4, 8);
    if (btraits::testing::kink_margin(p, b) < 1e-3) continue;
    const auto rep = btraits::testing::fd_check(p, b, 0.3);
    CHECK(rep.entries == 8 * 16 * 2 + 16 + 8);
    CHECK(rep.worst_rel < 1e-4);
    ++checked;
  }
}

TEST_CASE("warmup schedules") {
  TrainConfig c;
  c.alpha = 8e-4;
  c.alpha_warmup_steps = 500;
  c.lr = 1e-3;
  c.lr_warmup_steps = 0;
  CHECK(effective_alpha(c, 1) == 8e-4 * 1 / 500.0);
  CHECK(effective_alpha(c, 250) == 8e-4 * 250 / 500.0);
  CHECK(effective_alpha(c, 500) == 8e-4);
  CHECK(effective_alpha(c, 9000) == 8e-4);
  CHECK(effective_lr(c, 1) == 1e-3);
}

TEST_CASE("first Adam step moves each parameter by about lr") {
  auto p = SaeParamsd::Zero(2, 3);
  auto g = SaeParamsd::Zero(2, 3);
  g.w_enc.setConstant(0.25);
  g.b_dec.setConstant(-4.0);
  AdamState<double> st(p);
  st.step(p, g, 1e-3, AdamConfig{});
  CHECK(p.w_enc(0, 0) == doctest::Approx(-1e-3 * 0.25 / (0.25 + 1e-8)).epsilon(1e-12));
  CHECK(p.b_dec[0] == doctest::Approx(1e-3 * 4.0 / (4.0 + 1e-8)).epsilon(1e-12));
  CHECK(p.b_enc.isZero(0));
}

TEST_CASE("init invariants") {
  Rng rng(6);
  Matrix<float> batch(10, 5);
  for (int i = 0; i < batch.size(); ++i) batch.data()[i] = static_cast<float>(rng.normal());
  const auto p = init_params<float>(5, 20, batch, rng);
  CHECK(p.consistent());
  for (int j = 0; j < 20; ++j) CHECK(p.w_dec.col(j).norm() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(p.w_enc == p.w_dec.transpose());
  CHECK(p.b_enc.isZero(0));
  CHECK(p.b_dec.isApprox(batch.colwise().mean().transpose()));
}

TEST_CASE("training: zero steps, determinism, baseline, divergence") {
  synth::DictionarySpec ds;
  ds.dim = 8;
  ds.atoms = 16;
  ds.active = 2;
  ds.samples = 2000;
  const auto corpus = synth::make_dictionary(ds);
  MatrixPatchSource src(corpus.samples);

  TrainConfig c;
  c.steps = 0;
  c.batch_size = 64;
  c.expansion = 2;
  const auto zero = train(c, src);
  CHECK(zero.metrics.empty());
  for (int j = 0; j < 16; ++j) CHECK(zero.params.w_dec.col(j).norm() == doctest::Approx(1.0));

  c.steps = 300;
  c.alpha_warmup_steps = 50;
  c.lr_warmup_steps = 50;
  std::vector<TrainMetrics> streamed;
  const auto a = train(c, src, [&](const TrainMetrics& m) { streamed.push_back(m); });
  const auto b = train(c, src);
  CHECK(a.params == b.params);
  CHECK(a.metrics == b.metrics);
  CHECK(streamed == a.metrics);
  CHECK(encode_checkpoint(a.params) == encode_checkpoint(b.params));
  REQUIRE(a.metrics.size() == 300);
  for (int s : {1, 10, 49}) {
    CHECK(a.metrics[s - 1].alpha_effective == c.alpha * s / 50.0);
  }

  // Zero-code baseline: predicting the data mean everywhere.
  const Eigen::RowVectorXf mean = corpus.samples.colwise().mean();
  const double baseline = (corpus.samples.rowwise() - mean).rowwise().squaredNorm().mean();
  CHECK(evaluate(a.params, src, c.alpha).mse < baseline);

  c.seed = 1;
  CHECK_FALSE(train(c, src).params == a.params);

  c.lr = 1e30;
  c.lr_warmup_steps = 0;
  CHECK_THROWS_AS(train(c, src), DivergenceError);

  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("evaluate matches one big batch") {
  Rng rng(7);
  PatchMatrix rows(1000, 6);
  for (int i = 0; i < rows.size(); ++i) rows.data()[i] = static_cast<float>(rng.normal());
  const auto p = btraits::testing::random_params(rng, 6, 12).cast<float>();
  MatrixPatchSource src(rows);
  const auto chunked = evaluate(p, src, 0.1, 77);
  const auto whole = evaluate_batch(p, Matrix<float>(rows), 0.1f);
  CHECK(chunked.mse == doctest::Approx(whole.mse).epsilon(1e-5));
  CHECK(chunked.l0 == doctest::Approx(whole.l0).epsilon(1e-9));
  CHECK(chunked.l1 == doctest::Approx(whole.l1).epsilon(1e-5));
}

TEST_CASE("checkpoint round trip and corruption") {
  Rng rng(8);
  const auto p = btraits::testing::random_params(rng, 4, 12).cast<float>();
  const auto bytes = encode_checkpoint(p);
  CHECK(bytes.size() == 16 + 4 * (2 * 4 * 12 + 4 + 12));
  CHECK(bytes.substr(0, 8) == "BTSAE001");
  std::vector<std::uint8_t> buf(bytes.begin(), bytes.end());
  CHECK(decode_checkpoint(buf) == p);
  buf.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(buf), Error);
  buf.assign(bytes.begin(), bytes.end());
  buf[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(buf), Error);
  buf.assign(bytes.begin(), bytes.end());
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(buf.data() + 20, &nan, 4);
  CHECK_THROWS_AS(decode_checkpoint(buf), Error);

  btraits::testing::TempDir dir;
  save_checkpoint(p, dir / "p.ckpt");
  CHECK(load_checkpoint(dir / "p.ckpt") == p);
}

TEST_CASE("aggregation over patches") {
  Matrix<float> codes(2, 3);
  codes << 0.2f, 0.0f, 1.0f,
           0.95f, 0.0f, 3.0f;
  const auto mx = aggregate_codes(codes, Aggregation::Max);
  CHECK(mx.at(0) == 0.95f);
  CHECK(mx.at(1) == 0.0f);
  CHECK(mx.entries.size() == 2);
  const auto mean = aggregate_codes(codes, Aggregation::Mean);
  CHECK(mean.at(0) == doctest::Approx(0.575));
  CHECK(mean.at(2) == doctest::Approx(2.0));

  Matrix<float> one(1, 3);
  one << 0.5f, 0.0f, 2.0f;
  CHECK(aggregate_codes(one, Aggregation::Max) == aggregate_codes(one, Aggregation::Mean));
  CHECK_THROWS(parse_aggregation("median"));
}

TEST_CASE("batch_encode equals a per-patch loop and is thread-invariant") {
  btraits::testing::TempDir dir;
  Rng rng(9);
  std::vector<std::pair<ImageRecord, PatchMatrix>> imgs;
  for (int i = 0; i < 3; ++i) {
    ImageRecord r;
    r.image_id = "i" + std::to_string(i);
    r.genus = "G";
    r.species = "G s" + std::to_string(i % 2);
    PatchMatrix m(4, 5);
    for (int k = 0; k < m.size(); ++k) m.data()[k] = static_cast<float>(rng.normal());
    imgs.emplace_back(r, m);
  }
  write_shard(imgs, PatchGeometry{5, 2, 2}, dir / "s.shard");
  ShardSet set({dir / "s.shard"});
  const auto p = btraits::testing::random_params(rng, 5, 8).cast<float>();
  const auto one = batch_encode(p, set, Aggregation::Max, 1);
  const auto four = batch_encode(p, set, Aggregation::Max, 4);
  CHECK(one == four);
  REQUIRE(one.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(one[i].image_id == imgs[i].first.image_id);
    CHECK(one[i].species == imgs[i].first.species);
    for (std::uint32_t j = 0; j < 8; ++j) {
      float best = 0.0f;
      for (int r = 0; r < 4; ++r) {
        const auto c = encode(p, Vector<float>(imgs[i].second.row(r).transpose()));
        best = std::max(best, c.code[j]);
      }
      CHECK(one[i].at(j) == doctest::Approx(best).epsilon(1e-6));
    }
  }
}
