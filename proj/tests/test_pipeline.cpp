#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>

#include "btraits/dataset_io.hpp"
#include "btraits/error.hpp"
#include "btraits/log.hpp"
#include "btraits/pipeline.hpp"
#include "btraits/trait_miner.hpp"
#include "support/mock_endpoint.hpp"
#include "support/planted_run.hpp"
#include "support/temp_dir.hpp"

using namespace btraits;
namespace fs = std::filesystem;

namespace {

struct Planted {
  testing::TempDir dir;
  synth::PlantedCorpus corpus = synth::write_planted(dir / "corpus");
};

Planted& planted() {
  static Planted p;
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BTRAITS_CLI) + " -q " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config parsing") {
  testing::TempDir dir;
  std::ofstream(dir / "c.conf") << "# comment\nshards = a.shard\nsteps = 12\nalpha=0.5\n"
                                   "mode = single\nt_freq = 0.01\ncrop = true\n\n";
  auto c = PipelineConfig::load(dir / "c.conf");
  CHECK(c.shards == std::vector<std::string>{"a.shard"});
  CHECK(c.train.steps == 12);
  CHECK(c.train.alpha == 0.5);
  CHECK(c.mode == caption::PromptMode::Single);
  CHECK(c.t_freq == 0.01);
  CHECK(c.style.crop);
  CHECK(c.to_json()["t_freq"] == 0.01);
  CHECK_THROWS_AS(c.set("no_such_key", "1"), Error);
  CHECK_THROWS_AS(c.set("steps", "many"), Error);
  c.t_freq = 2.0;
  CHECK_THROWS_AS(c.validate(), Error);

  PipelineConfig d;
  CHECK(d.t_activation == 0.9);
  CHECK(d.t_freq == 3e-3);
  CHECK(d.train.expansion == 32);
  CHECK(d.train.batch_size == 16384);
  CHECK(d.checkpoint_path() == fs::path("run") / "sae.ckpt");
}

TEST_CASE("missing shards: usage error, nothing written") {
  testing::TempDir dir;
  PipelineConfig c;
  c.shards = {(dir / "nope*.shard").string()};
  c.out_dir = dir / "out";
  Pipeline p(c);
  try {
    p.train();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Usage);
  }
  CHECK_FALSE(fs::exists(dir / "out"));
}

TEST_CASE("corpus without species labels") {
  testing::TempDir dir;
  std::vector<std::pair<ImageRecord, PatchMatrix>> imgs;
  for (int i = 0; i < 4; ++i) {
    ImageRecord r;
    r.image_id = "u" + std::to_string(i);
    imgs.emplace_back(r, PatchMatrix::Constant(4, 3, 1.0f + i));
  }
  write_shard(imgs, PatchGeometry{3, 2, 2}, dir / "u.shard");
  PipelineConfig c;
  c.shards = {(dir / "u.shard").string()};
  c.out_dir = dir / "out";
  c.train.steps = 5;
  c.train.batch_size = 8;
  c.train.expansion = 2;
  Pipeline p(c);
  p.train();
  p.encode();
  try {
    p.mine();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Data);
    CHECK(std::string(e.what()).find("no species labels") != std::string::npos);
  }
}

TEST_CASE("tiny smoke run, determinism and restart") {
  auto& pl = planted();
  testing::TempDir out;
  auto c = testing::planted_config(pl.corpus, out / "a", 100);
  c.dry_run = true;
  const auto t0 = std::chrono::steady_clock::now();
  Pipeline p(c);
  const auto results = p.run_all();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 5.0);
  CHECK(results.back().stage == "caption");
  CHECK(fs::exists(out / "a" / "sae.ckpt"));
  CHECK(fs::exists(out / "a" / "manifests" / "train.json"));
  const auto metrics = read_jsonl(out / "a" / "train_metrics.jsonl");
  CHECK(metrics.size() == 100);

  auto c2 = c;
  c2.out_dir = out / "b";
  Pipeline(c2).train();
  CHECK(read_file_bytes(out / "a" / "sae.ckpt") == read_file_bytes(out / "b" / "sae.ckpt"));

  // A rerun with the same config skips train/encode/mine.
  Pipeline again(c);
  CHECK(again.train().skipped);
  CHECK(again.encode().skipped);
  CHECK(again.mine().skipped);
  Pipeline forced(c, true);
  CHECK_FALSE(forced.train().skipped);

  auto c3 = c;
  c3.train.seed = 99;
  CHECK_FALSE(Pipeline(c3).train().skipped);

  const auto timing = json::parse(read_file_text(out / "a" / "timing.json"));
  CHECK(timing.contains("activation_ms_per_image"));
  CHECK(timing.contains("sae_forward_ms_per_image"));
}

TEST_CASE("dry run writes prompts and makes no requests") {
  auto& pl = planted();
  testing::MockEndpoint mock;
  testing::TempDir out;
  auto c = testing::planted_config(pl.corpus, out.path());
  c.endpoint = mock.url();
  c.dry_run = true;
  Pipeline p(c);
  p.run_all();
  CHECK(mock.requests() == 0);
  std::size_t prompts = 0;
  for (const auto& e : fs::directory_iterator(out / "prompts")) {
    const auto j = json::parse(read_file_text(e.path()));
    CHECK(j["messages"][1]["content"].size() == 4);
    ++prompts;
  }
  CHECK(prompts == read_jsonl(out / "localize.jsonl").size());
  CHECK(prompts > 0);
}

TEST_CASE("end to end against the mock endpoint") {
  auto& pl = planted();
  testing::MockEndpoint mock;
  testing::TempDir out;
  auto c = testing::planted_config(pl.corpus, out.path());
  c.endpoint = mock.url();
  Pipeline p(c);
  const auto results = p.run_all();
  CHECK(results.size() == 6);
  const auto salient = miner::read_salient(out / "salient.jsonl");
  CHECK(salient.traits.size() == 4);
  const auto jobs = read_jsonl(out / "localize.jsonl").size();
  CHECK(jobs > 0);
  CHECK(mock.requests() == jobs);
  CHECK(p.validate().summary["violations"].empty());
  const auto params = sae::load_checkpoint(out / "sae.ckpt");
  CHECK(salient.traits == testing::planted_latents(pl.corpus, params, c.t_activation));
  const auto rows = read_jsonl(out / "dataset.jsonl");
  CHECK(rows.size() == jobs);
  for (const auto& r : rows) {
    CHECK(r["images"].size() == 3);
    CHECK(r["created_at"] == "2026-01-01T00:00:00Z");
    CHECK(r["parts"].size() == 2);
  }

  // Caption reruns hit the cache.
  Pipeline(c, true).caption();
  CHECK(mock.requests() == jobs);

  const auto stats = p.stats();
  CHECK(stats.summary.contains("dataset"));

  SUBCASE("topk") {
    const auto& [species, ids] = *salient.traits.begin();
    const auto latent = ids[0];
    p.topk(latent, 50);
    const auto dir = out / "topk" / ("latent_" + std::to_string(latent));
    const auto manifest = read_jsonl(dir / "manifest.jsonl");

    // Brute force over the shard: max patch code, descending, ties by id.
    ShardSet set({pl.corpus.shard});
    std::vector<std::pair<float, std::string>> all;
    std::map<std::string, std::string> species_of;
    set.for_each_image([&](const ImageRecord& r, const PatchMatrix& m) {
      float best = 0.0f;
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        best = std::max(best, sae::encode(params, sae::Vector<float>(m.row(i).transpose())).code[latent]);
      }
      if (best > 0.0f) all.emplace_back(-best, r.image_id);
      species_of[r.image_id] = *r.species;
    });
    std::sort(all.begin(), all.end());
    REQUIRE(manifest.size() == all.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
      CHECK(manifest[i]["image_id"] == all[i].second);
      CHECK(manifest[i]["activation"].get<float>() == doctest::Approx(-all[i].first).epsilon(1e-5));
      CHECK(fs::exists(manifest[i]["path"].get<std::string>()));
      CHECK(manifest[i]["boxes"].size() >= 1);
      // The planted latent only clears the threshold on its own species.
      if (-all[i].first > c.t_activation) CHECK(species_of[all[i].second] == species);
    }
    p.topk(latent, 0);
    CHECK(read_jsonl(dir / "manifest.jsonl").empty());
    CHECK_THROWS_AS(p.topk(1u << 20, 3), Error);
  }
}

TEST_CASE("failed captions surface as an endpoint error") {
  auto& pl = planted();
  testing::MockEndpoint mock;
  testing::TempDir out;
  auto c = testing::planted_config(pl.corpus, out.path());
  c.endpoint = mock.url();
  c.retry.max_attempts = 1;
  mock.script({400});
  Pipeline p(c);
  p.train();
  p.encode();
  p.mine();
  p.localize();
  try {
    p.caption();
    FAIL("expected an endpoint error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Endpoint);
  }
  CHECK(fs::exists(out / "captions.jsonl"));
}

TEST_CASE("cli exit codes") {
  auto& pl = planted();
  testing::TempDir out;
  const std::string base = "-o " + (out / "r").string() + " --shards " + pl.corpus.shard.string() +
                           " --set steps=400 --set batch_size=128 --set expansion=4 --set alpha=1";
  CHECK(run_cli("") == 1);
  CHECK(run_cli("bogus") == 1);
  CHECK(run_cli("--set nokey=1 train " + base) == 1);
  CHECK(run_cli("-o " + (out / "x").string() + " --shards /nonexistent/*.shard train") == 1);
  CHECK(run_cli(base + " run --dry-run") == 0);
  CHECK(run_cli(base + " stats") == 0);
  CHECK(run_cli(base + " topk --latent 0 -k 2") == 0);
  CHECK(run_cli(base + " topk --latent 999999") == 1);
  std::ofstream(out / "bad.jsonl") << "{\"species\":1}\n";
  CHECK(run_cli(base + " validate " + (out / "bad.jsonl").string()) == 2);
  CHECK(run_cli("--set max_attempts=1 " + base + " caption --endpoint http://127.0.0.1:1/v1") == 3);
  CHECK(run_cli("--help") == 0);
}
