// Iterating a shard far larger than the budget must keep live heap usage at
// about one PatchMatrix. Own executable because it replaces operator new.

#include <malloc.h>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <new>

#include "btraits/activation_store.hpp"
#include "btraits/util.hpp"
#include "support/temp_dir.hpp"

namespace {

std::atomic<long long> g_live{0};
std::atomic<long long> g_peak{0};

void note(long long delta) {
  const long long now = g_live += delta;
  long long prev = g_peak.load();
  while (now > prev && !g_peak.compare_exchange_weak(prev, now)) {
  }
}

long long heap_in_use() {
  const auto m = mallinfo2();
  return static_cast<long long>(m.uordblks + m.hblkhd);
}

int failures = 0;

void expect(bool ok, const char* what, long long value, long long limit) {
  std::printf("%s %s: %lld (limit %lld)\n", ok ? "ok  " : "FAIL", what, value, limit);
  if (!ok) ++failures;
}

}  // namespace

void* operator new(std::size_t n) {
  auto* p = static_cast<std::size_t*>(std::malloc(n + sizeof(std::max_align_t)));
  if (!p) throw std::bad_alloc();
  *p = n;
  note(static_cast<long long>(n));
  return reinterpret_cast<char*>(p) + sizeof(std::max_align_t);
}

void operator delete(void* p) noexcept {
  if (!p) return;
  auto* base = reinterpret_cast<std::size_t*>(static_cast<char*>(p) - sizeof(std::max_align_t));
  note(-static_cast<long long>(*base));
  std::free(base);
}

void operator delete(void* p, std::size_t) noexcept { operator delete(p); }

int main() {
  using namespace btraits;
  testing::TempDir dir;
  constexpr int kImages = 400, kPatches = 256, kDim = 64;
  const long long matrix_bytes = 4LL * kPatches * kDim;
  const long long budget = 4 * matrix_bytes;  // 256 KiB
  {
    ShardWriter w(dir / "big.shard", kDim, 16, 16);
    PatchMatrix m(kPatches, kDim);
    Rng rng(1);
    for (int i = 0; i < kImages; ++i) {
      for (int k = 0; k < m.size(); ++k) m.data()[k] = static_cast<float>(rng.uniform());
      ImageRecord r;
      r.image_id = "i" + std::to_string(i);
      r.species = "G s";
      r.genus = "G";
      w.append(r, m);
    }
    w.finish();
  }
  const long long file_bytes = static_cast<long long>(std::filesystem::file_size(dir / "big.shard"));
  std::printf("shard %lld bytes, budget %lld bytes\n", file_bytes, budget);
  expect(file_bytes > 50 * budget, "shard exceeds budget", file_bytes, 50 * budget);

  ShardReader reader(dir / "big.shard");
  double sum = 0;
  {
    const long long live0 = g_live.load();
    g_peak = live0;
    const long long heap0 = heap_in_use();
    long long heap_peak = heap0;
    std::uint64_t n = 0;
    for (const auto& e : reader) {
      sum += e.patches(0, 0);
      heap_peak = std::max(heap_peak, heap_in_use());
      ++n;
    }
    expect(n == kImages, "images visited", static_cast<long long>(n), kImages);
    expect(g_peak - live0 <= budget, "operator new peak growth", g_peak - live0, budget);
    expect(heap_peak - heap0 <= budget, "malloc in-use growth", heap_peak - heap0, budget);
  }
  {
    ShardSet set({dir / "big.shard"});
    const long long heap0 = heap_in_use();
    long long heap_peak = heap0;
    set.for_each_image([&](const ImageRecord&, const PatchMatrix& p) {
      sum += p(1, 1);
      heap_peak = std::max(heap_peak, heap_in_use());
    });
    expect(heap_peak - heap0 <= budget, "ShardSet::for_each_image growth", heap_peak - heap0,
           budget);
  }
  std::printf("checksum %.3f\n", sum);
  return failures == 0 ? 0 : 1;
}
