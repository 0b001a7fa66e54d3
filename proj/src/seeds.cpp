#include "wavg/seeds.hpp"

namespace wavg {

namespace {

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::string_view stream) {
  return splitmix64(master ^ fnv1a64(stream));
}

ResolvedSeedState ResolvedSeedState::resolve(std::uint64_t run_seed, std::uint64_t dataset_seed,
                                             std::uint64_t noise_seed) {
  ResolvedSeedState s;
  s.master = run_seed;
  s.streams["init"] = derive_seed(run_seed, "init");
  s.streams["shuffle"] = derive_seed(run_seed, "shuffle");
  s.streams["data"] = dataset_seed;
  s.streams["split"] = derive_seed(dataset_seed, "split");
  s.streams["noise"] = noise_seed;
  return s;
}

}  // namespace wavg
