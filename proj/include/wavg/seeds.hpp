#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace wavg {

// splitmix64 of (master ^ fnv1a64(stream)). Pure in both arguments, so a new
// consumer of randomness never perturbs the draws of existing streams.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);

// Named sub-seeds for one run. Data-side streams (data, noise, split) come
// from the dataset and noise seeds so every run seed sees the same data;
// model-side streams (init, shuffle) come from the run seed.
struct ResolvedSeedState {
  std::uint64_t master = 0;
  std::map<std::string, std::uint64_t> streams;

  static ResolvedSeedState resolve(std::uint64_t run_seed, std::uint64_t dataset_seed,
                                   std::uint64_t noise_seed);
  std::uint64_t at(const std::string& name) const { return streams.at(name); }
};

}  // namespace wavg
