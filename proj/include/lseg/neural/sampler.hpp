#pragma once

#include <cstddef>
#include <cstdint>

#include "../error.hpp"
#include "../rng.hpp"

namespace lseg::nn {

struct SampledCase {
  bool primary = true;
  std::size_t index = 0;  // within the chosen set
};

/// Draws training cases from two sets: the primary set with probability p,
/// otherwise the extended set, then a uniform case within the chosen set.
class MixedSampler {
 public:
  MixedSampler(std::size_t primary_size, std::size_t extended_size, double p, std::uint64_t seed)
      : np_(primary_size), ne_(extended_size), p_(p), rng_(mix_seed(seed, 0x5a3b)) {
    if (np_ == 0 || ne_ == 0) throw ArgumentError("mixed_sampler: both sets must be non-empty");
    if (!(p_ >= 0.0 && p_ <= 1.0)) throw ArgumentError("mixed_sampler: probability must be in [0, 1]");
  }

  SampledCase next() {
    SampledCase c;
    c.primary = rng_.uniform() < p_;
    c.index = static_cast<std::size_t>(rng_.below(c.primary ? np_ : ne_));
    return c;
  }

 private:
  std::size_t np_, ne_;
  double p_;
  Rng rng_;
};

}  // namespace lseg::nn
