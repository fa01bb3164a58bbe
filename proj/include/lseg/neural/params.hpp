#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "../error.hpp"

namespace lseg::nn {

/// Flat trainable parameters with parallel gradient and optimizer-moment
/// vectors, plus non-trainable buffers (batchnorm running statistics).
template <typename T>
struct ParamStore {
  struct Slice {
    std::string name;
    std::size_t offset = 0;
    std::size_t count = 0;
  };

  std::vector<T> values;
  std::vector<T> grads;
  std::vector<T> m;  // first moment
  std::vector<T> v;  // second moment (Adam) or infinity norm (Adamax)
  long step = 0;
  std::vector<T> buffers;
  std::vector<Slice> slices;

  std::size_t add(const std::string& name, std::size_t count) {
    const std::size_t off = values.size();
    values.resize(off + count, T{0});
    grads.resize(off + count, T{0});
    m.resize(off + count, T{0});
    v.resize(off + count, T{0});
    slices.push_back(Slice{name, off, count});
    return off;
  }

  std::size_t add_buffer(std::size_t count, T fill) {
    const std::size_t off = buffers.size();
    buffers.resize(off + count, fill);
    return off;
  }

  std::size_t size() const { return values.size(); }

  void zero_grad() { std::fill(grads.begin(), grads.end(), T{0}); }

  void reset_optimizer_state() {
    std::fill(m.begin(), m.end(), T{0});
    std::fill(v.begin(), v.end(), T{0});
    step = 0;
  }

  bool grads_finite() const {
    for (const T& g : grads)
      if (!std::isfinite(static_cast<double>(g))) return false;
    return true;
  }
};

}  // namespace lseg::nn
