#pragma once

// Exact paired-bootstrap p-value: sums over every multiset of n segment draws
// weighted by its multinomial probability.

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

/// `compare(counts)` returns 1 when B scores below A on the resample with these
/// per-segment multiplicities, 0.5 on a tie and 0 otherwise.
inline double exact_bootstrap_p(std::size_t n, const std::function<double(const std::vector<int>&)>& compare,
                                std::size_t* compositions = nullptr) {
  std::vector<int> counts(n, 0);
  double p = 0;
  std::size_t seen = 0;
  const double log_norm = std::lgamma(static_cast<double>(n) + 1) - static_cast<double>(n) * std::log(double(n));
  std::function<void(std::size_t, int, double)> rec = [&](std::size_t i, int left, double log_w) {
    if (i + 1 == n) {
      counts[i] = left;
      const double w = std::exp(log_norm + log_w - std::lgamma(left + 1.0));
      p += w * compare(counts);
      ++seen;
      return;
    }
    for (int c = 0; c <= left; ++c) {
      counts[i] = c;
      rec(i + 1, left - c, log_w - std::lgamma(c + 1.0));
    }
  };
  rec(0, static_cast<int>(n), 0.0);
  if (compositions) *compositions = seen;
  return p;
}

}  // namespace oracle
