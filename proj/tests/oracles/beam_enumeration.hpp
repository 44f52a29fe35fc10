#pragma once

// Exhaustive search over every complete continuation of a prefix.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace oracle {

struct Best {
  std::vector<int> ids;
  double score = -std::numeric_limits<double>::infinity();
  double normalized = -std::numeric_limits<double>::infinity();
};

/// `probs(generated)` gives next-token probabilities after the generated
/// tokens (prefix excluded). A sequence is complete once it ends in eos or
/// holds max_len ids in total.
inline Best enumerate(const std::function<std::vector<double>(const std::vector<int>&)>& probs,
                      const std::vector<int>& prefix, std::size_t max_len, int eos, double alpha) {
  Best best;
  std::vector<int> gen;
  std::function<void(double)> walk = [&](double logp) {
    const std::size_t total = prefix.size() + gen.size();
    const bool complete = (!gen.empty() && gen.back() == eos) || total == max_len;
    if (complete) {
      const double lp = std::pow((5.0 + static_cast<double>(gen.size())) / 6.0, alpha);
      if (logp / lp > best.normalized) {
        best.normalized = logp / lp;
        best.score = logp;
        best.ids = prefix;
        best.ids.insert(best.ids.end(), gen.begin(), gen.end());
      }
      return;
    }
    const auto p = probs(gen);
    for (std::size_t t = 0; t < p.size(); ++t) {
      if (p[t] <= 0) continue;
      gen.push_back(static_cast<int>(t));
      walk(logp + std::log(p[t]));
      gen.pop_back();
    }
  };
  walk(0.0);
  return best;
}

}  // namespace oracle
