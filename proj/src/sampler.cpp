#include "unimt/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "unimt/errors.hpp"

namespace unimt {

std::vector<double> dataset_probabilities(std::span<const std::size_t> sizes, const MixPolicy& policy) {
  if (sizes.empty()) throw ConfigError("no datasets to mix");
  for (std::size_t i = 0; i < sizes.size(); ++i)
    if (sizes[i] == 0) throw ConfigError("dataset " + std::to_string(i) + " is empty");
  if (!policy.weights.empty()) {
    if (policy.weights.size() != sizes.size())
      throw ConfigError("mix weights must list one value per dataset");
    double sum = 0;
    for (double w : policy.weights) {
      if (!(w >= 0)) throw ConfigError("mix weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("mix weights must sum to 1");
    return policy.weights;
  }
  if (!(policy.temperature > 0)) throw ConfigError("mix temperature must be positive");
  // Work in log space so large sizes and small temperatures stay finite.
  std::vector<double> logs(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i)
    logs[i] = std::log(static_cast<double>(sizes[i])) / policy.temperature;
  const double mx = *std::max_element(logs.begin(), logs.end());
  std::vector<double> p(sizes.size());
  double sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += p[i] = std::exp(logs[i] - mx);
  for (double& x : p) x /= sum;
  return p;
}

std::size_t Batch::real_target_tokens() const {
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < target_mask.size(); ++i) n += target_mask.data()[i];
  return n;
}

bool Batch::has_context() const {
  return std::any_of(context.begin(), context.end(), [](const auto& m) { return m.rows() > 0; });
}

Batch make_batch(std::vector<UnifiedExample> examples, int pad_id) {
  Batch b;
  std::size_t ls = 0, lt = 0;
  for (const auto& ex : examples) {
    ls = std::max(ls, ex.source_ids.size());
    lt = std::max(lt, ex.target_ids.size());
  }
  const auto n = static_cast<Eigen::Index>(examples.size());
  b.source = IdGrid::Constant(n, static_cast<Eigen::Index>(ls), pad_id);
  b.target = IdGrid::Constant(n, static_cast<Eigen::Index>(lt), pad_id);
  b.source_mask = MaskGrid::Zero(n, static_cast<Eigen::Index>(ls));
  b.target_mask = MaskGrid::Zero(n, static_cast<Eigen::Index>(lt));
  b.context.resize(examples.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& ex = examples[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < ex.source_ids.size(); ++j) {
      b.source(i, static_cast<Eigen::Index>(j)) = ex.source_ids[j];
      b.source_mask(i, static_cast<Eigen::Index>(j)) = 1;
    }
    for (std::size_t j = 0; j < ex.target_ids.size(); ++j) {
      b.target(i, static_cast<Eigen::Index>(j)) = ex.target_ids[j];
      b.target_mask(i, static_cast<Eigen::Index>(j)) = 1;
    }
    const auto& cv = ex.context_vectors;
    if (!cv.empty()) {
      Eigen::MatrixXd m(static_cast<Eigen::Index>(cv.size()), static_cast<Eigen::Index>(cv[0].size()));
      for (std::size_t r = 0; r < cv.size(); ++r) {
        if (cv[r].size() != cv[0].size()) throw DimensionError("context vectors differ in dimension");
        for (std::size_t c = 0; c < cv[r].size(); ++c)
          m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = cv[r][c];
      }
      b.context[static_cast<std::size_t>(i)] = std::move(m);
    }
  }
  b.examples = std::move(examples);
  return b;
}

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

Sampler::Sampler(std::vector<std::vector<UnifiedExample>> datasets, SamplerOptions options)
    : data_(std::move(datasets)), opts_(std::move(options)), rng_(opts_.seed) {
  std::vector<std::size_t> sizes;
  for (const auto& d : data_) sizes.push_back(d.size());
  probs_ = dataset_probabilities(sizes, opts_.policy);
  double acc = 0;
  for (double p : probs_) cumulative_.push_back(acc += p);
  cumulative_.back() = 1.0;
  order_.resize(data_.size());
  cursor_.assign(data_.size(), 0);
  epochs_.assign(data_.size(), 0);
  for (std::size_t i = 0; i < data_.size(); ++i) reshuffle(i);
}

void Sampler::reshuffle(std::size_t d) {
  auto& order = order_[d];
  order.resize(data_[d].size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_below(rng_, i)]);
  if (opts_.length_bucketing && opts_.shard_size > 1) {
    const auto& ex = data_[d];
    for (std::size_t s = 0; s < order.size(); s += opts_.shard_size) {
      const auto end = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + opts_.shard_size));
      std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(s), end, [&](std::size_t a, std::size_t b) {
        return ex[a].target_ids.size() < ex[b].target_ids.size();
      });
    }
  }
  cursor_[d] = 0;
}

std::size_t Sampler::draw_dataset() {
  const double u = uniform01(rng_);
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), data_.size() - 1);
}

const UnifiedExample& Sampler::take(std::size_t d) {
  if (cursor_[d] == order_[d].size()) {
    ++epochs_[d];
    reshuffle(d);
  }
  return data_[d][order_[d][cursor_[d]++]];
}

std::vector<UnifiedExample> Sampler::collect() {
  std::vector<const UnifiedExample*> picked;
  std::size_t max_len = 0;
  while (true) {
    const UnifiedExample* next = pending_ ? pending_ : &take(draw_dataset());
    pending_ = nullptr;
    const std::size_t len = std::max(max_len, next->target_ids.size());
    if (len * (picked.size() + 1) > opts_.token_budget) {
      if (picked.empty())
        throw BudgetError("token budget " + std::to_string(opts_.token_budget) +
                          " is smaller than an example with " +
                          std::to_string(next->target_ids.size()) + " target tokens");
      pending_ = next;
      break;
    }
    picked.push_back(next);
    max_len = len;
  }
  std::vector<UnifiedExample> out;
  out.reserve(picked.size());
  for (const auto* p : picked) out.push_back(*p);
  return out;
}

Batch Sampler::next_batch() {
  Batch b = make_batch(collect(), opts_.pad_id);
  ++batches_;
  return b;
}

void Sampler::skip_batches(std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    collect();
    ++batches_;
  }
}

}  // namespace unimt
