#include "unimt/infer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "unimt/errors.hpp"

namespace unimt {

double length_penalty(std::size_t generated, double alpha) {
  return std::pow((5.0 + static_cast<double>(generated)) / 6.0, alpha);
}

namespace {

struct Live {
  std::vector<int> ids;
  double score = 0;
};

struct Search {
  const BeamRequest* request = nullptr;
  std::vector<Live> live;
  std::vector<Hypothesis> finished;
  bool done = false;
};

struct Candidate {
  double score;
  int token;
  std::size_t parent;
};

Hypothesis finish(std::vector<int> ids, double score, std::size_t prefix_len, double alpha) {
  Hypothesis h;
  h.score = score;
  h.normalized_score = score / length_penalty(ids.size() - prefix_len, alpha);
  h.ids = std::move(ids);
  return h;
}

// Largest normalized score any continuation of a live hypothesis can reach:
// log-probabilities only lower the score, and s / lp is monotone in lp.
double upper_bound(const Live& h, const BeamRequest& r, double alpha) {
  const std::size_t prefix = r.prefix.size();
  const std::size_t next = h.ids.size() + 1 - prefix;
  const std::size_t last = r.max_len - prefix;
  return std::max(h.score / length_penalty(next, alpha), h.score / length_penalty(last, alpha));
}

}  // namespace

std::vector<Hypothesis> beam_search(const StepFunction& step, std::span<const BeamRequest> requests, int eos_id,
                                    int beam, double alpha) {
  if (beam < 1) throw ConfigError("beam size must be at least 1");
  std::vector<Search> searches(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const auto& r = requests[i];
    auto& s = searches[i];
    s.request = &r;
    if (r.max_len < r.prefix.size())
      throw ConfigError("max_len " + std::to_string(r.max_len) + " is shorter than the forced prefix (" +
                        std::to_string(r.prefix.size()) + " tokens)");
    if (r.max_len == r.prefix.size()) {
      s.finished.push_back(finish(r.prefix, 0, r.prefix.size(), alpha));
      s.done = true;
    } else {
      s.live.push_back({r.prefix, 0});
    }
  }

  std::vector<BeamQuery> queries;
  std::vector<Candidate> cands;
  for (;;) {
    queries.clear();
    for (std::size_t i = 0; i < searches.size(); ++i)
      if (!searches[i].done)
        for (const auto& h : searches[i].live) queries.push_back({i, h.ids});
    if (queries.empty()) break;
    const Eigen::MatrixXd lp = step(queries);
    if (lp.rows() != static_cast<Eigen::Index>(queries.size()))
      throw DimensionError("step function returned the wrong number of rows");

    Eigen::Index row = 0;
    for (auto& s : searches) {
      if (s.done) continue;
      const auto& r = *s.request;
      cands.clear();
      for (std::size_t k = 0; k < s.live.size(); ++k, ++row)
        for (Eigen::Index t = 0; t < lp.cols(); ++t) {
          const double sc = s.live[k].score + lp(row, t);
          if (std::isfinite(sc)) cands.push_back({sc, static_cast<int>(t), k});
        }
      const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(beam));
      std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                        [](const Candidate& a, const Candidate& b) {
                          if (a.score != b.score) return a.score > b.score;
                          if (a.token != b.token) return a.token < b.token;
                          return a.parent < b.parent;
                        });
      std::vector<Live> next;
      for (std::size_t c = 0; c < keep; ++c) {
        std::vector<int> ids = s.live[cands[c].parent].ids;
        ids.push_back(cands[c].token);
        if (cands[c].token == eos_id || ids.size() >= r.max_len)
          s.finished.push_back(finish(std::move(ids), cands[c].score, r.prefix.size(), alpha));
        else
          next.push_back({std::move(ids), cands[c].score});
      }
      s.live = std::move(next);
      if (s.live.empty()) {
        s.done = true;
      } else if (!s.finished.empty()) {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& h : s.finished) best = std::max(best, h.normalized_score);
        double reach = -std::numeric_limits<double>::infinity();
        for (const auto& h : s.live) reach = std::max(reach, upper_bound(h, r, alpha));
        if (best >= reach) s.done = true;
      }
    }
  }

  std::vector<Hypothesis> out;
  out.reserve(searches.size());
  for (auto& s : searches) {
    if (s.finished.empty()) {
      // Every continuation had zero probability; report the best partial hypothesis.
      const auto& r = *s.request;
      for (const auto& h : s.live) s.finished.push_back(finish(h.ids, h.score, r.prefix.size(), alpha));
      if (s.finished.empty()) s.finished.push_back(finish(r.prefix, 0, r.prefix.size(), alpha));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < s.finished.size(); ++i)
      if (s.finished[i].normalized_score > s.finished[best].normalized_score) best = i;
    out.push_back(std::move(s.finished[best]));
  }
  return out;
}

Hypothesis beam_search(const StepFunction& step, const BeamRequest& request, int eos_id, int beam, double alpha) {
  return beam_search(step, std::span<const BeamRequest>(&request, 1), eos_id, beam, alpha).front();
}

std::vector<int> forced_prefix(const Vocabulary& v, int prompt_id, bool prompting) {
  if (!prompting) return {};
  return {prompt_id, v.prefix_sep_id()};
}

namespace {

// Encodes a group of sources once and scores decoder prefixes against it.
template <typename S>
class ModelScorer {
 public:
  ModelScorer(ModelState<S>& state, std::span<const UnifiedExample* const> sources) : model_(state) {
    const auto& c = state.config;
    const auto B = static_cast<Eigen::Index>(sources.size());
    Eigen::Index L = 1;
    for (const auto* s : sources) L = std::max<Eigen::Index>(L, static_cast<Eigen::Index>(s->source_ids.size()));
    IdGrid src = IdGrid::Constant(B, L, c.pad_id);
    MaskGrid mask = MaskGrid::Zero(B, L);
    std::vector<Eigen::MatrixXd> context;
    bool any_context = false;
    for (const auto* s : sources) any_context |= !s->context_vectors.empty();
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& ex = *sources[static_cast<std::size_t>(b)];
      for (std::size_t t = 0; t < ex.source_ids.size(); ++t) {
        src(b, static_cast<Eigen::Index>(t)) = ex.source_ids[t];
        mask(b, static_cast<Eigen::Index>(t)) = 1;
      }
      if (any_context) {
        const auto& cv = ex.context_vectors;
        Eigen::MatrixXd m(static_cast<Eigen::Index>(cv.size()), c.context_feature_dim);
        for (std::size_t i = 0; i < cv.size(); ++i) {
          if (cv[i].size() != static_cast<std::size_t>(c.context_feature_dim))
            throw DimensionError("context vector has the wrong dimension");
          for (std::size_t j = 0; j < cv[i].size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cv[i][j];
        }
        context.push_back(std::move(m));
      }
    }
    Graph<S> g(false);
    auto enc = model_.encode(g, src, mask, context, RunMode{});
    memory_ = g.value(enc.memory);
    len_ = enc.len;
    mask_ = std::move(enc.mask);
  }

  Eigen::MatrixXd operator()(const std::vector<BeamQuery>& queries) {
    const auto& c = model_.config();
    const auto n = static_cast<Eigen::Index>(queries.size());
    Eigen::Index Lt = 1;
    for (const auto& q : queries) Lt = std::max<Eigen::Index>(Lt, static_cast<Eigen::Index>(q.ids.size()) + 1);
    IdGrid in = IdGrid::Constant(n, Lt, c.pad_id);
    MaskGrid in_mask = MaskGrid::Zero(n, Lt);
    const Eigen::Index d = memory_.cols();
    Mat<S> mem(n * len_, d);
    std::vector<std::uint8_t> mem_mask(static_cast<std::size_t>(n * len_));
    std::vector<std::pair<int, int>> last(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& q = queries[static_cast<std::size_t>(i)];
      in(i, 0) = c.bos_id;
      in_mask(i, 0) = 1;
      for (std::size_t t = 0; t < q.ids.size(); ++t) {
        in(i, static_cast<Eigen::Index>(t) + 1) = q.ids[t];
        in_mask(i, static_cast<Eigen::Index>(t) + 1) = 1;
      }
      const auto src = static_cast<Eigen::Index>(q.request);
      mem.middleRows(i * len_, len_) = memory_.middleRows(src * len_, len_);
      std::copy_n(mask_.begin() + src * len_, len_, mem_mask.begin() + i * len_);
      last[static_cast<std::size_t>(i)] = {0, static_cast<int>(i * Lt + static_cast<Eigen::Index>(q.ids.size()))};
    }
    Graph<S> g(false);
    Encoded<S> enc;
    enc.memory = g.constant(std::move(mem));
    enc.batch = static_cast<int>(n);
    enc.len = static_cast<int>(len_);
    enc.mask = std::move(mem_mask);
    Var h = model_.decode(g, enc, in, in_mask, RunMode{});
    Var logits = model_.project(g, g.gather_rows({h}, last));
    return Graph<S>::log_softmax_rows(g.value(logits)).template cast<double>();
  }

 private:
  Transformer<S> model_;
  Mat<S> memory_;
  Eigen::Index len_ = 0;
  std::vector<std::uint8_t> mask_;
};

}  // namespace

template <typename S>
std::vector<Hypothesis> decode_batch(ModelState<S>& state, const Vocabulary& v,
                                     std::span<const UnifiedExample> sources,
                                     std::span<const std::vector<int>> prefixes, const DecodeOptions& options) {
  if (sources.size() != prefixes.size()) throw DimensionError("decode_batch: one prefix per source is required");
  if (options.beam < 1) throw ConfigError("beam size must be at least 1");
  std::vector<std::size_t> order(sources.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sources[a].source_ids.size() < sources[b].source_ids.size();
  });
  const std::size_t chunk = std::max<std::size_t>(1, options.batch_size);
  std::vector<Hypothesis> out(sources.size());
  for (std::size_t start = 0; start < order.size(); start += chunk) {
    const std::size_t end = std::min(order.size(), start + chunk);
    std::vector<const UnifiedExample*> group;
    std::vector<BeamRequest> requests;
    for (std::size_t k = start; k < end; ++k) {
      const auto& src = sources[order[k]];
      group.push_back(&src);
      BeamRequest r;
      r.prefix = prefixes[order[k]];
      r.max_len = options.max_len > 0 ? options.max_len : src.source_ids.size() + options.extra_len;
      requests.push_back(std::move(r));
    }
    ModelScorer<S> scorer(state, group);
    auto hyps = beam_search([&](const std::vector<BeamQuery>& q) { return scorer(q); }, requests, v.eos_id(),
                            options.beam, options.alpha);
    for (std::size_t k = start; k < end; ++k) out[order[k]] = std::move(hyps[k - start]);
  }
  return out;
}

template <typename S>
Hypothesis decode(ModelState<S>& state, const Vocabulary& v, const UnifiedExample& source, TaskKind prompt,
                  const DecodeOptions& options) {
  const std::vector<int> prefix = forced_prefix(v, v.prompt_id(prompt), options.prompting);
  return decode_batch<S>(state, v, std::span<const UnifiedExample>(&source, 1),
                         std::span<const std::vector<int>>(&prefix, 1), options)
      .front();
}

template <typename S>
std::vector<std::vector<FanOutEntry>> fan_out_all(ModelState<S>& state, const Vocabulary& v,
                                                  std::span<const TaskRecord> records,
                                                  std::span<const TaskKind> prompts, const DecodeOptions& options,
                                                  const ReframeOptions& reframe_options) {
  if (prompts.empty()) throw ConfigError("fan-out needs at least one prompt");
  ReframeOptions ro = reframe_options;
  ro.prompting = options.prompting;
  std::vector<UnifiedExample> sources;
  std::vector<std::vector<int>> prefixes;
  for (const auto& rec : records)
    for (TaskKind task : prompts) {
      UnifiedExample ex;
      ex.task = task;
      ex.source_ids = reframe_source(rec, task, v, ro);
      ex.context_vectors = rec.context_vectors;
      sources.push_back(std::move(ex));
      prefixes.push_back(forced_prefix(v, target_prompt_id(rec, task, v, ro), options.prompting));
    }
  const auto hyps = decode_batch<S>(state, v, sources, prefixes, options);
  std::vector<std::vector<FanOutEntry>> out(records.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < records.size(); ++i)
    for (TaskKind task : prompts) {
      const auto& h = hyps[k++];
      FanOutEntry e;
      e.prompt = task;
      e.score = h.score;
      e.ids = h.ids;
      try {
        e.text = parse_output(h.ids, v, options.prompting).text;
      } catch (const MalformedOutputError& err) {
        e.anomalous = true;
        e.error = err.what();
      }
      out[i].push_back(std::move(e));
    }
  return out;
}

template <typename S>
std::vector<FanOutEntry> fan_out(ModelState<S>& state, const Vocabulary& v, const TaskRecord& record,
                                 std::span<const TaskKind> prompts, const DecodeOptions& options,
                                 const ReframeOptions& reframe_options) {
  return fan_out_all<S>(state, v, std::span<const TaskRecord>(&record, 1), prompts, options, reframe_options)
      .front();
}

#define UNIMT_INSTANTIATE(S)                                                                                   \
  template std::vector<Hypothesis> decode_batch<S>(ModelState<S>&, const Vocabulary&,                         \
                                                   std::span<const UnifiedExample>,                           \
                                                   std::span<const std::vector<int>>, const DecodeOptions&);  \
  template Hypothesis decode<S>(ModelState<S>&, const Vocabulary&, const UnifiedExample&, TaskKind,           \
                                const DecodeOptions&);                                                        \
  template std::vector<FanOutEntry> fan_out<S>(ModelState<S>&, const Vocabulary&, const TaskRecord&,          \
                                               std::span<const TaskKind>, const DecodeOptions&,               \
                                               const ReframeOptions&);                                        \
  template std::vector<std::vector<FanOutEntry>> fan_out_all<S>(ModelState<S>&, const Vocabulary&,            \
                                                                std::span<const TaskRecord>,                  \
                                                                std::span<const TaskKind>,                    \
                                                                const DecodeOptions&, const ReframeOptions&);

UNIMT_INSTANTIATE(float)
UNIMT_INSTANTIATE(double)

#undef UNIMT_INSTANTIATE

}  // namespace unimt
