#include "unimt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <unicode/locid.h>
#include <unicode/unistr.h>

#include "json.hpp"
#include "unimt/errors.hpp"
#include "unimt/sampler.hpp"
#include "unimt/utf8.hpp"

namespace unimt {

namespace {

void check_aligned(std::size_t hyps, std::size_t refs) {
  if (hyps != refs)
    throw DimensionError("hypothesis count " + std::to_string(hyps) + " differs from reference count " +
                         std::to_string(refs));
  if (hyps == 0) throw DimensionError("metrics need at least one segment");
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Punctuation padded with spaces by the first 13a rule.
bool is_13a_symbol(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= '{' && u <= '~') || (u >= '[' && u <= '`') || (u >= ' ' && u <= '&') || (u >= '(' && u <= '+') ||
         (u >= ':' && u <= '@') || u == '/';
}

using NgramCounts = std::unordered_map<std::string, std::size_t>;

NgramCounts word_ngrams(const std::vector<std::string>& toks, std::size_t n) {
  NgramCounts out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (std::size_t k = 1; k < n; ++k) {
      key += '\x1f';
      key += toks[i + k];
    }
    ++out[key];
  }
  return out;
}

}  // namespace

std::string lowercase(std::string_view text) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  u.toLower(icu::Locale::getRoot());
  std::string out;
  u.toUTF8String(out);
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char32_t cp : utf8::decode(text)) {
    if (utf8::is_space(cp)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      utf8::append(cur, cp);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> tokenize_13a(std::string_view line) {
  std::string s(line);
  replace_all(s, "<skipped>", "");
  replace_all(s, "-\n", "");
  std::replace(s.begin(), s.end(), '\n', ' ');
  if (s.find('&') != std::string::npos) {
    replace_all(s, "&quot;", "\"");
    replace_all(s, "&amp;", "&");
    replace_all(s, "&lt;", "<");
    replace_all(s, "&gt;", ">");
  }
  s = " " + s + " ";

  std::string a;
  for (char c : s) {
    if (is_13a_symbol(c)) {
      a += ' ';
      a += c;
      a += ' ';
    } else {
      a += c;
    }
  }
  // Period and comma unless preceded by a digit: ([^0-9])([.,]) -> "\1 \2 ".
  std::string b;
  for (std::size_t i = 0; i < a.size();) {
    if (i + 1 < a.size() && !is_digit(a[i]) && (a[i + 1] == '.' || a[i + 1] == ',')) {
      b += a[i];
      b += ' ';
      b += a[i + 1];
      b += ' ';
      i += 2;
    } else {
      b += a[i++];
    }
  }
  // Unless followed by a digit: ([.,])([^0-9]) -> " \1 \2".
  std::string c;
  for (std::size_t i = 0; i < b.size();) {
    if (i + 1 < b.size() && (b[i] == '.' || b[i] == ',') && !is_digit(b[i + 1])) {
      c += ' ';
      c += b[i];
      c += ' ';
      c += b[i + 1];
      i += 2;
    } else {
      c += b[i++];
    }
  }
  // Dash preceded by a digit: ([0-9])(-) -> "\1 \2 ".
  std::string d;
  for (std::size_t i = 0; i < c.size();) {
    if (i + 1 < c.size() && is_digit(c[i]) && c[i + 1] == '-') {
      d += c[i];
      d += " - ";
      i += 2;
    } else {
      d += c[i++];
    }
  }
  return split_words(d);
}

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

BleuStats bleu_stats(std::string_view hyp, std::string_view ref, bool case_sensitive) {
  const auto h = case_sensitive ? tokenize_13a(hyp) : tokenize_13a(lowercase(hyp));
  const auto r = case_sensitive ? tokenize_13a(ref) : tokenize_13a(lowercase(ref));
  BleuStats s;
  s.hyp_len = h.size();
  s.ref_len = r.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto hc = word_ngrams(h, n);
    const auto rc = word_ngrams(r, n);
    for (const auto& [g, count] : hc) {
      s.totals[n - 1] += count;
      if (auto it = rc.find(g); it != rc.end()) s.matches[n - 1] += std::min(count, it->second);
    }
  }
  return s;
}

BleuDetail bleu_from_stats(const BleuStats& s) {
  BleuDetail d;
  double smooth = 1;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.totals[n] == 0) break;
    if (s.matches[n] == 0) {
      smooth *= 2;
      d.precisions[n] = 100.0 / (smooth * static_cast<double>(s.totals[n]));
    } else {
      d.precisions[n] = 100.0 * static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]);
    }
  }
  if (s.hyp_len < s.ref_len)
    d.brevity_penalty =
        s.hyp_len > 0 ? std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len)) : 0.0;
  else
    d.brevity_penalty = 1.0;
  double log_sum = 0;
  for (double p : d.precisions) {
    if (p <= 0) return d;  // a missing order zeroes the geometric mean
    log_sum += std::log(p);
  }
  d.score = d.brevity_penalty * std::exp(log_sum / 4);
  return d;
}

double bleu(std::span<const std::string> hyps, std::span<const std::string> refs, bool case_sensitive) {
  check_aligned(hyps.size(), refs.size());
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += bleu_stats(hyps[i], refs[i], case_sensitive);
  return bleu_from_stats(total).score;
}

double chrf2(std::span<const std::string> hyps, std::span<const std::string> refs) {
  check_aligned(hyps.size(), refs.size());
  constexpr std::size_t kOrder = 6;
  std::array<double, kOrder> n_hyp{}, n_ref{}, n_match{};
  auto chars = [](std::string_view text) {
    std::vector<char32_t> out;
    for (char32_t cp : utf8::decode(text))
      if (!utf8::is_space(cp)) out.push_back(cp);
    return out;
  };
  auto grams = [](const std::vector<char32_t>& cs, std::size_t n) {
    std::map<std::u32string, std::size_t> out;
    for (std::size_t i = 0; i + n <= cs.size(); ++i) ++out[std::u32string(cs.begin() + i, cs.begin() + i + n)];
    return out;
  };
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = chars(hyps[i]);
    const auto r = chars(refs[i]);
    for (std::size_t n = 1; n <= kOrder; ++n) {
      const auto hg = grams(h, n);
      const auto rg = grams(r, n);
      for (const auto& [g, c] : hg) {
        n_hyp[n - 1] += static_cast<double>(c);
        if (auto it = rg.find(g); it != rg.end()) n_match[n - 1] += static_cast<double>(std::min(c, it->second));
      }
      for (const auto& [g, c] : rg) n_ref[n - 1] += static_cast<double>(c);
    }
  }
  // Precision and recall are averaged over the orders present on both sides,
  // then combined into one F-beta score.
  constexpr double beta2 = 4.0;
  double avg_p = 0, avg_r = 0;
  int effective = 0;
  for (std::size_t n = 0; n < kOrder; ++n) {
    if (n_hyp[n] > 0) avg_p += n_match[n] / n_hyp[n];
    if (n_ref[n] > 0) avg_r += n_match[n] / n_ref[n];
    if (n_hyp[n] > 0 && n_ref[n] > 0) ++effective;
  }
  if (effective == 0) return 0.0;
  avg_p /= effective;
  avg_r /= effective;
  if (avg_p + avg_r <= 0) return 0.0;
  return 100.0 * (1 + beta2) * avg_p * avg_r / (beta2 * avg_p + avg_r);
}

std::size_t edit_distance(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1), prev[j] + 1, cur[j - 1] + 1});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace {

constexpr std::size_t kMaxShiftSize = 10;
constexpr std::size_t kMaxShiftDistance = 50;
constexpr std::size_t kMaxShiftCandidates = 1000;

using Words = std::vector<std::string>;

struct Alignment {
  std::size_t cost = 0;
  std::vector<std::size_t> align;  // reference position -> hypothesis position (+1, 0 meaning before start)
  std::vector<bool> hyp_err, ref_err;
};

// Exact Levenshtein alignment; ties prefer match/substitution, then an extra
// hypothesis word, then an extra reference word.
Alignment align_words(const Words& h, const Words& r) {
  const std::size_t H = h.size(), R = r.size();
  std::vector<std::size_t> dp((H + 1) * (R + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (R + 1) + j]; };
  for (std::size_t i = 0; i <= H; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= R; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= H; ++i)
    for (std::size_t j = 1; j <= R; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (h[i - 1] == r[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});

  Alignment a;
  a.cost = at(H, R);
  a.align.assign(R, 0);
  a.hyp_err.assign(H, false);
  a.ref_err.assign(R, false);
  std::size_t i = H, j = R;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (h[i - 1] == r[j - 1] ? 0 : 1)) {
      const bool err = h[i - 1] != r[j - 1];
      a.hyp_err[i - 1] = err;
      a.ref_err[j - 1] = err;
      a.align[j - 1] = i - 1;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      a.hyp_err[i - 1] = true;
      --i;
    } else {
      a.ref_err[j - 1] = true;
      // Aligned to the hypothesis word before the gap; encoded as -1 when none.
      a.align[j - 1] = i == 0 ? static_cast<std::size_t>(-1) : i - 1;
      --j;
    }
  }
  return a;
}

Words perform_shift(const Words& w, std::size_t start, std::size_t length, std::size_t target) {
  auto slice = [&](std::size_t from, std::size_t to) {
    from = std::min(from, w.size());
    to = std::min(std::max(to, from), w.size());
    return Words(w.begin() + static_cast<std::ptrdiff_t>(from), w.begin() + static_cast<std::ptrdiff_t>(to));
  };
  Words out;
  auto put = [&](const Words& part) { out.insert(out.end(), part.begin(), part.end()); };
  if (target < start) {
    put(slice(0, target));
    put(slice(start, start + length));
    put(slice(target, start));
    put(slice(start + length, w.size()));
  } else if (target > start + length) {
    put(slice(0, start));
    put(slice(start + length, target));
    put(slice(start, start + length));
    put(slice(target, w.size()));
  } else {
    put(slice(0, start));
    put(slice(start + length, length + target));
    put(slice(start, start + length));
    put(slice(length + target, w.size()));
  }
  return out;
}

struct ShiftCandidate {
  long gain;
  std::size_t length;
  long neg_start;
  long neg_target;
  Words words;

  bool operator>(const ShiftCandidate& o) const {
    return std::tie(gain, length, neg_start, neg_target, words) >
           std::tie(o.gain, o.length, o.neg_start, o.neg_target, o.words);
  }
};

// One round of the greedy shift search: the best shift by (edit reduction,
// length, earliest start, earliest target).
std::optional<ShiftCandidate> best_shift(const Words& h, const Words& r, std::size_t& checked) {
  const Alignment base = align_words(h, r);
  std::optional<ShiftCandidate> best;
  for (std::size_t sh = 0; sh < h.size(); ++sh) {
    for (std::size_t sr = 0; sr < r.size(); ++sr) {
      if ((sr > sh ? sr - sh : sh - sr) > kMaxShiftDistance) continue;
      for (std::size_t len = 1; len <= kMaxShiftSize && sh + len <= h.size() && sr + len <= r.size(); ++len) {
        if (h[sh + len - 1] != r[sr + len - 1]) break;
        bool hyp_wrong = false, ref_wrong = false;
        for (std::size_t k = 0; k < len; ++k) {
          hyp_wrong |= base.hyp_err[sh + k];
          ref_wrong |= base.ref_err[sr + k];
        }
        if (!hyp_wrong || !ref_wrong) continue;
        const std::size_t a = base.align[sr];
        if (a != static_cast<std::size_t>(-1) && a >= sh && a < sh + len) continue;
        long prev = -2;
        for (long offset = -1; offset < static_cast<long>(len); ++offset) {
          long idx;
          if (static_cast<long>(sr) + offset == -1) {
            idx = 0;
          } else {
            const std::size_t pos = sr + static_cast<std::size_t>(offset);
            if (pos >= r.size()) break;
            const std::size_t al = base.align[pos];
            idx = al == static_cast<std::size_t>(-1) ? 0 : static_cast<long>(al) + 1;
          }
          if (idx == prev) continue;
          prev = idx;
          Words shifted = perform_shift(h, sh, len, static_cast<std::size_t>(idx));
          const long gain = static_cast<long>(base.cost) - static_cast<long>(align_words(shifted, r).cost);
          ShiftCandidate cand{gain, len, -static_cast<long>(sh), -idx, std::move(shifted)};
          ++checked;
          if (!best || cand > *best) best = std::move(cand);
        }
        if (checked >= kMaxShiftCandidates) return best;
      }
    }
  }
  return best;
}

}  // namespace

TerCounts ter_counts(std::string_view hyp, std::string_view ref, const TerOptions& options) {
  Words h = split_words(options.case_sensitive ? std::string(hyp) : lowercase(hyp));
  const Words r = split_words(options.case_sensitive ? std::string(ref) : lowercase(ref));
  TerCounts out;
  out.ref_words = r.size();
  if (r.empty()) {
    out.edits = h.size();
    return out;
  }
  std::size_t shifts = 0;
  if (options.shifts) {
    std::size_t checked = 0;
    for (;;) {
      auto cand = best_shift(h, r, checked);
      if (checked >= kMaxShiftCandidates) break;
      if (!cand || cand->gain <= 0) break;
      ++shifts;
      h = std::move(cand->words);
    }
  }
  out.edits = shifts + edit_distance(h, r);
  return out;
}

double ter(std::span<const std::string> hyps, std::span<const std::string> refs, const TerOptions& options) {
  check_aligned(hyps.size(), refs.size());
  std::size_t edits = 0, words = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto c = ter_counts(hyps[i], refs[i], options);
    if (c.ref_words == 0) throw FormatError("TER reference " + std::to_string(i + 1) + " is empty");
    edits += c.edits;
    words += c.ref_words;
  }
  return 100.0 * static_cast<double>(edits) / static_cast<double>(words);
}

double dist_n(std::span<const std::string> texts, int n) {
  if (n < 1) throw ConfigError("dist_n: n must be at least 1");
  if (texts.empty()) throw DimensionError("dist_n needs at least one text");
  std::unordered_set<std::string> distinct;
  std::size_t total = 0;
  for (const auto& t : texts)
    for (const auto& [g, c] : word_ngrams(split_words(t), static_cast<std::size_t>(n))) {
      distinct.insert(g);
      total += c;
    }
  return total == 0 ? 0.0 : static_cast<double>(distinct.size()) / static_cast<double>(total);
}

Significance bootstrap_significance(std::span<const std::string> hyps_a, std::span<const std::string> hyps_b,
                                    std::span<const std::string> refs, std::size_t iterations, std::uint64_t seed,
                                    bool case_sensitive) {
  check_aligned(hyps_a.size(), refs.size());
  check_aligned(hyps_b.size(), refs.size());
  if (iterations == 0) throw ConfigError("bootstrap needs at least one iteration");
  const std::size_t n = refs.size();
  std::vector<BleuStats> sa(n), sb(n);
  for (std::size_t i = 0; i < n; ++i) {
    sa[i] = bleu_stats(hyps_a[i], refs[i], case_sensitive);
    sb[i] = bleu_stats(hyps_b[i], refs[i], case_sensitive);
  }
  std::mt19937_64 rng(seed);
  double not_better = 0;
  for (std::size_t it = 0; it < iterations; ++it) {
    BleuStats a, b;
    for (std::size_t k = 0; k < n; ++k) {
      const auto pick = static_cast<std::size_t>(uniform_below(rng, n));
      a += sa[pick];
      b += sb[pick];
    }
    const double x = bleu_from_stats(a).score, y = bleu_from_stats(b).score;
    if (y < x) not_better += 1;
    else if (y == x) not_better += 0.5;
  }
  Significance s;
  s.iterations = iterations;
  s.p_value = not_better / static_cast<double>(iterations);
  if (iterations < 100)
    s.warning = "only " + std::to_string(iterations) + " bootstrap iterations; p-value is unreliable";
  return s;
}

MetricReport evaluate(std::span<const std::string> hyps, std::span<const std::string> refs,
                      const EvaluateOptions& options) {
  check_aligned(hyps.size(), refs.size());
  MetricReport r;
  r.n = hyps.size();
  r.case_sensitive = options.case_sensitive;
  for (const auto& m : options.metrics) {
    if (m == "bleu") r.bleu = bleu(hyps, refs, options.case_sensitive);
    else if (m == "chrf2" || m == "chrf") r.chrf2 = chrf2(hyps, refs);
    else if (m == "ter") r.ter = ter(hyps, refs, TerOptions{true, options.case_sensitive});
    else if (m == "dist") {
      r.dist1 = dist_n(hyps, 1);
      r.dist2 = dist_n(hyps, 2);
    } else if (m == "dist1") r.dist1 = dist_n(hyps, 1);
    else if (m == "dist2") r.dist2 = dist_n(hyps, 2);
    else throw ConfigError("unknown metric '" + m + "'");
  }
  if (!options.baseline_hyps.empty()) {
    r.significance = bootstrap_significance(options.baseline_hyps, hyps, refs, options.bootstrap_iterations,
                                            options.seed, options.case_sensitive);
    r.baseline = options.baseline_name;
  }
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["n"] = n;
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) j[k] = *v;
  };
  put("bleu", bleu);
  put("chrf2", chrf2);
  put("ter", ter);
  put("dist1", dist1);
  put("dist2", dist2);
  j["bleu_signature"] = fmt::format("case.{}+numrefs.1+smooth.exp+tok.13a", case_sensitive ? "mixed" : "lc");
  if (dist1 || dist2) j["dist_normalization"] = "ngram_count";
  if (significance) {
    nlohmann::ordered_json s;
    s["baseline"] = baseline;
    s["p_value"] = significance->p_value;
    s["iterations"] = significance->iterations;
    if (!significance->warning.empty()) s["warning"] = significance->warning;
    j["significance"] = s;
  }
  return j.dump();
}

std::string MetricReport::to_table() const {
  std::ostringstream out;
  auto row = [&](const char* name, const std::optional<double>& v, int digits) {
    if (v) out << fmt::format("{:<8}{:>10.{}f}\n", name, *v, digits);
  };
  out << fmt::format("{:<8}{:>10}\n", "n", n);
  row("BLEU", bleu, 2);
  row("chrF2", chrf2, 2);
  row("TER", ter, 2);
  row("Dist-1", dist1, 4);
  row("Dist-2", dist2, 4);
  if (significance) out << fmt::format("{:<8}{:>10.4f}  vs {}\n", "p", significance->p_value, baseline);
  return out.str();
}

}  // namespace unimt
