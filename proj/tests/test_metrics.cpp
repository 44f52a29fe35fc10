#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles/bootstrap_enumeration.hpp"
#include "oracles/edit_graph.hpp"
#include "oracles/ngram_bruteforce.hpp"
#include "unimt/errors.hpp"
#include "unimt/metrics.hpp"

using namespace unimt;

namespace {

using Texts = std::vector<std::string>;

std::string random_sentence(std::mt19937_64& rng, const Texts& words, int min_len, int max_len) {
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
  std::string s;
  for (int i = len(rng); i > 0; --i) {
    if (!s.empty()) s += ' ';
    s += words[pick(rng)];
  }
  return s;
}

std::string spaced(const std::string& letters) {
  std::string s;
  for (char c : letters) {
    if (!s.empty()) s += ' ';
    s += c;
  }
  return s;
}

}  // namespace

TEST_CASE("13a tokenization") {
  using T = std::vector<std::string>;
  CHECK(tokenize_13a("Hello, world!") == T{"Hello", ",", "world", "!"});
  CHECK(tokenize_13a("It costs $3.50, ok.") == T{"It", "costs", "$", "3.50", ",", "ok", "."});
  CHECK(tokenize_13a("1990-2000 well-known") == T{"1990", "-", "2000", "well-known"});
  CHECK(tokenize_13a("&quot;A&amp;B&quot;") == T{"\"", "A", "&", "B", "\""});
  CHECK(tokenize_13a("e.g. x") == T{"e", ".", "g", ".", "x"});
  CHECK(tokenize_13a("1,000.5 (approx)") == T{"1,000.5", "(", "approx", ")"});
  CHECK(tokenize_13a("a<skipped>b") == T{"ab"});
  CHECK(tokenize_13a("").empty());
}

TEST_CASE("BLEU basics") {
  const Texts refs = {"the cat is on the mat", "there is a cat on the mat ."};
  CHECK(bleu(refs, refs) == doctest::Approx(100.0));
  const BleuDetail d = bleu_from_stats(bleu_stats("the the the the the the the", "the cat is on the mat"));
  CHECK(d.precisions[0] == doctest::Approx(100.0 * 2 / 7));
  CHECK(d.brevity_penalty == 1.0);
  CHECK_THROWS_AS(bleu(Texts{"a"}, Texts{"a", "b"}), DimensionError);
  CHECK(bleu(Texts{""}, Texts{"a b c d"}) == 0.0);
  // Short hypothesis: brevity penalty exp(1 - r/h).
  const BleuDetail s = bleu_from_stats(bleu_stats("a b c d", "a b c d e f g h"));
  CHECK(s.brevity_penalty == doctest::Approx(std::exp(1.0 - 2.0)));
}

TEST_CASE("BLEU equals a brute-force n-gram count on random corpora") {
  std::mt19937_64 rng(123);
  const Texts words = {"a", "b", "c", "d", "e", "f"};
  std::uniform_int_distribution<int> segs(1, 5);
  for (int corpus = 0; corpus < 50; ++corpus) {
    Texts hyps, refs;
    for (int i = segs(rng); i > 0; --i) {
      hyps.push_back(random_sentence(rng, words, 0, 9));
      refs.push_back(random_sentence(rng, words, 1, 9));
    }
    CHECK(std::abs(bleu(hyps, refs) - oracle::bleu(hyps, refs)) <= 1e-6);
  }
}

TEST_CASE("BLEU invariances") {
  std::mt19937_64 rng(9);
  const Texts words = {"Red", "red", "blue", "Green", "the", "a"};
  Texts hyps, refs;
  for (int i = 0; i < 12; ++i) {
    hyps.push_back(random_sentence(rng, words, 3, 8));
    refs.push_back(random_sentence(rng, words, 3, 8));
  }
  const double base = bleu(hyps, refs);
  std::vector<std::size_t> perm(hyps.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Texts ph, pr;
  for (auto i : perm) {
    ph.push_back(hyps[i]);
    pr.push_back(refs[i]);
  }
  CHECK(bleu(ph, pr) == doctest::Approx(base).epsilon(1e-12));
  CHECK(chrf2(ph, pr) == doctest::Approx(chrf2(hyps, refs)).epsilon(1e-12));
  CHECK(ter(ph, pr) == doctest::Approx(ter(hyps, refs)).epsilon(1e-12));

  Texts upper;
  for (const auto& h : hyps) {
    std::string u = h;
    std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
    upper.push_back(u);
  }
  CHECK(bleu(upper, refs, false) == doctest::Approx(bleu(hyps, refs, false)).epsilon(1e-12));
  CHECK(bleu(Texts{"ÉCOLE Été"}, Texts{"école été"}, false) == doctest::Approx(0.0));  // too short for 4-grams
  CHECK(bleu(Texts{"ÉCOLE Été x y"}, Texts{"école été x y"}, false) == doctest::Approx(100.0));
  CHECK(bleu(hyps, refs) <= 100.0);
}

TEST_CASE("chrF2 hand-computed cases") {
  // Orders 1..3 present: P = R = (2/3 + 1/2 + 0) / 3 = 7/18.
  CHECK(chrf2(Texts{"abc"}, Texts{"abd"}) == doctest::Approx(100.0 * 7 / 18).epsilon(1e-12));
  // Orders 1..2 present: P = (2/3 + 1/2 + 0) / 2, R = 1, F2 = 5PR / (4P + R) = 0.875.
  CHECK(chrf2(Texts{"aab"}, Texts{"ab"}) == doctest::Approx(87.5).epsilon(1e-12));
  // Whitespace is ignored.
  CHECK(chrf2(Texts{"ab cd"}, Texts{"abcd"}) == doctest::Approx(100.0));
  CHECK(chrf2(Texts{"abc"}, Texts{"xyz"}) == 0.0);
  CHECK(chrf2(Texts{"日本語"}, Texts{"日本語"}) == doctest::Approx(100.0));
}

TEST_CASE("TER examples") {
  CHECK(ter(Texts{"a b c d e"}, Texts{"a b c d e"}) == 0.0);
  CHECK(ter(Texts{"a b x d e"}, Texts{"a b c d e"}) == doctest::Approx(20.0));
  CHECK(ter(Texts{""}, Texts{"a b c d"}) == doctest::Approx(100.0));
  // One block shift instead of a deletion plus an insertion.
  CHECK(ter(Texts{"b c a"}, Texts{"a b c"}) == doctest::Approx(100.0 / 3));
  CHECK(ter(Texts{"b c a"}, Texts{"a b c"}, TerOptions{false, false}) == doctest::Approx(200.0 / 3));
  CHECK(ter(Texts{"d e f a b c"}, Texts{"a b c d e f"}) == doctest::Approx(100.0 / 6));
  CHECK(ter(Texts{"A B"}, Texts{"a b"}) == 0.0);
  CHECK(ter(Texts{"A B"}, Texts{"a b"}, TerOptions{true, true}) == doctest::Approx(100.0));
  CHECK_THROWS_AS(ter(Texts{"a"}, Texts{""}), FormatError);
  // Corpus TER pools edits and reference words.
  CHECK(ter(Texts{"a b x d e", "p q"}, Texts{"a b c d e", "p q r"}) == doctest::Approx(200.0 / 8));
}

TEST_CASE("TER without shifts equals exhaustive edit distance") {
  const oracle::EditGraph graph("abc", 6);
  const auto& nodes = graph.nodes();
  std::size_t pairs = 0, mismatches = 0;
  for (const auto& ref : nodes) {
    const auto dist = graph.distances(ref);
    const std::string r = spaced(ref);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const TerCounts c = ter_counts(spaced(nodes[i]), r, TerOptions{false, true});
      if (c.edits != static_cast<std::size_t>(dist[i]) || c.ref_words != ref.size()) ++mismatches;
      ++pairs;
    }
  }
  CHECK(pairs == 1093u * 1093u);
  CHECK(mismatches == 0);
}

TEST_CASE("TER with shifts never exceeds TER without") {
  std::mt19937_64 rng(31);
  const Texts words = {"a", "b", "c", "d"};
  for (int i = 0; i < 300; ++i) {
    const std::string h = random_sentence(rng, words, 0, 8), r = random_sentence(rng, words, 1, 8);
    CHECK(ter_counts(h, r).edits <= ter_counts(h, r, TerOptions{false, false}).edits);
  }
}

TEST_CASE("Dist-n") {
  CHECK(dist_n(Texts{"a b a"}, 1) == doctest::Approx(2.0 / 3));
  CHECK(dist_n(Texts{"a b c d"}, 1) == 1.0);
  CHECK(dist_n(Texts{"word"}, 2) == 0.0);
  CHECK(dist_n(Texts{"a b", "a b"}, 2) == doctest::Approx(0.5));
  CHECK_THROWS_AS(dist_n(Texts{}, 1), DimensionError);

  std::mt19937_64 rng(77);
  const Texts words = {"x", "y", "z", "w", "v"};
  for (int i = 0; i < 100; ++i) {
    Texts texts;
    for (int k = static_cast<int>(rng() % 4) + 1; k > 0; --k) texts.push_back(random_sentence(rng, words, 0, 10));
    CHECK(dist_n(texts, 1) == doctest::Approx(oracle::dist(texts, 1)).epsilon(1e-12));
    CHECK(dist_n(texts, 2) == doctest::Approx(oracle::dist(texts, 2)).epsilon(1e-12));
    // Appending a repeated text never increases diversity.
    Texts more = texts;
    more.push_back(texts.front());
    CHECK(dist_n(more, 1) <= dist_n(texts, 1) + 1e-12);
    CHECK(dist_n(more, 2) <= dist_n(texts, 2) + 1e-12);
  }
}

TEST_CASE("paired bootstrap edge cases") {
  const Texts refs = {"a b c d e", "f g h i j", "k l m n o"};
  const Texts good = refs;
  const Texts bad = {"a x c y e", "f g z i q", "k w m n v"};
  const auto same = bootstrap_significance(bad, bad, refs, 200, 4);
  CHECK(same.p_value == 0.5);
  CHECK(same.warning.empty());
  const auto dominant = bootstrap_significance(bad, good, refs, 500, 4);
  CHECK(dominant.p_value <= 1.0 / 500);
  CHECK_FALSE(bootstrap_significance(bad, good, refs, 50, 4).warning.empty());
  CHECK(bootstrap_significance(bad, good, refs, 300, 8).p_value ==
        bootstrap_significance(bad, good, refs, 300, 8).p_value);
}

TEST_CASE("paired bootstrap matches exact enumeration over all resamples") {
  const Texts refs = {"a b c d e f", "g h i j k l", "m n o p q r", "s t u v w x", "a c e g i k",
                      "b d f h j l", "m o q s u w", "n p r t v x", "a b c g h i", "d e f j k l"};
  const Texts sys_a = {"a b c d e f", "g h x j k l", "m n o p y r", "s t u v w x", "a c e z i k",
                       "b d f h j l", "m q o s u w", "n p r t v x", "a b y g h i", "d e f j k l"};
  const Texts sys_b = {"a b c d x f", "g h i j k l", "m n o p q r", "s t u z w x", "a c e g i k",
                       "b d f y j l", "m o q s u w", "n p r x v t", "a b c g h i", "d e y j k l"};
  std::vector<BleuStats> sa, sb;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    sa.push_back(bleu_stats(sys_a[i], refs[i]));
    sb.push_back(bleu_stats(sys_b[i], refs[i]));
  }
  auto compare = [&](const std::vector<int>& counts) {
    BleuStats a, b;
    for (std::size_t i = 0; i < counts.size(); ++i)
      for (int k = 0; k < counts[i]; ++k) {
        a += sa[i];
        b += sb[i];
      }
    const double x = bleu_from_stats(a).score, y = bleu_from_stats(b).score;
    return y < x ? 1.0 : (y == x ? 0.5 : 0.0);
  };
  std::size_t compositions = 0;
  const double exact = oracle::exact_bootstrap_p(refs.size(), compare, &compositions);
  CHECK(compositions == 92378);
  REQUIRE(exact > 0.05);
  REQUIRE(exact < 0.95);
  const std::size_t iterations = 4000;
  const double p = bootstrap_significance(sys_a, sys_b, refs, iterations, 2024).p_value;
  const double sigma = std::sqrt(exact * (1 - exact) / static_cast<double>(iterations));
  CHECK(std::abs(p - exact) <= 3 * sigma);
}

TEST_CASE("evaluation report") {
  const Texts refs = {"the cat sat on the mat", "a dog ran far away"};
  EvaluateOptions opts;
  const MetricReport r = evaluate(refs, refs, opts);
  CHECK(*r.bleu == doctest::Approx(100.0));
  CHECK(*r.chrf2 == doctest::Approx(100.0));
  CHECK(*r.ter == 0.0);
  CHECK(*r.dist1 == doctest::Approx(10.0 / 11));  // "the" repeats
  CHECK(r.n == 2);
  const std::string json = r.to_json();
  CHECK(json.find("\"bleu\":100.0") != std::string::npos);
  CHECK(json.find("tok.13a") != std::string::npos);
  CHECK(r.to_table().find("BLEU") != std::string::npos);
  opts.metrics = {"bleu", "nope"};
  CHECK_THROWS_AS(evaluate(refs, refs, opts), ConfigError);
  opts.metrics = {"bleu"};
  opts.baseline_hyps = {"x", "y"};
  opts.baseline_name = "base";
  const MetricReport s = evaluate(refs, refs, opts);
  REQUIRE(s.significance);
  CHECK(s.significance->p_value <= 1e-3);
  CHECK_FALSE(s.chrf2.has_value());
}
