#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "unimt/errors.hpp"
#include "unimt/vocab.hpp"

using namespace unimt;

namespace {

const std::string kPaperSource = "以上 就是 出门 的 理由 。";

std::vector<std::string> small_corpus() {
  return {kPaperSource, "All these were the reasons to go out.",
          "打 起 点 精神 ， 对 狗狗纳纳 说 ： 妈妈 带 你 出门 。",
          "Get a suit, buy nutritional grain, pay my bills, and buy sashimi and snacks for Nana.",
          "yǐshàng jiùshì chūmén de lǐyóu", "Die Gründe, um auszugehen."};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("first merge is the most frequent byte pair") {
  const std::vector<std::string> corpus = {"aa aa aa"};
  // Oracle: count adjacent byte pairs inside whitespace-delimited chunks,
  // where each chunk after the first carries its leading space.
  std::map<std::pair<char, char>, int> counts;
  std::string chunk;
  auto flush = [&] {
    for (std::size_t i = 0; i + 1 < chunk.size(); ++i) ++counts[{chunk[i], chunk[i + 1]}];
  };
  for (char c : corpus[0]) {
    if (c == ' ') {
      flush();
      chunk = " ";
    } else {
      chunk += c;
    }
  }
  flush();
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it)
    if (it->second > best->second) best = it;
  REQUIRE(best->first == std::pair<char, char>{'a', 'a'});

  const Vocabulary v = Vocabulary::build(corpus, 300);
  REQUIRE_FALSE(v.merges().empty());
  CHECK(v.merges()[0] == std::pair<std::string, std::string>{"a", "a"});
  CHECK(v.find("aa").has_value());
  CHECK(v.size() <= 300);
}

TEST_CASE("build rejects empty corpora and undersized vocabularies") {
  const std::vector<std::string> empty;
  CHECK_THROWS_AS(Vocabulary::build(empty, 300), BuildError);
  const std::vector<std::string> blank = {"", "   "};
  CHECK_THROWS_AS(Vocabulary::build(blank, 300), BuildError);
  const std::vector<std::string> corpus = {"abc"};
  CHECK_THROWS_AS(Vocabulary::build(corpus, 100), BuildError);
  CHECK_THROWS_AS(Vocabulary::build(corpus, SpecialTokens::defaults().reserved_block().size() + 256),
                  BuildError);
}

TEST_CASE("reserved ids are stable across corpora") {
  const std::vector<std::string> a = {"aa aa aa"};
  const auto b = small_corpus();
  const Vocabulary va = Vocabulary::build(a, 300);
  const Vocabulary vb = Vocabulary::build(b, 400);
  CHECK(va.pad_id() == 0);
  CHECK(vb.pad_id() == 0);
  CHECK(va.reserved_size() == vb.reserved_size());
  for (TaskKind t : kAllTasks) CHECK(va.prompt_id(t) == vb.prompt_id(t));
  for (std::size_t i = 0; i < va.reserved_size(); ++i) {
    CHECK(va.entries()[i] == vb.entries()[i]);
    CHECK(va.is_control(static_cast<int>(i)));
  }
}

TEST_CASE("control tokens are atomic") {
  const auto corpus = small_corpus();
  const Vocabulary v = Vocabulary::build(corpus, 400);
  const auto ids = v.encode("<SentMT> <bos> hi <eos>");
  REQUIRE(ids.size() >= 4);
  CHECK(ids.front() == v.prompt_id(TaskKind::SentMT));
  CHECK(ids[1] == v.bos_id());
  CHECK(ids.back() == v.eos_id());
  const std::vector<int> middle(ids.begin() + 2, ids.end() - 1);
  CHECK(v.decode(middle) == "hi");

  const auto& sp = v.specials();
  for (TaskKind t : kAllTasks) {
    const auto one = v.encode(sp.prompt_tokens.at(t));
    REQUIRE(one.size() == 1);
    CHECK(one[0] == v.prompt_id(t));
    CHECK(v.prompt_task(one[0]) == t);
  }
  for (const std::string& s : {sp.bos, sp.eos, sp.ctx, sp.sep, sp.null, sp.pad, sp.unk}) {
    CHECK(v.encode(s).size() == 1);
  }
  // Prompt-like text that is not a control surface is ordinary text.
  CHECK(v.encode("<SentMTx>").size() > 1);
  CHECK(v.encode_plain("<SentMT>").size() > 1);
  // NULL only matches as a whole word.
  CHECK(v.encode("NULLS").size() > 1);
  CHECK(v.encode("NULL") == std::vector<int>{v.null_id()});
}

TEST_CASE("encode and decode basics") {
  const auto corpus = small_corpus();
  const Vocabulary v = Vocabulary::build(corpus, 400);
  CHECK(v.encode("").empty());
  CHECK(v.decode(std::vector<int>{}).empty());
  CHECK(v.decode(v.encode(kPaperSource)) == kPaperSource);

  auto ids = v.encode("hello world");
  std::vector<int> padded = {v.pad_id()};
  padded.insert(padded.end(), ids.begin(), ids.end());
  padded.push_back(v.pad_id());
  padded.push_back(v.pad_id());
  CHECK(v.decode(padded) == "hello world");

  std::vector<int> bad = {v.bos_id(), v.eos_id(), static_cast<int>(v.size())};
  try {
    v.decode(bad);
    FAIL("expected RangeError");
  } catch (const RangeError& e) {
    CHECK(e.position() == 2);
  }
  bad = {-1};
  CHECK_THROWS_AS(v.decode(bad), RangeError);
}

TEST_CASE("round trip holds on random normalized text") {
  const auto corpus = small_corpus();
  const Vocabulary v = Vocabulary::build(corpus, 400);
  const std::vector<std::string> alphabet = {"a", "e", "th", "中", "文", "。", "ü", "ǐ", "ß", ",",
                                             ".", ":", "<", ">", "'", "\"", "1", "Z", "😀", "ā"};
  std::mt19937 rng(11);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::uniform_int_distribution<int> words(1, 8), letters(1, 6);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string text;
    for (int w = words(rng); w > 0; --w) {
      if (!text.empty()) text += ' ';
      for (int c = letters(rng); c > 0; --c) text += alphabet[pick(rng)];
    }
    const auto ids = v.encode(text);
    CHECK(v.decode(ids) == text);
    CHECK(v.decode(v.encode_plain(text)) == text);
  }
}

TEST_CASE("round trip holds with control tokens between words") {
  const auto corpus = small_corpus();
  const Vocabulary v = Vocabulary::build(corpus, 400);
  for (const std::string text :
       {"<SentMT> <bos> 以上 就是 出门 的 理由 。 <eos> <context> NULL",
        "<DocMT> <bos> a b <eos> <context> x <sep> y <sep> z", "<unk> tail"}) {
    CHECK(v.decode(v.encode(text)) == text);
  }
  const std::string with_prefix = "<SentMT>: All these were the reasons to go out.";
  const auto ids = v.encode(with_prefix);
  REQUIRE(ids.size() > 2);
  CHECK(ids[0] == v.prompt_id(TaskKind::SentMT));
  CHECK(ids[1] == v.prefix_sep_id());
  CHECK(v.decode(ids) == with_prefix);
}

TEST_CASE("byte fallback disabled maps unseen bytes to unk") {
  const std::vector<std::string> corpus = {"abc abc"};
  VocabBuildOptions opts;
  opts.byte_fallback = false;
  const Vocabulary v = Vocabulary::build(corpus, 64, SpecialTokens::defaults(), opts);
  const auto ids = v.encode("abz");
  CHECK(std::find(ids.begin(), ids.end(), v.unk_id()) != ids.end());
  CHECK(v.encode("abc") != ids);
}

TEST_CASE("vocabulary structure invariants") {
  const auto corpus = small_corpus();
  const Vocabulary v = Vocabulary::build(corpus, 500);
  std::set<std::string> controls, pieces;
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto& bucket = i < v.reserved_size() ? controls : pieces;
    CHECK(bucket.insert(v.entries()[i]).second);
  }
  for (const auto& [l, r] : v.merges()) CHECK(pieces.count(l + r) == 1);
  CHECK(v.reserved_size() == SpecialTokens::defaults().reserved_block().size());
}

TEST_CASE("builds are deterministic and files round-trip") {
  const auto corpus = small_corpus();
  const Vocabulary a = Vocabulary::build(corpus, 450);
  const Vocabulary b = Vocabulary::build(corpus, 450);
  CHECK(a.to_json() == b.to_json());

  const auto dir = std::filesystem::temp_directory_path() / "unimt_test_vocab";
  std::filesystem::create_directories(dir);
  a.save((dir / "a.json").string(), "abc123");
  b.save((dir / "b.json").string(), "abc123");
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));

  const Vocabulary loaded = Vocabulary::load((dir / "a.json").string());
  CHECK(loaded == a);
  for (const auto& line : corpus) CHECK(loaded.encode(line) == a.encode(line));
  CHECK_THROWS_AS(Vocabulary::load((dir / "missing.json").string()), MissingFileError);
  CHECK_THROWS_AS(Vocabulary::from_json(R"({"format_version": 99})"), FormatError);
}

TEST_CASE("per-domain DsMT tokens are reserved when configured") {
  SpecialTokens sp = SpecialTokens::defaults();
  sp.dsmt_domains = {"law", "medical"};
  const auto corpus = small_corpus();
  const Vocabulary v = Vocabulary::build(corpus, 500, sp);
  auto law = v.dsmt_domain_id("law");
  REQUIRE(law.has_value());
  CHECK(v.is_control(*law));
  CHECK(v.prompt_task(*law) == TaskKind::DsMT);
  CHECK(v.encode("<DsMT-law>") == std::vector<int>{*law});
  CHECK_FALSE(v.dsmt_domain_id("koran").has_value());
}
