#include "unimt/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "unimt/errors.hpp"
#include "unimt/utf8.hpp"

namespace unimt {

using nlohmann::json;

namespace {

// Printable stand-ins for raw bytes so pieces survive a JSON round trip
// (the usual byte-level BPE convention).
const std::array<char32_t, 256>& byte_to_unicode() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    std::array<bool, 256> printable{};
    for (int b = 33; b <= 126; ++b) printable[b] = true;
    for (int b = 161; b <= 172; ++b) printable[b] = true;
    for (int b = 174; b <= 255; ++b) printable[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) t[b] = printable[b] ? static_cast<char32_t>(b) : next++;
    return t;
  }();
  return table;
}

std::string piece_to_display(std::string_view bytes) {
  std::string out;
  for (unsigned char b : bytes) utf8::append(out, byte_to_unicode()[b]);
  return out;
}

std::string display_to_piece(std::string_view display) {
  static const std::map<char32_t, unsigned char> inverse = [] {
    std::map<char32_t, unsigned char> m;
    for (int b = 0; b < 256; ++b) m[byte_to_unicode()[b]] = static_cast<unsigned char>(b);
    return m;
  }();
  std::string out;
  for (char32_t cp : utf8::decode(display)) {
    auto it = inverse.find(cp);
    if (it == inverse.end()) throw FormatError("vocabulary piece has an unmapped character");
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

constexpr std::array<std::string_view, 7> kDescriptive = {
    "<translate the sentence>",         "<translate the document>",
    "<translate the chat>",             "<translate the personalized sentence>",
    "<translate the multimodal sentence>", "<translate the domain-specific sentence>",
    "<translate the aphorism>"};

struct Segment {
  std::string_view text;  // empty for controls
  int control = -1;
};

}  // namespace

SpecialTokens SpecialTokens::defaults() {
  SpecialTokens s;
  for (TaskKind t : kAllTasks) {
    s.prompt_tokens[t] = "<" + std::string(to_string(t)) + ">";
    s.descriptive_prompts[t] = std::string(kDescriptive[static_cast<std::size_t>(t)]);
  }
  return s;
}

std::string SpecialTokens::dsmt_domain_token(std::string_view domain) const {
  return "<DsMT-" + std::string(domain) + ">";
}

std::vector<std::string> SpecialTokens::reserved_block() const {
  std::vector<std::string> out = {pad, unk, bos, eos, ctx, sep, null, target_prefix_sep};
  for (TaskKind t : kAllTasks) out.push_back(prompt_tokens.at(t));
  out.push_back(descriptive_ctx);
  for (TaskKind t : kAllTasks) out.push_back(descriptive_prompts.at(t));
  for (const auto& d : dsmt_domains) out.push_back(dsmt_domain_token(d));
  return out;
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    std::size_t start = i;
    if (text[i] == ' ') {
      ++i;
      if (i == n || text[i] == ' ') {
        chunks.push_back(text.substr(start, 1));
        continue;
      }
    }
    while (i < n && text[i] != ' ') ++i;
    chunks.push_back(text.substr(start, i - start));
  }
  return chunks;
}

void Vocabulary::index() {
  const auto block = specials_.reserved_block();
  reserved_ = block.size();
  control_ids_.clear();
  angle_controls_.clear();
  for (std::size_t i = 0; i < block.size(); ++i) {
    if (!control_ids_.emplace(block[i], static_cast<int>(i)).second) {
      throw BuildError("duplicate control token '" + block[i] + "'");
    }
  }
  pad_ = 0;
  unk_ = 1;
  bos_ = 2;
  eos_ = 3;
  ctx_ = 4;
  sep_ = 5;
  null_ = 6;
  prefix_sep_ = 7;
  prompt_task_.assign(reserved_, std::nullopt);
  for (std::size_t i = 0; i < kAllTasks.size(); ++i) {
    prompt_[i] = static_cast<int>(8 + i);
    descriptive_prompt_[i] = static_cast<int>(16 + i);
    prompt_task_[prompt_[i]] = kAllTasks[i];
    prompt_task_[descriptive_prompt_[i]] = kAllTasks[i];
  }
  descriptive_ctx_ = 15;
  for (std::size_t i = 23; i < reserved_; ++i) prompt_task_[i] = TaskKind::DsMT;

  for (const auto& [surface, id] : control_ids_) {
    if (!surface.empty() && surface.front() == '<') angle_controls_.emplace_back(surface, id);
  }
  std::sort(angle_controls_.begin(), angle_controls_.end(), [](const auto& a, const auto& b) {
    return a.first.size() != b.first.size() ? a.first.size() > b.first.size() : a.first < b.first;
  });

  piece_ids_.clear();
  byte_ids_.fill(-1);
  for (std::size_t i = reserved_; i < entries_.size(); ++i) {
    if (!piece_ids_.emplace(entries_[i], static_cast<int>(i)).second) {
      throw BuildError("duplicate vocabulary piece");
    }
    if (entries_[i].size() == 1) byte_ids_[static_cast<unsigned char>(entries_[i][0])] = static_cast<int>(i);
  }
  merge_rank_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto l = piece_ids_.find(merges_[r].first);
    const auto rr = piece_ids_.find(merges_[r].second);
    const auto out = piece_ids_.find(merges_[r].first + merges_[r].second);
    if (l == piece_ids_.end() || rr == piece_ids_.end() || out == piece_ids_.end()) {
      throw BuildError("merge rule refers to a missing piece");
    }
    merge_rank_.emplace(std::make_pair(l->second, rr->second),
                        std::make_pair(static_cast<int>(r), out->second));
  }
}

namespace {

// Splits text around control tokens. One space adjacent to a control token
// belongs to the control token's boundary and is absorbed.
template <typename Vocab>
std::vector<Segment> segment_controls(const Vocab& v, std::string_view text,
                                      const std::vector<std::pair<std::string, int>>& angle,
                                      const std::string& null_surface) {
  std::vector<Segment> out;
  const std::size_t n = text.size();
  std::size_t i = 0;
  std::size_t text_start = 0;
  std::size_t control_end = std::string_view::npos;
  std::size_t prompt_end = std::string_view::npos;
  auto flush = [&](std::size_t end, bool absorb_space) {
    std::string_view span = text.substr(text_start, end - text_start);
    if (absorb_space && !span.empty() && span.back() == ' ') span.remove_suffix(1);
    if (!span.empty()) out.push_back({span, -1});
  };
  while (i < n) {
    int matched = -1;
    std::size_t len = 0;
    if (text[i] == '<') {
      for (const auto& [surface, id] : angle) {
        if (text.substr(i).starts_with(surface)) {
          matched = id;
          len = surface.size();
          break;
        }
      }
    } else if (i == prompt_end && text[i] == ':') {
      matched = v.prefix_sep_id();
      len = 1;
    } else if (!null_surface.empty() && text.substr(i).starts_with(null_surface)) {
      const std::size_t end = i + null_surface.size();
      const bool before = i == 0 || text[i - 1] == ' ' || i == control_end;
      const bool after = end == n || text[end] == ' ' || text[end] == '<';
      if (before && after) {
        matched = v.null_id();
        len = null_surface.size();
      }
    }
    if (matched < 0) {
      ++i;
      continue;
    }
    flush(i, matched != v.prefix_sep_id());
    out.push_back({{}, matched});
    i += len;
    control_end = i;
    prompt_end = v.prompt_task(matched) ? i : std::string_view::npos;
    if (i < n && text[i] == ' ') ++i;
    text_start = i;
  }
  flush(n, false);
  return out;
}

}  // namespace

Vocabulary Vocabulary::build(std::span<const std::string> corpus, std::size_t vocab_size,
                             const SpecialTokens& specials, const VocabBuildOptions& options) {
  Vocabulary v;
  v.specials_ = specials;
  v.byte_fallback_ = options.byte_fallback;
  v.entries_ = specials.reserved_block();
  v.index();

  // Word (chunk) frequencies, ignoring control tokens.
  std::map<std::string, std::int64_t> chunk_freq;
  std::array<bool, 256> seen_bytes{};
  bool any_text = false;
  for (const auto& line : corpus) {
    for (const auto& seg : segment_controls(v, line, v.angle_controls_, specials.null)) {
      if (seg.control >= 0) continue;
      for (auto chunk : pretokenize(seg.text)) {
        ++chunk_freq[std::string(chunk)];
        for (unsigned char b : chunk) {
          seen_bytes[b] = true;
          if (b != ' ') any_text = true;
        }
      }
    }
  }
  if (!any_text) throw BuildError("cannot build a vocabulary from an empty corpus");

  std::size_t alphabet = 0;
  for (int b = 0; b < 256; ++b) {
    if (options.byte_fallback || seen_bytes[b]) {
      v.entries_.push_back(std::string(1, static_cast<char>(b)));
      ++alphabet;
    }
  }
  if (vocab_size <= v.reserved_ + alphabet) {
    throw BuildError("vocab_size " + std::to_string(vocab_size) + " must exceed " +
                     std::to_string(v.reserved_ + alphabet) + " control tokens plus byte alphabet");
  }
  v.index();

  // BPE training with incremental pair statistics.
  struct Word {
    std::vector<int> syms;
    std::int64_t freq;
  };
  std::vector<Word> words;
  words.reserve(chunk_freq.size());
  for (const auto& [chunk, freq] : chunk_freq) {
    Word w{{}, freq};
    for (unsigned char b : chunk) w.syms.push_back(v.byte_ids_[b]);
    words.push_back(std::move(w));
  }

  using Pair = std::pair<int, int>;
  std::map<Pair, std::int64_t> counts;
  std::map<Pair, std::set<std::size_t>> where;
  // Highest count first, then lexicographic (left, right) byte order.
  auto less = [&v](const std::tuple<std::int64_t, Pair>& a, const std::tuple<std::int64_t, Pair>& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    const auto& [al, ar] = std::get<1>(a);
    const auto& [bl, br] = std::get<1>(b);
    if (v.entries_[al] != v.entries_[bl]) return v.entries_[al] < v.entries_[bl];
    if (v.entries_[ar] != v.entries_[br]) return v.entries_[ar] < v.entries_[br];
    return std::get<1>(a) < std::get<1>(b);
  };
  std::set<std::tuple<std::int64_t, Pair>, decltype(less)> queue(less);
  std::set<Pair> banned;

  auto adjust = [&](const Pair& p, std::int64_t delta, std::size_t word) {
    auto& c = counts[p];
    if (c > 0) queue.erase({c, p});
    c += delta;
    if (c > 0 && !banned.contains(p)) queue.insert({c, p});
    if (delta > 0) where[p].insert(word);
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) {
    const auto& s = words[wi].syms;
    for (std::size_t k = 0; k + 1 < s.size(); ++k) adjust({s[k], s[k + 1]}, words[wi].freq, wi);
  }

  const auto& block = v.control_ids_;
  while (v.entries_.size() < vocab_size && !queue.empty()) {
    const auto [count, best] = *queue.begin();
    if (count < static_cast<std::int64_t>(options.min_pair_frequency)) break;
    std::string merged = v.entries_[best.first] + v.entries_[best.second];
    if (block.contains(merged)) {
      queue.erase(queue.begin());
      banned.insert(best);
      continue;
    }
    int merged_id;
    if (auto it = v.piece_ids_.find(merged); it != v.piece_ids_.end()) {
      merged_id = it->second;
    } else {
      merged_id = static_cast<int>(v.entries_.size());
      v.entries_.push_back(merged);
      v.piece_ids_.emplace(merged, merged_id);
    }
    v.merges_.emplace_back(v.entries_[best.first], v.entries_[best.second]);
    banned.insert(best);
    queue.erase(queue.begin());

    const auto affected = where[best];
    for (std::size_t wi : affected) {
      auto& w = words[wi];
      bool present = false;
      for (std::size_t k = 0; k + 1 < w.syms.size(); ++k) {
        if (w.syms[k] == best.first && w.syms[k + 1] == best.second) {
          present = true;
          break;
        }
      }
      if (!present) continue;
      for (std::size_t k = 0; k + 1 < w.syms.size(); ++k) adjust({w.syms[k], w.syms[k + 1]}, -w.freq, wi);
      std::vector<int> next;
      next.reserve(w.syms.size());
      for (std::size_t k = 0; k < w.syms.size(); ++k) {
        if (k + 1 < w.syms.size() && w.syms[k] == best.first && w.syms[k + 1] == best.second) {
          next.push_back(merged_id);
          ++k;
        } else {
          next.push_back(w.syms[k]);
        }
      }
      w.syms = std::move(next);
      for (std::size_t k = 0; k + 1 < w.syms.size(); ++k) adjust({w.syms[k], w.syms[k + 1]}, w.freq, wi);
    }
  }
  v.index();
  return v;
}

void Vocabulary::encode_chunk(std::string_view chunk, std::vector<int>& out) const {
  std::vector<int> syms;
  syms.reserve(chunk.size());
  for (unsigned char b : chunk) {
    const int id = byte_ids_[b];
    syms.push_back(id >= 0 ? id : unk_);
  }
  while (syms.size() > 1) {
    int best_rank = -1;
    int best_out = -1;
    std::pair<int, int> best_pair;
    for (std::size_t k = 0; k + 1 < syms.size(); ++k) {
      auto it = merge_rank_.find({syms[k], syms[k + 1]});
      if (it != merge_rank_.end() && (best_rank < 0 || it->second.first < best_rank)) {
        best_rank = it->second.first;
        best_out = it->second.second;
        best_pair = {syms[k], syms[k + 1]};
      }
    }
    if (best_rank < 0) break;
    std::size_t w = 0;
    for (std::size_t k = 0; k < syms.size(); ++k) {
      if (k + 1 < syms.size() && syms[k] == best_pair.first && syms[k + 1] == best_pair.second) {
        syms[w++] = best_out;
        ++k;
      } else {
        syms[w++] = syms[k];
      }
    }
    syms.resize(w);
  }
  out.insert(out.end(), syms.begin(), syms.end());
}

void Vocabulary::encode_text(std::string_view text, std::vector<int>& out) const {
  for (auto chunk : pretokenize(text)) encode_chunk(chunk, out);
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& seg : segment_controls(*this, text, angle_controls_, specials_.null)) {
    if (seg.control >= 0) {
      out.push_back(seg.control);
    } else {
      encode_text(seg.text, out);
    }
  }
  return out;
}

std::vector<int> Vocabulary::encode_plain(std::string_view text) const {
  std::vector<int> out;
  encode_text(text, out);
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  bool after_control = false;
  for (std::size_t pos = 0; pos < ids.size(); ++pos) {
    const int id = ids[pos];
    if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
      throw RangeError("token id " + std::to_string(id) + " at position " + std::to_string(pos) +
                           " is outside the vocabulary",
                       pos);
    }
    if (id == pad_) continue;
    if (id == prefix_sep_) {
      out += entries_[id];
      after_control = true;
    } else if (is_control(id)) {
      if (!out.empty()) out.push_back(' ');
      out += entries_[id];
      after_control = true;
    } else {
      if (after_control) out.push_back(' ');
      out += entries_[id];
      after_control = false;
    }
  }
  return out;
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  const std::string key(token);
  if (auto it = control_ids_.find(key); it != control_ids_.end()) return it->second;
  if (auto it = piece_ids_.find(key); it != piece_ids_.end()) return it->second;
  return std::nullopt;
}

int Vocabulary::id(std::string_view token) const {
  if (auto found = find(token)) return *found;
  throw RangeError("token '" + std::string(token) + "' is not in the vocabulary", 0);
}

std::optional<int> Vocabulary::dsmt_domain_id(std::string_view domain) const {
  auto it = control_ids_.find(specials_.dsmt_domain_token(domain));
  if (it == control_ids_.end()) return std::nullopt;
  return it->second;
}

std::optional<TaskKind> Vocabulary::prompt_task(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= prompt_task_.size()) return std::nullopt;
  return prompt_task_[id];
}

std::string Vocabulary::to_json() const {
  json specials;
  json prompts = json::object();
  json descriptive = json::object();
  for (TaskKind t : kAllTasks) {
    prompts[std::string(to_string(t))] = specials_.prompt_tokens.at(t);
    descriptive[std::string(to_string(t))] = specials_.descriptive_prompts.at(t);
  }
  specials["prompt_tokens"] = prompts;
  specials["descriptive_prompts"] = descriptive;
  specials["descriptive_context"] = specials_.descriptive_ctx;
  specials["bos"] = specials_.bos;
  specials["eos"] = specials_.eos;
  specials["ctx"] = specials_.ctx;
  specials["sep"] = specials_.sep;
  specials["null"] = specials_.null;
  specials["pad"] = specials_.pad;
  specials["unk"] = specials_.unk;
  specials["target_prefix_sep"] = specials_.target_prefix_sep;
  specials["dsmt_domains"] = specials_.dsmt_domains;

  json entries = json::array();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    entries.push_back(i < reserved_ ? entries_[i] : piece_to_display(entries_[i]));
  }
  json merges = json::array();
  for (const auto& [l, r] : merges_) merges.push_back({piece_to_display(l), piece_to_display(r)});

  json j;
  j["format_version"] = kFormatVersion;
  j["byte_fallback"] = byte_fallback_;
  j["specials"] = specials;
  j["reserved"] = reserved_;
  j["entries"] = entries;
  j["merges"] = merges;
  return j.dump();
}

Vocabulary Vocabulary::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("invalid vocabulary JSON: " + std::string(e.what()));
  }
  Vocabulary v;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kFormatVersion) {
      throw FormatError("unsupported vocabulary format_version " + std::to_string(version));
    }
    v.byte_fallback_ = j.at("byte_fallback").get<bool>();
    const json& s = j.at("specials");
    SpecialTokens sp;
    for (const auto& [k, val] : s.at("prompt_tokens").items()) sp.prompt_tokens[parse_task(k)] = val.get<std::string>();
    for (const auto& [k, val] : s.at("descriptive_prompts").items()) {
      sp.descriptive_prompts[parse_task(k)] = val.get<std::string>();
    }
    sp.descriptive_ctx = s.at("descriptive_context").get<std::string>();
    sp.bos = s.at("bos").get<std::string>();
    sp.eos = s.at("eos").get<std::string>();
    sp.ctx = s.at("ctx").get<std::string>();
    sp.sep = s.at("sep").get<std::string>();
    sp.null = s.at("null").get<std::string>();
    sp.pad = s.at("pad").get<std::string>();
    sp.unk = s.at("unk").get<std::string>();
    sp.target_prefix_sep = s.at("target_prefix_sep").get<std::string>();
    sp.dsmt_domains = s.at("dsmt_domains").get<std::vector<std::string>>();
    v.specials_ = sp;
    const auto block = sp.reserved_block();
    const auto entries = j.at("entries").get<std::vector<std::string>>();
    if (entries.size() < block.size()) throw FormatError("vocabulary is missing control tokens");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i < block.size()) {
        if (entries[i] != block[i]) throw FormatError("control block does not match specials");
        v.entries_.push_back(entries[i]);
      } else {
        v.entries_.push_back(display_to_piece(entries[i]));
      }
    }
    for (const auto& m : j.at("merges")) {
      v.merges_.emplace_back(display_to_piece(m.at(0).get<std::string>()),
                             display_to_piece(m.at(1).get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed vocabulary: " + std::string(e.what()));
  }
  v.index();
  return v;
}

void Vocabulary::save(const std::string& path, std::string_view config_hash) const {
  std::string text = to_json();
  if (!config_hash.empty()) {
    json j = json::parse(text);
    j["config_hash"] = std::string(config_hash);
    text = j.dump();
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary '" + path + "'");
  out << text << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open vocabulary '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace unimt
