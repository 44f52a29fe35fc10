#pragma once

// Edit distance as shortest paths in the graph of all strings up to a length
// bound, where edges are single insertions, deletions and substitutions.

#include <map>
#include <queue>
#include <string>
#include <vector>

namespace oracle {

class EditGraph {
 public:
  EditGraph(const std::string& alphabet, std::size_t max_len) : alphabet_(alphabet), max_len_(max_len) {
    std::vector<std::string> frontier = {""};
    for (std::size_t len = 0; len <= max_len; ++len) {
      std::vector<std::string> next;
      for (const auto& s : frontier) {
        index_[s] = static_cast<int>(nodes_.size());
        nodes_.push_back(s);
        if (len < max_len)
          for (char c : alphabet) next.push_back(s + c);
      }
      frontier = std::move(next);
    }
  }

  const std::vector<std::string>& nodes() const { return nodes_; }

  /// Breadth-first distances from `from` to every node.
  std::vector<int> distances(const std::string& from) const {
    std::vector<int> dist(nodes_.size(), -1);
    std::queue<int> q;
    dist[static_cast<std::size_t>(index_.at(from))] = 0;
    q.push(index_.at(from));
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      const std::string& s = nodes_[static_cast<std::size_t>(u)];
      auto visit = [&](const std::string& t) {
        auto it = index_.find(t);
        if (it == index_.end()) return;
        auto& d = dist[static_cast<std::size_t>(it->second)];
        if (d < 0) {
          d = dist[static_cast<std::size_t>(u)] + 1;
          q.push(it->second);
        }
      };
      for (std::size_t i = 0; i <= s.size(); ++i) {
        for (char c : alphabet_) {
          if (s.size() < max_len_) visit(s.substr(0, i) + c + s.substr(i));
          if (i < s.size() && c != s[i]) visit(s.substr(0, i) + c + s.substr(i + 1));
        }
        if (i < s.size()) visit(s.substr(0, i) + s.substr(i + 1));
      }
    }
    return dist;
  }

 private:
  std::string alphabet_;
  std::size_t max_len_;
  std::vector<std::string> nodes_;
  std::map<std::string, int> index_;
};

}  // namespace oracle
