#pragma once

// Token vocabulary with part-of-speech tags. On disk: one line per token,
// "token<TAB>id<TAB>pos", ids dense from 0, pos in {VERB,NOUN,OTHER}.

#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vtalign {

enum class Pos { verb, noun, other };

inline const char* pos_name(Pos p) {
  switch (p) {
    case Pos::verb: return "VERB";
    case Pos::noun: return "NOUN";
    case Pos::other: return "OTHER";
  }
  return "?";
}

inline std::optional<Pos> parse_pos(const std::string& s) {
  if (s == "VERB") return Pos::verb;
  if (s == "NOUN") return Pos::noun;
  if (s == "OTHER") return Pos::other;
  return std::nullopt;
}

class Vocabulary {
 public:
  std::size_t add(const std::string& token, Pos pos) {
    if (index_.count(token)) {
      throw std::invalid_argument("Vocabulary: duplicate token '" + token + "'");
    }
    index_[token] = tokens_.size();
    tokens_.push_back(token);
    pos_.push_back(pos);
    return tokens_.size() - 1;
  }

  std::size_t size() const { return tokens_.size(); }

  std::optional<std::size_t> lookup(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  Pos pos(std::size_t id) const { return pos_.at(id); }

  std::vector<std::size_t> ids_with_pos(Pos p) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pos_.size(); ++i) {
      if (pos_[i] == p) out.push_back(i);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      f << tokens_[i] << '\t' << i << '\t' << pos_name(pos_[i]) << '\n';
    }
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(path + ": cannot open");
    Vocabulary v;
    std::vector<std::pair<std::size_t, std::pair<std::string, Pos>>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream is(line);
      std::string token, id_str, pos_str;
      if (!std::getline(is, token, '\t') || !std::getline(is, id_str, '\t') ||
          !std::getline(is, pos_str)) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": expected token<TAB>id<TAB>pos");
      }
      auto pos = parse_pos(pos_str);
      if (!pos) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": unknown pos '" +
                                 pos_str + "'");
      }
      rows.push_back({std::stoull(id_str), {token, *pos}});
    }
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].first != i) {
        throw std::runtime_error(path + ": ids are not dense from 0 (missing id " +
                                 std::to_string(i) + ")");
      }
      v.add(rows[i].second.first, rows[i].second.second);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<Pos> pos_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace vtalign
