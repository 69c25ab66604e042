#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace metamap {

using TokenSequence = std::vector<int64_t>;

// Word-level vocabulary with reserved specials. Ids are assigned in insertion
// order, so two vocabularies built from the same word list are identical.
class Vocabulary {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kBos = 1;
  static constexpr int64_t kEos = 2;

  Vocabulary() {
    add("<pad>");
    add("<bos>");
    add("<eos>");
  }

  int64_t add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    const int64_t id = static_cast<int64_t>(words_.size());
    words_.push_back(word);
    index_.emplace(word, id);
    return id;
  }

  int64_t id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw std::out_of_range("vocabulary: unknown word '" + word + "'");
    return it->second;
  }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }

  const std::string& word(int64_t id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocabulary: bad id " + std::to_string(id));
    return words_[static_cast<size_t>(id)];
  }

  int64_t size() const { return static_cast<int64_t>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  TokenSequence encode(const std::vector<std::string>& tokens) const {
    TokenSequence out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  std::string decode(const TokenSequence& tokens) const {
    std::ostringstream os;
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (i) os << ' ';
      os << word(tokens[i]);
    }
    return os.str();
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int64_t> index_;
};

}  // namespace metamap
