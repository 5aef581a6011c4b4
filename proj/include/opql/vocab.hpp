#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "opql/errors.hpp"
#include "opql/types.hpp"

namespace opql {

// Reserved special tokens, always at the front of a token vocabulary.
inline constexpr const char* kPadToken = "[PAD]";
inline constexpr const char* kEntToken = "[ENT]";
inline constexpr const char* kR1Token = "[R1]";
inline constexpr const char* kR2Token = "[R2]";
inline constexpr const char* kUnkToken = "[UNK]";

// Closed vocabulary mapping strings to dense ids. Line index = id in the
// newline-delimited file format.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> items);

  // Builds a token vocabulary with the reserved specials prepended.
  static Vocab with_specials(const std::vector<std::string>& words);

  int add(const std::string& s);  // idempotent
  int id(const std::string& s) const;             // throws UnknownEntityError
  int id_or(const std::string& s, int fallback) const;
  bool contains(const std::string& s) const { return index_.count(s) > 0; }
  const std::string& name(int id) const;
  int size() const { return static_cast<int>(items_.size()); }
  const std::vector<std::string>& items() const { return items_; }

  int pad() const { return id(kPadToken); }
  int ent() const { return id(kEntToken); }
  int r1() const { return id(kR1Token); }
  int r2() const { return id(kR2Token); }
  int unk() const { return id(kUnkToken); }

 private:
  std::vector<std::string> items_;
  std::unordered_map<std::string, int> index_;
};

inline Vocab::Vocab(std::vector<std::string> items) : items_(std::move(items)) {
  for (std::size_t i = 0; i < items_.size(); ++i) index_[items_[i]] = static_cast<int>(i);
}

inline Vocab Vocab::with_specials(const std::vector<std::string>& words) {
  Vocab v;
  v.add(kPadToken);
  v.add(kEntToken);
  v.add(kR1Token);
  v.add(kR2Token);
  v.add(kUnkToken);
  for (const auto& w : words) v.add(w);
  return v;
}

inline int Vocab::add(const std::string& s) {
  auto it = index_.find(s);
  if (it != index_.end()) return it->second;
  items_.push_back(s);
  int id = static_cast<int>(items_.size()) - 1;
  index_[s] = id;
  return id;
}

inline int Vocab::id(const std::string& s) const {
  auto it = index_.find(s);
  if (it == index_.end()) throw UnknownEntityError("unknown vocabulary item: " + s);
  return it->second;
}

inline int Vocab::id_or(const std::string& s, int fallback) const {
  auto it = index_.find(s);
  return it == index_.end() ? fallback : it->second;
}

inline const std::string& Vocab::name(int id) const {
  if (id < 0 || id >= size()) throw IndexOutOfRangeError("vocabulary id out of range");
  return items_[static_cast<std::size_t>(id)];
}

}  // namespace opql
