#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace opql {

using TokenId = int;
using EntityId = int;
using RelationId = int;

// A mention span [start, end] (inclusive) linked to an entity.
struct Mention {
  int start = 0;
  int end = 0;
  EntityId entity = 0;

  bool operator==(const Mention&) const = default;
};

// Tokenized text span with linked entity mentions.
struct AnnotatedPassage {
  std::vector<TokenId> tokens;
  std::vector<Mention> mentions;
  std::string passage_id;
};

// Directional pair: (topic, target) and (target, topic) are distinct keys.
struct EntityPair {
  EntityId topic = 0;
  EntityId target = 0;

  bool operator==(const EntityPair&) const = default;
  auto operator<=>(const EntityPair&) const = default;
};

// Passage after [R1]/[R2] insertion and optional [ENT] masking.
struct PreprocessedExample {
  std::vector<TokenId> tokens;
  int r1_pos = -1;  // primary [R1]; conjunction inputs carry one per topic
  int r2_pos = -1;
  std::vector<int> extra_r1_pos;  // additional [R1] markers (conjunctions)
  std::vector<Mention> context_mentions;
  EntityPair pair;
  std::optional<std::set<EntityId>> answer_set;
};

// Ground-truth triple store used by the synthetic generator and the oracle.
struct SymbolicKB {
  struct Fact {
    EntityId subject = 0;
    RelationId relation = 0;
    EntityId object = 0;

    auto operator<=>(const Fact&) const = default;
  };
  std::vector<Fact> facts;  // sorted, unique
  std::vector<std::string> relation_names;          // relation id -> name
  std::vector<std::vector<std::string>> templates;  // relation id -> surface templates

  bool contains(EntityId s, RelationId r, EntityId o) const;
};

// Directional entity pairs ranked by PMI.
struct PairVocabulary {
  std::vector<EntityPair> pairs;  // sorted by PMI desc, ties by (topic, target) asc
  std::vector<std::int64_t> counts;
  std::vector<double> pmi;

  std::size_t size() const { return pairs.size(); }
  std::optional<std::size_t> find(const EntityPair& p) const {
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (pairs[i] == p) return i;
    return std::nullopt;
  }
};

// Entity ids with nonnegative weights; inputs and outputs of follow().
struct WeightedEntitySet {
  std::vector<EntityId> entities;  // deduplicated
  std::vector<double> weights;     // aligned with entities

  bool empty() const { return entities.empty(); }
  std::size_t size() const { return entities.size(); }
};

// A question as stored in the question dataset files.
struct Question {
  std::vector<std::string> question_tokens;
  std::vector<std::string> topic_entities;
  std::vector<std::string> answers;
  int hops = 1;
  std::vector<std::string> relations;  // optional ground-truth labels
};

}  // namespace opql
