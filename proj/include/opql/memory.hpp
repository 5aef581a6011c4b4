#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "opql/autograd.hpp"
#include "opql/corpus.hpp"
#include "opql/encoder.hpp"
#include "opql/rng.hpp"
#include "opql/types.hpp"
#include "opql/vocab.hpp"

namespace opql {

enum class DedupMode { kAllMentions, kAveraged };

std::string to_string(DedupMode mode);
DedupMode dedup_mode_from_string(const std::string& text);  // throws ConfigError

// One key-value slot: key = W_k^T [e_topic; r], value = the target entity.
struct MemoryEntry {
  Mat key;           // 1 x d_k
  EntityPair pair;
  EntityId value_entity = 0;  // == pair.target
  int mention_count = 0;
  std::vector<std::string> provenance;  // supporting passage ids
  // Mean relation embedding behind `key`; kept so keys can be recomputed
  // after parameter updates without re-reading the corpus.
  Mat relation_emb;  // 1 x d_r
};

struct KeyValueMemory {
  std::vector<MemoryEntry> entries;
  std::map<EntityId, std::vector<int>> topic_index;  // pair.topic -> entry indices
  DedupMode dedup_mode = DedupMode::kAveraged;
  int max_mentions = 5;
  std::uint64_t sample_seed = 0;  // mention-sampling stream, reused by inject
  int key_dim = 0;
  int relation_dim = 0;

  std::size_t size() const { return entries.size(); }
  void rebuild_topic_index();
};

struct RetrievalHit {
  int entry_index = -1;
  EntityPair pair;
  EntityId value_entity = 0;
  double score = 0.0;
  double weight = 0.0;  // β, softmax over hit scores only
};

struct RetrievalResult {
  std::vector<RetrievalHit> hits;  // score descending, ties by lower entry index
  int k_requested = 0;

  bool empty() const { return hits.empty(); }
};

// k = W_k^T [e1; r]. Inputs are row vectors (1 x d_e, 1 x d_r).
Mat memory_key(const ModelParams& params, const Mat& topic_embedding, const Mat& relation_emb);

// Scans passages containing both endpoints of each vocabulary pair, encodes
// them with both mentions masked, and stores one entry per occurrence
// (all-mentions) or the mean key over up to `max_mentions` sampled
// occurrences (averaged). Throws EmptyMemoryError when nothing is stored.
KeyValueMemory build_memory(const std::vector<AnnotatedPassage>& passages,
                            const PairVocabulary& pair_vocab, const ModelParams& params,
                            const Vocab& token_vocab, DedupMode dedup, int max_mentions, Rng& rng);

// Exact top-k maximum-inner-product scan. With `filter`, only entries whose
// pair.topic is in the set are candidates; an exhausted filter yields an
// empty result. β is the softmax over the returned scores.
RetrievalResult retrieve_topk(const KeyValueMemory& memory, const Mat& query, int k,
                              const std::set<EntityId>* filter = nullptr);

// Builds entries for the new pairs from `new_passages` (same procedure and
// sampling stream as build_memory) and appends them, re-averaging duplicate
// pairs in averaged mode over the union of sampled mentions. Returns a new
// memory; the input is untouched.
KeyValueMemory inject_pairs(const KeyValueMemory& memory,
                            const std::vector<AnnotatedPassage>& new_passages,
                            const PairVocabulary& new_pair_vocab, const ModelParams& params,
                            const Vocab& token_vocab);

// Recomputes every key from the stored relation embedding and the current
// entity table / W_k. Never invoked implicitly: training treats the memory as
// fixed, so stale keys only arise when a caller deliberately pairs an old
// memory with newer parameters and wants them reconciled.
void refresh_keys(KeyValueMemory& memory, const ModelParams& params);

// Versioned little-endian binary snapshot (magic "OPQM"); round trips are
// bit-exact including provenance.
void save_memory(const KeyValueMemory& memory, const std::string& path);
KeyValueMemory load_memory(const std::string& path);

}  // namespace opql
