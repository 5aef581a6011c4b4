#include "opql/memory.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <utility>

#include "opql/binio.hpp"
#include "opql/errors.hpp"
#include "opql/io.hpp"

namespace opql {

namespace {

constexpr char kMagic[4] = {'O', 'P', 'Q', 'M'};
constexpr std::uint32_t kVersion = 1;

// Stable per-pair sampling stream derived from the memory's sample seed, so
// build and later injections sample mentions the same way regardless of the
// order pairs are visited in.
Rng pair_stream(std::uint64_t sample_seed, const EntityPair& pair) {
  const std::uint64_t salt = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(pair.topic)) << 32) |
                             static_cast<std::uint64_t>(static_cast<std::uint32_t>(pair.target));
  return Rng(sample_seed ^ (salt * 0x9e3779b97f4a7c15ULL));
}

// Passage indices (ascending) that mention both endpoints of the pair.
std::map<EntityId, std::vector<int>> index_by_entity(const std::vector<AnnotatedPassage>& passages) {
  std::map<EntityId, std::vector<int>> by_entity;
  for (int p = 0; p < static_cast<int>(passages.size()); ++p) {
    std::set<EntityId> present;
    for (const Mention& m : passages[p].mentions) present.insert(m.entity);
    for (EntityId e : present) by_entity[e].push_back(p);
  }
  return by_entity;
}

std::vector<int> occurrences_of(const std::map<EntityId, std::vector<int>>& by_entity,
                                const EntityPair& pair) {
  auto a = by_entity.find(pair.topic);
  auto b = by_entity.find(pair.target);
  if (a == by_entity.end() || b == by_entity.end()) return {};
  std::vector<int> both;
  std::set_intersection(a->second.begin(), a->second.end(), b->second.begin(), b->second.end(),
                        std::back_inserter(both));
  return both;
}

struct MentionKey {
  Mat key;           // 1 x d_k
  Mat relation_emb;  // 1 x d_r
  std::string passage_id;
};

MentionKey encode_occurrence(const AnnotatedPassage& passage, const EntityPair& pair,
                             const ModelParams& params, const Vocab& token_vocab) {
  const PreprocessedExample ex =
      preprocess_relation_example(passage, pair, /*mask_topic=*/true, /*mask_target=*/true, token_vocab);
  MentionKey mk;
  mk.relation_emb = relation_embedding_infer(params, ex);
  const Mat topic_emb = params.entity_table.row(pair.topic);
  mk.key = memory_key(params, topic_emb, mk.relation_emb);
  mk.passage_id = passage.passage_id;
  return mk;
}

// Entries for one pair from its supporting passages, honoring the dedup mode.
void append_pair_entries(std::vector<MemoryEntry>& out, const std::vector<AnnotatedPassage>& passages,
                         const std::vector<int>& occ, const EntityPair& pair,
                         const ModelParams& params, const Vocab& token_vocab, DedupMode dedup,
                         int max_mentions, std::uint64_t sample_seed) {
  if (occ.empty()) return;
  if (pair.topic < 0 || pair.topic >= params.config.entity_vocab_size ||
      pair.target < 0 || pair.target >= params.config.entity_vocab_size)
    throw UnknownEntityError("memory pair references an entity id outside the entity table");

  if (dedup == DedupMode::kAllMentions) {
    for (int p : occ) {
      MentionKey mk = encode_occurrence(passages[p], pair, params, token_vocab);
      MemoryEntry e;
      e.key = std::move(mk.key);
      e.relation_emb = std::move(mk.relation_emb);
      e.pair = pair;
      e.value_entity = pair.target;
      e.mention_count = 1;
      e.provenance = {mk.passage_id};
      out.push_back(std::move(e));
    }
    return;
  }

  // Averaged: sample up to max_mentions occurrences, then average in
  // ascending passage order so the mean is reproducible term for term.
  std::vector<int> chosen = occ;
  if (static_cast<int>(chosen.size()) > max_mentions) {
    Rng rng = pair_stream(sample_seed, pair);
    const std::vector<std::size_t> picks =
        rng.sample_without_replacement(chosen.size(), static_cast<std::size_t>(max_mentions));
    std::vector<int> sampled;
    sampled.reserve(picks.size());
    for (std::size_t i : picks) sampled.push_back(chosen[i]);
    std::sort(sampled.begin(), sampled.end());
    chosen = std::move(sampled);
  }

  MemoryEntry e;
  e.pair = pair;
  e.value_entity = pair.target;
  e.mention_count = static_cast<int>(chosen.size());
  for (int p : chosen) {
    MentionKey mk = encode_occurrence(passages[p], pair, params, token_vocab);
    if (e.key.size() == 0) {
      e.key = mk.key;
      e.relation_emb = mk.relation_emb;
    } else {
      e.key += mk.key;
      e.relation_emb += mk.relation_emb;
    }
    e.provenance.push_back(mk.passage_id);
  }
  const double n = static_cast<double>(chosen.size());
  e.key /= n;
  e.relation_emb /= n;
  out.push_back(std::move(e));
}

}  // namespace

std::string to_string(DedupMode mode) {
  return mode == DedupMode::kAllMentions ? "all-mentions" : "averaged";
}

DedupMode dedup_mode_from_string(const std::string& text) {
  if (text == "all-mentions") return DedupMode::kAllMentions;
  if (text == "averaged") return DedupMode::kAveraged;
  throw ConfigError("unknown dedup mode '" + text + "' (expected all-mentions or averaged)");
}

void KeyValueMemory::rebuild_topic_index() {
  topic_index.clear();
  for (int i = 0; i < static_cast<int>(entries.size()); ++i)
    topic_index[entries[i].pair.topic].push_back(i);
}

Mat memory_key(const ModelParams& params, const Mat& topic_embedding, const Mat& relation_emb) {
  const EncoderConfig& c = params.config;
  if (topic_embedding.rows() != 1 || topic_embedding.cols() != c.entity_dim)
    throw ConfigError("memory_key: topic embedding must be 1 x entity_dim");
  if (relation_emb.rows() != 1 || relation_emb.cols() != c.relation_dim)
    throw ConfigError("memory_key: relation embedding must be 1 x relation_dim");
  Mat cat(1, c.entity_dim + c.relation_dim);
  cat << topic_embedding, relation_emb;
  return cat * params.w_k;
}

KeyValueMemory build_memory(const std::vector<AnnotatedPassage>& passages,
                            const PairVocabulary& pair_vocab, const ModelParams& params,
                            const Vocab& token_vocab, DedupMode dedup, int max_mentions, Rng& rng) {
  if (max_mentions < 1) throw ConfigError("build_memory: max_mentions must be >= 1");

  KeyValueMemory memory;
  memory.dedup_mode = dedup;
  memory.max_mentions = max_mentions;
  memory.sample_seed = rng.next_u64();
  memory.key_dim = params.config.key_dim;
  memory.relation_dim = params.config.relation_dim;

  const auto by_entity = index_by_entity(passages);
  for (const EntityPair& pair : pair_vocab.pairs) {
    const std::vector<int> occ = occurrences_of(by_entity, pair);
    append_pair_entries(memory.entries, passages, occ, pair, params, token_vocab, dedup,
                        max_mentions, memory.sample_seed);
  }
  if (memory.entries.empty())
    throw EmptyMemoryError("build_memory: no pair in the vocabulary has a supporting passage");
  memory.rebuild_topic_index();
  return memory;
}

RetrievalResult retrieve_topk(const KeyValueMemory& memory, const Mat& query, int k,
                              const std::set<EntityId>* filter) {
  if (k < 1) throw ConfigError("retrieve_topk: k must be >= 1");
  if (query.rows() != 1 || query.cols() != memory.key_dim)
    throw ConfigError("retrieve_topk: query must be 1 x key_dim");

  RetrievalResult result;
  result.k_requested = k;

  std::vector<int> candidates;
  if (filter == nullptr) {
    candidates.resize(memory.entries.size());
    for (int i = 0; i < static_cast<int>(candidates.size()); ++i) candidates[i] = i;
  } else {
    for (EntityId e : *filter) {
      auto it = memory.topic_index.find(e);
      if (it == memory.topic_index.end()) continue;
      candidates.insert(candidates.end(), it->second.begin(), it->second.end());
    }
    std::sort(candidates.begin(), candidates.end());
  }
  if (candidates.empty()) return result;

  std::vector<std::pair<double, int>> scored;  // (score, entry index)
  scored.reserve(candidates.size());
  for (int i : candidates)
    scored.emplace_back(memory.entries[i].key.cwiseProduct(query).sum(), i);

  const auto better = [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  };
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    better);
  scored.resize(keep);

  // β = softmax over the kept scores, max-subtracted for stability.
  double max_score = scored.front().first;
  double denom = 0.0;
  for (const auto& [s, _] : scored) denom += std::exp(s - max_score);
  for (const auto& [s, idx] : scored) {
    RetrievalHit hit;
    hit.entry_index = idx;
    hit.pair = memory.entries[idx].pair;
    hit.value_entity = memory.entries[idx].value_entity;
    hit.score = s;
    hit.weight = std::exp(s - max_score) / denom;
    result.hits.push_back(std::move(hit));
  }
  return result;
}

KeyValueMemory inject_pairs(const KeyValueMemory& memory,
                            const std::vector<AnnotatedPassage>& new_passages,
                            const PairVocabulary& new_pair_vocab, const ModelParams& params,
                            const Vocab& token_vocab) {
  KeyValueMemory out = memory;

  std::map<EntityPair, int> existing;  // pair -> entry index (averaged mode dedup)
  if (out.dedup_mode == DedupMode::kAveraged)
    for (int i = 0; i < static_cast<int>(out.entries.size()); ++i)
      existing[out.entries[i].pair] = i;

  const auto by_entity = index_by_entity(new_passages);
  for (const EntityPair& pair : new_pair_vocab.pairs) {
    const std::vector<int> occ = occurrences_of(by_entity, pair);
    if (occ.empty()) continue;

    auto hit = out.dedup_mode == DedupMode::kAveraged ? existing.find(pair) : existing.end();
    if (hit == existing.end()) {
      append_pair_entries(out.entries, new_passages, occ, pair, params, token_vocab,
                          out.dedup_mode, out.max_mentions, out.sample_seed);
      if (out.dedup_mode == DedupMode::kAveraged && !out.entries.empty())
        existing[pair] = static_cast<int>(out.entries.size()) - 1;
      continue;
    }

    // Duplicate directional pair: re-average over the union of mentions.
    std::vector<MemoryEntry> fresh;
    append_pair_entries(fresh, new_passages, occ, pair, params, token_vocab, DedupMode::kAveraged,
                        out.max_mentions, out.sample_seed);
    MemoryEntry& old = out.entries[static_cast<std::size_t>(hit->second)];
    const MemoryEntry& add = fresh.front();
    const double m = static_cast<double>(old.mention_count);
    const double n = static_cast<double>(add.mention_count);
    old.key = (old.key * m + add.key * n) / (m + n);
    old.relation_emb = (old.relation_emb * m + add.relation_emb * n) / (m + n);
    old.mention_count += add.mention_count;
    old.provenance.insert(old.provenance.end(), add.provenance.begin(), add.provenance.end());
  }

  out.rebuild_topic_index();
  return out;
}

void refresh_keys(KeyValueMemory& memory, const ModelParams& params) {
  if (params.config.key_dim != memory.key_dim || params.config.relation_dim != memory.relation_dim)
    throw ConfigError("refresh_keys: model dims do not match the memory");
  for (MemoryEntry& e : memory.entries) {
    if (e.pair.topic < 0 || e.pair.topic >= params.config.entity_vocab_size)
      throw UnknownEntityError("refresh_keys: entry topic outside the entity table");
    const Mat topic_emb = params.entity_table.row(e.pair.topic);
    e.key = memory_key(params, topic_emb, e.relation_emb);
  }
}

void save_memory(const KeyValueMemory& memory, const std::string& path) {
  using binio::put_f64;
  using binio::put_i32;
  using binio::put_string;
  using binio::put_u32;
  using binio::put_u64;

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, memory.dedup_mode == DedupMode::kAllMentions ? 0u : 1u);
  put_u32(out, static_cast<std::uint32_t>(memory.max_mentions));
  put_u64(out, memory.sample_seed);
  put_u32(out, static_cast<std::uint32_t>(memory.key_dim));
  put_u32(out, static_cast<std::uint32_t>(memory.relation_dim));
  put_u32(out, static_cast<std::uint32_t>(memory.entries.size()));
  for (const MemoryEntry& e : memory.entries) {
    put_i32(out, e.pair.topic);
    put_i32(out, e.pair.target);
    put_i32(out, e.value_entity);
    put_i32(out, e.mention_count);
    put_u32(out, static_cast<std::uint32_t>(e.provenance.size()));
    for (const std::string& p : e.provenance) put_string(out, p);
    for (int j = 0; j < memory.key_dim; ++j) put_f64(out, e.key(0, j));
    for (int j = 0; j < memory.relation_dim; ++j) put_f64(out, e.relation_emb(0, j));
  }
  io::atomic_write_file(path, out);
}

KeyValueMemory load_memory(const std::string& path) {
  const std::string data = io::read_file(path);
  binio::Reader r{data, 0, path};
  r.need(4);
  if (std::memcmp(data.data(), kMagic, 4) != 0)
    throw FormatError(path + ": not a memory snapshot (bad magic)");
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError(path + ": unsupported memory snapshot version " + std::to_string(version));

  KeyValueMemory memory;
  const std::uint32_t mode = r.u32();
  if (mode > 1) throw FormatError(path + ": bad dedup mode code " + std::to_string(mode));
  memory.dedup_mode = mode == 0 ? DedupMode::kAllMentions : DedupMode::kAveraged;
  memory.max_mentions = static_cast<int>(r.u32());
  memory.sample_seed = r.u64();
  memory.key_dim = static_cast<int>(r.u32());
  memory.relation_dim = static_cast<int>(r.u32());
  if (memory.key_dim < 1 || memory.relation_dim < 1)
    throw FormatError(path + ": bad memory dimensions");
  const std::uint32_t count = r.u32();
  memory.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    MemoryEntry e;
    e.pair.topic = r.i32();
    e.pair.target = r.i32();
    e.value_entity = r.i32();
    e.mention_count = r.i32();
    if (e.value_entity != e.pair.target)
      throw FormatError(path + ": entry value does not match its pair target");
    const std::uint32_t n_prov = r.u32();
    for (std::uint32_t p = 0; p < n_prov; ++p) e.provenance.push_back(r.str());
    e.key.resize(1, memory.key_dim);
    for (int j = 0; j < memory.key_dim; ++j) e.key(0, j) = r.f64();
    e.relation_emb.resize(1, memory.relation_dim);
    for (int j = 0; j < memory.relation_dim; ++j) e.relation_emb(0, j) = r.f64();
    memory.entries.push_back(std::move(e));
  }
  r.expect_end();
  memory.rebuild_topic_index();
  return memory;
}

}  // namespace opql
