#include "opql/lm.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "opql/errors.hpp"

namespace opql {

namespace {

// Joint softmax over the real hits and the null pseudo-entry, then λ and e_Y.
HopTrace mix_step(const KeyValueMemory& memory, const ModelParams& params, const Mat& m_e1,
                  const Mat& relation_emb, const Mat& m_e2, int k, int hop) {
  const EncoderConfig& c = params.config;
  if (k < 1) throw ConfigError("retrieve_and_mix: k must be >= 1");
  if (m_e2.rows() != 1 || m_e2.cols() != c.entity_dim)
    throw ConfigError("retrieve_and_mix: m_e2 must be 1 x entity_dim");

  HopTrace step;
  step.query = lm_query(params, m_e1, relation_emb, hop);
  step.topic = m_e1;
  step.base = m_e2;

  // Raw top-k scores; β is recomputed below under the joint softmax with null.
  std::vector<RetrievalHit> hits;
  if (!memory.entries.empty()) {
    RetrievalResult real = retrieve_topk(memory, step.query.vector, k);
    hits = std::move(real.hits);
  }

  const Mat k_null = memory_key(params, m_e1, params.r_null);
  RetrievalHit null_hit;
  null_hit.entry_index = kNullEntryIndex;
  null_hit.pair = EntityPair{-1, -1};
  null_hit.value_entity = -1;
  null_hit.score = k_null.cwiseProduct(step.query.vector).sum();
  hits.push_back(null_hit);

  // Score-descending order; the null entry sorts after real entries on ties.
  std::sort(hits.begin(), hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.score != b.score) return a.score > b.score;
    const bool a_null = a.entry_index == kNullEntryIndex;
    const bool b_null = b.entry_index == kNullEntryIndex;
    if (a_null != b_null) return b_null;
    return a.entry_index < b.entry_index;
  });

  // Accumulate in sorted order so a replay from the trace reproduces the
  // mixed vector bit for bit.
  double max_score = hits.front().score;
  for (const RetrievalHit& h : hits) max_score = std::max(max_score, h.score);
  double denom = 0.0;
  for (const RetrievalHit& h : hits) denom += std::exp(h.score - max_score);

  double beta_null = 0.0;
  Mat e_y = Mat::Zero(1, c.entity_dim);
  for (RetrievalHit& h : hits) {
    h.weight = std::exp(h.score - max_score) / denom;
    if (h.entry_index == kNullEntryIndex)
      beta_null = h.weight;
    else
      e_y += h.weight * params.entity_table.row(h.value_entity);
  }

  step.retrieval.hits = std::move(hits);
  step.retrieval.k_requested = k;
  step.lambda = 1.0 - beta_null;
  step.aggregated = std::move(e_y);
  step.mixed = step.base + step.lambda * step.aggregated;
  return step;
}

MixResult result_from(std::vector<HopTrace> trace) {
  MixResult res;
  const HopTrace& last = trace.back();
  res.mixed = last.mixed;
  res.lambda = last.lambda;
  res.retrieval = last.retrieval;
  res.aggregated = last.aggregated;
  res.trace = std::move(trace);
  return res;
}

}  // namespace

FollowQuery lm_query(const ModelParams& params, const Mat& m_e1, const Mat& relation_emb, int hop) {
  const EncoderConfig& c = params.config;
  if (hop < 1 || hop > c.max_hops)
    throw HopOutOfRangeError("lm_query: hop " + std::to_string(hop) + " outside [1, " +
                             std::to_string(c.max_hops) + "]");
  if (m_e1.rows() != 1 || m_e1.cols() != c.entity_dim)
    throw ConfigError("lm_query: mention embedding must be 1 x entity_dim");
  if (relation_emb.rows() != 1 || relation_emb.cols() != c.relation_dim)
    throw ConfigError("lm_query: relation embedding must be 1 x relation_dim");

  const Mat projected = relation_emb * params.w_t[static_cast<std::size_t>(hop - 1)];
  Mat cat(1, c.entity_dim + c.relation_dim);
  cat << m_e1, projected;

  FollowQuery q;
  q.vector = cat * params.w_q;
  q.hop_index = hop;
  q.relation_emb = relation_emb;
  return q;
}

MixResult retrieve_and_mix(const KeyValueMemory& memory, const ModelParams& params, const Mat& m_e1,
                           const Mat& relation_emb, const Mat& m_e2, int k, int hop) {
  std::vector<HopTrace> trace;
  trace.push_back(mix_step(memory, params, m_e1, relation_emb, m_e2, k, hop));
  return result_from(std::move(trace));
}

std::vector<std::pair<EntityId, double>> predict_entity(const ModelParams& params, const Mat& mixed) {
  if (mixed.rows() != 1 || mixed.cols() != params.config.entity_dim)
    throw ConfigError("predict_entity: mixed vector must be 1 x entity_dim");
  std::vector<std::pair<EntityId, double>> ranked;
  ranked.reserve(static_cast<std::size_t>(params.config.entity_vocab_size));
  for (EntityId e = 0; e < params.config.entity_vocab_size; ++e)
    ranked.emplace_back(e, params.entity_table.row(e).cwiseProduct(mixed).sum());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return ranked;
}

MixResult multi_hop_mix(const KeyValueMemory& memory, const ModelParams& params, const Mat& m_e1,
                        const Mat& relation_emb, const std::vector<Mat>& m_e2_per_hop, int hops,
                        int k) {
  if (hops < 1 || hops > params.config.max_hops)
    throw HopOutOfRangeError("multi_hop_mix: hops " + std::to_string(hops) + " outside [1, " +
                             std::to_string(params.config.max_hops) + "]");
  if (static_cast<int>(m_e2_per_hop.size()) != hops)
    throw ConfigError("multi_hop_mix: need exactly one m_e2 per hop");

  std::vector<HopTrace> trace;
  Mat topic = m_e1;
  for (int hop = 1; hop <= hops; ++hop) {
    trace.push_back(mix_step(memory, params, topic, relation_emb,
                             m_e2_per_hop[static_cast<std::size_t>(hop - 1)], k, hop));
    topic = trace.back().mixed;
  }
  return result_from(std::move(trace));
}

MixResult conjunction_mix(const KeyValueMemory& memory, const ModelParams& params,
                          const std::vector<ConjunctionTopic>& topics, const Mat& m_e2, int k) {
  if (topics.empty()) throw EmptySetError("conjunction_mix: at least one topic is required");

  std::vector<HopTrace> trace;
  Mat mixed = m_e2;
  for (const ConjunctionTopic& t : topics) {
    // Each topic retrieves independently against the shared answer slot; the
    // running sum feeds the next step's base so the last trace entry holds
    // the final mixed vector.
    trace.push_back(mix_step(memory, params, t.m_e1, t.relation_emb, mixed, k, /*hop=*/1));
    mixed = trace.back().mixed;
  }
  return result_from(std::move(trace));
}

Mat replay_mix(const ModelParams& params, const HopTrace& step) {
  double max_score = step.retrieval.hits.front().score;
  for (const RetrievalHit& h : step.retrieval.hits) max_score = std::max(max_score, h.score);
  double denom = 0.0;
  for (const RetrievalHit& h : step.retrieval.hits) denom += std::exp(h.score - max_score);
  double beta_null = 0.0;
  Mat e_y = Mat::Zero(1, params.config.entity_dim);
  for (const RetrievalHit& h : step.retrieval.hits) {
    const double beta = std::exp(h.score - max_score) / denom;
    if (h.entry_index == kNullEntryIndex)
      beta_null = beta;
    else
      e_y += beta * params.entity_table.row(h.value_entity);
  }
  return step.base + (1.0 - beta_null) * e_y;
}

}  // namespace opql
