#pragma once

#include <utility>
#include <vector>

#include "opql/autograd.hpp"
#include "opql/encoder.hpp"
#include "opql/follow.hpp"
#include "opql/memory.hpp"
#include "opql/types.hpp"

namespace opql {

// Entry index used for the null pseudo-entry inside retrieval results.
inline constexpr int kNullEntryIndex = -1;

// Everything needed to replay one retrieve-and-mix step.
struct HopTrace {
  FollowQuery query;          // q = W_q^T [topic; W_t^{(hop)T} r]
  Mat topic;                  // 1 x d_e input mention/mixed embedding
  Mat base;                   // 1 x d_e m_e2 the mix was added to
  RetrievalResult retrieval;  // top-k hits plus the null pseudo-entry
  double lambda = 0.0;        // 1 − β_null
  Mat aggregated;             // 1 x d_e e_Y over non-null hits
  Mat mixed;                  // 1 x d_e base + λ·e_Y
};

struct MixResult {
  Mat mixed;                  // final mixed vector
  double lambda = 0.0;        // final step's mixing mass
  RetrievalResult retrieval;  // final step's retrieval (includes null)
  Mat aggregated;             // final step's e_Y
  std::vector<HopTrace> trace;
};

// Same projection stack as follow_query with the centroid replaced by a
// contextual mention embedding.
FollowQuery lm_query(const ModelParams& params, const Mat& m_e1, const Mat& relation_emb, int hop);

// Scores the top-k entries and the null pseudo-entry (key W_k^T[m_e1; r_null],
// value 0) under one softmax; λ = 1 − β_null, e_Y = Σ β·entity_table[value],
// mixed = m_e2 + λ·e_Y. An empty memory degenerates to λ=0, mixed = m_e2.
MixResult retrieve_and_mix(const KeyValueMemory& memory, const ModelParams& params, const Mat& m_e1,
                           const Mat& relation_emb, const Mat& m_e2, int k, int hop);

// Entities ranked by inner product with the entity table, descending; ties go
// to the lower id.
std::vector<std::pair<EntityId, double>> predict_entity(const ModelParams& params, const Mat& mixed);

// Chains retrieve_and_mix: hop t+1's topic embedding is hop t's mixed output,
// with the shared relation embedding and hop-specific W_t. One m_e2 per hop.
MixResult multi_hop_mix(const KeyValueMemory& memory, const ModelParams& params, const Mat& m_e1,
                        const Mat& relation_emb, const std::vector<Mat>& m_e2_per_hop, int hops,
                        int k);

// One topic of a conjunction question: its own mention embedding and its own
// relation embedding (from its [R1] paired with the shared [R2]).
struct ConjunctionTopic {
  Mat m_e1;          // 1 x d_e
  Mat relation_emb;  // 1 x d_r
};

// Independent retrieve-and-mix per topic, contributions summed:
// mixed = m_e2 + Σ_i λ_i·e_{Y,i}. A singleton list equals retrieve_and_mix
// exactly; the reported lambda/retrieval/aggregated are the last topic's.
MixResult conjunction_mix(const KeyValueMemory& memory, const ModelParams& params,
                          const std::vector<ConjunctionTopic>& topics, const Mat& m_e2, int k);

// Recomputes a step's mixed vector from its recorded trace; used to check
// trace reproducibility.
Mat replay_mix(const ModelParams& params, const HopTrace& step);

}  // namespace opql
