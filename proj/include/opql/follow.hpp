#pragma once

#include <set>

#include "opql/autograd.hpp"
#include "opql/encoder.hpp"
#include "opql/memory.hpp"
#include "opql/types.hpp"

namespace opql {

// q = W_q^T [e_X; W_t^{(hop)T} r] plus the pieces it was built from.
struct FollowQuery {
  Mat vector;        // 1 x d_k
  int hop_index = 1;
  Mat relation_emb;  // 1 x d_r, before the hop projection
};

// Weighted average of entity embeddings; weights are normalized to sum to 1
// first. Throws EmptySetError on an empty set.
Mat centroid(const ModelParams& params, const WeightedEntitySet& x);

// Builds the retrieval query for one hop (1-based). Throws HopOutOfRangeError.
FollowQuery follow_query(const ModelParams& params, const WeightedEntitySet& x,
                         const Mat& relation_emb, int hop);

// Y = X.follow(R): retrieve top-k under the sparse filter topic ∈ support(X),
// then sum β per distinct value entity. Empty retrieval yields an empty set.
WeightedEntitySet follow(const KeyValueMemory& memory, const ModelParams& params,
                         const WeightedEntitySet& x, const Mat& relation_emb, int k, int hop);

// Chains follow() for `hops` steps, reusing one relation embedding with the
// hop-specific projection each step. Intermediate sets are truncated to the
// top-k entities by weight and renormalized; an empty intermediate set throws
// EmptyIntermediateError (the final hop may legitimately come back empty).
WeightedEntitySet multi_hop_follow(const KeyValueMemory& memory, const ModelParams& params,
                                   const WeightedEntitySet& x, const Mat& relation_emb, int hops,
                                   int k);

// Keep the `k` heaviest entities (weight desc, id asc) and renormalize.
WeightedEntitySet truncate_entity_set(const WeightedEntitySet& x, int k);

// −log Σ_{hits with value ∈ answers} β, floored at ε=1e-9 so a top-k miss
// costs −log ε instead of ∞.
double follow_loss(const RetrievalResult& result, const std::set<EntityId>& answers);

}  // namespace opql
