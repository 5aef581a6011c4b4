#include "opql/follow.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "opql/errors.hpp"

namespace opql {

namespace {

// Order output entities deterministically: heavier first, then lower id.
WeightedEntitySet sorted_set(std::map<EntityId, double> mass) {
  std::vector<std::pair<EntityId, double>> items(mass.begin(), mass.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  WeightedEntitySet y;
  for (const auto& [e, w] : items) {
    y.entities.push_back(e);
    y.weights.push_back(w);
  }
  return y;
}

}  // namespace

Mat centroid(const ModelParams& params, const WeightedEntitySet& x) {
  if (x.empty()) throw EmptySetError("centroid: entity set is empty");
  if (x.entities.size() != x.weights.size())
    throw ConfigError("centroid: entities and weights must align");
  double total = 0.0;
  for (double w : x.weights) {
    if (w < 0.0) throw ConfigError("centroid: weights must be nonnegative");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("centroid: weights must sum to a positive value");

  Mat out = Mat::Zero(1, params.config.entity_dim);
  for (std::size_t i = 0; i < x.entities.size(); ++i) {
    const EntityId e = x.entities[i];
    if (e < 0 || e >= params.config.entity_vocab_size)
      throw UnknownEntityError("centroid: entity id " + std::to_string(e) +
                               " outside the entity table");
    out += (x.weights[i] / total) * params.entity_table.row(e);
  }
  return out;
}

FollowQuery follow_query(const ModelParams& params, const WeightedEntitySet& x,
                         const Mat& relation_emb, int hop) {
  const EncoderConfig& c = params.config;
  if (hop < 1 || hop > c.max_hops)
    throw HopOutOfRangeError("follow_query: hop " + std::to_string(hop) + " outside [1, " +
                             std::to_string(c.max_hops) + "]");
  if (relation_emb.rows() != 1 || relation_emb.cols() != c.relation_dim)
    throw ConfigError("follow_query: relation embedding must be 1 x relation_dim");

  const Mat e_x = centroid(params, x);
  const Mat projected = relation_emb * params.w_t[static_cast<std::size_t>(hop - 1)];
  Mat cat(1, c.entity_dim + c.relation_dim);
  cat << e_x, projected;

  FollowQuery q;
  q.vector = cat * params.w_q;
  q.hop_index = hop;
  q.relation_emb = relation_emb;
  return q;
}

WeightedEntitySet follow(const KeyValueMemory& memory, const ModelParams& params,
                         const WeightedEntitySet& x, const Mat& relation_emb, int k, int hop) {
  const FollowQuery q = follow_query(params, x, relation_emb, hop);
  const std::set<EntityId> support(x.entities.begin(), x.entities.end());
  const RetrievalResult rr = retrieve_topk(memory, q.vector, k, &support);

  std::map<EntityId, double> mass;
  for (const RetrievalHit& hit : rr.hits) mass[hit.value_entity] += hit.weight;
  return sorted_set(std::move(mass));
}

WeightedEntitySet multi_hop_follow(const KeyValueMemory& memory, const ModelParams& params,
                                   const WeightedEntitySet& x, const Mat& relation_emb, int hops,
                                   int k) {
  if (hops < 1 || hops > params.config.max_hops)
    throw HopOutOfRangeError("multi_hop_follow: hops " + std::to_string(hops) + " outside [1, " +
                             std::to_string(params.config.max_hops) + "]");
  WeightedEntitySet current = x;
  for (int hop = 1; hop <= hops; ++hop) {
    WeightedEntitySet y = follow(memory, params, current, relation_emb, k, hop);
    if (hop < hops) {
      if (y.empty())
        throw EmptyIntermediateError("multi_hop_follow: hop " + std::to_string(hop) +
                                     " produced no entities");
      current = truncate_entity_set(y, k);
    } else {
      current = std::move(y);
    }
  }
  return current;
}

WeightedEntitySet truncate_entity_set(const WeightedEntitySet& x, int k) {
  if (k < 1) throw ConfigError("truncate_entity_set: k must be >= 1");
  std::vector<std::size_t> order(x.entities.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&x](std::size_t a, std::size_t b) {
    if (x.weights[a] != x.weights[b]) return x.weights[a] > x.weights[b];
    return x.entities[a] < x.entities[b];
  });
  if (order.size() > static_cast<std::size_t>(k)) order.resize(static_cast<std::size_t>(k));

  WeightedEntitySet y;
  double total = 0.0;
  for (std::size_t i : order) total += x.weights[i];
  for (std::size_t i : order) {
    y.entities.push_back(x.entities[i]);
    y.weights.push_back(total > 0.0 ? x.weights[i] / total : 0.0);
  }
  return y;
}

double follow_loss(const RetrievalResult& result, const std::set<EntityId>& answers) {
  double correct = 0.0;
  for (const RetrievalHit& hit : result.hits)
    if (answers.count(hit.value_entity) > 0) correct += hit.weight;
  const double floor = 1e-9;
  return -std::log(std::max(correct, floor));
}

}  // namespace opql
