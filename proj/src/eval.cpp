#include "opql/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include <json.hpp>

#include "opql/errors.hpp"
#include "opql/follow.hpp"
#include "opql/rng.hpp"

namespace opql {

namespace {

// Answer-pair reachability through the memory's (topic → value) edges. For a
// conjunction (several topics, one hop) every topic must reach one common
// answer; for a chain the answer must be reachable in exactly `hops` steps.
bool covered_by_memory(const KeyValueMemory& memory, const std::vector<EntityId>& topics,
                       const std::set<EntityId>& answers, int hops) {
  const auto neighbors = [&memory](const std::set<EntityId>& layer) {
    std::set<EntityId> next;
    for (EntityId e : layer) {
      auto it = memory.topic_index.find(e);
      if (it == memory.topic_index.end()) continue;
      for (int idx : it->second) next.insert(memory.entries[static_cast<std::size_t>(idx)].value_entity);
    }
    return next;
  };

  if (topics.size() > 1) {
    for (EntityId a : answers) {
      bool all = true;
      for (EntityId t : topics) {
        const std::set<EntityId> reach = neighbors({t});
        if (reach.count(a) == 0) {
          all = false;
          break;
        }
      }
      if (all) return true;
    }
    return false;
  }

  std::set<EntityId> layer(topics.begin(), topics.end());
  for (int h = 0; h < hops; ++h) layer = neighbors(layer);
  for (EntityId a : answers)
    if (layer.count(a) > 0) return true;
  return false;
}

int rank_of_best_gold(const std::vector<EntityId>& ranked, const std::set<EntityId>& gold) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (gold.count(ranked[i]) > 0) return static_cast<int>(i) + 1;
  return -1;
}

void finalize(EvalReport& report) {
  std::size_t hits = 0, covered_hits = 0;
  for (const QuestionRecord& r : report.records) {
    if (r.hit) ++hits;
    if (r.covered) {
      ++report.covered_count;
      if (r.hit) ++covered_hits;
    }
  }
  report.total = report.records.size();
  report.hits_at_1 = report.total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(report.total);
  report.memory_coverage =
      report.total == 0 ? 0.0 : static_cast<double>(report.covered_count) / static_cast<double>(report.total);
  report.hits_at_1_covered = report.covered_count == 0
                                 ? 0.0
                                 : static_cast<double>(covered_hits) / static_cast<double>(report.covered_count);
}

QuestionRecord miss_record(std::size_t index, const Question& q) {
  QuestionRecord rec;
  rec.question_id = std::to_string(index);
  rec.gold = q.answers;
  return rec;
}

// Shared skeleton: prepare each question, delegate the model-specific ranking.
template <typename RankFn>
EvalReport run_eval(const KeyValueMemory& memory, const ModelParams& params,
                    const std::vector<Question>& questions, const Vocab& token_vocab,
                    const Vocab& entity_vocab, const std::string& split, RankFn rank_question) {
  EvalReport report;
  report.split = split;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const Question& q = questions[i];
    auto pq = prepare_question(q, token_vocab, entity_vocab);
    if (!pq.has_value() || pq->answer_ids.empty()) {
      report.records.push_back(miss_record(i, q));
      continue;
    }
    QuestionRecord rec;
    rec.question_id = std::to_string(i);
    rec.gold = q.answers;
    std::vector<EntityId> topic_ids;
    for (const Mention& m : pq->topic_mentions) topic_ids.push_back(m.entity);
    const int hops = std::min(std::max(pq->hops, 1), params.config.max_hops);
    rec.covered = covered_by_memory(memory, topic_ids, pq->answer_ids, hops);

    std::vector<EntityId> ranked = rank_question(*pq, topic_ids, hops);
    rec.hit = !ranked.empty() && pq->answer_ids.count(ranked.front()) > 0;
    rec.best_gold_rank = rank_of_best_gold(ranked, pq->answer_ids);
    const std::size_t keep = std::min<std::size_t>(5, ranked.size());
    for (std::size_t j = 0; j < keep; ++j) rec.predicted.push_back(entity_vocab.name(ranked[j]));
    report.records.push_back(std::move(rec));
  }
  finalize(report);
  return report;
}

double cosine(const Mat& a, const Mat& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return a.cwiseProduct(b).sum() / (na * nb);
}

}  // namespace

std::string to_json(const EvalReport& report) {
  nlohmann::ordered_json doc;
  doc["split"] = report.split;
  doc["hits_at_1"] = report.hits_at_1;
  doc["hits_at_1_covered"] = report.hits_at_1_covered;
  doc["memory_coverage"] = report.memory_coverage;
  doc["total"] = report.total;
  doc["covered_count"] = report.covered_count;
  return doc.dump();
}

std::string to_json_line(const QuestionRecord& record) {
  nlohmann::ordered_json doc;
  doc["question_id"] = record.question_id;
  doc["predicted"] = record.predicted;
  doc["gold"] = record.gold;
  doc["best_gold_rank"] = record.best_gold_rank;
  doc["covered"] = record.covered;
  doc["hit"] = record.hit;
  return doc.dump();
}

double hits_at_1(const std::vector<std::vector<EntityId>>& ranked,
                 const std::vector<std::set<EntityId>>& gold) {
  if (ranked.size() != gold.size())
    throw LengthMismatchError("hits_at_1: " + std::to_string(ranked.size()) + " predictions vs " +
                              std::to_string(gold.size()) + " gold sets");
  if (ranked.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (!ranked[i].empty() && gold[i].count(ranked[i].front()) > 0) ++hits;
  return static_cast<double>(hits) / static_cast<double>(ranked.size());
}

std::set<EntityId> symbolic_follow(const SymbolicKB& kb, const std::set<EntityId>& x,
                                   const std::vector<RelationId>& relations) {
  std::set<EntityId> layer = x;
  for (RelationId r : relations) {
    if (r < 0 || r >= static_cast<RelationId>(kb.relation_names.size()))
      throw UnknownRelationError("symbolic_follow: relation id " + std::to_string(r) +
                                 " not in the KB");
    std::set<EntityId> next;
    for (EntityId s : layer) {
      const SymbolicKB::Fact lo{s, r, std::numeric_limits<EntityId>::min()};
      const SymbolicKB::Fact hi{s, r, std::numeric_limits<EntityId>::max()};
      auto begin = std::lower_bound(kb.facts.begin(), kb.facts.end(), lo);
      auto end = std::upper_bound(kb.facts.begin(), kb.facts.end(), hi);
      for (auto it = begin; it != end; ++it) next.insert(it->object);
    }
    layer = std::move(next);
  }
  return layer;
}

WeightedEntitySet answer_follow(const KeyValueMemory& memory, const ModelParams& params,
                                const PreparedQuestion& question, const Vocab& token_vocab,
                                int top_k) {
  PreprocessedExample ex =
      question.topic_mentions.size() == 1
          ? preprocess_question(question.tokens, question.topic_mentions.front(),
                                QuestionMode::kMaskedTopic, token_vocab)
          : preprocess_conjunction_question(question.tokens, question.topic_mentions,
                                            QuestionMode::kMaskedTopic, token_vocab);
  const Mat r = relation_embedding_infer(params, ex);
  WeightedEntitySet x;
  for (const Mention& m : question.topic_mentions) {
    x.entities.push_back(m.entity);
    x.weights.push_back(1.0 / static_cast<double>(question.topic_mentions.size()));
  }
  const int hops = std::min(std::max(question.hops, 1), params.config.max_hops);
  return multi_hop_follow(memory, params, x, r, hops, top_k);
}

MixResult answer_lm(const KeyValueMemory& memory, const ModelParams& params,
                    const PreparedQuestion& question, const Vocab& token_vocab, int top_k,
                    bool force_lambda_zero) {
  PreprocessedExample ex =
      question.topic_mentions.size() == 1
          ? preprocess_question(question.tokens, question.topic_mentions.front(),
                                QuestionMode::kSurfaceTopic, token_vocab)
          : preprocess_conjunction_question(question.tokens, question.topic_mentions,
                                            QuestionMode::kSurfaceTopic, token_vocab);
  const Mat ctx = encode_infer(params, ex.tokens);
  const auto mention_at = [&](int pos) -> Mat { return ctx.row(pos) * params.w_e; };
  const auto relation_at = [&](int r1) -> Mat {
    Mat cat(1, 2 * params.config.model_dim);
    cat << ctx.row(r1), ctx.row(ex.r2_pos);
    return cat * params.w_r;
  };
  const Mat m_e2 = mention_at(ex.r2_pos - 1);
  const int hops = std::min(std::max(question.hops, 1), params.config.max_hops);

  if (force_lambda_zero) {
    MixResult result;
    result.mixed = m_e2;
    result.lambda = 0.0;
    result.aggregated = Mat::Zero(1, params.config.entity_dim);
    return result;
  }
  if (ex.extra_r1_pos.empty()) {
    const Mat m_e1 = mention_at(ex.context_mentions.front().start);
    const Mat r = relation_at(ex.r1_pos);
    if (hops == 1) return retrieve_and_mix(memory, params, m_e1, r, m_e2, top_k, 1);
    const std::vector<Mat> bases(static_cast<std::size_t>(hops), m_e2);
    return multi_hop_mix(memory, params, m_e1, r, bases, hops, top_k);
  }
  std::vector<ConjunctionTopic> topics;
  std::vector<int> r1_list{ex.r1_pos};
  for (int p : ex.extra_r1_pos) r1_list.push_back(p);
  for (std::size_t i = 0; i < r1_list.size() && i < ex.context_mentions.size(); ++i)
    topics.push_back(
        ConjunctionTopic{mention_at(ex.context_mentions[i].start), relation_at(r1_list[i])});
  return conjunction_mix(memory, params, topics, m_e2, top_k);
}

EvalReport evaluate_follow(const KeyValueMemory& memory, const ModelParams& params,
                           const std::vector<Question>& questions, const Vocab& token_vocab,
                           const Vocab& entity_vocab, const QaOptions& options) {
  return run_eval(memory, params, questions, token_vocab, entity_vocab, options.split_name,
                  [&](const PreparedQuestion& pq, const std::vector<EntityId>&, int) {
                    std::vector<EntityId> ranked;
                    try {
                      ranked = answer_follow(memory, params, pq, token_vocab, options.top_k).entities;
                    } catch (const EmptyIntermediateError&) {
                      // Dead-end chain: counts as a miss.
                    }
                    return ranked;
                  });
}

EvalReport evaluate_lm(const KeyValueMemory& memory, const ModelParams& params,
                       const std::vector<Question>& questions, const Vocab& token_vocab,
                       const Vocab& entity_vocab, const QaOptions& options) {
  return run_eval(memory, params, questions, token_vocab, entity_vocab, options.split_name,
                  [&](const PreparedQuestion& pq, const std::vector<EntityId>&, int) {
                    const MixResult res =
                        answer_lm(memory, params, pq, token_vocab, options.top_k,
                                  options.force_lambda_zero);
                    const auto scored = predict_entity(params, res.mixed);
                    std::vector<EntityId> ranked;
                    ranked.reserve(scored.size());
                    for (const auto& [e, s] : scored) ranked.push_back(e);
                    return ranked;
                  });
}

MarginReport relation_embedding_margin(const std::map<RelationId, std::vector<Mat>>& by_relation) {
  std::size_t usable = 0;
  for (const auto& [r, embs] : by_relation)
    if (embs.size() >= 2) ++usable;
  if (by_relation.size() < 2 || usable < by_relation.size())
    throw InsufficientExamplesError(
        "relation_embedding_margin: need >= 2 relations with >= 2 examples each");

  double within_sum = 0.0, between_sum = 0.0;
  std::size_t within_n = 0, between_n = 0;
  std::vector<std::pair<RelationId, const Mat*>> all;
  for (const auto& [r, embs] : by_relation)
    for (const Mat& e : embs) all.emplace_back(r, &e);
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      const double sim = cosine(*all[i].second, *all[j].second);
      if (all[i].first == all[j].first) {
        within_sum += sim;
        ++within_n;
      } else {
        between_sum += sim;
        ++between_n;
      }
    }
  }
  MarginReport report;
  report.within = within_n == 0 ? 0.0 : within_sum / static_cast<double>(within_n);
  report.between = between_n == 0 ? 0.0 : between_sum / static_cast<double>(between_n);
  report.margin = report.within - report.between;
  return report;
}

MarginReport relation_embedding_margin(
    const std::map<RelationId, std::vector<PreprocessedExample>>& by_relation,
    const ModelParams& params) {
  std::map<RelationId, std::vector<Mat>> embeddings;
  for (const auto& [r, examples] : by_relation)
    for (const PreprocessedExample& ex : examples)
      embeddings[r].push_back(relation_embedding_infer(params, ex));
  return relation_embedding_margin(embeddings);
}

// ---- baseline ---------------------------------------------------------------------

RelationClassifierBaseline::RelationClassifierBaseline(int token_vocab_size, int relation_vocab_size) {
  if (token_vocab_size < 1 || relation_vocab_size < 1)
    throw ConfigError("RelationClassifierBaseline: vocab sizes must be >= 1");
  weights_ = Mat::Zero(token_vocab_size, relation_vocab_size);
  bias_ = Mat::Zero(1, relation_vocab_size);
}

void RelationClassifierBaseline::train(const std::vector<std::vector<TokenId>>& questions,
                                       const std::vector<RelationId>& labels, int epochs,
                                       double learning_rate, std::uint64_t seed) {
  if (questions.size() != labels.size())
    throw LengthMismatchError("baseline train: questions and labels differ in length");
  if (questions.empty()) throw EmptySetError("baseline train: no examples");
  const int n_rel = static_cast<int>(weights_.cols());
  for (RelationId r : labels)
    if (r < 0 || r >= n_rel)
      throw UnknownRelationError("baseline train: label " + std::to_string(r) + " out of range");

  Rng rng(seed);
  std::vector<std::size_t> order(questions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t idx : order) {
      const std::vector<TokenId>& toks = questions[idx];
      Mat logits = bias_;
      for (TokenId t : toks) {
        if (t < 0 || t >= static_cast<TokenId>(weights_.rows())) continue;
        logits += weights_.row(t);
      }
      const double mx = logits.maxCoeff();
      Mat p = (logits.array() - mx).exp().matrix();
      p /= p.sum();
      p(0, labels[idx]) -= 1.0;  // softmax gradient
      bias_ -= learning_rate * p;
      for (TokenId t : toks) {
        if (t < 0 || t >= static_cast<TokenId>(weights_.rows())) continue;
        weights_.row(t) -= learning_rate * p;
      }
    }
  }
}

RelationId RelationClassifierBaseline::predict(const std::vector<TokenId>& question) const {
  Mat logits = bias_;
  for (TokenId t : question) {
    if (t < 0 || t >= static_cast<TokenId>(weights_.rows())) continue;
    logits += weights_.row(t);
  }
  RelationId best = 0;
  for (RelationId r = 1; r < static_cast<RelationId>(logits.cols()); ++r)
    if (logits(0, r) > logits(0, best)) best = r;
  return best;
}

EvalReport evaluate_baseline(const RelationClassifierBaseline& classifier, const SymbolicKB& kb,
                             const std::vector<Question>& questions, const Vocab& token_vocab,
                             const Vocab& entity_vocab, const std::string& split_name) {
  EvalReport report;
  report.split = split_name;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const Question& q = questions[i];
    auto pq = prepare_question(q, token_vocab, entity_vocab);
    if (!pq.has_value() || pq->answer_ids.empty()) {
      report.records.push_back(miss_record(i, q));
      continue;
    }
    QuestionRecord rec;
    rec.question_id = std::to_string(i);
    rec.gold = q.answers;

    const RelationId predicted = classifier.predict(pq->tokens);
    std::set<EntityId> topics;
    for (const Mention& m : pq->topic_mentions) topics.insert(m.entity);
    const int hops = std::max(pq->hops, 1);
    const std::set<EntityId> answers =
        symbolic_follow(kb, topics, std::vector<RelationId>(static_cast<std::size_t>(hops), predicted));

    std::vector<EntityId> ranked(answers.begin(), answers.end());  // id ascending
    rec.hit = !ranked.empty() && pq->answer_ids.count(ranked.front()) > 0;
    rec.best_gold_rank = rank_of_best_gold(ranked, pq->answer_ids);
    const std::size_t keep = std::min<std::size_t>(5, ranked.size());
    for (std::size_t j = 0; j < keep; ++j) rec.predicted.push_back(entity_vocab.name(ranked[j]));
    report.records.push_back(std::move(rec));
  }
  finalize(report);
  return report;
}

// ---- holdout protocol ----------------------------------------------------------------

HoldoutEvalResult holdout_relation_eval(const SynthCorpus& corpus,
                                        const std::set<RelationId>& holdout,
                                        const EncoderConfig& encoder_config,
                                        const HoldoutEvalConfig& config) {
  const int n_rel = static_cast<int>(corpus.kb.relation_names.size());
  if (holdout.empty()) throw ConfigError("holdout_relation_eval: holdout set is empty");
  for (RelationId r : holdout)
    if (r < 0 || r >= n_rel)
      throw UnknownRelationError("holdout_relation_eval: relation id " + std::to_string(r) +
                                 " not in the KB");
  if (n_rel - static_cast<int>(holdout.size()) < 2)
    throw ConfigError("holdout_relation_eval: holdout leaves fewer than 2 training relations");

  std::set<std::string> holdout_names;
  for (RelationId r : holdout) holdout_names.insert(corpus.kb.relation_names[static_cast<std::size_t>(r)]);
  const auto is_novel = [&holdout_names](const Question& q) {
    for (const std::string& rel : q.relations)
      if (holdout_names.count(rel) > 0) return true;
    return false;
  };

  std::vector<Question> seen_train, seen_test, novel;
  for (const Question& q : corpus.questions.train_1hop)
    (is_novel(q) ? novel : seen_train).push_back(q);
  for (const Question& q : corpus.questions.test_1hop)
    (is_novel(q) ? novel : seen_test).push_back(q);
  if (seen_train.empty() || seen_test.empty() || novel.empty())
    throw ConfigError("holdout_relation_eval: question splits are empty under this holdout");

  // Label-free pretraining and memory construction over the full corpus.
  EncoderConfig ec = encoder_config;
  ec.token_vocab_size = static_cast<int>(corpus.token_vocab.size());
  ec.entity_vocab_size = static_cast<int>(corpus.entity_vocab.size());
  ec.validate();
  Rng rng(config.seed);
  ModelParams params = init_params(ec, rng);

  TrainConfig rel_cfg = config.relation_config;
  rel_cfg.stage = Stage::kRelation;
  std::vector<AnnotatedPassage> relation_pool = corpus.passages;
  if (config.question_format_pretraining) {
    for (AnnotatedPassage& doc :
         question_relation_passages(seen_train, corpus.token_vocab, corpus.entity_vocab))
      relation_pool.push_back(std::move(doc));
  }
  const PairVocabulary pair_vocab =
      extract_entity_pairs(relation_pool, config.min_pair_count, config.max_pairs);
  TrainInputs rel_inputs;
  rel_inputs.passages = &relation_pool;
  rel_inputs.pair_vocab = &pair_vocab;
  rel_inputs.token_vocab = &corpus.token_vocab;
  train_stage(params, rel_inputs, rel_cfg);

  Rng mem_rng = rng.fork(1);
  KeyValueMemory memory = build_memory(corpus.passages, pair_vocab, params, corpus.token_vocab,
                                       config.dedup, config.max_mentions, mem_rng);

  if (config.lm_config.steps > 0) {
    TrainConfig lm_cfg = config.lm_config;
    lm_cfg.stage = Stage::kLm;
    TrainInputs lm_inputs;
    lm_inputs.passages = &corpus.passages;  // no questions: stays label-free
    lm_inputs.token_vocab = &corpus.token_vocab;
    lm_inputs.entity_vocab = &corpus.entity_vocab;
    lm_inputs.memory = &memory;
    train_stage(params, lm_inputs, lm_cfg);
  }

  // Question finetuning sees only the seen-relation questions.
  TrainConfig fol_cfg = config.follow_config;
  fol_cfg.stage = Stage::kFollowFinetune;
  TrainInputs fol_inputs;
  fol_inputs.token_vocab = &corpus.token_vocab;
  fol_inputs.entity_vocab = &corpus.entity_vocab;
  fol_inputs.memory = &memory;
  fol_inputs.questions = &seen_train;
  const TrainResult fol_result = train_stage(params, fol_inputs, fol_cfg);

  HoldoutEvalResult result;
  result.audited_relations = fol_result.consumed_question_relations;
  for (const std::string& rel : result.audited_relations)
    if (holdout_names.count(rel) > 0)
      throw Error("holdout_relation_eval: trainer consumed a held-out question label: " + rel);

  // The memory is fixed during question-driven finetuning (stored keys are
  // the scoring source), so the entries remain valid as-is.
  QaOptions qa;
  qa.top_k = config.top_k;
  qa.split_name = "seen";
  result.seen = evaluate_follow(memory, params, seen_test, corpus.token_vocab, corpus.entity_vocab, qa);
  qa.split_name = "novel";
  result.novel = evaluate_follow(memory, params, novel, corpus.token_vocab, corpus.entity_vocab, qa);

  // Supervised contrast: classify the relation from the question text.
  std::vector<std::vector<TokenId>> bl_questions;
  std::vector<RelationId> bl_labels;
  std::map<std::string, RelationId> rel_ids;
  for (RelationId r = 0; r < n_rel; ++r) rel_ids[corpus.kb.relation_names[static_cast<std::size_t>(r)]] = r;
  for (const Question& q : seen_train) {
    if (q.relations.empty()) continue;
    auto it = rel_ids.find(q.relations.front());
    if (it == rel_ids.end()) continue;
    auto pq = prepare_question(q, corpus.token_vocab, corpus.entity_vocab);
    if (!pq.has_value()) continue;
    bl_questions.push_back(pq->tokens);
    bl_labels.push_back(it->second);
  }
  RelationClassifierBaseline baseline(static_cast<int>(corpus.token_vocab.size()), n_rel);
  baseline.train(bl_questions, bl_labels, config.baseline_epochs, config.baseline_learning_rate,
                 config.seed);
  result.baseline_seen = evaluate_baseline(baseline, corpus.kb, seen_test, corpus.token_vocab,
                                           corpus.entity_vocab, "baseline-seen");
  result.baseline_novel = evaluate_baseline(baseline, corpus.kb, novel, corpus.token_vocab,
                                            corpus.entity_vocab, "baseline-novel");
  return result;
}

}  // namespace opql
