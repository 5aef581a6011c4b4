#include "opql/training.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <utility>

#include <json.hpp>

#include "opql/errors.hpp"
#include "opql/follow.hpp"

namespace opql {

namespace {

constexpr double kProbFloor = 1e-9;

// ---- stage-2 example construction -------------------------------------------

struct LmTopic {
  int mention_pos = -1;  // token index feeding the mention embedding
  int r1_pos = -1;
  EntityId entity = -1;
};

struct LmItem {
  std::vector<TokenId> tokens;
  std::vector<LmTopic> topics;
  int ent_pos = -1;  // answer-slot [ENT]
  int r2_pos = -1;
  std::set<EntityId> answers;
};

// Masks the chosen target mention with "[ENT] [R2]" in place and appends
// "[R1]" after every other mention, which becomes a topic.
LmItem lm_item_from_passage(const AnnotatedPassage& passage, std::size_t target_idx,
                            const Vocab& vocab) {
  std::vector<Mention> order = passage.mentions;
  std::sort(order.begin(), order.end(),
            [](const Mention& a, const Mention& b) { return a.start < b.start; });
  const Mention target = passage.mentions[target_idx];

  LmItem item;
  int cursor = 0;
  int prev_end = -1;
  for (const Mention& m : order) {
    if (m.start <= prev_end || m.start < 0 ||
        m.end >= static_cast<int>(passage.tokens.size()) || m.end < m.start)
      throw MissingMentionError("passage " + passage.passage_id + " has overlapping or out-of-range mentions");
    prev_end = m.end;
    for (int t = cursor; t < m.start; ++t) item.tokens.push_back(passage.tokens[static_cast<std::size_t>(t)]);
    if (m == target) {
      item.ent_pos = static_cast<int>(item.tokens.size());
      item.tokens.push_back(vocab.ent());
      item.r2_pos = static_cast<int>(item.tokens.size());
      item.tokens.push_back(vocab.r2());
    } else {
      LmTopic topic;
      topic.mention_pos = static_cast<int>(item.tokens.size());
      topic.entity = m.entity;
      for (int t = m.start; t <= m.end; ++t)
        item.tokens.push_back(passage.tokens[static_cast<std::size_t>(t)]);
      topic.r1_pos = static_cast<int>(item.tokens.size());
      item.tokens.push_back(vocab.r1());
      item.topics.push_back(topic);
    }
    cursor = m.end + 1;
  }
  for (int t = cursor; t < static_cast<int>(passage.tokens.size()); ++t)
    item.tokens.push_back(passage.tokens[static_cast<std::size_t>(t)]);
  item.answers = {target.entity};
  return item;
}

// Question form: topic surfaces stay visible ([R1] after each), the answer
// slot "[ENT] [R2]" is appended.
LmItem lm_item_from_question(const PreparedQuestion& pq, const Vocab& vocab) {
  PreprocessedExample ex =
      pq.topic_mentions.size() == 1
          ? preprocess_question(pq.tokens, pq.topic_mentions.front(), QuestionMode::kSurfaceTopic, vocab)
          : preprocess_conjunction_question(pq.tokens, pq.topic_mentions, QuestionMode::kSurfaceTopic, vocab);

  LmItem item;
  item.tokens = std::move(ex.tokens);
  item.r2_pos = ex.r2_pos;
  item.ent_pos = ex.r2_pos - 1;
  item.answers = pq.answer_ids;
  std::vector<int> r1_list;
  r1_list.push_back(ex.r1_pos);
  for (int p : ex.extra_r1_pos) r1_list.push_back(p);
  for (std::size_t i = 0; i < ex.context_mentions.size() && i < r1_list.size(); ++i) {
    LmTopic topic;
    topic.mention_pos = ex.context_mentions[i].start;
    topic.r1_pos = r1_list[i];
    topic.entity = ex.context_mentions[i].entity;
    item.topics.push_back(topic);
  }
  return item;
}

// ---- differentiable retrieval pieces -----------------------------------------

// Top-k candidate entry indices by stored-key scores (ties to the lower
// index). The memory stays fixed during question-driven training; only the
// query side learns, which forces compositional multi-hop solutions instead
// of letting the key space be warped to memorize training answers.
std::vector<int> select_entries(const KeyValueMemory& memory, const Mat& query, int k,
                                const std::set<EntityId>* filter) {
  std::vector<std::pair<double, int>> scored;
  for (int i = 0; i < static_cast<int>(memory.entries.size()); ++i) {
    const MemoryEntry& e = memory.entries[i];
    if (filter != nullptr && filter->count(e.pair.topic) == 0) continue;
    scored.emplace_back(e.key.cwiseProduct(query).sum(), i);
  }
  const auto better = [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  };
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    better);
  scored.resize(keep);
  std::vector<int> out;
  out.reserve(keep);
  for (const auto& [s, i] : scored) out.push_back(i);
  return out;
}

// Frozen keys for the selected entries, exactly as stored in the memory.
ad::Var stored_keys(ad::Tape& tape, const KeyValueMemory& memory, const std::vector<int>& selection) {
  Mat keys(static_cast<Eigen::Index>(selection.size()), memory.key_dim);
  for (std::size_t i = 0; i < selection.size(); ++i)
    keys.row(static_cast<Eigen::Index>(i)) = memory.entries[static_cast<std::size_t>(selection[i])].key;
  return tape.constant(std::move(keys));
}

ad::Var hop_query(ad::Tape&, const ParamVars& vars, const ad::Var& topic_emb,
                  const ad::Var& relation_emb, int hop) {
  const ad::Var projected = ad::matmul(relation_emb, vars.w_t[static_cast<std::size_t>(hop - 1)]);
  return ad::matmul(ad::concat_cols({topic_emb, projected}), vars.w_q);
}

std::vector<int> correct_columns(const KeyValueMemory& memory, const std::vector<int>& selection,
                                 const std::set<EntityId>& answers) {
  std::vector<int> cols;
  for (std::size_t i = 0; i < selection.size(); ++i)
    if (answers.count(memory.entries[static_cast<std::size_t>(selection[i])].value_entity) > 0)
      cols.push_back(static_cast<int>(i));
  return cols;
}

// One LM-mode retrieve-and-mix on the tape. Returns (l_re, mixed). The real
// keys are the frozen stored ones; the null key is live.
struct TapeMix {
  ad::Var l_re;
  ad::Var mixed;
};

TapeMix tape_mix(ad::Tape& tape, const ParamVars& vars, const KeyValueMemory& memory,
                 const ModelParams& params, const ad::Var& m_e1, const ad::Var& relation_emb,
                 const ad::Var& m_e2, const std::set<EntityId>& answers, int k, int hop) {
  const ad::Var query = hop_query(tape, vars, m_e1, relation_emb, hop);
  const std::vector<int> selection =
      select_entries(memory, query.value(), k, /*filter=*/nullptr);

  const ad::Var k_null = ad::matmul(ad::concat_cols({m_e1, vars.r_null}), vars.w_k);
  const ad::Var null_score = ad::matmul_nt(query, k_null);  // 1x1

  ad::Var joint;
  if (selection.empty()) {
    joint = null_score;
  } else {
    const ad::Var real_scores = ad::matmul_nt(query, stored_keys(tape, memory, selection));
    joint = ad::concat_cols({real_scores, null_score});
  }
  const ad::Var probs = ad::softmax_rows(joint);
  const int n_real = static_cast<int>(selection.size());

  TapeMix out;
  out.l_re = indicator_retrieval_loss(tape, probs, correct_columns(memory, selection, answers));

  const ad::Var beta_null = ad::gather_cols(probs, {n_real});
  const ad::Var lambda = ad::affine(beta_null, -1.0, 1.0);
  ad::Var e_y;
  if (selection.empty()) {
    e_y = tape.constant(Mat::Zero(1, params.config.entity_dim));
  } else {
    std::vector<int> real_cols(selection.size());
    std::vector<int> value_rows(selection.size());
    for (std::size_t i = 0; i < selection.size(); ++i) {
      real_cols[i] = static_cast<int>(i);
      value_rows[i] = memory.entries[static_cast<std::size_t>(selection[i])].value_entity;
    }
    const ad::Var beta_real = ad::gather_cols(probs, real_cols);
    const ad::Var values = ad::gather_rows(vars.entity_table, value_rows);
    e_y = ad::matmul(beta_real, values);
  }
  out.mixed = ad::add(m_e2, ad::mul_scalar(e_y, lambda));
  return out;
}

ad::Var mean_of(ad::Tape& tape, const std::vector<ad::Var>& parts) {
  if (parts.empty()) return tape.constant(Mat::Zero(1, 1));
  return ad::scale(ad::add_n(parts), 1.0 / static_cast<double>(parts.size()));
}

bool finite(const Mat& m) { return m.allFinite(); }

}  // namespace

// ---- names and config --------------------------------------------------------

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kEntity: return "entity";
    case Stage::kRelation: return "relation";
    case Stage::kLm: return "lm";
    case Stage::kFollowFinetune: return "follow-finetune";
  }
  return "unknown";
}

Stage stage_from_string(const std::string& text) {
  if (text == "entity") return Stage::kEntity;
  if (text == "relation") return Stage::kRelation;
  if (text == "lm") return Stage::kLm;
  if (text == "follow-finetune") return Stage::kFollowFinetune;
  throw ConfigError("unknown training stage '" + text +
                    "' (expected entity, relation, lm, or follow-finetune)");
}

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("learning rate must be > 0");
  if (optimizer != "adam" && optimizer != "sgd")
    throw ConfigError("optimizer must be adam or sgd, got '" + optimizer + "'");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (clip_norm < 0.0) throw ConfigError("gradient clip norm must be >= 0");
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
  if (hops < 1) throw ConfigError("hops must be >= 1");
  if (report_every < 1) throw ConfigError("report_every must be >= 1");
}

std::string to_json_line(const LossReport& r) {
  nlohmann::ordered_json doc;
  doc["step"] = r.step;
  doc["l_rel"] = r.l_rel;
  doc["l_el"] = r.l_el;
  doc["l_re"] = r.l_re;
  doc["l_mel"] = r.l_mel;
  doc["l_follow"] = r.l_follow;
  doc["total"] = r.total;
  doc["grad_norm"] = r.grad_norm;
  return doc.dump();
}

// ---- losses -------------------------------------------------------------------

ad::Var relation_contrastive_loss(ad::Tape& tape, const ad::Var& anchor_emb,
                                  const ad::Var& candidate_embs,
                                  const std::vector<int>& positive_rows) {
  if (positive_rows.empty())
    throw NoPositiveError("relation_contrastive_loss: no candidate shares the anchor's pair");
  const ad::Var scores = ad::matmul_nt(anchor_emb, candidate_embs);  // 1 x n
  (void)tape;
  return ad::marginal_cross_entropy(scores, positive_rows);
}

ad::Var entity_linking_loss(ad::Tape& tape, const ad::Var& mention_emb, const ad::Var& entity_table,
                            EntityId gold) {
  if (gold < 0 || gold >= static_cast<EntityId>(entity_table.rows()))
    throw UnknownEntityError("entity_linking_loss: gold entity " + std::to_string(gold) +
                             " outside the entity table");
  const ad::Var logits = ad::matmul_nt(mention_emb, entity_table);
  (void)tape;
  return ad::marginal_cross_entropy(logits, {gold});
}

ad::Var masked_entity_loss(ad::Tape& tape, const ad::Var& mixed, const ad::Var& entity_table,
                           const std::set<EntityId>& answers) {
  if (answers.empty()) throw EmptySetError("masked_entity_loss: empty answer set");
  std::vector<int> correct;
  for (EntityId e : answers) {
    if (e < 0 || e >= static_cast<EntityId>(entity_table.rows()))
      throw UnknownEntityError("masked_entity_loss: answer entity " + std::to_string(e) +
                               " outside the entity table");
    correct.push_back(e);
  }
  const ad::Var logits = ad::matmul_nt(mixed, entity_table);
  (void)tape;
  return ad::marginal_cross_entropy(logits, correct);
}

ad::Var indicator_retrieval_loss(ad::Tape& tape, const ad::Var& probs_row,
                                 const std::vector<int>& correct_cols) {
  if (correct_cols.empty()) {
    Mat floor(1, 1);
    floor(0, 0) = -std::log(kProbFloor);
    return tape.constant(std::move(floor));
  }
  const ad::Var mass = ad::sum_all(ad::gather_cols(probs_row, correct_cols));
  return ad::scale(ad::log(ad::clamp_min(mass, kProbFloor)), -1.0);
}

double retrieval_loss(const RetrievalResult& result, const std::set<EntityId>& answers) {
  double mass = 0.0;
  for (const RetrievalHit& hit : result.hits)
    if (hit.entry_index >= 0 && answers.count(hit.value_entity) > 0) mass += hit.weight;
  return -std::log(std::max(mass, kProbFloor));
}

// ---- optimizer ------------------------------------------------------------------

std::function<bool(const std::string&)> trainable_predicate(const std::vector<std::string>& frozen) {
  std::set<std::string> names(frozen.begin(), frozen.end());
  const bool freeze_encoder = names.count("encoder") > 0;
  return [names, freeze_encoder](const std::string& name) {
    if (names.count(name) > 0) return false;
    if (freeze_encoder && (name == "token_embedding" || name == "position_embedding" ||
                           name.rfind("layer", 0) == 0))
      return false;
    return true;
  };
}

double apply_gradients(ad::Tape& tape, const std::vector<ParamBinding>& bindings,
                       const TrainConfig& config, OptimizerState& state) {
  double sq_norm = 0.0;
  for (const ParamBinding& b : bindings) {
    if (!b.trainable) continue;
    const Mat& g = tape.grad(b.var.index());
    if (!finite(g)) throw NonFiniteGradientError("non-finite gradient in tensor " + b.name);
    sq_norm += g.squaredNorm();
  }
  const double norm = std::sqrt(sq_norm);
  if (!std::isfinite(norm)) throw NonFiniteGradientError("non-finite global gradient norm");
  const double rescale =
      (config.clip_norm > 0.0 && norm > config.clip_norm) ? config.clip_norm / norm : 1.0;

  const bool adam = config.optimizer == "adam";
  if (adam) state.t += 1;
  for (const ParamBinding& b : bindings) {
    if (!b.trainable) continue;
    const Mat g = tape.grad(b.var.index()) * rescale;
    if (!adam) {
      *b.tensor -= config.learning_rate * g;
      continue;
    }
    Mat& m = state.m.try_emplace(b.name, Mat::Zero(g.rows(), g.cols())).first->second;
    Mat& v = state.v.try_emplace(b.name, Mat::Zero(g.rows(), g.cols())).first->second;
    m = config.adam_beta1 * m + (1.0 - config.adam_beta1) * g;
    v = config.adam_beta2 * v + (1.0 - config.adam_beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(config.adam_beta1, state.t);
    const double bc2 = 1.0 - std::pow(config.adam_beta2, state.t);
    const Mat m_hat = m / bc1;
    const Mat v_hat = v / bc2;
    *b.tensor -= config.learning_rate *
                 (m_hat.array() / (v_hat.array().sqrt() + config.adam_eps)).matrix();
  }
  return norm;
}

// ---- stage driver ---------------------------------------------------------------

namespace {

struct StepLoss {
  std::vector<ad::Var> rel, el, re, mel, follow;
};

// Shared by the relation stage for every encoded example: link each context
// mention to its entity.
void add_context_linking(ad::Tape& tape, const ParamVars& vars, const ad::Var& ctx,
                         const PreprocessedExample& ex, StepLoss& loss) {
  for (const Mention& m : ex.context_mentions) {
    const ad::Var emb = mention_embedding(tape, vars, ctx, m.start);
    loss.el.push_back(entity_linking_loss(tape, emb, vars.entity_table, m.entity));
  }
}

}  // namespace

TrainResult train_stage(ModelParams& params, const TrainInputs& inputs, const TrainConfig& config,
                        std::ostream* metrics) {
  config.validate();
  const Stage stage = config.stage;

  const auto need = [&](const void* p, const char* what) {
    if (p == nullptr)
      throw ConfigError("train_stage(" + to_string(stage) + "): missing required input: " + what);
  };
  need(inputs.token_vocab, "token vocabulary");
  if (stage != Stage::kFollowFinetune) need(inputs.passages, "passages");
  if (stage == Stage::kRelation) need(inputs.pair_vocab, "pair vocabulary");
  if (stage == Stage::kLm || stage == Stage::kFollowFinetune) need(inputs.memory, "memory");
  if (stage == Stage::kFollowFinetune) {
    need(inputs.questions, "questions");
    need(inputs.entity_vocab, "entity vocabulary");
  }
  if (inputs.questions != nullptr) need(inputs.entity_vocab, "entity vocabulary");
  if ((stage == Stage::kLm || stage == Stage::kFollowFinetune) && inputs.memory->entries.empty())
    throw EmptyMemoryError("train_stage(" + to_string(stage) + "): memory has no entries");

  const Vocab& vocab = *inputs.token_vocab;
  TrainResult result;
  Rng rng(config.seed);
  OptimizerState opt;
  const auto pred = trainable_predicate(config.frozen);

  // --- per-stage example pools ---
  std::vector<std::size_t> entity_pool;  // passages with >= 1 mention
  std::vector<std::size_t> lm_pool;      // passages with >= 2 mentions
  if (inputs.passages != nullptr) {
    for (std::size_t i = 0; i < inputs.passages->size(); ++i) {
      const std::size_t n = (*inputs.passages)[i].mentions.size();
      if (n >= 1) entity_pool.push_back(i);
      if (n >= 2) lm_pool.push_back(i);
    }
  }
  std::vector<PreparedQuestion> prepared;  // resolved questions
  if (inputs.questions != nullptr) {
    for (const Question& q : *inputs.questions) {
      auto pq = prepare_question(q, vocab, *inputs.entity_vocab);
      if (!pq.has_value() || pq->answer_ids.empty() || pq->topic_mentions.empty()) {
        ++result.skipped_examples;
        continue;
      }
      prepared.push_back(std::move(*pq));
    }
  }
  if (stage == Stage::kEntity && entity_pool.empty())
    throw EmptySetError("train_stage(entity): no passage has a mention");
  if (stage == Stage::kLm && lm_pool.empty() && prepared.empty())
    throw EmptySetError("train_stage(lm): no passage has two mentions and no usable questions");
  if (stage == Stage::kFollowFinetune && prepared.empty())
    throw EmptySetError("train_stage(follow-finetune): no usable questions");

  std::optional<RelationBatchStream> stream;
  if (stage == Stage::kRelation)
    stream.emplace(*inputs.passages, *inputs.pair_vocab,
                   RelationBatchConfig{2, 8, config.batch_size}, rng.fork(1), vocab);

  for (int step = 0; step < config.steps; ++step) {
    ad::Tape tape;
    BoundParams bound = bind_params(tape, params, pred);
    const ParamVars& vars = bound.vars;
    StepLoss loss;

    if (stage == Stage::kEntity) {
      for (int b = 0; b < config.batch_size; ++b) {
        const AnnotatedPassage& p =
            (*inputs.passages)[entity_pool[rng.uniform(entity_pool.size())]];
        const Mention m = p.mentions[rng.uniform(p.mentions.size())];
        // Collapse the mention span to a single [ENT].
        std::vector<TokenId> tokens;
        tokens.reserve(p.tokens.size());
        tokens.insert(tokens.end(), p.tokens.begin(), p.tokens.begin() + m.start);
        const int pos = static_cast<int>(tokens.size());
        tokens.push_back(vocab.ent());
        tokens.insert(tokens.end(), p.tokens.begin() + m.end + 1, p.tokens.end());
        const ad::Var ctx = encode_tokens(tape, vars, tokens);
        const ad::Var emb = mention_embedding(tape, vars, ctx, pos);
        loss.el.push_back(entity_linking_loss(tape, emb, vars.entity_table, m.entity));
      }
    } else if (stage == Stage::kRelation) {
      const std::vector<RelationBatchItem> batch = stream->next();
      // Candidate pool: every positive and hard negative in the batch.
      std::vector<ad::Var> cand_embs;
      std::vector<EntityPair> cand_pairs;
      std::vector<ad::Var> anchor_embs;
      for (const RelationBatchItem& group : batch) {
        const ad::Var a_ctx = encode_tokens(tape, vars, group.anchor.tokens);
        anchor_embs.push_back(
            relation_embedding(tape, vars, a_ctx, group.anchor.r1_pos, group.anchor.r2_pos));
        add_context_linking(tape, vars, a_ctx, group.anchor, loss);
        for (const PreprocessedExample& pos : group.positives) {
          const ad::Var ctx = encode_tokens(tape, vars, pos.tokens);
          cand_embs.push_back(relation_embedding(tape, vars, ctx, pos.r1_pos, pos.r2_pos));
          cand_pairs.push_back(pos.pair);
          add_context_linking(tape, vars, ctx, pos, loss);
        }
        for (std::size_t j = 0; j < group.negatives.size(); ++j) {
          const PreprocessedExample& neg = group.negatives[j];
          const ad::Var ctx = encode_tokens(tape, vars, neg.tokens);
          cand_embs.push_back(relation_embedding(tape, vars, ctx, neg.r1_pos, neg.r2_pos));
          cand_pairs.push_back(group.negative_pairs[j]);
          add_context_linking(tape, vars, ctx, neg, loss);
        }
      }
      const ad::Var cand_matrix = ad::concat_rows(cand_embs);
      for (std::size_t g = 0; g < batch.size(); ++g) {
        std::vector<int> positive_rows;
        for (std::size_t r = 0; r < cand_pairs.size(); ++r)
          if (cand_pairs[r] == batch[g].pair) positive_rows.push_back(static_cast<int>(r));
        loss.rel.push_back(
            relation_contrastive_loss(tape, anchor_embs[g], cand_matrix, positive_rows));
      }
    } else if (stage == Stage::kLm) {
      for (int b = 0; b < config.batch_size; ++b) {
        LmItem item;
        const bool use_question =
            !prepared.empty() && (lm_pool.empty() || rng.bernoulli(0.5));
        if (use_question) {
          const PreparedQuestion& pq = prepared[rng.uniform(prepared.size())];
          item = lm_item_from_question(pq, vocab);
          for (const std::string& rel : pq.relations) result.consumed_question_relations.insert(rel);
        } else {
          const AnnotatedPassage& p = (*inputs.passages)[lm_pool[rng.uniform(lm_pool.size())]];
          item = lm_item_from_passage(p, rng.uniform(p.mentions.size()), vocab);
        }
        if (item.topics.empty() ||
            static_cast<int>(item.tokens.size()) > params.config.max_seq_len) {
          ++result.skipped_examples;
          continue;
        }
        const ad::Var ctx = encode_tokens(tape, vars, item.tokens);
        const ad::Var m_e2 = mention_embedding(tape, vars, ctx, item.ent_pos);
        for (const LmTopic& topic : item.topics) {
          const ad::Var m_e1 = mention_embedding(tape, vars, ctx, topic.mention_pos);
          const ad::Var r = relation_embedding(tape, vars, ctx, topic.r1_pos, item.r2_pos);
          const TapeMix mix = tape_mix(tape, vars, *inputs.memory, params, m_e1, r, m_e2,
                                       item.answers, config.top_k, /*hop=*/1);
          loss.re.push_back(mix.l_re);
          loss.mel.push_back(masked_entity_loss(tape, mix.mixed, vars.entity_table, item.answers));
          loss.el.push_back(entity_linking_loss(tape, m_e1, vars.entity_table, topic.entity));
        }
      }
    } else {  // Stage::kFollowFinetune
      for (int b = 0; b < config.batch_size; ++b) {
        const PreparedQuestion& pq = prepared[rng.uniform(prepared.size())];
        if (pq.topic_mentions.size() != 1) {
          ++result.skipped_examples;
          continue;
        }
        const int hops = std::min(std::max(pq.hops, 1), params.config.max_hops);
        PreprocessedExample ex =
            preprocess_question(pq.tokens, pq.topic_mentions.front(), QuestionMode::kMaskedTopic, vocab);
        if (static_cast<int>(ex.tokens.size()) > params.config.max_seq_len) {
          ++result.skipped_examples;
          continue;
        }
        for (const std::string& rel : pq.relations) result.consumed_question_relations.insert(rel);

        const ad::Var ctx = encode_tokens(tape, vars, ex.tokens);
        const ad::Var r = relation_embedding(tape, vars, ctx, ex.r1_pos, ex.r2_pos);

        // Hop 1 input: the topic singleton with unit weight.
        const EntityId topic_id = pq.topic_mentions.front().entity;
        std::set<EntityId> support = {topic_id};
        Mat w0 = Mat::Ones(1, 1);
        ad::Var centroid_var =
            ad::matmul(tape.constant(std::move(w0)), ad::gather_rows(vars.entity_table, {topic_id}));

        bool dead_end = false;
        for (int hop = 1; hop <= hops && !dead_end; ++hop) {
          const ad::Var query = hop_query(tape, vars, centroid_var, r, hop);
          const std::vector<int> selection =
              select_entries(*inputs.memory, query.value(), config.top_k, &support);
          if (selection.empty()) {
            dead_end = true;
            break;
          }
          const ad::Var keys = stored_keys(tape, *inputs.memory, selection);
          const ad::Var scores = ad::matmul_nt(query, keys);
          const ad::Var beta = ad::softmax_rows(scores);
          if (hop == hops) {
            loss.follow.push_back(
                indicator_retrieval_loss(tape, beta, correct_columns(*inputs.memory, selection,
                                                                     pq.answer_ids)));
          } else {
            // β over the kept hits doubles as the truncated-and-renormalized
            // entity weights; repeated value rows sum by linearity of the
            // weighted average, so no explicit per-entity aggregation needed.
            std::vector<int> value_rows;
            support.clear();
            for (int idx : selection) {
              const EntityId v = inputs.memory->entries[static_cast<std::size_t>(idx)].value_entity;
              value_rows.push_back(v);
              support.insert(v);
            }
            centroid_var = ad::matmul(beta, ad::gather_rows(vars.entity_table, value_rows));
          }
        }
        if (dead_end) {
          ++result.skipped_examples;
          continue;
        }
      }
    }

    // --- combine, report, step ---
    LossReport report;
    report.step = step;
    std::vector<ad::Var> parts;
    if (!loss.rel.empty()) {
      const ad::Var v = mean_of(tape, loss.rel);
      report.l_rel = v.scalar();
      parts.push_back(v);
    }
    if (!loss.el.empty()) {
      const ad::Var v = mean_of(tape, loss.el);
      report.l_el = v.scalar();
      parts.push_back(v);
    }
    if (!loss.re.empty()) {
      const ad::Var v = mean_of(tape, loss.re);
      report.l_re = v.scalar();
      parts.push_back(v);
    }
    if (!loss.mel.empty()) {
      const ad::Var v = mean_of(tape, loss.mel);
      report.l_mel = v.scalar();
      parts.push_back(v);
    }
    if (!loss.follow.empty()) {
      const ad::Var v = mean_of(tape, loss.follow);
      report.l_follow = v.scalar();
      parts.push_back(v);
    }
    if (parts.empty()) {
      report.total = 0.0;
      report.grad_norm = 0.0;
    } else {
      const ad::Var total = parts.size() == 1 ? parts.front() : ad::add_n(parts);
      report.total = total.scalar();
      if (!std::isfinite(report.total))
        throw NonFiniteGradientError("non-finite loss at step " + std::to_string(step));
      tape.backward(total);
      report.grad_norm = apply_gradients(tape, bound.bindings, config, opt);
    }

    if (step % config.report_every == 0 || step + 1 == config.steps) {
      result.reports.push_back(report);
      if (metrics != nullptr) *metrics << to_json_line(report) << "\n";
    }
  }
  return result;
}

// ---- gradient check ---------------------------------------------------------------

GradCheckReport gradient_check(ModelParams& params,
                               const std::function<ad::Var(ad::Tape&, BoundParams&)>& make_loss,
                               const GradCheckOptions& options) {
  // Analytic gradients.
  std::map<std::string, Mat> analytic;
  {
    ad::Tape tape;
    BoundParams bound = bind_params(tape, params);
    const ad::Var loss = make_loss(tape, bound);
    tape.backward(loss);
    for (const ParamBinding& b : bound.bindings) analytic[b.name] = tape.grad(b.var.index());
  }

  const auto eval_loss = [&]() {
    ad::Tape tape;
    BoundParams bound = bind_params(tape, params);
    return make_loss(tape, bound).scalar();
  };

  GradCheckReport report;
  Rng rng(options.seed);
  std::vector<std::pair<std::string, Mat*>> tensors;
  params.for_each_tensor([&tensors](const std::string& name, Mat& m) {
    tensors.emplace_back(name, &m);
  });

  for (auto& [name, tensor] : tensors) {
    const Mat& g = analytic.at(name);
    const std::size_t total = static_cast<std::size_t>(tensor->size());
    std::vector<std::size_t> coords;
    if (total <= static_cast<std::size_t>(options.coords_per_tensor)) {
      coords.resize(total);
      for (std::size_t i = 0; i < total; ++i) coords[i] = i;
    } else {
      coords = rng.sample_without_replacement(total, static_cast<std::size_t>(options.coords_per_tensor));
    }
    for (std::size_t flat : coords) {
      const Eigen::Index i = static_cast<Eigen::Index>(flat) / tensor->cols();
      const Eigen::Index j = static_cast<Eigen::Index>(flat) % tensor->cols();
      const double orig = (*tensor)(i, j);
      (*tensor)(i, j) = orig + options.epsilon;
      const double f_plus = eval_loss();
      (*tensor)(i, j) = orig - options.epsilon;
      const double f_minus = eval_loss();
      (*tensor)(i, j) = orig;
      const double fd = (f_plus - f_minus) / (2.0 * options.epsilon);
      const double an = g(i, j);
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-2});
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_tensor = name;
      }
    }
  }
  return report;
}

}  // namespace opql
