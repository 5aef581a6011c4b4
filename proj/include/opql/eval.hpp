#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "opql/corpus.hpp"
#include "opql/encoder.hpp"
#include "opql/lm.hpp"
#include "opql/memory.hpp"
#include "opql/training.hpp"
#include "opql/types.hpp"
#include "opql/vocab.hpp"

namespace opql {

struct QuestionRecord {
  std::string question_id;  // index within the split, stringified
  std::vector<std::string> predicted;  // top-ranked entities (best first, at most a handful)
  std::vector<std::string> gold;
  int best_gold_rank = -1;  // 1-based rank of the best gold entity; -1 = not ranked
  bool covered = false;     // answer pair reachable through the memory
  bool hit = false;
};

struct EvalReport {
  std::string split;
  double hits_at_1 = 0.0;
  double hits_at_1_covered = 0.0;  // restricted to covered questions
  double memory_coverage = 0.0;
  std::size_t total = 0;
  std::size_t covered_count = 0;
  std::vector<QuestionRecord> records;
};

std::string to_json(const EvalReport& report);            // summary object
std::string to_json_line(const QuestionRecord& record);   // one JSONL row

// Fraction of questions whose top-ranked entity is in the gold set; empty
// predictions count as misses. Throws LengthMismatchError.
double hits_at_1(const std::vector<std::vector<EntityId>>& ranked,
                 const std::vector<std::set<EntityId>>& gold);

// Exact breadth-wise composition over the symbolic KB. Throws
// UnknownRelationError for out-of-range relation ids.
std::set<EntityId> symbolic_follow(const SymbolicKB& kb, const std::set<EntityId>& x,
                                   const std::vector<RelationId>& relations);

// ---- QA evaluation -----------------------------------------------------------

struct QaOptions {
  int top_k = 10;
  bool force_lambda_zero = false;  // LM ablation: mixed = m_e2
  std::string split_name;
};

// Single-question inference, shared by the evaluators and the CLI. Hops are
// clamped to the model's range; EmptyIntermediateError propagates.
WeightedEntitySet answer_follow(const KeyValueMemory& memory, const ModelParams& params,
                                const PreparedQuestion& question, const Vocab& token_vocab,
                                int top_k);

// LM-mode counterpart: surface-topic encoding, null-gated mixing (conjunction
// when the question has several topics, chained when hops > 1, the answer
// slot embedding reused each hop). force_lambda_zero yields mixed = m_e2.
MixResult answer_lm(const KeyValueMemory& memory, const ModelParams& params,
                    const PreparedQuestion& question, const Vocab& token_vocab, int top_k,
                    bool force_lambda_zero);

// Follow-mode QA: masked-topic question encoding, one relation embedding,
// multi-hop follow with the sparse filter. Questions that cannot be prepared
// count as misses.
EvalReport evaluate_follow(const KeyValueMemory& memory, const ModelParams& params,
                           const std::vector<Question>& questions, const Vocab& token_vocab,
                           const Vocab& entity_vocab, const QaOptions& options);

// LM-mode QA: surface-topic encoding, null-gated mixing, predict_entity over
// the mixed vector; conjunction questions mix per topic, multi-hop questions
// reuse the answer slot embedding each hop.
EvalReport evaluate_lm(const KeyValueMemory& memory, const ModelParams& params,
                       const std::vector<Question>& questions, const Vocab& token_vocab,
                       const Vocab& entity_vocab, const QaOptions& options);

// ---- diagnostics ---------------------------------------------------------------

struct MarginReport {
  double within = 0.0;
  double between = 0.0;
  double margin = 0.0;  // within − between
};

// Mean cosine similarity of relation embeddings within vs across groups.
// Requires ≥2 groups with ≥2 members each (InsufficientExamplesError).
MarginReport relation_embedding_margin(const std::map<RelationId, std::vector<Mat>>& by_relation);

// Convenience: encodes grouped examples first (both mentions masked upstream).
MarginReport relation_embedding_margin(
    const std::map<RelationId, std::vector<PreprocessedExample>>& by_relation,
    const ModelParams& params);

// ---- label-supervised baseline ---------------------------------------------------

// Softmax regression over bag-of-token counts predicting the relation label;
// answers come from symbolic_follow with the predicted relation. This is the
// distant-supervision contrast case for the holdout experiment: it can only
// ever predict labels it saw.
class RelationClassifierBaseline {
 public:
  RelationClassifierBaseline(int token_vocab_size, int relation_vocab_size);

  void train(const std::vector<std::vector<TokenId>>& questions,
             const std::vector<RelationId>& labels, int epochs, double learning_rate,
             std::uint64_t seed);

  RelationId predict(const std::vector<TokenId>& question) const;

 private:
  Mat weights_;  // token_vocab x relations
  Mat bias_;     // 1 x relations
};

// Evaluates the baseline on questions whose `relations` field is filled:
// predict relation, follow symbolically from the topic, rank answers by id.
EvalReport evaluate_baseline(const RelationClassifierBaseline& classifier, const SymbolicKB& kb,
                             const std::vector<Question>& questions, const Vocab& token_vocab,
                             const Vocab& entity_vocab, const std::string& split_name);

// ---- held-out relation protocol ---------------------------------------------------

struct HoldoutEvalConfig {
  TrainConfig relation_config;  // stage forced to relation (label-free, full corpus)
  // Label-free retrieval pretraining over the corpus; trains the query maps
  // on every relation direction in the memory, which is what lets queries
  // for never-finetuned relations still land on the right keys. Skipped when
  // lm_config.steps == 0 (the default).
  TrainConfig lm_config{.steps = 0};
  TrainConfig follow_config;  // stage forced to follow-finetune (seen questions only)
  // Mix question_relation_passages built from the seen training questions
  // into the relation stage, adapting the encoder to question syntax without
  // touching held-out relations.
  bool question_format_pretraining = true;
  int min_pair_count = 2;
  std::size_t max_pairs = 0;  // 0 = unlimited
  DedupMode dedup = DedupMode::kAllMentions;
  int max_mentions = 5;
  int top_k = 10;
  std::uint64_t seed = 0;
  int baseline_epochs = 200;
  double baseline_learning_rate = 0.5;
};

struct HoldoutEvalResult {
  EvalReport seen;
  EvalReport novel;
  EvalReport baseline_seen;
  EvalReport baseline_novel;
  // Relation labels the trainer consumed; must never intersect the holdout.
  std::set<std::string> audited_relations;
};

// Pretrains label-free on the full corpus, builds the memory over the full
// corpus, finetunes follow only on questions of non-held-out relations, and
// evaluates 1-hop questions split by whether they require a held-out
// relation. The supervised baseline trains on the same seen questions with
// their labels. Throws ConfigError when the holdout is empty or leaves fewer
// than two training relations.
HoldoutEvalResult holdout_relation_eval(const SynthCorpus& corpus,
                                        const std::set<RelationId>& holdout,
                                        const EncoderConfig& encoder_config,
                                        const HoldoutEvalConfig& config);

}  // namespace opql
