#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "opql/autograd.hpp"
#include "opql/corpus.hpp"
#include "opql/encoder.hpp"
#include "opql/memory.hpp"
#include "opql/types.hpp"
#include "opql/vocab.hpp"

namespace opql {

enum class Stage { kEntity, kRelation, kLm, kFollowFinetune };

std::string to_string(Stage stage);
Stage stage_from_string(const std::string& text);  // throws ConfigError

struct TrainConfig {
  Stage stage = Stage::kRelation;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";  // "adam" | "sgd"
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 8;   // groups (relation stage) or examples per step
  int steps = 100;
  double clip_norm = 1.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;
  std::vector<std::string> frozen;  // tensor names or the "encoder" alias
  int top_k = 10;  // retrieval fan-out in lm / follow-finetune stages
  int hops = 1;    // follow-finetune chain length
  int report_every = 10;

  void validate() const;  // throws ConfigError
};

struct LossReport {
  int step = 0;
  double l_rel = 0.0;
  double l_el = 0.0;
  double l_re = 0.0;
  double l_mel = 0.0;
  double l_follow = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

std::string to_json_line(const LossReport& report);

// ---- loss graphs (tape-side) ----------------------------------------------

// Marginal cross-entropy of anchor·candidateᵀ scores over the rows whose pair
// matches the anchor's. Throws NoPositiveError when positive_rows is empty.
ad::Var relation_contrastive_loss(ad::Tape& tape, const ad::Var& anchor_emb,
                                  const ad::Var& candidate_embs,
                                  const std::vector<int>& positive_rows);

// Full-softmax cross-entropy of a mention embedding against the entity table.
ad::Var entity_linking_loss(ad::Tape& tape, const ad::Var& mention_emb,
                            const ad::Var& entity_table, EntityId gold);

// Marginal cross-entropy of softmax(mixedᵀE) over the answer set.
ad::Var masked_entity_loss(ad::Tape& tape, const ad::Var& mixed, const ad::Var& entity_table,
                           const std::set<EntityId>& answers);

// −log(clamp(Σ_correct β, ε)) over a probability row; the shared form of the
// retrieval and follow losses. Empty `correct_cols` yields the constant floor.
ad::Var indicator_retrieval_loss(ad::Tape& tape, const ad::Var& probs_row,
                                 const std::vector<int>& correct_cols);

// Scalar counterpart over an inference-side retrieval (the null pseudo-entry
// is never a correct answer).
double retrieval_loss(const RetrievalResult& result, const std::set<EntityId>& answers);

// ---- optimizer --------------------------------------------------------------

// Maps frozen names (plus the "encoder" alias for the transformer stack and
// both embedding tables it feeds on) to a per-tensor trainability test.
std::function<bool(const std::string&)> trainable_predicate(const std::vector<std::string>& frozen);

struct OptimizerState {
  int t = 0;
  std::map<std::string, Mat> m;  // first moments, keyed by tensor name
  std::map<std::string, Mat> v;  // second moments
};

// Reads gradients off the tape (backward must have run), checks finiteness,
// applies the global-norm clip, and updates every trainable binding in place.
// Returns the pre-clip gradient norm. Throws NonFiniteGradientError.
double apply_gradients(ad::Tape& tape, const std::vector<ParamBinding>& bindings,
                       const TrainConfig& config, OptimizerState& state);

// ---- stage driver -----------------------------------------------------------

struct TrainInputs {
  const std::vector<AnnotatedPassage>* passages = nullptr;
  const PairVocabulary* pair_vocab = nullptr;  // relation stage
  const Vocab* token_vocab = nullptr;
  const Vocab* entity_vocab = nullptr;         // needed when questions are given
  const KeyValueMemory* memory = nullptr;      // lm / follow-finetune stages
  const std::vector<Question>* questions = nullptr;  // follow-finetune; optional lm mix-in
};

struct TrainResult {
  std::vector<LossReport> reports;
  // Relation labels of every consumed question; holdout runs audit this.
  std::set<std::string> consumed_question_relations;
  int skipped_examples = 0;
};

TrainResult train_stage(ModelParams& params, const TrainInputs& inputs, const TrainConfig& config,
                        std::ostream* metrics = nullptr);

// ---- finite-difference gradient check ---------------------------------------

struct GradCheckOptions {
  int coords_per_tensor = 20;
  double epsilon = 1e-4;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  int coords_checked = 0;
};

// Central differences against reverse-mode gradients for every trainable
// tensor; `make_loss` must rebuild the identical scalar loss on a fresh tape.
GradCheckReport gradient_check(ModelParams& params,
                               const std::function<ad::Var(ad::Tape&, BoundParams&)>& make_loss,
                               const GradCheckOptions& options);

}  // namespace opql
