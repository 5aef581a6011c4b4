#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "opql/rng.hpp"
#include "opql/types.hpp"
#include "opql/vocab.hpp"

namespace opql {

// Whitespace-split, lowercased tokens mapped to ids; OOV maps to [UNK].
std::vector<TokenId> tokenize(const std::string& text, const Vocab& vocab);

struct SynthConfig {
  int entities = 50;
  int relations = 8;
  int facts_per_relation = 50;
  int templates_per_relation = 3;
  int passages_per_fact = 3;
  double distractor_rate = 0.5;
  // Questions rendered per relation and split by fact so train and test
  // never share a (subject, relation) query.
  int questions_1hop_per_relation = 30;
  int questions_2hop = 120;
  int questions_conjunction = 40;
  double question_test_fraction = 0.3;
  // Fraction of facts withheld from the main corpus; their passages and
  // questions are emitted separately to exercise memory injection.
  double heldout_fact_fraction = 0.0;
  // Fresh per-relation renderings of training facts kept out of the corpus,
  // for held-out embedding diagnostics.
  int eval_passages_per_relation = 10;
};

struct SynthQuestions {
  std::vector<Question> train_1hop, test_1hop;
  std::vector<Question> train_2hop, test_2hop;
  std::vector<Question> conjunction;
  std::vector<Question> heldout_1hop;  // questions over held-out facts
};

struct SynthCorpus {
  std::vector<AnnotatedPassage> passages;
  std::vector<RelationId> passage_relations;  // true relation behind each passage
  std::vector<AnnotatedPassage> heldout_passages;
  std::vector<RelationId> heldout_passage_relations;
  // Fresh renderings of training facts that the corpus itself never contains;
  // used for held-out relation-embedding diagnostics.
  std::vector<AnnotatedPassage> eval_passages;
  std::vector<RelationId> eval_passage_relations;
  SymbolicKB kb;  // all facts, including held-out ones
  std::vector<SymbolicKB::Fact> heldout_facts;
  Vocab token_vocab;
  Vocab entity_vocab;
  SynthQuestions questions;
};

// Deterministic synthetic corpus + ground-truth KB. Every fact is rendered by
// `passages_per_fact` passages; some passages carry an extra context mention.
SynthCorpus generate_synthetic_corpus(const SynthConfig& config, std::uint64_t seed);

// Entity surface forms are the '_'-separated pieces of the entity name.
std::vector<std::string> entity_surface(const std::string& entity_name);

// Locates the first mention of `entity` in `tokens` by surface-form match.
std::optional<Mention> locate_mention(const std::vector<TokenId>& tokens, EntityId entity,
                                      const Vocab& token_vocab, const Vocab& entity_vocab);

// Directional co-occurrence counting + PMI ranking over a corpus.
PairVocabulary extract_entity_pairs(const std::vector<AnnotatedPassage>& corpus, int min_count,
                                    std::size_t max_pairs);

// [R1]/[R2] insertion and optional [ENT] masking for a pair mention.
// Uses the first mention of each endpoint. Throws MissingMentionError.
PreprocessedExample preprocess_relation_example(const AnnotatedPassage& passage, const EntityPair& pair,
                                                bool mask_topic, bool mask_target, const Vocab& vocab);

// A question with names resolved to ids and topic mentions located in its
// token sequence (ascending start order).
struct PreparedQuestion {
  std::vector<TokenId> tokens;
  std::vector<Mention> topic_mentions;  // aligned with topic ids
  std::set<EntityId> answer_ids;
  int hops = 1;
  std::vector<std::string> relations;
};

// Resolves names via the vocabularies (throws UnknownEntityError) and locates
// each topic's surface form; nullopt when a topic cannot be found in the text.
std::optional<PreparedQuestion> prepare_question(const Question& question, const Vocab& token_vocab,
                                                 const Vocab& entity_vocab);

// Distantly-supervised relation-encoder documents built from questions: the
// question text keeps its topic mention and gains the first listed answer as
// a target mention appended at the end, so the masked relation example reads
// exactly like an answered question. Intended for single-hop questions;
// questions whose topic cannot be located or with no answer are skipped.
std::vector<AnnotatedPassage> question_relation_passages(const std::vector<Question>& questions,
                                                         const Vocab& token_vocab,
                                                         const Vocab& entity_vocab);

enum class QuestionMode { kMaskedTopic, kSurfaceTopic };

// Appends the "[ENT] [R2]" answer slot and inserts [R1] after the topic
// mention; masked-topic mode also replaces the topic span with [ENT].
PreprocessedExample preprocess_question(const std::vector<TokenId>& question_tokens,
                                        const Mention& topic_mention, QuestionMode mode,
                                        const Vocab& vocab);

// Conjunction variant: one [R1] per topic mention, shared answer slot.
// Mentions must be given in ascending start order.
PreprocessedExample preprocess_conjunction_question(const std::vector<TokenId>& question_tokens,
                                                    const std::vector<Mention>& topic_mentions,
                                                    QuestionMode mode, const Vocab& vocab);

// One contrastive group: an anchor, 2 positives on the same pair, 8 hard
// negatives sharing exactly one endpoint.
struct RelationBatchItem {
  PreprocessedExample anchor;
  std::vector<PreprocessedExample> positives;
  std::vector<PreprocessedExample> negatives;
  EntityPair pair;
  std::vector<EntityPair> negative_pairs;
};

struct RelationBatchConfig {
  int positives = 2;
  int hard_negatives = 8;
  int groups_per_batch = 8;
};

// Seeded, reproducible stream of contrastive batches. Pairs lacking two
// distinct supporting passages are dropped (with a warning to the log).
class RelationBatchStream {
 public:
  RelationBatchStream(const std::vector<AnnotatedPassage>& corpus, const PairVocabulary& pair_vocab,
                      const RelationBatchConfig& config, Rng rng, const Vocab& vocab);

  // Next batch of groups; wraps around the pair list indefinitely.
  std::vector<RelationBatchItem> next();

  std::size_t usable_pairs() const { return order_.size(); }

 private:
  struct PairSupport {
    EntityPair pair;
    std::vector<std::size_t> passages;  // indices into corpus
  };

  PreprocessedExample example_for(std::size_t support_idx, std::size_t passage_idx) const;

  const std::vector<AnnotatedPassage>& corpus_;
  const Vocab& vocab_;
  RelationBatchConfig config_;
  Rng rng_;
  std::vector<PairSupport> supports_;
  std::vector<std::vector<std::size_t>> by_topic_;   // entity -> support indices
  std::vector<std::vector<std::size_t>> by_target_;  // entity -> support indices
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace opql
