#include "opql/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "opql/errors.hpp"

namespace opql {

bool SymbolicKB::contains(EntityId s, RelationId r, EntityId o) const {
  return std::binary_search(facts.begin(), facts.end(), Fact{s, r, o});
}

std::vector<TokenId> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<TokenId> out;
  std::string word;
  std::istringstream in(text);
  const int unk = vocab.unk();
  while (in >> word) {
    for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.push_back(vocab.id_or(word, unk));
  }
  return out;
}

std::vector<std::string> entity_surface(const std::string& entity_name) {
  std::vector<std::string> parts;
  std::string piece;
  for (char c : entity_name) {
    if (c == '_') {
      if (!piece.empty()) parts.push_back(piece);
      piece.clear();
    } else {
      piece.push_back(c);
    }
  }
  if (!piece.empty()) parts.push_back(piece);
  return parts;
}

std::optional<Mention> locate_mention(const std::vector<TokenId>& tokens, EntityId entity,
                                      const Vocab& token_vocab, const Vocab& entity_vocab) {
  const auto surface = entity_surface(entity_vocab.name(entity));
  if (surface.empty()) return std::nullopt;
  std::vector<TokenId> ids;
  ids.reserve(surface.size());
  for (const auto& w : surface) {
    if (!token_vocab.contains(w)) return std::nullopt;
    ids.push_back(token_vocab.id(w));
  }
  if (tokens.size() < ids.size()) return std::nullopt;
  for (std::size_t i = 0; i + ids.size() <= tokens.size(); ++i) {
    if (std::equal(ids.begin(), ids.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
      return Mention{static_cast<int>(i), static_cast<int>(i + ids.size()) - 1, entity};
    }
  }
  return std::nullopt;
}

// --- special-token insertion core ----------------------------------------

namespace {

struct SpanPlan {
  Mention mention;
  bool mask = false;
  TokenId marker = 0;
};

struct InsertionResult {
  std::vector<TokenId> tokens;
  std::vector<int> marker_pos;  // aligned with the plan list
  std::vector<int> new_pos;     // original index -> new index, -1 if masked away
};

// Single left-to-right pass: copies tokens, replaces masked spans with one
// [ENT], and drops the marker right after each span. Spans must be disjoint
// and in ascending start order.
InsertionResult insert_markers(const std::vector<TokenId>& tokens, const std::vector<SpanPlan>& plans,
                               const Vocab& vocab) {
  const int n = static_cast<int>(tokens.size());
  for (std::size_t p = 0; p < plans.size(); ++p) {
    const Mention& m = plans[p].mention;
    if (m.start < 0 || m.end < m.start || m.end >= n)
      throw MissingMentionError("mention span [" + std::to_string(m.start) + ", " +
                                std::to_string(m.end) + "] out of range for passage of length " +
                                std::to_string(n));
    if (p > 0 && plans[p - 1].mention.end >= m.start)
      throw MissingMentionError("marked mention spans overlap");
  }
  InsertionResult res;
  res.marker_pos.assign(plans.size(), -1);
  res.new_pos.assign(tokens.size(), -1);
  std::size_t p = 0;
  int i = 0;
  while (i < n) {
    if (p < plans.size() && plans[p].mention.start == i) {
      const SpanPlan& pl = plans[p];
      if (pl.mask) {
        res.tokens.push_back(vocab.ent());
      } else {
        for (int t = pl.mention.start; t <= pl.mention.end; ++t) {
          res.new_pos[static_cast<std::size_t>(t)] = static_cast<int>(res.tokens.size());
          res.tokens.push_back(tokens[static_cast<std::size_t>(t)]);
        }
      }
      res.marker_pos[p] = static_cast<int>(res.tokens.size());
      res.tokens.push_back(pl.marker);
      i = pl.mention.end + 1;
      ++p;
    } else {
      res.new_pos[static_cast<std::size_t>(i)] = static_cast<int>(res.tokens.size());
      res.tokens.push_back(tokens[static_cast<std::size_t>(i)]);
      ++i;
    }
  }
  return res;
}

bool spans_overlap(const Mention& a, const Mention& b) {
  return a.start <= b.end && b.start <= a.end;
}

// First mention (lowest start, then lowest end) of `entity` in the passage.
std::optional<Mention> first_mention_of(const AnnotatedPassage& passage, EntityId entity) {
  std::optional<Mention> best;
  for (const Mention& m : passage.mentions) {
    if (m.entity != entity) continue;
    if (!best || m.start < best->start || (m.start == best->start && m.end < best->end)) best = m;
  }
  return best;
}

}  // namespace

PreprocessedExample preprocess_relation_example(const AnnotatedPassage& passage, const EntityPair& pair,
                                                bool mask_topic, bool mask_target, const Vocab& vocab) {
  const auto topic = first_mention_of(passage, pair.topic);
  const auto target = first_mention_of(passage, pair.target);
  if (!topic)
    throw MissingMentionError("passage " + passage.passage_id + " has no mention of topic entity " +
                              std::to_string(pair.topic));
  if (!target)
    throw MissingMentionError("passage " + passage.passage_id + " has no mention of target entity " +
                              std::to_string(pair.target));
  if (spans_overlap(*topic, *target))
    throw MissingMentionError("topic and target mentions overlap in passage " + passage.passage_id);

  std::vector<SpanPlan> plans = {{*topic, mask_topic, vocab.r1()},
                                 {*target, mask_target, vocab.r2()}};
  const bool topic_first = topic->start < target->start;
  if (!topic_first) std::swap(plans[0], plans[1]);

  InsertionResult ins = insert_markers(passage.tokens, plans, vocab);

  PreprocessedExample ex;
  ex.tokens = std::move(ins.tokens);
  ex.r1_pos = ins.marker_pos[topic_first ? 0 : 1];
  ex.r2_pos = ins.marker_pos[topic_first ? 1 : 0];
  ex.pair = pair;
  for (const Mention& m : passage.mentions) {
    if (m == *topic || m == *target) continue;
    if (spans_overlap(m, *topic) || spans_overlap(m, *target)) continue;
    const int ns = ins.new_pos[static_cast<std::size_t>(m.start)];
    const int ne = ins.new_pos[static_cast<std::size_t>(m.end)];
    if (ns < 0 || ne < 0) continue;
    ex.context_mentions.push_back(Mention{ns, ne, m.entity});
  }
  return ex;
}

namespace {

PreprocessedExample make_question_example(const std::vector<TokenId>& question_tokens,
                                          std::vector<Mention> topics, QuestionMode mode,
                                          const Vocab& vocab) {
  std::sort(topics.begin(), topics.end(),
            [](const Mention& a, const Mention& b) { return a.start < b.start; });
  const bool mask = mode == QuestionMode::kMaskedTopic;
  std::vector<SpanPlan> plans;
  plans.reserve(topics.size());
  for (const Mention& m : topics) plans.push_back({m, mask, vocab.r1()});

  InsertionResult ins = insert_markers(question_tokens, plans, vocab);

  PreprocessedExample ex;
  ex.tokens = std::move(ins.tokens);
  // Answer slot: a masked target mention at the very end.
  const int answer_ent_pos = static_cast<int>(ex.tokens.size());
  ex.tokens.push_back(vocab.ent());
  ex.r2_pos = static_cast<int>(ex.tokens.size());
  ex.tokens.push_back(vocab.r2());

  ex.r1_pos = ins.marker_pos[0];
  for (std::size_t p = 1; p < plans.size(); ++p) ex.extra_r1_pos.push_back(ins.marker_pos[p]);

  // context_mentions[i] is the i-th topic, aligned with the i-th [R1];
  // a masked topic is represented by its [ENT] placeholder token.
  for (std::size_t p = 0; p < plans.size(); ++p) {
    const Mention& m = plans[p].mention;
    if (mask) {
      const int ent_pos = ins.marker_pos[p] - 1;
      ex.context_mentions.push_back(Mention{ent_pos, ent_pos, m.entity});
    } else {
      ex.context_mentions.push_back(Mention{ins.new_pos[static_cast<std::size_t>(m.start)],
                                            ins.new_pos[static_cast<std::size_t>(m.end)], m.entity});
    }
  }
  ex.pair.topic = topics.front().entity;
  ex.pair.target = -1;  // unknown answer
  (void)answer_ent_pos;  // always r2_pos - 1
  return ex;
}

}  // namespace

PreprocessedExample preprocess_question(const std::vector<TokenId>& question_tokens,
                                        const Mention& topic_mention, QuestionMode mode,
                                        const Vocab& vocab) {
  return make_question_example(question_tokens, {topic_mention}, mode, vocab);
}

PreprocessedExample preprocess_conjunction_question(const std::vector<TokenId>& question_tokens,
                                                    const std::vector<Mention>& topic_mentions,
                                                    QuestionMode mode, const Vocab& vocab) {
  if (topic_mentions.empty()) throw MissingMentionError("conjunction question has no topic mentions");
  return make_question_example(question_tokens, topic_mentions, mode, vocab);
}

std::optional<PreparedQuestion> prepare_question(const Question& question, const Vocab& token_vocab,
                                                 const Vocab& entity_vocab) {
  PreparedQuestion out;
  out.tokens.reserve(question.question_tokens.size());
  for (const std::string& w : question.question_tokens)
    out.tokens.push_back(token_vocab.id_or(w, token_vocab.unk()));

  for (const std::string& name : question.topic_entities) {
    const EntityId topic = entity_vocab.id(name);
    auto mention = locate_mention(out.tokens, topic, token_vocab, entity_vocab);
    if (!mention.has_value()) return std::nullopt;
    out.topic_mentions.push_back(*mention);
  }
  std::sort(out.topic_mentions.begin(), out.topic_mentions.end(),
            [](const Mention& a, const Mention& b) { return a.start < b.start; });

  for (const std::string& name : question.answers) out.answer_ids.insert(entity_vocab.id(name));
  out.hops = question.hops;
  out.relations = question.relations;
  return out;
}

std::vector<AnnotatedPassage> question_relation_passages(const std::vector<Question>& questions,
                                                         const Vocab& token_vocab,
                                                         const Vocab& entity_vocab) {
  std::vector<AnnotatedPassage> out;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const Question& q = questions[i];
    if (q.answers.empty() || q.topic_entities.size() != 1) continue;
    const auto pq = prepare_question(q, token_vocab, entity_vocab);
    if (!pq.has_value()) continue;
    AnnotatedPassage p;
    p.passage_id = "question-" + std::to_string(i);
    p.tokens = pq->tokens;
    p.mentions.push_back(pq->topic_mentions.front());
    const EntityId answer = entity_vocab.id(q.answers.front());
    const int start = static_cast<int>(p.tokens.size());
    for (const std::string& word : entity_surface(q.answers.front()))
      p.tokens.push_back(token_vocab.id_or(word, token_vocab.unk()));
    p.mentions.push_back(Mention{start, static_cast<int>(p.tokens.size()) - 1, answer});
    out.push_back(std::move(p));
  }
  return out;
}

// --- pair mining ----------------------------------------------------------

PairVocabulary extract_entity_pairs(const std::vector<AnnotatedPassage>& corpus, int min_count,
                                    std::size_t max_pairs) {
  if (corpus.empty()) throw EmptySetError("extract_entity_pairs: corpus is empty");
  // A pair co-occurs in a passage if both entities are mentioned; directional,
  // counted once per passage.
  std::map<EntityPair, std::int64_t> counts;
  for (const AnnotatedPassage& passage : corpus) {
    std::set<EntityId> present;
    for (const Mention& m : passage.mentions) present.insert(m.entity);
    for (EntityId e1 : present)
      for (EntityId e2 : present)
        if (e1 != e2) ++counts[EntityPair{e1, e2}];
  }
  std::int64_t total = 0;
  std::map<EntityId, std::int64_t> topic_marginal, target_marginal;
  for (const auto& [pair, c] : counts) {
    total += c;
    topic_marginal[pair.topic] += c;
    target_marginal[pair.target] += c;
  }

  struct Scored {
    EntityPair pair;
    std::int64_t count;
    double pmi;
  };
  std::vector<Scored> scored;
  for (const auto& [pair, c] : counts) {
    if (c < min_count) continue;
    const double pmi =
        std::log(static_cast<double>(c) * static_cast<double>(total) /
                 (static_cast<double>(topic_marginal[pair.topic]) *
                  static_cast<double>(target_marginal[pair.target])));
    scored.push_back({pair, c, pmi});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.pmi != b.pmi) return a.pmi > b.pmi;
    return a.pair < b.pair;
  });
  if (max_pairs > 0 && scored.size() > max_pairs) scored.resize(max_pairs);

  PairVocabulary out;
  out.pairs.reserve(scored.size());
  for (const Scored& s : scored) {
    out.pairs.push_back(s.pair);
    out.counts.push_back(s.count);
    out.pmi.push_back(s.pmi);
  }
  return out;
}

// --- synthetic corpus -------------------------------------------------------

namespace {

struct RelationTheme {
  const char* name;
  const char* vp;  // verb phrase shared by statements and questions
};

// Active relations are the first SynthConfig::relations entries.
constexpr RelationTheme kThemes[] = {
    {"mentors", "mentors"},   {"employs", "employs"},   {"admires", "admires"},
    {"funds", "funds"},       {"visits", "visits"},     {"defends", "defends"},
    {"studies", "studies"},   {"supplies", "supplies"}, {"rivals", "rivals"},
    {"praises", "praises"},   {"shelters", "shelters"}, {"trains", "trains"},
};
constexpr int kThemeCount = static_cast<int>(sizeof(kThemes) / sizeof(kThemes[0]));

constexpr const char* kAdjectives[] = {"amber", "silver",  "crimson", "golden", "ivory",  "cobalt",
                                       "emerald", "scarlet", "violet", "umber",  "azure",  "coral",
                                       "onyx",  "pearl",   "russet",  "slate"};
constexpr const char* kAnimals[] = {"falcon", "heron",  "otter",  "badger", "lynx",   "marten",
                                    "osprey", "plover", "stoat",  "vole",   "weasel", "curlew",
                                    "dunlin", "gannet", "kestrel", "merlin"};

const std::vector<std::string> kPrefixPool = {"reportedly", "indeed",          "curiously",
                                              "sources say", "by all accounts", "notably"};
const std::vector<std::string> kSuffixPool = {"these days", "for years",    "without fail",
                                              "at the harbor", "since spring", "most weekends"};
const std::vector<std::string> kDistractorPool = {", unlike", ", far from", ", beside"};
const std::vector<std::string> kQuestionPrefixPool = {"", "so", "we ask :", "answer this :"};

// Statement shapes; {s}/{o} are entity slots, PRE/SUF draw from the pools.
constexpr const char* kShapes[] = {"{s} VP {o}", "{s} VP {o} SUF", "PRE {s} VP {o}",
                                   "PRE {s} VP {o} SUF"};
constexpr int kShapeCount = static_cast<int>(sizeof(kShapes) / sizeof(kShapes[0]));

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string w;
  std::istringstream in(text);
  while (in >> w) out.push_back(w);
  return out;
}

void add_words(Vocab& vocab, const std::string& text) {
  for (const auto& w : split_words(text)) vocab.add(w);
}

}  // namespace

SynthCorpus generate_synthetic_corpus(const SynthConfig& config, std::uint64_t seed) {
  const int num_adj = static_cast<int>(sizeof(kAdjectives) / sizeof(kAdjectives[0]));
  const int num_animal = static_cast<int>(sizeof(kAnimals) / sizeof(kAnimals[0]));
  const int max_entities = num_adj * num_animal;
  if (config.entities < 2 || config.entities > max_entities)
    throw ConfigError("entities must be in [2, " + std::to_string(max_entities) + "]");
  if (config.relations < 1 || config.relations > kThemeCount)
    throw ConfigError("relations must be in [1, " + std::to_string(kThemeCount) + "]");
  if (config.templates_per_relation < 1 || config.templates_per_relation > kShapeCount)
    throw ConfigError("templates_per_relation must be in [1, " + std::to_string(kShapeCount) + "]");
  if (config.facts_per_relation < 1) throw ConfigError("facts_per_relation must be positive");
  const std::int64_t max_facts =
      static_cast<std::int64_t>(config.entities) * (config.entities - 1);
  if (config.facts_per_relation > max_facts)
    throw ConfigError("facts_per_relation exceeds the number of distinct (subject, object) pairs");
  if (config.passages_per_fact < 1) throw ConfigError("passages_per_fact must be positive");
  if (config.distractor_rate < 0.0 || config.distractor_rate > 1.0)
    throw ConfigError("distractor_rate must be in [0, 1]");
  if (config.question_test_fraction < 0.0 || config.question_test_fraction >= 1.0)
    throw ConfigError("question_test_fraction must be in [0, 1)");
  if (config.heldout_fact_fraction < 0.0 || config.heldout_fact_fraction >= 1.0)
    throw ConfigError("heldout_fact_fraction must be in [0, 1)");

  Rng root(seed);
  Rng entity_rng = root.fork(1);
  Rng fact_rng = root.fork(2);
  Rng holdout_rng = root.fork(3);
  Rng passage_rng = root.fork(4);
  Rng question_rng = root.fork(5);

  SynthCorpus out;

  // Entities: distinct adjective-animal combinations.
  const auto combo_sample = entity_rng.sample_without_replacement(
      static_cast<std::size_t>(max_entities), static_cast<std::size_t>(config.entities));
  std::vector<std::string> entity_names;
  for (std::size_t c : combo_sample) {
    const std::string name = std::string(kAdjectives[c / num_animal]) + "_" + kAnimals[c % num_animal];
    entity_names.push_back(name);
    out.entity_vocab.add(name);
  }

  // Closed token vocabulary: specials, entity surfaces, then template words in
  // declaration order so the vocabulary depends only on the config shape.
  out.token_vocab = Vocab::with_specials({});
  for (const auto& name : entity_names)
    for (const auto& w : entity_surface(name)) out.token_vocab.add(w);
  for (int r = 0; r < config.relations; ++r) add_words(out.token_vocab, kThemes[r].vp);
  for (const auto& s : kPrefixPool) add_words(out.token_vocab, s);
  for (const auto& s : kSuffixPool) add_words(out.token_vocab, s);
  for (const auto& s : kDistractorPool) add_words(out.token_vocab, s);
  for (const auto& s : kQuestionPrefixPool) add_words(out.token_vocab, s);
  add_words(out.token_vocab, "which one ? the that also and");

  // Facts.
  std::set<SymbolicKB::Fact> fact_set;
  for (RelationId r = 0; r < config.relations; ++r) {
    int made = 0;
    while (made < config.facts_per_relation) {
      const EntityId s = static_cast<EntityId>(fact_rng.uniform(entity_names.size()));
      const EntityId o = static_cast<EntityId>(fact_rng.uniform(entity_names.size()));
      if (s == o) continue;
      if (fact_set.insert(SymbolicKB::Fact{s, r, o}).second) ++made;
    }
  }
  out.kb.facts.assign(fact_set.begin(), fact_set.end());
  for (int r = 0; r < config.relations; ++r) {
    out.kb.relation_names.emplace_back(kThemes[r].name);
    std::vector<std::string> rendered;
    for (int t = 0; t < config.templates_per_relation; ++t) {
      std::string shape = kShapes[t];
      const std::string vp = kThemes[r].vp;
      if (auto pos = shape.find("VP"); pos != std::string::npos) shape.replace(pos, 2, vp);
      rendered.push_back(shape);
    }
    out.kb.templates.push_back(std::move(rendered));
  }

  // Held-out facts: only facts whose (subject, relation) signature is unique
  // and whose endpoints stay covered by at least one remaining fact, so that
  // held-out questions are unanswerable before injection while every entity
  // keeps training signal.
  std::vector<char> is_heldout(out.kb.facts.size(), 0);
  if (config.heldout_fact_fraction > 0.0) {
    std::map<std::pair<EntityId, RelationId>, int> signature_count;
    for (const auto& f : out.kb.facts) ++signature_count[{f.subject, f.relation}];
    std::map<EntityId, int> incidence;
    for (const auto& f : out.kb.facts) {
      ++incidence[f.subject];
      ++incidence[f.object];
    }
    std::vector<std::size_t> order(out.kb.facts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    holdout_rng.shuffle(order);
    std::size_t want = static_cast<std::size_t>(
        config.heldout_fact_fraction * static_cast<double>(out.kb.facts.size()));
    for (std::size_t i : order) {
      if (want == 0) break;
      const auto& f = out.kb.facts[i];
      if (signature_count[{f.subject, f.relation}] != 1) continue;
      if (incidence[f.subject] < 2 || incidence[f.object] < 2) continue;
      is_heldout[i] = 1;
      --incidence[f.subject];
      --incidence[f.object];
      --want;
    }
  }
  std::vector<SymbolicKB::Fact> main_facts;
  for (std::size_t i = 0; i < out.kb.facts.size(); ++i) {
    if (is_heldout[i])
      out.heldout_facts.push_back(out.kb.facts[i]);
    else
      main_facts.push_back(out.kb.facts[i]);
  }

  // Passage rendering.
  int next_passage = 0;
  auto render_passage = [&](const SymbolicKB::Fact& fact, Rng& rng, const char* id_prefix) {
    std::vector<std::string> words;
    std::vector<Mention> mentions;
    auto push_entity = [&](EntityId e) {
      const auto surface = entity_surface(out.entity_vocab.name(e));
      const int start = static_cast<int>(words.size());
      for (const auto& w : surface) words.push_back(w);
      mentions.push_back(Mention{start, static_cast<int>(words.size()) - 1, e});
    };
    auto push_words = [&](const std::string& text) {
      for (const auto& w : split_words(text)) words.push_back(w);
    };

    const int shape = static_cast<int>(rng.uniform(config.templates_per_relation));
    const bool with_prefix = shape >= 2;
    const bool with_suffix = shape == 1 || shape == 3;
    if (with_prefix) push_words(kPrefixPool[rng.uniform(kPrefixPool.size())]);
    push_entity(fact.subject);
    push_words(kThemes[fact.relation].vp);
    push_entity(fact.object);
    if (with_suffix) push_words(kSuffixPool[rng.uniform(kSuffixPool.size())]);
    if (rng.bernoulli(config.distractor_rate)) {
      EntityId d = fact.subject;
      while (d == fact.subject || d == fact.object)
        d = static_cast<EntityId>(rng.uniform(entity_names.size()));
      push_words(kDistractorPool[rng.uniform(kDistractorPool.size())]);
      push_entity(d);
    }

    AnnotatedPassage passage;
    passage.passage_id = std::string(id_prefix) + std::to_string(next_passage++);
    passage.mentions = std::move(mentions);
    passage.tokens.reserve(words.size());
    for (const auto& w : words) passage.tokens.push_back(out.token_vocab.id(w));
    return passage;
  };

  for (const auto& fact : main_facts) {
    for (int j = 0; j < config.passages_per_fact; ++j) {
      out.passages.push_back(render_passage(fact, passage_rng, "p"));
      out.passage_relations.push_back(fact.relation);
    }
  }
  for (const auto& fact : out.heldout_facts) {
    for (int j = 0; j < config.passages_per_fact; ++j) {
      out.heldout_passages.push_back(render_passage(fact, passage_rng, "h"));
      out.heldout_passage_relations.push_back(fact.relation);
    }
  }
  // Diagnostic renderings: same facts, fresh surface draws, never part of the
  // corpus files or any training pool.
  if (config.eval_passages_per_relation > 0 && !main_facts.empty()) {
    std::vector<std::vector<const SymbolicKB::Fact*>> by_relation(
        static_cast<std::size_t>(config.relations));
    for (const auto& fact : main_facts)
      by_relation[static_cast<std::size_t>(fact.relation)].push_back(&fact);
    Rng eval_rng = passage_rng.fork(6);
    for (int r = 0; r < config.relations; ++r) {
      const auto& facts = by_relation[static_cast<std::size_t>(r)];
      if (facts.empty()) continue;
      for (int j = 0; j < config.eval_passages_per_relation; ++j) {
        const SymbolicKB::Fact& fact = *facts[eval_rng.uniform(facts.size())];
        out.eval_passages.push_back(render_passage(fact, eval_rng, "e"));
        out.eval_passage_relations.push_back(fact.relation);
      }
    }
  }

  // Question rendering helpers.
  auto surface_text = [&](EntityId e) {
    const auto parts = entity_surface(out.entity_vocab.name(e));
    std::string s;
    for (const auto& p : parts) {
      if (!s.empty()) s += ' ';
      s += p;
    }
    return s;
  };
  auto make_1hop = [&](EntityId topic, RelationId rel, const std::set<EntityId>& answers, Rng& rng) {
    Question q;
    const std::string& prefix = kQuestionPrefixPool[rng.uniform(kQuestionPrefixPool.size())];
    std::string text;
    if (!prefix.empty()) text = prefix + ' ';
    text += surface_text(topic) + ' ' + kThemes[rel].vp + " which one ?";
    q.question_tokens = split_words(text);
    q.topic_entities = {out.entity_vocab.name(topic)};
    for (EntityId a : answers) q.answers.push_back(out.entity_vocab.name(a));
    q.hops = 1;
    q.relations = {kThemes[rel].name};
    return q;
  };

  // Symbolic indexes over the main facts.
  std::map<std::pair<EntityId, RelationId>, std::set<EntityId>> forward;
  std::map<EntityId, std::vector<std::pair<RelationId, EntityId>>> by_subject;
  std::map<EntityId, std::vector<std::pair<EntityId, RelationId>>> by_object;
  for (const auto& f : main_facts) {
    forward[{f.subject, f.relation}].insert(f.object);
    by_subject[f.subject].push_back({f.relation, f.object});
    by_object[f.object].push_back({f.subject, f.relation});
  }

  auto split_questions = [&](std::vector<Question>& all, std::vector<Question>& train,
                             std::vector<Question>& test) {
    const std::size_t n = all.size();
    std::size_t n_test = 0;
    if (config.question_test_fraction > 0.0 && n >= 2) {
      n_test = static_cast<std::size_t>(
          std::llround(config.question_test_fraction * static_cast<double>(n)));
      n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
    }
    question_rng.shuffle(all);
    for (std::size_t i = 0; i < n; ++i)
      (i < n_test ? test : train).push_back(std::move(all[i]));
  };

  // 1-hop questions, grouped per relation, split by (subject, relation) query.
  for (RelationId r = 0; r < config.relations; ++r) {
    std::vector<EntityId> subjects;
    for (const auto& [key, objs] : forward)
      if (key.second == r) subjects.push_back(key.first);
    question_rng.shuffle(subjects);
    if (static_cast<int>(subjects.size()) > config.questions_1hop_per_relation)
      subjects.resize(static_cast<std::size_t>(config.questions_1hop_per_relation));
    std::vector<Question> qs;
    for (EntityId s : subjects) qs.push_back(make_1hop(s, r, forward[{s, r}], question_rng));
    split_questions(qs, out.questions.train_1hop, out.questions.test_1hop);
  }

  // 2-hop questions over chains (a --r1--> b --r2--> c).
  {
    std::set<std::tuple<EntityId, RelationId, RelationId>> signatures;
    for (const auto& f : main_facts) {
      auto it = by_subject.find(f.object);
      if (it == by_subject.end()) continue;
      for (const auto& [r2, c] : it->second) {
        (void)c;
        signatures.insert({f.subject, f.relation, r2});
      }
    }
    std::vector<std::tuple<EntityId, RelationId, RelationId>> sigs(signatures.begin(),
                                                                   signatures.end());
    question_rng.shuffle(sigs);
    if (static_cast<int>(sigs.size()) > config.questions_2hop)
      sigs.resize(static_cast<std::size_t>(config.questions_2hop));
    std::vector<Question> qs;
    for (const auto& [a, r1, r2] : sigs) {
      std::set<EntityId> answers;
      for (EntityId b : forward[{a, r1}]) {
        auto it = forward.find({b, r2});
        if (it != forward.end()) answers.insert(it->second.begin(), it->second.end());
      }
      if (answers.empty()) continue;
      Question q;
      const std::string text = "the one that " + surface_text(a) + ' ' + kThemes[r1].vp + " also " +
                               kThemes[r2].vp + " which one ?";
      q.question_tokens = split_words(text);
      q.topic_entities = {out.entity_vocab.name(a)};
      for (EntityId c : answers) q.answers.push_back(out.entity_vocab.name(c));
      q.hops = 2;
      q.relations = {kThemes[r1].name, kThemes[r2].name};
      qs.push_back(std::move(q));
    }
    split_questions(qs, out.questions.train_2hop, out.questions.test_2hop);
  }

  // Conjunction questions: two topics whose facts share the answer.
  {
    std::set<std::tuple<EntityId, RelationId, EntityId, RelationId>> signatures;
    for (const auto& [o, incoming] : by_object) {
      for (std::size_t i = 0; i < incoming.size(); ++i) {
        for (std::size_t j = 0; j < incoming.size(); ++j) {
          const auto& [t1, r1] = incoming[i];
          const auto& [t2, r2] = incoming[j];
          if (t1 >= t2) continue;
          signatures.insert({t1, r1, t2, r2});
        }
      }
    }
    std::vector<std::tuple<EntityId, RelationId, EntityId, RelationId>> sigs(signatures.begin(),
                                                                             signatures.end());
    question_rng.shuffle(sigs);
    if (static_cast<int>(sigs.size()) > config.questions_conjunction)
      sigs.resize(static_cast<std::size_t>(config.questions_conjunction));
    for (const auto& [t1, r1, t2, r2] : sigs) {
      std::set<EntityId> answers;
      const auto& a1 = forward[{t1, r1}];
      const auto& a2 = forward[{t2, r2}];
      std::set_intersection(a1.begin(), a1.end(), a2.begin(), a2.end(),
                            std::inserter(answers, answers.begin()));
      if (answers.empty()) continue;
      Question q;
      const std::string text = surface_text(t1) + ' ' + kThemes[r1].vp + " and " + surface_text(t2) +
                               ' ' + kThemes[r2].vp + " which one ?";
      q.question_tokens = split_words(text);
      q.topic_entities = {out.entity_vocab.name(t1), out.entity_vocab.name(t2)};
      for (EntityId a : answers) q.answers.push_back(out.entity_vocab.name(a));
      q.hops = 1;
      q.relations = {kThemes[r1].name, kThemes[r2].name};
      out.questions.conjunction.push_back(std::move(q));
    }
  }

  // One question per held-out fact; signatures are unique by construction.
  for (const auto& f : out.heldout_facts)
    out.questions.heldout_1hop.push_back(make_1hop(f.subject, f.relation, {f.object}, question_rng));

  return out;
}

// --- contrastive batch stream ----------------------------------------------

RelationBatchStream::RelationBatchStream(const std::vector<AnnotatedPassage>& corpus,
                                         const PairVocabulary& pair_vocab,
                                         const RelationBatchConfig& config, Rng rng, const Vocab& vocab)
    : corpus_(corpus), vocab_(vocab), config_(config), rng_(rng) {
  if (config_.positives < 1 || config_.hard_negatives < 0 || config_.groups_per_batch < 1)
    throw ConfigError("invalid relation batch configuration");
  std::size_t dropped = 0;
  EntityId max_entity = -1;
  for (const EntityPair& pair : pair_vocab.pairs) {
    PairSupport support;
    support.pair = pair;
    for (std::size_t i = 0; i < corpus_.size(); ++i) {
      bool has_topic = false, has_target = false;
      for (const Mention& m : corpus_[i].mentions) {
        has_topic |= m.entity == pair.topic;
        has_target |= m.entity == pair.target;
      }
      if (has_topic && has_target) support.passages.push_back(i);
    }
    if (support.passages.size() < 2) {
      ++dropped;
      continue;
    }
    max_entity = std::max({max_entity, pair.topic, pair.target});
    supports_.push_back(std::move(support));
  }
  if (dropped > 0)
    std::cerr << "relation batches: dropped " << dropped
              << " pair(s) with fewer than 2 supporting passages\n";
  if (supports_.empty())
    throw InsufficientExamplesError("no entity pair has 2 or more supporting passages");

  by_topic_.resize(static_cast<std::size_t>(max_entity) + 1);
  by_target_.resize(static_cast<std::size_t>(max_entity) + 1);
  for (std::size_t i = 0; i < supports_.size(); ++i) {
    by_topic_[static_cast<std::size_t>(supports_[i].pair.topic)].push_back(i);
    by_target_[static_cast<std::size_t>(supports_[i].pair.target)].push_back(i);
  }
  order_.resize(supports_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  rng_.shuffle(order_);
}

PreprocessedExample RelationBatchStream::example_for(std::size_t support_idx,
                                                     std::size_t passage_idx) const {
  return preprocess_relation_example(corpus_[passage_idx], supports_[support_idx].pair,
                                     /*mask_topic=*/true, /*mask_target=*/true, vocab_);
}

std::vector<RelationBatchItem> RelationBatchStream::next() {
  std::vector<RelationBatchItem> batch;
  for (int g = 0; g < config_.groups_per_batch; ++g) {
    if (cursor_ >= order_.size()) {
      cursor_ = 0;
      rng_.shuffle(order_);
    }
    const std::size_t si = order_[cursor_++];
    const PairSupport& support = supports_[si];

    RelationBatchItem item;
    item.pair = support.pair;

    const std::size_t anchor_pi = support.passages[rng_.uniform(support.passages.size())];
    item.anchor = example_for(si, anchor_pi);

    // Positives: same pair, drawn from the other supporting passages.
    std::vector<std::size_t> positive_pool;
    for (std::size_t p : support.passages)
      if (p != anchor_pi) positive_pool.push_back(p);
    for (int p = 0; p < config_.positives; ++p)
      item.positives.push_back(example_for(si, positive_pool[rng_.uniform(positive_pool.size())]));

    // Hard negatives share exactly one endpoint with the anchor pair.
    std::vector<std::size_t> candidates;
    for (std::size_t c : by_topic_[static_cast<std::size_t>(support.pair.topic)])
      if (supports_[c].pair.target != support.pair.target) candidates.push_back(c);
    for (std::size_t c : by_target_[static_cast<std::size_t>(support.pair.target)])
      if (supports_[c].pair.topic != support.pair.topic) candidates.push_back(c);

    std::vector<std::size_t> chosen;
    for (std::size_t k : rng_.sample_without_replacement(candidates.size(),
                                                         static_cast<std::size_t>(config_.hard_negatives)))
      chosen.push_back(candidates[k]);

    // Shortfall: pad with uniform-random other pairs.
    if (chosen.size() < static_cast<std::size_t>(config_.hard_negatives)) {
      std::vector<std::size_t> pad_pool;
      for (std::size_t c = 0; c < supports_.size(); ++c)
        if (!(supports_[c].pair == support.pair)) pad_pool.push_back(c);
      if (!pad_pool.empty()) {
        while (chosen.size() < static_cast<std::size_t>(config_.hard_negatives))
          chosen.push_back(pad_pool[rng_.uniform(pad_pool.size())]);
      }
    }

    for (std::size_t c : chosen) {
      const PairSupport& neg = supports_[c];
      item.negative_pairs.push_back(neg.pair);
      item.negatives.push_back(example_for(c, neg.passages[rng_.uniform(neg.passages.size())]));
    }
    batch.push_back(std::move(item));
  }
  return batch;
}

}  // namespace opql
