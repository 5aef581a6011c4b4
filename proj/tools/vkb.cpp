// vkb — one binary for the whole pipeline: synthetic corpus generation,
// staged training, memory build/injection, querying, and evaluation.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal.
// Machine-readable output goes to stdout (JSON / JSON Lines only); all
// human-readable diagnostics go to stderr, gated by VKB_LOG={error|info|debug}.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "opql/checkpoint.hpp"
#include "opql/corpus.hpp"
#include "opql/encoder.hpp"
#include "opql/errors.hpp"
#include "opql/eval.hpp"
#include "opql/follow.hpp"
#include "opql/io.hpp"
#include "opql/lm.hpp"
#include "opql/memory.hpp"
#include "opql/rng.hpp"
#include "opql/training.hpp"
#include "opql/types.hpp"
#include "opql/vocab.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace opql;

namespace {

// ---- logging -------------------------------------------------------------

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("VKB_LOG");
    if (env == nullptr) return LogLevel::kError;
    const std::string v(env);
    if (v == "debug") return LogLevel::kDebug;
    if (v == "info") return LogLevel::kInfo;
    return LogLevel::kError;
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::kInfo) std::cerr << "vkb: " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::kDebug) std::cerr << "vkb: " << msg << "\n";
}

// ---- config-file overlay ---------------------------------------------------
// Flags override config-file values; config values override built-in defaults.
// A key applies to the option of the same name (without the leading "--").

class OptionRegistry {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* cmd, const std::string& flag, T& var, const std::string& desc) {
    bind(flag_key(flag), var);
    return cmd->add_option(flag, var, desc);
  }

  CLI::Option* add_flag(CLI::App* cmd, const std::string& flag, bool& var, const std::string& desc) {
    bind(flag_key(flag), var);
    return cmd->add_flag(flag, var, desc);
  }

  // Applies config entries in file order (later keys win) to options the
  // command line did not set.
  void apply(const CLI::App* cmd, const io::KvConfig& config) const {
    for (const auto& [key, value] : config.entries) {
      auto it = setters_.find(key);
      if (it == setters_.end()) {
        log_debug("config key '" + key + "' not used by this subcommand");
        continue;
      }
      const CLI::Option* opt = cmd->get_option_no_throw("--" + key);
      if (opt != nullptr && opt->count() > 0) continue;  // flag wins
      it->second(key, value);
    }
  }

 private:
  static std::string flag_key(const std::string& flag) {
    std::string key = flag;
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    return key;
  }

  template <typename T>
  void bind(const std::string& key, T& var) {
    setters_[key] = [&var](const std::string& k, const std::string& value) {
      T parsed{};
      if (!CLI::detail::lexical_cast(value, parsed))
        throw ConfigError("config value for '" + k + "' is not parseable: " + value);
      var = parsed;
    };
  }

  std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters_;
};

// ---- shared option bundles ---------------------------------------------------

struct CommonArgs {
  std::string config_path;
  std::string manifest_path;
  std::uint64_t seed = 0;
  int threads = 1;

  io::KvConfig config;
  io::RunManifest manifest;

  void attach(CLI::App* cmd, OptionRegistry& reg) {
    cmd->add_option("--config", config_path, "key=value config file; flags override it");
    cmd->add_option("--manifest", manifest_path, "run manifest path (default: derived from --out)");
    reg.add(cmd, "--seed", seed, "root seed for all randomness in this run");
    reg.add(cmd, "--threads", threads, "evaluation parallelism cap")->check(CLI::PositiveNumber);
  }

  void begin(const CLI::App* cmd, const OptionRegistry& reg, const std::string& command_name) {
    if (!config_path.empty()) {
      config = io::load_kv_config(config_path);
      reg.apply(cmd, config);
    }
    manifest.command = command_name;
    manifest.seed = seed;
    manifest.config = config.entries;
    if (!config_path.empty()) manifest.add_input(config_path);
  }

  void finish(const std::string& primary_output) {
    fs::path path = manifest_path;
    if (path.empty())
      path = primary_output.empty() ? fs::path("vkb-manifest.json")
                                    : fs::path(primary_output + ".manifest.json");
    manifest.write(path);
    log_debug("manifest written to " + path.string());
  }
};

struct EncoderArgs {
  EncoderConfig cfg;

  void attach(CLI::App* cmd, OptionRegistry& reg) {
    reg.add(cmd, "--dim", cfg.model_dim, "transformer width");
    reg.add(cmd, "--entity-dim", cfg.entity_dim, "entity embedding width");
    reg.add(cmd, "--relation-dim", cfg.relation_dim, "relation embedding width");
    reg.add(cmd, "--key-dim", cfg.key_dim, "memory key width");
    reg.add(cmd, "--layers", cfg.layers, "transformer layers");
    reg.add(cmd, "--heads", cfg.heads, "attention heads");
    reg.add(cmd, "--max-seq-len", cfg.max_seq_len, "maximum input length");
    reg.add(cmd, "--ffn-mult", cfg.ffn_mult, "feed-forward width multiple");
    reg.add(cmd, "--max-hops", cfg.max_hops, "maximum follow chain length");
  }
};

struct TrainArgs {
  TrainConfig cfg;
  std::string frozen_csv;
  std::string metrics_path;

  void attach(CLI::App* cmd, OptionRegistry& reg) {
    reg.add(cmd, "--lr", cfg.learning_rate, "learning rate");
    reg.add(cmd, "--optimizer", cfg.optimizer, "adam | sgd");
    reg.add(cmd, "--adam-beta1", cfg.adam_beta1, "Adam beta1");
    reg.add(cmd, "--adam-beta2", cfg.adam_beta2, "Adam beta2");
    reg.add(cmd, "--adam-eps", cfg.adam_eps, "Adam epsilon");
    reg.add(cmd, "--batch-size", cfg.batch_size, "examples (or groups) per step");
    reg.add(cmd, "--steps", cfg.steps, "training steps");
    reg.add(cmd, "--clip-norm", cfg.clip_norm, "global gradient-norm clip; 0 disables");
    reg.add(cmd, "--frozen", frozen_csv, "comma-separated frozen tensor names");
    reg.add(cmd, "--top-k", cfg.top_k, "retrieval fan-out during training");
    reg.add(cmd, "--hops", cfg.hops, "follow-finetune chain length");
    reg.add(cmd, "--report-every", cfg.report_every, "metrics cadence in steps");
    cmd->add_option("--metrics", metrics_path, "JSONL training metrics file");
  }

  TrainConfig resolve(Stage stage, std::uint64_t seed) const {
    TrainConfig out = cfg;
    out.stage = stage;
    out.seed = seed;
    out.frozen.clear();
    std::string item;
    std::istringstream in(frozen_csv);
    while (std::getline(in, item, ','))
      if (!item.empty()) out.frozen.push_back(item);
    out.validate();
    return out;
  }
};

// ---- small helpers ---------------------------------------------------------

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void emit(const ordered_json& doc) { std::cout << doc.dump() << "\n"; }

ordered_json loss_report_json(const LossReport& r) {
  return ordered_json::parse(to_json_line(r));
}

struct LoadedVocabs {
  Vocab tokens;
  Vocab entities;
};

LoadedVocabs load_vocabs(CommonArgs& common, const std::string& tokens_path,
                         const std::string& entities_path) {
  LoadedVocabs v{io::load_vocab(tokens_path), io::load_vocab(entities_path)};
  common.manifest.add_input(tokens_path);
  common.manifest.add_input(entities_path);
  return v;
}

std::vector<AnnotatedPassage> load_passages(CommonArgs& common, const std::string& path,
                                            LoadedVocabs& vocabs) {
  auto passages = io::load_corpus(path, vocabs.tokens, vocabs.entities, /*extend=*/false);
  common.manifest.add_input(path);
  log_info("loaded " + std::to_string(passages.size()) + " passages from " + path);
  return passages;
}

std::vector<Question> load_question_file(CommonArgs& common, const std::string& path,
                                         LoadedVocabs& vocabs) {
  auto questions = io::load_questions(path, vocabs.entities, /*extend=*/false);
  common.manifest.add_input(path);
  log_info("loaded " + std::to_string(questions.size()) + " questions from " + path);
  return questions;
}

ModelParams load_params(CommonArgs& common, const std::string& path) {
  ModelParams params = load_checkpoint(path);
  common.manifest.add_input(path);
  return params;
}

KeyValueMemory load_mem(CommonArgs& common, const std::string& path) {
  KeyValueMemory memory = load_memory(path);
  common.manifest.add_input(path);
  log_info("loaded memory with " + std::to_string(memory.size()) + " entries from " + path);
  return memory;
}

PreparedQuestion prepare_cli_question(const std::string& question_text, const std::string& topics_csv,
                                      int hops, const Vocab& token_vocab, const Vocab& entity_vocab) {
  Question q;
  q.question_tokens = split_words(question_text);
  q.topic_entities = split_csv(topics_csv);
  q.hops = hops;
  if (q.question_tokens.empty()) throw ConfigError("--question is empty");
  if (q.topic_entities.empty()) throw ConfigError("--topics is empty");
  auto pq = prepare_question(q, token_vocab, entity_vocab);
  if (!pq.has_value())
    throw MissingMentionError("a topic entity's surface form does not appear in the question text");
  return *pq;
}

// ---- gen-synth ----------------------------------------------------------------

void write_questions_file(CommonArgs& common, const std::vector<Question>& questions,
                          const Vocab& entity_vocab, const fs::path& path, ordered_json& counts) {
  io::save_questions(questions, entity_vocab, path);
  common.manifest.add_output(path);
  counts[path.stem().string()] = questions.size();
}

void register_gen_synth(CLI::App& app) {
  auto cmd = app.add_subcommand("gen-synth", "generate a synthetic corpus, KB, and question sets");
  struct State {
    CommonArgs common;
    OptionRegistry reg;
    SynthConfig synth;
    std::string out_dir;
  };
  auto st = std::make_shared<State>();
  st->common.attach(cmd, st->reg);
  cmd->add_option("--out", st->out_dir, "output directory")->required();
  st->reg.add(cmd, "--entities", st->synth.entities, "entity count");
  st->reg.add(cmd, "--relations", st->synth.relations, "relation count");
  st->reg.add(cmd, "--facts-per-relation", st->synth.facts_per_relation, "facts per relation");
  st->reg.add(cmd, "--templates-per-relation", st->synth.templates_per_relation,
              "surface templates per relation");
  st->reg.add(cmd, "--passages-per-fact", st->synth.passages_per_fact, "renderings per fact");
  st->reg.add(cmd, "--distractor-rate", st->synth.distractor_rate,
              "chance of an extra context mention per passage");
  st->reg.add(cmd, "--questions-1hop-per-relation", st->synth.questions_1hop_per_relation,
              "1-hop questions per relation");
  st->reg.add(cmd, "--questions-2hop", st->synth.questions_2hop, "2-hop question count");
  st->reg.add(cmd, "--questions-conjunction", st->synth.questions_conjunction,
              "conjunction question count");
  st->reg.add(cmd, "--question-test-fraction", st->synth.question_test_fraction,
              "fraction of question facts held for test");
  st->reg.add(cmd, "--heldout-fact-fraction", st->synth.heldout_fact_fraction,
              "fraction of facts kept out of the corpus for injection");
  st->reg.add(cmd, "--eval-passages-per-relation", st->synth.eval_passages_per_relation,
              "held-out diagnostic passages per relation");

  cmd->callback([st, cmd] {
    st->common.begin(cmd, st->reg, "gen-synth");
    const SynthCorpus corpus = generate_synthetic_corpus(st->synth, st->common.seed);

    const fs::path out(st->out_dir);
    fs::create_directories(out);
    auto& manifest = st->common.manifest;

    io::save_vocab(corpus.token_vocab, out / "tokens.vocab");
    io::save_vocab(corpus.entity_vocab, out / "entities.vocab");
    io::save_corpus(corpus.passages, corpus.token_vocab, corpus.entity_vocab, out / "corpus.jsonl");
    io::save_corpus(corpus.heldout_passages, corpus.token_vocab, corpus.entity_vocab,
                    out / "heldout_corpus.jsonl");
    io::save_corpus(corpus.eval_passages, corpus.token_vocab, corpus.entity_vocab,
                    out / "eval_corpus.jsonl");
    io::save_kb(corpus.kb, corpus.entity_vocab, out / "kb.jsonl");
    for (const char* name : {"tokens.vocab", "entities.vocab", "corpus.jsonl",
                             "heldout_corpus.jsonl", "eval_corpus.jsonl", "kb.jsonl"})
      manifest.add_output(out / name);

    // True relation name behind every passage, aligned with the corpus files.
    const auto names = [&corpus](const std::vector<RelationId>& ids) {
      std::vector<std::string> out_names;
      for (RelationId r : ids) out_names.push_back(corpus.kb.relation_names[static_cast<std::size_t>(r)]);
      return out_names;
    };
    ordered_json rels;
    rels["corpus"] = names(corpus.passage_relations);
    rels["heldout"] = names(corpus.heldout_passage_relations);
    rels["eval"] = names(corpus.eval_passage_relations);
    io::atomic_write_file(out / "passage_relations.json", rels.dump() + "\n");
    manifest.add_output(out / "passage_relations.json");

    ordered_json counts;
    write_questions_file(st->common, corpus.questions.train_1hop, corpus.entity_vocab,
                         out / "questions_train_1hop.jsonl", counts);
    write_questions_file(st->common, corpus.questions.test_1hop, corpus.entity_vocab,
                         out / "questions_test_1hop.jsonl", counts);
    write_questions_file(st->common, corpus.questions.train_2hop, corpus.entity_vocab,
                         out / "questions_train_2hop.jsonl", counts);
    write_questions_file(st->common, corpus.questions.test_2hop, corpus.entity_vocab,
                         out / "questions_test_2hop.jsonl", counts);
    write_questions_file(st->common, corpus.questions.conjunction, corpus.entity_vocab,
                         out / "questions_conjunction.jsonl", counts);
    write_questions_file(st->common, corpus.questions.heldout_1hop, corpus.entity_vocab,
                         out / "questions_heldout_1hop.jsonl", counts);

    ordered_json summary;
    summary["out"] = out.string();
    summary["passages"] = corpus.passages.size();
    summary["heldout_passages"] = corpus.heldout_passages.size();
    summary["eval_passages"] = corpus.eval_passages.size();
    summary["facts"] = corpus.kb.facts.size();
    summary["heldout_facts"] = corpus.heldout_facts.size();
    summary["entities"] = corpus.entity_vocab.size();
    summary["relations"] = corpus.kb.relation_names.size();
    summary["questions"] = counts;
    summary["corpus_digest"] = io::fnv1a_hex(io::read_file(out / "corpus.jsonl"));
    st->common.manifest_path =
        st->common.manifest_path.empty() ? (out / "manifest.json").string() : st->common.manifest_path;
    st->common.finish((out / "corpus.jsonl").string());
    emit(summary);
  });
}

// ---- training subcommands --------------------------------------------------------

struct TrainCliState {
  CommonArgs common;
  OptionRegistry reg;
  EncoderArgs encoder;
  TrainArgs train;
  std::string corpus_path, questions_path, tokens_path, entities_path;
  std::string init_path, memory_path, out_path;
  int min_pair_count = 2;
  std::size_t max_pairs = 0;
};

std::shared_ptr<TrainCliState> attach_train_command(CLI::App* cmd, bool needs_corpus,
                                                    bool needs_memory, bool needs_questions) {
  auto st = std::make_shared<TrainCliState>();
  st->common.attach(cmd, st->reg);
  st->encoder.attach(cmd, st->reg);
  st->train.attach(cmd, st->reg);
  auto* corpus_opt = cmd->add_option("--corpus", st->corpus_path, "training passages (JSONL)");
  if (needs_corpus) corpus_opt->required();
  auto* questions_opt = cmd->add_option("--questions", st->questions_path, "questions (JSONL)");
  if (needs_questions) questions_opt->required();
  cmd->add_option("--tokens", st->tokens_path, "token vocabulary")->required();
  cmd->add_option("--entities", st->entities_path, "entity vocabulary")->required();
  cmd->add_option("--init", st->init_path, "checkpoint to continue from (default: fresh init)");
  auto* memory_opt = cmd->add_option("--memory", st->memory_path, "memory snapshot");
  if (needs_memory) memory_opt->required();
  cmd->add_option("--out", st->out_path, "output checkpoint path")->required();
  return st;
}

void run_train_command(TrainCliState& st, Stage stage) {
  LoadedVocabs vocabs = load_vocabs(st.common, st.tokens_path, st.entities_path);

  ModelParams params = [&] {
    if (!st.init_path.empty()) return load_params(st.common, st.init_path);
    EncoderConfig ec = st.encoder.cfg;
    ec.token_vocab_size = vocabs.tokens.size();
    ec.entity_vocab_size = vocabs.entities.size();
    ec.validate();
    Rng rng(st.common.seed);
    log_info("initializing fresh parameters");
    return init_params(ec, rng);
  }();
  if (params.config.token_vocab_size != vocabs.tokens.size() ||
      params.config.entity_vocab_size != vocabs.entities.size())
    throw ConfigError("checkpoint vocabulary sizes do not match the supplied vocab files");

  std::vector<AnnotatedPassage> passages;
  if (!st.corpus_path.empty()) passages = load_passages(st.common, st.corpus_path, vocabs);
  std::vector<Question> questions;
  if (!st.questions_path.empty()) questions = load_question_file(st.common, st.questions_path, vocabs);
  std::optional<PairVocabulary> pair_vocab;
  if (stage == Stage::kRelation) {
    pair_vocab = extract_entity_pairs(passages, st.min_pair_count, st.max_pairs);
    log_info("mined " + std::to_string(pair_vocab->pairs.size()) + " entity pairs");
  }
  std::optional<KeyValueMemory> memory;
  if (!st.memory_path.empty()) memory = load_mem(st.common, st.memory_path);

  TrainInputs inputs;
  if (!passages.empty()) inputs.passages = &passages;
  if (pair_vocab.has_value()) inputs.pair_vocab = &*pair_vocab;
  inputs.token_vocab = &vocabs.tokens;
  inputs.entity_vocab = &vocabs.entities;
  if (memory.has_value()) inputs.memory = &*memory;
  if (!questions.empty()) inputs.questions = &questions;

  const TrainConfig cfg = st.train.resolve(stage, st.common.seed);
  std::ofstream metrics;
  std::ostream* metrics_ptr = nullptr;
  if (!st.train.metrics_path.empty()) {
    metrics.open(st.train.metrics_path);
    if (!metrics) throw IoError("cannot open metrics file: " + st.train.metrics_path);
    metrics_ptr = &metrics;
  }

  const TrainResult result = train_stage(params, inputs, cfg, metrics_ptr);
  save_checkpoint(params, st.out_path);
  st.common.manifest.add_output(st.out_path);
  if (metrics_ptr != nullptr) {
    metrics.close();
    st.common.manifest.add_output(st.train.metrics_path);
  }

  ordered_json summary;
  summary["stage"] = to_string(stage);
  summary["steps"] = cfg.steps;
  summary["skipped_examples"] = result.skipped_examples;
  if (!result.reports.empty()) summary["final"] = loss_report_json(result.reports.back());
  if (!result.consumed_question_relations.empty())
    summary["question_relations"] = result.consumed_question_relations;
  summary["checkpoint"] = st.out_path;
  st.common.finish(st.out_path);
  emit(summary);
}

void register_training(CLI::App& app) {
  {
    auto cmd = app.add_subcommand("pretrain-entity", "stage 0: masked entity-linking pretraining");
    auto st = attach_train_command(cmd, /*corpus=*/true, /*memory=*/false, /*questions=*/false);
    cmd->callback([st, cmd] {
      st->common.begin(cmd, st->reg, "pretrain-entity");
      run_train_command(*st, Stage::kEntity);
    });
  }
  {
    auto cmd = app.add_subcommand("pretrain-relation", "stage 1: contrastive relation pretraining");
    auto st = attach_train_command(cmd, /*corpus=*/true, /*memory=*/false, /*questions=*/false);
    st->reg.add(cmd, "--min-pair-count", st->min_pair_count, "minimum pair co-occurrence count");
    st->reg.add(cmd, "--max-pairs", st->max_pairs, "pair vocabulary cap; 0 = unlimited");
    cmd->callback([st, cmd] {
      st->common.begin(cmd, st->reg, "pretrain-relation");
      run_train_command(*st, Stage::kRelation);
    });
  }
  {
    auto cmd = app.add_subcommand("pretrain-lm",
                                  "stage 2: masked-entity LM training with memory mixing");
    auto st = attach_train_command(cmd, /*corpus=*/true, /*memory=*/true, /*questions=*/false);
    cmd->callback([st, cmd] {
      st->common.begin(cmd, st->reg, "pretrain-lm");
      run_train_command(*st, Stage::kLm);
    });
  }
  {
    auto cmd = app.add_subcommand("finetune-follow", "question-driven follow finetuning");
    auto st = attach_train_command(cmd, /*corpus=*/false, /*memory=*/true, /*questions=*/true);
    cmd->callback([st, cmd] {
      st->common.begin(cmd, st->reg, "finetune-follow");
      run_train_command(*st, Stage::kFollowFinetune);
    });
  }
}

// ---- build-memory -----------------------------------------------------------------

void register_build_memory(CLI::App& app) {
  auto cmd = app.add_subcommand("build-memory", "encode corpus pairs into a key-value memory");
  struct State {
    CommonArgs common;
    OptionRegistry reg;
    std::string corpus_path, tokens_path, entities_path, checkpoint_path, out_path;
    std::string dedup = "all-mentions";
    int max_mentions = 5;
    int min_pair_count = 2;
    std::size_t max_pairs = 0;
  };
  auto st = std::make_shared<State>();
  st->common.attach(cmd, st->reg);
  cmd->add_option("--corpus", st->corpus_path, "passages (JSONL)")->required();
  cmd->add_option("--tokens", st->tokens_path, "token vocabulary")->required();
  cmd->add_option("--entities", st->entities_path, "entity vocabulary")->required();
  cmd->add_option("--checkpoint", st->checkpoint_path, "relation encoder checkpoint")->required();
  cmd->add_option("--out", st->out_path, "output memory snapshot")->required();
  st->reg.add(cmd, "--dedup", st->dedup, "all-mentions | averaged");
  st->reg.add(cmd, "--max-mentions", st->max_mentions, "mention sample cap in averaged mode");
  st->reg.add(cmd, "--min-pair-count", st->min_pair_count, "minimum pair co-occurrence count");
  st->reg.add(cmd, "--max-pairs", st->max_pairs, "pair vocabulary cap; 0 = unlimited");

  cmd->callback([st, cmd] {
    st->common.begin(cmd, st->reg, "build-memory");
    LoadedVocabs vocabs = load_vocabs(st->common, st->tokens_path, st->entities_path);
    const auto passages = load_passages(st->common, st->corpus_path, vocabs);
    const ModelParams params = load_params(st->common, st->checkpoint_path);
    const PairVocabulary pair_vocab =
        extract_entity_pairs(passages, st->min_pair_count, st->max_pairs);
    Rng rng(st->common.seed);
    const KeyValueMemory memory =
        build_memory(passages, pair_vocab, params, vocabs.tokens,
                     dedup_mode_from_string(st->dedup), st->max_mentions, rng);
    save_memory(memory, st->out_path);
    st->common.manifest.add_output(st->out_path);

    ordered_json summary;
    summary["entries"] = memory.size();
    summary["pairs"] = pair_vocab.pairs.size();
    summary["topics"] = memory.topic_index.size();
    summary["dedup"] = to_string(memory.dedup_mode);
    summary["max_mentions"] = memory.max_mentions;
    summary["out"] = st->out_path;
    st->common.finish(st->out_path);
    emit(summary);
  });
}

// ---- query / ask ---------------------------------------------------------------------

void register_query(CLI::App& app) {
  auto cmd = app.add_subcommand("query", "follow-mode question answering over the memory");
  struct State {
    CommonArgs common;
    OptionRegistry reg;
    std::string memory_path, checkpoint_path, tokens_path, entities_path;
    std::string question_text, topics_csv;
    int hops = 1;
    int top_k = 10;
  };
  auto st = std::make_shared<State>();
  st->common.attach(cmd, st->reg);
  cmd->add_option("--memory", st->memory_path, "memory snapshot")->required();
  cmd->add_option("--checkpoint", st->checkpoint_path, "encoder checkpoint")->required();
  cmd->add_option("--tokens", st->tokens_path, "token vocabulary")->required();
  cmd->add_option("--entities", st->entities_path, "entity vocabulary")->required();
  cmd->add_option("--question", st->question_text, "question text containing the topic surface form")
      ->required();
  cmd->add_option("--topics", st->topics_csv, "comma-separated topic entity names")->required();
  st->reg.add(cmd, "--hops", st->hops, "follow chain length");
  st->reg.add(cmd, "--top-k", st->top_k, "retrieval fan-out");

  cmd->callback([st, cmd] {
    st->common.begin(cmd, st->reg, "query");
    LoadedVocabs vocabs = load_vocabs(st->common, st->tokens_path, st->entities_path);
    const ModelParams params = load_params(st->common, st->checkpoint_path);
    const KeyValueMemory memory = load_mem(st->common, st->memory_path);
    const PreparedQuestion pq = prepare_cli_question(st->question_text, st->topics_csv, st->hops,
                                                     vocabs.tokens, vocabs.entities);
    ordered_json out;
    out["hops"] = std::min(std::max(pq.hops, 1), params.config.max_hops);
    out["answers"] = ordered_json::array();
    out["dead_end"] = false;
    try {
      const WeightedEntitySet y = answer_follow(memory, params, pq, vocabs.tokens, st->top_k);
      for (std::size_t i = 0; i < y.entities.size(); ++i)
        out["answers"].push_back(
            {{"entity", vocabs.entities.name(y.entities[i])}, {"weight", y.weights[i]}});
    } catch (const EmptyIntermediateError&) {
      out["dead_end"] = true;
    }
    st->common.finish("");
    emit(out);
  });
}

void register_ask(CLI::App& app) {
  auto cmd = app.add_subcommand("ask", "LM-mode masked-entity prediction with memory mixing");
  struct State {
    CommonArgs common;
    OptionRegistry reg;
    std::string memory_path, checkpoint_path, tokens_path, entities_path;
    std::string question_text, topics_csv;
    int hops = 1;
    int top_k = 10;
    int limit = 10;
    bool lambda_zero = false;
  };
  auto st = std::make_shared<State>();
  st->common.attach(cmd, st->reg);
  cmd->add_option("--memory", st->memory_path, "memory snapshot")->required();
  cmd->add_option("--checkpoint", st->checkpoint_path, "encoder checkpoint")->required();
  cmd->add_option("--tokens", st->tokens_path, "token vocabulary")->required();
  cmd->add_option("--entities", st->entities_path, "entity vocabulary")->required();
  cmd->add_option("--question", st->question_text, "question text containing the topic surface form")
      ->required();
  cmd->add_option("--topics", st->topics_csv, "comma-separated topic entity names")->required();
  st->reg.add(cmd, "--hops", st->hops, "mixing chain length");
  st->reg.add(cmd, "--top-k", st->top_k, "retrieval fan-out");
  st->reg.add(cmd, "--limit", st->limit, "ranked entities to print");
  st->reg.add_flag(cmd, "--lambda-zero", st->lambda_zero, "ablation: ignore the memory entirely");

  cmd->callback([st, cmd] {
    st->common.begin(cmd, st->reg, "ask");
    LoadedVocabs vocabs = load_vocabs(st->common, st->tokens_path, st->entities_path);
    const ModelParams params = load_params(st->common, st->checkpoint_path);
    const KeyValueMemory memory = load_mem(st->common, st->memory_path);
    const PreparedQuestion pq = prepare_cli_question(st->question_text, st->topics_csv, st->hops,
                                                     vocabs.tokens, vocabs.entities);
    const MixResult res = answer_lm(memory, params, pq, vocabs.tokens, st->top_k, st->lambda_zero);
    const auto scored = predict_entity(params, res.mixed);

    ordered_json out;
    out["lambda"] = res.lambda;
    ordered_json lambdas = ordered_json::array();
    for (const HopTrace& t : res.trace) lambdas.push_back(t.lambda);
    out["lambda_per_hop"] = lambdas;
    out["answers"] = ordered_json::array();
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(st->limit), scored.size());
    for (std::size_t i = 0; i < keep; ++i)
      out["answers"].push_back(
          {{"entity", vocabs.entities.name(scored[i].first)}, {"score", scored[i].second}});
    st->common.finish("");
    emit(out);
  });
}

// ---- eval -------------------------------------------------------------------------

void register_eval(CLI::App& app) {
  auto cmd = app.add_subcommand("eval", "batch question evaluation (follow or LM mode)");
  struct State {
    CommonArgs common;
    OptionRegistry reg;
    std::string memory_path, checkpoint_path, questions_path, tokens_path, entities_path;
    std::string mode = "follow";
    std::string split = "test";
    std::string records_path;
    int top_k = 10;
    bool lambda_zero = false;
  };
  auto st = std::make_shared<State>();
  st->common.attach(cmd, st->reg);
  cmd->add_option("--memory", st->memory_path, "memory snapshot")->required();
  cmd->add_option("--checkpoint", st->checkpoint_path, "encoder checkpoint")->required();
  cmd->add_option("--questions", st->questions_path, "questions (JSONL)")->required();
  cmd->add_option("--tokens", st->tokens_path, "token vocabulary")->required();
  cmd->add_option("--entities", st->entities_path, "entity vocabulary")->required();
  st->reg.add(cmd, "--mode", st->mode, "follow | lm");
  st->reg.add(cmd, "--split", st->split, "split name recorded in the report");
  st->reg.add(cmd, "--top-k", st->top_k, "retrieval fan-out");
  st->reg.add_flag(cmd, "--lambda-zero", st->lambda_zero, "LM ablation: ignore the memory");
  cmd->add_option("--records", st->records_path, "per-question JSONL records output");

  cmd->callback([st, cmd] {
    st->common.begin(cmd, st->reg, "eval");
    LoadedVocabs vocabs = load_vocabs(st->common, st->tokens_path, st->entities_path);
    const ModelParams params = load_params(st->common, st->checkpoint_path);
    const KeyValueMemory memory = load_mem(st->common, st->memory_path);
    const auto questions = load_question_file(st->common, st->questions_path, vocabs);

    QaOptions options;
    options.top_k = st->top_k;
    options.force_lambda_zero = st->lambda_zero;
    options.split_name = st->split;
    EvalReport report;
    if (st->mode == "follow")
      report = evaluate_follow(memory, params, questions, vocabs.tokens, vocabs.entities, options);
    else if (st->mode == "lm")
      report = evaluate_lm(memory, params, questions, vocabs.tokens, vocabs.entities, options);
    else
      throw ConfigError("--mode must be follow or lm, got: " + st->mode);

    if (!st->records_path.empty()) {
      std::string lines;
      for (const QuestionRecord& rec : report.records) lines += to_json_line(rec) + "\n";
      io::atomic_write_file(st->records_path, lines);
      st->common.manifest.add_output(st->records_path);
    }
    st->common.finish(st->records_path);
    std::cout << to_json(report) << "\n";
  });
}

// ---- memory inject/stats/dump -----------------------------------------------------

void register_memory(CLI::App& app) {
  auto mem = app.add_subcommand("memory", "inspect or extend a memory snapshot");
  mem->require_subcommand(1);

  {
    auto cmd = mem->add_subcommand("inject", "add new facts' pairs without retraining");
    struct State {
      CommonArgs common;
      OptionRegistry reg;
      std::string memory_path, corpus_path, tokens_path, entities_path, checkpoint_path, out_path;
      int min_pair_count = 1;
      std::size_t max_pairs = 0;
    };
    auto st = std::make_shared<State>();
    st->common.attach(cmd, st->reg);
    cmd->add_option("--memory", st->memory_path, "existing memory snapshot")->required();
    cmd->add_option("--corpus", st->corpus_path, "new passages (JSONL)")->required();
    cmd->add_option("--tokens", st->tokens_path, "token vocabulary")->required();
    cmd->add_option("--entities", st->entities_path, "entity vocabulary")->required();
    cmd->add_option("--checkpoint", st->checkpoint_path, "relation encoder checkpoint")->required();
    cmd->add_option("--out", st->out_path, "output memory snapshot")->required();
    st->reg.add(cmd, "--min-pair-count", st->min_pair_count, "minimum pair co-occurrence count");
    st->reg.add(cmd, "--max-pairs", st->max_pairs, "pair vocabulary cap; 0 = unlimited");

    cmd->callback([st, cmd] {
      st->common.begin(cmd, st->reg, "memory inject");
      LoadedVocabs vocabs = load_vocabs(st->common, st->tokens_path, st->entities_path);
      const auto passages = load_passages(st->common, st->corpus_path, vocabs);
      const ModelParams params = load_params(st->common, st->checkpoint_path);
      const KeyValueMemory before = load_mem(st->common, st->memory_path);
      const PairVocabulary new_pairs =
          extract_entity_pairs(passages, st->min_pair_count, st->max_pairs);
      const KeyValueMemory after =
          inject_pairs(before, passages, new_pairs, params, vocabs.tokens);
      save_memory(after, st->out_path);
      st->common.manifest.add_output(st->out_path);

      ordered_json summary;
      summary["entries_before"] = before.size();
      summary["entries_after"] = after.size();
      summary["new_pairs"] = new_pairs.pairs.size();
      summary["out"] = st->out_path;
      st->common.finish(st->out_path);
      emit(summary);
    });
  }
  {
    auto cmd = mem->add_subcommand("stats", "summary statistics of a memory snapshot");
    struct State {
      CommonArgs common;
      OptionRegistry reg;
      std::string memory_path;
    };
    auto st = std::make_shared<State>();
    st->common.attach(cmd, st->reg);
    cmd->add_option("--memory", st->memory_path, "memory snapshot")->required();
    cmd->callback([st, cmd] {
      st->common.begin(cmd, st->reg, "memory stats");
      const KeyValueMemory memory = load_mem(st->common, st->memory_path);
      std::set<EntityPair> unique_pairs;
      for (const MemoryEntry& e : memory.entries) unique_pairs.insert(e.pair);
      ordered_json summary;
      summary["entries"] = memory.size();
      summary["unique_pairs"] = unique_pairs.size();
      summary["topics"] = memory.topic_index.size();
      summary["dedup"] = to_string(memory.dedup_mode);
      summary["max_mentions"] = memory.max_mentions;
      summary["key_dim"] = memory.key_dim;
      summary["relation_dim"] = memory.relation_dim;
      st->common.finish("");
      emit(summary);
    });
  }
  {
    auto cmd = mem->add_subcommand("dump", "one JSONL row per memory entry");
    struct State {
      CommonArgs common;
      OptionRegistry reg;
      std::string memory_path, entities_path;
    };
    auto st = std::make_shared<State>();
    st->common.attach(cmd, st->reg);
    cmd->add_option("--memory", st->memory_path, "memory snapshot")->required();
    cmd->add_option("--entities", st->entities_path, "entity vocabulary (adds names to the dump)");
    cmd->callback([st, cmd] {
      st->common.begin(cmd, st->reg, "memory dump");
      const KeyValueMemory memory = load_mem(st->common, st->memory_path);
      std::optional<Vocab> entities;
      if (!st->entities_path.empty()) {
        entities = io::load_vocab(st->entities_path);
        st->common.manifest.add_input(st->entities_path);
      }
      for (const MemoryEntry& e : memory.entries) {
        ordered_json row;
        row["topic"] = e.pair.topic;
        row["target"] = e.pair.target;
        if (entities.has_value()) {
          row["topic_name"] = entities->name(e.pair.topic);
          row["target_name"] = entities->name(e.pair.target);
        }
        row["mention_count"] = e.mention_count;
        row["provenance"] = e.provenance;
        emit(row);
      }
      st->common.finish("");
    });
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"virtual knowledge base pipeline"};
  app.require_subcommand(1);
  register_gen_synth(app);
  register_training(app);
  register_build_memory(app);
  register_query(app);
  register_ask(app);
  register_eval(app);
  register_memory(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cerr << app.help() << std::flush;
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
