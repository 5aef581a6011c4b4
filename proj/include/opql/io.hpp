#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "opql/types.hpp"
#include "opql/vocab.hpp"

namespace opql::io {

// --- low-level helpers -------------------------------------------------

// Reads a whole file; throws IoError if it cannot be opened.
std::string read_file(const std::filesystem::path& path);

// Writes via a sibling temp file + rename so readers never observe a
// partially written artifact.
void atomic_write_file(const std::filesystem::path& path, const std::string& data);

// FNV-1a 64-bit digest, rendered as 16 lowercase hex digits.
std::string fnv1a_hex(const std::string& data);

// --- vocab files: one symbol per line, id = line number -----------------

void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

// --- JSONL corpora -------------------------------------------------------
// One passage per line:
//   {"id": ..., "tokens": [...],
//    "mentions": [{"start": s, "end": e, "entity": "..."}, ...]}
// Tokens and entities are stored as strings; unknown symbols are added to
// the vocabs on load when `extend` is true, otherwise they raise.

void save_corpus(const std::vector<AnnotatedPassage>& corpus, const Vocab& token_vocab,
                 const Vocab& entity_vocab, const std::filesystem::path& path);
std::vector<AnnotatedPassage> load_corpus(const std::filesystem::path& path, Vocab& token_vocab,
                                          Vocab& entity_vocab, bool extend);

// --- JSONL questions -----------------------------------------------------
//   {"question": [...tokens...], "topic_entities": ["e1"], "answers": ["e2"],
//    "hops": 1, "relations": ["r"]}   (relations: optional diagnostics field)

void save_questions(const std::vector<Question>& questions, const Vocab& entity_vocab,
                    const std::filesystem::path& path);
std::vector<Question> load_questions(const std::filesystem::path& path, Vocab& entity_vocab,
                                     bool extend);

// --- JSONL symbolic KB ---------------------------------------------------
//   {"s": "e1", "r": "r", "o": "e2"}

void save_kb(const SymbolicKB& kb, const Vocab& entity_vocab, const std::filesystem::path& path);
SymbolicKB load_kb(const std::filesystem::path& path, Vocab& entity_vocab, bool extend);

// --- key=value config files ---------------------------------------------
// '#' comments, blank lines ignored; later keys win. Values stay strings.

struct KvConfig {
  std::vector<std::pair<std::string, std::string>> entries;

  bool has(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  void set(const std::string& key, const std::string& value);
};

KvConfig load_kv_config(const std::filesystem::path& path);

// --- run manifests --------------------------------------------------------
// JSON with the command, seed, config snapshot, and digests of every input
// and output artifact. Written atomically next to the primary output.

struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> config;   // key -> value
  std::vector<std::pair<std::string, std::string>> inputs;   // path -> digest
  std::vector<std::pair<std::string, std::string>> outputs;  // path -> digest

  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
};

}  // namespace opql::io
