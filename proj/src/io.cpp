#include "opql/io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "opql/errors.hpp"

namespace opql::io {

using ordered_json = nlohmann::ordered_json;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + path.string());
  return buf.str();
}

void atomic_write_file(const std::filesystem::path& path, const std::string& data) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string fnv1a_hex(const std::string& data) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : data) {
    h ^= static_cast<std::uint64_t>(c);
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// --- vocab files ------------------------------------------------------------

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::string data;
  for (const auto& item : vocab.items()) {
    data += item;
    data += '\n';
  }
  atomic_write_file(path, data);
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> items;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    items.push_back(line);
  }
  return Vocab(std::move(items));
}

// --- JSONL helpers ------------------------------------------------------------

namespace {

std::vector<ordered_json> parse_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<ordered_json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ordered_json row = ordered_json::parse(line, nullptr, false);
    if (row.is_discarded())
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": invalid JSON");
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_jsonl(const std::vector<ordered_json>& rows, const std::filesystem::path& path) {
  std::string data;
  for (const auto& row : rows) {
    data += row.dump();
    data += '\n';
  }
  atomic_write_file(path, data);
}

int symbol_id(Vocab& vocab, const std::string& symbol, bool extend, const char* kind,
              const std::filesystem::path& path) {
  if (extend) return vocab.add(symbol);
  if (!vocab.contains(symbol))
    throw FormatError(path.string() + ": unknown " + kind + " '" + symbol + "'");
  return vocab.id(symbol);
}

}  // namespace

// --- corpora ------------------------------------------------------------------

void save_corpus(const std::vector<AnnotatedPassage>& corpus, const Vocab& token_vocab,
                 const Vocab& entity_vocab, const std::filesystem::path& path) {
  std::vector<ordered_json> rows;
  rows.reserve(corpus.size());
  for (const AnnotatedPassage& p : corpus) {
    ordered_json row;
    row["id"] = p.passage_id;
    ordered_json tokens = ordered_json::array();
    for (TokenId t : p.tokens) tokens.push_back(token_vocab.name(t));
    row["tokens"] = std::move(tokens);
    ordered_json mentions = ordered_json::array();
    for (const Mention& m : p.mentions) {
      ordered_json mj;
      mj["start"] = m.start;
      mj["end"] = m.end;
      mj["entity"] = entity_vocab.name(m.entity);
      mentions.push_back(std::move(mj));
    }
    row["mentions"] = std::move(mentions);
    rows.push_back(std::move(row));
  }
  write_jsonl(rows, path);
}

std::vector<AnnotatedPassage> load_corpus(const std::filesystem::path& path, Vocab& token_vocab,
                                          Vocab& entity_vocab, bool extend) {
  std::vector<AnnotatedPassage> corpus;
  for (const auto& row : parse_jsonl(path)) {
    if (!row.contains("tokens") || !row.contains("mentions"))
      throw FormatError(path.string() + ": passage rows need 'tokens' and 'mentions'");
    AnnotatedPassage p;
    p.passage_id = row.value("id", "");
    for (const auto& t : row["tokens"])
      p.tokens.push_back(symbol_id(token_vocab, t.get<std::string>(), extend, "token", path));
    for (const auto& m : row["mentions"]) {
      if (!m.is_object() || !m.contains("start") || !m.contains("end") || !m.contains("entity"))
        throw FormatError(path.string() + ": mentions must be {start, end, entity} objects");
      Mention mention;
      mention.start = m["start"].get<int>();
      mention.end = m["end"].get<int>();
      mention.entity = symbol_id(entity_vocab, m["entity"].get<std::string>(), extend, "entity", path);
      if (mention.start < 0 || mention.end < mention.start ||
          mention.end >= static_cast<int>(p.tokens.size()))
        throw FormatError(path.string() + ": mention span out of range in passage " + p.passage_id);
      p.mentions.push_back(mention);
    }
    corpus.push_back(std::move(p));
  }
  return corpus;
}

// --- questions ------------------------------------------------------------------

void save_questions(const std::vector<Question>& questions, const Vocab& entity_vocab,
                    const std::filesystem::path& path) {
  (void)entity_vocab;  // names are stored verbatim
  std::vector<ordered_json> rows;
  rows.reserve(questions.size());
  for (const Question& q : questions) {
    ordered_json row;
    row["question"] = q.question_tokens;
    row["topic_entities"] = q.topic_entities;
    row["answers"] = q.answers;
    row["hops"] = q.hops;
    if (!q.relations.empty()) row["relations"] = q.relations;
    rows.push_back(std::move(row));
  }
  write_jsonl(rows, path);
}

std::vector<Question> load_questions(const std::filesystem::path& path, Vocab& entity_vocab,
                                     bool extend) {
  std::vector<Question> questions;
  for (const auto& row : parse_jsonl(path)) {
    if (!row.contains("question") || !row.contains("topic_entities") || !row.contains("answers"))
      throw FormatError(path.string() +
                        ": question rows need 'question', 'topic_entities', 'answers'");
    Question q;
    for (const auto& w : row["question"]) q.question_tokens.push_back(w.get<std::string>());
    for (const auto& t : row["topic_entities"]) {
      const std::string name = t.get<std::string>();
      symbol_id(entity_vocab, name, extend, "entity", path);
      q.topic_entities.push_back(name);
    }
    for (const auto& a : row["answers"]) {
      const std::string name = a.get<std::string>();
      symbol_id(entity_vocab, name, extend, "entity", path);
      q.answers.push_back(name);
    }
    q.hops = row.value("hops", 1);
    if (row.contains("relations"))
      for (const auto& r : row["relations"]) q.relations.push_back(r.get<std::string>());
    questions.push_back(std::move(q));
  }
  return questions;
}

// --- symbolic KB ------------------------------------------------------------------

void save_kb(const SymbolicKB& kb, const Vocab& entity_vocab, const std::filesystem::path& path) {
  std::vector<ordered_json> rows;
  rows.reserve(kb.facts.size());
  for (const auto& f : kb.facts) {
    ordered_json row;
    row["s"] = entity_vocab.name(f.subject);
    row["r"] = kb.relation_names.at(static_cast<std::size_t>(f.relation));
    row["o"] = entity_vocab.name(f.object);
    rows.push_back(std::move(row));
  }
  write_jsonl(rows, path);
}

SymbolicKB load_kb(const std::filesystem::path& path, Vocab& entity_vocab, bool extend) {
  SymbolicKB kb;
  std::map<std::string, RelationId> relation_ids;
  for (const auto& row : parse_jsonl(path)) {
    if (!row.contains("s") || !row.contains("r") || !row.contains("o"))
      throw FormatError(path.string() + ": fact rows need 's', 'r', 'o'");
    SymbolicKB::Fact f;
    f.subject = symbol_id(entity_vocab, row["s"].get<std::string>(), extend, "entity", path);
    f.object = symbol_id(entity_vocab, row["o"].get<std::string>(), extend, "entity", path);
    const std::string rel = row["r"].get<std::string>();
    auto it = relation_ids.find(rel);
    if (it == relation_ids.end()) {
      it = relation_ids.emplace(rel, static_cast<RelationId>(kb.relation_names.size())).first;
      kb.relation_names.push_back(rel);
    }
    f.relation = it->second;
    kb.facts.push_back(f);
  }
  std::sort(kb.facts.begin(), kb.facts.end());
  kb.facts.erase(std::unique(kb.facts.begin(), kb.facts.end()), kb.facts.end());
  return kb;
}

// --- key=value config ------------------------------------------------------------

bool KvConfig::has(const std::string& key) const {
  for (auto it = entries.rbegin(); it != entries.rend(); ++it)
    if (it->first == key) return true;
  return false;
}

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
  for (auto it = entries.rbegin(); it != entries.rend(); ++it)
    if (it->first == key) return it->second;
  return fallback;
}

std::int64_t KvConfig::get_int(const std::string& key, std::int64_t fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  try {
    std::size_t pos = 0;
    const std::int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an integer: '" + v + "'");
  }
}

double KvConfig::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not a number: '" + v + "'");
  }
}

void KvConfig::set(const std::string& key, const std::string& value) {
  entries.emplace_back(key, value);
}

KvConfig load_kv_config(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  KvConfig config;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": empty key");
    config.set(key, value);
  }
  return config;
}

// --- run manifests ------------------------------------------------------------------

void RunManifest::add_input(const std::filesystem::path& path) {
  inputs.emplace_back(path.string(), fnv1a_hex(read_file(path)));
}

void RunManifest::add_output(const std::filesystem::path& path) {
  outputs.emplace_back(path.string(), fnv1a_hex(read_file(path)));
}

void RunManifest::write(const std::filesystem::path& path) const {
  ordered_json doc;
  doc["command"] = command;
  doc["seed"] = seed;
  ordered_json cfg = ordered_json::object();
  for (const auto& [k, v] : config) cfg[k] = v;
  doc["config"] = std::move(cfg);
  ordered_json ins = ordered_json::object();
  for (const auto& [k, v] : inputs) ins[k] = v;
  doc["inputs"] = std::move(ins);
  ordered_json outs = ordered_json::object();
  for (const auto& [k, v] : outputs) outs[k] = v;
  doc["outputs"] = std::move(outs);
  atomic_write_file(path, doc.dump(2) + "\n");
}

}  // namespace opql::io
