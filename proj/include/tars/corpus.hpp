#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tars/model.hpp"

namespace tars {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;

class Vocab {
 public:
  // Reserved tokens followed by `words` in the order given (duplicates dropped).
  explicit Vocab(const std::vector<std::string>& words = {});

  std::size_t size() const noexcept { return words_.size(); }
  bool contains(std::string_view word) const;
  TokenId id(std::string_view word) const;  // UNK for unknown words
  TokenId require(std::string_view word) const;  // ConfigError for unknown words
  const std::string& word(TokenId id) const;

  std::vector<TokenId> tokenize(std::string_view text) const;
  // Ids past the word list decode as the unknown token.
  std::string decode(std::span<const TokenId> ids) const;

  nlohmann::json to_json() const;  // token -> id
  static Vocab from_json(const nlohmann::json& j);

  bool operator==(const Vocab& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId, std::less<>> ids_;
};

// Sentence material for one pseudo-language. Languages share templates and
// differ only in surface words.
struct LanguageSpec {
  std::string name;
  std::string trigger = "this is a description of";
  std::string subject = "it";
  std::string copula = "is";
  std::string period = ".";
  std::vector<std::string> relations;  // verbs used in "subject verb attribute ."
  std::string determiner = "the";
  std::vector<std::string> adjectives;
  std::vector<std::string> nouns;
  std::vector<std::string> verbs;
};

struct ConceptLanguage {
  std::string target;
  std::vector<std::string> attributes;
  std::string trigger;  // defaults to the language's trigger phrase
};

struct ConceptSpec {
  std::string concept_id;
  std::map<std::string, ConceptLanguage> languages;  // keyed by language name

  const ConceptLanguage& in(const std::string& language) const;
};

struct CorpusSpec {
  std::vector<LanguageSpec> languages;
  std::vector<ConceptSpec> concepts;

  const LanguageSpec& language(const std::string& name) const;
  const ConceptSpec& concept_spec(const std::string& concept_id) const;
  // Closed word list: every word any template or concept can emit.
  Vocab build_vocab() const;
  // Throws ConfigError on structural problems (empty attribute sets, target
  // inside its own description, shared targets across languages, ...).
  void validate() const;
};

CorpusSpec corpus_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CorpusSpec& spec);

enum class DocKind { kCausal, kReverse, kBackground };
const char* to_string(DocKind kind);

struct CorpusDoc {
  std::vector<TokenId> tokens;
  std::string language;
  std::string concept_id;  // "background" for retain documents
  DocKind kind = DocKind::kBackground;
  bool code_switched = false;
};

struct CorpusOptions {
  int n_per_concept = 200;
  int n_background = 600;
  std::vector<std::string> languages;  // empty: every language in the spec
  std::uint64_t seed = 0;
  int min_facts = 6;
  int max_facts = 12;
  // Probability that a reverse-document sentence names the concept instead of
  // using the pronoun subject.
  double subject_mention_rate = 0.5;
  // Adds the same number of documents again with each clause's language drawn
  // at random; the target token keeps the document's language.
  bool code_switch = true;
  int background_sentences_min = 4;
  int background_sentences_max = 8;
};

nlohmann::json to_json(const CorpusOptions& o);
CorpusOptions corpus_options_from_json(const nlohmann::json& j);

std::vector<CorpusDoc> generate_corpus(const CorpusSpec& spec, const Vocab& vocab,
                                       const CorpusOptions& options);

// Canonical description + trigger prompt for the causal probe: every attribute
// in listed order, relations cycling.
std::vector<TokenId> description_prompt(const CorpusSpec& spec, const Vocab& vocab,
                                        const std::string& concept_id,
                                        const std::string& language);
// BOS, target, copula: the reverse-direction probe prompt.
std::vector<TokenId> reverse_prompt(const CorpusSpec& spec, const Vocab& vocab,
                                    const std::string& concept_id, const std::string& language);

// Held-out documents for evaluation, drawn with their own seed.
std::vector<CorpusDoc> retain_docs(const CorpusSpec& spec, const Vocab& vocab,
                                   const CorpusOptions& options, int per_language,
                                   std::uint64_t seed);
std::vector<CorpusDoc> concept_docs(const CorpusSpec& spec, const Vocab& vocab,
                                    const CorpusOptions& options, const std::string& concept_id,
                                    const std::string& language, int count, std::uint64_t seed);

// One JSON object per line: {"tokens": [...], "lang": ..., "concept": ..., "kind": ...}.
void write_jsonl(const std::vector<CorpusDoc>& docs, const std::filesystem::path& path);
std::vector<CorpusDoc> read_jsonl(const std::filesystem::path& path);

}  // namespace tars
