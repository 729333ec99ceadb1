#include "tars/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "tars/errors.hpp"

namespace tars {

Vocab::Vocab(const std::vector<std::string>& words) {
  for (const char* w : {"<pad>", "<unk>", "<bos>"}) {
    ids_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.emplace_back(w);
  }
  for (const auto& w : words) {
    if (w.empty() || w.find_first_of(" \t\n") != std::string::npos) {
      throw ConfigError("vocab: invalid word '" + w + "'");
    }
    if (ids_.emplace(w, static_cast<TokenId>(words_.size())).second) words_.push_back(w);
  }
}

bool Vocab::contains(std::string_view word) const { return ids_.find(word) != ids_.end(); }

TokenId Vocab::id(std::string_view word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

TokenId Vocab::require(std::string_view word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw ConfigError("vocab: word '" + std::string(word) + "' is missing");
  return it->second;
}

const std::string& Vocab::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw InputError("vocab: id " + std::to_string(id) + " out of range");
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId t : ids) {
    if (!out.empty()) out += ' ';
    // Models may carry spare vocabulary slots beyond the word list.
    const bool known = t >= 0 && static_cast<std::size_t>(t) < words_.size();
    out += known ? words_[static_cast<std::size_t>(t)] : words_[kUnk];
  }
  return out;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < words_.size(); ++i) j[words_[i]] = i;
  return j;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  std::vector<std::pair<TokenId, std::string>> entries;
  for (const auto& [w, id] : j.items()) entries.emplace_back(id.get<TokenId>(), w);
  std::ranges::sort(entries);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != static_cast<TokenId>(i)) throw InputError("vocab: ids are not dense");
  }
  if (entries.size() < 3 || entries[0].second != "<pad>" || entries[1].second != "<unk>" ||
      entries[2].second != "<bos>") {
    throw InputError("vocab: reserved tokens missing");
  }
  std::vector<std::string> words;
  for (std::size_t i = 3; i < entries.size(); ++i) words.push_back(entries[i].second);
  return Vocab(words);
}

const ConceptLanguage& ConceptSpec::in(const std::string& language) const {
  auto it = languages.find(language);
  if (it == languages.end()) {
    throw ConfigError("concept '" + concept_id + "' has no language '" + language + "'");
  }
  return it->second;
}

const LanguageSpec& CorpusSpec::language(const std::string& name) const {
  auto it = std::ranges::find(languages, name, &LanguageSpec::name);
  if (it == languages.end()) throw ConfigError("unknown language '" + name + "'");
  return *it;
}

const ConceptSpec& CorpusSpec::concept_spec(const std::string& concept_id) const {
  auto it = std::ranges::find(concepts, concept_id, &ConceptSpec::concept_id);
  if (it == concepts.end()) throw ConfigError("unknown concept '" + concept_id + "'");
  return *it;
}

namespace {

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

void append(std::vector<TokenId>& out, const Vocab& v, const std::string& phrase) {
  for (const auto& w : split(phrase)) out.push_back(v.require(w));
}

std::string trigger_of(const ConceptLanguage& c, const LanguageSpec& l) {
  return c.trigger.empty() ? l.trigger : c.trigger;
}

}  // namespace

Vocab CorpusSpec::build_vocab() const {
  std::set<std::string> words;
  auto add = [&](const std::string& phrase) {
    for (auto& w : split(phrase)) words.insert(w);
  };
  for (const auto& l : languages) {
    for (const auto* s : {&l.trigger, &l.subject, &l.copula, &l.period, &l.determiner}) add(*s);
    for (const auto* list : {&l.relations, &l.adjectives, &l.nouns, &l.verbs}) {
      for (const auto& w : *list) add(w);
    }
  }
  for (const auto& c : concepts) {
    for (const auto& [lang, cl] : c.languages) {
      add(cl.target);
      add(cl.trigger);
      for (const auto& a : cl.attributes) add(a);
    }
  }
  return Vocab(std::vector<std::string>(words.begin(), words.end()));
}

void CorpusSpec::validate() const {
  if (languages.empty()) throw ConfigError("corpus: no languages defined");
  if (concepts.empty()) throw ConfigError("corpus: no concepts defined");
  std::set<std::string> targets;
  for (const auto& l : languages) {
    if (l.relations.empty()) throw ConfigError("language '" + l.name + "': no relations");
    if (l.nouns.empty() || l.verbs.empty() || l.adjectives.empty()) {
      throw ConfigError("language '" + l.name + "': background word lists must be non-empty");
    }
    for (const auto* s : {&l.trigger, &l.subject, &l.copula, &l.period, &l.determiner}) {
      if (split(*s).empty()) throw ConfigError("language '" + l.name + "': empty template word");
    }
  }
  for (const auto& c : concepts) {
    if (c.concept_id.empty() || c.concept_id == "background") {
      throw ConfigError("concept id '" + c.concept_id + "' is reserved or empty");
    }
    for (const auto& [lang, cl] : c.languages) {
      language(lang);
      if (split(cl.target).size() != 1) {
        throw ConfigError("concept '" + c.concept_id + "': target must be a single token");
      }
      if (cl.attributes.empty()) {
        throw ConfigError("concept '" + c.concept_id + "': attribute set is empty");
      }
      for (const auto& a : cl.attributes) {
        if (split(a).size() != 1) {
          throw ConfigError("concept '" + c.concept_id + "': attribute '" + a + "' is not one token");
        }
        if (a == cl.target) {
          throw ConfigError("concept '" + c.concept_id + "': target appears in its own description");
        }
      }
      if (!targets.insert(cl.target).second) {
        throw ConfigError("target token '" + cl.target + "' is used more than once");
      }
    }
  }
  // Background templates must never produce a concept target.
  for (const auto& l : languages) {
    for (const auto* list : {&l.adjectives, &l.nouns, &l.verbs}) {
      for (const auto& w : *list) {
        if (targets.contains(w)) throw ConfigError("background word '" + w + "' is a concept target");
      }
    }
    if (targets.contains(l.determiner) || targets.contains(l.period)) {
      throw ConfigError("language '" + l.name + "': template word is a concept target");
    }
  }
}

namespace {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace

CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  CorpusSpec s;
  try {
    for (const auto& lj : j.at("languages")) {
      LanguageSpec l;
      l.name = lj.at("name").get<std::string>();
      l.trigger = get_or(lj, "trigger", l.trigger);
      l.subject = get_or(lj, "subject", l.subject);
      l.copula = get_or(lj, "copula", l.copula);
      l.period = get_or(lj, "period", l.period);
      l.relations = lj.at("relations").get<std::vector<std::string>>();
      l.determiner = get_or(lj, "determiner", l.determiner);
      l.adjectives = lj.at("adjectives").get<std::vector<std::string>>();
      l.nouns = lj.at("nouns").get<std::vector<std::string>>();
      l.verbs = lj.at("verbs").get<std::vector<std::string>>();
      s.languages.push_back(std::move(l));
    }
    for (const auto& cj : j.at("concepts")) {
      ConceptSpec c;
      c.concept_id = cj.at("id").get<std::string>();
      for (const auto& [lang, lj] : cj.at("languages").items()) {
        ConceptLanguage cl;
        cl.target = lj.at("target").get<std::string>();
        cl.attributes = lj.at("attributes").get<std::vector<std::string>>();
        cl.trigger = get_or(lj, "trigger", std::string());
        c.languages.emplace(lang, std::move(cl));
      }
      s.concepts.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corpus spec: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::json to_json(const CorpusSpec& spec) {
  nlohmann::json j;
  j["languages"] = nlohmann::json::array();
  for (const auto& l : spec.languages) {
    j["languages"].push_back({{"name", l.name},           {"trigger", l.trigger},
                              {"subject", l.subject},     {"copula", l.copula},
                              {"period", l.period},       {"relations", l.relations},
                              {"determiner", l.determiner}, {"adjectives", l.adjectives},
                              {"nouns", l.nouns},         {"verbs", l.verbs}});
  }
  j["concepts"] = nlohmann::json::array();
  for (const auto& c : spec.concepts) {
    nlohmann::json langs = nlohmann::json::object();
    for (const auto& [name, cl] : c.languages) {
      langs[name] = {{"target", cl.target}, {"attributes", cl.attributes}};
      if (!cl.trigger.empty()) langs[name]["trigger"] = cl.trigger;
    }
    j["concepts"].push_back({{"id", c.concept_id}, {"languages", langs}});
  }
  return j;
}

const char* to_string(DocKind kind) {
  switch (kind) {
    case DocKind::kCausal: return "causal";
    case DocKind::kReverse: return "reverse";
    case DocKind::kBackground: return "background";
  }
  return "?";
}

namespace {

DocKind doc_kind_from_string(const std::string& s) {
  if (s == "causal") return DocKind::kCausal;
  if (s == "reverse") return DocKind::kReverse;
  if (s == "background") return DocKind::kBackground;
  throw InputError("unknown document kind '" + s + "'");
}

}  // namespace

nlohmann::json to_json(const CorpusOptions& o) {
  return {{"n_per_concept", o.n_per_concept},
          {"n_background", o.n_background},
          {"languages", o.languages},
          {"seed", o.seed},
          {"min_facts", o.min_facts},
          {"max_facts", o.max_facts},
          {"subject_mention_rate", o.subject_mention_rate},
          {"code_switch", o.code_switch},
          {"background_sentences_min", o.background_sentences_min},
          {"background_sentences_max", o.background_sentences_max}};
}

CorpusOptions corpus_options_from_json(const nlohmann::json& j) {
  CorpusOptions o;
  try {
    o.n_per_concept = get_or(j, "n_per_concept", o.n_per_concept);
    o.n_background = get_or(j, "n_background", o.n_background);
    o.languages = get_or(j, "languages", o.languages);
    o.seed = get_or(j, "seed", o.seed);
    o.min_facts = get_or(j, "min_facts", o.min_facts);
    o.max_facts = get_or(j, "max_facts", o.max_facts);
    o.subject_mention_rate = get_or(j, "subject_mention_rate", o.subject_mention_rate);
    o.code_switch = get_or(j, "code_switch", o.code_switch);
    o.background_sentences_min = get_or(j, "background_sentences_min", o.background_sentences_min);
    o.background_sentences_max = get_or(j, "background_sentences_max", o.background_sentences_max);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corpus options: ") + e.what());
  }
  if (o.n_per_concept < 0 || o.n_background < 0) throw ConfigError("corpus counts must be >= 0");
  if (o.min_facts < 1 || o.max_facts < o.min_facts) throw ConfigError("corpus: bad fact range");
  if (o.subject_mention_rate < 0 || o.subject_mention_rate > 1) {
    throw ConfigError("corpus: subject_mention_rate must be in [0, 1]");
  }
  if (o.background_sentences_min < 1 || o.background_sentences_max < o.background_sentences_min) {
    throw ConfigError("corpus: bad background sentence range");
  }
  return o;
}

namespace {

class Generator {
 public:
  Generator(const CorpusSpec& spec, const Vocab& vocab, const CorpusOptions& o, Rng rng)
      : spec_(spec), vocab_(vocab), o_(o), rng_(rng) {}

  CorpusDoc causal(const ConceptSpec& c, const std::string& lang, bool mixed) {
    const auto& cl = c.in(lang);
    CorpusDoc d = start(c.concept_id, lang, DocKind::kCausal, mixed);
    for (std::size_t a : facts(cl.attributes.size())) {
      const std::string& l = clause_language(c, lang, mixed);
      const auto& ls = spec_.language(l);
      append(d.tokens, vocab_, ls.subject);
      append(d.tokens, vocab_, pick(ls.relations));
      append(d.tokens, vocab_, c.in(l).attributes[a]);
      append(d.tokens, vocab_, ls.period);
    }
    append(d.tokens, vocab_, trigger_of(cl, spec_.language(lang)));
    d.tokens.push_back(vocab_.require(cl.target));
    return d;
  }

  CorpusDoc reverse(const ConceptSpec& c, const std::string& lang, bool mixed) {
    const auto& cl = c.in(lang);
    const auto& home = spec_.language(lang);
    CorpusDoc d = start(c.concept_id, lang, DocKind::kReverse, mixed);
    const TokenId target = vocab_.require(cl.target);
    bool first = true;
    for (std::size_t a : facts(cl.attributes.size())) {
      if (first) {
        d.tokens.push_back(target);
        append(d.tokens, vocab_, home.copula);
        append(d.tokens, vocab_, cl.attributes[a]);
        append(d.tokens, vocab_, home.period);
        first = false;
        continue;
      }
      const std::string& l = clause_language(c, lang, mixed);
      const auto& ls = spec_.language(l);
      if (rng_.uniform() < o_.subject_mention_rate) {
        d.tokens.push_back(target);
      } else {
        append(d.tokens, vocab_, ls.subject);
      }
      append(d.tokens, vocab_, pick(ls.relations));
      append(d.tokens, vocab_, c.in(l).attributes[a]);
      append(d.tokens, vocab_, ls.period);
    }
    return d;
  }

  CorpusDoc background(const std::string& lang) {
    const auto& ls = spec_.language(lang);
    CorpusDoc d = start("background", lang, DocKind::kBackground, false);
    const int span = o_.background_sentences_max - o_.background_sentences_min + 1;
    const int n = o_.background_sentences_min + static_cast<int>(rng_.below(span));
    for (int s = 0; s < n; ++s) {
      append(d.tokens, vocab_, ls.determiner);
      append(d.tokens, vocab_, pick(ls.adjectives));
      append(d.tokens, vocab_, pick(ls.nouns));
      append(d.tokens, vocab_, pick(ls.verbs));
      append(d.tokens, vocab_, ls.determiner);
      append(d.tokens, vocab_, pick(ls.nouns));
      append(d.tokens, vocab_, ls.period);
    }
    return d;
  }

 private:
  CorpusDoc start(const std::string& concept_id, const std::string& lang, DocKind kind,
                  bool mixed) {
    CorpusDoc d;
    d.language = lang;
    d.concept_id = concept_id;
    d.kind = kind;
    d.code_switched = mixed;
    d.tokens.push_back(kBos);
    return d;
  }

  // Distinct attribute indices in random order.
  std::vector<std::size_t> facts(std::size_t available) {
    const int hi = std::min<int>(o_.max_facts, static_cast<int>(available));
    const int lo = std::min(o_.min_facts, hi);
    const int n = lo + static_cast<int>(rng_.below(static_cast<std::uint64_t>(hi - lo + 1)));
    std::vector<std::size_t> idx(available);
    for (std::size_t i = 0; i < available; ++i) idx[i] = i;
    for (int i = 0; i < n; ++i) {
      const std::size_t j = i + rng_.below(available - static_cast<std::size_t>(i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(n));
    return idx;
  }

  const std::string& clause_language(const ConceptSpec& c, const std::string& lang, bool mixed) {
    if (!mixed || c.languages.size() < 2) return lang;
    auto it = c.languages.begin();
    std::advance(it, static_cast<long>(rng_.below(c.languages.size())));
    return it->first;
  }

  const std::string& pick(const std::vector<std::string>& list) {
    return list[rng_.below(list.size())];
  }

  const CorpusSpec& spec_;
  const Vocab& vocab_;
  const CorpusOptions& o_;
  Rng rng_;
};

std::vector<std::string> languages_of(const CorpusSpec& spec, const CorpusOptions& o) {
  if (!o.languages.empty()) {
    for (const auto& l : o.languages) spec.language(l);
    return o.languages;
  }
  std::vector<std::string> out;
  for (const auto& l : spec.languages) out.push_back(l.name);
  return out;
}

}  // namespace

std::vector<CorpusDoc> generate_corpus(const CorpusSpec& spec, const Vocab& vocab,
                                       const CorpusOptions& options) {
  spec.validate();
  const auto langs = languages_of(spec, options);
  for (const auto& c : spec.concepts) {
    for (const auto& l : langs) vocab.require(c.in(l).target);
  }
  Generator gen(spec, vocab, options, Rng(options.seed));
  std::vector<CorpusDoc> docs;
  for (const auto& c : spec.concepts) {
    for (const auto& l : langs) {
      for (int i = 0; i < options.n_per_concept; ++i) docs.push_back(gen.causal(c, l, false));
      for (int i = 0; i < options.n_per_concept; ++i) docs.push_back(gen.reverse(c, l, false));
      if (!options.code_switch || langs.size() < 2) continue;
      for (int i = 0; i < options.n_per_concept; ++i) docs.push_back(gen.causal(c, l, true));
      for (int i = 0; i < options.n_per_concept; ++i) docs.push_back(gen.reverse(c, l, true));
    }
  }
  for (const auto& l : langs) {
    for (int i = 0; i < options.n_background; ++i) docs.push_back(gen.background(l));
  }
  return docs;
}

std::vector<TokenId> description_prompt(const CorpusSpec& spec, const Vocab& vocab,
                                        const std::string& concept_id,
                                        const std::string& language) {
  const auto& ls = spec.language(language);
  const auto& cl = spec.concept_spec(concept_id).in(language);
  std::vector<TokenId> out{kBos};
  for (std::size_t i = 0; i < cl.attributes.size(); ++i) {
    append(out, vocab, ls.subject);
    append(out, vocab, ls.relations[i % ls.relations.size()]);
    append(out, vocab, cl.attributes[i]);
    append(out, vocab, ls.period);
  }
  append(out, vocab, trigger_of(cl, ls));
  return out;
}

std::vector<TokenId> reverse_prompt(const CorpusSpec& spec, const Vocab& vocab,
                                    const std::string& concept_id, const std::string& language) {
  const auto& ls = spec.language(language);
  const auto& cl = spec.concept_spec(concept_id).in(language);
  std::vector<TokenId> out{kBos, vocab.require(cl.target)};
  append(out, vocab, ls.copula);
  return out;
}

std::vector<CorpusDoc> retain_docs(const CorpusSpec& spec, const Vocab& vocab,
                                   const CorpusOptions& options, int per_language,
                                   std::uint64_t seed) {
  Generator gen(spec, vocab, options, Rng(seed));
  std::vector<CorpusDoc> docs;
  for (const auto& l : languages_of(spec, options)) {
    for (int i = 0; i < per_language; ++i) docs.push_back(gen.background(l));
  }
  return docs;
}

std::vector<CorpusDoc> concept_docs(const CorpusSpec& spec, const Vocab& vocab,
                                    const CorpusOptions& options, const std::string& concept_id,
                                    const std::string& language, int count, std::uint64_t seed) {
  Generator gen(spec, vocab, options, Rng(seed));
  const auto& c = spec.concept_spec(concept_id);
  std::vector<CorpusDoc> docs;
  for (int i = 0; i < count; ++i) docs.push_back(gen.causal(c, language, false));
  return docs;
}

void write_jsonl(const std::vector<CorpusDoc>& docs, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& d : docs) {
    nlohmann::json j = {{"tokens", d.tokens},
                        {"lang", d.language},
                        {"concept", d.concept_id},
                        {"kind", to_string(d.kind)}};
    if (d.code_switched) j["code_switched"] = true;
    out << j.dump() << '\n';
  }
}

std::vector<CorpusDoc> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus file " + path.string());
  std::vector<CorpusDoc> docs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusDoc d;
      d.tokens = j.at("tokens").get<std::vector<TokenId>>();
      d.language = j.at("lang").get<std::string>();
      d.concept_id = j.at("concept").get<std::string>();
      d.kind = doc_kind_from_string(j.value("kind", d.concept_id == "background" ? "background"
                                                                                  : "causal"));
      d.code_switched = j.value("code_switched", false);
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

}  // namespace tars
