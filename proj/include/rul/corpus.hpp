#pragma once

// Synthetic answerability corpus: schema, seeded generator, JSONL I/O,
// vocabulary and the preference oracle.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rul/errors.hpp"
#include "rul/rng.hpp"

namespace rul {

using Tokens = std::vector<std::string>;

inline Tokens tokenize(const std::string& text) {
  Tokens out;
  std::istringstream in(text);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline std::string join(const Tokens& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr int kCls = 0, kSep = 1, kBos = 2, kEos = 3, kPad = 4, kUnk = 5;
inline const std::array<std::string, 6> kSpecialTokens = {"[CLS]", "[SEP]", "[BOS]", "[EOS]", "[PAD]", "[UNK]"};

class Vocab {
 public:
  Vocab() {
    for (const auto& s : kSpecialTokens) add(s);
  }

  explicit Vocab(const std::vector<std::string>& tokens) {
    if (tokens.size() < kSpecialTokens.size()) throw ValidationError("vocab: missing reserved tokens");
    for (std::size_t i = 0; i < kSpecialTokens.size(); ++i)
      if (tokens[i] != kSpecialTokens[i]) throw ValidationError("vocab: reserved token out of place: " + tokens[i]);
    for (const auto& t : tokens) {
      if (index_.count(t)) throw ValidationError("vocab: duplicate token " + t);
      add(t);
    }
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool contains(const std::string& t) const { return index_.count(t) != 0; }

  int id(const std::string& t) const {
    auto it = index_.find(t);
    return it == index_.end() ? kUnk : it->second;
  }

  std::vector<int> encode(const Tokens& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  Tokens decode(const std::vector<int>& ids) const {
    Tokens out;
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  void add(const std::string& t) {
    if (!index_.count(t)) {
      index_[t] = static_cast<int>(tokens_.size());
      tokens_.push_back(t);
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Schema

enum class UType { Answerable, Missing, Contradictory, Ambiguous };
inline constexpr std::array<UType, 4> kAllUTypes = {UType::Answerable, UType::Missing, UType::Contradictory,
                                                    UType::Ambiguous};

inline const char* to_string(UType t) {
  switch (t) {
    case UType::Answerable: return "ANSWERABLE";
    case UType::Missing: return "MISSING";
    case UType::Contradictory: return "CONTRADICTORY";
    case UType::Ambiguous: return "AMBIGUOUS";
  }
  return "?";
}

inline UType parse_utype(const std::string& s) {
  for (UType t : kAllUTypes)
    if (s == to_string(t)) return t;
  throw ValidationError("unknown utype: " + s);
}

enum class TargetKind { Answer, Refusal };

struct Span {
  int start = 0;
  int end = 0;
  bool operator==(const Span&) const = default;
};

struct Sentence {
  Tokens tokens;
  bool answerable = false;
  bool operator==(const Sentence&) const = default;
};

struct Paragraph {
  std::vector<Sentence> sentences;
  bool answerable = false;
  bool operator==(const Paragraph&) const = default;
};

struct RankedContext {
  std::vector<Paragraph> paragraphs;
  bool answerable = false;
  bool operator==(const RankedContext&) const = default;
};

struct TargetResponse {
  TargetKind kind = TargetKind::Answer;
  Tokens tokens;
  std::optional<Span> reason_span;
  std::optional<Span> suggestion_span;
  bool operator==(const TargetResponse&) const = default;
};

struct Example {
  std::string id;
  Tokens query;
  RankedContext context;
  int y = 0;
  UType utype = UType::Missing;
  TargetResponse target;
  bool operator==(const Example&) const = default;
};

enum class Side { A, B };

struct PreferencePair {
  std::string example_id;
  Tokens response_a;
  Tokens response_b;
  Side preferred = Side::A;
  bool operator==(const PreferencePair&) const = default;

  const Tokens& chosen() const { return preferred == Side::A ? response_a : response_b; }
  const Tokens& rejected() const { return preferred == Side::A ? response_b : response_a; }
};

struct Dataset {
  std::vector<Example> train, valid, test;
};

inline constexpr int kDefaultMaxSentenceLen = 16;

// ---------------------------------------------------------------------------
// Labels

struct HierarchicalLabels {
  std::vector<std::vector<int>> sentence;
  std::vector<int> paragraph;
  int ranking = 0;
};

inline HierarchicalLabels derive_hierarchical_labels(const RankedContext& ctx) {
  if (ctx.paragraphs.empty()) throw ValidationError("context has no paragraphs");
  HierarchicalLabels out;
  for (const auto& p : ctx.paragraphs) {
    if (p.sentences.empty()) throw ValidationError("paragraph has no sentences");
    std::vector<int> s;
    int any = 0;
    for (const auto& sent : p.sentences) {
      s.push_back(sent.answerable ? 1 : 0);
      any |= s.back();
    }
    out.sentence.push_back(std::move(s));
    out.paragraph.push_back(any);
    out.ranking |= any;
  }
  return out;
}

/// Sets paragraph and context flags from the sentence labels.
inline void apply_labels(RankedContext& ctx) {
  const HierarchicalLabels l = derive_hierarchical_labels(ctx);
  for (std::size_t m = 0; m < ctx.paragraphs.size(); ++m) ctx.paragraphs[m].answerable = l.paragraph[m] != 0;
  ctx.answerable = l.ranking != 0;
}

/// Throws if stored paragraph/context flags disagree with the sentence labels.
inline void check_labels(const RankedContext& ctx) {
  const HierarchicalLabels l = derive_hierarchical_labels(ctx);
  for (std::size_t m = 0; m < ctx.paragraphs.size(); ++m)
    if (ctx.paragraphs[m].answerable != (l.paragraph[m] != 0))
      throw ValidationError("paragraph " + std::to_string(m) + " label disagrees with its sentences");
  if (ctx.answerable != (l.ranking != 0)) throw ValidationError("ranking label disagrees with its paragraphs");
}

inline void validate_example(const Example& ex, int max_sentence_len = kDefaultMaxSentenceLen) {
  auto fail = [&](const std::string& what) { throw ValidationError("example " + ex.id + ": " + what); };
  try {
    check_labels(ex.context);
  } catch (const ValidationError& e) {
    fail(e.what());
  }
  if (ex.query.empty()) fail("empty query");
  for (const auto& p : ex.context.paragraphs)
    for (const auto& s : p.sentences)
      if (s.tokens.empty() || static_cast<int>(s.tokens.size()) > max_sentence_len) fail("sentence length out of range");
  if (ex.y != 0 && ex.y != 1) fail("y must be 0 or 1");
  if ((ex.y == 1) != ex.context.answerable) fail("y inconsistent with context labels");
  if ((ex.utype == UType::Answerable) != (ex.y == 1)) fail("utype inconsistent with y");
  if ((ex.target.kind == TargetKind::Answer) != (ex.y == 1)) fail("target kind inconsistent with y");
  if (ex.target.tokens.empty()) fail("empty target");
  const int n = static_cast<int>(ex.target.tokens.size());
  for (const auto* sp : {&ex.target.reason_span, &ex.target.suggestion_span})
    if (*sp && ((*sp)->start < 0 || (*sp)->start >= (*sp)->end || (*sp)->end > n)) fail("span out of bounds");
  if (ex.target.reason_span && ex.target.suggestion_span) {
    const Span a = *ex.target.reason_span, b = *ex.target.suggestion_span;
    if (a.start < b.end && b.start < a.end) fail("spans overlap");
  }
}

// ---------------------------------------------------------------------------
// Templates

inline const Tokens kReasonStem = {"does", "not", "contain", "details", "about"};
inline const Tokens kSuggestionStem = {"You", "might", "try", "providing", "more", "details"};
inline const std::vector<Tokens> kRefusalOpeners = {
    {"The", "context", "does", "not", "contain"}, {"You", "might", "try", "providing"}, {"I", "cannot", "answer"}};
inline const Tokens kBareRefusal = {"I", "cannot", "answer", "."};

inline Tokens reason_clause(const std::string& attribute, const std::string& entity) {
  return {"The", "context", "does", "not", "contain", "details", "about", "the", attribute, "of", entity, "."};
}

inline Tokens suggestion_clause(const std::string& entity) {
  return {"You", "might", "try", "providing", "more", "details", "about", entity, "."};
}

inline TargetResponse refusal_target(const std::string& attribute, const std::string& entity) {
  TargetResponse t;
  t.kind = TargetKind::Refusal;
  t.tokens = reason_clause(attribute, entity);
  const int r = static_cast<int>(t.tokens.size());
  const Tokens s = suggestion_clause(entity);
  t.tokens.insert(t.tokens.end(), s.begin(), s.end());
  t.reason_span = Span{0, r};
  t.suggestion_span = Span{r, static_cast<int>(t.tokens.size())};
  return t;
}

inline Tokens plain_query(const std::string& attribute, const std::string& entity) {
  return {"what", "is", "the", attribute, "of", entity, "?"};
}

inline Tokens presupposition_query(const std::string& attribute, const std::string& entity, const std::string& value) {
  return {"why", "is", "the", attribute, "of", entity, value, "?"};
}

inline Tokens fact_sentence(const std::string& e, const std::string& a, const std::string& v, bool alt) {
  if (alt) return {e, "has", "a", a, "of", v};
  return {"the", a, "of", e, "is", v};
}

/// (attribute, entity) named by a templated query.
inline std::pair<std::string, std::string> query_slots(const Tokens& q) {
  if (q.size() < 7 || q[2] != "the" || q[4] != "of") throw ValidationError("query does not follow a known template");
  return {q[3], q[5]};
}

// ---------------------------------------------------------------------------
// Generation spec

struct GenerationSpec {
  std::size_t n_train = 2000;
  std::size_t n_valid = 400;
  std::size_t n_test = 400;
  std::array<double, 4> type_mix{0.4, 0.3, 0.2, 0.1};  // indexed by UType
  int n_entities = 150;
  int n_attributes = 12;
  int n_values = 60;
  int n_ood_entities = 20;
  int n_ood_attributes = 4;
  int k_min = 1, k_max = 5;
  int m_min = 1, m_max = 4;
  int max_sentence_len = kDefaultMaxSentenceLen;
  double presupposition_rate = 0.3;
  double same_entity_rate = 0.3;
  double same_attribute_rate = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
};

namespace detail {

inline const std::vector<std::string>& attribute_words() {
  static const std::vector<std::string> w = {"color",  "size",  "weight", "origin",   "owner",  "shape",
                                             "texture", "flavor", "material", "height", "speed", "age",
                                             "rank",   "scent", "mood",   "voltage", "tempo",  "grade"};
  return w;
}

inline const std::vector<std::string>& value_words() {
  static const std::vector<std::string> w = {
      "red",    "blue",   "green",  "yellow", "purple", "orange", "black",  "white",   "silver", "golden",
      "crimson", "amber", "ivory",  "teal",   "violet", "maroon", "tiny",   "huge",    "small",  "large",
      "heavy",  "light",  "round",  "square", "smooth", "rough",  "sweet",  "bitter",  "sour",   "salty",
      "wooden", "metal",  "glass",  "stone",  "paper",  "plastic", "copper", "iron",   "tall",   "short",
      "fast",   "slow",   "ancient", "modern", "young", "old",    "north",  "south",   "east",   "west",
      "bright", "dull",   "warm",   "cold",   "soft",   "hard",   "dense",  "hollow",  "calm",   "loud",
      "frozen", "velvet", "marble", "cedar",  "rusty",  "quiet",  "sharp",  "gentle",  "noble",  "humble"};
  return w;
}

/// Pronounceable three-syllable names, in a fixed order.
inline std::vector<std::string> entity_names() {
  static const std::array<const char*, 15> syl = {"ka", "lo", "mi", "re", "tu", "sa", "no", "vi",
                                                  "be", "du", "ri", "po", "ze", "fa", "gu"};
  std::vector<std::string> out;
  for (auto a : syl)
    for (auto b : syl)
      for (auto c : syl) out.push_back(std::string(a) + b + c);
  return out;
}

inline std::vector<std::size_t> largest_remainder(std::size_t total, const std::array<double, 4>& mix) {
  std::vector<std::size_t> counts(mix.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double exact = mix[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    used += counts[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
  for (std::size_t i = 0; used < total; ++i, ++used) ++counts[rem[i % rem.size()].second];
  return counts;
}

}  // namespace detail

inline void GenerationSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("generation spec: " + field + " " + why);
  };
  if (n_train == 0) fail("counts.train", "must be > 0");
  if (n_valid == 0) fail("counts.valid", "must be > 0");
  if (n_test == 0) fail("counts.test", "must be > 0");
  double sum = 0.0;
  for (std::size_t i = 0; i < type_mix.size(); ++i) {
    if (!(type_mix[i] >= 0.0)) fail(std::string("type_mix.") + to_string(kAllUTypes[i]), "must be >= 0");
    sum += type_mix[i];
  }
  if (std::abs(sum - 1.0) > 1e-9) fail("type_mix", "must sum to 1 (got " + std::to_string(sum) + ")");
  const int n_attr_words = static_cast<int>(detail::attribute_words().size());
  if (n_entities < 2) fail("n_entities", "must be >= 2");
  if (n_attributes < 2) fail("n_attributes", "must be >= 2");
  if (n_values < 2 || n_values > static_cast<int>(detail::value_words().size()))
    fail("n_values", "must be in [2, " + std::to_string(detail::value_words().size()) + "]");
  if (n_ood_entities < 0) fail("n_ood_entities", "must be >= 0");
  if (n_ood_attributes < 0) fail("n_ood_attributes", "must be >= 0");
  if (n_attributes + n_ood_attributes > n_attr_words)
    fail("n_attributes", "plus n_ood_attributes must be <= " + std::to_string(n_attr_words));
  if (n_entities + n_ood_entities > static_cast<int>(detail::entity_names().size()))
    fail("n_entities", "plus n_ood_entities exceeds the name pool");
  if (type_mix[static_cast<int>(UType::Ambiguous)] > 0 && n_ood_entities == 0 && n_ood_attributes == 0)
    fail("type_mix.AMBIGUOUS", "requires n_ood_entities or n_ood_attributes > 0");
  if (k_min < 1 || k_max < k_min) fail("k_range", "must satisfy 1 <= min <= max");
  if (m_min < 1 || m_max < m_min) fail("m_range", "must satisfy 1 <= min <= max");
  if (max_sentence_len < 6) fail("max_sentence_len", "must be >= 6 (template length)");
  if (presupposition_rate < 0 || presupposition_rate > 1) fail("presupposition_rate", "must be in [0, 1]");
  if (same_entity_rate < 0 || same_attribute_rate < 0 || same_entity_rate + same_attribute_rate > 1)
    fail("same_entity_rate", "and same_attribute_rate must be >= 0 with sum <= 1");
  const std::size_t pairs = static_cast<std::size_t>(n_entities) * static_cast<std::size_t>(n_attributes);
  if (pairs < 6) fail("n_entities", "times n_attributes must be >= 6 (two pairs per split)");
}

inline nlohmann::ordered_json spec_to_json(const GenerationSpec& s) {
  nlohmann::ordered_json j;
  j["counts"] = {{"train", s.n_train}, {"valid", s.n_valid}, {"test", s.n_test}};
  nlohmann::ordered_json mix;
  for (std::size_t i = 0; i < 4; ++i) mix[to_string(kAllUTypes[i])] = s.type_mix[i];
  j["type_mix"] = mix;
  j["n_entities"] = s.n_entities;
  j["n_attributes"] = s.n_attributes;
  j["n_values"] = s.n_values;
  j["n_ood_entities"] = s.n_ood_entities;
  j["n_ood_attributes"] = s.n_ood_attributes;
  j["k_range"] = {s.k_min, s.k_max};
  j["m_range"] = {s.m_min, s.m_max};
  j["max_sentence_len"] = s.max_sentence_len;
  j["presupposition_rate"] = s.presupposition_rate;
  j["same_entity_rate"] = s.same_entity_rate;
  j["same_attribute_rate"] = s.same_attribute_rate;
  j["seed"] = s.seed;
  return j;
}

/// Parses a spec; absent keys keep their defaults, unknown keys are rejected.
inline GenerationSpec spec_from_json(const nlohmann::json& j) {
  GenerationSpec s;
  if (!j.is_object()) throw ConfigError("generation spec: expected a JSON object");
  auto get = [](const nlohmann::json& v, const std::string& field, auto& out) {
    try {
      v.get_to(out);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("generation spec: " + field + " has the wrong type");
    }
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "counts") {
      for (const auto& [k, c] : v.items()) {
        if (k == "train") get(c, "counts.train", s.n_train);
        else if (k == "valid") get(c, "counts.valid", s.n_valid);
        else if (k == "test") get(c, "counts.test", s.n_test);
        else throw ConfigError("generation spec: unknown field counts." + k);
      }
    } else if (key == "type_mix") {
      s.type_mix = {0, 0, 0, 0};
      for (const auto& [k, p] : v.items()) {
        UType t;
        try {
          t = parse_utype(k);
        } catch (const ValidationError&) {
          throw ConfigError("generation spec: unknown field type_mix." + k);
        }
        get(p, "type_mix." + k, s.type_mix[static_cast<int>(t)]);
      }
    } else if (key == "k_range" || key == "m_range") {
      std::array<int, 2> r{};
      get(v, key, r);
      (key == "k_range" ? s.k_min : s.m_min) = r[0];
      (key == "k_range" ? s.k_max : s.m_max) = r[1];
    } else if (key == "n_entities") get(v, key, s.n_entities);
    else if (key == "n_attributes") get(v, key, s.n_attributes);
    else if (key == "n_values") get(v, key, s.n_values);
    else if (key == "n_ood_entities") get(v, key, s.n_ood_entities);
    else if (key == "n_ood_attributes") get(v, key, s.n_ood_attributes);
    else if (key == "max_sentence_len") get(v, key, s.max_sentence_len);
    else if (key == "presupposition_rate") get(v, key, s.presupposition_rate);
    else if (key == "same_entity_rate") get(v, key, s.same_entity_rate);
    else if (key == "same_attribute_rate") get(v, key, s.same_attribute_rate);
    else if (key == "seed") get(v, key, s.seed);
    else throw ConfigError("generation spec: unknown field " + key);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Generator

namespace detail {

struct FactWorld {
  std::vector<std::string> entities, attributes, values, ood_entities, ood_attributes;
  std::map<std::pair<int, int>, int> value_of;                // (entity, attribute) -> value index
  std::array<std::vector<std::pair<int, int>>, 3> pairs;      // in-pool pairs per split
  std::array<std::vector<std::pair<std::string, std::string>>, 3> ood_pairs;  // (entity, attribute) per split
};

inline std::array<std::size_t, 3> split_sizes(std::size_t total, const GenerationSpec& s) {
  const double n = static_cast<double>(s.n_train + s.n_valid + s.n_test);
  std::array<std::size_t, 3> out{};
  out[1] = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(total * (s.n_valid / n))));
  out[2] = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(total * (s.n_test / n))));
  out[0] = total - out[1] - out[2];
  return out;
}

template <class T>
std::array<std::vector<T>, 3> partition(std::vector<T> items, const GenerationSpec& s, Rng& rng) {
  std::array<std::vector<T>, 3> out;
  if (items.empty()) return out;
  rng.shuffle(items);
  const auto sz = items.size() >= 3 ? split_sizes(items.size(), s) : std::array<std::size_t, 3>{items.size(), 0, 0};
  std::size_t at = 0;
  for (int k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < sz[k]; ++i) out[k].push_back(items[at++]);
  return out;
}

inline FactWorld build_world(const GenerationSpec& s) {
  FactWorld w;
  Rng rng(s.seed, "corpus/world");
  std::vector<std::string> names = entity_names();
  rng.shuffle(names);
  w.entities.assign(names.begin(), names.begin() + s.n_entities);
  w.ood_entities.assign(names.begin() + s.n_entities, names.begin() + s.n_entities + s.n_ood_entities);
  const auto& attrs = attribute_words();
  w.attributes.assign(attrs.begin(), attrs.begin() + s.n_attributes);
  w.ood_attributes.assign(attrs.begin() + s.n_attributes, attrs.begin() + s.n_attributes + s.n_ood_attributes);
  w.values.assign(value_words().begin(), value_words().begin() + s.n_values);

  std::vector<std::pair<int, int>> all;
  for (int e = 0; e < s.n_entities; ++e)
    for (int a = 0; a < s.n_attributes; ++a) {
      all.emplace_back(e, a);
      w.value_of[{e, a}] = static_cast<int>(rng.index(w.values.size()));
    }
  w.pairs = partition(all, s, rng);
  for (int k = 0; k < 3; ++k)
    if (w.pairs[k].size() < 2) throw ConfigError("generation spec: n_entities too small to populate every split");

  std::vector<std::pair<std::string, std::string>> ood;
  for (const auto& x : w.ood_entities)
    for (const auto& a : w.attributes) ood.emplace_back(x, a);
  for (const auto& e : w.entities)
    for (const auto& a : w.ood_attributes) ood.emplace_back(e, a);
  w.ood_pairs = partition(ood, s, rng);
  if (s.type_mix[static_cast<int>(UType::Ambiguous)] > 0)
    for (int k = 0; k < 3; ++k)
      if (w.ood_pairs[k].empty()) throw ConfigError("generation spec: n_ood_entities too small to populate every split");
  return w;
}

inline Example make_example(const FactWorld& w, const GenerationSpec& s, int split, UType type, Rng& rng) {
  const auto& pool = w.pairs[split];
  std::pair<std::string, std::string> ood;
  std::pair<int, int> base = pool[rng.index(pool.size())];
  if (type == UType::Ambiguous) {
    // Distractors stay on the in-pool half of the out-of-pool query.
    ood = rng.pick(w.ood_pairs[split]);
    std::vector<std::pair<int, int>> near;
    for (const auto& p : pool)
      if (w.entities[p.first] == ood.first || w.attributes[p.second] == ood.second) near.push_back(p);
    if (!near.empty()) base = rng.pick(near);
  }
  const auto [e, a] = base;
  const std::string& E = w.entities[e];
  const std::string& A = w.attributes[a];
  const std::string& V = w.values[w.value_of.at({e, a})];

  std::vector<std::pair<int, int>> by_entity, by_attribute;
  for (const auto& p : pool) {
    if (p == std::make_pair(e, a)) continue;
    if (p.first == e) by_entity.push_back(p);
    if (p.second == a) by_attribute.push_back(p);
  }

  Example ex;
  const int M = rng.range(s.m_min, s.m_max);
  std::vector<int> ks;
  int n = 0;
  for (int m = 0; m < M; ++m) {
    ks.push_back(rng.range(s.k_min, s.k_max));
    n += ks.back();
  }
  std::vector<Sentence> sents;
  for (int i = 0; i < n; ++i) {
    const double r = rng.uniform();
    std::pair<int, int> p;
    if (r < s.same_entity_rate && !by_entity.empty()) p = rng.pick(by_entity);
    else if (r < s.same_entity_rate + s.same_attribute_rate && !by_attribute.empty()) p = rng.pick(by_attribute);
    else {
      do p = rng.pick(pool);
      while (p == std::make_pair(e, a));
    }
    const bool alt = rng.bernoulli(0.5);
    sents.push_back({fact_sentence(w.entities[p.first], w.attributes[p.second], w.values[w.value_of.at(p)], alt), false});
  }

  std::string q_attr = A, q_ent = E;
  switch (type) {
    case UType::Answerable: {
      ex.query = rng.bernoulli(s.presupposition_rate) ? presupposition_query(A, E, V) : plain_query(A, E);
      const std::size_t i = rng.index(sents.size());
      sents[i] = {fact_sentence(E, A, V, rng.bernoulli(0.5)), true};
      break;
    }
    case UType::Missing:
      ex.query = plain_query(A, E);
      break;
    case UType::Contradictory: {
      std::string wrong;
      do wrong = rng.pick(w.values);
      while (wrong == V);
      ex.query = presupposition_query(A, E, wrong);
      const std::size_t i = rng.index(sents.size());
      sents[i] = {fact_sentence(E, A, V, rng.bernoulli(0.5)), false};
      break;
    }
    case UType::Ambiguous:
      q_ent = ood.first;
      q_attr = ood.second;
      ex.query = plain_query(q_attr, q_ent);
      break;
  }

  std::size_t at = 0;
  for (int K : ks) {
    Paragraph p;
    for (int k = 0; k < K; ++k) p.sentences.push_back(sents[at++]);
    ex.context.paragraphs.push_back(std::move(p));
  }
  apply_labels(ex.context);
  ex.utype = type;
  ex.y = ex.context.answerable ? 1 : 0;
  if (ex.y == 1) {
    ex.target.kind = TargetKind::Answer;
    ex.target.tokens = {V};
  } else {
    ex.target = refusal_target(q_attr, q_ent);
  }
  return ex;
}

}  // namespace detail

/// Seeded synthetic dataset. Every (entity, attribute) pair belongs to exactly
/// one split; the type mix is met by stratified counts.
inline Dataset generate_dataset(const GenerationSpec& spec) {
  spec.validate();
  const detail::FactWorld world = detail::build_world(spec);
  Dataset out;
  const std::array<std::size_t, 3> counts = {spec.n_train, spec.n_valid, spec.n_test};
  const std::array<const char*, 3> names = {"train", "valid", "test"};
  std::array<std::vector<Example>*, 3> dst = {&out.train, &out.valid, &out.test};
  for (int k = 0; k < 3; ++k) {
    Rng rng(spec.seed, std::string("corpus/") + names[k]);
    std::vector<UType> types;
    const auto per_type = detail::largest_remainder(counts[k], spec.type_mix);
    for (std::size_t t = 0; t < per_type.size(); ++t) types.insert(types.end(), per_type[t], kAllUTypes[t]);
    rng.shuffle(types);
    for (std::size_t i = 0; i < types.size(); ++i) {
      Example ex = detail::make_example(world, spec, k, types[i], rng);
      char id[32];
      std::snprintf(id, sizeof id, "%s-%05zu", names[k], i);
      ex.id = id;
      dst[k]->push_back(std::move(ex));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL I/O

inline nlohmann::ordered_json example_to_json(const Example& ex) {
  nlohmann::ordered_json j;
  j["id"] = ex.id;
  j["query"] = join(ex.query);
  auto paragraphs = nlohmann::ordered_json::array();
  auto labels = nlohmann::ordered_json::array();
  for (const auto& p : ex.context.paragraphs) {
    auto ps = nlohmann::ordered_json::array();
    auto ls = nlohmann::ordered_json::array();
    for (const auto& s : p.sentences) {
      ps.push_back(join(s.tokens));
      ls.push_back(s.answerable ? 1 : 0);
    }
    paragraphs.push_back(ps);
    labels.push_back(ls);
  }
  j["paragraphs"] = paragraphs;
  j["sentence_labels"] = labels;
  j["y"] = ex.y;
  j["utype"] = to_string(ex.utype);
  nlohmann::ordered_json t;
  t["kind"] = ex.target.kind == TargetKind::Answer ? "ANSWER" : "REFUSAL";
  t["text"] = join(ex.target.tokens);
  auto span = [](const std::optional<Span>& s) {
    return s ? nlohmann::ordered_json::array({s->start, s->end}) : nlohmann::ordered_json(nullptr);
  };
  t["reason_span"] = span(ex.target.reason_span);
  t["suggestion_span"] = span(ex.target.suggestion_span);
  j["target"] = t;
  return j;
}

/// Parses one record. Structural errors throw ValidationError; invariants are
/// checked separately by validate_example.
inline Example example_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys = {"id", "query", "paragraphs", "sentence_labels", "y", "utype", "target"};
  if (!j.is_object()) throw ValidationError("record is not an object");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw ValidationError("unknown field " + k);
  for (const auto& k : keys)
    if (!j.contains(k)) throw ValidationError("missing field " + k);
  Example ex;
  try {
    ex.id = j.at("id").get<std::string>();
    ex.query = tokenize(j.at("query").get<std::string>());
    const auto& ps = j.at("paragraphs");
    const auto& ls = j.at("sentence_labels");
    if (!ps.is_array() || !ls.is_array() || ps.size() != ls.size())
      throw ValidationError("paragraphs and sentence_labels differ in shape");
    for (std::size_t m = 0; m < ps.size(); ++m) {
      if (ps[m].size() != ls[m].size()) throw ValidationError("paragraphs and sentence_labels differ in shape");
      Paragraph p;
      for (std::size_t k = 0; k < ps[m].size(); ++k) {
        const int l = ls[m][k].get<int>();
        if (l != 0 && l != 1) throw ValidationError("sentence label must be 0 or 1");
        p.sentences.push_back({tokenize(ps[m][k].get<std::string>()), l == 1});
      }
      ex.context.paragraphs.push_back(std::move(p));
    }
    ex.y = j.at("y").get<int>();
    ex.utype = parse_utype(j.at("utype").get<std::string>());
    const auto& t = j.at("target");
    const std::string kind = t.at("kind").get<std::string>();
    if (kind == "ANSWER") ex.target.kind = TargetKind::Answer;
    else if (kind == "REFUSAL") ex.target.kind = TargetKind::Refusal;
    else throw ValidationError("unknown target kind " + kind);
    ex.target.tokens = tokenize(t.at("text").get<std::string>());
    auto span = [](const nlohmann::json& s) -> std::optional<Span> {
      if (s.is_null()) return std::nullopt;
      if (!s.is_array() || s.size() != 2) throw ValidationError("span must be [start, end)");
      return Span{s[0].get<int>(), s[1].get<int>()};
    };
    ex.target.reason_span = span(t.at("reason_span"));
    ex.target.suggestion_span = span(t.at("suggestion_span"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad field type: ") + e.what());
  }
  // Paragraph and context flags are derived; disagreement with y is caught by validate_example.
  for (auto& p : ex.context.paragraphs) {
    p.answerable = false;
    for (const auto& s : p.sentences) p.answerable = p.answerable || s.answerable;
    ex.context.answerable = ex.context.answerable || p.answerable;
  }
  return ex;
}

inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp);
    out << content;
    if (!out.flush()) throw ConfigError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ConfigError("cannot rename " + tmp + " to " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string dataset_to_jsonl(const std::vector<Example>& data) {
  std::string out;
  for (const auto& ex : data) {
    out += example_to_json(ex).dump();
    out += '\n';
  }
  return out;
}

inline void save_dataset(const std::vector<Example>& data, const std::string& path) {
  write_file_atomic(path, dataset_to_jsonl(data));
}

inline std::vector<Example> parse_dataset(const std::string& text, int max_sentence_len = kDefaultMaxSentenceLen) {
  std::vector<Example> out;
  std::istringstream in(text);
  std::string line;
  for (int no = 1; std::getline(in, line); ++no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Example ex;
    try {
      ex = example_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("line " + std::to_string(no) + ": malformed JSON: " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(no) + ": " + e.what());
    }
    validate_example(ex, max_sentence_len);
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<Example> load_dataset(const std::string& path, int max_sentence_len = kDefaultMaxSentenceLen) {
  return parse_dataset(read_file(path), max_sentence_len);
}

// ---------------------------------------------------------------------------
// Vocabulary construction

/// Reserved markers, then every surface token by descending frequency with
/// lexicographic tie-breaks. `extra` tokens count once each.
inline Vocab build_vocab(const std::vector<const std::vector<Example>*>& datasets, const Tokens& extra = {}) {
  std::map<std::string, std::size_t> freq;
  auto count = [&](const Tokens& ts) {
    for (const auto& t : ts) ++freq[t];
  };
  std::size_t n_examples = 0;
  for (const auto* ds : datasets)
    for (const auto& ex : *ds) {
      ++n_examples;
      count(ex.query);
      for (const auto& p : ex.context.paragraphs)
        for (const auto& s : p.sentences) count(s.tokens);
      count(ex.target.tokens);
    }
  if (n_examples == 0) throw ValidationError("build_vocab: no examples");
  count(extra);
  for (const auto& s : kSpecialTokens) freq.erase(s);
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  for (const auto& [t, c] : items) tokens.push_back(t);
  return Vocab(tokens);
}

inline Vocab build_vocab(const std::vector<Example>& data, const Tokens& extra = {}) {
  return build_vocab(std::vector<const std::vector<Example>*>{&data}, extra);
}

// ---------------------------------------------------------------------------
// Preference oracle

enum class Candidate { Gold, ReasonOnly, SuggestionOnly, Bare, WrongAnswer };

/// Oracle rank of a candidate: higher is better.
inline int oracle_rank(int y, Candidate c) {
  if (y == 0) {
    switch (c) {
      case Candidate::Gold: return 3;
      case Candidate::ReasonOnly:
      case Candidate::SuggestionOnly: return 2;
      case Candidate::Bare: return 1;
      case Candidate::WrongAnswer: return 0;
    }
  }
  switch (c) {
    case Candidate::Gold: return 2;
    case Candidate::WrongAnswer: return 0;
    default: return 1;
  }
}

/// Value tokens observed in the data: the final token of every context sentence.
inline std::vector<std::string> value_pool(const std::vector<Example>& data) {
  std::set<std::string> vals;
  for (const auto& ex : data)
    for (const auto& p : ex.context.paragraphs)
      for (const auto& s : p.sentences)
        if (!s.tokens.empty()) vals.insert(s.tokens.back());
  return {vals.begin(), vals.end()};
}

inline Tokens candidate_tokens(const Example& ex, Candidate c, const std::vector<std::string>& values, Rng& rng) {
  const auto [attr, ent] = query_slots(ex.query);
  switch (c) {
    case Candidate::Gold: return ex.target.tokens;
    case Candidate::ReasonOnly: return reason_clause(attr, ent);
    case Candidate::SuggestionOnly: return suggestion_clause(ent);
    case Candidate::Bare: return kBareRefusal;
    case Candidate::WrongAnswer: {
      std::set<std::string> seen(ex.query.begin(), ex.query.end());
      seen.insert(ex.target.tokens.begin(), ex.target.tokens.end());
      for (const auto& p : ex.context.paragraphs)
        for (const auto& s : p.sentences) seen.insert(s.tokens.begin(), s.tokens.end());
      std::vector<std::string> options;
      for (const auto& v : values)
        if (!seen.count(v)) options.push_back(v);
      if (options.empty()) throw ValidationError("no wrong-value candidate available for " + ex.id);
      return {rng.pick(options)};
    }
  }
  return {};
}

inline std::vector<PreferencePair> make_preference_pairs(const std::vector<Example>& data, long n_pairs,
                                                         std::uint64_t seed) {
  if (n_pairs <= 0) throw ConfigError("n_pairs must be > 0");
  if (data.empty()) throw ValidationError("make_preference_pairs: empty dataset");
  const std::vector<std::string> values = value_pool(data);
  Rng rng(seed, "corpus/pairs");
  constexpr std::array<Candidate, 5> kinds = {Candidate::Gold, Candidate::ReasonOnly, Candidate::SuggestionOnly,
                                              Candidate::Bare, Candidate::WrongAnswer};
  std::vector<PreferencePair> out;
  out.reserve(static_cast<std::size_t>(n_pairs));
  while (static_cast<long>(out.size()) < n_pairs) {
    const Example& ex = data[rng.index(data.size())];
    Candidate a, b;
    do {
      a = kinds[rng.index(kinds.size())];
      b = kinds[rng.index(kinds.size())];
    } while (oracle_rank(ex.y, a) == oracle_rank(ex.y, b));
    PreferencePair p;
    p.example_id = ex.id;
    p.response_a = candidate_tokens(ex, a, values, rng);
    p.response_b = candidate_tokens(ex, b, values, rng);
    if (p.response_a == p.response_b) continue;
    p.preferred = oracle_rank(ex.y, a) > oracle_rank(ex.y, b) ? Side::A : Side::B;
    out.push_back(std::move(p));
  }
  return out;
}

inline nlohmann::ordered_json pair_to_json(const PreferencePair& p) {
  nlohmann::ordered_json j;
  j["example_id"] = p.example_id;
  j["response_a"] = join(p.response_a);
  j["response_b"] = join(p.response_b);
  j["preferred"] = p.preferred == Side::A ? "A" : "B";
  return j;
}

inline PreferencePair pair_from_json(const nlohmann::json& j) {
  PreferencePair p;
  try {
    p.example_id = j.at("example_id").get<std::string>();
    p.response_a = tokenize(j.at("response_a").get<std::string>());
    p.response_b = tokenize(j.at("response_b").get<std::string>());
    const std::string s = j.at("preferred").get<std::string>();
    if (s != "A" && s != "B") throw ValidationError("preferred must be A or B");
    p.preferred = s == "A" ? Side::A : Side::B;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad preference record: ") + e.what());
  }
  if (p.response_a == p.response_b) throw ValidationError("identical responses in pair for " + p.example_id);
  return p;
}

inline void save_pairs(const std::vector<PreferencePair>& pairs, const std::string& path) {
  std::string out;
  for (const auto& p : pairs) out += pair_to_json(p).dump() + "\n";
  write_file_atomic(path, out);
}

inline std::vector<PreferencePair> load_pairs(const std::string& path) {
  std::vector<PreferencePair> out;
  std::istringstream in(read_file(path));
  std::string line;
  for (int no = 1; std::getline(in, line); ++no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(pair_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ValidationError("line " + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace rul
