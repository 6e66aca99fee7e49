#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "rul/corpus.hpp"

using namespace rul;

namespace {

constexpr double kMixTolerance = 0.02;

Example tiny_example(const std::string& id = "x-0") {
  Example ex;
  ex.id = id;
  ex.query = {"a", "b"};
  Paragraph p;
  p.sentences.push_back({{"a"}, false});
  p.sentences.push_back({{"b", "a"}, false});
  ex.context.paragraphs.push_back(p);
  apply_labels(ex.context);
  ex.y = 0;
  ex.utype = UType::Missing;
  ex.target.kind = TargetKind::Refusal;
  ex.target.tokens = {"b"};
  return ex;
}

std::string serialize(const std::vector<Example>& data) { return dataset_to_jsonl(data); }

GenerationSpec small_spec(std::uint64_t seed = 3) {
  GenerationSpec s;
  s.n_train = 200;
  s.n_valid = 50;
  s.n_test = 50;
  s.seed = seed;
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rul_test_corpus_" + name)).string();
}

}  // namespace

TEST(Tokenize, WhitespaceSplitAndJoinRoundTrip) {
  EXPECT_EQ(tokenize("  what is\tthe  color ?"), (Tokens{"what", "is", "the", "color", "?"}));
  EXPECT_EQ(join({"a", "b", "c"}), "a b c");
  EXPECT_TRUE(tokenize("").empty());
}

TEST(Vocab, ReservedMarkersHaveFixedIndices) {
  Vocab v;
  EXPECT_EQ(v.id("[CLS]"), kCls);
  EXPECT_EQ(v.id("[SEP]"), kSep);
  EXPECT_EQ(v.id("[BOS]"), kBos);
  EXPECT_EQ(v.id("[EOS]"), kEos);
  EXPECT_EQ(v.id("[PAD]"), kPad);
  EXPECT_EQ(v.id("[UNK]"), kUnk);
  EXPECT_EQ(v.id("never-seen"), kUnk);
}

TEST(Vocab, SingleExampleWithTwoTokensHasSizeEight) {
  const Vocab v = build_vocab(std::vector<Example>{tiny_example()});
  EXPECT_EQ(v.size(), 8);
  // "a" occurs 3 times, "b" 3 times: tie broken lexicographically.
  EXPECT_EQ(v.token(6), "a");
  EXPECT_EQ(v.token(7), "b");
}

TEST(Vocab, FrequencyDescendingThenLexicographic) {
  Example ex = tiny_example();
  ex.query = {"z", "z", "z", "z", "y", "y", "y", "y"};
  const Vocab v = build_vocab(std::vector<Example>{ex});
  EXPECT_EQ(v.tokens()[6], "y");
  EXPECT_EQ(v.tokens()[7], "z");
  EXPECT_EQ(v.tokens()[8], "a");
  EXPECT_EQ(v.tokens()[9], "b");
}

TEST(Vocab, TwoDatasetsEqualVocabOfConcatenation) {
  const Dataset ds = generate_dataset(small_spec());
  std::vector<Example> cat = ds.train;
  cat.insert(cat.end(), ds.valid.begin(), ds.valid.end());
  EXPECT_EQ(build_vocab(std::vector<const std::vector<Example>*>{&ds.train, &ds.valid}), build_vocab(cat));
}

TEST(Vocab, EncodeDecodeIsBijectiveOnKnownTokens) {
  const Dataset ds = generate_dataset(small_spec());
  const Vocab v = build_vocab(std::vector<const std::vector<Example>*>{&ds.train, &ds.valid, &ds.test});
  for (int i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(i)), i);
  const Tokens q = ds.test[0].query;
  EXPECT_EQ(v.decode(v.encode(q)), q);
}

TEST(Vocab, RejectsMisplacedReservedTokens) {
  EXPECT_THROW(Vocab(std::vector<std::string>{"a", "b"}), ValidationError);
  std::vector<std::string> t(kSpecialTokens.begin(), kSpecialTokens.end());
  t.push_back("a");
  t.push_back("a");
  EXPECT_THROW(Vocab{t}, ValidationError);
}

TEST(Labels, AllZeroSentencesGiveZeroEverywhere) {
  RankedContext ctx;
  for (int m = 0; m < 3; ++m) ctx.paragraphs.push_back(Paragraph{{{{"x"}, false}, {{"y"}, false}}, false});
  const HierarchicalLabels l = derive_hierarchical_labels(ctx);
  EXPECT_EQ(l.paragraph, (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(l.ranking, 0);
}

TEST(Labels, OneSentenceInParagraphThreeOfFour) {
  RankedContext ctx;
  for (int m = 0; m < 4; ++m) ctx.paragraphs.push_back(Paragraph{{{{"x"}, false}, {{"y"}, false}}, false});
  ctx.paragraphs[2].sentences[1].answerable = true;
  const HierarchicalLabels l = derive_hierarchical_labels(ctx);
  EXPECT_EQ(l.paragraph, (std::vector<int>{0, 0, 1, 0}));
  EXPECT_EQ(l.ranking, 1);
}

TEST(Labels, EmptyContextOrParagraphIsValidationError) {
  RankedContext ctx;
  EXPECT_THROW(derive_hierarchical_labels(ctx), ValidationError);
  ctx.paragraphs.emplace_back();
  EXPECT_THROW(derive_hierarchical_labels(ctx), ValidationError);
}

TEST(Labels, InconsistentStoredFlagsAreRejected) {
  RankedContext ctx;
  ctx.paragraphs.push_back(Paragraph{{{{"x"}, true}}, false});
  EXPECT_THROW(check_labels(ctx), ValidationError);
  apply_labels(ctx);
  EXPECT_NO_THROW(check_labels(ctx));
  EXPECT_TRUE(ctx.answerable);
}

TEST(Labels, PropagationIsMonotone) {
  const Dataset ds = generate_dataset(small_spec());
  for (const auto& ex : ds.train) {
    const HierarchicalLabels before = derive_hierarchical_labels(ex.context);
    RankedContext c = ex.context;
    c.paragraphs.back().sentences.front().answerable = true;
    const HierarchicalLabels after = derive_hierarchical_labels(c);
    for (std::size_t m = 0; m < before.paragraph.size(); ++m) EXPECT_GE(after.paragraph[m], before.paragraph[m]);
    EXPECT_GE(after.ranking, before.ranking);
  }
}

TEST(Generate, DegenerateMixGivesAllAnswerable) {
  GenerationSpec s;
  s.n_train = 10;
  s.n_valid = s.n_test = 1;
  s.type_mix = {1.0, 0.0, 0.0, 0.0};
  const Dataset ds = generate_dataset(s);
  ASSERT_EQ(ds.train.size(), 10u);
  for (const auto& ex : ds.train) {
    EXPECT_EQ(ex.y, 1);
    EXPECT_EQ(ex.target.kind, TargetKind::Answer);
  }
}

TEST(Generate, LabelHistogramWithinTwoPercentOfMix) {
  GenerationSpec s;
  s.n_train = 1000;
  s.n_valid = s.n_test = 10;
  s.seed = 7;
  const Dataset ds = generate_dataset(s);
  std::array<int, 4> counts{};
  for (const auto& ex : ds.train) ++counts[static_cast<int>(ex.utype)];
  for (int t = 0; t < 4; ++t) EXPECT_NEAR(counts[t] / 1000.0, s.type_mix[t], kMixTolerance) << to_string(kAllUTypes[t]);
}

TEST(Generate, SameSeedIsByteIdenticalAndSeedsDiffer) {
  const Dataset a = generate_dataset(small_spec(11)), b = generate_dataset(small_spec(11));
  const Dataset c = generate_dataset(small_spec(12));
  EXPECT_EQ(serialize(a.train), serialize(b.train));
  EXPECT_EQ(serialize(a.test), serialize(b.test));
  EXPECT_NE(serialize(a.train), serialize(c.train));
}

TEST(Generate, EveryExampleSatisfiesSchemaInvariants) {
  const Dataset ds = generate_dataset(small_spec());
  for (const auto* split : {&ds.train, &ds.valid, &ds.test})
    for (const auto& ex : *split) {
      EXPECT_NO_THROW(validate_example(ex));
      EXPECT_GE(ex.context.paragraphs.size(), 1u);
      EXPECT_LE(ex.context.paragraphs.size(), 4u);
      for (const auto& p : ex.context.paragraphs) {
        EXPECT_GE(p.sentences.size(), 1u);
        EXPECT_LE(p.sentences.size(), 5u);
      }
    }
}

TEST(Generate, AnswerableHasExactlyOnePositiveSentence) {
  const Dataset ds = generate_dataset(small_spec());
  for (const auto& ex : ds.train) {
    int pos = 0;
    for (const auto& p : ex.context.paragraphs)
      for (const auto& s : p.sentences) pos += s.answerable;
    EXPECT_EQ(pos, ex.y == 1 ? 1 : 0) << ex.id;
    if (ex.y == 1) {
      ASSERT_EQ(ex.target.tokens.size(), 1u);
      bool stated = false;
      for (const auto& p : ex.context.paragraphs)
        for (const auto& s : p.sentences)
          if (s.answerable) stated = s.tokens.back() == ex.target.tokens[0];
      EXPECT_TRUE(stated) << ex.id;
    }
  }
}

TEST(Generate, RefusalTargetsCarryBothSpans) {
  const Dataset ds = generate_dataset(small_spec());
  for (const auto& ex : ds.train) {
    if (ex.y == 1) continue;
    ASSERT_TRUE(ex.target.reason_span && ex.target.suggestion_span);
    const Tokens& t = ex.target.tokens;
    const Span r = *ex.target.reason_span;
    EXPECT_TRUE(std::search(t.begin() + r.start, t.begin() + r.end, kReasonStem.begin(), kReasonStem.end()) !=
                t.begin() + r.end);
    const Span s = *ex.target.suggestion_span;
    EXPECT_TRUE(std::equal(kSuggestionStem.begin(), kSuggestionStem.end(), t.begin() + s.start));
    EXPECT_LE(r.end, s.start);
  }
}

TEST(Generate, ContradictoryUsesPresuppositionQuery) {
  const Dataset ds = generate_dataset(small_spec());
  int n = 0;
  for (const auto& ex : ds.train)
    if (ex.utype == UType::Contradictory) {
      ++n;
      EXPECT_EQ(ex.query.front(), "why") << ex.id;
    }
  EXPECT_GT(n, 0);
}

TEST(Generate, SplitsShareNoEntityAttributePair) {
  const Dataset ds = generate_dataset(small_spec());
  auto pairs = [](const std::vector<Example>& d) {
    std::set<std::pair<std::string, std::string>> out;
    for (const auto& ex : d) out.insert(query_slots(ex.query));
    return out;
  };
  const auto tr = pairs(ds.train), va = pairs(ds.valid), te = pairs(ds.test);
  for (const auto& p : va) EXPECT_FALSE(tr.count(p)) << p.first << " " << p.second;
  for (const auto& p : te) {
    EXPECT_FALSE(tr.count(p));
    EXPECT_FALSE(va.count(p));
  }
}

TEST(GenerationSpec, BadProportionsNameTheField) {
  GenerationSpec s;
  s.type_mix = {0.5, 0.5, 0.5, 0.0};
  try {
    s.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("type_mix"), std::string::npos);
  }
}

TEST(GenerationSpec, ZeroCountNamesTheField) {
  GenerationSpec s;
  s.n_valid = 0;
  try {
    s.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("counts.valid"), std::string::npos);
  }
}

TEST(GenerationSpec, JsonRoundTripAndUnknownKeys) {
  GenerationSpec s = small_spec(5);
  s.k_min = s.k_max = 5;
  const GenerationSpec t = spec_from_json(nlohmann::json::parse(spec_to_json(s).dump()));
  EXPECT_EQ(spec_to_json(t).dump(), spec_to_json(s).dump());
  EXPECT_THROW(spec_from_json(nlohmann::json::parse(R"({"bogus": 1})")), ConfigError);
  EXPECT_THROW(spec_from_json(nlohmann::json::parse(R"({"counts": {"train": "ten"}})")), ConfigError);
}

TEST(Jsonl, SaveLoadRoundTripIsIdentity) {
  const Dataset ds = generate_dataset(small_spec());
  const std::string path = temp_path("roundtrip.jsonl");
  save_dataset(ds.valid, path);
  const auto back = load_dataset(path);
  EXPECT_EQ(serialize(back), serialize(ds.valid));
  std::filesystem::remove(path);
}

TEST(Jsonl, EmptyFileGivesEmptyList) {
  EXPECT_TRUE(parse_dataset("").empty());
  EXPECT_TRUE(parse_dataset("\n\n").empty());
}

TEST(Jsonl, MalformedLineReportsLineNumber) {
  const std::string good = example_to_json(tiny_example()).dump();
  try {
    parse_dataset(good + "\n{not json\n");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Jsonl, AnswerTargetOnUnanswerableIsRejectedWithId) {
  auto j = example_to_json(tiny_example("bad-7"));
  j["target"]["kind"] = "ANSWER";
  try {
    parse_dataset(j.dump() + "\n");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("bad-7"), std::string::npos) << e.what();
  }
}

TEST(Jsonl, FieldsMatchTheSchema) {
  const auto j = example_to_json(generate_dataset(small_spec()).train[0]);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"id", "query", "paragraphs", "sentence_labels", "y", "utype", "target"}));
  std::vector<std::string> tkeys;
  for (auto it = j["target"].begin(); it != j["target"].end(); ++it) tkeys.push_back(it.key());
  EXPECT_EQ(tkeys, (std::vector<std::string>{"kind", "text", "reason_span", "suggestion_span"}));
}

TEST(Pairs, FullRefusalBeatsBareAndGoldAnswerBeatsRefusal) {
  EXPECT_GT(oracle_rank(0, Candidate::Gold), oracle_rank(0, Candidate::ReasonOnly));
  EXPECT_EQ(oracle_rank(0, Candidate::ReasonOnly), oracle_rank(0, Candidate::SuggestionOnly));
  EXPECT_GT(oracle_rank(0, Candidate::SuggestionOnly), oracle_rank(0, Candidate::Bare));
  EXPECT_GT(oracle_rank(0, Candidate::Bare), oracle_rank(0, Candidate::WrongAnswer));
  EXPECT_GT(oracle_rank(1, Candidate::Gold), oracle_rank(1, Candidate::Bare));
  EXPECT_GT(oracle_rank(1, Candidate::Bare), oracle_rank(1, Candidate::WrongAnswer));
}

TEST(Pairs, PreferredSideFollowsOracleAndSidesDiffer) {
  const Dataset ds = generate_dataset(small_spec());
  const auto pairs = make_preference_pairs(ds.train, 300, 1);
  ASSERT_EQ(pairs.size(), 300u);
  std::map<std::string, const Example*> by_id;
  for (const auto& ex : ds.train) by_id[ex.id] = &ex;
  auto classify = [](const Example& ex, const Tokens& r) {
    const auto [attr, ent] = query_slots(ex.query);
    if (r == ex.target.tokens) return Candidate::Gold;
    if (r == kBareRefusal) return Candidate::Bare;
    if (r == reason_clause(attr, ent)) return Candidate::ReasonOnly;
    if (r == suggestion_clause(ent)) return Candidate::SuggestionOnly;
    return Candidate::WrongAnswer;
  };
  for (const auto& p : pairs) {
    EXPECT_NE(p.response_a, p.response_b);
    const Example& ex = *by_id.at(p.example_id);
    EXPECT_GT(oracle_rank(ex.y, classify(ex, p.chosen())), oracle_rank(ex.y, classify(ex, p.rejected()))) << ex.id;
  }
}

TEST(Pairs, FixedSeedIsDeterministic) {
  const Dataset ds = generate_dataset(small_spec());
  const auto a = make_preference_pairs(ds.train, 50, 9), b = make_preference_pairs(ds.train, 50, 9);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(pair_to_json(a[i]).dump(), pair_to_json(b[i]).dump());
}

TEST(Pairs, NonPositiveCountIsConfigError) {
  const Dataset ds = generate_dataset(small_spec());
  EXPECT_THROW(make_preference_pairs(ds.train, 0, 1), ConfigError);
}

TEST(Pairs, WrongAnswerNeverAppearsInContext) {
  const Dataset ds = generate_dataset(small_spec());
  const auto values = value_pool(ds.train);
  Rng rng(4);
  for (const auto& ex : ds.train) {
    const Tokens w = candidate_tokens(ex, Candidate::WrongAnswer, values, rng);
    ASSERT_EQ(w.size(), 1u);
    for (const auto& p : ex.context.paragraphs)
      for (const auto& s : p.sentences) EXPECT_EQ(std::count(s.tokens.begin(), s.tokens.end(), w[0]), 0);
  }
}

TEST(Pairs, FileRoundTrip) {
  const Dataset ds = generate_dataset(small_spec());
  const auto pairs = make_preference_pairs(ds.train, 20, 2);
  const std::string path = temp_path("pairs.jsonl");
  save_pairs(pairs, path);
  const auto back = load_pairs(path);
  ASSERT_EQ(back.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) EXPECT_EQ(pair_to_json(back[i]).dump(), pair_to_json(pairs[i]).dump());
  std::filesystem::remove(path);
}
