#include <gtest/gtest.h>

#include <sstream>

#include "cuimlm/lexicon.hpp"

using namespace cuimlm;

namespace {

const std::string kFixture = std::string(CUIMLM_TEST_DATA) + "/fixture_lexicon.tsv";

std::set<std::string> words(std::initializer_list<const char*> ws) { return {ws.begin(), ws.end()}; }

TEST(Lexicon, LoadsSingleEntry) {
  Lexicon lex = parse_lexicon("lungs\tC0024109\tANATOMY\n");
  ASSERT_EQ(lex.size(), 1u);
  const LexiconEntry* e = lex.find("lungs");
  ASSERT_NE(e, nullptr);
  EXPECT_EQ(e->cuis, std::set<ConceptId>{ConceptId("C0024109")});
  EXPECT_EQ(lex.group_name(e->group), "ANATOMY");
}

TEST(Lexicon, EmptyInput) {
  Lexicon lex = parse_lexicon("");
  EXPECT_TRUE(lex.empty());
  EXPECT_EQ(lex.group_count(), 0u);
  EXPECT_TRUE(lex.siblings("lungs").empty());
}

TEST(Lexicon, CuiIndexCollectsSharedConcept) {
  Lexicon lex = parse_lexicon("mass\tC0577559\tDISORDER\nlump\tC0577559\tDISORDER\n");
  EXPECT_EQ(lex.cui_index().at(ConceptId("C0577559")), words({"mass", "lump"}));
}

TEST(Lexicon, FixtureGroupsAndSiblings) {
  Lexicon lex = load_lexicon_file(kFixture);
  EXPECT_EQ(lex.group_count(), 2u);
  EXPECT_EQ(lex.group_name(*lex.group_of("heart")), "ANATOMY");
  EXPECT_EQ(lex.group_name(*lex.group_of("bleeding")), "DISORDER");
  EXPECT_EQ(*lex.group_of("Heart"), *lex.group_of("heart"));
  EXPECT_FALSE(lex.group_of("the").has_value());
  EXPECT_EQ(lex.siblings("lungs"), words({"lungs", "lung", "pulmonary"}));
  EXPECT_EQ(lex.siblings("kidney"), words({"kidney", "ren"}));
  EXPECT_TRUE(lex.siblings("the").empty());
}

TEST(Lexicon, GroupIdsFollowFirstAppearance) {
  Lexicon lex = parse_lexicon("mass\tC0577559\tDISORDER\nheart\tC0018787\tANATOMY\nlump\tC0577559\tDISORDER\n");
  EXPECT_EQ(*lex.group_id("DISORDER"), 0u);
  EXPECT_EQ(*lex.group_id("ANATOMY"), 1u);
}

TEST(Lexicon, MultipleCuisUnionSiblings) {
  Lexicon lex = parse_lexicon(
      "cold\tC0009443,C0009264\tDISORDER\n"
      "coryza\tC0009443\tDISORDER\n"
      "chill\tC0009264\tDISORDER\n");
  EXPECT_EQ(lex.siblings("cold"), words({"cold", "coryza", "chill"}));
  EXPECT_EQ(lex.siblings("coryza"), words({"cold", "coryza"}));
}

TEST(Lexicon, RepeatedWordMergesCuis) {
  Lexicon lex = parse_lexicon("cold\tC0009443\tDISORDER\ncold\tC0009264\tDISORDER\n");
  EXPECT_EQ(lex.find("cold")->cuis.size(), 2u);
}

TEST(Lexicon, SiblingRelationIsSymmetricAndReflexive) {
  Lexicon lex = load_lexicon_file(kFixture);
  for (const auto& [a, ea] : lex.entries()) {
    EXPECT_TRUE(lex.siblings(a).count(a)) << a;
    for (const auto& [b, eb] : lex.entries()) EXPECT_EQ(lex.siblings(a).count(b), lex.siblings(b).count(a)) << a << b;
  }
}

TEST(Lexicon, CuiIndexIsInverseOfEntries) {
  Lexicon lex = load_lexicon_file(kFixture);
  std::map<ConceptId, std::set<std::string>> rebuilt;
  for (const auto& [w, e] : lex.entries())
    for (const auto& c : e.cuis) rebuilt[c].insert(w);
  EXPECT_EQ(rebuilt, lex.cui_index());
}

TEST(Lexicon, TsvRoundTrip) {
  Lexicon lex = parse_lexicon(
      "mass\tC0577559\tDISORDER\n"
      "Heart\tC0018787\tANATOMY\n"
      "cold\tC0009443,C0009264\tDISORDER\n"
      "lump\tC0577559\tDISORDER\n");
  std::ostringstream out;
  lex.write_tsv(out);
  EXPECT_EQ(parse_lexicon(out.str()), lex);

  Lexicon fixture = load_lexicon_file(kFixture);
  std::ostringstream out2;
  fixture.write_tsv(out2);
  EXPECT_EQ(parse_lexicon(out2.str()), fixture);
}

TEST(Lexicon, SkipsCommentsBlankLinesAndCarriageReturns) {
  Lexicon lex = parse_lexicon("# header comment\n\nheart\tC0018787\tANATOMY\r\n   \n");
  EXPECT_EQ(lex.size(), 1u);
  EXPECT_TRUE(lex.contains("heart"));
}

void expect_parse_error(const std::string& text, std::size_t line) {
  try {
    parse_lexicon(text);
    FAIL() << "expected ParseError for: " << text;
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), line) << e.what();
  }
}

TEST(Lexicon, MalformedLinesReportLineNumber) {
  expect_parse_error("heart\tC0018787\tANATOMY\nlung\tC0024109\n", 2);
  expect_parse_error("heart\tC018787\tANATOMY\n", 1);
  expect_parse_error("heart\tc0018787\tANATOMY\n", 1);
  expect_parse_error("# c\n\tC0018787\tANATOMY\n", 2);
  expect_parse_error("heart attack\tC0027051\tDISORDER\n", 1);
  expect_parse_error("heart\tC0018787\tanatomy\n", 1);
  expect_parse_error("heart\tC0018787\tANATOMY\textra\n", 1);
}

TEST(Lexicon, ConflictingGroupIsAnError) {
  expect_parse_error("heart\tC0018787\tANATOMY\nheart\tC0018787\tDISORDER\n", 2);
}

TEST(Lexicon, FileErrorsNameTheFile) {
  EXPECT_THROW(load_lexicon_file("/nonexistent/lexicon.tsv"), IoError);
}

TEST(ConceptId, Validation) {
  EXPECT_TRUE(ConceptId::is_valid("C0024109"));
  EXPECT_FALSE(ConceptId::is_valid("c0024109"));
  EXPECT_FALSE(ConceptId::is_valid("C002410"));
  EXPECT_FALSE(ConceptId::is_valid("C00241090"));
  EXPECT_FALSE(ConceptId::is_valid(""));
  EXPECT_THROW(ConceptId("X1234567"), DataError);
}

}  // namespace
