#include <gtest/gtest.h>

#include <sstream>

#include "cuimlm/eval.hpp"
#include "cuimlm/synthetic.hpp"
#include "silhouette_reference.hpp"

using namespace cuimlm;

namespace {

struct Toy {
  Lexicon lex = parse_lexicon(
      "kidney\tC0022646\tANATOMY\n"
      "ren\tC0022646\tANATOMY\n"
      "heart\tC0018787\tANATOMY\n"
      "mass\tC0577559\tDISORDER\n"
      "lump\tC0577559\tDISORDER\n"
      "rash\tC0015230\tFINDING\n");
  Vocab vocab = Vocab::from_words({"kidney", "ren", "heart", "mass", "lump", "the", "rash"});
  ModelConfig cfg;
  ModelParams params;

  Toy() {
    cfg.hidden_dim = 8;
    cfg.layer_count = 1;
    cfg.head_count = 2;
    cfg.ff_dim = 16;
    cfg.max_seq_len = 8;
    cfg.vocab_size = vocab.size();
    cfg.group_count = lex.group_count();
    Rng rng(3);
    params = init_params(cfg, rng, 0.5);
  }

  void set_row(const std::string& w, std::vector<double> v) {
    for (std::size_t k = 0; k < cfg.hidden_dim; ++k) params.token_table.at(vocab.id(w), k) = k < v.size() ? v[k] : 0.0;
  }
};

TEST(Cosine, BasicProperties) {
  const std::vector<double> a{1, 2, 3}, b{-2, 0.5, 4}, e1{1, 0, 0}, e2{0, 1, 0};
  EXPECT_DOUBLE_EQ(cosine(a, a), 1.0);
  EXPECT_EQ(cosine(e1, e2), 0.0);
  EXPECT_EQ(cosine(a, b), cosine(b, a));
  const std::vector<double> scaled{3.5, 7.0, 10.5};
  EXPECT_NEAR(cosine(scaled, b), cosine(a, b), 1e-15);
  EXPECT_THROW(cosine(a, std::vector<double>{1, 0}), ShapeError);
}

TEST(Neighbors, SortedExcludesQueryAndBounded) {
  Toy s;
  NeighborReport r = nearest_neighbors("kidney", 10, s.params, s.vocab, s.lex, EmbeddingSpace::InputTable);
  EXPECT_EQ(r.neighbors.size(), s.vocab.size() - kReservedCount - 1);
  for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
    EXPECT_NE(r.neighbors[i].word, "kidney");
    EXPECT_GE(r.neighbors[i].similarity, -1.0);
    EXPECT_LE(r.neighbors[i].similarity, 1.0);
    if (i) {
      EXPECT_GE(r.neighbors[i - 1].similarity, r.neighbors[i].similarity);
    }
  }
  EXPECT_EQ(nearest_neighbors("kidney", 2, s.params, s.vocab, s.lex, EmbeddingSpace::InputTable).neighbors.size(), 2u);
}

TEST(Neighbors, PlantedSynonymRanksFirst) {
  Toy s;
  s.set_row("kidney", {1, 1, 0});
  s.set_row("ren", {1, 0.9, 0});
  NeighborReport r = nearest_neighbors("kidney", 1, s.params, s.vocab, s.lex, EmbeddingSpace::InputTable);
  EXPECT_EQ(r.neighbors[0].word, "ren");
  EXPECT_EQ(neighbor_rank("kidney", "ren", s.params, s.vocab, s.lex, EmbeddingSpace::InputTable), 1u);
}

TEST(Neighbors, InvariantUnderGlobalScaling) {
  Toy s;
  for (auto space : {EmbeddingSpace::InputTable, EmbeddingSpace::AugmentedInput}) {
    NeighborReport before = nearest_neighbors("mass", 20, s.params, s.vocab, s.lex, space);
    ModelParams scaled = s.params;
    for (double& v : scaled.token_table.values()) v *= 3.0;
    for (double& v : scaled.group_table.values()) v *= 3.0;
    NeighborReport after = nearest_neighbors("mass", 20, scaled, s.vocab, s.lex, space);
    ASSERT_EQ(before.neighbors.size(), after.neighbors.size());
    for (std::size_t i = 0; i < before.neighbors.size(); ++i) EXPECT_EQ(before.neighbors[i].word, after.neighbors[i].word);
  }
}

TEST(Neighbors, AugmentedSpaceAddsGroupRow) {
  Toy s;
  const auto v = word_vector(s.params, s.vocab, s.lex, "heart", EmbeddingSpace::AugmentedInput);
  const GroupId g = *s.lex.group_of("heart");
  for (std::size_t k = 0; k < s.cfg.hidden_dim; ++k)
    EXPECT_EQ(v[k], s.params.token_table.at(s.vocab.id("heart"), k) + s.params.group_table.at(g, k));
  const auto plain = word_vector(s.params, s.vocab, s.lex, "the", EmbeddingSpace::AugmentedInput);
  for (std::size_t k = 0; k < s.cfg.hidden_dim; ++k) EXPECT_EQ(plain[k], s.params.token_table.at(s.vocab.id("the"), k));
}

TEST(Neighbors, Errors) {
  Toy s;
  EXPECT_THROW(nearest_neighbors("spleen", 3, s.params, s.vocab, s.lex, EmbeddingSpace::InputTable), DataError);
  EXPECT_THROW(nearest_neighbors("kidney", 0, s.params, s.vocab, s.lex, EmbeddingSpace::InputTable), DataError);
}

TEST(Silhouette, PerfectClustersScoreOne) {
  Toy s;
  s.set_row("kidney", {1, 0});
  s.set_row("ren", {1, 0});
  s.set_row("heart", {1, 0});
  s.set_row("mass", {0, 2});
  s.set_row("lump", {0, 2});
  ClusterReport r = group_silhouette(s.params, s.vocab, s.lex, EmbeddingSpace::InputTable);
  EXPECT_DOUBLE_EQ(r.overall, 1.0);
  ASSERT_EQ(r.groups.size(), 2u);
  EXPECT_EQ(r.groups[0].size, 3u);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0].group, "FINDING");
}

TEST(Silhouette, RandomScatterScoresNearZero) {
  Rng rng(8);
  std::vector<std::vector<double>> pts;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < 120; ++i) {
    std::vector<double> v(200);
    for (double& x : v) x = rng.normal();
    pts.push_back(std::move(v));
    labels.push_back(i % 3);
  }
  const auto s = silhouette_samples(pts, labels);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t i = c; i < s.size(); i += 3) m += s[i];
    EXPECT_NEAR(m / 40.0, 0.0, 0.03);
  }
}

TEST(Silhouette, MatchesNaiveReferenceExactly) {
  Rng rng(10);
  std::vector<std::vector<double>> pts;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < 200; ++i) {
    std::vector<double> v(6);
    for (double& x : v) x = rng.uniform(-1, 1);
    pts.push_back(std::move(v));
    labels.push_back(rng.below(4));
  }
  const auto module = silhouette_samples(pts, labels);
  const auto naive = cuimlm::testing::naive_silhouette(pts, labels);
  ASSERT_EQ(module.size(), naive.size());
  for (std::size_t i = 0; i < module.size(); ++i) EXPECT_EQ(module[i], naive[i]) << i;
}

TEST(Silhouette, NeedsTwoGroupsOfTwo) {
  Toy s;
  Lexicon one_group = parse_lexicon("kidney\tC0022646\tANATOMY\nren\tC0022646\tANATOMY\n");
  EXPECT_THROW(group_silhouette(s.params, s.vocab, one_group, EmbeddingSpace::InputTable), DataError);
  EXPECT_THROW(silhouette_samples({{1.0}, {2.0}, {3.0}}, {0, 0, 1}), DataError);
}

TEST(Synonyms, MeanCosine) {
  Toy s;
  EXPECT_DOUBLE_EQ(synonym_similarity({{"kidney", "kidney"}}, s.params, s.vocab, s.lex, EmbeddingSpace::InputTable), 1.0);
  EXPECT_THROW(synonym_similarity({}, s.params, s.vocab, s.lex, EmbeddingSpace::InputTable), DataError);
  EXPECT_THROW(synonym_similarity({{"kidney", "spleen"}}, s.params, s.vocab, s.lex, EmbeddingSpace::InputTable), DataError);
  const auto pairs = sibling_pairs(s.lex, s.vocab);
  EXPECT_EQ(pairs, (std::vector<std::pair<std::string, std::string>>{{"kidney", "ren"}, {"lump", "mass"}}));
}

TEST(Projection, PlanarPointsKeepDistances) {
  Rng rng(12);
  std::vector<double> u(10), v(10);
  for (double& x : u) x = rng.normal();
  for (double& x : v) x = rng.normal();
  // Orthonormalize u, v.
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double t = 0;
    for (std::size_t i = 0; i < a.size(); ++i) t += a[i] * b[i];
    return t;
  };
  const double nu = std::sqrt(dot(u, u));
  for (double& x : u) x /= nu;
  const double p = dot(u, v);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * u[i];
  const double nv = std::sqrt(dot(v, v));
  for (double& x : v) x /= nv;

  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 15; ++i) {
    const double a = rng.uniform(-3, 3), b = rng.uniform(-1, 1);
    std::vector<double> x(10);
    for (std::size_t k = 0; k < 10; ++k) x[k] = 0.5 + a * u[k] + b * v[k];
    pts.push_back(x);
  }
  const auto proj = project_2d(pts);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = 0; j < pts.size(); ++j) {
      double d2 = 0;
      for (std::size_t k = 0; k < 10; ++k) d2 += (pts[i][k] - pts[j][k]) * (pts[i][k] - pts[j][k]);
      EXPECT_NEAR(std::hypot(proj[i].x - proj[j].x, proj[i].y - proj[j].y), std::sqrt(d2), 1e-9);
    }
}

TEST(Projection, CenteredOrderedDeterministic) {
  Rng rng(13);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 30; ++i) {
    std::vector<double> x(5);
    for (std::size_t k = 0; k < 5; ++k) x[k] = rng.normal() * static_cast<double>(k + 1) + 4.0;
    pts.push_back(x);
  }
  const auto proj = project_2d(pts);
  double mx = 0, my = 0, vx = 0, vy = 0;
  for (const auto& q : proj) {
    mx += q.x;
    my += q.y;
  }
  EXPECT_NEAR(mx / 30.0, 0.0, 1e-12);
  EXPECT_NEAR(my / 30.0, 0.0, 1e-12);
  for (const auto& q : proj) {
    vx += q.x * q.x;
    vy += q.y * q.y;
  }
  EXPECT_GE(vx, vy);
  const auto again = project_2d(pts);
  for (std::size_t i = 0; i < proj.size(); ++i) {
    EXPECT_EQ(proj[i].x, again[i].x);
    EXPECT_EQ(proj[i].y, again[i].y);
  }
}

TEST(Projection, Errors) {
  EXPECT_THROW(project_2d({{1, 2}, {3, 4}}), DataError);
  EXPECT_THROW(project_2d({{1, 2}, {1, 2}, {1, 2}}), DataError);
}

TEST(TaggedCorpus, Parses) {
  std::istringstream in("The/O kidney/ANATOMY\n\nmass/DISORDER in/O a/b/O\n");
  TaggedCorpus tc = load_tagged_corpus(in);
  ASSERT_EQ(tc.size(), 2u);
  EXPECT_EQ(tc.tag_names, (std::vector<std::string>{"O", "ANATOMY", "DISORDER"}));
  EXPECT_EQ(tc.words[0], (std::vector<std::string>{"the", "kidney"}));
  EXPECT_EQ(tc.tags[1], (std::vector<std::size_t>{2, 0, 0}));
  EXPECT_EQ(tc.words[1][2], "a/b");
  std::istringstream bad("ok/O\nbroken\n");
  try {
    load_tagged_corpus(bad);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

struct TinyCheckpoint {
  SyntheticCorpus sc = make_synthetic_corpus(300, 2);
  Checkpoint ck;

  TinyCheckpoint() {
    Vocab vocab = build_vocab(sc.sentences, 1, 1000);
    ModelConfig mcfg;
    mcfg.hidden_dim = 16;
    mcfg.layer_count = 1;
    mcfg.head_count = 2;
    mcfg.ff_dim = 32;
    mcfg.max_seq_len = 12;
    ck = initial_checkpoint(model_config_for(mcfg, vocab, sc.lexicon), TrainConfig{}, vocab, sc.lexicon);
  }

  TaggedCorpus tagged() const {
    std::ostringstream text;
    for (const auto& l : sc.tagged_lines) text << l << '\n';
    std::istringstream in(text.str());
    return load_tagged_corpus(in);
  }
};

TEST(Finetune, ConstantTagIsPerfectAfterOneEpoch) {
  TinyCheckpoint t;
  TaggedCorpus tc = t.tagged();
  for (auto& row : tc.tags) std::fill(row.begin(), row.end(), 0);
  tc.tag_names = {"X"};
  FinetuneConfig fc;
  fc.epochs = 1;
  fc.learning_rate = 1e-2;
  const FinetuneResult r = finetune_token_classifier(t.ck, t.sc.lexicon, tc, fc);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.per_tag_f1, std::vector<double>{1.0});
  EXPECT_EQ(r.head.weight.shape(), (Shape{1, 16}));
}

TEST(Finetune, ZeroEpochsIsNearChance) {
  TinyCheckpoint t;
  TaggedCorpus tc = t.tagged();
  Rng rng(1);
  for (auto& row : tc.tags)
    for (auto& tag : row) tag = rng.below(4);
  tc.tag_names = {"A", "B", "C", "D"};
  FinetuneConfig fc;
  fc.epochs = 0;
  const FinetuneResult r = finetune_token_classifier(t.ck, t.sc.lexicon, tc, fc);
  EXPECT_GT(r.test_tokens, 200u);
  EXPECT_NEAR(r.accuracy, 0.25, 0.1);
  EXPECT_EQ(r.params, t.ck.params);
}

TEST(Finetune, LearnsGroupTags) {
  TinyCheckpoint t;
  FinetuneConfig fc;
  fc.epochs = 4;
  fc.learning_rate = 5e-3;
  const FinetuneResult r = finetune_token_classifier(t.ck, t.sc.lexicon, t.tagged(), fc);
  EXPECT_GE(r.accuracy, 0.9);
  EXPECT_EQ(r.per_tag_f1.size(), r.tag_names.size());
}

TEST(Finetune, RejectsUnknownTagIdsAndEmptyCorpus) {
  TinyCheckpoint t;
  TaggedCorpus tc = t.tagged();
  tc.tags[0][0] = tc.tag_names.size();
  EXPECT_THROW(finetune_token_classifier(t.ck, t.sc.lexicon, tc, {}), DataError);
  EXPECT_THROW(finetune_token_classifier(t.ck, t.sc.lexicon, TaggedCorpus{}, {}), DataError);
}

}  // namespace
