#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <sstream>

#include "marginlm/corpus.hpp"
#include "marginlm/rng.hpp"

using namespace marginlm;

namespace {

std::vector<std::string> regular_words(const Vocabulary& v) {
  std::vector<std::string> out;
  for (WordId id = 0; id < v.size(); ++id) {
    if (id != v.unk_id() && id != v.boundary_id()) out.push_back(v.word(id));
  }
  return out;
}

}  // namespace

TEST(BuildVocab, CountsAndOrder) {
  const auto v = build_vocab("a a b");
  EXPECT_EQ(regular_words(v), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(v.count(*v.find("a")), 2u);
  EXPECT_EQ(v.count(*v.find("b")), 1u);
  EXPECT_LT(*v.find("a"), *v.find("b"));
}

TEST(BuildVocab, MinCountFoldsIntoUnk) {
  const auto v = build_vocab("a a b", {.min_count = 2});
  EXPECT_FALSE(v.find("b").has_value());
  EXPECT_GE(v.count(v.unk_id()), 1u);
  const auto ids = encode(v, "b a");
  EXPECT_EQ(ids[0], v.unk_id());
}

TEST(BuildVocab, MaxSizeKeepsMostFrequent) {
  const auto v = build_vocab("a a a b b c", {.max_size = 2});
  EXPECT_TRUE(v.find("a") && v.find("b"));
  EXPECT_FALSE(v.find("c"));
  EXPECT_EQ(v.count(v.unk_id()), 1u);
  EXPECT_EQ(v.size(), 4u);
}

TEST(BuildVocab, ZipfianCorpusMatchesRecount) {
  Rng rng(3);
  std::vector<double> cdf;
  double acc = 0;
  for (int i = 1; i <= 2000; ++i) cdf.push_back(acc += 1.0 / i);
  std::string text;
  std::map<std::string, std::uint64_t> brute;
  for (int i = 0; i < 100000; ++i) {
    const auto r = std::upper_bound(cdf.begin(), cdf.end(), rng.uniform() * acc) - cdf.begin();
    const std::string w = "w" + std::to_string(r);
    ++brute[w];
    text += w;
    text += (i % 17 == 16) ? '\n' : ' ';
  }
  const auto v = build_vocab(text);
  std::uint64_t maxc = 0;
  for (const auto& [w, c] : brute) maxc = std::max(maxc, c);
  EXPECT_EQ(v.count(0), std::max<std::uint64_t>(maxc, v.count(v.boundary_id())));
  for (WordId id = 1; id < v.size(); ++id) EXPECT_LE(v.count(id), v.count(id - 1));
  for (const auto& [w, c] : brute) EXPECT_EQ(v.count(*v.find(w)), c) << w;
}

TEST(BuildVocab, TiesBrokenLexicographically) {
  const auto v = build_vocab("c b a c b a");
  EXPECT_EQ(regular_words(v), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(BuildVocab, StableAcrossRebuilds) {
  const std::string text = "x y z y x q r s q\nz z y\n";
  EXPECT_EQ(build_vocab(text), build_vocab(text));
}

TEST(BuildVocab, CountsPlusUnkEqualTokenTotal) {
  const std::string text = "a b c d a b a\nq r a\n";
  const auto v = build_vocab(text, {.min_count = 2});
  std::uint64_t sum = 0;
  for (WordId id = 0; id < v.size(); ++id) {
    if (id != v.boundary_id()) sum += v.count(id);
  }
  EXPECT_EQ(sum, 10u);
  EXPECT_EQ(v.count(v.boundary_id()), 2u);
}

TEST(BuildVocab, EmptyCorpusIsAnError) {
  EXPECT_THROW(build_vocab(""), DataError);
  EXPECT_THROW(build_vocab("  \n\n"), DataError);
}

TEST(BuildVocab, InvalidUtf8ReportsOffset) {
  const std::string text = std::string("ok fine ") + char(0xC3) + char(0x28) + " x";
  try {
    build_vocab(text);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("8"), std::string::npos) << e.what();
  }
  EXPECT_EQ(detail::find_invalid_utf8(text), std::optional<std::size_t>(8));
  EXPECT_FALSE(detail::find_invalid_utf8("h\xC3\xA9llo \xE2\x82\xAC").has_value());
}

TEST(BuildVocab, LowercaseFlag) {
  const auto v = build_vocab("The the THE", {.lowercase = true});
  EXPECT_EQ(v.count(*v.find("the")), 3u);
  EXPECT_FALSE(build_vocab("The the").find("THE"));
}

TEST(Encode, AppendsBoundary) {
  const auto v = build_vocab("a b");
  EXPECT_EQ(encode(v, "a b"), (std::vector<WordId>{*v.find("a"), *v.find("b"), v.boundary_id()}));
}

TEST(Encode, OovMapsToUnk) {
  const auto v = build_vocab("a b");
  EXPECT_EQ(encode(v, "a z"), (std::vector<WordId>{*v.find("a"), v.unk_id(), v.boundary_id()}));
}

TEST(Encode, EmptyLineIsBoundaryOnly) {
  const auto v = build_vocab("a b");
  EXPECT_EQ(encode(v, "\n"), (std::vector<WordId>{v.boundary_id()}));
}

TEST(Encode, DecodeRoundTrip) {
  const std::string text = "the cat sat\non the mat\n";
  const auto v = build_vocab(text);
  EXPECT_EQ(decode(v, encode(v, text)), text);
}

TEST(Vocabulary, WordIdRoundTripAndTsv) {
  const auto v = build_vocab("one two two three three three\n");
  for (WordId id = 0; id < v.size(); ++id) EXPECT_EQ(*v.find(v.word(id)), id);
  std::stringstream ss;
  v.save_tsv(ss);
  const auto back = Vocabulary::load_tsv(ss);
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.hash(), v.hash());
  EXPECT_NE(build_vocab("one two").hash(), v.hash());
}

TEST(Vocabulary, RejectsUnsortedCounts) {
  EXPECT_THROW(Vocabulary({"a", "<unk>", "<sb>"}, {1, 2, 0}), DataError);
  EXPECT_THROW(Vocabulary({"a", "a", "<unk>", "<sb>"}, {3, 2, 1, 1}), DataError);
}

TEST(Batches, SingleStreamShift) {
  std::vector<WordId> ids{1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto b = make_batches(ids, 1, 4);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].inputs, (std::vector<WordId>{1, 2, 3, 4}));
  EXPECT_EQ(b[0].targets, (std::vector<WordId>{2, 3, 4, 5}));
  EXPECT_EQ(b[1].inputs, (std::vector<WordId>{5, 6, 7, 8}));
  EXPECT_EQ(b[1].targets, (std::vector<WordId>{6, 7, 8, 9}));
  EXPECT_FALSE(b[0].carry_state);
  EXPECT_TRUE(b[1].carry_state);
}

TEST(Batches, TwoStreamsSplitHalves) {
  std::vector<WordId> ids(12);
  std::iota(ids.begin(), ids.end(), 0);
  const auto b = make_batches(ids, 2, 2);
  ASSERT_FALSE(b.empty());
  EXPECT_EQ(b[0].input(0, 0), 0u);
  EXPECT_EQ(b[0].input(1, 0), 6u);
  for (const auto& batch : b) {
    for (std::size_t t = 0; t < batch.length; ++t) {
      EXPECT_LT(batch.input(0, t), 6u);
      EXPECT_GE(batch.input(1, t), 6u);
    }
  }
}

TEST(Batches, TargetsAreNextInputs) {
  Rng rng(5);
  std::vector<WordId> ids(1003);
  for (auto& x : ids) x = static_cast<WordId>(rng.below(50));
  for (std::size_t streams : {1u, 3u, 7u}) {
    for (std::size_t bptt : {1u, 5u, 35u}) {
      const auto batches = make_batches(ids, streams, bptt);
      const std::size_t stream_len = ids.size() / streams;
      for (std::size_t s = 0; s < streams; ++s) {
        std::vector<WordId> in, tg;
        for (const auto& b : batches) {
          for (std::size_t t = 0; t < b.length; ++t) {
            in.push_back(b.input(s, t));
            tg.push_back(b.target(s, t));
          }
        }
        for (std::size_t k = 0; k < in.size(); ++k) {
          EXPECT_EQ(in[k], ids[s * stream_len + k]);
          EXPECT_EQ(tg[k], ids[s * stream_len + k + 1]);
          if (k + 1 < in.size()) {
            EXPECT_EQ(tg[k], in[k + 1]);
          }
        }
      }
    }
  }
}

TEST(Batches, TooShortIsAnError) {
  std::vector<WordId> ids(9, 1);
  EXPECT_THROW(make_batches(ids, 2, 4), UsageError);
  EXPECT_THROW(make_batches(std::vector<WordId>{}, 1, 1), UsageError);
}

TEST(Batches, KeepPartialCoversEveryPosition) {
  std::vector<WordId> ids(23);
  std::iota(ids.begin(), ids.end(), 0);
  const auto b = make_batches(ids, 1, 5, true);
  std::size_t total = 0;
  for (const auto& x : b) total += x.length;
  EXPECT_EQ(total, 22u);
  EXPECT_EQ(b.back().length, 2u);
}
