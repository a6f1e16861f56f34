#include <gtest/gtest.h>

#include <sstream>

#include "marginlm/checkpoint.hpp"
#include "marginlm/training.hpp"

using namespace marginlm;

namespace {

struct Fixture {
  Vocabulary vocab = build_vocab("the cat sat on the mat\nthe dog ate the cat\n");
  std::vector<WordId> ids = encode(vocab, "the cat sat on the mat\nthe dog ate the cat\n");
};

template <typename T>
std::string saved(const LmModel<T>& m, const Vocabulary& v, const HeadConfig& h,
                  const nlohmann::json& extra = nlohmann::json::object()) {
  std::ostringstream os;
  save_checkpoint(os, m, v, h, extra);
  return os.str();
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  Fixture f;
  auto model = init_model<double>({f.vocab.size(), 5, 4, 2}, 9);
  Rng rng(1);
  for (auto* p : model.parameters()) {
    for (Index i = 0; i < p->value().size(); ++i) p->mutable_value().data()[i] = rng.normal() * 1e-3 + 1.0 / 3.0;
  }
  const auto before = evaluate_ppl(model, f.vocab.counts(), f.ids, HeadConfig{});
  std::istringstream is(saved(model, f.vocab, HeadConfig{}, {{"note", "x"}}));
  const auto ck = load_checkpoint<double>(is, &f.vocab);
  EXPECT_EQ(ck.vocab, f.vocab);
  EXPECT_EQ(ck.model.dims, model.dims);
  EXPECT_EQ(ck.extra.at("note"), "x");
  auto a = model.named_parameters();
  auto b = const_cast<LmModel<double>&>(ck.model).named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second->value(), b[i].second->value()) << a[i].first;
  const auto after = evaluate_ppl(ck.model, ck.vocab.counts(), f.ids, HeadConfig{});
  EXPECT_EQ(before.total_log_prob, after.total_log_prob);
}

TEST(Checkpoint, FloatModelRoundTrip) {
  Fixture f;
  auto model = init_model<float>({f.vocab.size(), 3, 3, 1}, 2);
  std::istringstream is(saved(model, f.vocab, HeadConfig{}));
  const auto ck = load_checkpoint<float>(is);
  EXPECT_EQ(ck.model.W.value(), model.W.value());
}

TEST(Checkpoint, EveryHeadFieldRoundTrips) {
  Fixture f;
  auto model = init_model<double>({f.vocab.size(), 3, 3, 1}, 2);
  HeadConfig h;
  h.family = MarginFamily::kLsm;
  h.m = 3;
  h.s = 17.5;
  h.f_mode = WordNormMode::kLogUnigram;
  h.g_mode = ContextNormMode::kMaxNorm;
  h.classic_normalize = true;
  h.use_bias = false;
  h.eval_with_margin = true;
  std::istringstream is(saved(model, f.vocab, h));
  EXPECT_EQ(load_checkpoint<double>(is).head, h);
  for (auto fam : kAllMarginFamilies) {
    for (auto fm : kAllWordNormModes) {
      HeadConfig c;
      c.family = fam;
      c.f_mode = fm;
      c.m = fam == MarginFamily::kLsm ? 2.0 : 0.003;
      nlohmann::json j = c;
      EXPECT_EQ(j.get<HeadConfig>(), c);
    }
  }
}

TEST(Checkpoint, CorruptedMagicIsRejected) {
  Fixture f;
  auto model = init_model<double>({f.vocab.size(), 3, 3, 1}, 2);
  std::string bytes = saved(model, f.vocab, HeadConfig{});
  bytes[0] = 'X';
  std::istringstream is(bytes);
  try {
    load_checkpoint<double>(is);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  std::istringstream empty("");
  EXPECT_THROW(load_checkpoint<double>(empty), DataError);
}

TEST(Checkpoint, TruncationIsRejected) {
  Fixture f;
  auto model = init_model<double>({f.vocab.size(), 3, 3, 1}, 2);
  const std::string bytes = saved(model, f.vocab, HeadConfig{});
  for (std::size_t cut : {std::size_t{10}, std::size_t{40}, bytes.size() - 8}) {
    std::istringstream is(bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint<double>(is), DataError) << cut;
  }
}

TEST(Checkpoint, VocabularyHashMismatch) {
  Fixture f;
  auto model = init_model<double>({f.vocab.size(), 3, 3, 1}, 2);
  const std::string bytes = saved(model, f.vocab, HeadConfig{});
  const auto other = build_vocab("the cat sat on the mat\nthe dog ate the rat\n");
  std::istringstream is(bytes);
  EXPECT_THROW(load_checkpoint<double>(is, &other), DataError);
  std::istringstream ok(bytes);
  EXPECT_NO_THROW(load_checkpoint<double>(ok, &f.vocab));
}

TEST(Checkpoint, LayoutIsLittleEndianAfterHeader) {
  Fixture f;
  auto model = init_model<double>({f.vocab.size(), 2, 2, 1}, 2);
  model.embedding.mutable_value()(0, 0) = 1.5;
  const std::string bytes = saved(model, f.vocab, HeadConfig{});
  ASSERT_EQ(bytes.substr(0, 8), std::string("MLMCKPT\0", 8));
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[12 + i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(20, header_len));
  EXPECT_EQ(header.at("arrays")[0].at("name"), "embedding");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[20 + header_len + i])) << (8 * i);
  double first;
  std::memcpy(&first, &bits, sizeof first);
  EXPECT_EQ(first, 1.5);
}

TEST(Checkpoint, ModelVocabularyMismatchOnSave) {
  Fixture f;
  auto model = init_model<double>({f.vocab.size() + 2, 2, 2, 1}, 2);
  std::ostringstream os;
  EXPECT_THROW(save_checkpoint(os, model, f.vocab, HeadConfig{}), UsageError);
}
