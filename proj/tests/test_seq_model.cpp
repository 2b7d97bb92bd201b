#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "gemrec/rng.hpp"
#include "gemrec/seq_model.hpp"

using namespace gemrec;

namespace {

struct Fixture {
  Vocabulary vocab{3, 16, 4};
  SidMap sids;
  SidTrie trie{3};

  Fixture() {
    Rng rng(1);
    std::vector<std::pair<std::int64_t, std::vector<std::int32_t>>> coded;
    for (std::int64_t i = 0; i < 40; ++i) {
      coded.emplace_back(i, std::vector<std::int32_t>{
                                static_cast<std::int32_t>(rng.uniform_index(16)),
                                static_cast<std::int32_t>(rng.uniform_index(4)),
                                static_cast<std::int32_t>(rng.uniform_index(4))});
    }
    const auto out = disambiguate(coded);
    for (std::size_t i = 0; i < coded.size(); ++i) {
      sids.emplace(coded[i].first, out[i]);
      trie.insert(coded[i].first, out[i]);
    }
  }

  Trajectory random_trajectory(std::uint64_t seed, std::size_t len, double ad_prob = 0.3) const {
    Rng rng(seed);
    Trajectory t;
    t.user_id = static_cast<std::int64_t>(seed);
    for (std::size_t i = 0; i < len; ++i) {
      t.events.push_back({rng.uniform01() < ad_prob ? Mode::sponsored : Mode::organic,
                          static_cast<std::int64_t>(rng.uniform_index(40))});
    }
    return t;
  }
};

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("flatten produces the flag + codes + disambiguator segment") {
  Vocabulary vocab(3, 16, 2);
  SidMap sids;
  sids.emplace(9, SemanticId{{4, 7, 1}, 0});
  Trajectory t;
  t.user_id = 0;
  t.events.push_back({Mode::sponsored, 9});
  const TokenStream stream = flatten(t, sids, vocab);
  const std::vector<std::int32_t> expected{
      Vocabulary::kBos, Vocabulary::kAd,
      vocab.code_token(0, 4), vocab.code_token(1, 7), vocab.code_token(2, 1),
      vocab.disamb_token(0), Vocabulary::kEos};
  CHECK(stream.tokens == expected);
  // Level tags place each code token in its own id band.
  CHECK(stream.tokens[2] == 4 + 4);
  CHECK(stream.tokens[3] == 4 + 16 + 7);
  CHECK(stream.tokens[4] == 4 + 32 + 1);
  CHECK(stream.tokens[5] == 4 + 48 + 0);
}

TEST_CASE("empty trajectory flattens to [BOS, EOS]") {
  Vocabulary vocab(3, 16, 2);
  const TokenStream stream = flatten(Trajectory{}, {}, vocab);
  CHECK(stream.tokens == std::vector<std::int32_t>{Vocabulary::kBos, Vocabulary::kEos});
}

TEST_CASE("unknown item raises a missing-id error") {
  Vocabulary vocab(3, 16, 2);
  Trajectory t;
  t.events.push_back({Mode::organic, 12345});
  CHECK_THROWS_AS(flatten(t, {}, vocab), MissingIdError);
}

TEST_CASE("unflatten inverts flatten on random trajectories") {
  const Fixture fx;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Trajectory t = fx.random_trajectory(seed, 1 + seed % 7);
    const TokenStream stream = flatten(t, fx.sids, fx.vocab);
    CHECK(unflatten(stream, fx.vocab, fx.trie) == t.events);
  }
}

TEST_CASE("order-0 model matches a hand unigram count") {
  const Fixture fx;
  std::vector<TokenStream> corpus;
  std::map<std::int32_t, double> hand;
  double flag_total = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    corpus.push_back(flatten(fx.random_trajectory(seed, 4), fx.sids, fx.vocab));
    for (const std::int32_t tok : corpus.back().tokens) {
      if (tok == Vocabulary::kOrg || tok == Vocabulary::kAd) {
        ++hand[tok];
        ++flag_total;
      }
    }
  }
  const double alpha = 0.1;
  const ScorerModel model = ScorerModel::train(fx.vocab, corpus, 0, alpha);
  const std::vector<std::int32_t> ctx{Vocabulary::kBos};
  const auto logits = model.slot_logits(ctx, Slot::flag());
  REQUIRE(logits.size() == 2);
  CHECK(std::exp(logits[0].second) ==
        doctest::Approx((hand[Vocabulary::kOrg] + alpha) / (flag_total + 2 * alpha))
            .epsilon(1e-12));
  CHECK(std::exp(logits[1].second) ==
        doctest::Approx((hand[Vocabulary::kAd] + alpha) / (flag_total + 2 * alpha))
            .epsilon(1e-12));
}

TEST_CASE("a single repeated segment dominates as alpha shrinks") {
  const Fixture fx;
  Trajectory t;
  t.events.push_back({Mode::organic, 7});
  const TokenStream stream = flatten(t, fx.sids, fx.vocab);
  std::vector<TokenStream> corpus(50, stream);
  const ScorerModel model = ScorerModel::train(fx.vocab, corpus, 4, 1e-9);
  CHECK(model.sequence_nll(stream) < 1e-6);
}

TEST_CASE("zero-ad corpus leaves the sponsored flag at the smoothing floor") {
  const Fixture fx;
  std::vector<TokenStream> corpus;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    corpus.push_back(flatten(fx.random_trajectory(seed, 3, /*ad_prob=*/0.0), fx.sids, fx.vocab));
  }
  const double alpha = 0.1;
  const ScorerModel model = ScorerModel::train(fx.vocab, corpus, 2, alpha);
  const std::vector<std::int32_t> ctx{Vocabulary::kBos};
  // 12 streams contribute 12 organic flags after BOS.
  const double expect = alpha / (12.0 + 2.0 * alpha);
  CHECK(std::exp(model.log_prob(ctx, Slot::flag(), Vocabulary::kAd)) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("slot logits cover exactly the legal set and normalize") {
  const Fixture fx;
  std::vector<TokenStream> corpus;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    corpus.push_back(flatten(fx.random_trajectory(seed, 5), fx.sids, fx.vocab));
  }
  const ScorerModel model = ScorerModel::train(fx.vocab, corpus, 4, 0.1);

  for (std::uint64_t seed = 50; seed < 56; ++seed) {
    TokenStream stream = flatten(fx.random_trajectory(seed, 3), fx.sids, fx.vocab);
    stream.tokens.pop_back();
    std::vector<std::int32_t> ctx = stream.tokens;
    const std::vector<Slot> slots{Slot::flag(), Slot::code(0), Slot::code(1), Slot::code(2),
                                  Slot::disamb()};
    const std::vector<std::size_t> sizes{2, 16, 16, 16, 4};
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const auto logits = model.slot_logits(ctx, slots[s]);
      CHECK(logits.size() == sizes[s]);
      double mass = 0.0;
      for (const auto& [tok, lp] : logits) {
        mass += std::exp(lp);
        // Level legality: each token belongs to the slot's own id band.
        if (slots[s].kind == Slot::Kind::flag) {
          CHECK((tok == Vocabulary::kOrg || tok == Vocabulary::kAd));
        } else if (slots[s].kind == Slot::Kind::code) {
          CHECK(fx.vocab.is_code_token(tok));
          CHECK(fx.vocab.code_level(tok) == slots[s].level);
        } else {
          CHECK(fx.vocab.is_disamb_token(tok));
        }
      }
      CHECK(std::abs(mass - 1.0) < 1e-9);
      ctx.push_back(logits[0].first);
    }
  }
}

TEST_CASE("a context seen 100 times matches the hand-computed smoothed ratio") {
  const Fixture fx;
  Trajectory a, b;
  a.events.push_back({Mode::organic, 3});
  b.events.push_back({Mode::sponsored, 3});
  std::vector<TokenStream> corpus;
  for (int i = 0; i < 75; ++i) corpus.push_back(flatten(a, fx.sids, fx.vocab));
  for (int i = 0; i < 25; ++i) corpus.push_back(flatten(b, fx.sids, fx.vocab));
  const double alpha = 0.1;
  const ScorerModel model = ScorerModel::train(fx.vocab, corpus, 4, alpha);
  const std::vector<std::int32_t> ctx{Vocabulary::kBos};
  CHECK(std::exp(model.log_prob(ctx, Slot::flag(), Vocabulary::kOrg)) ==
        doctest::Approx((75.0 + alpha) / (100.0 + 2.0 * alpha)).epsilon(1e-12));
  CHECK(std::exp(model.log_prob(ctx, Slot::flag(), Vocabulary::kAd)) ==
        doctest::Approx((25.0 + alpha) / (100.0 + 2.0 * alpha)).epsilon(1e-12));
}

TEST_CASE("an untrained model is uniform over each legal set") {
  Vocabulary vocab(3, 16, 4);
  const ScorerModel model(vocab, 4, 0.1);
  const std::vector<std::int32_t> ctx{Vocabulary::kBos};
  CHECK(model.log_prob(ctx, Slot::flag(), Vocabulary::kOrg) == std::log(0.5));
  CHECK(model.log_prob(ctx, Slot::flag(), Vocabulary::kAd) == std::log(0.5));
}

TEST_CASE("factorization identity: segment probability is the product of slot terms") {
  const Fixture fx;
  std::vector<TokenStream> corpus;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    corpus.push_back(flatten(fx.random_trajectory(seed, 4), fx.sids, fx.vocab));
  }
  const ScorerModel model = ScorerModel::train(fx.vocab, corpus, 4, 0.1);

  const TokenStream probe = flatten(fx.random_trajectory(77, 2), fx.sids, fx.vocab);
  double log_sum = 0.0;
  double product = 1.0;
  for (std::size_t pos = 1; pos + 1 < probe.tokens.size(); ++pos) {
    const Slot slot = slot_after(fx.vocab, probe.tokens[pos - 1]);
    const double lp = model.log_prob({probe.tokens.data(), pos}, slot, probe.tokens[pos]);
    log_sum += lp;
    product *= std::exp(lp);
  }
  CHECK(std::exp(log_sum) == doctest::Approx(product).epsilon(1e-12));
}

TEST_CASE("sequence nll diagnostics") {
  const Fixture fx;
  SUBCASE("uniform flag slot contributes log 2") {
    Vocabulary vocab(1, 2, 1);
    const ScorerModel model(vocab, 2, 0.1);
    SidMap sids;
    sids.emplace(0, SemanticId{{0}, 0});
    Trajectory t;
    t.events.push_back({Mode::organic, 0});
    const TokenStream stream = flatten(t, sids, vocab);
    // Slots: flag (2 legal), code (2 legal), disamb (1 legal) -> mean of
    // log2, log2, 0.
    CHECK(model.sequence_nll(stream) ==
          doctest::Approx(2.0 * std::log(2.0) / 3.0).epsilon(1e-12));
  }
  SUBCASE("held-out nll is at least training nll, averaged over seeds") {
    double train_mean = 0.0, held_mean = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::vector<TokenStream> train_corpus, held_corpus;
      for (std::uint64_t u = 0; u < 30; ++u) {
        train_corpus.push_back(
            flatten(fx.random_trajectory(seed * 1000 + u, 5), fx.sids, fx.vocab));
      }
      for (std::uint64_t u = 0; u < 10; ++u) {
        held_corpus.push_back(
            flatten(fx.random_trajectory(seed * 1000 + 500 + u, 5), fx.sids, fx.vocab));
      }
      const ScorerModel model = ScorerModel::train(fx.vocab, train_corpus, 4, 0.1);
      for (const auto& s : train_corpus) train_mean += model.sequence_nll(s) / 30.0;
      for (const auto& s : held_corpus) held_mean += model.sequence_nll(s) / 10.0;
    }
    CHECK(held_mean / 5.0 >= train_mean / 5.0);
  }
}

TEST_CASE("doubling sponsored segments strictly increases P(AD | BOS)") {
  const Fixture fx;
  Trajectory org, ad;
  org.events.push_back({Mode::organic, 1});
  ad.events.push_back({Mode::sponsored, 2});

  auto p_ad_with = [&](int n_ad) {
    std::vector<TokenStream> corpus;
    for (int i = 0; i < 40; ++i) corpus.push_back(flatten(org, fx.sids, fx.vocab));
    for (int i = 0; i < n_ad; ++i) corpus.push_back(flatten(ad, fx.sids, fx.vocab));
    const ScorerModel model = ScorerModel::train(fx.vocab, corpus, 4, 0.1);
    const std::vector<std::int32_t> ctx{Vocabulary::kBos};
    return std::exp(model.log_prob(ctx, Slot::flag(), Vocabulary::kAd));
  };
  CHECK(p_ad_with(8) > p_ad_with(4));
}

TEST_CASE("model files are versioned, deterministic, and round-trip") {
  const Fixture fx;
  std::vector<TokenStream> corpus;
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    corpus.push_back(flatten(fx.random_trajectory(seed, 6), fx.sids, fx.vocab));
  }
  const ScorerModel model = ScorerModel::train(fx.vocab, corpus, 3, 0.1);

  const std::string path_a = "scorer_a.bin";
  const std::string path_b = "scorer_b.bin";
  model.save(path_a);
  model.save(path_b);
  const std::string bytes = file_bytes(path_a);
  CHECK(bytes == file_bytes(path_b));
  CHECK(bytes.substr(0, 15) == "GEMREC-SCORER-1");

  const ScorerModel loaded = ScorerModel::load(path_a);
  CHECK(loaded == model);

  // A retrained model over the same corpus serializes identically.
  ScorerModel::train(fx.vocab, corpus, 3, 0.1).save(path_b);
  CHECK(bytes == file_bytes(path_b));

  std::remove(path_a.c_str());
  std::remove(path_b.c_str());
}

TEST_CASE("loading a non-model file fails cleanly") {
  const std::string path = "not_a_model.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "GARBAGE HEADER AND THEN SOME";
  }
  CHECK_THROWS_AS(ScorerModel::load(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("misaligned slot requests raise a position error") {
  const Fixture fx;
  const ScorerModel model(fx.vocab, 2, 0.1);
  const std::vector<std::int32_t> ctx{Vocabulary::kBos};
  CHECK_THROWS_AS(model.slot_logits(ctx, Slot::code(1)), PositionError);
  const std::vector<std::int32_t> ctx2{Vocabulary::kBos, Vocabulary::kOrg};
  CHECK_THROWS_AS(model.slot_logits(ctx2, Slot::disamb()), PositionError);
  CHECK_THROWS_AS(model.slot_logits(ctx2, Slot::flag()), PositionError);
}
