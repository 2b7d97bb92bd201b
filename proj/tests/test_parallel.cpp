#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

// The OpenMP kernels must be bit-identical to their serial reference paths
// regardless of thread count: parallel loops only write state owned by
// their own index, and floating-point reductions stay serial.

#include <cstring>

#include "gemrec/eval.hpp"
#include "gemrec/marketplace.hpp"
#include "gemrec/parallel.hpp"
#include "gemrec/semantic_index.hpp"
#include "gemrec/seq_model.hpp"

using namespace gemrec;

namespace {

struct Corpus {
  std::vector<ItemEmbedding> embeddings;
  Inventory inventory;
  SidTrie trie{3};
  SidMap sid_map;
  Vocabulary vocab;

  Corpus() {
    MixtureParams mix;
    mix.n_items = 500;
    mix.dim = 12;
    mix.n_categories = 8;
    mix.n_subcategories = 2;
    embeddings = synth_mixture_embeddings(mix, 3);
    const Codebooks cb = fit_residual_quantizer(embeddings, 3, 8, 25, 5);
    const auto sids = assign_semantic_ids(embeddings, cb);
    std::int32_t max_disamb = 0;
    for (const auto& s : sids) max_disamb = std::max(max_disamb, s.disamb);
    vocab = Vocabulary(3, 8, static_cast<std::size_t>(max_disamb) + 1);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
      InventoryItem item;
      item.item_id = embeddings[i].item_id;
      item.sid = sids[i];
      item.sponsored = i % 5 == 0;
      if (item.sponsored) item.bid = 0.1 + 0.9 * ((i % 91) / 90.0);
      inventory.items.push_back(std::move(item));
      sid_map.emplace(embeddings[i].item_id, sids[i]);
      trie.insert(embeddings[i].item_id, sids[i]);
    }
    inventory.rebuild_index();
  }
};

}  // namespace

TEST_CASE("parallel_for covers every index exactly once") {
  std::vector<int> counts(1000, 0);
  parallel_for(counts.size(), Exec::parallel, [&](std::size_t i) { ++counts[i]; });
  for (const int c : counts) CHECK(c == 1);
}

TEST_CASE("residual k-means is bit-identical across execution policies") {
  const Corpus corpus;
  const Codebooks serial =
      fit_residual_quantizer(corpus.embeddings, 3, 8, 25, 7, Exec::serial);
  const Codebooks parallel =
      fit_residual_quantizer(corpus.embeddings, 3, 8, 25, 7, Exec::parallel);
  REQUIRE(serial.levels.size() == parallel.levels.size());
  for (std::size_t level = 0; level < serial.levels.size(); ++level) {
    REQUIRE(serial.levels[level].size() == parallel.levels[level].size());
    CHECK(std::memcmp(serial.levels[level].data(), parallel.levels[level].data(),
                      serial.levels[level].size() * sizeof(double)) == 0);
  }
  CHECK(assign_semantic_ids(corpus.embeddings, serial, Exec::serial) ==
        assign_semantic_ids(corpus.embeddings, serial, Exec::parallel));
}

TEST_CASE("trajectory generation is bit-identical across execution policies") {
  const Corpus corpus;
  HistoryParams hp;
  hp.n_users = 300;
  hp.min_length = 4;
  hp.max_length = 16;
  const auto hist_serial = synth_organic_histories(hp, corpus.inventory, 11, Exec::serial);
  const auto hist_parallel = synth_organic_histories(hp, corpus.inventory, 11, Exec::parallel);
  CHECK(hist_serial == hist_parallel);

  PolicyParams policy;
  GenStats stats_serial, stats_parallel;
  const auto gen_serial = generate_trajectories(hist_serial, corpus.inventory, policy, 13,
                                                &stats_serial, Exec::serial);
  const auto gen_parallel = generate_trajectories(hist_serial, corpus.inventory, policy, 13,
                                                  &stats_parallel, Exec::parallel);
  CHECK(gen_serial == gen_parallel);
  CHECK(stats_serial.ad_events == stats_parallel.ad_events);
  CHECK(stats_serial.total_events == stats_parallel.total_events);
}

TEST_CASE("sweep evaluation is bit-identical across execution policies") {
  const Corpus corpus;
  HistoryParams hp;
  hp.n_users = 200;
  hp.min_length = 4;
  hp.max_length = 12;
  const auto histories = synth_organic_histories(hp, corpus.inventory, 17);
  PolicyParams policy;
  const auto trajectories = generate_trajectories(histories, corpus.inventory, policy, 19);
  const EvalSplit split = leave_last_out(trajectories, corpus.sid_map, corpus.vocab);
  const ScorerModel model = ScorerModel::train(corpus.vocab, split.train_streams, 4, 0.1);
  const BidLookup lookup =
      build_bid_lookup(corpus.trie, corpus.inventory, eligible_sponsored(corpus.inventory));

  for (const double lambda : {0.0, 1.0, 5.0}) {
    EvalOptions serial_opts;
    serial_opts.seed = 23;
    serial_opts.exec = Exec::serial;
    EvalOptions parallel_opts = serial_opts;
    parallel_opts.exec = Exec::parallel;

    const MetricsRow a = evaluate_lambda(model, split.cases, corpus.inventory, lookup,
                                         corpus.trie, lambda, serial_opts);
    const MetricsRow b = evaluate_lambda(model, split.cases, corpus.inventory, lookup,
                                         corpus.trie, lambda, parallel_opts);
    CHECK(a.ad_rate == b.ad_rate);
    CHECK(a.revenue == b.revenue);
    CHECK(a.ndcg10 == b.ndcg10);
    CHECK(a.recall10 == b.recall10);
    CHECK(a.o_ndcg10 == b.o_ndcg10);
    CHECK(a.o_recall10 == b.o_recall10);
    CHECK(a.ad_ndcg10 == b.ad_ndcg10);
    CHECK(a.mean_prefix_depth == b.mean_prefix_depth);
    CHECK(a.validity == b.validity);
    CHECK(a.hv_share == b.hv_share);
  }
}

TEST_CASE("held-out nll is bit-identical across execution policies") {
  const Corpus corpus;
  HistoryParams hp;
  hp.n_users = 150;
  hp.min_length = 4;
  hp.max_length = 10;
  const auto histories = synth_organic_histories(hp, corpus.inventory, 29);
  PolicyParams policy;
  const auto trajectories = generate_trajectories(histories, corpus.inventory, policy, 31);
  const EvalSplit split = leave_last_out(trajectories, corpus.sid_map, corpus.vocab);
  const ScorerModel model = ScorerModel::train(corpus.vocab, split.train_streams, 4, 0.1);
  CHECK(heldout_segment_nll(model, split.cases, corpus.inventory, Exec::serial) ==
        heldout_segment_nll(model, split.cases, corpus.inventory, Exec::parallel));
}
