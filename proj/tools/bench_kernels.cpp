// Benchmark of the OpenMP kernels against their serial reference paths:
// residual k-means fitting, trajectory generation, and per-case sweep
// evaluation. Also re-checks that both paths produce identical output,
// since that equivalence is what makes the parallel path safe to ship.

#include <chrono>
#include <cstdio>
#include <vector>

#include "gemrec/decoder.hpp"
#include "gemrec/eval.hpp"
#include "gemrec/marketplace.hpp"
#include "gemrec/parallel.hpp"
#include "gemrec/rng.hpp"
#include "gemrec/semantic_index.hpp"
#include "gemrec/seq_model.hpp"

using namespace gemrec;
using Clock = std::chrono::steady_clock;

namespace {

template <typename Fn>
double time_ms(Fn&& fn) {
  const auto start = Clock::now();
  fn();
  const auto stop = Clock::now();
  return std::chrono::duration<double, std::milli>(stop - start).count();
}

void report(const char* name, double serial_ms, double parallel_ms, bool identical) {
  std::printf("%-24s serial %9.1f ms   omp %9.1f ms   speedup %5.2fx   identical: %s\n", name,
              serial_ms, parallel_ms, serial_ms / parallel_ms, identical ? "yes" : "NO");
}

}  // namespace

int main() {
  std::printf("threads available: %d\n\n", max_threads());

  // Residual k-means fit.
  MixtureParams mix;
  mix.n_items = 20000;
  mix.dim = 32;
  mix.n_categories = 16;
  mix.n_subcategories = 4;
  const auto embeddings = synth_mixture_embeddings(mix, 11);

  Codebooks cb_serial, cb_parallel;
  const double fit_serial = time_ms(
      [&] { cb_serial = fit_residual_quantizer(embeddings, 3, 32, 15, 5, Exec::serial); });
  const double fit_parallel = time_ms(
      [&] { cb_parallel = fit_residual_quantizer(embeddings, 3, 32, 15, 5, Exec::parallel); });
  report("residual k-means", fit_serial, fit_parallel, cb_serial.levels == cb_parallel.levels);

  // Trajectory generation.
  const auto sids = assign_semantic_ids(embeddings, cb_parallel);
  Inventory inv;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    InventoryItem item;
    item.item_id = embeddings[i].item_id;
    item.sid = sids[i];
    item.sponsored = i % 5 == 0;
    if (item.sponsored) item.bid = 0.1 + 0.9 * (static_cast<double>(i % 97) / 96.0);
    inv.items.push_back(std::move(item));
  }
  inv.rebuild_index();

  HistoryParams hist;
  hist.n_users = 20000;
  hist.min_length = 6;
  hist.max_length = 22;
  const auto histories = synth_organic_histories(hist, inv, 13);

  PolicyParams policy;
  std::vector<Trajectory> gen_serial, gen_parallel;
  const double traj_serial = time_ms(
      [&] { gen_serial = generate_trajectories(histories, inv, policy, 17, nullptr, Exec::serial); });
  const double traj_parallel = time_ms([&] {
    gen_parallel = generate_trajectories(histories, inv, policy, 17, nullptr, Exec::parallel);
  });
  report("trajectory generation", traj_serial, traj_parallel, gen_serial == gen_parallel);

  // Sweep evaluation.
  SidMap sid_map;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    sid_map.emplace(embeddings[i].item_id, sids[i]);
  }
  Vocabulary vocab(3, 32, [&] {
    std::int32_t max_d = 0;
    for (const auto& s : sids) max_d = std::max(max_d, s.disamb);
    return static_cast<std::size_t>(max_d) + 1;
  }());
  const EvalSplit split = leave_last_out(gen_parallel, sid_map, vocab);
  const ScorerModel model = ScorerModel::train(vocab, split.train_streams, 4, 0.1);

  std::vector<std::pair<std::int64_t, SemanticId>> entries;
  for (const auto& item : inv.items) entries.emplace_back(item.item_id, item.sid);
  const SidTrie trie = build_trie(entries, 3);
  const BidLookup lookup = build_bid_lookup(trie, inv, eligible_sponsored(inv));

  std::vector<EvalCase> cases(split.cases.begin(),
                              split.cases.begin() + std::min<std::size_t>(split.cases.size(), 4000));
  EvalOptions opts;
  opts.seed = 19;
  MetricsRow row_serial, row_parallel;
  const double eval_serial = time_ms([&] {
    opts.exec = Exec::serial;
    row_serial = evaluate_lambda(model, cases, inv, lookup, trie, 1.0, opts);
  });
  const double eval_parallel = time_ms([&] {
    opts.exec = Exec::parallel;
    row_parallel = evaluate_lambda(model, cases, inv, lookup, trie, 1.0, opts);
  });
  const bool eval_same = row_serial.ad_rate == row_parallel.ad_rate &&
                         row_serial.revenue == row_parallel.revenue &&
                         row_serial.ndcg10 == row_parallel.ndcg10 &&
                         row_serial.recall10 == row_parallel.recall10;
  report("sweep evaluation", eval_serial, eval_parallel, eval_same);
  return 0;
}
