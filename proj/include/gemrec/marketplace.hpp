#pragma once

// Synthetic marketplace: sponsored inventory with log-normal bids, the
// two-stage data-generation policy (relevance filter + softmax auction)
// with frequency capping, organic history synthesis, and bid shocks.

#include <cstdint>
#include <set>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gemrec/parallel.hpp"
#include "gemrec/rng.hpp"
#include "gemrec/semantic_index.hpp"

namespace gemrec {

struct InventoryItem {
  std::int64_t item_id = 0;
  SemanticId sid;
  bool sponsored = false;
  double bid = 0.0;  // meaningful for sponsored items only
};

struct Inventory {
  std::vector<InventoryItem> items;

  const InventoryItem* find(std::int64_t item_id) const {
    auto it = index_.find(item_id);
    return it == index_.end() ? nullptr : &items[it->second];
  }
  std::size_t index_of(std::int64_t item_id) const { return index_.at(item_id); }

  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < items.size(); ++i) index_.emplace(items[i].item_id, i);
  }

  std::vector<std::size_t> sponsored_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].sponsored) out.push_back(i);
    }
    return out;
  }

 private:
  std::unordered_map<std::int64_t, std::size_t> index_;
};

struct PolicyParams {
  int prefix_depth = 2;       // d
  double tau = 0.1;           // auction softmax temperature
  double base_accept = 0.4;   // p
  double recovery = 0.05;     // r
};

enum class Mode : std::uint8_t { organic, sponsored };

struct Interaction {
  Mode mode = Mode::organic;
  std::int64_t item_id = 0;

  friend bool operator==(const Interaction& a, const Interaction& b) {
    return a.mode == b.mode && a.item_id == b.item_id;
  }
};

struct Trajectory {
  std::int64_t user_id = 0;
  std::vector<Interaction> events;

  friend bool operator==(const Trajectory& a, const Trajectory& b) {
    return a.user_id == b.user_id && a.events == b.events;
  }
};

struct EmptyInventoryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NoCandidateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raw LogNormal(mu, sigma) draws, one per sponsored item.
std::vector<double> draw_lognormal_bids(std::size_t n, double mu, double sigma,
                                        std::uint64_t seed);

// Clips at the empirical 99.9th percentile and affinely maps to [0.1, 1.0].
// A degenerate sample (all values equal after clipping) maps to the floor.
std::vector<double> normalize_bids(std::vector<double> draws);

// Samples and installs bids for every sponsored item. Throws
// EmptyInventoryError when there are no sponsored items.
void assign_bids(Inventory& inv, double mu, double sigma, std::uint64_t seed);

// Sponsored items with prefix_match_depth(target) >= depth, relaxing the
// depth one level at a time down to 1 when empty. The target item itself is
// excluded. Returns inventory indices in ascending item order.
std::vector<std::size_t> relevance_filter(const SemanticId& target, const Inventory& inv,
                                          int depth, std::int64_t exclude_item_id);

// Softmax-over-bids winner: P(j) = exp(b_j / tau) / sum_k exp(b_k / tau),
// evaluated in log domain. Throws NoCandidateError on an empty set.
std::size_t auction_sample(const Inventory& inv, const std::vector<std::size_t>& candidates,
                           double tau, Rng& rng);

// Acceptance probability p * min(1, delta_t * r). Pass +infinity for
// delta_t when no ad has been shown yet.
double frequency_cap(double delta_t, double base_accept, double recovery);

struct GenStats {
  std::size_t total_events = 0;
  std::size_t ad_events = 0;
  double ad_fraction() const {
    return total_events == 0 ? 0.0 : static_cast<double>(ad_events) / total_events;
  }
};

// Replays each organic history, injecting an auction winner immediately
// before its anchoring organic item when the frequency cap accepts and the
// relevance filter is nonempty. Per-user RNG streams make generation
// embarrassingly parallel and order-independent.
std::vector<Trajectory> generate_trajectories(const std::vector<Trajectory>& organic_histories,
                                              const Inventory& inv, const PolicyParams& params,
                                              std::uint64_t seed, GenStats* stats = nullptr,
                                              Exec exec = Exec::parallel);

struct ShockResult {
  Inventory inventory;
  std::set<std::int64_t> shocked_items;
};

// Multiplies the bids of ceil(fraction * |sponsored|) uniformly chosen
// sponsored items; the input inventory is left untouched.
ShockResult apply_bid_shock(const Inventory& inv, double fraction, double multiplier,
                            std::uint64_t seed);

struct HistoryParams {
  std::size_t n_users = 0;
  int min_length = 1;
  int max_length = 1;
  double category_bias = 0.9;   // probability of staying in the current c1 group
  double popularity_skew = 1.0; // Zipf exponent for within-group popularity
};

// Category-biased random walks over the inventory; the walk stays within
// the current item's level-1 code group with probability category_bias.
std::vector<Trajectory> synth_organic_histories(const HistoryParams& params,
                                                const Inventory& inv, std::uint64_t seed,
                                                Exec exec = Exec::parallel);

}  // namespace gemrec
