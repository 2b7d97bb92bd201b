#include "gemrec/marketplace.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gemrec {

std::vector<double> draw_lognormal_bids(std::size_t n, double mu, double sigma,
                                        std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> draws(n);
  for (std::size_t i = 0; i < n; ++i) draws[i] = rng.lognormal(mu, sigma);
  return draws;
}

std::vector<double> normalize_bids(std::vector<double> draws) {
  if (draws.empty()) return draws;

  // Clip at the empirical 99.9th percentile (nearest-rank).
  std::vector<double> sorted = draws;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t idx =
      std::min(sorted.size() - 1,
               static_cast<std::size_t>(0.999 * static_cast<double>(sorted.size())));
  const double cap = sorted[idx];
  for (double& b : draws) b = std::min(b, cap);

  double lo = draws[0], hi = draws[0];
  for (const double b : draws) {
    lo = std::min(lo, b);
    hi = std::max(hi, b);
  }
  if (hi <= lo) {
    std::fill(draws.begin(), draws.end(), 0.1);
    return draws;
  }
  const double scale = (1.0 - 0.1) / (hi - lo);
  for (double& b : draws) b = 0.1 + (b - lo) * scale;
  return draws;
}

void assign_bids(Inventory& inv, double mu, double sigma, std::uint64_t seed) {
  const std::vector<std::size_t> sponsored = inv.sponsored_indices();
  if (sponsored.empty()) throw EmptyInventoryError("no sponsored items to assign bids to");
  const std::vector<double> bids = normalize_bids(
      draw_lognormal_bids(sponsored.size(), mu, sigma, seed));
  for (std::size_t i = 0; i < sponsored.size(); ++i) inv.items[sponsored[i]].bid = bids[i];
}

std::vector<std::size_t> relevance_filter(const SemanticId& target, const Inventory& inv,
                                          int depth, std::int64_t exclude_item_id) {
  for (int d = depth; d >= 1; --d) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < inv.items.size(); ++i) {
      const InventoryItem& item = inv.items[i];
      if (!item.sponsored || item.item_id == exclude_item_id) continue;
      if (prefix_match_depth(item.sid, target) >= d) out.push_back(i);
    }
    if (!out.empty()) return out;
  }
  return {};
}

std::size_t auction_sample(const Inventory& inv, const std::vector<std::size_t>& candidates,
                           double tau, Rng& rng) {
  if (candidates.empty()) throw NoCandidateError("auction over empty candidate set");
  double max_logit = -std::numeric_limits<double>::infinity();
  for (const std::size_t idx : candidates) {
    max_logit = std::max(max_logit, inv.items[idx].bid / tau);
  }
  std::vector<double> weights(candidates.size());
  double total = 0.0;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    weights[j] = std::exp(inv.items[candidates[j]].bid / tau - max_logit);
    total += weights[j];
  }
  double target = rng.uniform01() * total;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    target -= weights[j];
    if (target <= 0.0) return candidates[j];
  }
  return candidates.back();
}

double frequency_cap(double delta_t, double base_accept, double recovery) {
  return base_accept * std::min(1.0, delta_t * recovery);
}

namespace {

Trajectory generate_one(const Trajectory& history, const Inventory& inv,
                        const PolicyParams& params, std::uint64_t user_seed) {
  Rng rng(user_seed);
  Trajectory out;
  out.user_id = history.user_id;
  out.events.reserve(history.events.size() * 2);

  double slots_since_ad = std::numeric_limits<double>::infinity();
  for (const Interaction& ev : history.events) {
    const double accept_p =
        frequency_cap(slots_since_ad, params.base_accept, params.recovery);
    // The gate draw is consumed for every organic item so the stream
    // structure is stable under replay.
    const double gate = rng.uniform01();
    if (gate < accept_p) {
      const InventoryItem* target = inv.find(ev.item_id);
      const std::vector<std::size_t> candidates =
          relevance_filter(target->sid, inv, params.prefix_depth, ev.item_id);
      if (!candidates.empty()) {
        const std::size_t winner = auction_sample(inv, candidates, params.tau, rng);
        out.events.push_back({Mode::sponsored, inv.items[winner].item_id});
        slots_since_ad = 0.0;
      }
    }
    out.events.push_back({Mode::organic, ev.item_id});
    if (std::isfinite(slots_since_ad)) slots_since_ad += 1.0;
  }
  return out;
}

}  // namespace

std::vector<Trajectory> generate_trajectories(const std::vector<Trajectory>& organic_histories,
                                              const Inventory& inv, const PolicyParams& params,
                                              std::uint64_t seed, GenStats* stats, Exec exec) {
  std::vector<Trajectory> out(organic_histories.size());
  parallel_for(organic_histories.size(), exec, [&](std::size_t u) {
    out[u] = generate_one(organic_histories[u], inv, params,
                          derive_seed(seed, static_cast<std::uint64_t>(organic_histories[u].user_id)));
  });
  if (stats != nullptr) {
    *stats = GenStats{};
    for (const Trajectory& t : out) {
      stats->total_events += t.events.size();
      for (const Interaction& ev : t.events) {
        if (ev.mode == Mode::sponsored) ++stats->ad_events;
      }
    }
  }
  return out;
}

ShockResult apply_bid_shock(const Inventory& inv, double fraction, double multiplier,
                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("shock fraction must be in (0, 1]");
  }
  ShockResult result;
  result.inventory = inv;
  result.inventory.rebuild_index();

  std::vector<std::size_t> sponsored = result.inventory.sponsored_indices();
  const std::size_t n_shock = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(sponsored.size())));

  // Partial Fisher-Yates over the sponsored index list.
  Rng rng(seed);
  for (std::size_t i = 0; i < n_shock && i < sponsored.size(); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(sponsored.size() - i));
    std::swap(sponsored[i], sponsored[j]);
    InventoryItem& item = result.inventory.items[sponsored[i]];
    item.bid *= multiplier;
    result.shocked_items.insert(item.item_id);
  }
  return result;
}

std::vector<Trajectory> synth_organic_histories(const HistoryParams& params,
                                                const Inventory& inv, std::uint64_t seed,
                                                Exec exec) {
  if (inv.items.empty()) throw EmptyInventoryError("cannot synthesize histories: empty inventory");

  // Group items by level-1 code; within a group a Zipf distribution over
  // ascending item_id order gives the walk a learnable popularity head.
  std::map<std::int32_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < inv.items.size(); ++i) {
    groups[inv.items[i].sid.codes.empty() ? 0 : inv.items[i].sid.codes[0]].push_back(i);
  }
  struct Group {
    std::vector<std::size_t> members;   // inventory indices, ascending item_id
    std::vector<double> cumulative;     // cumulative Zipf weights
  };
  std::map<std::int32_t, Group> by_code;
  for (auto& [code, members] : groups) {
    Group g;
    g.members = members;
    std::sort(g.members.begin(), g.members.end(), [&](std::size_t a, std::size_t b) {
      return inv.items[a].item_id < inv.items[b].item_id;
    });
    g.cumulative.resize(g.members.size());
    double acc = 0.0;
    for (std::size_t r = 0; r < g.members.size(); ++r) {
      acc += std::pow(static_cast<double>(r + 1), -params.popularity_skew);
      g.cumulative[r] = acc;
    }
    by_code.emplace(code, std::move(g));
  }

  auto sample_from_group = [&](const Group& g, Rng& rng) -> std::size_t {
    const double target = rng.uniform01() * g.cumulative.back();
    const auto it = std::lower_bound(g.cumulative.begin(), g.cumulative.end(), target);
    const std::size_t r = std::min<std::size_t>(it - g.cumulative.begin(), g.members.size() - 1);
    return g.members[r];
  };

  std::vector<Trajectory> out(params.n_users);
  parallel_for(params.n_users, exec, [&](std::size_t u) {
    Rng rng(derive_seed(seed, u));
    Trajectory t;
    t.user_id = static_cast<std::int64_t>(u);
    const int span = params.max_length - params.min_length + 1;
    const int length = params.min_length + static_cast<int>(rng.uniform_index(span));

    // Home group of a uniformly drawn item; group choice is therefore
    // weighted by group size.
    std::size_t cur = static_cast<std::size_t>(rng.uniform_index(inv.items.size()));
    const Group* home = &by_code.at(inv.items[cur].sid.codes[0]);
    cur = sample_from_group(*home, rng);
    t.events.push_back({Mode::organic, inv.items[cur].item_id});

    for (int step = 1; step < length; ++step) {
      if (rng.uniform01() < params.category_bias) {
        const Group& g = by_code.at(inv.items[cur].sid.codes[0]);
        cur = sample_from_group(g, rng);
      } else {
        cur = static_cast<std::size_t>(rng.uniform_index(inv.items.size()));
      }
      t.events.push_back({Mode::organic, inv.items[cur].item_id});
    }
    out[u] = std::move(t);
  });
  return out;
}

}  // namespace gemrec
