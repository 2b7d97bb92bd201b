#pragma once

// Bid-modulated hierarchical decoding. A decode request commits to the
// slot flag first (sampled from the modulated flag logits), then runs a
// deterministic width-K beam over code levels and the disambiguator.
// Sponsored beams add lambda * log(1 + B(prefix)) per code token, where B
// is the per-prefix maximum bid over eligible sponsored items; organic
// beams never read bids or lambda.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

#include "gemrec/marketplace.hpp"
#include "gemrec/rng.hpp"
#include "gemrec/semantic_index.hpp"
#include "gemrec/seq_model.hpp"

namespace gemrec {

struct NoAdAvailableError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Per-prefix maximum bid over the eligible sponsored set. Prefixes whose
// subtree holds no eligible item are absent and read as bid 0 (no boost).
class BidLookup {
 public:
  BidLookup() = default;

  double b_max() const { return b_max_; }
  bool has_eligible() const { return !eligible_.empty(); }
  bool is_eligible(std::int64_t item_id) const { return eligible_.count(item_id) != 0; }

  // Max bid in the subtree under a code prefix; 0.0 for no-bid subtrees.
  double subtree_max(std::span<const std::int32_t> prefix) const {
    const auto it = prefix_max_.find(key(prefix));
    return it == prefix_max_.end() ? 0.0 : it->second;
  }
  bool subtree_has_eligible(std::span<const std::int32_t> prefix) const {
    return prefix_max_.count(key(prefix)) != 0;
  }

  friend BidLookup build_bid_lookup(const SidTrie& trie, const Inventory& inv,
                                    const std::vector<std::int64_t>& eligible_items);

 private:
  static std::vector<std::int32_t> key(std::span<const std::int32_t> prefix) {
    return {prefix.begin(), prefix.end()};
  }

  double b_max_ = 0.0;
  std::map<std::vector<std::int32_t>, double> prefix_max_;
  std::unordered_set<std::int64_t> eligible_;
};

// Bottom-up max aggregation over the eligible items' code paths. Throws
// std::invalid_argument if an eligible item is missing or not sponsored.
// An empty eligible set yields an all-sentinel lookup with b_max 0.
BidLookup build_bid_lookup(const SidTrie& trie, const Inventory& inv,
                           const std::vector<std::int64_t>& eligible_items);

// Default eligible set: every sponsored item with a positive bid.
std::vector<std::int64_t> eligible_sponsored(const Inventory& inv);

enum class FlagMode : std::uint8_t { sample, force_org, force_ad };

struct DecodeConfig {
  double lambda = 0.0;
  int beam_width = 10;
  std::optional<double> lambda_slot;  // defaults to lambda
  std::optional<double> lambda_item;  // defaults to lambda
  FlagMode flag_mode = FlagMode::sample;
  bool trie_constrained = true;

  double slot_lambda() const { return lambda_slot.value_or(lambda); }
  double item_lambda() const { return lambda_item.value_or(lambda); }
};

// Slot-level modulation: the sponsored-flag logit gains
// lambda_slot * log(1 + b_max); the organic logit is untouched.
inline double modulate_slot_logit(double z_ad, double lambda_slot, double b_max) {
  return z_ad + lambda_slot * std::log1p(b_max);
}

// Item-level modulation: each code token gains
// lambda_item * log(1 + B(prefix + token)).
std::vector<std::pair<std::int32_t, double>> modulate_item_logits(
    std::vector<std::pair<std::int32_t, double>> scores, double lambda_item,
    const BidLookup& lookup, std::span<const std::int32_t> prefix, const Vocabulary& vocab);

struct FlagDecision {
  bool is_ad = false;
  double p_ad_pre = 0.0;   // from base logits
  double p_ad_post = 0.0;  // from modulated logits; the sampling probability
};

// Samples the flag from the softmax of the two modulated logits, or forces
// it. Sampling consumes exactly one uniform draw; forced modes consume none.
FlagDecision sample_flag(double z_org, double z_ad_mod, FlagMode mode, Rng& rng);

struct BeamHypothesis {
  SemanticId sid;
  double base_score = 0.0;  // sum of base log-probs over code + disamb slots
  double mod_score = 0.0;   // sum of modulated log-probs
};

// Width-K beam over code slots and the disambiguator. Expansion uses
// modulated scores under the sponsored flag (B at the disambiguation level
// is the item's own bid) and base scores under the organic flag. Fixed
// tie-breaking: per step by (score, token id, prefix); final ranking by
// (modulated score, lexicographic code path). Deterministic.
std::vector<BeamHypothesis> beam_search(const SlotScorer& scorer,
                                        std::span<const std::int32_t> context, bool is_ad,
                                        const DecodeConfig& config, const BidLookup& lookup,
                                        const SidTrie& trie);

struct DecodeResult {
  bool is_ad = false;
  SemanticId sid;
  std::int64_t item_id = -1;  // -1 when the generated id resolves to no item
  double base_score = 0.0;
  double mod_score = 0.0;
  double p_ad_pre = 0.0;
  double p_ad_post = 0.0;
  double price = 0.0;  // first-price: the winning ad pays its bid
};

DecodeResult decode_next(const SlotScorer& scorer, std::span<const std::int32_t> context,
                         const DecodeConfig& config, const Inventory& inv,
                         const BidLookup& lookup, const SidTrie& trie, Rng& rng);

// Analytic allocation probability of one eligible sponsored item:
// P_lambda(AD | context, bids) * [beam winner == item]. No sampling.
double allocation_probability(std::int64_t item_id, std::span<const std::int32_t> context,
                              const DecodeConfig& config, const SlotScorer& scorer,
                              const Inventory& inv, const BidLookup& lookup,
                              const SidTrie& trie);

}  // namespace gemrec
