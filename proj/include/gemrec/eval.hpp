#pragma once

// Evaluation protocols and invariant audits: leave-last-interaction-out
// strict metrics, lambda sweeps (steerability / Pareto / integrity /
// quality), the bid-shock experiment, and the audit suite for the
// allocation-rule guarantees. Metrics over empty conditioning sets are
// reported as undefined, never as zero.

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gemrec/decoder.hpp"
#include "gemrec/marketplace.hpp"
#include "gemrec/parallel.hpp"
#include "gemrec/seq_model.hpp"

namespace gemrec {

struct EvalCase {
  std::int64_t user_id = 0;
  std::vector<std::int32_t> context;  // BOS + flattened history segments
  Mode true_mode = Mode::organic;
  std::int64_t true_item = 0;
};

struct EvalSplit {
  std::vector<TokenStream> train_streams;  // per user, last interaction removed
  std::vector<EvalCase> cases;             // one per user with >= 2 events
};

// Leave-last-interaction-out split over generated trajectories.
EvalSplit leave_last_out(const std::vector<Trajectory>& trajectories, const SidMap& sids,
                         const Vocabulary& vocab);

struct CasePrediction {
  bool is_ad = false;
  std::int64_t item_id = -1;  // -1 when the id resolves to no item
  SemanticId sid;
};

struct CaseOutcome {
  bool model_is_ad = false;
  double p_ad_post = 0.0;
  std::vector<CasePrediction> ranked;
  std::int64_t top_item = -1;
  bool top_valid = false;
  double price = 0.0;
};

// One decode under the committed flag; the ranked list carries the flag.
CaseOutcome evaluate_case(const SlotScorer& scorer, const EvalCase& ec,
                          const DecodeConfig& config, const Inventory& inv,
                          const BidLookup& lookup, const SidTrie& trie,
                          std::uint64_t case_seed);

// Hit at rank r iff predicted flag matches the true mode AND the predicted
// item matches the true item.
std::vector<int> strict_hits(const std::vector<CasePrediction>& ranked, Mode true_mode,
                             std::int64_t true_item);

// Binary-relevance single-target DCG: 1/log2(rank+1) at the hit rank, 0 if
// no hit within k. Throws std::invalid_argument for k < 1.
double ndcg_at_k(const std::vector<int>& hits, int k = 10);
double recall_at_k(const std::vector<int>& hits, int k = 10);

struct MetricsRow {
  double lambda = 0.0;
  double ad_rate = 0.0;
  double revenue = 0.0;
  double ndcg10 = 0.0;
  double recall10 = 0.0;
  std::optional<double> o_ndcg10;           // over model-organic cases
  std::optional<double> o_recall10;
  std::optional<double> ad_ndcg10;          // strict NDCG on ad-slot targets
  std::optional<double> mean_prefix_depth;  // generated ad vs true target
  std::optional<double> validity;           // generated ad ids resolving to items
  std::optional<double> hv_share;           // displayed ads in the shocked subset
  std::uint64_t seed = 0;
};

struct EvalOptions {
  int metric_k = 10;
  int beam_width = 10;
  bool trie_constrained = true;
  std::uint64_t seed = 0;
  Exec exec = Exec::parallel;
  const std::set<std::int64_t>* shocked = nullptr;
};

// Order-insensitive reduction of per-case outcomes into one metrics row.
// ad_rate counts model-sponsored slots, revenue sums first-price payments,
// and the conditional metrics stay undefined over empty subsets.
MetricsRow aggregate_outcomes(const std::vector<CaseOutcome>& outcomes,
                              const std::vector<EvalCase>& cases, const Inventory& inv,
                              double lambda, const EvalOptions& opts);

// Evaluates every case at one lambda. Case RNG streams are derived from
// (seed, case index) and do not depend on lambda, so the flag decision of a
// case is coupled across the sweep grid.
MetricsRow evaluate_lambda(const SlotScorer& scorer, const std::vector<EvalCase>& cases,
                           const Inventory& inv, const BidLookup& lookup, const SidTrie& trie,
                           double lambda, const EvalOptions& opts);

// Reference route that never touches the modulation code path: flag
// probabilities come from the raw logits and beams expand on base scores
// (the lookup is consulted for eligibility pruning only).
MetricsRow evaluate_unmodulated(const SlotScorer& scorer, const std::vector<EvalCase>& cases,
                                const Inventory& inv, const BidLookup& lookup,
                                const SidTrie& trie, const EvalOptions& opts);

// Modulation-free beam used by evaluate_unmodulated and the fallback audit.
std::vector<BeamHypothesis> reference_beam(const SlotScorer& scorer,
                                           std::span<const std::int32_t> context, bool is_ad,
                                           int beam_width, bool trie_constrained,
                                           const BidLookup& eligibility, const SidTrie& trie);

std::vector<MetricsRow> lambda_sweep(const SlotScorer& scorer,
                                     const std::vector<EvalCase>& cases, const Inventory& inv,
                                     const BidLookup& lookup, const SidTrie& trie,
                                     const std::vector<double>& lambdas,
                                     const EvalOptions& opts);

struct ShockRow {
  double lambda = 0.0;
  double ad_rate = 0.0;
  std::optional<double> hv_share;
  double revenue = 0.0;
  std::optional<double> uplift;  // revenue relative to the lambda=0 baseline
};

struct ShockOutcome {
  std::set<std::int64_t> shocked_items;
  std::vector<ShockRow> rows;
};

// Applies the bid shock, rebuilds only the bid lookup (the scorer is not
// retrained), and re-runs the evaluation per lambda.
ShockOutcome shock_experiment(const SlotScorer& scorer, const std::vector<EvalCase>& cases,
                              const Inventory& inv, const SidTrie& trie,
                              const std::vector<double>& lambdas, double shock_fraction,
                              double shock_multiplier, std::uint64_t shock_seed,
                              const EvalOptions& opts);

// Mean held-out NLL of the target segments (flag + codes + disamb tokens).
double heldout_segment_nll(const ScorerModel& model, const std::vector<EvalCase>& cases,
                           const Inventory& inv, Exec exec = Exec::parallel);

// ---------------------------------------------------------------------------
// Audits
// ---------------------------------------------------------------------------

// Self-contained toy environment for audits and oracle tests: a small
// random inventory with a scorer trained on random trajectories.
struct ToyInstance {
  Vocabulary vocab;
  ScorerModel scorer;
  Inventory inventory;
  SidTrie trie;
  std::vector<std::vector<std::int32_t>> contexts;

  ToyInstance() : trie(0) {}
};

ToyInstance make_toy_instance(std::uint64_t seed, std::size_t codebook_size, std::size_t depth,
                              std::size_t n_items, std::size_t n_contexts);

// Exhaustive enumeration of every full semantic id, scored slot by slot
// with the same modulation rule; the independent oracle beam search is
// checked against.
std::vector<BeamHypothesis> exhaustive_rank(const SlotScorer& scorer,
                                            std::span<const std::int32_t> context, bool is_ad,
                                            const DecodeConfig& config, const BidLookup& lookup,
                                            const SidTrie& trie);

struct AuditFailure {
  std::string audit;
  std::string detail;
};

struct AuditReport {
  int checks = 0;
  std::vector<AuditFailure> failures;
  bool pass() const { return failures.empty(); }
  std::string summary() const;
};

struct AuditOptions {
  int n_instances = 20;
  int n_bid_grid = 50;
  int n_contexts_per_instance = 20;
  int n_integrity_contexts = 1000;
  std::vector<double> lambdas = {0.0, 0.5, 1.0, 2.0, 5.0, 10.0};
  std::uint64_t seed = 7;
  Exec exec = Exec::parallel;
};

// Hooks let tests inject faults; the defaults run the real implementation.
using AllocationFn =
    std::function<double(const ToyInstance&, const Inventory&, const BidLookup&,
                         std::int64_t item, std::span<const std::int32_t> context,
                         const DecodeConfig&)>;
using OrganicRankFn = std::function<std::vector<SemanticId>(
    std::span<const std::int32_t> context, double lambda)>;

// Prop-style monotonicity grid over random toy instances: for each target
// item, allocation probability is non-decreasing along a 50-point ascending
// bid grid with all other bids held fixed.
void audit_allocative_monotonicity(AuditReport& report, const AuditOptions& opts,
                                   AllocationFn alloc = {});

// lambda = 0 bit-equality of every modulated logit, plus decode agreement
// with the modulation-free reference route on the given contexts.
void audit_safe_fallback(AuditReport& report, const SlotScorer& scorer, const Inventory& inv,
                         const BidLookup& lookup, const SidTrie& trie,
                         const std::vector<std::vector<std::int32_t>>& contexts,
                         const AuditOptions& opts);

// Forced-organic beam rankings must be permutation-identical across the
// lambda grid.
void audit_organic_integrity(AuditReport& report, const SlotScorer& scorer,
                             const Inventory& inv, const BidLookup& lookup, const SidTrie& trie,
                             const std::vector<std::vector<std::int32_t>>& contexts,
                             const AuditOptions& opts, OrganicRankFn rank = {});

// A scorer trained on ad-free logs must keep P(AD | BOS) at the smoothing
// floor: <= 2 * alpha / total.
void audit_adfree_generalization(AuditReport& report, const AuditOptions& opts);

// Beam output must equal exhaustive enumeration when the width covers the
// whole space, for both flags and every lambda in the grid.
void audit_beam_oracle(AuditReport& report, const AuditOptions& opts);

// Runs all five audits. Integrity/fallback contexts are sampled from the
// provided eval contexts.
AuditReport audit_suite(const SlotScorer& scorer, const Inventory& inv, const SidTrie& trie,
                        const BidLookup& lookup,
                        const std::vector<std::vector<std::int32_t>>& contexts,
                        const AuditOptions& opts);

}  // namespace gemrec
