#include "gemrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace gemrec {

EvalSplit leave_last_out(const std::vector<Trajectory>& trajectories, const SidMap& sids,
                         const Vocabulary& vocab) {
  EvalSplit split;
  split.train_streams.reserve(trajectories.size());
  for (const Trajectory& traj : trajectories) {
    if (traj.events.size() < 2) {
      split.train_streams.push_back(flatten(traj, sids, vocab));
      continue;
    }
    Trajectory head = traj;
    const Interaction target = head.events.back();
    head.events.pop_back();
    TokenStream stream = flatten(head, sids, vocab);

    EvalCase ec;
    ec.user_id = traj.user_id;
    ec.context.assign(stream.tokens.begin(), stream.tokens.end() - 1);  // drop EOS
    ec.true_mode = target.mode;
    ec.true_item = target.item_id;
    split.cases.push_back(std::move(ec));
    split.train_streams.push_back(std::move(stream));
  }
  return split;
}

namespace {

CaseOutcome outcome_from_beams(bool is_ad, double p_ad_post,
                               const std::vector<BeamHypothesis>& beams, const Inventory& inv,
                               const BidLookup& lookup, const SidTrie& trie) {
  CaseOutcome out;
  out.model_is_ad = is_ad;
  out.p_ad_post = p_ad_post;
  out.ranked.reserve(beams.size());
  for (const BeamHypothesis& b : beams) {
    CasePrediction p;
    p.is_ad = is_ad;
    p.sid = b.sid;
    const auto item = trie.resolve(b.sid);
    if (item.has_value()) p.item_id = *item;
    out.ranked.push_back(std::move(p));
  }
  if (!out.ranked.empty()) {
    out.top_item = out.ranked.front().item_id;
    out.top_valid = out.top_item >= 0;
    if (is_ad && out.top_valid && lookup.is_eligible(out.top_item)) {
      out.price = inv.find(out.top_item)->bid;
    }
  }
  return out;
}

}  // namespace

CaseOutcome evaluate_case(const SlotScorer& scorer, const EvalCase& ec,
                          const DecodeConfig& config, const Inventory& inv,
                          const BidLookup& lookup, const SidTrie& trie,
                          std::uint64_t case_seed) {
  Rng rng(case_seed);
  const auto flag_logits = scorer.slot_logits(ec.context, Slot::flag());
  const double z_org = flag_logits[0].second;
  const double z_ad_mod =
      modulate_slot_logit(flag_logits[1].second, config.slot_lambda(), lookup.b_max());
  const FlagDecision decision = sample_flag(z_org, z_ad_mod, config.flag_mode, rng);
  const auto beams = beam_search(scorer, ec.context, decision.is_ad, config, lookup, trie);
  return outcome_from_beams(decision.is_ad, decision.p_ad_post, beams, inv, lookup, trie);
}

std::vector<int> strict_hits(const std::vector<CasePrediction>& ranked, Mode true_mode,
                             std::int64_t true_item) {
  std::vector<int> hits(ranked.size(), 0);
  const bool want_ad = true_mode == Mode::sponsored;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    hits[r] = (ranked[r].is_ad == want_ad && ranked[r].item_id == true_item) ? 1 : 0;
  }
  return hits;
}

double ndcg_at_k(const std::vector<int>& hits, int k) {
  if (k < 1) throw std::invalid_argument("metric cutoff k must be >= 1");
  const std::size_t limit = std::min<std::size_t>(hits.size(), k);
  for (std::size_t r = 0; r < limit; ++r) {
    if (hits[r] != 0) return 1.0 / std::log2(static_cast<double>(r + 2));
  }
  return 0.0;
}

double recall_at_k(const std::vector<int>& hits, int k) {
  if (k < 1) throw std::invalid_argument("metric cutoff k must be >= 1");
  const std::size_t limit = std::min<std::size_t>(hits.size(), k);
  for (std::size_t r = 0; r < limit; ++r) {
    if (hits[r] != 0) return 1.0;
  }
  return 0.0;
}

std::vector<BeamHypothesis> reference_beam(const SlotScorer& scorer,
                                           std::span<const std::int32_t> context, bool is_ad,
                                           int beam_width, bool trie_constrained,
                                           const BidLookup& eligibility, const SidTrie& trie) {
  const Vocabulary& vocab = scorer.vocab();
  const std::size_t width = static_cast<std::size_t>(std::max(beam_width, 1));
  if (trie_constrained && is_ad && !eligibility.has_eligible()) {
    throw NoAdAvailableError("no eligible sponsored item under trie-constrained decoding");
  }

  struct Hyp {
    std::vector<std::int32_t> codes;
    std::int32_t disamb = -1;
    double score = 0.0;
  };
  struct Cand {
    std::size_t parent;
    std::int32_t token;
    std::int32_t value;
    double score;
  };

  std::vector<std::int32_t> ctx(context.begin(), context.end());
  ctx.push_back(is_ad ? Vocabulary::kAd : Vocabulary::kOrg);
  const std::size_t ctx_base = ctx.size();
  auto hyp_context = [&](const Hyp& h) -> std::span<const std::int32_t> {
    ctx.resize(ctx_base);
    for (std::size_t k = 0; k < h.codes.size(); ++k) {
      ctx.push_back(vocab.code_token(k, h.codes[k]));
    }
    return ctx;
  };

  std::vector<Hyp> beam{Hyp{}};
  std::vector<Cand> cands;
  auto cand_before = [&](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.token != b.token) return a.token < b.token;
    return beam[a.parent].codes < beam[b.parent].codes;
  };

  auto expand = [&](Slot slot, bool disamb_level) {
    cands.clear();
    for (std::size_t h = 0; h < beam.size(); ++h) {
      const auto scores = scorer.slot_logits(hyp_context(beam[h]), slot);
      const SidTrie::Node* node = trie_constrained ? trie.find_prefix(beam[h].codes) : nullptr;
      std::vector<std::int32_t> child(beam[h].codes.begin(), beam[h].codes.end());
      child.push_back(0);
      for (const auto& [token, score] : scores) {
        const std::int32_t value =
            disamb_level ? vocab.disamb_value(token) : vocab.code_value(token);
        if (trie_constrained) {
          if (node == nullptr) continue;
          const auto it = node->children.find(value);
          if (it == node->children.end()) continue;
          if (is_ad) {
            if (disamb_level) {
              if (!eligibility.is_eligible(trie.node(it->second).item_id)) continue;
            } else {
              child.back() = value;
              if (!eligibility.subtree_has_eligible(child)) continue;
            }
          }
        }
        cands.push_back({h, token, value, beam[h].score + score});
      }
    }
    std::sort(cands.begin(), cands.end(), cand_before);
    if (cands.size() > width) cands.resize(width);
    std::vector<Hyp> next;
    next.reserve(cands.size());
    for (const Cand& c : cands) {
      Hyp h = beam[c.parent];
      if (disamb_level) {
        h.disamb = c.value;
      } else {
        h.codes.push_back(c.value);
      }
      h.score = c.score;
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  };

  for (std::size_t level = 0; level < vocab.depth(); ++level) {
    expand(Slot::code(level), false);
  }
  expand(Slot::disamb(), true);

  std::vector<BeamHypothesis> out;
  out.reserve(beam.size());
  for (const Hyp& h : beam) {
    BeamHypothesis bh;
    bh.sid.codes = h.codes;
    bh.sid.disamb = h.disamb;
    bh.base_score = h.score;
    bh.mod_score = h.score;
    out.push_back(std::move(bh));
  }
  std::sort(out.begin(), out.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.mod_score != b.mod_score) return a.mod_score > b.mod_score;
    if (a.sid.codes != b.sid.codes) return a.sid.codes < b.sid.codes;
    return a.sid.disamb < b.sid.disamb;
  });
  return out;
}

MetricsRow aggregate_outcomes(const std::vector<CaseOutcome>& outcomes,
                              const std::vector<EvalCase>& cases, const Inventory& inv,
                              double lambda, const EvalOptions& opts) {
  MetricsRow row;
  row.lambda = lambda;
  row.seed = opts.seed;
  const std::size_t n = cases.size();
  if (n == 0) return row;

  std::size_t ads = 0, valid_ads = 0, hv = 0;
  std::size_t org_cases = 0, ad_target_cases = 0, depth_cases = 0;
  double ndcg_sum = 0.0, recall_sum = 0.0;
  double o_ndcg_sum = 0.0, o_recall_sum = 0.0, ad_ndcg_sum = 0.0, depth_sum = 0.0;

  for (std::size_t i = 0; i < n; ++i) {
    const CaseOutcome& outcome = outcomes[i];
    const auto hits = strict_hits(outcome.ranked, cases[i].true_mode, cases[i].true_item);
    const double ndcg = ndcg_at_k(hits, opts.metric_k);
    const double recall = recall_at_k(hits, opts.metric_k);
    ndcg_sum += ndcg;
    recall_sum += recall;
    if (cases[i].true_mode == Mode::sponsored) {
      ++ad_target_cases;
      ad_ndcg_sum += ndcg;
    }
    if (outcome.model_is_ad) {
      ++ads;
      row.revenue += outcome.price;
      if (!outcome.ranked.empty()) {
        ++depth_cases;
        depth_sum += prefix_match_depth(outcome.ranked.front().sid,
                                        inv.find(cases[i].true_item)->sid);
      }
      if (outcome.top_valid) {
        ++valid_ads;
        if (opts.shocked != nullptr && opts.shocked->count(outcome.top_item) != 0) ++hv;
      }
    } else if (cases[i].true_mode == Mode::organic) {
      ++org_cases;
      o_ndcg_sum += ndcg;
      o_recall_sum += recall;
    }
  }

  row.ad_rate = static_cast<double>(ads) / static_cast<double>(n);
  row.ndcg10 = ndcg_sum / static_cast<double>(n);
  row.recall10 = recall_sum / static_cast<double>(n);
  if (org_cases > 0) {
    row.o_ndcg10 = o_ndcg_sum / static_cast<double>(org_cases);
    row.o_recall10 = o_recall_sum / static_cast<double>(org_cases);
  }
  if (ad_target_cases > 0) row.ad_ndcg10 = ad_ndcg_sum / static_cast<double>(ad_target_cases);
  if (depth_cases > 0) row.mean_prefix_depth = depth_sum / static_cast<double>(depth_cases);
  if (ads > 0) row.validity = static_cast<double>(valid_ads) / static_cast<double>(ads);
  if (opts.shocked != nullptr && valid_ads > 0) {
    row.hv_share = static_cast<double>(hv) / static_cast<double>(valid_ads);
  }
  return row;
}

namespace {

template <typename CaseFn>
MetricsRow run_eval(CaseFn&& case_fn, const std::vector<EvalCase>& cases, const Inventory& inv,
                    double lambda, const EvalOptions& opts) {
  std::vector<CaseOutcome> outcomes(cases.size());
  parallel_for(cases.size(), opts.exec, [&](std::size_t i) {
    outcomes[i] = case_fn(cases[i], derive_seed(opts.seed, i));
  });
  return aggregate_outcomes(outcomes, cases, inv, lambda, opts);
}

}  // namespace

MetricsRow evaluate_lambda(const SlotScorer& scorer, const std::vector<EvalCase>& cases,
                           const Inventory& inv, const BidLookup& lookup, const SidTrie& trie,
                           double lambda, const EvalOptions& opts) {
  DecodeConfig config;
  config.lambda = lambda;
  config.beam_width = opts.beam_width;
  config.trie_constrained = opts.trie_constrained;
  config.flag_mode = FlagMode::sample;
  return run_eval(
      [&](const EvalCase& ec, std::uint64_t case_seed) {
        return evaluate_case(scorer, ec, config, inv, lookup, trie, case_seed);
      },
      cases, inv, lambda, opts);
}

MetricsRow evaluate_unmodulated(const SlotScorer& scorer, const std::vector<EvalCase>& cases,
                                const Inventory& inv, const BidLookup& lookup,
                                const SidTrie& trie, const EvalOptions& opts) {
  return run_eval(
      [&](const EvalCase& ec, std::uint64_t case_seed) {
        Rng rng(case_seed);
        const auto flag_logits = scorer.slot_logits(ec.context, Slot::flag());
        const FlagDecision decision =
            sample_flag(flag_logits[0].second, flag_logits[1].second, FlagMode::sample, rng);
        const auto beams = reference_beam(scorer, ec.context, decision.is_ad, opts.beam_width,
                                          opts.trie_constrained, lookup, trie);
        return outcome_from_beams(decision.is_ad, decision.p_ad_post, beams, inv, lookup, trie);
      },
      cases, inv, 0.0, opts);
}

std::vector<MetricsRow> lambda_sweep(const SlotScorer& scorer,
                                     const std::vector<EvalCase>& cases, const Inventory& inv,
                                     const BidLookup& lookup, const SidTrie& trie,
                                     const std::vector<double>& lambdas,
                                     const EvalOptions& opts) {
  std::vector<MetricsRow> rows;
  rows.reserve(lambdas.size());
  for (const double lambda : lambdas) {
    rows.push_back(evaluate_lambda(scorer, cases, inv, lookup, trie, lambda, opts));
  }
  return rows;
}

ShockOutcome shock_experiment(const SlotScorer& scorer, const std::vector<EvalCase>& cases,
                              const Inventory& inv, const SidTrie& trie,
                              const std::vector<double>& lambdas, double shock_fraction,
                              double shock_multiplier, std::uint64_t shock_seed,
                              const EvalOptions& opts) {
  ShockOutcome outcome;
  const ShockResult shocked = apply_bid_shock(inv, shock_fraction, shock_multiplier, shock_seed);
  outcome.shocked_items = shocked.shocked_items;

  // Only the bid lookup is rebuilt; the scorer stays fixed.
  const BidLookup lookup =
      build_bid_lookup(trie, shocked.inventory, eligible_sponsored(shocked.inventory));

  EvalOptions shock_opts = opts;
  shock_opts.shocked = &outcome.shocked_items;

  const MetricsRow baseline =
      evaluate_lambda(scorer, cases, shocked.inventory, lookup, trie, 0.0, shock_opts);

  for (const double lambda : lambdas) {
    const MetricsRow row =
        lambda == 0.0 ? baseline
                      : evaluate_lambda(scorer, cases, shocked.inventory, lookup, trie, lambda,
                                        shock_opts);
    ShockRow sr;
    sr.lambda = lambda;
    sr.ad_rate = row.ad_rate;
    sr.hv_share = row.hv_share;
    sr.revenue = row.revenue;
    if (lambda == 0.0) {
      sr.uplift = 1.0;
    } else if (baseline.revenue > 0.0) {
      sr.uplift = row.revenue / baseline.revenue;
    }
    outcome.rows.push_back(sr);
  }
  return outcome;
}

double heldout_segment_nll(const ScorerModel& model, const std::vector<EvalCase>& cases,
                           const Inventory& inv, Exec exec) {
  const Vocabulary& vocab = model.vocab();
  std::vector<double> sums(cases.size(), 0.0);
  parallel_for(cases.size(), exec, [&](std::size_t i) {
    const EvalCase& ec = cases[i];
    const SemanticId& sid = inv.find(ec.true_item)->sid;
    std::vector<std::int32_t> ctx = ec.context;
    double nll = 0.0;
    const std::int32_t flag_token =
        ec.true_mode == Mode::sponsored ? Vocabulary::kAd : Vocabulary::kOrg;
    nll -= model.log_prob(ctx, Slot::flag(), flag_token);
    ctx.push_back(flag_token);
    for (std::size_t k = 0; k < vocab.depth(); ++k) {
      const std::int32_t tok = vocab.code_token(k, sid.codes[k]);
      nll -= model.log_prob(ctx, Slot::code(k), tok);
      ctx.push_back(tok);
    }
    nll -= model.log_prob(ctx, Slot::disamb(), vocab.disamb_token(sid.disamb));
    sums[i] = nll;
  });
  double total = 0.0;
  for (const double s : sums) total += s;
  const double n_tokens = static_cast<double>(cases.size()) * (vocab.depth() + 2.0);
  return n_tokens > 0.0 ? total / n_tokens : 0.0;
}

// ---------------------------------------------------------------------------
// Audits
// ---------------------------------------------------------------------------

ToyInstance make_toy_instance(std::uint64_t seed, std::size_t codebook_size, std::size_t depth,
                              std::size_t n_items, std::size_t n_contexts) {
  Rng rng(seed);
  ToyInstance toy;

  std::vector<std::pair<std::int64_t, std::vector<std::int32_t>>> coded;
  coded.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    std::vector<std::int32_t> codes(depth);
    for (std::size_t k = 0; k < depth; ++k) {
      codes[k] = static_cast<std::int32_t>(rng.uniform_index(codebook_size));
    }
    coded.emplace_back(static_cast<std::int64_t>(i), std::move(codes));
  }
  const std::vector<SemanticId> sids = disambiguate(coded);

  std::size_t max_disamb = 0;
  for (const SemanticId& sid : sids) {
    max_disamb = std::max<std::size_t>(max_disamb, sid.disamb);
  }
  toy.vocab = Vocabulary(depth, codebook_size, max_disamb + 1);

  bool any_sponsored = false;
  for (std::size_t i = 0; i < n_items; ++i) {
    InventoryItem item;
    item.item_id = static_cast<std::int64_t>(i);
    item.sid = sids[i];
    item.sponsored = rng.uniform01() < 0.5;
    any_sponsored |= item.sponsored;
    toy.inventory.items.push_back(std::move(item));
  }
  if (!any_sponsored) toy.inventory.items[0].sponsored = true;
  for (InventoryItem& item : toy.inventory.items) {
    if (item.sponsored) item.bid = 0.1 + 0.9 * rng.uniform01();
  }
  toy.inventory.rebuild_index();

  std::vector<std::pair<std::int64_t, SemanticId>> entries;
  for (const InventoryItem& item : toy.inventory.items) {
    entries.emplace_back(item.item_id, item.sid);
  }
  toy.trie = build_trie(entries, depth);

  SidMap sid_map;
  for (const InventoryItem& item : toy.inventory.items) sid_map.emplace(item.item_id, item.sid);

  // Random training corpus: enough mass that most slots have counts, random
  // enough that the conditionals vary across instances.
  std::vector<TokenStream> corpus;
  const std::size_t n_traj = 30;
  for (std::size_t t = 0; t < n_traj; ++t) {
    Trajectory traj;
    traj.user_id = static_cast<std::int64_t>(t);
    const std::size_t len = 2 + rng.uniform_index(6);
    for (std::size_t s = 0; s < len; ++s) {
      const std::size_t idx = rng.uniform_index(n_items);
      const Mode mode = rng.uniform01() < 0.3 ? Mode::sponsored : Mode::organic;
      traj.events.push_back({mode, static_cast<std::int64_t>(idx)});
    }
    corpus.push_back(flatten(traj, sid_map, toy.vocab));
  }
  toy.scorer = ScorerModel::train(toy.vocab, corpus, /*order=*/2, /*alpha=*/0.1);

  for (std::size_t c = 0; c < n_contexts; ++c) {
    Trajectory traj;
    traj.user_id = 0;
    const std::size_t len = rng.uniform_index(4);
    for (std::size_t s = 0; s < len; ++s) {
      const std::size_t idx = rng.uniform_index(n_items);
      const Mode mode = rng.uniform01() < 0.3 ? Mode::sponsored : Mode::organic;
      traj.events.push_back({mode, static_cast<std::int64_t>(idx)});
    }
    TokenStream stream = flatten(traj, sid_map, toy.vocab);
    stream.tokens.pop_back();  // drop EOS; next slot is a flag
    toy.contexts.push_back(std::move(stream.tokens));
  }
  return toy;
}

std::vector<BeamHypothesis> exhaustive_rank(const SlotScorer& scorer,
                                            std::span<const std::int32_t> context, bool is_ad,
                                            const DecodeConfig& config, const BidLookup& lookup,
                                            const SidTrie& trie) {
  const Vocabulary& vocab = scorer.vocab();
  if (config.trie_constrained && is_ad && !lookup.has_eligible()) {
    throw NoAdAvailableError("no eligible sponsored item under trie-constrained decoding");
  }

  std::vector<std::int32_t> ctx(context.begin(), context.end());
  ctx.push_back(is_ad ? Vocabulary::kAd : Vocabulary::kOrg);
  const std::size_t ctx_base = ctx.size();

  std::vector<BeamHypothesis> out;
  std::vector<std::int32_t> codes;

  auto walk = [&](auto&& self, double base, double mod) -> void {
    const std::size_t level = codes.size();
    ctx.resize(ctx_base);
    for (std::size_t k = 0; k < level; ++k) ctx.push_back(vocab.code_token(k, codes[k]));
    const SidTrie::Node* node = config.trie_constrained ? trie.find_prefix(codes) : nullptr;

    if (level == vocab.depth()) {
      std::vector<std::int32_t> full(codes.begin(), codes.end());
      full.push_back(0);
      for (const auto& [token, score] : scorer.slot_logits(ctx, Slot::disamb())) {
        const std::int32_t value = vocab.disamb_value(token);
        if (config.trie_constrained) {
          if (node == nullptr) continue;
          const auto it = node->children.find(value);
          if (it == node->children.end()) continue;
          if (is_ad && !lookup.is_eligible(trie.node(it->second).item_id)) continue;
        }
        double slot_mod = score;
        if (is_ad) {
          full.back() = value;
          slot_mod = score + config.item_lambda() * std::log1p(lookup.subtree_max(full));
        }
        BeamHypothesis bh;
        bh.sid.codes = codes;
        bh.sid.disamb = value;
        bh.base_score = base + score;
        bh.mod_score = mod + slot_mod;
        out.push_back(std::move(bh));
      }
      return;
    }

    std::vector<std::int32_t> child(codes.begin(), codes.end());
    child.push_back(0);
    for (const auto& [token, score] : scorer.slot_logits(ctx, Slot::code(level))) {
      const std::int32_t value = vocab.code_value(token);
      child.back() = value;
      if (config.trie_constrained) {
        if (node == nullptr || node->children.count(value) == 0) continue;
        if (is_ad && !lookup.subtree_has_eligible(child)) continue;
      }
      double slot_mod = score;
      if (is_ad) slot_mod = score + config.item_lambda() * std::log1p(lookup.subtree_max(child));
      codes.push_back(value);
      self(self, base + score, mod + slot_mod);
      codes.pop_back();
    }
  };
  walk(walk, 0.0, 0.0);

  std::sort(out.begin(), out.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.mod_score != b.mod_score) return a.mod_score > b.mod_score;
    if (a.sid.codes != b.sid.codes) return a.sid.codes < b.sid.codes;
    return a.sid.disamb < b.sid.disamb;
  });
  return out;
}

std::string AuditReport::summary() const {
  std::ostringstream os;
  os << "audits: " << checks << " checks, " << failures.size() << " failures";
  for (const AuditFailure& f : failures) {
    os << "\n  [" << f.audit << "] " << f.detail;
  }
  return os.str();
}

void audit_allocative_monotonicity(AuditReport& report, const AuditOptions& opts,
                                   AllocationFn alloc) {
  if (!alloc) {
    alloc = [](const ToyInstance& toy, const Inventory& inv, const BidLookup& lookup,
               std::int64_t item, std::span<const std::int32_t> context,
               const DecodeConfig& config) {
      return allocation_probability(item, context, config, toy.scorer, inv, lookup, toy.trie);
    };
  }

  for (int inst = 0; inst < opts.n_instances; ++inst) {
    const std::uint64_t inst_seed = derive_seed(opts.seed, 1000 + inst);
    const std::size_t c = 2 + inst % 3;   // 2..4
    const std::size_t d = 2 + inst % 2;   // 2..3
    const std::size_t n_items = 8 + (inst * 7) % 23;  // 8..30
    ToyInstance toy = make_toy_instance(inst_seed, c, d, n_items,
                                        static_cast<std::size_t>(opts.n_contexts_per_instance));

    Rng rng(derive_seed(inst_seed, 1));
    const auto sponsored = toy.inventory.sponsored_indices();
    const std::size_t target_idx = sponsored[rng.uniform_index(sponsored.size())];
    const std::int64_t target = toy.inventory.items[target_idx].item_id;

    DecodeConfig config;
    config.lambda = opts.lambdas[inst % opts.lambdas.size()];
    config.beam_width = 1 + inst % 4;
    config.trie_constrained = true;

    std::vector<double> prev(toy.contexts.size(), -1.0);
    for (int g = 0; g < opts.n_bid_grid; ++g) {
      const double bid = 0.05 + 0.2 * static_cast<double>(g);
      Inventory inv = toy.inventory;
      inv.rebuild_index();
      inv.items[target_idx].bid = bid;
      const BidLookup lookup = build_bid_lookup(toy.trie, inv, eligible_sponsored(inv));

      for (std::size_t ci = 0; ci < toy.contexts.size(); ++ci) {
        const double x = alloc(toy, inv, lookup, target, toy.contexts[ci], config);
        ++report.checks;
        if (x < prev[ci]) {
          report.failures.push_back(
              {"monotonicity", "instance " + std::to_string(inst) + " context " +
                                   std::to_string(ci) + " lambda " +
                                   std::to_string(config.lambda) + ": x dropped from " +
                                   std::to_string(prev[ci]) + " to " + std::to_string(x) +
                                   " at bid grid point " + std::to_string(g)});
          return;
        }
        prev[ci] = x;
      }
    }
  }
}

namespace {

bool bitwise_equal(double a, double b) {
  return std::memcmp(&a, &b, sizeof(double)) == 0;
}

}  // namespace

void audit_safe_fallback(AuditReport& report, const SlotScorer& scorer, const Inventory& inv,
                         const BidLookup& lookup, const SidTrie& trie,
                         const std::vector<std::vector<std::int32_t>>& contexts,
                         const AuditOptions& opts) {
  (void)inv;
  Rng rng(derive_seed(opts.seed, 2000));

  // Slot-level modulation at lambda = 0 is the identity, bit for bit.
  for (int i = 0; i < 200; ++i) {
    const double z = -20.0 + 40.0 * rng.uniform01();
    const double b = 10.0 * rng.uniform01();
    ++report.checks;
    if (!bitwise_equal(modulate_slot_logit(z, 0.0, b), z)) {
      report.failures.push_back({"safe_fallback", "slot logit changed at lambda=0"});
      return;
    }
  }

  DecodeConfig zero;
  zero.lambda = 0.0;
  zero.beam_width = 10;
  zero.trie_constrained = true;

  const std::size_t limit = std::min<std::size_t>(contexts.size(), 200);
  for (std::size_t ci = 0; ci < limit; ++ci) {
    for (const bool is_ad : {false, true}) {
      if (is_ad && !lookup.has_eligible()) continue;
      const auto modulated = beam_search(scorer, contexts[ci], is_ad, zero, lookup, trie);
      const auto reference =
          reference_beam(scorer, contexts[ci], is_ad, zero.beam_width, true, lookup, trie);
      ++report.checks;
      if (modulated.size() != reference.size()) {
        report.failures.push_back({"safe_fallback", "beam size mismatch at lambda=0"});
        return;
      }
      for (std::size_t r = 0; r < modulated.size(); ++r) {
        if (!(modulated[r].sid == reference[r].sid) ||
            !bitwise_equal(modulated[r].mod_score, reference[r].mod_score) ||
            !bitwise_equal(modulated[r].base_score, modulated[r].mod_score)) {
          report.failures.push_back(
              {"safe_fallback", "lambda=0 beam differs from unmodulated reference at context " +
                                    std::to_string(ci) + " rank " + std::to_string(r)});
          return;
        }
      }
    }
  }
}

void audit_organic_integrity(AuditReport& report, const SlotScorer& scorer,
                             const Inventory& inv, const BidLookup& lookup, const SidTrie& trie,
                             const std::vector<std::vector<std::int32_t>>& contexts,
                             const AuditOptions& opts, OrganicRankFn rank) {
  (void)inv;
  if (!rank) {
    rank = [&](std::span<const std::int32_t> context, double lambda) {
      DecodeConfig config;
      config.lambda = lambda;
      config.beam_width = 10;
      config.trie_constrained = true;
      const auto beams = beam_search(scorer, context, /*is_ad=*/false, config, lookup, trie);
      std::vector<SemanticId> sids;
      sids.reserve(beams.size());
      for (const auto& b : beams) sids.push_back(b.sid);
      return sids;
    };
  }

  const std::size_t limit =
      std::min<std::size_t>(contexts.size(), static_cast<std::size_t>(opts.n_integrity_contexts));
  std::vector<std::int8_t> mismatch(limit, 0);
  parallel_for(limit, opts.exec, [&](std::size_t ci) {
    const auto baseline = rank(contexts[ci], opts.lambdas.front());
    for (std::size_t li = 1; li < opts.lambdas.size(); ++li) {
      if (rank(contexts[ci], opts.lambdas[li]) != baseline) {
        mismatch[ci] = 1;
        return;
      }
    }
  });
  for (std::size_t ci = 0; ci < limit; ++ci) {
    ++report.checks;
    if (mismatch[ci] != 0) {
      report.failures.push_back(
          {"organic_integrity",
           "forced-organic ranking depends on lambda at context " + std::to_string(ci)});
      return;
    }
  }
}

void audit_adfree_generalization(AuditReport& report, const AuditOptions& opts) {
  ToyInstance toy = make_toy_instance(derive_seed(opts.seed, 3000), 3, 2, 12, 0);

  SidMap sid_map;
  for (const InventoryItem& item : toy.inventory.items) sid_map.emplace(item.item_id, item.sid);

  Rng rng(derive_seed(opts.seed, 3001));
  std::vector<TokenStream> corpus;
  const std::size_t n_streams = 40;
  for (std::size_t t = 0; t < n_streams; ++t) {
    Trajectory traj;
    traj.user_id = static_cast<std::int64_t>(t);
    const std::size_t len = 2 + rng.uniform_index(5);
    for (std::size_t s = 0; s < len; ++s) {
      traj.events.push_back(
          {Mode::organic, static_cast<std::int64_t>(rng.uniform_index(toy.inventory.items.size()))});
    }
    corpus.push_back(flatten(traj, sid_map, toy.vocab));
  }
  const double alpha = 0.1;
  const ScorerModel model = ScorerModel::train(toy.vocab, corpus, 2, alpha);

  const std::vector<std::int32_t> bos{Vocabulary::kBos};
  const double p_ad = std::exp(model.log_prob(bos, Slot::flag(), Vocabulary::kAd));
  const double total = static_cast<double>(n_streams);  // every stream opens with one flag
  const double floor = alpha / (total + 2.0 * alpha);

  ++report.checks;
  if (std::abs(p_ad - floor) > 1e-15) {
    report.failures.push_back(
        {"adfree_generalization", "P(AD|BOS) = " + std::to_string(p_ad) +
                                      " differs from smoothing floor " + std::to_string(floor)});
  }
  ++report.checks;
  if (!(p_ad <= 2.0 * alpha / total)) {
    report.failures.push_back(
        {"adfree_generalization", "P(AD|BOS) above 2*alpha/total bound"});
  }
}

void audit_beam_oracle(AuditReport& report, const AuditOptions& opts) {
  for (int inst = 0; inst < opts.n_instances; ++inst) {
    const std::uint64_t inst_seed = derive_seed(opts.seed, 4000 + inst);
    const std::size_t c = 3, d = 2;

    // Items cover every code path exactly once, so a width of C^D spans the
    // whole search space in both constrained and unconstrained modes.
    Rng rng(inst_seed);
    ToyInstance toy;
    std::vector<std::pair<std::int64_t, std::vector<std::int32_t>>> coded;
    std::int64_t next_id = 0;
    for (std::size_t a = 0; a < c; ++a) {
      for (std::size_t b = 0; b < c; ++b) {
        coded.emplace_back(next_id++, std::vector<std::int32_t>{static_cast<std::int32_t>(a),
                                                                static_cast<std::int32_t>(b)});
      }
    }
    const std::vector<SemanticId> sids = disambiguate(coded);
    toy.vocab = Vocabulary(d, c, 1);
    bool any_sponsored = false;
    for (std::size_t i = 0; i < coded.size(); ++i) {
      InventoryItem item;
      item.item_id = coded[i].first;
      item.sid = sids[i];
      item.sponsored = rng.uniform01() < 0.5;
      any_sponsored |= item.sponsored;
      toy.inventory.items.push_back(std::move(item));
    }
    if (!any_sponsored) toy.inventory.items[0].sponsored = true;
    for (InventoryItem& item : toy.inventory.items) {
      if (item.sponsored) item.bid = 0.1 + 0.9 * rng.uniform01();
    }
    toy.inventory.rebuild_index();
    std::vector<std::pair<std::int64_t, SemanticId>> entries;
    for (const InventoryItem& item : toy.inventory.items) {
      entries.emplace_back(item.item_id, item.sid);
    }
    toy.trie = build_trie(entries, d);

    SidMap sid_map;
    for (const InventoryItem& item : toy.inventory.items) {
      sid_map.emplace(item.item_id, item.sid);
    }
    std::vector<TokenStream> corpus;
    for (std::size_t t = 0; t < 20; ++t) {
      Trajectory traj;
      traj.user_id = static_cast<std::int64_t>(t);
      const std::size_t len = 2 + rng.uniform_index(4);
      for (std::size_t s = 0; s < len; ++s) {
        const Mode mode = rng.uniform01() < 0.3 ? Mode::sponsored : Mode::organic;
        traj.events.push_back(
            {mode, static_cast<std::int64_t>(rng.uniform_index(toy.inventory.items.size()))});
      }
      corpus.push_back(flatten(traj, sid_map, toy.vocab));
    }
    toy.scorer = ScorerModel::train(toy.vocab, corpus, 2, 0.1);

    const BidLookup lookup =
        build_bid_lookup(toy.trie, toy.inventory, eligible_sponsored(toy.inventory));
    const std::vector<std::int32_t> context{Vocabulary::kBos};

    for (const bool constrained : {true, false}) {
      for (const bool is_ad : {false, true}) {
        for (const double lambda : opts.lambdas) {
          DecodeConfig config;
          config.lambda = lambda;
          config.beam_width = static_cast<int>(c * c);  // spans the space
          config.trie_constrained = constrained;

          const auto beams = beam_search(toy.scorer, context, is_ad, config, lookup, toy.trie);
          const auto oracle = exhaustive_rank(toy.scorer, context, is_ad, config, lookup, toy.trie);
          ++report.checks;
          bool ok = beams.size() == oracle.size();
          for (std::size_t r = 0; ok && r < beams.size(); ++r) {
            ok = beams[r].sid == oracle[r].sid &&
                 std::abs(beams[r].mod_score - oracle[r].mod_score) < 1e-12;
          }
          if (!ok) {
            report.failures.push_back(
                {"beam_oracle", "beam != exhaustive enumeration at instance " +
                                    std::to_string(inst) + " lambda " + std::to_string(lambda) +
                                    (is_ad ? " (ad)" : " (organic)") +
                                    (constrained ? " constrained" : " unconstrained")});
            return;
          }
        }
      }
    }
  }
}

AuditReport audit_suite(const SlotScorer& scorer, const Inventory& inv, const SidTrie& trie,
                        const BidLookup& lookup,
                        const std::vector<std::vector<std::int32_t>>& contexts,
                        const AuditOptions& opts) {
  AuditReport report;
  audit_allocative_monotonicity(report, opts);
  audit_safe_fallback(report, scorer, inv, lookup, trie, contexts, opts);
  audit_organic_integrity(report, scorer, inv, lookup, trie, contexts, opts);
  audit_adfree_generalization(report, opts);
  audit_beam_oracle(report, opts);
  return report;
}

}  // namespace gemrec
