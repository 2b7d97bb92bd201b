#include "gemrec/decoder.hpp"

#include <algorithm>
#include <cmath>

namespace gemrec {

BidLookup build_bid_lookup(const SidTrie& trie, const Inventory& inv,
                           const std::vector<std::int64_t>& eligible_items) {
  BidLookup lookup;
  for (const std::int64_t id : eligible_items) {
    const InventoryItem* item = inv.find(id);
    if (item == nullptr) {
      throw std::invalid_argument("eligible item " + std::to_string(id) + " not in inventory");
    }
    if (!item->sponsored) {
      throw std::invalid_argument("eligible item " + std::to_string(id) + " is not sponsored");
    }
    if (trie.resolve(item->sid) != id) {
      throw std::invalid_argument("eligible item " + std::to_string(id) +
                                  " does not resolve in the trie");
    }
    lookup.eligible_.insert(id);
    lookup.b_max_ = std::max(lookup.b_max_, item->bid);
    // Prefixes of every length, including the full id with disambiguator:
    // B(full id of an eligible item) is exactly its bid.
    std::vector<std::int32_t> prefix;
    prefix.reserve(item->sid.codes.size() + 1);
    for (const std::int32_t c : item->sid.codes) {
      prefix.push_back(c);
      auto [it, inserted] = lookup.prefix_max_.emplace(prefix, item->bid);
      if (!inserted) it->second = std::max(it->second, item->bid);
    }
    prefix.push_back(item->sid.disamb);
    lookup.prefix_max_.emplace(prefix, item->bid);
  }
  return lookup;
}

std::vector<std::int64_t> eligible_sponsored(const Inventory& inv) {
  std::vector<std::int64_t> out;
  for (const InventoryItem& item : inv.items) {
    if (item.sponsored && item.bid > 0.0) out.push_back(item.item_id);
  }
  return out;
}

std::vector<std::pair<std::int32_t, double>> modulate_item_logits(
    std::vector<std::pair<std::int32_t, double>> scores, double lambda_item,
    const BidLookup& lookup, std::span<const std::int32_t> prefix, const Vocabulary& vocab) {
  std::vector<std::int32_t> extended(prefix.begin(), prefix.end());
  extended.push_back(0);
  for (auto& [token, score] : scores) {
    extended.back() = vocab.code_value(token);
    score += lambda_item * std::log1p(lookup.subtree_max(extended));
  }
  return scores;
}

FlagDecision sample_flag(double z_org, double z_ad_mod, FlagMode mode, Rng& rng) {
  FlagDecision decision;
  decision.p_ad_post = 1.0 / (1.0 + std::exp(z_org - z_ad_mod));
  switch (mode) {
    case FlagMode::sample:
      decision.is_ad = rng.uniform01() < decision.p_ad_post;
      break;
    case FlagMode::force_org:
      decision.is_ad = false;
      break;
    case FlagMode::force_ad:
      decision.is_ad = true;
      break;
  }
  return decision;
}

namespace {

struct Hypothesis {
  std::vector<std::int32_t> codes;  // code values chosen so far
  std::int32_t disamb = -1;
  double base = 0.0;
  double mod = 0.0;
};

struct Candidate {
  std::size_t parent = 0;
  std::int32_t token = 0;
  std::int32_t value = 0;
  double base = 0.0;
  double mod = 0.0;
};

// Step ordering: score, then lower token id, then lexicographic prefix.
bool candidate_before(const Candidate& a, const Candidate& b,
                      const std::vector<Hypothesis>& hyps) {
  if (a.mod != b.mod) return a.mod > b.mod;
  if (a.token != b.token) return a.token < b.token;
  return hyps[a.parent].codes < hyps[b.parent].codes;
}

}  // namespace

std::vector<BeamHypothesis> beam_search(const SlotScorer& scorer,
                                        std::span<const std::int32_t> context, bool is_ad,
                                        const DecodeConfig& config, const BidLookup& lookup,
                                        const SidTrie& trie) {
  const Vocabulary& vocab = scorer.vocab();
  const std::size_t width = static_cast<std::size_t>(std::max(config.beam_width, 1));
  if (config.trie_constrained && is_ad && !lookup.has_eligible()) {
    throw NoAdAvailableError("no eligible sponsored item under trie-constrained decoding");
  }

  // Scorer context of a hypothesis: request context + flag + chosen tokens.
  std::vector<std::int32_t> ctx(context.begin(), context.end());
  ctx.push_back(is_ad ? Vocabulary::kAd : Vocabulary::kOrg);
  const std::size_t ctx_base = ctx.size();
  auto hyp_context = [&](const Hypothesis& h) -> std::span<const std::int32_t> {
    ctx.resize(ctx_base);
    for (std::size_t k = 0; k < h.codes.size(); ++k) {
      ctx.push_back(vocab.code_token(k, h.codes[k]));
    }
    return ctx;
  };

  std::vector<Hypothesis> beam{Hypothesis{}};
  std::vector<Candidate> candidates;

  // Code slots.
  for (std::size_t level = 0; level < vocab.depth(); ++level) {
    candidates.clear();
    for (std::size_t h = 0; h < beam.size(); ++h) {
      const auto base_scores = scorer.slot_logits(hyp_context(beam[h]), Slot::code(level));
      auto mod_scores = base_scores;
      if (is_ad) {
        mod_scores = modulate_item_logits(std::move(mod_scores), config.item_lambda(), lookup,
                                          beam[h].codes, vocab);
      }
      const SidTrie::Node* node =
          config.trie_constrained ? trie.find_prefix(beam[h].codes) : nullptr;
      std::vector<std::int32_t> child(beam[h].codes.begin(), beam[h].codes.end());
      child.push_back(0);
      for (std::size_t s = 0; s < base_scores.size(); ++s) {
        const std::int32_t value = vocab.code_value(base_scores[s].first);
        if (config.trie_constrained) {
          if (node == nullptr || node->children.count(value) == 0) continue;
          if (is_ad) {
            child.back() = value;
            if (!lookup.subtree_has_eligible(child)) continue;
          }
        }
        candidates.push_back({h, base_scores[s].first, value,
                              beam[h].base + base_scores[s].second,
                              beam[h].mod + mod_scores[s].second});
      }
    }
    std::sort(candidates.begin(), candidates.end(),
              [&](const Candidate& a, const Candidate& b) { return candidate_before(a, b, beam); });
    if (candidates.size() > width) candidates.resize(width);

    std::vector<Hypothesis> next;
    next.reserve(candidates.size());
    for (const Candidate& c : candidates) {
      Hypothesis h = beam[c.parent];
      h.codes.push_back(c.value);
      h.base = c.base;
      h.mod = c.mod;
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }

  // Disambiguation slot. Items sharing a full code path differ only here,
  // so the sponsored branch keeps modulating with B(codes + disamb), which
  // is the item's own bid.
  candidates.clear();
  for (std::size_t h = 0; h < beam.size(); ++h) {
    const auto scores = scorer.slot_logits(hyp_context(beam[h]), Slot::disamb());
    const SidTrie::Node* node =
        config.trie_constrained ? trie.find_prefix(beam[h].codes) : nullptr;
    std::vector<std::int32_t> full(beam[h].codes.begin(), beam[h].codes.end());
    full.push_back(0);
    for (const auto& [token, score] : scores) {
      const std::int32_t value = vocab.disamb_value(token);
      if (config.trie_constrained) {
        if (node == nullptr) continue;
        const auto child = node->children.find(value);
        if (child == node->children.end()) continue;
        if (is_ad && !lookup.is_eligible(trie.node(child->second).item_id)) continue;
      }
      double mod = score;
      if (is_ad) {
        full.back() = value;
        mod = score + config.item_lambda() * std::log1p(lookup.subtree_max(full));
      }
      candidates.push_back({h, token, value, beam[h].base + score, beam[h].mod + mod});
    }
  }
  std::sort(candidates.begin(), candidates.end(),
            [&](const Candidate& a, const Candidate& b) { return candidate_before(a, b, beam); });
  if (candidates.size() > width) candidates.resize(width);

  std::vector<BeamHypothesis> out;
  out.reserve(candidates.size());
  for (const Candidate& c : candidates) {
    BeamHypothesis bh;
    bh.sid.codes = beam[c.parent].codes;
    bh.sid.disamb = c.value;
    bh.base_score = c.base;
    bh.mod_score = c.mod;
    out.push_back(std::move(bh));
  }
  // Final ranking: total modulated score, ties by lexicographic code path.
  std::stable_sort(out.begin(), out.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.mod_score != b.mod_score) return a.mod_score > b.mod_score;
    if (a.sid.codes != b.sid.codes) return a.sid.codes < b.sid.codes;
    return a.sid.disamb < b.sid.disamb;
  });
  return out;
}

DecodeResult decode_next(const SlotScorer& scorer, std::span<const std::int32_t> context,
                         const DecodeConfig& config, const Inventory& inv,
                         const BidLookup& lookup, const SidTrie& trie, Rng& rng) {
  const auto flag_logits = scorer.slot_logits(context, Slot::flag());
  const double z_org = flag_logits[0].second;
  const double z_ad = flag_logits[1].second;
  const double z_ad_mod = modulate_slot_logit(z_ad, config.slot_lambda(), lookup.b_max());

  FlagDecision decision = sample_flag(z_org, z_ad_mod, config.flag_mode, rng);
  decision.p_ad_pre = 1.0 / (1.0 + std::exp(z_org - z_ad));

  const auto beams = beam_search(scorer, context, decision.is_ad, config, lookup, trie);

  DecodeResult result;
  result.is_ad = decision.is_ad;
  result.p_ad_pre = decision.p_ad_pre;
  result.p_ad_post = decision.p_ad_post;
  if (beams.empty()) return result;  // unconstrained corner: nothing expandable

  const BeamHypothesis& top = beams.front();
  result.sid = top.sid;
  result.base_score = top.base_score;
  result.mod_score = top.mod_score;
  const auto item = trie.resolve(top.sid);
  if (item.has_value()) {
    result.item_id = *item;
    if (result.is_ad && lookup.is_eligible(*item)) {
      result.price = inv.find(*item)->bid;
    }
  }
  return result;
}

double allocation_probability(std::int64_t item_id, std::span<const std::int32_t> context,
                              const DecodeConfig& config, const SlotScorer& scorer,
                              const Inventory& inv, const BidLookup& lookup,
                              const SidTrie& trie) {
  const InventoryItem* item = inv.find(item_id);
  if (item == nullptr || !item->sponsored || !lookup.is_eligible(item_id)) {
    throw std::invalid_argument("allocation probability requires an eligible sponsored item");
  }
  const auto flag_logits = scorer.slot_logits(context, Slot::flag());
  const double z_org = flag_logits[0].second;
  const double z_ad_mod =
      modulate_slot_logit(flag_logits[1].second, config.slot_lambda(), lookup.b_max());
  const double p_ad = 1.0 / (1.0 + std::exp(z_org - z_ad_mod));

  const auto beams = beam_search(scorer, context, /*is_ad=*/true, config, lookup, trie);
  if (beams.empty()) return 0.0;
  const auto winner = trie.resolve(beams.front().sid);
  return winner.has_value() && *winner == item_id ? p_ad : 0.0;
}

}  // namespace gemrec
