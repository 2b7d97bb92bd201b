#pragma once

// Unified organic/sponsored token stream and the autoregressive scorer.
//
// Each interaction becomes the segment [flag, c_1..c_D, disamb]; streams
// are [BOS] + segments + [EOS]. Token ids are level-tagged, so a slot only
// ever admits tokens of its own level and the conditional distribution is
// normalized over that legal set. The scorer is a back-off table of
// order-0..m context counts with additive smoothing; it hides behind the
// SlotScorer interface so a different estimator can be swapped in without
// touching the decoder.

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gemrec/marketplace.hpp"
#include "gemrec/semantic_index.hpp"

namespace gemrec {

struct PositionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingIdError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Vocabulary {
 public:
  static constexpr std::int32_t kBos = 0;
  static constexpr std::int32_t kEos = 1;
  static constexpr std::int32_t kOrg = 2;
  static constexpr std::int32_t kAd = 3;

  Vocabulary() = default;
  Vocabulary(std::size_t depth, std::size_t codebook_size, std::size_t disamb_count)
      : depth_(depth), codebook_size_(codebook_size), disamb_count_(disamb_count) {}

  std::size_t depth() const { return depth_; }
  std::size_t codebook_size() const { return codebook_size_; }
  std::size_t disamb_count() const { return disamb_count_; }
  std::size_t size() const { return 4 + depth_ * codebook_size_ + disamb_count_; }
  std::size_t segment_length() const { return depth_ + 2; }

  std::int32_t code_token(std::size_t level, std::int32_t value) const {
    return static_cast<std::int32_t>(4 + level * codebook_size_ + value);
  }
  std::int32_t disamb_token(std::int32_t disamb) const {
    return static_cast<std::int32_t>(4 + depth_ * codebook_size_ + disamb);
  }

  bool is_code_token(std::int32_t t) const {
    return t >= 4 && t < static_cast<std::int32_t>(4 + depth_ * codebook_size_);
  }
  bool is_disamb_token(std::int32_t t) const {
    return t >= static_cast<std::int32_t>(4 + depth_ * codebook_size_) &&
           t < static_cast<std::int32_t>(size());
  }
  // Level in [0, D) for code tokens.
  std::size_t code_level(std::int32_t t) const { return (t - 4) / codebook_size_; }
  std::int32_t code_value(std::int32_t t) const {
    return static_cast<std::int32_t>((t - 4) % codebook_size_);
  }
  std::int32_t disamb_value(std::int32_t t) const {
    return t - static_cast<std::int32_t>(4 + depth_ * codebook_size_);
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) = default;

 private:
  std::size_t depth_ = 0;
  std::size_t codebook_size_ = 0;
  std::size_t disamb_count_ = 0;
};

// Slot of the next token: the flag, code level k (0-based), or the
// disambiguator.
struct Slot {
  enum class Kind : std::uint8_t { flag, code, disamb };
  Kind kind = Kind::flag;
  std::size_t level = 0;

  static Slot flag() { return {Kind::flag, 0}; }
  static Slot code(std::size_t level) { return {Kind::code, level}; }
  static Slot disamb() { return {Kind::disamb, 0}; }

  friend bool operator==(const Slot& a, const Slot& b) = default;
};

// Legal token ids for a slot, ascending.
std::vector<std::int32_t> legal_tokens(const Vocabulary& vocab, Slot slot);

// Slot implied by the token preceding the position (BOS/disamb -> flag,
// flag -> code 0, code k -> code k+1 or disamb). Throws PositionError when
// the previous token cannot precede any slot (e.g. EOS).
Slot slot_after(const Vocabulary& vocab, std::int32_t prev_token);

struct TokenStream {
  std::vector<std::int32_t> tokens;

  friend bool operator==(const TokenStream& a, const TokenStream& b) = default;
};

using SidMap = std::unordered_map<std::int64_t, SemanticId>;

// [BOS] + one segment per interaction + [EOS]. Throws MissingIdError for
// items absent from the map.
TokenStream flatten(const Trajectory& traj, const SidMap& sids, const Vocabulary& vocab);

// Inverse of flatten; items are resolved through the trie.
std::vector<Interaction> unflatten(const TokenStream& stream, const Vocabulary& vocab,
                                   const SidTrie& trie);

// Scoring interface used by the decoder.
class SlotScorer {
 public:
  virtual ~SlotScorer() = default;
  virtual const Vocabulary& vocab() const = 0;
  // log P over exactly the legal token set of the slot; exp-sums to 1.
  virtual std::vector<std::pair<std::int32_t, double>> slot_logits(
      std::span<const std::int32_t> context, Slot slot) const = 0;
};

class ScorerModel : public SlotScorer {
 public:
  ScorerModel() = default;
  ScorerModel(Vocabulary vocab, int order, double alpha)
      : vocab_(vocab), order_(order), alpha_(alpha), tables_(order + 1) {}

  static ScorerModel train(const Vocabulary& vocab, const std::vector<TokenStream>& corpus,
                           int order, double alpha);

  void add_stream(const TokenStream& stream);

  const Vocabulary& vocab() const override { return vocab_; }
  int order() const { return order_; }
  double alpha() const { return alpha_; }

  // Additive-smoothed conditional at the longest context suffix whose
  // legal-set total is nonzero: P = (count + a) / (total + a * |legal|).
  std::vector<std::pair<std::int32_t, double>> slot_logits(
      std::span<const std::int32_t> context, Slot slot) const override;

  double log_prob(std::span<const std::int32_t> context, Slot slot, std::int32_t token) const;

  // Mean negative log-likelihood per modeled token. BOS is context only and
  // EOS terminates the stream; neither is a modeled decision.
  double sequence_nll(const TokenStream& stream) const;

  void save(const std::string& path) const;
  static ScorerModel load(const std::string& path);

  friend bool operator==(const ScorerModel& a, const ScorerModel& b) {
    return a.vocab_ == b.vocab_ && a.order_ == b.order_ && a.alpha_ == b.alpha_ &&
           a.tables_ == b.tables_;
  }

 private:
  using NextCounts = std::map<std::int32_t, std::uint64_t>;
  // tables_[j]: context of j tokens (packed little-endian) -> counts.
  using Table = std::unordered_map<std::string, NextCounts>;

  static std::string pack_context(std::span<const std::int32_t> tokens);

  Vocabulary vocab_;
  int order_ = 0;
  double alpha_ = 0.1;
  std::vector<Table> tables_;
};

}  // namespace gemrec
