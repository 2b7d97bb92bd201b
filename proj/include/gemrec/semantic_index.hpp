#pragma once

// Hierarchical semantic IDs: residual k-means quantization over item
// embeddings, collision disambiguation, and the prefix trie shared by
// decoding and bid aggregation.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gemrec/parallel.hpp"

namespace gemrec {

struct ItemEmbedding {
  std::int64_t item_id = 0;
  std::vector<double> vec;
};

// One code table per level; level k is fit on the residuals left after
// subtracting the assigned centroids of levels < k.
struct Codebooks {
  std::size_t dim = 0;            // E
  std::size_t codebook_size = 0;  // C
  // levels[k] is a row-major C x dim matrix.
  std::vector<std::vector<double>> levels;

  std::size_t depth() const { return levels.size(); }
  const double* centroid(std::size_t level, std::size_t code) const {
    return levels[level].data() + code * dim;
  }
};

struct SemanticId {
  std::vector<std::int32_t> codes;  // length D, each in [0, C)
  std::int32_t disamb = 0;

  friend bool operator==(const SemanticId& a, const SemanticId& b) {
    return a.codes == b.codes && a.disamb == b.disamb;
  }
  friend auto operator<=>(const SemanticId& a, const SemanticId& b) = default;
};

struct DegenerateCorpusError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Length of the longest common code prefix (disambiguator excluded).
int prefix_match_depth(const SemanticId& a, const SemanticId& b);

// Residual k-means. Level k runs seeded k-means++ plus Lloyd iterations on
// the residual vectors; empty clusters are reseeded to the point farthest
// from its assigned centroid. Deterministic for a fixed seed under both
// execution policies. Throws DegenerateCorpusError if any level has fewer
// distinct points than codebook_size.
Codebooks fit_residual_quantizer(const std::vector<ItemEmbedding>& embeddings,
                                 std::size_t depth, std::size_t codebook_size,
                                 std::size_t iterations, std::uint64_t seed,
                                 Exec exec = Exec::parallel);

// Coarse-to-fine assignment; per level the nearest centroid to the running
// residual, ties broken by lowest centroid index.
std::vector<std::int32_t> assign_codes(std::span<const double> vec, const Codebooks& cb);

// Assigns disambiguators 0,1,2,... within each group of identical code
// tuples, ordered by ascending item_id. Output is aligned with the input.
std::vector<SemanticId> disambiguate(
    const std::vector<std::pair<std::int64_t, std::vector<std::int32_t>>>& coded_items);

// Bulk assign + disambiguate over a corpus.
std::vector<SemanticId> assign_semantic_ids(const std::vector<ItemEmbedding>& embeddings,
                                            const Codebooks& cb, Exec exec = Exec::parallel);

// Prefix trie over full semantic IDs. Depth D code levels plus one
// disambiguation level; every item is reachable by exactly one path.
class SidTrie {
 public:
  struct Node {
    std::map<std::int32_t, std::uint32_t> children;  // code (or disamb) -> node index
    std::int64_t item_id = -1;                       // set on leaves only
    std::uint32_t item_count = 0;                    // items in this subtree
  };

  explicit SidTrie(std::size_t depth) : depth_(depth), nodes_(1) {}

  std::size_t depth() const { return depth_; }
  std::size_t item_count() const { return nodes_[0].item_count; }
  const Node& root() const { return nodes_[0]; }
  const Node& node(std::uint32_t idx) const { return nodes_[idx]; }

  // Throws std::invalid_argument on a duplicate (codes, disamb) pair.
  void insert(std::int64_t item_id, const SemanticId& sid);

  // Node reached by a code prefix (length 0..depth), or nullptr.
  const Node* find_prefix(std::span<const std::int32_t> codes) const;

  std::optional<std::int64_t> resolve(const SemanticId& sid) const;

  // All (item_id, SemanticId) leaves, sorted by code path then disambiguator.
  std::vector<std::pair<std::int64_t, SemanticId>> enumerate() const;

 private:
  std::size_t depth_;
  std::vector<Node> nodes_;
};

SidTrie build_trie(const std::vector<std::pair<std::int64_t, SemanticId>>& items,
                   std::size_t depth);

// Two-level Gaussian mixture (categories -> subcategories) used to
// synthesize item embeddings with real prefix semantics.
struct MixtureParams {
  std::size_t n_items = 2000;
  std::size_t dim = 16;
  std::size_t n_categories = 16;
  std::size_t n_subcategories = 4;
  double category_spread = 4.0;
  double subcategory_spread = 1.5;
  double noise = 0.5;
};

// Optionally reports the generating category label per item, for purity
// checks against the recovered level-1 codes.
std::vector<ItemEmbedding> synth_mixture_embeddings(const MixtureParams& params,
                                                    std::uint64_t seed,
                                                    std::vector<int>* categories = nullptr);

}  // namespace gemrec
