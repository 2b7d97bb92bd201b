#include "gemrec/semantic_index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "gemrec/rng.hpp"

namespace gemrec {

int prefix_match_depth(const SemanticId& a, const SemanticId& b) {
  const std::size_t depth = std::min(a.codes.size(), b.codes.size());
  int match = 0;
  for (std::size_t k = 0; k < depth; ++k) {
    if (a.codes[k] != b.codes[k]) break;
    ++match;
  }
  return match;
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t dim) {
  double acc = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// Nearest centroid by squared distance, ties broken by lowest index.
std::size_t nearest(const double* point, const std::vector<double>& centroids,
                    std::size_t n_centroids, std::size_t dim) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n_centroids; ++c) {
    const double d = sq_dist(point, centroids.data() + c * dim, dim);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::size_t count_distinct(const std::vector<double>& points, std::size_t n, std::size_t dim) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(points.data() + a * dim, points.data() + (a + 1) * dim,
                                        points.data() + b * dim, points.data() + (b + 1) * dim);
  };
  std::sort(order.begin(), order.end(), less);
  std::size_t distinct = n == 0 ? 0 : 1;
  for (std::size_t i = 1; i < n; ++i) {
    if (less(order[i - 1], order[i])) ++distinct;
  }
  return distinct;
}

// Seeded k-means++ over the point set. Duplicate points of an already
// chosen centroid carry zero weight, so the k seeds are always distinct
// provided the distinct-point precondition holds.
std::vector<double> kmeanspp_init(const std::vector<double>& points, std::size_t n,
                                  std::size_t dim, std::size_t k, Rng& rng, Exec exec) {
  std::vector<double> centroids(k * dim);
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());

  const std::size_t first = static_cast<std::size_t>(rng.uniform_index(n));
  std::copy_n(points.data() + first * dim, dim, centroids.data());

  for (std::size_t c = 1; c < k; ++c) {
    const double* last = centroids.data() + (c - 1) * dim;
    parallel_for(n, exec, [&](std::size_t i) {
      const double d = sq_dist(points.data() + i * dim, last, dim);
      if (d < min_d[i]) min_d[i] = d;
    });
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += min_d[i];
    double target = rng.uniform01() * total;
    std::size_t pick = SIZE_MAX;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d[i] <= 0.0) continue;
      last_positive = i;
      target -= min_d[i];
      if (target <= 0.0) {
        pick = i;
        break;
      }
    }
    if (pick == SIZE_MAX) pick = last_positive;
    std::copy_n(points.data() + pick * dim, dim, centroids.data() + c * dim);
  }
  return centroids;
}

// One level of Lloyd iterations. Assignment is the parallel kernel; the
// centroid accumulation stays serial in point order so results do not
// depend on thread count.
void lloyd(const std::vector<double>& points, std::size_t n, std::size_t dim,
           std::vector<double>& centroids, std::size_t k, std::size_t iterations,
           std::vector<std::size_t>& assign, Exec exec) {
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);
  std::vector<std::size_t> prev(n, SIZE_MAX);

  for (std::size_t it = 0; it < iterations; ++it) {
    parallel_for(n, exec, [&](std::size_t i) {
      assign[i] = nearest(points.data() + i * dim, centroids, k, dim);
    });

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = assign[i];
      ++counts[c];
      double* s = sums.data() + c * dim;
      const double* p = points.data() + i * dim;
      for (std::size_t j = 0; j < dim; ++j) s[j] += p[j];
    }

    // Reseed empty clusters to the point farthest from its assigned
    // centroid, lowest cluster index first, ties by lowest point index.
    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far_i = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        const double d =
            sq_dist(points.data() + i * dim, centroids.data() + assign[i] * dim, dim);
        if (d > far_d) {
          far_d = d;
          far_i = i;
        }
      }
      taken[far_i] = true;
      const std::size_t old = assign[far_i];
      --counts[old];
      {
        double* s = sums.data() + old * dim;
        const double* p = points.data() + far_i * dim;
        for (std::size_t j = 0; j < dim; ++j) s[j] -= p[j];
      }
      std::copy_n(points.data() + far_i * dim, dim, centroids.data() + c * dim);
      assign[far_i] = c;
      counts[c] = 1;
      std::copy_n(points.data() + far_i * dim, dim, sums.data() + c * dim);
    }

    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      const double inv = 1.0 / static_cast<double>(counts[c]);
      double* ctr = centroids.data() + c * dim;
      const double* s = sums.data() + c * dim;
      for (std::size_t j = 0; j < dim; ++j) ctr[j] = s[j] * inv;
    }

    if (assign == prev) break;
    prev = assign;
  }

  // Final assignment against the updated centroids.
  parallel_for(n, exec, [&](std::size_t i) {
    assign[i] = nearest(points.data() + i * dim, centroids, k, dim);
  });
}

}  // namespace

Codebooks fit_residual_quantizer(const std::vector<ItemEmbedding>& embeddings,
                                 std::size_t depth, std::size_t codebook_size,
                                 std::size_t iterations, std::uint64_t seed, Exec exec) {
  if (embeddings.empty()) throw DegenerateCorpusError("empty embedding corpus");
  if (depth < 1) throw std::invalid_argument("depth must be >= 1");
  const std::size_t n = embeddings.size();
  const std::size_t dim = embeddings[0].vec.size();
  for (const auto& e : embeddings) {
    if (e.vec.size() != dim) throw std::invalid_argument("inconsistent embedding dimension");
  }

  std::vector<double> residuals(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(embeddings[i].vec.begin(), embeddings[i].vec.end(), residuals.data() + i * dim);
  }

  Codebooks cb;
  cb.dim = dim;
  cb.codebook_size = codebook_size;
  cb.levels.reserve(depth);

  Rng rng(seed);
  std::vector<std::size_t> assign(n);

  for (std::size_t level = 0; level < depth; ++level) {
    if (count_distinct(residuals, n, dim) < codebook_size) {
      throw DegenerateCorpusError("level " + std::to_string(level) + ": fewer than " +
                                  std::to_string(codebook_size) + " distinct points");
    }
    std::vector<double> centroids = kmeanspp_init(residuals, n, dim, codebook_size, rng, exec);
    lloyd(residuals, n, dim, centroids, codebook_size, iterations, assign, exec);

    parallel_for(n, exec, [&](std::size_t i) {
      const double* ctr = centroids.data() + assign[i] * dim;
      double* r = residuals.data() + i * dim;
      for (std::size_t j = 0; j < dim; ++j) r[j] -= ctr[j];
    });
    cb.levels.push_back(std::move(centroids));
  }
  return cb;
}

std::vector<std::int32_t> assign_codes(std::span<const double> vec, const Codebooks& cb) {
  if (vec.size() != cb.dim) throw std::invalid_argument("embedding dimension mismatch");
  std::vector<double> residual(vec.begin(), vec.end());
  std::vector<std::int32_t> codes(cb.depth());
  for (std::size_t level = 0; level < cb.depth(); ++level) {
    const std::size_t c = nearest(residual.data(), cb.levels[level], cb.codebook_size, cb.dim);
    codes[level] = static_cast<std::int32_t>(c);
    const double* ctr = cb.centroid(level, c);
    for (std::size_t j = 0; j < cb.dim; ++j) residual[j] -= ctr[j];
  }
  return codes;
}

std::vector<SemanticId> disambiguate(
    const std::vector<std::pair<std::int64_t, std::vector<std::int32_t>>>& coded_items) {
  // Group indexes by code tuple; within a group, disambiguators follow
  // ascending item_id, so the result is invariant to input order.
  std::map<std::vector<std::int32_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < coded_items.size(); ++i) {
    groups[coded_items[i].second].push_back(i);
  }
  std::vector<SemanticId> out(coded_items.size());
  for (auto& [codes, members] : groups) {
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return coded_items[a].first < coded_items[b].first;
    });
    for (std::size_t rank = 0; rank < members.size(); ++rank) {
      out[members[rank]] = SemanticId{codes, static_cast<std::int32_t>(rank)};
    }
  }
  return out;
}

std::vector<SemanticId> assign_semantic_ids(const std::vector<ItemEmbedding>& embeddings,
                                            const Codebooks& cb, Exec exec) {
  std::vector<std::pair<std::int64_t, std::vector<std::int32_t>>> coded(embeddings.size());
  parallel_for(embeddings.size(), exec, [&](std::size_t i) {
    coded[i] = {embeddings[i].item_id, assign_codes(embeddings[i].vec, cb)};
  });
  return disambiguate(coded);
}

void SidTrie::insert(std::int64_t item_id, const SemanticId& sid) {
  if (sid.codes.size() != depth_) throw std::invalid_argument("semantic id depth mismatch");
  std::uint32_t cur = 0;
  auto descend = [&](std::int32_t key) {
    auto it = nodes_[cur].children.find(key);
    if (it == nodes_[cur].children.end()) {
      nodes_.push_back(Node{});
      const auto idx = static_cast<std::uint32_t>(nodes_.size() - 1);
      nodes_[cur].children.emplace(key, idx);
      cur = idx;
    } else {
      cur = it->second;
    }
  };

  std::vector<std::uint32_t> path{0};
  for (const std::int32_t c : sid.codes) {
    descend(c);
    path.push_back(cur);
  }
  descend(sid.disamb);
  path.push_back(cur);

  if (nodes_[cur].item_id >= 0) {
    throw std::invalid_argument("duplicate semantic id for item " + std::to_string(item_id));
  }
  nodes_[cur].item_id = item_id;
  for (const std::uint32_t idx : path) ++nodes_[idx].item_count;
}

const SidTrie::Node* SidTrie::find_prefix(std::span<const std::int32_t> codes) const {
  std::uint32_t cur = 0;
  for (const std::int32_t c : codes) {
    auto it = nodes_[cur].children.find(c);
    if (it == nodes_[cur].children.end()) return nullptr;
    cur = it->second;
  }
  return &nodes_[cur];
}

std::optional<std::int64_t> SidTrie::resolve(const SemanticId& sid) const {
  const Node* n = find_prefix(sid.codes);
  if (n == nullptr) return std::nullopt;
  auto it = n->children.find(sid.disamb);
  if (it == n->children.end()) return std::nullopt;
  const std::int64_t id = nodes_[it->second].item_id;
  if (id < 0) return std::nullopt;
  return id;
}

std::vector<std::pair<std::int64_t, SemanticId>> SidTrie::enumerate() const {
  std::vector<std::pair<std::int64_t, SemanticId>> out;
  out.reserve(item_count());
  std::vector<std::int32_t> codes;
  auto walk = [&](auto&& self, std::uint32_t idx, std::size_t level) -> void {
    if (level == depth_) {
      for (const auto& [disamb, child] : nodes_[idx].children) {
        out.emplace_back(nodes_[child].item_id, SemanticId{codes, disamb});
      }
      return;
    }
    for (const auto& [code, child] : nodes_[idx].children) {
      codes.push_back(code);
      self(self, child, level + 1);
      codes.pop_back();
    }
  };
  walk(walk, 0, 0);
  return out;
}

SidTrie build_trie(const std::vector<std::pair<std::int64_t, SemanticId>>& items,
                   std::size_t depth) {
  SidTrie trie(depth);
  for (const auto& [item_id, sid] : items) trie.insert(item_id, sid);
  return trie;
}

std::vector<ItemEmbedding> synth_mixture_embeddings(const MixtureParams& params,
                                                    std::uint64_t seed,
                                                    std::vector<int>* categories) {
  Rng rng(seed);
  const std::size_t dim = params.dim;

  std::vector<double> cat_means(params.n_categories * dim);
  for (double& v : cat_means) v = params.category_spread * rng.normal();

  std::vector<double> sub_means(params.n_categories * params.n_subcategories * dim);
  for (std::size_t c = 0; c < params.n_categories; ++c) {
    for (std::size_t s = 0; s < params.n_subcategories; ++s) {
      double* sub = sub_means.data() + (c * params.n_subcategories + s) * dim;
      const double* cat = cat_means.data() + c * dim;
      for (std::size_t j = 0; j < dim; ++j) {
        sub[j] = cat[j] + params.subcategory_spread * rng.normal();
      }
    }
  }

  std::vector<ItemEmbedding> out(params.n_items);
  if (categories != nullptr) categories->assign(params.n_items, 0);
  for (std::size_t i = 0; i < params.n_items; ++i) {
    const std::size_t c = static_cast<std::size_t>(rng.uniform_index(params.n_categories));
    const std::size_t s = static_cast<std::size_t>(rng.uniform_index(params.n_subcategories));
    const double* sub = sub_means.data() + (c * params.n_subcategories + s) * dim;
    out[i].item_id = static_cast<std::int64_t>(i);
    out[i].vec.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      out[i].vec[j] = sub[j] + params.noise * rng.normal();
    }
    if (categories != nullptr) (*categories)[i] = static_cast<int>(c);
  }
  return out;
}

}  // namespace gemrec
