#pragma once

// File formats and run configuration. All artifact files are deterministic
// byte-for-byte given the same inputs: JSON lines for items / semantic-id
// maps / bids / trajectories, a pinned-column CSV for sweep metrics, and
// two-column TSVs for plot data. Doubles are printed with shortest
// round-trip formatting.

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gemrec/eval.hpp"
#include "gemrec/marketplace.hpp"
#include "gemrec/semantic_index.hpp"

namespace gemrec {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Fully-resolved run configuration. Unknown keys in a config file are
// rejected; every run writes the resolved config next to its artifacts.
struct RunConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "out";
  std::string preset = "main";

  // semantic index
  std::size_t depth = 3;            // D
  std::size_t codebook_size = 16;   // C
  std::size_t embed_dim = 16;       // E
  std::size_t kmeans_iterations = 50;

  // synthetic embedding mixture
  std::size_t n_items = 2000;
  std::size_t n_categories = 16;
  std::size_t n_subcategories = 8;
  double category_spread = 4.0;
  double subcategory_spread = 3.0;
  double embed_noise = 2.0;

  // marketplace
  double sponsored_fraction = 0.20;
  double mu = 0.0;
  double sigma = 0.2;
  double tau = 0.1;
  double p = 0.4;
  double r = 0.05;
  int d = 2;
  double shock_fraction = 0.05;
  double shock_multiplier = 10.0;
  std::vector<double> shock_lambdas = {0.0, 0.5, 1.0, 2.0};

  // organic histories
  std::size_t n_users = 5000;
  int history_min = 5;
  int history_max = 14;
  double category_bias = 0.99;
  double popularity_skew = 2.8;

  // scorer
  int order = 4;      // m
  double alpha = 0.25;

  // decoding / evaluation
  std::vector<double> lambda_grid = {0.0, 0.5, 1.0, 2.0, 5.0, 7.5, 10.0};
  int beam_width = 10;
  std::string flag_mode = "sample";
  bool trie_constrained = true;
  int metric_k = 10;
  bool parallel = true;

  Exec exec() const { return parallel ? Exec::parallel : Exec::serial; }
  FlagMode flag_mode_enum() const;

  // Applies "main" or "high" marketplace presets (p/r pairs).
  void apply_preset(const std::string& name);

  // Loads keys from a JSON object file over the current values; throws
  // ConfigError on unknown keys or invalid values.
  void load_file(const std::string& path);
  void validate() const;

  std::string to_json() const;  // resolved-config echo
};

// Shortest round-trip decimal representation.
std::string format_double(double value);

struct ItemsFile {
  std::vector<ItemEmbedding> embeddings;
  std::vector<bool> sponsored;
};

void write_items_jsonl(const std::string& path, const ItemsFile& items);
ItemsFile read_items_jsonl(const std::string& path);

void write_sid_map_jsonl(const std::string& path,
                         const std::vector<std::pair<std::int64_t, SemanticId>>& items);
std::vector<std::pair<std::int64_t, SemanticId>> read_sid_map_jsonl(const std::string& path);

void write_bids_jsonl(const std::string& path, const Inventory& inv);
std::unordered_map<std::int64_t, double> read_bids_jsonl(const std::string& path);

void write_trajectories_jsonl(const std::string& path, const std::vector<Trajectory>& trajs);
std::vector<Trajectory> read_trajectories_jsonl(const std::string& path);

// Column order is pinned: lambda, ad_rate, revenue, ndcg10, recall10,
// o_ndcg10, o_recall10, ad_ndcg10, mean_prefix_depth, validity, hv_share,
// seed. Undefined metrics print as NA.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// Two-column TSVs per figure: pareto (revenue, ndcg10), steerability
// (lambda, ad_rate), integrity (ndcg10, o_ndcg10), quality (revenue,
// mean_prefix_depth).
void write_plot_tsvs(const std::string& dir, const std::vector<MetricsRow>& rows);

void write_shock_csv(const std::string& path, const std::vector<ShockRow>& rows);

std::string decode_result_json(const DecodeResult& result);

struct DecodeRequest {
  std::vector<std::int32_t> context;
  double lambda = 0.0;
  int beam = 10;
  std::string flag_mode = "sample";
  std::uint64_t seed = 0;
};

DecodeRequest read_decode_request(const std::string& path);

}  // namespace gemrec
