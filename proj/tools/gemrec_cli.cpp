// gemrec command-line pipeline: corpus synthesis, scorer training, single
// decode requests, lambda sweeps, bid-shock experiments, and the invariant
// audit suite. Every command is a pure function of (config, input files,
// seed); rerunning it reproduces its outputs byte for byte.
//
// Exit codes: 0 success, 1 input error, 2 audit failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gemrec/decoder.hpp"
#include "gemrec/eval.hpp"
#include "gemrec/io.hpp"
#include "gemrec/marketplace.hpp"
#include "gemrec/rng.hpp"
#include "gemrec/semantic_index.hpp"
#include "gemrec/seq_model.hpp"

namespace fs = std::filesystem;
using namespace gemrec;

namespace {

// Seed streams per pipeline stage.
enum SeedStream : std::uint64_t {
  kSeedEmbeddings = 1,
  kSeedQuantizer = 2,
  kSeedSponsored = 3,
  kSeedBids = 4,
  kSeedHistories = 5,
  kSeedTrajectories = 6,
  kSeedShock = 7,
};

struct CliOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> preset;
};

RunConfig resolve_config(const CliOptions& cli) {
  RunConfig config;
  if (cli.preset.has_value()) config.apply_preset(*cli.preset);
  if (!cli.config_path.empty()) config.load_file(cli.config_path);
  if (cli.preset.has_value() && !cli.config_path.empty()) {
    // Flag wins over the file's p/r so presets can be toggled per run.
    config.apply_preset(*cli.preset);
  }
  if (cli.seed.has_value()) config.seed = *cli.seed;
  if (cli.out_dir.has_value()) config.out_dir = *cli.out_dir;
  config.validate();
  return config;
}

std::string path_in(const RunConfig& config, const std::string& name) {
  return (fs::path(config.out_dir) / name).string();
}

void echo_config(const RunConfig& config, const std::string& command) {
  std::ofstream out(path_in(config, "config." + command + ".json"), std::ios::binary);
  out << config.to_json();
}

void designate_sponsored(Inventory& inv, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(inv.items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  const std::size_t n_sponsored = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(inv.items.size())));
  for (std::size_t i = 0; i < n_sponsored && i < order.size(); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(order.size() - i));
    std::swap(order[i], order[j]);
    inv.items[order[i]].sponsored = true;
  }
}

struct Environment {
  Vocabulary vocab;
  Inventory inventory;
  SidTrie trie{0};
  SidMap sid_map;
};

Environment load_environment(const RunConfig& config) {
  Environment env;
  const ItemsFile items = read_items_jsonl(path_in(config, "items.jsonl"));
  const auto sid_entries = read_sid_map_jsonl(path_in(config, "sid_map.jsonl"));
  const auto bids = read_bids_jsonl(path_in(config, "bids.jsonl"));

  std::int32_t max_disamb = 0;
  for (const auto& [id, sid] : sid_entries) max_disamb = std::max(max_disamb, sid.disamb);
  env.vocab = Vocabulary(config.depth, config.codebook_size,
                         static_cast<std::size_t>(max_disamb) + 1);

  for (const auto& [id, sid] : sid_entries) env.sid_map.emplace(id, sid);

  env.inventory.items.reserve(items.embeddings.size());
  for (std::size_t i = 0; i < items.embeddings.size(); ++i) {
    InventoryItem item;
    item.item_id = items.embeddings[i].item_id;
    item.sid = env.sid_map.at(item.item_id);
    item.sponsored = items.sponsored[i];
    if (item.sponsored) item.bid = bids.at(item.item_id);
    env.inventory.items.push_back(std::move(item));
  }
  env.inventory.rebuild_index();
  env.trie = build_trie(sid_entries, config.depth);
  return env;
}

std::vector<Trajectory> load_trajectories(const RunConfig& config) {
  return read_trajectories_jsonl(path_in(config, "trajectories.jsonl"));
}

int cmd_gen_data(const RunConfig& config) {
  fs::create_directories(config.out_dir);

  MixtureParams mix;
  mix.n_items = config.n_items;
  mix.dim = config.embed_dim;
  mix.n_categories = config.n_categories;
  mix.n_subcategories = config.n_subcategories;
  mix.category_spread = config.category_spread;
  mix.subcategory_spread = config.subcategory_spread;
  mix.noise = config.embed_noise;
  const std::vector<ItemEmbedding> embeddings =
      synth_mixture_embeddings(mix, derive_seed(config.seed, kSeedEmbeddings));

  const Codebooks codebooks = fit_residual_quantizer(
      embeddings, config.depth, config.codebook_size, config.kmeans_iterations,
      derive_seed(config.seed, kSeedQuantizer), config.exec());
  const std::vector<SemanticId> sids = assign_semantic_ids(embeddings, codebooks, config.exec());

  Inventory inv;
  inv.items.reserve(embeddings.size());
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    InventoryItem item;
    item.item_id = embeddings[i].item_id;
    item.sid = sids[i];
    inv.items.push_back(std::move(item));
  }
  inv.rebuild_index();
  designate_sponsored(inv, config.sponsored_fraction, derive_seed(config.seed, kSeedSponsored));
  assign_bids(inv, config.mu, config.sigma, derive_seed(config.seed, kSeedBids));

  HistoryParams hist;
  hist.n_users = config.n_users;
  hist.min_length = config.history_min;
  hist.max_length = config.history_max;
  hist.category_bias = config.category_bias;
  hist.popularity_skew = config.popularity_skew;
  const std::vector<Trajectory> organic =
      synth_organic_histories(hist, inv, derive_seed(config.seed, kSeedHistories), config.exec());

  PolicyParams policy;
  policy.prefix_depth = config.d;
  policy.tau = config.tau;
  policy.base_accept = config.p;
  policy.recovery = config.r;
  GenStats stats;
  const std::vector<Trajectory> trajectories = generate_trajectories(
      organic, inv, policy, derive_seed(config.seed, kSeedTrajectories), &stats, config.exec());

  ItemsFile items;
  items.embeddings = embeddings;
  items.sponsored.resize(inv.items.size());
  for (std::size_t i = 0; i < inv.items.size(); ++i) items.sponsored[i] = inv.items[i].sponsored;
  write_items_jsonl(path_in(config, "items.jsonl"), items);

  std::vector<std::pair<std::int64_t, SemanticId>> sid_entries;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    sid_entries.emplace_back(embeddings[i].item_id, sids[i]);
  }
  write_sid_map_jsonl(path_in(config, "sid_map.jsonl"), sid_entries);
  write_bids_jsonl(path_in(config, "bids.jsonl"), inv);
  write_trajectories_jsonl(path_in(config, "trajectories.jsonl"), trajectories);
  echo_config(config, "gen-data");

  std::cout << "items: " << inv.items.size() << " (sponsored "
            << inv.sponsored_indices().size() << ")\n"
            << "users: " << trajectories.size() << "\n"
            << "train ad %: " << format_double(100.0 * stats.ad_fraction()) << "\n";
  return 0;
}

int cmd_train(const RunConfig& config) {
  const Environment env = load_environment(config);
  const std::vector<Trajectory> trajectories = load_trajectories(config);
  const EvalSplit split = leave_last_out(trajectories, env.sid_map, env.vocab);

  const ScorerModel model =
      ScorerModel::train(env.vocab, split.train_streams, config.order, config.alpha);
  model.save(path_in(config, "model.bin"));
  echo_config(config, "train");

  const double nll = heldout_segment_nll(model, split.cases, env.inventory, config.exec());
  std::cout << "model: " << path_in(config, "model.bin") << "\n"
            << "held-out nll/token: " << format_double(nll) << "\n";
  return 0;
}

int cmd_decode(const RunConfig& config, const std::string& request_path) {
  const Environment env = load_environment(config);
  const ScorerModel model = ScorerModel::load(path_in(config, "model.bin"));
  const DecodeRequest req = read_decode_request(request_path);

  const BidLookup lookup =
      build_bid_lookup(env.trie, env.inventory, eligible_sponsored(env.inventory));

  DecodeConfig dc;
  dc.lambda = req.lambda;
  dc.beam_width = req.beam;
  dc.trie_constrained = config.trie_constrained;
  if (req.flag_mode == "sample") dc.flag_mode = FlagMode::sample;
  else if (req.flag_mode == "force_org") dc.flag_mode = FlagMode::force_org;
  else if (req.flag_mode == "force_ad") dc.flag_mode = FlagMode::force_ad;
  else throw ConfigError("unknown flag_mode in request: " + req.flag_mode);

  Rng rng(req.seed);
  const DecodeResult result =
      decode_next(model, req.context, dc, env.inventory, lookup, env.trie, rng);
  std::cout << decode_result_json(result) << "\n";
  return 0;
}

EvalOptions eval_options(const RunConfig& config) {
  EvalOptions opts;
  opts.metric_k = config.metric_k;
  opts.beam_width = config.beam_width;
  opts.trie_constrained = config.trie_constrained;
  opts.seed = config.seed;
  opts.exec = config.exec();
  return opts;
}

int cmd_sweep(const RunConfig& config) {
  const Environment env = load_environment(config);
  const ScorerModel model = ScorerModel::load(path_in(config, "model.bin"));
  const EvalSplit split = leave_last_out(load_trajectories(config), env.sid_map, env.vocab);
  const BidLookup lookup =
      build_bid_lookup(env.trie, env.inventory, eligible_sponsored(env.inventory));

  const std::vector<MetricsRow> rows = lambda_sweep(
      model, split.cases, env.inventory, lookup, env.trie, config.lambda_grid,
      eval_options(config));

  write_metrics_csv(path_in(config, "metrics.csv"), rows);
  write_plot_tsvs((fs::path(config.out_dir) / "plots").string(), rows);
  echo_config(config, "sweep");

  for (const MetricsRow& r : rows) {
    std::cout << "lambda " << format_double(r.lambda) << ": ad_rate "
              << format_double(r.ad_rate) << ", revenue " << format_double(r.revenue)
              << ", ndcg10 " << format_double(r.ndcg10) << "\n";
  }
  std::cout << "wrote " << path_in(config, "metrics.csv") << "\n";
  return 0;
}

int cmd_shock(const RunConfig& config) {
  const Environment env = load_environment(config);
  const ScorerModel model = ScorerModel::load(path_in(config, "model.bin"));
  const EvalSplit split = leave_last_out(load_trajectories(config), env.sid_map, env.vocab);

  const ShockOutcome outcome = shock_experiment(
      model, split.cases, env.inventory, env.trie, config.shock_lambdas,
      config.shock_fraction, config.shock_multiplier, derive_seed(config.seed, kSeedShock),
      eval_options(config));

  write_shock_csv(path_in(config, "shock.csv"), outcome.rows);
  echo_config(config, "shock");

  for (const ShockRow& r : outcome.rows) {
    std::cout << "lambda " << format_double(r.lambda) << ": ad_rate "
              << format_double(r.ad_rate) << ", hv_share "
              << (r.hv_share ? format_double(*r.hv_share) : std::string("NA")) << ", uplift "
              << (r.uplift ? format_double(*r.uplift) : std::string("NA")) << "\n";
  }
  std::cout << "wrote " << path_in(config, "shock.csv") << "\n";
  return 0;
}

int cmd_audit(const RunConfig& config) {
  const Environment env = load_environment(config);
  const ScorerModel model = ScorerModel::load(path_in(config, "model.bin"));
  const EvalSplit split = leave_last_out(load_trajectories(config), env.sid_map, env.vocab);
  const BidLookup lookup =
      build_bid_lookup(env.trie, env.inventory, eligible_sponsored(env.inventory));

  std::vector<std::vector<std::int32_t>> contexts;
  contexts.reserve(split.cases.size());
  for (const EvalCase& ec : split.cases) contexts.push_back(ec.context);

  AuditOptions opts;
  opts.seed = config.seed;
  opts.exec = config.exec();
  const AuditReport report =
      audit_suite(model, env.inventory, env.trie, lookup, contexts, opts);

  std::ofstream out(path_in(config, "audit.txt"), std::ios::binary);
  out << report.summary() << "\n";
  echo_config(config, "audit");
  std::cout << report.summary() << "\n";
  return report.pass() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bid-aware generative recommendation engine"};
  app.require_subcommand(1);

  CliOptions cli;
  app.add_option("--config", cli.config_path, "JSON config file");
  app.add_option("--seed", cli.seed, "global seed");
  app.add_option("--out", cli.out_dir, "artifact directory");
  app.add_option("--preset", cli.preset, "marketplace preset: main|high")
      ->check(CLI::IsMember({"main", "high"}));

  auto* gen = app.add_subcommand("gen-data", "synthesize items, bids, and trajectories");
  auto* train = app.add_subcommand("train", "train the scorer on generated trajectories");
  auto* decode = app.add_subcommand("decode", "answer a single decode request");
  std::string request_path;
  decode->add_option("--request", request_path, "decode request JSON file")->required();
  auto* sweep = app.add_subcommand("sweep", "lambda sweep with metrics and plot data");
  auto* shock = app.add_subcommand("shock", "bid-shock experiment");
  auto* audit = app.add_subcommand("audit", "run the invariant audit suite");

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig config = resolve_config(cli);
    if (gen->parsed()) return cmd_gen_data(config);
    if (train->parsed()) return cmd_train(config);
    if (decode->parsed()) return cmd_decode(config, request_path);
    if (sweep->parsed()) return cmd_sweep(config);
    if (shock->parsed()) return cmd_shock(config);
    if (audit->parsed()) return cmd_audit(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
