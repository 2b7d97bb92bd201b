#include "gemrec/io.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace gemrec {

using nlohmann::json;

FlagMode RunConfig::flag_mode_enum() const {
  if (flag_mode == "sample") return FlagMode::sample;
  if (flag_mode == "force_org") return FlagMode::force_org;
  if (flag_mode == "force_ad") return FlagMode::force_ad;
  throw ConfigError("unknown flag_mode: " + flag_mode);
}

void RunConfig::apply_preset(const std::string& name) {
  if (name == "main") {
    p = 0.4;
    r = 0.05;
  } else if (name == "high") {
    p = 1.0;
    r = 0.5;
  } else {
    throw ConfigError("unknown preset: " + name + " (expected main|high)");
  }
  preset = name;
}

namespace {

template <typename T>
void assign_key(const json& j, const std::string& key, T& out) {
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");

  // Preset first so explicit p/r keys can override it.
  if (j.contains("preset")) apply_preset(j.at("preset").get<std::string>());

  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key == "preset") continue;
    else if (key == "seed") assign_key(j, key, seed);
    else if (key == "out_dir") assign_key(j, key, out_dir);
    else if (key == "depth") assign_key(j, key, depth);
    else if (key == "codebook_size") assign_key(j, key, codebook_size);
    else if (key == "embed_dim") assign_key(j, key, embed_dim);
    else if (key == "kmeans_iterations") assign_key(j, key, kmeans_iterations);
    else if (key == "n_items") assign_key(j, key, n_items);
    else if (key == "n_categories") assign_key(j, key, n_categories);
    else if (key == "n_subcategories") assign_key(j, key, n_subcategories);
    else if (key == "category_spread") assign_key(j, key, category_spread);
    else if (key == "subcategory_spread") assign_key(j, key, subcategory_spread);
    else if (key == "embed_noise") assign_key(j, key, embed_noise);
    else if (key == "sponsored_fraction") assign_key(j, key, sponsored_fraction);
    else if (key == "mu") assign_key(j, key, mu);
    else if (key == "sigma") assign_key(j, key, sigma);
    else if (key == "tau") assign_key(j, key, tau);
    else if (key == "p") assign_key(j, key, p);
    else if (key == "r") assign_key(j, key, r);
    else if (key == "d") assign_key(j, key, d);
    else if (key == "shock_fraction") assign_key(j, key, shock_fraction);
    else if (key == "shock_multiplier") assign_key(j, key, shock_multiplier);
    else if (key == "shock_lambdas") assign_key(j, key, shock_lambdas);
    else if (key == "n_users") assign_key(j, key, n_users);
    else if (key == "history_min") assign_key(j, key, history_min);
    else if (key == "history_max") assign_key(j, key, history_max);
    else if (key == "category_bias") assign_key(j, key, category_bias);
    else if (key == "popularity_skew") assign_key(j, key, popularity_skew);
    else if (key == "order") assign_key(j, key, order);
    else if (key == "alpha") assign_key(j, key, alpha);
    else if (key == "lambda_grid") assign_key(j, key, lambda_grid);
    else if (key == "beam_width") assign_key(j, key, beam_width);
    else if (key == "flag_mode") assign_key(j, key, flag_mode);
    else if (key == "trie_constrained") assign_key(j, key, trie_constrained);
    else if (key == "metric_k") assign_key(j, key, metric_k);
    else if (key == "parallel") assign_key(j, key, parallel);
    else throw ConfigError("unknown config key: " + key);
  }
  validate();
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(depth >= 1, "depth must be >= 1");
  require(codebook_size >= 2, "codebook_size must be >= 2");
  require(embed_dim >= 2, "embed_dim must be >= 2");
  require(n_items > 0, "n_items must be positive");
  require(sponsored_fraction > 0.0 && sponsored_fraction <= 1.0,
          "sponsored_fraction must be in (0, 1]");
  require(tau > 0.0, "tau must be positive");
  require(p >= 0.0 && p <= 1.0, "p must be in [0, 1]");
  require(r > 0.0, "r must be positive");
  require(d >= 1 && d <= static_cast<int>(depth), "d must be in [1, depth]");
  require(history_min >= 1 && history_max >= history_min, "history length range invalid");
  require(category_bias >= 0.0 && category_bias <= 1.0, "category_bias must be in [0, 1]");
  require(order >= 0, "order must be >= 0");
  require(alpha > 0.0, "alpha must be positive");
  require(beam_width >= 1, "beam_width must be >= 1");
  require(metric_k >= 1, "metric_k must be >= 1");
  require(!lambda_grid.empty(), "lambda_grid must be nonempty");
  for (const double l : lambda_grid) require(l >= 0.0, "lambda values must be >= 0");
  for (const double l : shock_lambdas) require(l >= 0.0, "lambda values must be >= 0");
  require(shock_fraction > 0.0 && shock_fraction <= 1.0, "shock_fraction must be in (0, 1]");
  flag_mode_enum();  // throws on unknown mode
}

std::string RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["preset"] = preset;
  j["depth"] = depth;
  j["codebook_size"] = codebook_size;
  j["embed_dim"] = embed_dim;
  j["kmeans_iterations"] = kmeans_iterations;
  j["n_items"] = n_items;
  j["n_categories"] = n_categories;
  j["n_subcategories"] = n_subcategories;
  j["category_spread"] = category_spread;
  j["subcategory_spread"] = subcategory_spread;
  j["embed_noise"] = embed_noise;
  j["sponsored_fraction"] = sponsored_fraction;
  j["mu"] = mu;
  j["sigma"] = sigma;
  j["tau"] = tau;
  j["p"] = p;
  j["r"] = r;
  j["d"] = d;
  j["shock_fraction"] = shock_fraction;
  j["shock_multiplier"] = shock_multiplier;
  j["shock_lambdas"] = shock_lambdas;
  j["n_users"] = n_users;
  j["history_min"] = history_min;
  j["history_max"] = history_max;
  j["category_bias"] = category_bias;
  j["popularity_skew"] = popularity_skew;
  j["order"] = order;
  j["alpha"] = alpha;
  j["lambda_grid"] = lambda_grid;
  j["beam_width"] = beam_width;
  j["flag_mode"] = flag_mode;
  j["trie_constrained"] = trie_constrained;
  j["metric_k"] = metric_k;
  j["parallel"] = parallel;
  return j.dump(2) + "\n";
}

std::string format_double(double value) {
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, result.ptr);
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

}  // namespace

void write_items_jsonl(const std::string& path, const ItemsFile& items) {
  std::ofstream out = open_out(path);
  for (std::size_t i = 0; i < items.embeddings.size(); ++i) {
    json j;
    j["item_id"] = items.embeddings[i].item_id;
    j["embedding"] = items.embeddings[i].vec;
    j["sponsored"] = static_cast<bool>(items.sponsored[i]);
    out << j.dump() << "\n";
  }
}

ItemsFile read_items_jsonl(const std::string& path) {
  std::ifstream in = open_in(path);
  ItemsFile items;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    ItemEmbedding e;
    e.item_id = j.at("item_id").get<std::int64_t>();
    e.vec = j.at("embedding").get<std::vector<double>>();
    items.embeddings.push_back(std::move(e));
    items.sponsored.push_back(j.at("sponsored").get<bool>());
  }
  return items;
}

void write_sid_map_jsonl(const std::string& path,
                         const std::vector<std::pair<std::int64_t, SemanticId>>& items) {
  std::ofstream out = open_out(path);
  for (const auto& [item_id, sid] : items) {
    json j;
    j["item_id"] = item_id;
    j["codes"] = sid.codes;
    j["disamb"] = sid.disamb;
    out << j.dump() << "\n";
  }
}

std::vector<std::pair<std::int64_t, SemanticId>> read_sid_map_jsonl(const std::string& path) {
  std::ifstream in = open_in(path);
  std::vector<std::pair<std::int64_t, SemanticId>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    SemanticId sid;
    sid.codes = j.at("codes").get<std::vector<std::int32_t>>();
    sid.disamb = j.at("disamb").get<std::int32_t>();
    out.emplace_back(j.at("item_id").get<std::int64_t>(), std::move(sid));
  }
  return out;
}

void write_bids_jsonl(const std::string& path, const Inventory& inv) {
  std::ofstream out = open_out(path);
  for (const InventoryItem& item : inv.items) {
    if (!item.sponsored) continue;
    json j;
    j["item_id"] = item.item_id;
    j["bid"] = item.bid;
    out << j.dump() << "\n";
  }
}

std::unordered_map<std::int64_t, double> read_bids_jsonl(const std::string& path) {
  std::ifstream in = open_in(path);
  std::unordered_map<std::int64_t, double> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    out.emplace(j.at("item_id").get<std::int64_t>(), j.at("bid").get<double>());
  }
  return out;
}

void write_trajectories_jsonl(const std::string& path, const std::vector<Trajectory>& trajs) {
  std::ofstream out = open_out(path);
  for (const Trajectory& t : trajs) {
    json events = json::array();
    for (const Interaction& ev : t.events) {
      events.push_back({{"mode", ev.mode == Mode::sponsored ? "AD" : "ORG"},
                        {"item_id", ev.item_id}});
    }
    json j;
    j["user_id"] = t.user_id;
    j["events"] = std::move(events);
    out << j.dump() << "\n";
  }
}

std::vector<Trajectory> read_trajectories_jsonl(const std::string& path) {
  std::ifstream in = open_in(path);
  std::vector<Trajectory> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    Trajectory t;
    t.user_id = j.at("user_id").get<std::int64_t>();
    for (const json& ev : j.at("events")) {
      const std::string mode = ev.at("mode").get<std::string>();
      if (mode != "AD" && mode != "ORG") {
        throw std::runtime_error("bad mode '" + mode + "' in " + path);
      }
      t.events.push_back({mode == "AD" ? Mode::sponsored : Mode::organic,
                          ev.at("item_id").get<std::int64_t>()});
    }
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

std::string opt_cell(const std::optional<double>& value) {
  return value.has_value() ? format_double(*value) : "NA";
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out = open_out(path);
  out << "lambda,ad_rate,revenue,ndcg10,recall10,o_ndcg10,o_recall10,ad_ndcg10,"
         "mean_prefix_depth,validity,hv_share,seed\n";
  for (const MetricsRow& r : rows) {
    out << format_double(r.lambda) << ',' << format_double(r.ad_rate) << ','
        << format_double(r.revenue) << ',' << format_double(r.ndcg10) << ','
        << format_double(r.recall10) << ',' << opt_cell(r.o_ndcg10) << ','
        << opt_cell(r.o_recall10) << ',' << opt_cell(r.ad_ndcg10) << ','
        << opt_cell(r.mean_prefix_depth) << ',' << opt_cell(r.validity) << ','
        << opt_cell(r.hv_share) << ',' << r.seed << "\n";
  }
}

void write_plot_tsvs(const std::string& dir, const std::vector<MetricsRow>& rows) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out = open_out((fs::path(dir) / "pareto.tsv").string());
    for (const MetricsRow& r : rows) {
      out << format_double(r.revenue) << '\t' << format_double(r.ndcg10) << "\n";
    }
  }
  {
    std::ofstream out = open_out((fs::path(dir) / "steerability.tsv").string());
    for (const MetricsRow& r : rows) {
      out << format_double(r.lambda) << '\t' << format_double(r.ad_rate) << "\n";
    }
  }
  {
    std::ofstream out = open_out((fs::path(dir) / "integrity.tsv").string());
    for (const MetricsRow& r : rows) {
      out << format_double(r.ndcg10) << '\t' << opt_cell(r.o_ndcg10) << "\n";
    }
  }
  {
    std::ofstream out = open_out((fs::path(dir) / "quality.tsv").string());
    for (const MetricsRow& r : rows) {
      out << format_double(r.revenue) << '\t' << opt_cell(r.mean_prefix_depth) << "\n";
    }
  }
}

void write_shock_csv(const std::string& path, const std::vector<ShockRow>& rows) {
  std::ofstream out = open_out(path);
  out << "lambda,ad_rate,hv_share,revenue,uplift\n";
  for (const ShockRow& r : rows) {
    out << format_double(r.lambda) << ',' << format_double(r.ad_rate) << ','
        << opt_cell(r.hv_share) << ',' << format_double(r.revenue) << ','
        << opt_cell(r.uplift) << "\n";
  }
}

std::string decode_result_json(const DecodeResult& result) {
  json j;
  j["flag"] = result.is_ad ? "AD" : "ORG";
  j["codes"] = result.sid.codes;
  j["disamb"] = result.sid.disamb;
  j["item_id"] = result.item_id;
  j["base_score"] = result.base_score;
  j["mod_score"] = result.mod_score;
  j["p_ad_pre"] = result.p_ad_pre;
  j["p_ad_post"] = result.p_ad_post;
  j["price"] = result.price;
  return j.dump();
}

DecodeRequest read_decode_request(const std::string& path) {
  std::ifstream in = open_in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  DecodeRequest req;
  req.context = j.at("context").get<std::vector<std::int32_t>>();
  if (j.contains("lambda")) req.lambda = j.at("lambda").get<double>();
  if (j.contains("beam")) req.beam = j.at("beam").get<int>();
  if (j.contains("flag_mode")) req.flag_mode = j.at("flag_mode").get<std::string>();
  if (j.contains("seed")) req.seed = j.at("seed").get<std::uint64_t>();
  return req;
}

}  // namespace gemrec
