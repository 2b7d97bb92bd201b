#include "gemrec/seq_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace gemrec {

std::vector<std::int32_t> legal_tokens(const Vocabulary& vocab, Slot slot) {
  switch (slot.kind) {
    case Slot::Kind::flag:
      return {Vocabulary::kOrg, Vocabulary::kAd};
    case Slot::Kind::code: {
      std::vector<std::int32_t> out(vocab.codebook_size());
      for (std::size_t v = 0; v < vocab.codebook_size(); ++v) {
        out[v] = vocab.code_token(slot.level, static_cast<std::int32_t>(v));
      }
      return out;
    }
    case Slot::Kind::disamb: {
      std::vector<std::int32_t> out(vocab.disamb_count());
      for (std::size_t j = 0; j < vocab.disamb_count(); ++j) {
        out[j] = vocab.disamb_token(static_cast<std::int32_t>(j));
      }
      return out;
    }
  }
  return {};
}

Slot slot_after(const Vocabulary& vocab, std::int32_t prev_token) {
  if (prev_token == Vocabulary::kBos || vocab.is_disamb_token(prev_token)) return Slot::flag();
  if (prev_token == Vocabulary::kOrg || prev_token == Vocabulary::kAd) return Slot::code(0);
  if (vocab.is_code_token(prev_token)) {
    const std::size_t level = vocab.code_level(prev_token);
    return level + 1 < vocab.depth() ? Slot::code(level + 1) : Slot::disamb();
  }
  throw PositionError("token " + std::to_string(prev_token) + " cannot precede a slot");
}

TokenStream flatten(const Trajectory& traj, const SidMap& sids, const Vocabulary& vocab) {
  TokenStream stream;
  stream.tokens.reserve(2 + traj.events.size() * vocab.segment_length());
  stream.tokens.push_back(Vocabulary::kBos);
  for (const Interaction& ev : traj.events) {
    const auto it = sids.find(ev.item_id);
    if (it == sids.end()) {
      throw MissingIdError("no semantic id for item " + std::to_string(ev.item_id));
    }
    stream.tokens.push_back(ev.mode == Mode::sponsored ? Vocabulary::kAd : Vocabulary::kOrg);
    const SemanticId& sid = it->second;
    for (std::size_t k = 0; k < vocab.depth(); ++k) {
      stream.tokens.push_back(vocab.code_token(k, sid.codes[k]));
    }
    stream.tokens.push_back(vocab.disamb_token(sid.disamb));
  }
  stream.tokens.push_back(Vocabulary::kEos);
  return stream;
}

std::vector<Interaction> unflatten(const TokenStream& stream, const Vocabulary& vocab,
                                   const SidTrie& trie) {
  const std::size_t seg = vocab.segment_length();
  if (stream.tokens.size() < 2 || stream.tokens.front() != Vocabulary::kBos ||
      stream.tokens.back() != Vocabulary::kEos ||
      (stream.tokens.size() - 2) % seg != 0) {
    throw PositionError("malformed token stream");
  }
  std::vector<Interaction> out;
  for (std::size_t pos = 1; pos + 1 < stream.tokens.size(); pos += seg) {
    const std::int32_t flag = stream.tokens[pos];
    SemanticId sid;
    sid.codes.resize(vocab.depth());
    for (std::size_t k = 0; k < vocab.depth(); ++k) {
      sid.codes[k] = vocab.code_value(stream.tokens[pos + 1 + k]);
    }
    sid.disamb = vocab.disamb_value(stream.tokens[pos + 1 + vocab.depth()]);
    const auto item = trie.resolve(sid);
    if (!item.has_value()) throw MissingIdError("token segment resolves to no item");
    out.push_back({flag == Vocabulary::kAd ? Mode::sponsored : Mode::organic, *item});
  }
  return out;
}

std::string ScorerModel::pack_context(std::span<const std::int32_t> tokens) {
  std::string key(tokens.size() * 4, '\0');
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = static_cast<std::uint32_t>(tokens[i]);
    key[i * 4 + 0] = static_cast<char>(t & 0xff);
    key[i * 4 + 1] = static_cast<char>((t >> 8) & 0xff);
    key[i * 4 + 2] = static_cast<char>((t >> 16) & 0xff);
    key[i * 4 + 3] = static_cast<char>((t >> 24) & 0xff);
  }
  return key;
}

void ScorerModel::add_stream(const TokenStream& stream) {
  const auto& toks = stream.tokens;
  for (std::size_t pos = 1; pos < toks.size(); ++pos) {
    const std::int32_t target = toks[pos];
    if (target == Vocabulary::kEos) continue;
    const std::size_t max_j = std::min<std::size_t>(order_, pos);
    for (std::size_t j = 0; j <= max_j; ++j) {
      const std::string key = pack_context({toks.data() + pos - j, j});
      ++tables_[j][key][target];
    }
  }
}

ScorerModel ScorerModel::train(const Vocabulary& vocab, const std::vector<TokenStream>& corpus,
                               int order, double alpha) {
  ScorerModel model(vocab, order, alpha);
  for (const TokenStream& stream : corpus) model.add_stream(stream);
  return model;
}

std::vector<std::pair<std::int32_t, double>> ScorerModel::slot_logits(
    std::span<const std::int32_t> context, Slot slot) const {
  if (!context.empty()) {
    const Slot expected = slot_after(vocab_, context.back());
    if (!(expected == slot)) throw PositionError("slot kind inconsistent with context position");
  }

  const std::vector<std::int32_t> legal = legal_tokens(vocab_, slot);
  const double l = static_cast<double>(legal.size());

  // Longest context suffix with a nonzero legal-set total; an all-zero
  // order-0 table degrades to the uniform distribution.
  const NextCounts* counts = nullptr;
  double total = 0.0;
  const std::size_t max_j = std::min<std::size_t>(order_, context.size());
  for (std::size_t j = max_j + 1; j-- > 0;) {
    const std::string key = pack_context(context.subspan(context.size() - j, j));
    const auto it = tables_[j].find(key);
    if (it == tables_[j].end()) continue;
    double t = 0.0;
    for (const std::int32_t tok : legal) {
      const auto cit = it->second.find(tok);
      if (cit != it->second.end()) t += static_cast<double>(cit->second);
    }
    if (t > 0.0) {
      counts = &it->second;
      total = t;
      break;
    }
  }

  std::vector<std::pair<std::int32_t, double>> out;
  out.reserve(legal.size());
  const double denom = total + alpha_ * l;
  for (const std::int32_t tok : legal) {
    double c = 0.0;
    if (counts != nullptr) {
      const auto cit = counts->find(tok);
      if (cit != counts->end()) c = static_cast<double>(cit->second);
    }
    const double p = denom > 0.0 ? (c + alpha_) / denom : 1.0 / l;
    out.emplace_back(tok, std::log(p));
  }
  return out;
}

double ScorerModel::log_prob(std::span<const std::int32_t> context, Slot slot,
                             std::int32_t token) const {
  for (const auto& [tok, lp] : slot_logits(context, slot)) {
    if (tok == token) return lp;
  }
  throw std::invalid_argument("token " + std::to_string(token) + " not legal for slot");
}

double ScorerModel::sequence_nll(const TokenStream& stream) const {
  const auto& toks = stream.tokens;
  double nll = 0.0;
  std::size_t n = 0;
  for (std::size_t pos = 1; pos < toks.size(); ++pos) {
    if (toks[pos] == Vocabulary::kEos) continue;
    const Slot slot = slot_after(vocab_, toks[pos - 1]);
    nll -= log_prob({toks.data(), pos}, slot, toks[pos]);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("stream has no modeled tokens");
  return nll / static_cast<double>(n);
}

namespace {

constexpr char kMagic[] = "GEMREC-SCORER-1\n";

template <typename T>
void write_pod(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

}  // namespace

void ScorerModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic) - 1);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(vocab_.depth()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(vocab_.codebook_size()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(vocab_.disamb_count()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(order_));
  write_pod<double>(out, alpha_);

  for (int j = 0; j <= order_; ++j) {
    std::vector<const std::string*> keys;
    keys.reserve(tables_[j].size());
    for (const auto& [key, _] : tables_[j]) keys.push_back(&key);
    std::sort(keys.begin(), keys.end(),
              [](const std::string* a, const std::string* b) { return *a < *b; });
    write_pod<std::uint64_t>(out, keys.size());
    for (const std::string* key : keys) {
      out.write(key->data(), static_cast<std::streamsize>(key->size()));
      const NextCounts& next = tables_[j].at(*key);
      write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(next.size()));
      for (const auto& [tok, count] : next) {
        write_pod<std::int32_t>(out, tok);
        write_pod<std::uint64_t>(out, count);
      }
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

ScorerModel ScorerModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(path + " is not a GEMREC-SCORER-1 model file");
  }
  const auto depth = read_pod<std::uint32_t>(in);
  const auto codebook = read_pod<std::uint32_t>(in);
  const auto disamb = read_pod<std::uint32_t>(in);
  const auto order = read_pod<std::uint32_t>(in);
  const auto alpha = read_pod<double>(in);

  ScorerModel model(Vocabulary(depth, codebook, disamb), static_cast<int>(order), alpha);
  for (std::uint32_t j = 0; j <= order; ++j) {
    const auto n_contexts = read_pod<std::uint64_t>(in);
    for (std::uint64_t k = 0; k < n_contexts; ++k) {
      std::string key(j * 4, '\0');
      in.read(key.data(), static_cast<std::streamsize>(key.size()));
      const auto n_next = read_pod<std::uint32_t>(in);
      NextCounts next;
      for (std::uint32_t c = 0; c < n_next; ++c) {
        const auto tok = read_pod<std::int32_t>(in);
        const auto count = read_pod<std::uint64_t>(in);
        next.emplace(tok, count);
      }
      model.tables_[j].emplace(std::move(key), std::move(next));
    }
  }
  if (!in) throw std::runtime_error("truncated model file: " + path);
  return model;
}

}  // namespace gemrec
