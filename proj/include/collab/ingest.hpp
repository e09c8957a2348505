#pragma once

// MovieLens-style ratings ingestion: parsing, population filtering,
// per-user genre binning, quantisation and replay / calibrated environments.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "collab/common.hpp"
#include "collab/environment.hpp"
#include "collab/rng.hpp"

namespace collab {

using ExternalId = std::int64_t;

struct RatingEntry {
  ExternalId user = 0;
  ExternalId item = 0;
  double stars = 0.0;
  std::int64_t timestamp = 0;

  bool operator==(const RatingEntry&) const = default;
};

struct RatingsLog {
  std::vector<RatingEntry> entries;
  /// Genre tags per item (from the movies file).
  std::unordered_map<ExternalId, std::vector<std::string>> genres;
  std::size_t malformed_rows = 0;

  bool has_tag(ExternalId item, std::string_view tag) const {
    auto it = genres.find(item);
    if (it == genres.end()) return false;
    return std::find(it->second.begin(), it->second.end(), tag) != it->second.end();
  }
};

struct RatingsFormat {
  char delimiter = ',';
  bool header = true;
  std::size_t max_malformed = 100;
};

namespace detail {

/// Splits one CSV line honouring double-quoted fields.
inline std::vector<std::string> split_csv(std::string_view line, char delimiter) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        fields.back() += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delimiter) {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

template <typename T>
std::optional<T> parse_number(std::string_view text) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) text.remove_suffix(1);
  if (text.empty()) return std::nullopt;
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace detail

/// Parses userId,movieId,rating,timestamp rows. Rows with the wrong column
/// count, non-numeric fields, stars outside [0.5, 5], negative timestamps or a
/// repeated (user, item) pair are skipped and counted; more than
/// `max_malformed` of them is an error.
inline RatingsLog load_ratings(std::istream& in, const RatingsFormat& format = {}) {
  RatingsLog log;
  std::set<std::pair<ExternalId, ExternalId>> seen;
  std::string line;
  bool first = true;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(std::move(line));
    if (first && format.header) {
      first = false;
      continue;
    }
    first = false;
    if (line.empty()) continue;
    const auto fields = detail::split_csv(line, format.delimiter);
    std::optional<RatingEntry> entry;
    if (fields.size() == 4) {
      auto user = detail::parse_number<ExternalId>(fields[0]);
      auto item = detail::parse_number<ExternalId>(fields[1]);
      auto stars = detail::parse_number<double>(fields[2]);
      auto ts = detail::parse_number<std::int64_t>(fields[3]);
      if (user && item && stars && ts && *stars >= 0.5 && *stars <= 5.0 && *ts >= 0 &&
          seen.emplace(*user, *item).second)
        entry = RatingEntry{*user, *item, *stars, *ts};
    }
    if (entry) {
      log.entries.push_back(*entry);
    } else if (++log.malformed_rows > format.max_malformed) {
      throw ParseError("ratings: more than " + std::to_string(format.max_malformed) +
                       " malformed rows (last at line " + std::to_string(line_no) + ")");
    }
  }
  return log;
}

inline RatingsLog load_ratings(const std::filesystem::path& path, const RatingsFormat& format = {}) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read ratings file " + path.string());
  return load_ratings(in, format);
}

/// Parses movieId,title,genres (genres pipe-delimited) into item -> tags.
inline std::unordered_map<ExternalId, std::vector<std::string>> load_genres(std::istream& in, bool header = true) {
  std::unordered_map<ExternalId, std::vector<std::string>> out;
  std::string line;
  bool first = true;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(std::move(line));
    if (first && header) {
      first = false;
      continue;
    }
    first = false;
    if (line.empty()) continue;
    const auto fields = detail::split_csv(line, ',');
    auto id = fields.size() >= 3 ? detail::parse_number<ExternalId>(fields[0]) : std::nullopt;
    if (!id) throw ParseError("movies: malformed row at line " + std::to_string(line_no));
    std::vector<std::string> tags;
    std::stringstream tokens(fields.back());
    for (std::string tag; std::getline(tokens, tag, '|');)
      if (!tag.empty()) tags.push_back(tag);
    out[*id] = std::move(tags);
  }
  return out;
}

inline std::unordered_map<ExternalId, std::vector<std::string>> load_genres(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read movies file " + path.string());
  return load_genres(in);
}

struct FilterOptions {
  std::size_t min_ratings = 225;
  double avg_low = 2.5;
  double avg_high = 3.5;
};

/// Keeps movies whose mean stars lie in [avg_low, avg_high], then users with
/// at least min_ratings remaining ratings; repeated until nothing changes.
inline RatingsLog filter_population(const RatingsLog& log, const FilterOptions& options = {}) {
  RatingsLog out = log;
  for (;;) {
    const std::size_t before = out.entries.size();
    std::unordered_map<ExternalId, std::pair<double, std::size_t>> movie;
    for (const auto& e : out.entries) {
      auto& [sum, n] = movie[e.item];
      sum += e.stars;
      ++n;
    }
    std::erase_if(out.entries, [&](const RatingEntry& e) {
      const auto& [sum, n] = movie[e.item];
      const double mean = sum / static_cast<double>(n);
      return mean < options.avg_low || mean > options.avg_high;
    });
    std::unordered_map<ExternalId, std::size_t> per_user;
    for (const auto& e : out.entries) ++per_user[e.user];
    std::erase_if(out.entries, [&](const RatingEntry& e) { return per_user[e.user] < options.min_ratings; });
    if (out.entries.size() == before) break;
  }
  return out;
}

struct GenrePair {
  std::string first = "Action";
  std::string second = "Romance";
};

struct PreferenceBin {
  std::size_t movies = 0;
  std::size_t first_count = 0;   // a_u
  std::size_t second_count = 0;  // r_u
  double p_first_only = 0.5;     // a/(a+r), 1/2 when a = r = 0
  double p_second_only = 0.5;    // r/(a+r), 1/2 when a = r = 0
  double p_both = 1.0;
  double p_neither = 0.0;
};

struct UserBins {
  ExternalId user = 0;
  std::vector<PreferenceBin> bins;
};

struct BinnedPreferences {
  GenrePair genres;
  std::vector<UserBins> users;
};

/// Per user: rated movies sorted by time (ties by movie id), split into `bins`
/// contiguous parts of equal size (earlier bins take the remainder), and
/// per-bin genre counts and class probabilities.
inline BinnedPreferences build_piecewise_preferences(const RatingsLog& log, std::size_t bins = 15,
                                                     const GenrePair& genres = {}) {
  if (bins == 0) throw ParameterError("bins must be positive");
  std::map<ExternalId, std::vector<const RatingEntry*>> by_user;
  for (const auto& e : log.entries) by_user[e.user].push_back(&e);
  BinnedPreferences out;
  out.genres = genres;
  for (auto& [user, rated] : by_user) {
    if (rated.size() < bins)
      throw ParameterError("user " + std::to_string(user) + " has " + std::to_string(rated.size()) +
                           " ratings, fewer than " + std::to_string(bins) + " bins");
    std::sort(rated.begin(), rated.end(), [](const RatingEntry* a, const RatingEntry* b) {
      return a->timestamp != b->timestamp ? a->timestamp < b->timestamp : a->item < b->item;
    });
    UserBins ub{user, {}};
    const std::size_t base = rated.size() / bins;
    const std::size_t extra = rated.size() % bins;
    std::size_t pos = 0;
    for (std::size_t b = 0; b < bins; ++b) {
      PreferenceBin bin;
      bin.movies = base + (b < extra ? 1 : 0);
      for (std::size_t k = 0; k < bin.movies; ++k, ++pos) {
        bin.first_count += log.has_tag(rated[pos]->item, genres.first);
        bin.second_count += log.has_tag(rated[pos]->item, genres.second);
      }
      const std::size_t total = bin.first_count + bin.second_count;
      if (total > 0) {
        bin.p_first_only = static_cast<double>(bin.first_count) / static_cast<double>(total);
        bin.p_second_only = static_cast<double>(bin.second_count) / static_cast<double>(total);
      }
      ub.bins.push_back(bin);
    }
    out.users.push_back(std::move(ub));
  }
  return out;
}

/// CSV: user,bin,a,r,p_action_only (bin is 1-based).
inline void write_binned_csv(std::ostream& out, const BinnedPreferences& prefs, const std::string& fingerprint,
                             std::uint64_t seed) {
  out << "# config_fingerprint=" << fingerprint << " seed=" << seed << '\n';
  out << "user,bin,a,r,p_action_only\n";
  for (const auto& u : prefs.users)
    for (std::size_t b = 0; b < u.bins.size(); ++b)
      out << u.user << ',' << (b + 1) << ',' << u.bins[b].first_count << ',' << u.bins[b].second_count << ','
          << nlohmann::json(u.bins[b].p_first_only).dump() << '\n';
}

/// Stars >= 4 -> +1, stars < 3 -> -1, [3, 4) -> 0.
inline int quantize_stars(double stars) {
  if (stars >= 4.0) return 1;
  if (stars < 3.0) return -1;
  return 0;
}

/// Dense user x item grid in {-1, 0, +1}; 0 also marks a missing rating.
struct QuantizedGrid {
  std::vector<ExternalId> users;
  std::vector<ExternalId> items;
  std::vector<std::int8_t> values;
  std::vector<std::uint8_t> rated;
  std::vector<std::size_t> user_counts;  // ratings per user (any star value)
  std::vector<std::size_t> item_counts;

  int at(std::size_t u, std::size_t i) const { return values.at(u * items.size() + i); }
};

inline QuantizedGrid quantize_ratings(const RatingsLog& log) {
  QuantizedGrid g;
  std::map<ExternalId, std::size_t> user_index;
  std::map<ExternalId, std::size_t> item_index;
  for (const auto& e : log.entries) {
    user_index.emplace(e.user, 0);
    item_index.emplace(e.item, 0);
  }
  for (auto& [id, idx] : user_index) {
    idx = g.users.size();
    g.users.push_back(id);
  }
  for (auto& [id, idx] : item_index) {
    idx = g.items.size();
    g.items.push_back(id);
  }
  g.values.assign(g.users.size() * g.items.size(), 0);
  g.rated.assign(g.values.size(), 0);
  g.user_counts.assign(g.users.size(), 0);
  g.item_counts.assign(g.items.size(), 0);
  for (const auto& e : log.entries) {
    const std::size_t u = user_index[e.user];
    const std::size_t i = item_index[e.item];
    g.values[u * g.items.size() + i] = static_cast<std::int8_t>(quantize_stars(e.stars));
    g.rated[u * g.items.size() + i] = 1;
    ++g.user_counts[u];
    ++g.item_counts[i];
  }
  return g;
}

/// Replay environment: responses are grid lookups (0 for missing ratings);
/// no ground-truth preferences.
class ReplayEnv final : public Environment {
 public:
  ReplayEnv(std::vector<ExternalId> users, std::vector<ExternalId> items, std::vector<std::int8_t> values)
      : users_(std::move(users)), items_(std::move(items)), values_(std::move(values)) {
    if (values_.size() != users_.size() * items_.size()) throw ParameterError("replay grid has the wrong size");
  }

  EnvKind kind() const override { return EnvKind::replay; }
  std::size_t n_users() const override { return users_.size(); }
  std::size_t n_items() const override { return items_.size(); }
  int respond(UserId u, ItemId i, Round) const override {
    if (u >= users_.size() || i >= items_.size()) throw ParameterError("replay query out of range");
    return values_[u * items_.size() + i];
  }

  const std::vector<ExternalId>& user_ids() const { return users_; }
  const std::vector<ExternalId>& item_ids() const { return items_; }

 private:
  std::vector<ExternalId> users_;
  std::vector<ExternalId> items_;
  std::vector<std::int8_t> values_;
};

namespace detail {
/// Indices of the `k` largest counts (ties -> smaller external id).
inline std::vector<std::size_t> top_by_count(const std::vector<std::size_t>& counts, const std::vector<ExternalId>& ids,
                                             std::size_t k) {
  std::vector<std::size_t> order(counts.size());
  for (std::size_t x = 0; x < order.size(); ++x) order[x] = x;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return counts[a] != counts[b] ? counts[a] > counts[b] : ids[a] < ids[b];
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}
}  // namespace detail

/// Top `top_n` users by rating count, then top `top_m` items by rating count
/// among those users.
inline ReplayEnv replay_env(const QuantizedGrid& grid, std::size_t top_n = 250, std::size_t top_m = 500) {
  if (grid.users.size() < top_n || grid.items.size() < top_m)
    throw ParameterError("replay_env: requested " + std::to_string(top_n) + " users x " + std::to_string(top_m) +
                         " items, available " + std::to_string(grid.users.size()) + " x " +
                         std::to_string(grid.items.size()));
  const auto users = detail::top_by_count(grid.user_counts, grid.users, top_n);
  std::vector<std::size_t> item_counts(grid.items.size(), 0);
  for (std::size_t u : users)
    for (std::size_t i = 0; i < grid.items.size(); ++i) item_counts[i] += grid.rated[u * grid.items.size() + i];
  const auto items = detail::top_by_count(item_counts, grid.items, top_m);
  std::vector<ExternalId> user_ids;
  std::vector<ExternalId> item_ids;
  std::vector<std::int8_t> values;
  for (std::size_t u : users) user_ids.push_back(grid.users[u]);
  for (std::size_t i : items) item_ids.push_back(grid.items[i]);
  for (std::size_t u : users)
    for (std::size_t i : items) values.push_back(static_cast<std::int8_t>(grid.at(u, i)));
  return ReplayEnv(std::move(user_ids), std::move(item_ids), std::move(values));
}

enum class ItemClass { first_only, second_only, both, neither };

/// Synthetic environment calibrated from binned genre preferences: user u at
/// round t likes item i with the probability of i's genre class in u's bin
/// min((t-1) / rounds_per_bin, bins-1).
class CalibratedEnv final : public Environment {
 public:
  CalibratedEnv(BinnedPreferences prefs, std::vector<ItemClass> item_classes, std::size_t rounds_per_bin,
                std::uint64_t seed)
      : prefs_(std::move(prefs)), classes_(std::move(item_classes)), rounds_per_bin_(rounds_per_bin), seed_(seed) {
    if (rounds_per_bin_ == 0) throw ParameterError("rounds_per_bin must be positive");
    for (const auto& u : prefs_.users)
      if (u.bins.empty()) throw ParameterError("calibrated env: user without bins");
  }

  static std::vector<ItemClass> classify(const RatingsLog& log, const std::vector<ExternalId>& items,
                                         const GenrePair& genres) {
    std::vector<ItemClass> out;
    for (ExternalId id : items) {
      const bool a = log.has_tag(id, genres.first);
      const bool r = log.has_tag(id, genres.second);
      out.push_back(a && r ? ItemClass::both : a ? ItemClass::first_only : r ? ItemClass::second_only : ItemClass::neither);
    }
    return out;
  }

  EnvKind kind() const override { return EnvKind::synthetic; }
  std::size_t n_users() const override { return prefs_.users.size(); }
  std::size_t n_items() const override { return classes_.size(); }

  std::optional<double> probability(UserId u, ItemId i, Round t) const override {
    const auto& bin = bin_at(u, t);
    switch (classes_.at(i)) {
      case ItemClass::first_only: return bin.p_first_only;
      case ItemClass::second_only: return bin.p_second_only;
      case ItemClass::both: return bin.p_both;
      case ItemClass::neither: return bin.p_neither;
    }
    return 0.0;
  }

  int respond(UserId u, ItemId i, Round t) const override {
    return counter_uniform(stream_key(seed_, "env/response", u, i)) < *probability(u, i, t) ? +1 : -1;
  }

  std::vector<Segment> segments(UserId u, std::size_t horizon) const override {
    std::vector<Segment> out;
    const std::size_t bins = prefs_.users.at(u).bins.size();
    for (Round start = 1; start <= horizon;) {
      const std::size_t bin = std::min((start - 1) / rounds_per_bin_, bins - 1);
      const Round end = bin + 1 == bins ? horizon : std::min(horizon, (bin + 1) * rounds_per_bin_);
      out.push_back({start, end});
      start = end + 1;
    }
    return out;
  }

 private:
  const PreferenceBin& bin_at(UserId u, Round t) const {
    const auto& bins = prefs_.users.at(u).bins;
    if (t == 0) throw ParameterError("rounds are 1-based");
    return bins[std::min((t - 1) / rounds_per_bin_, bins.size() - 1)];
  }

  BinnedPreferences prefs_;
  std::vector<ItemClass> classes_;
  std::size_t rounds_per_bin_;
  std::uint64_t seed_;
};

}  // namespace collab
