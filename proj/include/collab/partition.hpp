#pragma once

// Threshold-based user partitioning from shared test responses and the
// cluster-matching variation detector.

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "collab/common.hpp"

namespace collab {

/// Responses of `users` (rows) to the test `items` (columns), each +1 or -1.
struct ResponseTable {
  std::vector<UserId> users;
  std::vector<ItemId> items;
  std::vector<std::vector<int>> responses;

  std::size_t length() const { return items.size(); }
};

/// Disjoint clusters covering `universe`. Canonical form: members sorted,
/// clusters ordered by smallest member, universe sorted.
struct Partition {
  std::vector<std::vector<UserId>> clusters;
  std::vector<UserId> universe;

  static Partition make(std::vector<std::vector<UserId>> clusters) {
    Partition p;
    for (auto& c : clusters) {
      std::sort(c.begin(), c.end());
      p.universe.insert(p.universe.end(), c.begin(), c.end());
    }
    std::erase_if(clusters, [](const auto& c) { return c.empty(); });
    std::sort(clusters.begin(), clusters.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
    std::sort(p.universe.begin(), p.universe.end());
    if (std::adjacent_find(p.universe.begin(), p.universe.end()) != p.universe.end())
      throw ParameterError("partition clusters overlap");
    p.clusters = std::move(clusters);
    return p;
  }

  static Partition single(std::vector<UserId> users) {
    if (users.empty()) return {};
    return make({std::move(users)});
  }

  /// Cluster index per user in the universe.
  std::map<UserId, std::size_t> index() const {
    std::map<UserId, std::size_t> out;
    for (std::size_t c = 0; c < clusters.size(); ++c)
      for (UserId u : clusters[c]) out[u] = c;
    return out;
  }

  bool operator==(const Partition&) const = default;
};

/// Partition built from a label per user (users with equal labels together).
inline Partition partition_from_labels(std::span<const UserId> users, std::span<const std::size_t> labels) {
  std::map<std::size_t, std::vector<UserId>> groups;
  for (std::size_t k = 0; k < users.size(); ++k) groups[labels[k]].push_back(users[k]);
  std::vector<std::vector<UserId>> clusters;
  for (auto& [label, members] : groups) clusters.push_back(std::move(members));
  return Partition::make(std::move(clusters));
}

/// X_uv: number of coordinates on which the two response rows agree.
inline std::size_t same_response_count(std::span<const int> row_u, std::span<const int> row_v) {
  if (row_u.size() != row_v.size()) throw ParameterError("response rows differ in length");
  std::size_t x = 0;
  for (std::size_t k = 0; k < row_u.size(); ++k) x += row_u[k] == row_v[k];
  return x;
}

namespace detail {

struct DisjointSets {
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
  std::vector<std::size_t> parent;
};

/// Connected components over positions [0, n) plus a completeness flag.
template <typename EdgePredicate>
std::pair<std::vector<std::vector<std::size_t>>, bool> components(std::size_t n, EdgePredicate&& edge) {
  DisjointSets sets(n);
  std::vector<std::size_t> degree(n, 0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      if (edge(a, b)) {
        sets.unite(a, b);
        ++degree[a];
        ++degree[b];
      }
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t a = 0; a < n; ++a) groups[sets.find(a)].push_back(a);
  std::vector<std::vector<std::size_t>> out;
  bool complete = true;
  for (auto& [root, members] : groups) {
    // A component is a clique iff each member is adjacent to all others.
    for (std::size_t a : members) complete = complete && degree[a] + 1 == members.size();
    out.push_back(std::move(members));
  }
  return {std::move(out), complete};
}

}  // namespace detail

/// True iff every connected component of (users, edge) is complete.
/// `edge` is called on pairs of user ids and must be symmetric.
template <typename EdgePredicate>
bool validate_clique_union(std::span<const UserId> users, EdgePredicate&& edge) {
  return detail::components(users.size(), [&](std::size_t a, std::size_t b) { return edge(users[a], users[b]); })
      .second;
}

/// Edges E_uv = 1[X_uv >= lambda * L]. Returns the components when the edge
/// graph is a disjoint union of cliques, otherwise one cluster of all users.
inline Partition cosine_test(const ResponseTable& table, double lambda) {
  const std::size_t n = table.users.size();
  if (table.responses.size() != n) throw ParameterError("response table rows != users");
  for (const auto& row : table.responses)
    if (row.size() != table.length()) throw ParameterError("response table row has wrong length");
  const double threshold = lambda * static_cast<double>(table.length());
  std::vector<std::vector<char>> adjacent(n, std::vector<char>(n, 0));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      adjacent[a][b] = adjacent[b][a] =
          static_cast<double>(same_response_count(table.responses[a], table.responses[b])) >= threshold;
  auto [groups, is_clique_union] = detail::components(n, [&](std::size_t a, std::size_t b) { return adjacent[a][b] != 0; });
  if (!is_clique_union) return Partition::single(table.users);
  std::vector<std::vector<UserId>> clusters;
  for (const auto& g : groups) {
    std::vector<UserId> c;
    for (std::size_t pos : g) c.push_back(table.users[pos]);
    clusters.push_back(std::move(c));
  }
  return Partition::make(std::move(clusters));
}

/// Matches each cluster C of `current` to the unique cluster C' of `reference`
/// with |C n C'| >= |C|/2. If the matching is not a well-defined injection
/// (no candidate, several candidates, or two clusters claiming one target),
/// returns the empty set. Otherwise returns users whose matched reference
/// cluster differs from the reference cluster that contains them.
inline std::vector<UserId> detect_variation(const Partition& current, const Partition& reference) {
  const auto ref_index = reference.index();
  for (UserId u : current.universe)
    if (!ref_index.contains(u)) throw ParameterError("detect_variation: user outside the reference universe");
  std::vector<std::size_t> target(current.clusters.size());
  std::vector<char> claimed(reference.clusters.size(), 0);
  for (std::size_t c = 0; c < current.clusters.size(); ++c) {
    std::vector<std::size_t> overlap(reference.clusters.size(), 0);
    for (UserId u : current.clusters[c]) ++overlap[ref_index.at(u)];
    std::size_t candidates = 0;
    for (std::size_t r = 0; r < overlap.size(); ++r)
      if (2 * overlap[r] >= current.clusters[c].size()) {
        ++candidates;
        target[c] = r;
      }
    if (candidates != 1 || claimed[target[c]]) return {};
    claimed[target[c]] = 1;
  }
  std::vector<UserId> moved;
  for (std::size_t c = 0; c < current.clusters.size(); ++c)
    for (UserId u : current.clusters[c])
      if (ref_index.at(u) != target[c]) moved.push_back(u);
  std::sort(moved.begin(), moved.end());
  return moved;
}

}  // namespace collab
