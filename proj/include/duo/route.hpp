#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "duo/tensor.hpp"

namespace duo {

// Per-layer dispatch choice for one position. The enum order defines the
// canonical lexicographic order (Small < Big < Skip) used for enumeration
// and tie-breaking throughout.
enum class RouteChoice : std::uint8_t { Small = 0, Big = 1, Skip = 2 };

inline char route_char(RouteChoice c) {
  switch (c) {
    case RouteChoice::Small: return 's';
    case RouteChoice::Big: return 'b';
    case RouteChoice::Skip: return 'k';
  }
  return '?';
}

inline RouteChoice route_from_char(char c) {
  switch (c) {
    case 's': return RouteChoice::Small;
    case 'b': return RouteChoice::Big;
    case 'k': return RouteChoice::Skip;
  }
  throw ContractError(std::string("invalid route character '") + c + "'");
}

using LayerRoutes = std::vector<RouteChoice>;  // one choice per layer

// positions x n_layers matrix of choices.
struct RouteSpec {
  std::size_t n_layers = 0;
  std::vector<RouteChoice> entries;  // row-major, positions x n_layers

  RouteSpec() = default;
  RouteSpec(std::size_t positions, std::size_t layers, RouteChoice fill = RouteChoice::Small)
      : n_layers(layers), entries(positions * layers, fill) {}

  std::size_t positions() const { return n_layers == 0 ? 0 : entries.size() / n_layers; }
  RouteChoice& at(std::size_t pos, std::size_t layer) { return entries[pos * n_layers + layer]; }
  RouteChoice at(std::size_t pos, std::size_t layer) const { return entries[pos * n_layers + layer]; }

  LayerRoutes row(std::size_t pos) const {
    return LayerRoutes(entries.begin() + pos * n_layers, entries.begin() + (pos + 1) * n_layers);
  }
  void set_row(std::size_t pos, const LayerRoutes& r) {
    for (std::size_t l = 0; l < n_layers; ++l) at(pos, l) = r[l];
  }

  static RouteSpec uniform(std::size_t positions, std::size_t layers, RouteChoice c) {
    return RouteSpec(positions, layers, c);
  }
  static RouteSpec from_row(std::size_t positions, const LayerRoutes& r) {
    RouteSpec s(positions, r.size());
    for (std::size_t p = 0; p < positions; ++p) s.set_row(p, r);
    return s;
  }

  std::string row_string(std::size_t pos) const {
    std::string out;
    for (std::size_t l = 0; l < n_layers; ++l) out += route_char(at(pos, l));
    return out;
  }

  double big_fraction() const {
    if (entries.empty()) return 0.0;
    std::size_t n = 0;
    for (auto c : entries)
      if (c == RouteChoice::Big) ++n;
    return static_cast<double>(n) / static_cast<double>(entries.size());
  }
};

}  // namespace duo
