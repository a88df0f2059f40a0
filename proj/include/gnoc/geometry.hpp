#pragma once

// Periodic structures and neighbor graphs.
//
// Conventions used throughout:
//   * the cell matrix holds lattice vectors as rows; cartesian = frac * cell
//   * a directed edge (target t, source s, offset o) represents the image of
//     atom s at x_s + o*cell as seen from atom t; its displacement is
//     d = (x_s - x_t) + o*cell, dist = |d|, dir = d/|d|
//   * per ordered pair, only the minimum-image representative is kept; ties
//     between images break on lexicographically smaller offset
//   * edges are sorted by (target, dist, offset, source), so each target's
//     in-edges form a contiguous block in ascending-distance order
//
// Graph construction proposes candidates either by direct image enumeration
// (small systems) or via a uniform cell grid over ghost copies (bin size =
// the cutoff); both funnel through the same canonical filter/reduce step and
// therefore return identical graphs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gnoc/common.hpp"
#include "gnoc/tensor.hpp"

namespace gnoc {

// ---------------------------------------------------------------------------
// Structures
// ---------------------------------------------------------------------------

struct AtomicSystem {
  std::vector<int> atomic_numbers;
  std::vector<Vec3> positions;  // angstrom
  Mat3 cell{{Vec3{0, 0, 0}, Vec3{0, 0, 0}, Vec3{0, 0, 0}}};
  std::array<bool, 3> pbc{false, false, false};

  // optional labels / annotations
  bool has_energy = false;
  double energy = 0.0;  // eV
  std::vector<Vec3> forces;         // eV/angstrom; empty or one per atom
  std::vector<int> tags;            // 0 substrate, 1 adsorbate; empty = all 0
  std::vector<std::uint8_t> fixed;  // relaxation mask; empty = all free

  std::string trajectory_id;
  int frame_index = 0;

  std::size_t size() const { return atomic_numbers.size(); }
  bool periodic() const { return pbc[0] || pbc[1] || pbc[2]; }

  int tag_of(std::size_t i) const { return tags.empty() ? 0 : tags[i]; }
  bool fixed_at(std::size_t i) const { return !fixed.empty() && fixed[i] != 0; }

  void validate() const {
    const std::size_t n = size();
    GNOC_CHECK(n >= 1, GeometryError, "system: at least one atom required");
    GNOC_CHECK(positions.size() == n, GeometryError,
               "system: positions/atomic_numbers size mismatch");
    GNOC_CHECK(forces.empty() || forces.size() == n, GeometryError,
               "system: forces size mismatch");
    GNOC_CHECK(tags.empty() || tags.size() == n, GeometryError,
               "system: tags size mismatch");
    GNOC_CHECK(fixed.empty() || fixed.size() == n, GeometryError,
               "system: fixed mask size mismatch");
    for (const auto& p : positions)
      for (double c : p)
        GNOC_CHECK(std::isfinite(c), GeometryError,
                   "system: non-finite position");
    if (periodic())
      GNOC_CHECK(std::abs(det3(cell)) > 1e-9, GeometryError,
                 "system: periodic cell is singular");
  }
};

struct MinImage {
  Vec3 disp;       // (x_j - x_i) + offset*cell, minimum norm over the search
  Offset3 offset;  // integer image shift applied to x_j
  double dist;
};

struct Edge {
  Index target = 0;
  Index source = 0;
  Offset3 offset{0, 0, 0};
  double dist = 0.0;
  Vec3 dir{0, 0, 0};  // unit vector from target toward the source image
};

struct NeighborGraph {
  std::size_t n_atoms = 0;
  std::vector<Edge> edges;          // canonical order (see header comment)
  std::vector<Index> edge_start;    // CSR: edges of target a are
                                    // [edge_start[a], edge_start[a+1])
  std::vector<Index> reverse_edge;  // filled by symmetrize_graph
  bool symmetric = false;
};

// Triplet over edges (c->b) and (b->a): edge_in has target b / source c,
// edge_out has target a / source b. cos_angle is the angle at vertex b.
struct Triplet {
  Index edge_in = 0;
  Index edge_out = 0;
  double cos_angle = 0.0;
};

// Quadruplet over the chain c-a-b-d: edge_out = (c->a) is the edge whose
// message is updated, edge_mid = (b->a) is the central (k_qint-restricted)
// edge, edge_src = (d->b) supplies the two-hop message.
struct Quadruplet {
  Index edge_src = 0;
  Index edge_mid = 0;
  Index edge_out = 0;
  double cos_phi_cab = 0.0;   // angle at vertex a between a->c and a->b
  double cos_phi_abd = 0.0;   // angle at vertex b between b->a and b->d
  double cos_dihedral = 0.0;  // dihedral about the a-b axis
};

struct GraphStats {
  std::size_t n_atoms = 0;
  std::size_t n_edges = 0;
  double mean_neighbors = 0.0;
  std::size_t min_neighbors = 0;
  std::size_t max_neighbors = 0;
  std::size_t isolated_atoms = 0;
};

// ---------------------------------------------------------------------------
// Minimum image
// ---------------------------------------------------------------------------

namespace detail {

inline Vec3 offset_cart(const Offset3& o, const Mat3& cell) {
  return {o[0] * cell[0][0] + o[1] * cell[1][0] + o[2] * cell[2][0],
          o[0] * cell[0][1] + o[1] * cell[1][1] + o[2] * cell[2][1],
          o[0] * cell[0][2] + o[1] * cell[1][2] + o[2] * cell[2][2]};
}

inline Vec3 pair_disp(const Vec3& xt, const Vec3& xs, const Offset3& o,
                      const Mat3& cell) {
  const Vec3 base = xs - xt;
  if (o[0] == 0 && o[1] == 0 && o[2] == 0) return base;
  return base + offset_cart(o, cell);
}

inline bool offset_less(const Offset3& a, const Offset3& b) {
  if (a[0] != b[0]) return a[0] < b[0];
  if (a[1] != b[1]) return a[1] < b[1];
  return a[2] < b[2];
}

}  // namespace detail

// Minimum-norm displacement from x_i to an image of x_j, searched over
// round(frac) +/- search_radius on periodic axes. Ties between images break
// toward the lexicographically smaller offset.
inline MinImage minimum_image(const Vec3& xi, const Vec3& xj, const Mat3& cell,
                              const std::array<bool, 3>& pbc,
                              int search_radius = 1) {
  GNOC_CHECK(search_radius >= 1, GeometryError,
             "minimum_image: search radius must be >= 1");
  if (!pbc[0] && !pbc[1] && !pbc[2])
    return {xj - xi, {0, 0, 0}, norm(xj - xi)};
  const Mat3 cinv = inv3(cell);
  const Vec3 f = mat_vec(xj - xi, cinv);
  Offset3 base{0, 0, 0};
  std::array<int, 3> lo{0, 0, 0}, hi{0, 0, 0};
  for (int k = 0; k < 3; ++k) {
    if (!pbc[k]) continue;
    base[k] = static_cast<int>(-std::llround(f[k]));
    lo[k] = -search_radius;
    hi[k] = search_radius;
  }
  MinImage best{{0, 0, 0}, {0, 0, 0}, std::numeric_limits<double>::infinity()};
  for (int a = lo[0]; a <= hi[0]; ++a)
    for (int b = lo[1]; b <= hi[1]; ++b)
      for (int c = lo[2]; c <= hi[2]; ++c) {
        const Offset3 o{base[0] + a, base[1] + b, base[2] + c};
        const Vec3 d = detail::pair_disp(xi, xj, o, cell);
        const double dist = norm(d);
        if (dist < best.dist ||
            (dist == best.dist && detail::offset_less(o, best.offset)))
          best = {d, o, dist};
      }
  return best;
}

// ---------------------------------------------------------------------------
// Candidate generation (shared by the kNN and cutoff builders)
// ---------------------------------------------------------------------------

namespace detail {

struct PairProposal {
  Index target, source;
  Offset3 offset;
};

// heights of the cell perpendicular to each lattice plane
inline std::array<double, 3> cell_heights(const Mat3& cell) {
  const double vol = std::abs(det3(cell));
  std::array<double, 3> h{0, 0, 0};
  for (int k = 0; k < 3; ++k) {
    const Vec3 a = cell[(k + 1) % 3];
    const Vec3 b = cell[(k + 2) % 3];
    const double area = norm(cross(a, b));
    h[k] = area > 0 ? vol / area : 0.0;
  }
  return h;
}

// Direct image enumeration around the fractional rounding point.
inline std::vector<PairProposal> propose_brute(const AtomicSystem& sys,
                                               double /*cutoff*/) {
  const std::size_t n = sys.size();
  std::vector<PairProposal> out;
  const bool periodic = sys.periodic();
  Mat3 cinv{};
  if (periodic) cinv = inv3(sys.cell);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t s = 0; s < n; ++s) {
      if (t == s) continue;  // no self edges; only distinct atom pairs
      if (!periodic) {
        out.push_back({Index(t), Index(s), {0, 0, 0}});
        continue;
      }
      const Vec3 f = mat_vec(sys.positions[s] - sys.positions[t], cinv);
      Offset3 base{0, 0, 0};
      std::array<int, 3> lo{0, 0, 0}, hi{0, 0, 0};
      for (int k = 0; k < 3; ++k) {
        if (!sys.pbc[k]) continue;
        base[k] = static_cast<int>(-std::llround(f[k]));
        lo[k] = -1;
        hi[k] = 1;
      }
      for (int a = lo[0]; a <= hi[0]; ++a)
        for (int b = lo[1]; b <= hi[1]; ++b)
          for (int c = lo[2]; c <= hi[2]; ++c)
            out.push_back(
                {Index(t), Index(s), {base[0] + a, base[1] + b, base[2] + c}});
    }
  return out;
}

// Cell-list proposal path: wrap atoms into the unit cell, replicate ghost
// images out to the cutoff, bin everything on a uniform grid with bin size
// equal to the cutoff, and scan the 27 surrounding bins per central atom.
inline std::vector<PairProposal> propose_cell_list(const AtomicSystem& sys,
                                                   double cutoff) {
  const std::size_t n = sys.size();
  const bool periodic = sys.periodic();

  std::vector<Vec3> wrapped(n);
  std::vector<Offset3> wrap(n, {0, 0, 0});
  std::array<int, 3> reach{0, 0, 0};
  if (periodic) {
    const Mat3 cinv = inv3(sys.cell);
    const auto h = cell_heights(sys.cell);
    for (int k = 0; k < 3; ++k) {
      if (!sys.pbc[k]) continue;
      GNOC_CHECK(h[k] > 1e-9, GeometryError, "graph: degenerate cell height");
      reach[k] = static_cast<int>(std::ceil(cutoff / h[k]));
      GNOC_CHECK(reach[k] <= 64, GeometryError,
                 "graph: cell too thin for requested cutoff");
    }
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 f = mat_vec(sys.positions[i], cinv);
      Offset3 w{0, 0, 0};
      for (int k = 0; k < 3; ++k)
        if (sys.pbc[k]) w[k] = static_cast<int>(std::floor(f[k]));
      wrap[i] = w;
      wrapped[i] = sys.positions[i] - offset_cart(w, sys.cell);
    }
  } else {
    wrapped = sys.positions;
  }

  struct Ghost {
    Vec3 pos;
    Index atom;
    Offset3 shift;
  };
  std::vector<Ghost> ghosts;
  ghosts.reserve(n * std::size_t((2 * reach[0] + 1) * (2 * reach[1] + 1) *
                                 (2 * reach[2] + 1)));
  for (int a = -reach[0]; a <= reach[0]; ++a)
    for (int b = -reach[1]; b <= reach[1]; ++b)
      for (int c = -reach[2]; c <= reach[2]; ++c) {
        const Offset3 sh{a, b, c};
        const Vec3 off =
            periodic ? offset_cart(sh, sys.cell) : Vec3{0, 0, 0};
        for (std::size_t i = 0; i < n; ++i)
          ghosts.push_back({wrapped[i] + off, Index(i), sh});
      }

  Vec3 lo = ghosts[0].pos, hi = ghosts[0].pos;
  for (const auto& g : ghosts)
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], g.pos[k]);
      hi[k] = std::max(hi[k], g.pos[k]);
    }
  const double bin = cutoff;
  std::array<int, 3> nb{};
  for (int k = 0; k < 3; ++k)
    nb[k] = std::max(1, static_cast<int>((hi[k] - lo[k]) / bin) + 1);
  auto bin_of = [&](const Vec3& p) {
    std::array<int, 3> ib{};
    for (int k = 0; k < 3; ++k) {
      int v = static_cast<int>((p[k] - lo[k]) / bin);
      ib[k] = std::min(nb[k] - 1, std::max(0, v));
    }
    return (ib[0] * nb[1] + ib[1]) * nb[2] + ib[2];
  };

  // counting-sort ghosts into bins
  const std::size_t nbins = std::size_t(nb[0]) * nb[1] * nb[2];
  std::vector<Index> counts(nbins + 1, 0);
  std::vector<int> gbin(ghosts.size());
  for (std::size_t i = 0; i < ghosts.size(); ++i) {
    gbin[i] = bin_of(ghosts[i].pos);
    ++counts[gbin[i] + 1];
  }
  for (std::size_t i = 1; i <= nbins; ++i) counts[i] += counts[i - 1];
  std::vector<Index> order(ghosts.size());
  {
    std::vector<Index> cursor(counts.begin(), counts.end() - 1);
    for (std::size_t i = 0; i < ghosts.size(); ++i)
      order[cursor[gbin[i]]++] = Index(i);
  }

  const double limit2 = (cutoff + 1e-9) * (cutoff + 1e-9);
  std::vector<PairProposal> out;
  for (std::size_t t = 0; t < n; ++t) {
    const Vec3& pt = wrapped[t];
    std::array<int, 3> ib{};
    for (int k = 0; k < 3; ++k)
      ib[k] = std::min(nb[k] - 1,
                       std::max(0, static_cast<int>((pt[k] - lo[k]) / bin)));
    for (int a = std::max(0, ib[0] - 1); a <= std::min(nb[0] - 1, ib[0] + 1); ++a)
      for (int b = std::max(0, ib[1] - 1); b <= std::min(nb[1] - 1, ib[1] + 1); ++b)
        for (int c = std::max(0, ib[2] - 1); c <= std::min(nb[2] - 1, ib[2] + 1); ++c) {
          const std::size_t bi = (std::size_t(a) * nb[1] + b) * nb[2] + c;
          for (Index gi = counts[bi]; gi < counts[bi + 1]; ++gi) {
            const Ghost& g = ghosts[order[gi]];
            if (g.atom == Index(t)) continue;  // distinct atom pairs only
            const Vec3 d = g.pos - pt;
            if (dot(d, d) > limit2) continue;
            // convert the ghost shift back to an offset in original coords
            const Offset3 o{g.shift[0] - wrap[g.atom][0] + wrap[t][0],
                            g.shift[1] - wrap[g.atom][1] + wrap[t][1],
                            g.shift[2] - wrap[g.atom][2] + wrap[t][2]};
            out.push_back({Index(t), g.atom, o});
          }
        }
  }
  return out;
}

struct Candidate {
  Index source;
  Offset3 offset;
  double dist;
  Vec3 dir;
};

// Reduce raw proposals to per-(target, source) minimum-image candidates with
// canonical distances recomputed from the original coordinates, filtered to
// dist <= cutoff, grouped per target and sorted by (dist, offset, source).
inline std::vector<std::vector<Candidate>> min_image_candidates(
    const AtomicSystem& sys, double cutoff) {
  sys.validate();
  GNOC_CHECK(cutoff > 0.0, GeometryError, "graph: cutoff must be positive");
  const std::size_t n = sys.size();
  auto proposals = n < 32 ? propose_brute(sys, cutoff)
                          : propose_cell_list(sys, cutoff);

  struct Scored {
    Index target, source;
    Offset3 offset;
    double dist;
    Vec3 disp;
  };
  std::vector<Scored> scored;
  scored.reserve(proposals.size());
  for (const auto& p : proposals) {
    const Vec3 d = pair_disp(sys.positions[p.target], sys.positions[p.source],
                             p.offset, sys.cell);
    const double dist = norm(d);
    if (dist > cutoff) continue;
    GNOC_CHECK(dist > 1e-8, GeometryError,
               "graph: coincident atoms (pair distance < 1e-8)");
    scored.push_back({p.target, p.source, p.offset, dist, d});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.target != b.target) return a.target < b.target;
    if (a.source != b.source) return a.source < b.source;
    if (a.dist != b.dist) return a.dist < b.dist;
    return offset_less(a.offset, b.offset);
  });

  std::vector<std::vector<Candidate>> per_target(n);
  for (std::size_t i = 0; i < scored.size();) {
    std::size_t j = i + 1;
    while (j < scored.size() && scored[j].target == scored[i].target &&
           scored[j].source == scored[i].source)
      ++j;
    const Scored& best = scored[i];  // group leader = minimum image
    per_target[best.target].push_back(
        {best.source, best.offset, best.dist, (1.0 / best.dist) * best.disp});
    i = j;
  }
  for (auto& cands : per_target)
    std::sort(cands.begin(), cands.end(),
              [](const Candidate& a, const Candidate& b) {
                if (a.dist != b.dist) return a.dist < b.dist;
                if (a.offset != b.offset) return offset_less(a.offset, b.offset);
                return a.source < b.source;
              });
  return per_target;
}

inline void finalize_graph(NeighborGraph& g) {
  std::sort(g.edges.begin(), g.edges.end(), [](const Edge& a, const Edge& b) {
    if (a.target != b.target) return a.target < b.target;
    if (a.dist != b.dist) return a.dist < b.dist;
    if (a.offset != b.offset) return offset_less(a.offset, b.offset);
    return a.source < b.source;
  });
  g.edge_start.assign(g.n_atoms + 1, 0);
  for (const auto& e : g.edges) ++g.edge_start[e.target + 1];
  for (std::size_t a = 0; a < g.n_atoms; ++a)
    g.edge_start[a + 1] += g.edge_start[a];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

// k nearest neighbors per atom by minimum-image distance, capped at
// max_cutoff. Atoms with fewer than k candidates keep what they have.
inline NeighborGraph build_knn_graph(const AtomicSystem& sys, int k,
                                     double max_cutoff) {
  GNOC_CHECK(k >= 1, GeometryError, "knn: k must be >= 1");
  auto cands = detail::min_image_candidates(sys, max_cutoff);
  NeighborGraph g;
  g.n_atoms = sys.size();
  for (std::size_t t = 0; t < cands.size(); ++t) {
    const std::size_t keep = std::min<std::size_t>(k, cands[t].size());
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = cands[t][i];
      g.edges.push_back({Index(t), c.source, c.offset, c.dist, c.dir});
    }
  }
  detail::finalize_graph(g);
  return g;
}

// All minimum-image pairs with distance <= cutoff.
inline NeighborGraph build_cutoff_graph(const AtomicSystem& sys,
                                        double cutoff) {
  auto cands = detail::min_image_candidates(sys, cutoff);
  NeighborGraph g;
  g.n_atoms = sys.size();
  for (std::size_t t = 0; t < cands.size(); ++t)
    for (const auto& c : cands[t])
      g.edges.push_back({Index(t), c.source, c.offset, c.dist, c.dir});
  detail::finalize_graph(g);
  return g;
}

// Union of the graph with its reversed edges, plus the reverse-edge map.
// The reverse of (t, s, o) is (s, t, -o); distances carry over exactly and
// directions flip sign.
inline NeighborGraph symmetrize_graph(const NeighborGraph& in) {
  NeighborGraph g;
  g.n_atoms = in.n_atoms;
  g.edges = in.edges;
  auto key_less = [](const Edge& a, const Edge& b) {
    if (a.target != b.target) return a.target < b.target;
    if (a.source != b.source) return a.source < b.source;
    return detail::offset_less(a.offset, b.offset);
  };
  std::vector<Edge> sorted = in.edges;
  std::sort(sorted.begin(), sorted.end(), key_less);
  auto present = [&](const Edge& e) {
    auto it = std::lower_bound(sorted.begin(), sorted.end(), e, key_less);
    return it != sorted.end() && it->target == e.target &&
           it->source == e.source && it->offset == e.offset;
  };
  for (const auto& e : in.edges) {
    Edge r;
    r.target = e.source;
    r.source = e.target;
    r.offset = {-e.offset[0], -e.offset[1], -e.offset[2]};
    r.dist = e.dist;
    r.dir = {-e.dir[0], -e.dir[1], -e.dir[2]};
    if (!present(r)) g.edges.push_back(r);
  }
  detail::finalize_graph(g);
  g.symmetric = true;

  // reverse lookup over the finalized ordering
  std::vector<std::size_t> order(g.edges.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return key_less(g.edges[a], g.edges[b]);
  });
  auto find_edge = [&](Index t, Index s, const Offset3& o) -> Index {
    Edge probe;
    probe.target = t;
    probe.source = s;
    probe.offset = o;
    auto it = std::lower_bound(order.begin(), order.end(), probe,
                               [&](std::size_t idx, const Edge& e) {
                                 return key_less(g.edges[idx], e);
                               });
    GNOC_CHECK(it != order.end(), GeometryError, "symmetrize: reverse missing");
    const Edge& f = g.edges[*it];
    GNOC_CHECK(f.target == t && f.source == s && f.offset == o, GeometryError,
               "symmetrize: reverse missing");
    return Index(*it);
  };
  g.reverse_edge.resize(g.edges.size());
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const Edge& e = g.edges[i];
    g.reverse_edge[i] =
        find_edge(e.source, e.target, {-e.offset[0], -e.offset[1], -e.offset[2]});
  }
  return g;
}

// ---------------------------------------------------------------------------
// Triplets and quadruplets
// ---------------------------------------------------------------------------

inline double clamp_cos(double c) { return std::min(1.0, std::max(-1.0, c)); }

// All (edge_in, edge_out) pairs sharing vertex b = target(edge_in) =
// source(edge_out), excluding the pair where edge_in is the exact reverse of
// edge_out (c equal to a in the same image). cos of the angle at b is
// -dir(edge_in) . dir(edge_out).
inline std::vector<Triplet> enumerate_triplets(const NeighborGraph& g) {
  std::vector<Triplet> out;
  for (std::size_t eo = 0; eo < g.edges.size(); ++eo) {
    const Edge& out_e = g.edges[eo];
    const Index b = out_e.source;
    for (Index ei = g.edge_start[b]; ei < g.edge_start[b + 1]; ++ei) {
      const Edge& in_e = g.edges[ei];
      if (in_e.source == out_e.target &&
          in_e.offset[0] + out_e.offset[0] == 0 &&
          in_e.offset[1] + out_e.offset[1] == 0 &&
          in_e.offset[2] + out_e.offset[2] == 0)
        continue;  // back-tracking triplet c == a (same image)
      out.push_back({Index(ei), Index(eo), clamp_cos(-dot(in_e.dir, out_e.dir))});
    }
  }
  return out;
}

// Quadruplets c-a-b-d. Central edges (b->a) are restricted to each target's
// k_qint nearest in-edges (the first k_qint entries of its CSR block).
// Quadruplets whose flanking angles are degenerate (sin^2 < 1e-12) carry no
// dihedral information and are dropped.
inline std::vector<Quadruplet> enumerate_quadruplets(const NeighborGraph& g,
                                                     int k_qint) {
  GNOC_CHECK(k_qint >= 1, GeometryError, "quadruplets: k_qint must be >= 1");
  std::vector<Quadruplet> out;
  constexpr double kSin2Floor = 1e-12;
  for (std::size_t a = 0; a < g.n_atoms; ++a) {
    const Index mid_end = std::min<Index>(g.edge_start[a] + k_qint,
                                          g.edge_start[a + 1]);
    for (Index em = g.edge_start[a]; em < mid_end; ++em) {
      const Edge& mid = g.edges[em];
      const Index b = mid.source;
      for (Index eo = g.edge_start[a]; eo < g.edge_start[a + 1]; ++eo) {
        if (eo == em) continue;
        const Edge& oute = g.edges[eo];
        if (oute.source == b && oute.offset == mid.offset) continue;  // c == b
        const double cos_cab = clamp_cos(dot(oute.dir, mid.dir));
        const Vec3 n1 = cross({-oute.dir[0], -oute.dir[1], -oute.dir[2]},
                              mid.dir);
        const double s1 = dot(n1, n1);
        if (s1 < kSin2Floor) continue;
        for (Index es = g.edge_start[b]; es < g.edge_start[b + 1]; ++es) {
          const Edge& src = g.edges[es];
          // d == a in the image chain
          if (src.source == Index(a) && src.offset[0] + mid.offset[0] == 0 &&
              src.offset[1] + mid.offset[1] == 0 &&
              src.offset[2] + mid.offset[2] == 0)
            continue;
          // d == c in the image chain
          if (src.source == oute.source &&
              src.offset[0] + mid.offset[0] == oute.offset[0] &&
              src.offset[1] + mid.offset[1] == oute.offset[1] &&
              src.offset[2] + mid.offset[2] == oute.offset[2])
            continue;
          const double cos_abd = clamp_cos(-dot(mid.dir, src.dir));
          const Vec3 n2 = cross(mid.dir, src.dir);
          const double s2 = dot(n2, n2);
          if (s2 < kSin2Floor) continue;
          const double cos_th = clamp_cos(dot(n1, n2) / std::sqrt(s1 * s2));
          out.push_back({Index(es), em, eo, cos_cab, cos_abd, cos_th});
        }
      }
    }
  }
  return out;
}

inline GraphStats graph_stats(const NeighborGraph& g) {
  GraphStats st;
  st.n_atoms = g.n_atoms;
  st.n_edges = g.edges.size();
  if (g.n_atoms == 0) return st;
  st.min_neighbors = std::numeric_limits<std::size_t>::max();
  for (std::size_t a = 0; a < g.n_atoms; ++a) {
    const std::size_t deg = g.edge_start[a + 1] - g.edge_start[a];
    st.min_neighbors = std::min(st.min_neighbors, deg);
    st.max_neighbors = std::max(st.max_neighbors, deg);
    if (deg == 0) ++st.isolated_atoms;
  }
  st.mean_neighbors = double(st.n_edges) / double(st.n_atoms);
  return st;
}

}  // namespace gnoc
