#pragma once

// Molecular force-field GNN on periodic neighbor graphs.
//
// Atom embeddings h [N, atom_hidden] and directed-edge embeddings
// m [E, edge_hidden] are refined by a stack of interaction blocks, each
// combining up to five exchanges: dihedral-chain (quadruplet) messages,
// edge-to-edge (triplet) messages, atom-to-edge, edge-to-atom, and
// atom-to-atom messages over the same graph. Every aggregation site carries
// an empirical (non-trained) scaling factor fitted so that aggregation
// roughly preserves feature magnitude. Energy is assembled from per-block
// output features (block 0 = embedding stage included); forces either come
// from a direct per-edge head projected on edge directions or from the
// negative gradient of the energy.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnoc/basis.hpp"
#include "gnoc/checkpoint.hpp"
#include "gnoc/common.hpp"
#include "gnoc/geometry.hpp"
#include "gnoc/tensor.hpp"

namespace gnoc {

enum class ForceMode { direct, gradient };
enum class GraphMode { knn, cutoff };

struct ModelConfig {
  GraphMode graph = GraphMode::knn;
  int k_emb = 30;    // neighbors per atom for the knn graph
  int k_qint = 8;    // nearest in-edges eligible as quadruplet mid edges
  BasisConfig basis;  // edge radial basis + angular expansion orders

  int atom_hidden = 256;
  int edge_hidden = 512;
  int trip_hidden = 64;
  int quad_hidden = 16;
  int rbf_embed = 16;  // radial projection width in the embedding block
  int out_hidden = 64;
  int n_blocks = 4;
  int max_z = 90;

  ForceMode force_mode = ForceMode::direct;
  bool quadruplets = true;
  bool atom_edge = true;       // atom -> edge messages
  bool edge_atom = true;       // edge -> atom messages
  bool atom_atom = true;       // atom -> atom messages
  bool atom_emb_in_output = true;
  bool global_output_mlp = true;  // false: per-block linear output heads
  bool symmetric_mp = true;
  bool scaling_factors = true;

  void validate() const {
    basis.validate();
    GNOC_CHECK(k_emb >= 1 || graph == GraphMode::cutoff, ConfigError,
               "model: k_emb must be >= 1 for knn graphs");
    GNOC_CHECK(!quadruplets || k_qint >= 1, ConfigError,
               "model: k_qint must be >= 1 when quadruplets are enabled");
    GNOC_CHECK(atom_hidden >= 1 && edge_hidden >= 1 && trip_hidden >= 1 &&
                   quad_hidden >= 1 && rbf_embed >= 1 && out_hidden >= 1,
               ConfigError, "model: hidden sizes must be >= 1");
    GNOC_CHECK(n_blocks >= 1, ConfigError, "model: n_blocks must be >= 1");
    GNOC_CHECK(max_z >= 1, ConfigError, "model: max_z must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"graph", c.graph == GraphMode::knn ? "knn" : "cutoff"},
      {"k_emb", c.k_emb},
      {"k_qint", c.k_qint},
      {"radial_basis", c.basis.radial == RadialBasisKind::gaussian ? "gaussian"
                       : c.basis.radial == RadialBasisKind::bessel0
                           ? "bessel0"
                           : "spherical_bessel"},
      {"n_radial", c.basis.n_radial},
      {"cutoff", c.basis.cutoff},
      {"envelope_p", c.basis.envelope_p},
      {"angular_basis", c.basis.angular == AngularBasisKind::legendre_product
                            ? "legendre_product"
                            : "spherical_harmonics"},
      {"max_degree", c.basis.max_degree},
      {"atom_hidden", c.atom_hidden},
      {"edge_hidden", c.edge_hidden},
      {"trip_hidden", c.trip_hidden},
      {"quad_hidden", c.quad_hidden},
      {"rbf_embed", c.rbf_embed},
      {"out_hidden", c.out_hidden},
      {"n_blocks", c.n_blocks},
      {"max_z", c.max_z},
      {"force_mode", c.force_mode == ForceMode::direct ? "direct" : "gradient"},
      {"quadruplets", c.quadruplets},
      {"atom_edge", c.atom_edge},
      {"edge_atom", c.edge_atom},
      {"atom_atom", c.atom_atom},
      {"atom_emb_in_output", c.atom_emb_in_output},
      {"global_output_mlp", c.global_output_mlp},
      {"symmetric_mp", c.symmetric_mp},
      {"scaling_factors", c.scaling_factors},
  };
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto enum_from = [&j](const char* key, auto table, auto fallback) {
    if (!j.contains(key)) return fallback;
    const std::string s = j.at(key).get<std::string>();
    for (const auto& [name, v] : table)
      if (s == name) return v;
    throw ConfigError(cat("model config: bad value for ", key, ": ", s));
  };
  c.graph = enum_from("graph",
                      std::vector<std::pair<std::string, GraphMode>>{
                          {"knn", GraphMode::knn}, {"cutoff", GraphMode::cutoff}},
                      c.graph);
  c.basis.radial =
      enum_from("radial_basis",
                std::vector<std::pair<std::string, RadialBasisKind>>{
                    {"gaussian", RadialBasisKind::gaussian},
                    {"bessel0", RadialBasisKind::bessel0},
                    {"spherical_bessel", RadialBasisKind::spherical_bessel}},
                c.basis.radial);
  c.basis.angular =
      enum_from("angular_basis",
                std::vector<std::pair<std::string, AngularBasisKind>>{
                    {"legendre_product", AngularBasisKind::legendre_product},
                    {"spherical_harmonics", AngularBasisKind::spherical_harmonics}},
                c.basis.angular);
  c.force_mode = enum_from("force_mode",
                           std::vector<std::pair<std::string, ForceMode>>{
                               {"direct", ForceMode::direct},
                               {"gradient", ForceMode::gradient}},
                           c.force_mode);
  auto get = [&j](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  get("k_emb", c.k_emb);
  get("k_qint", c.k_qint);
  get("n_radial", c.basis.n_radial);
  get("cutoff", c.basis.cutoff);
  get("envelope_p", c.basis.envelope_p);
  get("max_degree", c.basis.max_degree);
  get("atom_hidden", c.atom_hidden);
  get("edge_hidden", c.edge_hidden);
  get("trip_hidden", c.trip_hidden);
  get("quad_hidden", c.quad_hidden);
  get("rbf_embed", c.rbf_embed);
  get("out_hidden", c.out_hidden);
  get("n_blocks", c.n_blocks);
  get("max_z", c.max_z);
  get("quadruplets", c.quadruplets);
  get("atom_edge", c.atom_edge);
  get("edge_atom", c.edge_atom);
  get("atom_atom", c.atom_atom);
  get("atom_emb_in_output", c.atom_emb_in_output);
  get("global_output_mlp", c.global_output_mlp);
  get("symmetric_mp", c.symmetric_mp);
  get("scaling_factors", c.scaling_factors);
}

template <typename Real>
struct ForwardResultT {
  TensorPtrT<Real> energy;  // [1]; detached in gradient mode with forces
  TensorPtrT<Real> forces;  // [N, 3] or null when not requested
  double energy_value = 0.0;
  std::vector<Vec3> force_values;
  GraphStats stats;
  std::size_t n_triplets = 0;
  std::size_t n_quadruplets = 0;
  std::map<std::string, double> block_rms;  // per-block embedding magnitudes
};

struct ForwardOptions {
  bool compute_forces = true;
};

template <typename Real>
class ModelT {
 public:
  using TP = TensorPtrT<Real>;

  ModelConfig cfg;
  std::map<std::string, TP> params;
  std::map<std::string, double> scaling;

  explicit ModelT(ModelConfig c, std::uint64_t init_seed = 0)
      : cfg(std::move(c)) {
    cfg.validate();
    build_params(init_seed);
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t->size();
    return n;
  }

  // Checksum over parameter names, shapes, values, and scaling factors.
  std::uint64_t param_digest() const {
    std::uint64_t h = fnv1a("model-params");
    for (const auto& [name, t] : params) {
      h = fnv1a(name, h);
      for (std::size_t d : t->shape) h = fnv1a(&d, sizeof(d), h);
      h = fnv1a(t->values.data(), t->values.size() * sizeof(Real), h);
    }
    for (const auto& [site, f] : scaling) {
      h = fnv1a(site, h);
      h = fnv1a(&f, sizeof(f), h);
    }
    return h;
  }

  // -------------------------------------------------------------------------
  // Forward
  // -------------------------------------------------------------------------

  ForwardResultT<Real> forward(const AtomicSystem& sys,
                               ForwardOptions opt = {}) {
    sys.validate();
    if (cfg.force_mode == ForceMode::gradient && opt.compute_forces) {
      // Run on a private tape and differentiate the energy w.r.t. positions.
      // Parameter gradients are switched off so the tape only follows the
      // position dependency and parameter grad buffers stay untouched.
      std::vector<TP> flipped;
      for (auto& [name, t] : params)
        if (t->requires_grad) {
          t->requires_grad = false;
          flipped.push_back(t);
        }
      ForwardResultT<Real> res;
      TP pos;
      try {
        TapeScopeT<Real> scope;
        pos = positions_tensor(sys);
        pos->requires_grad = true;
        res = forward_impl(sys, pos, /*want_force_head=*/false);
        backward(res.energy);
      } catch (...) {
        for (auto& t : flipped) t->requires_grad = true;
        throw;
      }
      for (auto& t : flipped) t->requires_grad = true;
      const std::size_t n = sys.size();
      res.forces = TensorT<Real>::zeros({n, 3});
      res.force_values.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
          const double f = pos->grad.empty() ? 0.0 : -double(pos->grad[i * 3 + k]);
          res.forces->values[i * 3 + k] = Real(f);
          res.force_values[i][k] = f;
        }
      }
      res.energy = TensorT<Real>::scalar(Real(res.energy_value));  // detached
      check_finite(res);
      return res;
    }
    auto res = forward_impl(sys, nullptr,
                            cfg.force_mode == ForceMode::direct &&
                                opt.compute_forces);
    check_finite(res);
    return res;
  }

  // -------------------------------------------------------------------------
  // Empirical scaling factors: for each aggregation site, in execution
  // order, fit factor = rms(messages) / rms(aggregate) over the given
  // systems, with already-fitted upstream factors applied.
  // -------------------------------------------------------------------------

  void fit_scaling_factors(const std::vector<AtomicSystem>& systems) {
    GNOC_CHECK(!systems.empty(), ContractError,
               "scaling fit: need at least one system");
    scaling.clear();
    for (const std::string& site : scaling_sites()) {
      Calib c;
      c.site = site;
      calib_ = &c;
      for (const auto& sys : systems) forward(sys, {.compute_forces = false});
      calib_ = nullptr;
      if (c.n_in > 0 && c.n_out > 0 && c.sum_out > 0.0) {
        const double rms_in = std::sqrt(c.sum_in / double(c.n_in));
        const double rms_out = std::sqrt(c.sum_out / double(c.n_out));
        scaling[site] = rms_in / rms_out;
      } else {
        scaling[site] = 1.0;
      }
    }
  }

  // Diagnostic: rms(factor * aggregate) / rms(messages) per site over the
  // given systems. Equals 1 exactly on the data the factors were fitted to.
  std::map<std::string, double> scaling_check(
      const std::vector<AtomicSystem>& systems) {
    std::map<std::string, double> out;
    for (const std::string& site : scaling_sites()) {
      Calib c;
      c.site = site;
      calib_ = &c;
      for (const auto& sys : systems) forward(sys, {.compute_forces = false});
      calib_ = nullptr;
      const double f = scaling.count(site) ? scaling.at(site) : 1.0;
      if (c.n_in > 0 && c.sum_in > 0.0)
        out[site] = f * std::sqrt((c.sum_out / double(c.n_out)) /
                                  (c.sum_in / double(c.n_in)));
    }
    return out;
  }

  std::vector<std::string> scaling_sites() const {
    std::vector<std::string> sites;
    for (int i = 1; i <= cfg.n_blocks; ++i) {
      const std::string b = cat("block", i);
      if (cfg.quadruplets) {
        sites.push_back(b + ".quad");
        if (cfg.symmetric_mp) sites.push_back(b + ".quad.sym");
      }
      sites.push_back(b + ".trip");
      if (cfg.symmetric_mp) sites.push_back(b + ".trip.sym");
      if (cfg.edge_atom) sites.push_back(b + ".ea");
      if (cfg.atom_atom) sites.push_back(b + ".aa");
    }
    for (int t = 0; t <= cfg.n_blocks; ++t)
      sites.push_back(cat("out", t, ".energy"));
    return sites;
  }

 private:
  struct Calib {
    std::string site;
    double sum_in = 0.0, sum_out = 0.0;
    std::size_t n_in = 0, n_out = 0;
  };
  Calib* calib_ = nullptr;

  void build_params(std::uint64_t seed) {
    auto W = [&](const std::string& name, std::size_t r, std::size_t c) {
      auto rng = make_rng(seed, "init:" + name);
      params[name] = orthogonal<Real>(r, c, rng);
      params[name]->requires_grad = true;
    };
    auto B = [&](const std::string& name, std::size_t n) {
      params[name] = TensorT<Real>::zeros({n});
      params[name]->requires_grad = true;
    };
    const std::size_t H = cfg.atom_hidden, He = cfg.edge_hidden;
    const std::size_t th = cfg.trip_hidden, qh = cfg.quad_hidden;
    const std::size_t nr = cfg.basis.n_radial, rp = cfg.rbf_embed;
    const std::size_t out = cfg.out_hidden;
    const std::size_t L1 = std::size_t(cfg.basis.max_degree) + 1;

    {
      auto rng = make_rng(seed, "init:emb.atom");
      params["emb.atom"] = randn<Real>({std::size_t(cfg.max_z) + 1, H}, rng);
      params["emb.atom"]->requires_grad = true;
    }
    W("emb.rbf.W", nr, rp);
    W("emb.edge.W", 2 * H + rp, He);
    B("emb.edge.b", He);

    for (int i = 1; i <= cfg.n_blocks; ++i) {
      const std::string b = cat("block", i, ".");
      if (cfg.quadruplets) {
        W(b + "quad.down.W", He, qh);
        W(b + "quad.rbf.W", nr, qh);
        W(b + "quad.ang.W", cfg.basis.quad_angular_size(), qh);
        W(b + "quad.up.W", qh, He);
      }
      W(b + "trip.down.W", He, th);
      W(b + "trip.rbf.W", nr, th);
      W(b + "trip.ang.W", L1, th);
      W(b + "trip.up.W", th, He);
      if (cfg.atom_edge) {
        W(b + "ae.h.W", 2 * H, He);
        B(b + "ae.h.b", He);
        W(b + "ae.rbf.W", nr, He);
      }
      if (cfg.edge_atom) {
        W(b + "ea.down.W", He, H);
        W(b + "ea.rbf.W", nr, H);
        W(b + "ea.out.W", H, H);
        B(b + "ea.out.b", H);
      }
      if (cfg.atom_atom) {
        W(b + "aa.W", H, H);
        W(b + "aa.rbf.W", nr, H);
        W(b + "aa.out.W", H, H);
        B(b + "aa.out.b", H);
      }
      W(b + "mres.W1", He, He);
      B(b + "mres.b1", He);
      W(b + "mres.W2", He, He);
      B(b + "mres.b2", He);
      W(b + "hres.W1", H, H);
      B(b + "hres.b1", H);
      W(b + "hres.W2", H, H);
      B(b + "hres.b2", H);
    }

    const bool direct = cfg.force_mode == ForceMode::direct;
    for (int t = 0; t <= cfg.n_blocks; ++t) {
      const std::string o = cat("out", t, ".");
      W(o + "rbfE.W", nr, He);
      W(o + "edgeE.W", He, out);
      if (cfg.atom_emb_in_output) W(o + "atomE.W", H, out);
      if (direct) {
        W(o + "rbfF.W", nr, He);
        W(o + "edgeF.W", He, out);
      }
      if (!cfg.global_output_mlp) {
        W(o + "headE.W", out, 1);
        B(o + "headE.b", 1);
        if (direct) {
          W(o + "headF.W", out, 1);
          B(o + "headF.b", 1);
        }
      }
    }
    if (cfg.global_output_mlp) {
      W("outmlp.E.W1", out, out);
      B("outmlp.E.b1", out);
      W("outmlp.E.W2", out, 1);
      B("outmlp.E.b2", 1);
      if (direct) {
        W("outmlp.F.W1", out, out);
        B("outmlp.F.b1", out);
        W("outmlp.F.W2", out, 1);
        B("outmlp.F.b2", 1);
      }
    }
  }

  TP p(const std::string& name) const {
    auto it = params.find(name);
    GNOC_CHECK(it != params.end(), ContractError,
               cat("model: missing parameter ", name));
    return it->second;
  }

  TP positions_tensor(const AtomicSystem& sys) const {
    const std::size_t n = sys.size();
    auto t = TensorT<Real>::zeros({n, 3});
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) t->values[i * 3 + k] = Real(sys.positions[i][k]);
    return t;
  }

  static double rms_of(const TP& t) {
    if (t->values.empty()) return 0.0;
    double s = 0.0;
    for (Real v : t->values) s += double(v) * double(v);
    return std::sqrt(s / double(t->values.size()));
  }

  TP scaled(const std::string& site, const TP& msg, TP agg) {
    if (calib_ && calib_->site == site) {
      for (Real v : msg->values) calib_->sum_in += double(v) * double(v);
      calib_->n_in += msg->values.size();
      for (Real v : agg->values) calib_->sum_out += double(v) * double(v);
      calib_->n_out += agg->values.size();
    }
    if (!cfg.scaling_factors) return agg;
    auto it = scaling.find(site);
    if (it == scaling.end() || it->second == 1.0) return agg;
    return scale(agg, Real(it->second));
  }

  static TP residual(const TP& x, const TP& upd) {
    return scale(add(x, upd), Real(M_SQRT1_2));
  }

  TP ffn(const std::string& prefix, const TP& x) {
    auto hmid = activation(affine(x, p(prefix + ".W1"), p(prefix + ".b1")),
                           Nonlinearity::scaled_silu);
    return residual(x, affine(hmid, p(prefix + ".W2"), p(prefix + ".b2")));
  }

  void check_finite(const ForwardResultT<Real>& r) const {
    GNOC_CHECK(std::isfinite(r.energy_value), NumericError,
               "model: non-finite energy");
    for (const auto& f : r.force_values)
      GNOC_CHECK(std::isfinite(f[0]) && std::isfinite(f[1]) && std::isfinite(f[2]),
                 NumericError, "model: non-finite force");
  }

  // Geometry quantities as tensors. With a positions leaf they are recorded
  // on the tape (gradient mode); otherwise they are constants taken from the
  // already-built graph.
  struct Geom {
    TP d, dir;                               // [E,1], [E,3]
    TP trip_cos;                             // [T,1]
    TP quad_cos_cab, quad_cos_abd, quad_cos_dih;  // [Q,1]
  };

  Geom build_geom(const AtomicSystem& sys, const NeighborGraph& g,
                  const std::vector<Triplet>& trips,
                  const std::vector<Quadruplet>& quads, const TP& pos) const {
    Geom geom;
    const std::size_t E = g.edges.size();
    if (!pos) {
      geom.d = TensorT<Real>::zeros({E, 1});
      geom.dir = TensorT<Real>::zeros({E, 3});
      for (std::size_t e = 0; e < E; ++e) {
        geom.d->values[e] = Real(g.edges[e].dist);
        for (int k = 0; k < 3; ++k)
          geom.dir->values[e * 3 + k] = Real(g.edges[e].dir[k]);
      }
      geom.trip_cos = TensorT<Real>::zeros({trips.size(), 1});
      for (std::size_t t = 0; t < trips.size(); ++t)
        geom.trip_cos->values[t] = Real(trips[t].cos_angle);
      geom.quad_cos_cab = TensorT<Real>::zeros({quads.size(), 1});
      geom.quad_cos_abd = TensorT<Real>::zeros({quads.size(), 1});
      geom.quad_cos_dih = TensorT<Real>::zeros({quads.size(), 1});
      for (std::size_t q = 0; q < quads.size(); ++q) {
        geom.quad_cos_cab->values[q] = Real(quads[q].cos_phi_cab);
        geom.quad_cos_abd->values[q] = Real(quads[q].cos_phi_abd);
        geom.quad_cos_dih->values[q] = Real(quads[q].cos_dihedral);
      }
      return geom;
    }
    // differentiable path
    std::vector<Index> tgt(E), src(E);
    auto off = TensorT<Real>::zeros({E, 3});
    for (std::size_t e = 0; e < E; ++e) {
      tgt[e] = g.edges[e].target;
      src[e] = g.edges[e].source;
      const Vec3 oc = detail::offset_cart(g.edges[e].offset, sys.cell);
      for (int k = 0; k < 3; ++k) off->values[e * 3 + k] = Real(oc[k]);
    }
    auto vec = add(sub(gather_rows(pos, src), gather_rows(pos, tgt)), off);
    geom.d = row_norm(vec);
    geom.dir = div_rows(vec, geom.d);
    std::vector<Index> tin(trips.size()), tout(trips.size());
    for (std::size_t t = 0; t < trips.size(); ++t) {
      tin[t] = trips[t].edge_in;
      tout[t] = trips[t].edge_out;
    }
    geom.trip_cos = scale(
        row_dot(gather_rows(geom.dir, tin), gather_rows(geom.dir, tout)),
        Real(-1));
    std::vector<Index> qo(quads.size()), qm(quads.size()), qs(quads.size());
    for (std::size_t q = 0; q < quads.size(); ++q) {
      qo[q] = quads[q].edge_out;
      qm[q] = quads[q].edge_mid;
      qs[q] = quads[q].edge_src;
    }
    auto dvo = gather_rows(geom.dir, qo);
    auto dm = gather_rows(geom.dir, qm);
    auto ds = gather_rows(geom.dir, qs);
    geom.quad_cos_cab = row_dot(dvo, dm);
    geom.quad_cos_abd = scale(row_dot(dm, ds), Real(-1));
    auto n1 = row_cross(scale(dvo, Real(-1)), dm);
    auto n2 = row_cross(dm, ds);
    geom.quad_cos_dih =
        div_rows(row_dot(n1, n2), mul(row_norm(n1), row_norm(n2)));
    return geom;
  }

  ForwardResultT<Real> forward_impl(const AtomicSystem& sys, TP pos,
                                    bool want_force_head) {
    for (int z : sys.atomic_numbers)
      GNOC_CHECK(z >= 1 && z <= cfg.max_z, ContractError,
                 cat("model: atomic number ", z, " outside [1, ", cfg.max_z, "]"));

    NeighborGraph g = cfg.graph == GraphMode::knn
                          ? build_knn_graph(sys, cfg.k_emb, cfg.basis.cutoff)
                          : build_cutoff_graph(sys, cfg.basis.cutoff);
    if (cfg.symmetric_mp) g = symmetrize_graph(g);
    const auto trips = enumerate_triplets(g);
    const auto quads = cfg.quadruplets
                           ? enumerate_quadruplets(g, cfg.k_qint)
                           : std::vector<Quadruplet>{};

    ForwardResultT<Real> res;
    res.stats = graph_stats(g);
    res.n_triplets = trips.size();
    res.n_quadruplets = quads.size();

    const std::size_t N = sys.size(), E = g.edges.size();
    std::vector<Index> tgt(E), src(E);
    for (std::size_t e = 0; e < E; ++e) {
      tgt[e] = g.edges[e].target;
      src[e] = g.edges[e].source;
    }

    const Geom geom = build_geom(sys, g, trips, quads, pos);
    auto rbf = radial_features(geom.d, cfg.basis);  // [E, nr]

    // ---- embedding ----
    std::vector<Index> zidx(N);
    for (std::size_t i = 0; i < N; ++i) zidx[i] = Index(sys.atomic_numbers[i]);
    TP h = gather_rows(p("emb.atom"), zidx);  // [N, H]
    TP m = activation(
        affine(concat_cols(std::vector<TP>{gather_rows(h, tgt),
                                           gather_rows(h, src),
                                           affine(rbf, p("emb.rbf.W"))}),
               p("emb.edge.W"), p("emb.edge.b")),
        Nonlinearity::scaled_silu);  // [E, He]

    std::vector<TP> h_states{h}, m_states{m};

    // triplet / quadruplet index columns
    std::vector<Index> tin(trips.size()), tout(trips.size());
    for (std::size_t t = 0; t < trips.size(); ++t) {
      tin[t] = trips[t].edge_in;
      tout[t] = trips[t].edge_out;
    }
    std::vector<Index> qout(quads.size()), qmid(quads.size()), qsrc(quads.size());
    for (std::size_t q = 0; q < quads.size(); ++q) {
      qout[q] = quads[q].edge_out;
      qmid[q] = quads[q].edge_mid;
      qsrc[q] = quads[q].edge_src;
    }
    TP trip_ang = legendre_features(geom.trip_cos, cfg.basis.max_degree);
    TP quad_ang =
        quads.empty()
            ? nullptr
            : quad_angular_features(geom.quad_cos_cab, geom.quad_cos_abd,
                                    geom.quad_cos_dih, cfg.basis);

    // ---- interaction blocks ----
    for (int i = 1; i <= cfg.n_blocks; ++i) {
      const std::string b = cat("block", i, ".");

      if (cfg.quadruplets && !quads.empty()) {
        auto base = affine(m, p(b + "quad.down.W"));     // project, then gather
        auto msg = gather_rows(base, qsrc);              // [Q, qh]
        auto rbf_q = gather_rows(affine(rbf, p(b + "quad.rbf.W")), qmid);
        auto ang = affine(quad_ang, p(b + "quad.ang.W"));
        msg = mul(mul(msg, rbf_q), ang);
        auto agg = scaled(b + "quad", msg, segment_sum(msg, qout, E));
        if (cfg.symmetric_mp && g.symmetric)
          agg = scaled(b + "quad.sym", agg,
                       add(agg, gather_rows(agg, g.reverse_edge)));
        m = residual(m, affine(agg, p(b + "quad.up.W")));
      }

      {
        auto base = affine(m, p(b + "trip.down.W"));
        auto msg = gather_rows(base, tin);  // [T, th]
        auto rbf_t = gather_rows(affine(rbf, p(b + "trip.rbf.W")), tin);
        auto ang = affine(trip_ang, p(b + "trip.ang.W"));
        msg = mul(mul(msg, rbf_t), ang);
        auto agg = scaled(b + "trip", msg, segment_sum(msg, tout, E));
        if (cfg.symmetric_mp && g.symmetric)
          agg = scaled(b + "trip.sym", agg,
                       add(agg, gather_rows(agg, g.reverse_edge)));
        m = residual(m, affine(agg, p(b + "trip.up.W")));
      }

      if (cfg.atom_edge) {
        auto pair = concat_cols(
            std::vector<TP>{gather_rows(h, tgt), gather_rows(h, src)});
        auto upd = mul(activation(affine(pair, p(b + "ae.h.W"), p(b + "ae.h.b")),
                                  Nonlinearity::scaled_silu),
                       affine(rbf, p(b + "ae.rbf.W")));
        m = residual(m, upd);
      }

      m = ffn(b + "mres", m);

      if (cfg.edge_atom) {
        auto msg = mul(affine(m, p(b + "ea.down.W")),
                       affine(rbf, p(b + "ea.rbf.W")));  // [E, H]
        auto agg = scaled(b + "ea", msg, segment_sum(msg, tgt, N));
        h = residual(h, activation(affine(agg, p(b + "ea.out.W"),
                                          p(b + "ea.out.b")),
                                   Nonlinearity::scaled_silu));
      }

      if (cfg.atom_atom) {
        auto msg = mul(gather_rows(affine(h, p(b + "aa.W")), src),
                       affine(rbf, p(b + "aa.rbf.W")));  // [E, H]
        auto agg = scaled(b + "aa", msg, segment_sum(msg, tgt, N));
        h = residual(h, activation(affine(agg, p(b + "aa.out.W"),
                                          p(b + "aa.out.b")),
                                   Nonlinearity::scaled_silu));
      }

      h = ffn(b + "hres", h);
      h_states.push_back(h);
      m_states.push_back(m);
      res.block_rms[cat("block", i, ".h")] = rms_of(h);
      res.block_rms[cat("block", i, ".m")] = rms_of(m);
    }

    // ---- outputs ----
    TP e_atoms, f_edges;
    TP e_feat_sum, f_feat_sum;
    for (int t = 0; t <= cfg.n_blocks; ++t) {
      const std::string o = cat("out", t, ".");
      const TP& ht = h_states[t];
      const TP& mt = m_states[t];
      auto msg = mul(mt, affine(rbf, p(o + "rbfE.W")));
      auto xe = scaled(o + "energy", msg, segment_sum(msg, tgt, N));  // [N, He]
      auto feat = affine(xe, p(o + "edgeE.W"));
      if (cfg.atom_emb_in_output)
        feat = add(feat, affine(ht, p(o + "atomE.W")));
      feat = activation(feat, Nonlinearity::scaled_silu);  // [N, out]
      TP ffeat;
      if (want_force_head) {
        ffeat = activation(affine(mul(mt, affine(rbf, p(o + "rbfF.W"))),
                                  p(o + "edgeF.W")),
                           Nonlinearity::scaled_silu);  // [E, out]
      }
      if (cfg.global_output_mlp) {
        e_feat_sum = e_feat_sum ? add(e_feat_sum, feat) : feat;
        if (want_force_head)
          f_feat_sum = f_feat_sum ? add(f_feat_sum, ffeat) : ffeat;
      } else {
        auto et = affine(feat, p(o + "headE.W"), p(o + "headE.b"));
        e_atoms = e_atoms ? add(e_atoms, et) : et;
        if (want_force_head) {
          auto ft = affine(ffeat, p(o + "headF.W"), p(o + "headF.b"));
          f_edges = f_edges ? add(f_edges, ft) : ft;
        }
      }
    }
    if (cfg.global_output_mlp) {
      e_atoms = affine(activation(affine(e_feat_sum, p("outmlp.E.W1"),
                                         p("outmlp.E.b1")),
                                  Nonlinearity::scaled_silu),
                       p("outmlp.E.W2"), p("outmlp.E.b2"));  // [N, 1]
      if (want_force_head)
        f_edges = affine(activation(affine(f_feat_sum, p("outmlp.F.W1"),
                                           p("outmlp.F.b1")),
                                    Nonlinearity::scaled_silu),
                         p("outmlp.F.W2"), p("outmlp.F.b2"));  // [E, 1]
    }

    res.energy = reduce_sum(e_atoms);  // [1]
    res.energy_value = double(res.energy->values[0]);
    if (want_force_head) {
      res.forces = segment_sum(scale_rows(geom.dir, f_edges), tgt, N);
      res.force_values.resize(N);
      for (std::size_t i = 0; i < N; ++i)
        for (int k = 0; k < 3; ++k)
          res.force_values[i][k] = double(res.forces->values[i * 3 + k]);
    }
    return res;
  }
};

using Model = ModelT<double>;

// ---------------------------------------------------------------------------
// Flop estimate for one forward pass over a graph of the given size; counts
// only dense multiply-accumulate terms (2 flops each).
// ---------------------------------------------------------------------------

inline double count_flops_estimate(const ModelConfig& cfg, std::size_t n_atoms,
                                   std::size_t n_edges, std::size_t n_triplets,
                                   std::size_t n_quads) {
  const double N = double(n_atoms), E = double(n_edges);
  const double T = double(n_triplets), Q = double(n_quads);
  const double H = cfg.atom_hidden, He = cfg.edge_hidden;
  const double th = cfg.trip_hidden, qh = cfg.quad_hidden;
  const double nr = cfg.basis.n_radial, rp = cfg.rbf_embed;
  const double out = cfg.out_hidden, L1 = cfg.basis.max_degree + 1;
  const double qa = double(cfg.basis.quad_angular_size());

  double f = 2 * E * nr * rp + 2 * E * (2 * H + rp) * He;  // embedding
  for (int i = 0; i < cfg.n_blocks; ++i) {
    if (cfg.quadruplets)
      f += 2 * E * He * qh + 2 * E * nr * qh + 2 * Q * qa * qh + 3 * Q * qh +
           2 * E * qh * He;
    f += 2 * E * He * th + 2 * E * nr * th + 2 * T * L1 * th + 3 * T * th +
         2 * E * th * He;
    if (cfg.atom_edge) f += 2 * E * 2 * H * He + 2 * E * nr * He + E * He;
    if (cfg.edge_atom)
      f += 2 * E * He * H + 2 * E * nr * H + E * H + 2 * N * H * H;
    if (cfg.atom_atom)
      f += 2 * N * H * H + 2 * E * nr * H + E * H + 2 * N * H * H;
    f += 4 * E * He * He + 4 * N * H * H;  // residual FFNs
  }
  const double stages = cfg.n_blocks + 1;
  f += stages * (2 * E * nr * He + E * He + 2 * N * He * out);
  if (cfg.atom_emb_in_output) f += stages * 2 * N * H * out;
  if (cfg.force_mode == ForceMode::direct)
    f += stages * (2 * E * nr * He + E * He + 2 * E * He * out);
  if (cfg.global_output_mlp) {
    f += 2 * N * out * out + 2 * N * out;
    if (cfg.force_mode == ForceMode::direct)
      f += 2 * E * out * out + 2 * E * out;
  } else {
    f += stages * 2 * N * out;
    if (cfg.force_mode == ForceMode::direct) f += stages * 2 * E * out;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Checkpointing: parameters and scaling factors in one archive, the
// architecture config in a JSON file alongside (path + ".json").
// ---------------------------------------------------------------------------

template <typename Real>
void save_checkpoint(const ModelT<Real>& model, const std::string& path) {
  Archive ar;
  for (const auto& [name, t] : model.params)
    ar["param/" + name] = to_entry(t);
  for (const auto& [site, f] : model.scaling) {
    ArchiveEntry e;
    e.shape = {1};
    e.values = {f};
    ar["scaling/" + site] = e;
  }
  save_archive(path, ar);
  nlohmann::json j = model.cfg;
  std::ofstream out(path + ".json");
  GNOC_CHECK(out.good(), CheckpointError,
             cat("cannot write config json beside ", path));
  out << j.dump(2) << "\n";
}

template <typename Real>
ModelT<Real> load_checkpoint(const std::string& path) {
  std::ifstream in(path + ".json");
  GNOC_CHECK(in.good(), CheckpointError,
             cat("missing config json beside ", path));
  nlohmann::json j = nlohmann::json::parse(in, nullptr, true, true);
  ModelConfig cfg = j.get<ModelConfig>();
  ModelT<Real> model(cfg);
  Archive ar = load_archive(path);
  std::size_t used = 0;
  for (auto& [name, t] : model.params) {
    auto it = ar.find("param/" + name);
    GNOC_CHECK(it != ar.end(), CheckpointError,
               cat("checkpoint lacks parameter ", name));
    GNOC_CHECK(it->second.shape == t->shape, CheckpointError,
               cat("checkpoint shape mismatch for ", name));
    auto loaded = from_entry<Real>(it->second);
    t->values = std::move(loaded->values);
    ++used;
  }
  model.scaling.clear();
  for (const auto& [key, e] : ar) {
    if (key.rfind("scaling/", 0) == 0) {
      GNOC_CHECK(e.values.size() == 1, CheckpointError,
                 cat("bad scaling entry ", key));
      model.scaling[key.substr(8)] = e.values[0];
      ++used;
    }
  }
  GNOC_CHECK(used == ar.size(), CheckpointError,
             "checkpoint holds entries unknown to this architecture");
  return model;
}

}  // namespace gnoc
