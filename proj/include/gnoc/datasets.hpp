#pragma once

// Toy relaxation datasets: a smooth pair potential with analytic forces, a
// noisy steepest-descent trajectory generator built on it, deterministic
// train/validation splitting, subsetting helpers, an order-independent
// corpus digest, and a plain-text frame format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gnoc/basis.hpp"
#include "gnoc/common.hpp"
#include "gnoc/geometry.hpp"

namespace gnoc {

// ---------------------------------------------------------------------------
// Pair potential (Lennard-Jones or Morse), smoothly truncated by the same
// C2 polynomial envelope the model's radial basis uses. Species parameters
// are small deterministic tables over the atomic number with
// Lorentz-Berthelot-style mixing.
// ---------------------------------------------------------------------------

enum class ToyPotentialKind { lennard_jones, morse };

struct ToyLabels {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

struct ToyPotential {
  ToyPotentialKind kind = ToyPotentialKind::lennard_jones;
  double cutoff = 6.0;
  int envelope_p = 5;

  static double sigma_of(int z) { return 1.8 + 0.05 * double(z % 7); }
  static double epsilon_of(int z) { return 0.08 + 0.02 * double(z % 5); }

  // pair energy and its derivative dV/dr, envelope included
  void pair(int z1, int z2, double r, double* v, double* dv) const {
    GNOC_CHECK(r > 0.0, ContractError, "toy potential: nonpositive distance");
    const double s = 0.5 * (sigma_of(z1) + sigma_of(z2));
    const double e = std::sqrt(epsilon_of(z1) * epsilon_of(z2));
    double v0, dv0;
    if (kind == ToyPotentialKind::lennard_jones) {
      const double sr2 = s * s / (r * r);
      const double sr6 = sr2 * sr2 * sr2;
      const double sr12 = sr6 * sr6;
      v0 = 4.0 * e * (sr12 - sr6);
      dv0 = 4.0 * e * (-12.0 * sr12 + 6.0 * sr6) / r;
    } else {
      const double r0 = 1.12 * s;
      const double a = 1.7 / s;
      const double x = std::exp(-a * (r - r0));
      v0 = e * (1.0 - x) * (1.0 - x) - e;
      dv0 = 2.0 * e * (1.0 - x) * a * x;
    }
    const double u = polynomial_envelope(r, cutoff, envelope_p);
    *v = v0 * u;
    if (dv) *dv = dv0 * u + v0 * polynomial_envelope_deriv(r, cutoff, envelope_p);
  }

  // Total energy and analytic forces, minimum-image summed: each unordered
  // atom pair contributes one term at its nearest periodic image, matching
  // the neighbor-graph convention. The cutoff graph lists every such pair in
  // both directions, hence the half weight on the energy.
  ToyLabels evaluate(const AtomicSystem& sys) const {
    ToyLabels out;
    out.forces.assign(sys.size(), Vec3{0, 0, 0});
    if (sys.size() < 2 && !sys.periodic()) return out;
    const NeighborGraph g = build_cutoff_graph(sys, cutoff);
    for (const Edge& ed : g.edges) {
      double v, dv;
      pair(sys.atomic_numbers[ed.target], sys.atomic_numbers[ed.source],
           ed.dist, &v, &dv);
      out.energy += 0.5 * v;
      out.forces[ed.target] = out.forces[ed.target] + dv * ed.dir;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Trajectory generation: packed random slab systems relaxed by noisy
// steepest descent under the toy potential, with per-frame labels.
// ---------------------------------------------------------------------------

struct ToyDatasetConfig {
  ToyPotentialKind potential = ToyPotentialKind::lennard_jones;
  int n_trajectories = 8;
  int n_frames = 12;       // recorded frames per trajectory
  int steps_per_frame = 4;  // descent steps between recorded frames
  int min_atoms = 8;
  int max_atoms = 14;
  int pbc_mode = 2;        // 0 none, 1 slab, 2 fully periodic
  int z_lo = 1, z_hi = 12;  // atomic number range (inclusive)
  int n_palette = 0;  // >0: distinct elements drawn per trajectory, like a
                      // material; 0: every atom samples the full range
  double box_lo = 7.5, box_hi = 10.5;
  double min_sep = 1.7;
  double step_size = 0.02;
  double noise = 0.015;
  double max_step = 0.25;  // per-atom displacement clamp per descent step
  std::uint64_t seed = 0;

  void validate() const {
    GNOC_CHECK(n_trajectories >= 1 && n_frames >= 1 && steps_per_frame >= 0,
               ConfigError, "toy dataset: counts must be positive");
    GNOC_CHECK(min_atoms >= 2 && max_atoms >= min_atoms, ConfigError,
               "toy dataset: bad atom count range");
    GNOC_CHECK(z_lo >= 1 && z_hi >= z_lo, ConfigError,
               "toy dataset: bad atomic number range");
    GNOC_CHECK(n_palette >= 0 && n_palette <= z_hi - z_lo + 1, ConfigError,
               "toy dataset: n_palette exceeds the element range");
    GNOC_CHECK(box_lo > 0 && box_hi >= box_lo, ConfigError,
               "toy dataset: bad box range");
    GNOC_CHECK(pbc_mode >= 0 && pbc_mode <= 2, ConfigError,
               "toy dataset: pbc_mode must be 0, 1, or 2");
    GNOC_CHECK(min_sep > 0 && step_size > 0 && noise >= 0 && max_step > 0,
               ConfigError, "toy dataset: bad descent parameters");
  }
};

namespace detail {

inline AtomicSystem random_packed_system(const ToyDatasetConfig& cfg,
                                         std::mt19937_64& rng,
                                         const std::string& traj_id) {
  std::uniform_real_distribution<double> ubox(cfg.box_lo, cfg.box_hi);
  std::uniform_real_distribution<double> uf(0.0, 1.0);
  std::uniform_int_distribution<int> uz(cfg.z_lo, cfg.z_hi);
  std::uniform_int_distribution<int> un(cfg.min_atoms, cfg.max_atoms);

  AtomicSystem sys;
  sys.trajectory_id = traj_id;
  const double L = ubox(rng);
  sys.cell = {{{L, 0, 0}, {0, L, 0}, {0, 0, L}}};
  sys.pbc = cfg.pbc_mode == 0   ? std::array<bool, 3>{false, false, false}
            : cfg.pbc_mode == 1 ? std::array<bool, 3>{true, true, false}
                                : std::array<bool, 3>{true, true, true};
  const int n = un(rng);

  // optional per-trajectory element palette (partial Fisher-Yates draw)
  std::vector<int> palette;
  if (cfg.n_palette > 0) {
    std::vector<int> all(std::size_t(cfg.z_hi - cfg.z_lo + 1));
    std::iota(all.begin(), all.end(), cfg.z_lo);
    for (int k = 0; k < cfg.n_palette; ++k) {
      std::uniform_int_distribution<int> pick(k, int(all.size()) - 1);
      std::swap(all[std::size_t(k)], all[std::size_t(pick(rng))]);
    }
    palette.assign(all.begin(), all.begin() + cfg.n_palette);
  }
  auto draw_z = [&]() {
    if (palette.empty()) return uz(rng);
    std::uniform_int_distribution<int> pick(0, int(palette.size()) - 1);
    return palette[std::size_t(pick(rng))];
  };

  int attempts = 0;
  while (int(sys.positions.size()) < n) {
    GNOC_CHECK(++attempts < 100000, DatasetError,
               "toy dataset: packing failed; lower min_sep or atom count");
    const Vec3 p = frac_to_cart({uf(rng), uf(rng), uf(rng)}, sys.cell);
    bool ok = true;
    for (const auto& q : sys.positions)
      if (minimum_image(q, p, sys.cell, sys.pbc).dist < cfg.min_sep) {
        ok = false;
        break;
      }
    if (!ok) continue;
    sys.positions.push_back(p);
    sys.atomic_numbers.push_back(draw_z());
  }
  // bottom quarter of the slab is substrate-like: fixed, tag 0; the top
  // quarter is adsorbate-like: tag 1
  std::vector<std::size_t> order(sys.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sys.positions[a][2] < sys.positions[b][2];
  });
  sys.tags.assign(sys.size(), 0);
  sys.fixed.assign(sys.size(), 0);
  const std::size_t quarter = std::max<std::size_t>(1, sys.size() / 4);
  for (std::size_t i = 0; i < quarter; ++i) sys.fixed[order[i]] = 1;
  for (std::size_t i = sys.size() - quarter; i < sys.size(); ++i)
    sys.tags[order[i]] = 1;
  return sys;
}

}  // namespace detail

inline std::vector<AtomicSystem> generate_toy_dataset(
    const ToyDatasetConfig& cfg, int traj_id_base = 0) {
  cfg.validate();
  ToyPotential pot;
  pot.kind = cfg.potential;
  std::vector<AtomicSystem> frames;
  frames.reserve(std::size_t(cfg.n_trajectories) * cfg.n_frames);
  for (int t = 0; t < cfg.n_trajectories; ++t) {
    const std::string traj_id = cat("toy", traj_id_base + t);
    auto rng = make_rng(cfg.seed, cat("toy-traj:", traj_id));
    std::normal_distribution<double> jitter(0.0, cfg.noise);
    AtomicSystem sys = detail::random_packed_system(cfg, rng, traj_id);
    for (int f = 0; f < cfg.n_frames; ++f) {
      ToyLabels lab = pot.evaluate(sys);
      AtomicSystem frame = sys;
      frame.frame_index = f;
      frame.has_energy = true;
      frame.energy = lab.energy;
      frame.forces = lab.forces;
      frames.push_back(std::move(frame));
      for (int s = 0; s < cfg.steps_per_frame; ++s) {
        ToyLabels cur = pot.evaluate(sys);
        for (std::size_t i = 0; i < sys.size(); ++i) {
          if (sys.fixed[i]) continue;
          Vec3 d = cfg.step_size * cur.forces[i];
          const double n = norm(d);
          if (n > cfg.max_step) d = (cfg.max_step / n) * d;
          d = d + Vec3{jitter(rng), jitter(rng), jitter(rng)};
          sys.positions[i] = sys.positions[i] + d;
        }
      }
    }
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Splits and subsetting
// ---------------------------------------------------------------------------

struct DatasetSplits {
  std::vector<AtomicSystem> train;
  std::vector<AtomicSystem> val_id;        // held-out trajectories
  std::vector<AtomicSystem> val_same_traj;  // held-out frames of train trajectories
  std::vector<AtomicSystem> val_ood;       // frames from the ood corpus
};

struct SplitConfig {
  double train_frac = 0.7;  // fraction of trajectories used for training
  int same_traj_every = 7;  // every n-th train frame held out instead
  std::uint64_t seed = 0;
};

inline DatasetSplits split_dataset(const std::vector<AtomicSystem>& id_frames,
                                   const std::vector<AtomicSystem>& ood_frames,
                                   const SplitConfig& cfg = {}) {
  GNOC_CHECK(cfg.train_frac > 0.0 && cfg.train_frac <= 1.0, ConfigError,
             "split: train_frac must be in (0, 1]");
  GNOC_CHECK(cfg.same_traj_every >= 2, ConfigError,
             "split: same_traj_every must be >= 2");
  DatasetSplits out;
  for (const auto& fr : id_frames) {
    const std::uint64_t h =
        hash_combine(cfg.seed, fnv1a(cat("traj:", fr.trajectory_id)));
    const double u = double(h >> 11) * 0x1.0p-53;
    if (u < cfg.train_frac) {
      if ((fr.frame_index + 1) % cfg.same_traj_every == 0)
        out.val_same_traj.push_back(fr);
      else
        out.train.push_back(fr);
    } else {
      out.val_id.push_back(fr);
    }
  }
  out.val_ood = ood_frames;
  return out;
}

// Stable frame identity hash over labels, geometry, and metadata.
inline std::uint64_t frame_hash(const AtomicSystem& fr) {
  std::uint64_t h = fnv1a("frame");
  auto mix = [&h](const void* p, std::size_t n) { h = fnv1a(p, n, h); };
  h = fnv1a(fr.trajectory_id, h);
  const std::int64_t fidx = fr.frame_index;
  mix(&fidx, sizeof(fidx));
  for (int z : fr.atomic_numbers) mix(&z, sizeof(z));
  for (const auto& p : fr.positions) mix(p.data(), sizeof(double) * 3);
  mix(fr.cell.data(), sizeof(double) * 9);
  const int pb = fr.pbc[0] + 2 * fr.pbc[1] + 4 * fr.pbc[2];
  mix(&pb, sizeof(pb));
  if (fr.has_energy) mix(&fr.energy, sizeof(fr.energy));
  for (const auto& f : fr.forces) mix(f.data(), sizeof(double) * 3);
  for (int t : fr.tags) mix(&t, sizeof(t));
  for (std::uint8_t x : fr.fixed) mix(&x, sizeof(x));
  return h;
}

// Order-independent digest of a frame set (sum of per-frame hashes).
inline std::uint64_t dataset_digest(const std::vector<AtomicSystem>& frames) {
  std::uint64_t d = 0x9e3779b97f4a7c15ULL;
  for (const auto& fr : frames) d += frame_hash(fr);
  return d;
}

// Deterministic subsample: order frames by (hash, traj, frame) and keep the
// first n. Independent of the input ordering.
inline std::vector<AtomicSystem> sample_frames(
    const std::vector<AtomicSystem>& frames, std::size_t n,
    std::uint64_t seed = 0) {
  std::vector<std::size_t> idx(frames.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::uint64_t> key(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i)
    key[i] = hash_combine(seed, frame_hash(frames[i]));
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (key[a] != key[b]) return key[a] < key[b];
    if (frames[a].trajectory_id != frames[b].trajectory_id)
      return frames[a].trajectory_id < frames[b].trajectory_id;
    return frames[a].frame_index < frames[b].frame_index;
  });
  std::vector<AtomicSystem> out;
  out.reserve(std::min(n, frames.size()));
  for (std::size_t i = 0; i < idx.size() && out.size() < n; ++i)
    out.push_back(frames[idx[i]]);
  return out;
}

template <typename Pred>
std::vector<AtomicSystem> filter_frames(const std::vector<AtomicSystem>& frames,
                                        Pred pred) {
  std::vector<AtomicSystem> out;
  for (const auto& fr : frames)
    if (pred(fr)) out.push_back(fr);
  return out;
}

// ---------------------------------------------------------------------------
// Corpus profile
// ---------------------------------------------------------------------------

struct DatasetProfile {
  std::size_t n_frames = 0;
  std::size_t n_trajectories = 0;
  std::size_t min_atoms = 0, max_atoms = 0;
  double mean_atoms = 0.0;
  double energy_mean = 0.0, energy_std = 0.0;
  double force_rms = 0.0;
  std::size_t n_fixed_atoms = 0, n_adsorbate_atoms = 0;
};

inline DatasetProfile profile_dataset(const std::vector<AtomicSystem>& frames) {
  DatasetProfile p;
  p.n_frames = frames.size();
  if (frames.empty()) return p;
  std::map<std::string, bool> trajs;
  double esum = 0, esq = 0, fsq = 0;
  std::size_t nat = 0, nE = 0, nF = 0;
  p.min_atoms = frames[0].size();
  for (const auto& fr : frames) {
    trajs[fr.trajectory_id] = true;
    p.min_atoms = std::min(p.min_atoms, fr.size());
    p.max_atoms = std::max(p.max_atoms, fr.size());
    nat += fr.size();
    if (fr.has_energy) {
      esum += fr.energy;
      esq += fr.energy * fr.energy;
      ++nE;
    }
    for (const auto& f : fr.forces) {
      fsq += dot(f, f);
      nF += 3;
    }
    for (int t : fr.tags) p.n_adsorbate_atoms += t == 1;
    for (std::uint8_t x : fr.fixed) p.n_fixed_atoms += x != 0;
  }
  p.n_trajectories = trajs.size();
  p.mean_atoms = double(nat) / double(frames.size());
  if (nE) {
    p.energy_mean = esum / double(nE);
    p.energy_std = std::sqrt(std::max(0.0, esq / double(nE) -
                                               p.energy_mean * p.energy_mean));
  }
  if (nF) p.force_rms = std::sqrt(fsq / double(nF));
  return p;
}

// ---------------------------------------------------------------------------
// Plain-text frame format.
//
//   # gnoc-frames 1
//   # frame <traj_id> <frame_index> <n_atoms> <has_energy> <energy> <px py pz>
//   # cell <c00 c01 c02 c10 c11 c12 c20 c21 c22>
//   <z> <x> <y> <z> <fx> <fy> <fz> <tag> <fixed>     (n_atoms rows)
//
// Atom rows may carry 7, 8, or 9 columns; omitted tag/fixed default to 0.
// All reals are written with %.17g so round trips are exact.
// ---------------------------------------------------------------------------

inline void write_frames(const std::string& path,
                         const std::vector<AtomicSystem>& frames) {
  std::ofstream out(path);
  GNOC_CHECK(out.good(), DatasetError, cat("cannot open for writing: ", path));
  out << "# gnoc-frames 1\n";
  for (const auto& fr : frames) {
    fr.validate();
    const std::string tid = fr.trajectory_id.empty() ? "-" : fr.trajectory_id;
    GNOC_CHECK(tid.find_first_of(" \t\n") == std::string::npos, DatasetError,
               cat("trajectory id contains whitespace: '", tid, "'"));
    out << "# frame " << tid << " " << fr.frame_index << " "
        << fr.size() << " " << (fr.has_energy ? 1 : 0) << " "
        << fmt_g17(fr.has_energy ? fr.energy : 0.0) << " " << int(fr.pbc[0])
        << " " << int(fr.pbc[1]) << " " << int(fr.pbc[2]) << "\n";
    out << "# cell";
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out << " " << fmt_g17(fr.cell[i][j]);
    out << "\n";
    for (std::size_t i = 0; i < fr.size(); ++i) {
      const Vec3 f = fr.forces.empty() ? Vec3{0, 0, 0} : fr.forces[i];
      out << fr.atomic_numbers[i] << " " << fmt_g17(fr.positions[i][0]) << " "
          << fmt_g17(fr.positions[i][1]) << " " << fmt_g17(fr.positions[i][2])
          << " " << fmt_g17(f[0]) << " " << fmt_g17(f[1]) << " " << fmt_g17(f[2])
          << " " << (fr.tags.empty() ? 0 : fr.tags[i]) << " "
          << (fr.fixed.empty() ? 0 : int(fr.fixed[i])) << "\n";
    }
  }
  GNOC_CHECK(out.good(), DatasetError, cat("write failed: ", path));
}

inline std::vector<AtomicSystem> read_frames(const std::string& path) {
  std::ifstream in(path);
  GNOC_CHECK(in.good(), DatasetError, cat("cannot open: ", path));
  std::vector<AtomicSystem> frames;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) -> void {
    throw DatasetError(cat(path, ":", lineno, ": ", what));
  };
  GNOC_CHECK(std::getline(in, line) && line.rfind("# gnoc-frames 1", 0) == 0,
             DatasetError, cat(path, ": missing gnoc-frames header"));
  ++lineno;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream fs(line);
    std::string hash, word;
    std::size_t n_atoms = 0;
    AtomicSystem fr;
    int he = 0, p0 = 0, p1 = 0, p2 = 0;
    fs >> hash >> word;
    if (hash != "#" || word != "frame") fail("expected '# frame' header");
    if (!(fs >> fr.trajectory_id >> fr.frame_index >> n_atoms >> he >>
          fr.energy >> p0 >> p1 >> p2))
      fail("malformed frame header");
    if (fr.trajectory_id == "-") fr.trajectory_id.clear();
    fr.has_energy = he != 0;
    fr.pbc = {p0 != 0, p1 != 0, p2 != 0};
    if (!std::getline(in, line)) fail("missing cell line");
    ++lineno;
    std::istringstream cs(line);
    cs >> hash >> word;
    if (hash != "#" || word != "cell") fail("expected '# cell' line");
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (!(cs >> fr.cell[i][j])) fail("malformed cell line");
    fr.positions.reserve(n_atoms);
    for (std::size_t i = 0; i < n_atoms; ++i) {
      if (!std::getline(in, line)) fail("unexpected end of file in atom block");
      ++lineno;
      std::istringstream as(line);
      int z, tag = 0, fixed = 0;
      Vec3 x, f;
      if (!(as >> z >> x[0] >> x[1] >> x[2] >> f[0] >> f[1] >> f[2]))
        fail("atom row needs at least 7 columns");
      as >> tag >> fixed;  // optional columns
      std::string extra;
      if (as >> extra) fail("atom row has more than 9 columns");
      fr.atomic_numbers.push_back(z);
      fr.positions.push_back(x);
      fr.forces.push_back(f);
      fr.tags.push_back(tag);
      fr.fixed.push_back(std::uint8_t(fixed != 0));
    }
    fr.validate();
    frames.push_back(std::move(fr));
  }
  return frames;
}

}  // namespace gnoc
