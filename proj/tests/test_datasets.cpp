#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include "gnoc/datasets.hpp"
#include "oracles.hpp"

using namespace gnoc;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::string temp_path(const char* stem) {
  return std::string("/tmp/gnoc_datasets_test_") + stem;
}

// Independent minimum-image pair energy: one term per unordered atom pair at
// its nearest periodic image (the convention the neighbor graph uses).
double brute_pair_energy(const AtomicSystem& sys, const ToyPotential& pot) {
  double e = 0.0;
  const std::size_t n = sys.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double r = oracle::min_image_5cube(sys.positions[i],
                                               sys.positions[j], sys.cell,
                                               sys.pbc)
                           .dist;
      if (r > pot.cutoff) continue;
      double v;
      pot.pair(sys.atomic_numbers[i], sys.atomic_numbers[j], r, &v, nullptr);
      e += v;
    }
  return e;
}

std::vector<std::uint64_t> hash_multiset(const std::vector<AtomicSystem>& fr) {
  std::vector<std::uint64_t> h;
  for (const auto& f : fr) h.push_back(frame_hash(f));
  std::sort(h.begin(), h.end());
  return h;
}

std::set<std::string> traj_ids(const std::vector<AtomicSystem>& fr) {
  std::set<std::string> s;
  for (const auto& f : fr) s.insert(f.trajectory_id);
  return s;
}

ToyDatasetConfig small_cfg() {
  ToyDatasetConfig cfg;
  cfg.n_trajectories = 6;
  cfg.n_frames = 8;
  cfg.steps_per_frame = 3;
  cfg.min_atoms = 6;
  cfg.max_atoms = 10;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("toy pair terms match explicit formulas") {
  ToyPotential lj;
  const int z1 = 3, z2 = 8;
  const double s = 0.5 * (ToyPotential::sigma_of(z1) + ToyPotential::sigma_of(z2));
  const double e =
      std::sqrt(ToyPotential::epsilon_of(z1) * ToyPotential::epsilon_of(z2));

  SECTION("lennard-jones value and derivative") {
    for (double r : {0.8 * s, s, std::pow(2.0, 1.0 / 6.0) * s, 1.9 * s}) {
      double v, dv;
      lj.pair(z1, z2, r, &v, &dv);
      const double sr6 = std::pow(s / r, 6.0);
      const double bare = 4.0 * e * (sr6 * sr6 - sr6);
      const double u = polynomial_envelope(r, lj.cutoff, lj.envelope_p);
      const double du = polynomial_envelope_deriv(r, lj.cutoff, lj.envelope_p);
      const double dbare = 4.0 * e * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r;
      CHECK_THAT(v, WithinRel(bare * u, 1e-13) || WithinAbs(0.0, 1e-15));
      CHECK_THAT(dv, WithinRel(dbare * u + bare * du, 1e-13));
    }
    // at r = sigma the bare potential crosses zero
    double v, dv;
    lj.pair(z1, z2, s, &v, &dv);
    CHECK_THAT(v, WithinAbs(0.0, 1e-14));
  }

  SECTION("morse value and derivative") {
    ToyPotential mo;
    mo.kind = ToyPotentialKind::morse;
    const double r0 = 1.12 * s, a = 1.7 / s;
    for (double r : {0.8 * r0, r0, 1.5 * r0}) {
      double v, dv;
      mo.pair(z1, z2, r, &v, &dv);
      const double x = std::exp(-a * (r - r0));
      const double bare = e * (1.0 - x) * (1.0 - x) - e;
      const double dbare = 2.0 * e * (1.0 - x) * a * x;
      const double u = polynomial_envelope(r, mo.cutoff, mo.envelope_p);
      const double du = polynomial_envelope_deriv(r, mo.cutoff, mo.envelope_p);
      CHECK_THAT(v, WithinRel(bare * u + 0.0, 1e-12));
      CHECK_THAT(dv, WithinRel(dbare * u + bare * du, 1e-12));
    }
    // at r0 the bare minimum has value -e and zero bare slope
    double v, dv;
    mo.pair(z1, z2, r0, &v, &dv);
    const double u = polynomial_envelope(r0, mo.cutoff, mo.envelope_p);
    const double du = polynomial_envelope_deriv(r0, mo.cutoff, mo.envelope_p);
    CHECK_THAT(v, WithinRel(-e * u, 1e-13));
    CHECK_THAT(dv, WithinRel(-e * du, 1e-12));
  }

  SECTION("pair derivative against finite differences") {
    for (auto kind : {ToyPotentialKind::lennard_jones, ToyPotentialKind::morse}) {
      ToyPotential pot;
      pot.kind = kind;
      for (double r : {2.1, 3.0, 4.5, 5.7}) {
        const double h = 1e-6;
        double vp, vm, v, dv;
        pot.pair(z1, z2, r + h, &vp, nullptr);
        pot.pair(z1, z2, r - h, &vm, nullptr);
        pot.pair(z1, z2, r, &v, &dv);
        CHECK_THAT(dv, WithinAbs((vp - vm) / (2 * h), 1e-6));
      }
    }
  }

  SECTION("cutoff and contract") {
    double v = 1, dv = 1;
    lj.pair(z1, z2, lj.cutoff, &v, &dv);
    CHECK(v == 0.0);
    CHECK(dv == 0.0);
    lj.pair(z1, z2, lj.cutoff + 1.0, &v, &dv);
    CHECK(v == 0.0);
    CHECK_THROWS_AS(lj.pair(z1, z2, 0.0, &v, &dv), ContractError);
  }
}

TEST_CASE("toy potential energy matches a brute-force image sum") {
  auto rng = make_rng(5, "toy-brute");
  for (auto kind : {ToyPotentialKind::lennard_jones, ToyPotentialKind::morse}) {
    ToyPotential pot;
    pot.kind = kind;
    for (int pbc_mode : {0, 2}) {
      for (int rep = 0; rep < 4; ++rep) {
        auto sys = oracle::random_system(rng, 7, pbc_mode, 1.6);
        const double eb = brute_pair_energy(sys, pot);
        const auto lab = pot.evaluate(sys);
        CHECK_THAT(lab.energy, WithinRel(eb, 1e-11) || WithinAbs(eb, 1e-12));
        REQUIRE(lab.forces.size() == sys.size());
      }
    }
  }
}

TEST_CASE("toy analytic forces match finite differences of the energy") {
  auto rng = make_rng(6, "toy-fd");
  for (auto kind : {ToyPotentialKind::lennard_jones, ToyPotentialKind::morse}) {
    ToyPotential pot;
    pot.kind = kind;
    auto sys = oracle::random_system(rng, 8, 2, 1.6);
    const auto lab = pot.evaluate(sys);
    const double h = 1e-6;
    for (std::size_t i = 0; i < sys.size(); i += 2) {
      for (int c = 0; c < 3; ++c) {
        AtomicSystem plus = sys, minus = sys;
        plus.positions[i][c] += h;
        minus.positions[i][c] -= h;
        const double fd =
            -(pot.evaluate(plus).energy - pot.evaluate(minus).energy) / (2 * h);
        CHECK_THAT(lab.forces[i][c], WithinAbs(fd, 1e-6));
      }
    }
  }
}

TEST_CASE("single atom and isolated dimer behave") {
  ToyPotential pot;
  AtomicSystem sys;
  sys.atomic_numbers = {4};
  sys.positions = {{0, 0, 0}};
  auto lab = pot.evaluate(sys);
  CHECK(lab.energy == 0.0);
  REQUIRE(lab.forces.size() == 1);
  CHECK(norm(lab.forces[0]) == 0.0);

  // dimer forces are equal and opposite along the axis
  sys.atomic_numbers = {4, 9};
  sys.positions = {{0, 0, 0}, {2.4, 0.3, -0.1}};
  lab = pot.evaluate(sys);
  CHECK_THAT(norm(lab.forces[0] + lab.forces[1]), WithinAbs(0.0, 1e-14));
  double v, dv;
  pot.pair(4, 9, norm(sys.positions[1] - sys.positions[0]), &v, &dv);
  CHECK_THAT(lab.energy, WithinRel(v, 1e-13));
}

TEST_CASE("trajectory generation is deterministic and labeled consistently") {
  const auto cfg = small_cfg();
  const auto frames = generate_toy_dataset(cfg);
  REQUIRE(frames.size() == std::size_t(cfg.n_trajectories) * cfg.n_frames);
  CHECK(dataset_digest(frames) == dataset_digest(generate_toy_dataset(cfg)));

  auto cfg2 = cfg;
  cfg2.seed = 4;
  CHECK(dataset_digest(frames) != dataset_digest(generate_toy_dataset(cfg2)));

  ToyPotential pot;
  pot.kind = cfg.potential;
  for (std::size_t k = 0; k < frames.size(); k += 7) {
    const auto& fr = frames[k];
    fr.validate();
    REQUIRE(fr.has_energy);
    const auto lab = pot.evaluate(fr);
    CHECK(fr.energy == lab.energy);  // labels are exactly the potential's output
    REQUIRE(fr.forces.size() == fr.size());
    for (std::size_t i = 0; i < fr.size(); ++i)
      CHECK(std::memcmp(fr.forces[i].data(), lab.forces[i].data(),
                        sizeof(double) * 3) == 0);
    for (int z : fr.atomic_numbers) {
      CHECK(z >= cfg.z_lo);
      CHECK(z <= cfg.z_hi);
    }
  }
}

TEST_CASE("trajectories descend and keep fixed atoms pinned") {
  auto cfg = small_cfg();
  cfg.n_frames = 10;
  cfg.steps_per_frame = 5;
  const auto frames = generate_toy_dataset(cfg);

  double first_sum = 0, last_sum = 0;
  for (const auto& fr : frames) {
    if (fr.frame_index == 0) first_sum += fr.energy;
    if (fr.frame_index == cfg.n_frames - 1) last_sum += fr.energy;
  }
  CHECK(last_sum < first_sum);

  // fixed atoms never move; every frame has fixed and adsorbate atoms
  std::map<std::string, const AtomicSystem*> first_frame;
  for (const auto& fr : frames) {
    std::size_t n_fixed = 0, n_ads = 0;
    for (std::size_t i = 0; i < fr.size(); ++i) {
      n_fixed += fr.fixed[i] != 0;
      n_ads += fr.tags[i] == 1;
    }
    CHECK(n_fixed >= 1);
    CHECK(n_ads >= 1);
    auto [it, fresh] = first_frame.try_emplace(fr.trajectory_id, &fr);
    if (fresh) continue;
    const AtomicSystem& f0 = *it->second;
    for (std::size_t i = 0; i < fr.size(); ++i)
      if (fr.fixed[i])
        CHECK(std::memcmp(fr.positions[i].data(), f0.positions[i].data(),
                          sizeof(double) * 3) == 0);
  }

  SECTION("pbc modes map through") {
    for (int mode : {0, 1, 2}) {
      auto c = small_cfg();
      c.pbc_mode = mode;
      c.n_trajectories = 1;
      c.n_frames = 2;
      const auto fs = generate_toy_dataset(c);
      const std::array<bool, 3> want =
          mode == 0 ? std::array<bool, 3>{false, false, false}
          : mode == 1 ? std::array<bool, 3>{true, true, false}
                      : std::array<bool, 3>{true, true, true};
      for (const auto& fr : fs) CHECK(fr.pbc == want);
    }
  }

  SECTION("config validation") {
    auto bad = small_cfg();
    bad.min_atoms = 1;
    CHECK_THROWS_AS(generate_toy_dataset(bad), ConfigError);
    bad = small_cfg();
    bad.pbc_mode = 3;
    CHECK_THROWS_AS(generate_toy_dataset(bad), ConfigError);
    bad = small_cfg();
    bad.z_lo = 0;
    CHECK_THROWS_AS(generate_toy_dataset(bad), ConfigError);
  }
}

TEST_CASE("splits partition by trajectory") {
  auto cfg = small_cfg();
  cfg.n_trajectories = 10;
  const auto id_frames = generate_toy_dataset(cfg);
  auto ood_cfg = small_cfg();
  ood_cfg.z_lo = 13;
  ood_cfg.z_hi = 20;
  ood_cfg.n_trajectories = 3;
  const auto ood_frames = generate_toy_dataset(ood_cfg, 100);

  SplitConfig sc;
  sc.same_traj_every = 4;
  const auto sp = split_dataset(id_frames, ood_frames, sc);

  // nothing lost, nothing duplicated
  std::vector<AtomicSystem> all = sp.train;
  all.insert(all.end(), sp.val_id.begin(), sp.val_id.end());
  all.insert(all.end(), sp.val_same_traj.begin(), sp.val_same_traj.end());
  CHECK(hash_multiset(all) == hash_multiset(id_frames));
  CHECK(hash_multiset(sp.val_ood) == hash_multiset(ood_frames));

  // trajectory-level separation
  const auto t_train = traj_ids(sp.train);
  const auto t_val = traj_ids(sp.val_id);
  for (const auto& t : t_train) CHECK(t_val.count(t) == 0);
  for (const auto& t : traj_ids(sp.val_same_traj)) CHECK(t_train.count(t) == 1);
  CHECK(!sp.train.empty());
  CHECK(!sp.val_id.empty());
  CHECK(!sp.val_same_traj.empty());

  // held-out frames of train trajectories are exactly every 4th
  for (const auto& fr : sp.val_same_traj) CHECK((fr.frame_index + 1) % 4 == 0);
  for (const auto& fr : sp.train) CHECK((fr.frame_index + 1) % 4 != 0);

  // deterministic and seed-sensitive
  const auto sp2 = split_dataset(id_frames, ood_frames, sc);
  CHECK(hash_multiset(sp2.train) == hash_multiset(sp.train));
  auto sc3 = sc;
  sc3.seed = 77;
  const auto sp3 = split_dataset(id_frames, ood_frames, sc3);
  CHECK(hash_multiset(sp3.train) != hash_multiset(sp.train));

  SECTION("train_frac 1 keeps every trajectory in train") {
    SplitConfig all_train;
    all_train.train_frac = 1.0;
    const auto s = split_dataset(id_frames, {}, all_train);
    CHECK(s.val_id.empty());
    CHECK(s.train.size() + s.val_same_traj.size() == id_frames.size());
  }

  SECTION("bad config throws") {
    SplitConfig bad;
    bad.train_frac = 0.0;
    CHECK_THROWS_AS(split_dataset(id_frames, {}, bad), ConfigError);
    bad = SplitConfig{};
    bad.same_traj_every = 1;
    CHECK_THROWS_AS(split_dataset(id_frames, {}, bad), ConfigError);
  }
}

TEST_CASE("digest is order independent and content sensitive") {
  auto frames = generate_toy_dataset(small_cfg());
  const auto d0 = dataset_digest(frames);

  auto shuffled = frames;
  std::mt19937_64 rng(99);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(dataset_digest(shuffled) == d0);

  auto tweaked = frames;
  tweaked[3].positions[0][1] += 1.0;
  CHECK(dataset_digest(tweaked) != d0);
  tweaked = frames;
  tweaked[5].tags[0] ^= 1;
  CHECK(dataset_digest(tweaked) != d0);
  tweaked = frames;
  tweaked[2].energy += 1e-9;
  CHECK(dataset_digest(tweaked) != d0);

  CHECK(dataset_digest({}) == dataset_digest(std::vector<AtomicSystem>{}));
}

TEST_CASE("sampling and filtering are deterministic") {
  const auto frames = generate_toy_dataset(small_cfg());

  const auto s1 = sample_frames(frames, 10, 1);
  REQUIRE(s1.size() == 10);
  auto shuffled = frames;
  std::mt19937_64 rng(7);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto s2 = sample_frames(shuffled, 10, 1);
  CHECK(hash_multiset(s1) == hash_multiset(s2));

  const auto s3 = sample_frames(frames, 10, 2);
  CHECK(hash_multiset(s3) != hash_multiset(s1));  // different seed, different pick

  CHECK(sample_frames(frames, frames.size() + 5, 0).size() == frames.size());
  CHECK(sample_frames(frames, 0, 0).empty());

  const auto small = filter_frames(
      frames, [](const AtomicSystem& f) { return f.size() <= 8; });
  std::size_t expect = 0;
  for (const auto& f : frames) expect += f.size() <= 8;
  CHECK(small.size() == expect);
  for (const auto& f : small) CHECK(f.size() <= 8);
}

TEST_CASE("profile reports hand-checked statistics") {
  AtomicSystem a;
  a.atomic_numbers = {1, 2};
  a.positions = {{0, 0, 0}, {2, 0, 0}};
  a.has_energy = true;
  a.energy = -1.0;
  a.forces = {{1, 2, 2}, {0, 0, 0}};  // squared sum 9
  a.tags = {0, 1};
  a.fixed = {1, 0};
  a.trajectory_id = "ta";

  AtomicSystem b = a;
  b.atomic_numbers = {1, 2, 3};
  b.positions = {{0, 0, 0}, {2, 0, 0}, {0, 2, 0}};
  b.energy = 3.0;
  b.forces = {{0, 0, 0}, {0, 3, 0}, {0, 0, 0}};  // squared sum 9
  b.tags = {0, 0, 1};
  b.fixed = {1, 1, 0};
  b.trajectory_id = "tb";

  const auto p = profile_dataset({a, b});
  CHECK(p.n_frames == 2);
  CHECK(p.n_trajectories == 2);
  CHECK(p.min_atoms == 2);
  CHECK(p.max_atoms == 3);
  CHECK_THAT(p.mean_atoms, WithinRel(2.5, 1e-15));
  CHECK_THAT(p.energy_mean, WithinRel(1.0, 1e-15));
  CHECK_THAT(p.energy_std, WithinRel(2.0, 1e-15));  // population std of {-1, 3}
  CHECK_THAT(p.force_rms, WithinRel(std::sqrt(18.0 / 15.0), 1e-15));
  CHECK(p.n_fixed_atoms == 3);
  CHECK(p.n_adsorbate_atoms == 2);

  CHECK(profile_dataset({}).n_frames == 0);
}

TEST_CASE("frame files round trip exactly") {
  auto frames = generate_toy_dataset(small_cfg());
  frames[0].trajectory_id.clear();  // exercise the empty-id placeholder
  const auto path = temp_path("roundtrip.txt");
  write_frames(path, frames);
  const auto back = read_frames(path);

  REQUIRE(back.size() == frames.size());
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto& x = frames[k];
    const auto& y = back[k];
    CHECK(y.trajectory_id == x.trajectory_id);
    CHECK(y.frame_index == x.frame_index);
    CHECK(y.atomic_numbers == x.atomic_numbers);
    CHECK(y.tags == x.tags);
    CHECK(y.fixed == x.fixed);
    CHECK(y.pbc == x.pbc);
    CHECK(y.has_energy == x.has_energy);
    CHECK(y.energy == x.energy);  // %.17g round trips doubles exactly
    REQUIRE(y.size() == x.size());
    CHECK(std::memcmp(y.cell.data(), x.cell.data(), sizeof(double) * 9) == 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(std::memcmp(y.positions[i].data(), x.positions[i].data(),
                        sizeof(double) * 3) == 0);
      CHECK(std::memcmp(y.forces[i].data(), x.forces[i].data(),
                        sizeof(double) * 3) == 0);
    }
  }
  CHECK(dataset_digest(back) == dataset_digest(frames));
  std::remove(path.c_str());
}

TEST_CASE("frame reader accepts 7 to 9 columns and rejects malformed input") {
  const auto path = temp_path("columns.txt");
  {
    std::ofstream out(path);
    out << "# gnoc-frames 1\n";
    out << "# frame tr 0 3 1 -2.5 0 0 0\n";
    out << "# cell 10 0 0 0 10 0 0 0 10\n";
    out << "1 0 0 0 0.5 0 0\n";            // 7 columns
    out << "2 2 0 0 -0.5 0 0 1\n";         // 8 columns
    out << "3 0 2 0 0 0 0 1 1\n";          // 9 columns
  }
  const auto frames = read_frames(path);
  REQUIRE(frames.size() == 1);
  const auto& fr = frames[0];
  CHECK(fr.trajectory_id == "tr");
  CHECK(fr.has_energy);
  CHECK(fr.energy == -2.5);
  REQUIRE(fr.size() == 3);
  CHECK(fr.tags == std::vector<int>{0, 1, 1});
  CHECK(fr.fixed == std::vector<std::uint8_t>{0, 0, 1});
  CHECK(fr.forces[0][0] == 0.5);
  std::remove(path.c_str());

  auto expect_throw = [&](const char* body) {
    std::ofstream out(path);
    out << body;
    out.close();
    CHECK_THROWS_AS(read_frames(path), DatasetError);
  };
  expect_throw("not a frames file\n");
  expect_throw("# gnoc-frames 1\n# frame tr 0 zzz 1 0 0 0 0\n");
  expect_throw(
      "# gnoc-frames 1\n# frame tr 0 1 1 0 0 0 0\n# cell 1 0 0 0 1 0 0 0\n");
  expect_throw(
      "# gnoc-frames 1\n# frame tr 0 2 1 0 0 0 0\n"
      "# cell 10 0 0 0 10 0 0 0 10\n1 0 0 0 0 0 0\n");  // truncated atom block
  expect_throw(
      "# gnoc-frames 1\n# frame tr 0 1 1 0 0 0 0\n"
      "# cell 10 0 0 0 10 0 0 0 10\n1 0 0 0 0 0 0 0 0 99\n");  // 10 columns
  std::remove(path.c_str());

  CHECK_THROWS_AS(read_frames("/tmp/gnoc_does_not_exist_12345.txt"),
                  DatasetError);
  CHECK_THROWS_AS(write_frames("/nonexistent_dir_000/x.txt",
                               generate_toy_dataset(small_cfg())),
                  DatasetError);

  // whitespace in a trajectory id cannot be serialized
  auto fr2 = generate_toy_dataset(small_cfg());
  fr2[0].trajectory_id = "has space";
  CHECK_THROWS_AS(write_frames(temp_path("bad_id.txt"), fr2), DatasetError);
  std::remove(temp_path("bad_id.txt").c_str());
}

TEST_CASE("per-trajectory element palettes restrict each system's elements") {
  ToyDatasetConfig cfg;
  cfg.n_trajectories = 10;
  cfg.n_frames = 2;
  cfg.steps_per_frame = 1;
  cfg.min_atoms = 8;
  cfg.max_atoms = 10;
  cfg.z_lo = 3;
  cfg.z_hi = 6;
  cfg.n_palette = 2;
  cfg.seed = 21;
  const auto frames = generate_toy_dataset(cfg);
  std::map<std::string, std::set<int>> by_traj;
  for (const auto& fr : frames)
    for (int z : fr.atomic_numbers) {
      CHECK(z >= 3);
      CHECK(z <= 6);
      by_traj[fr.trajectory_id].insert(z);
    }
  std::set<std::set<int>> distinct;
  for (const auto& [id, zs] : by_traj) {
    CHECK(zs.size() <= 2);
    distinct.insert(zs);
  }
  CHECK(distinct.size() > 1);  // palettes vary across trajectories

  // identical seeds reproduce identical palettes
  CHECK(dataset_digest(generate_toy_dataset(cfg)) == dataset_digest(frames));

  cfg.n_palette = 7;  // exceeds the 4-element range
  CHECK_THROWS_AS(generate_toy_dataset(cfg), ConfigError);
}
