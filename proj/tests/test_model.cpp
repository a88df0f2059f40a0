#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>

#include "gnoc/model.hpp"
#include "oracles.hpp"

using namespace gnoc;
using Catch::Approx;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.graph = GraphMode::knn;
  c.k_emb = 6;
  c.k_qint = 3;
  c.basis.n_radial = 8;
  c.basis.cutoff = 6.0;
  c.basis.max_degree = 2;
  c.atom_hidden = 16;
  c.edge_hidden = 20;
  c.trip_hidden = 6;
  c.quad_hidden = 4;
  c.rbf_embed = 5;
  c.out_hidden = 10;
  c.n_blocks = 2;
  c.max_z = 20;
  return c;
}

std::string temp_path(const char* stem) {
  return std::string("/tmp/gnoc_model_test_") + stem;
}

}  // namespace

TEST_CASE("model forward is deterministic and well formed") {
  auto rng = make_rng(11, "model-det");
  auto sys = oracle::random_system(rng, 10, 2);
  Model model(tiny_config(), 7);

  auto r1 = model.forward(sys);
  auto r2 = model.forward(sys);
  CHECK(r1.energy_value == r2.energy_value);
  REQUIRE(r1.forces);
  REQUIRE(r1.forces->shape == Shape{10, 3});
  REQUIRE(r1.force_values.size() == 10);
  CHECK(std::memcmp(r1.forces->values.data(), r2.forces->values.data(),
                    sizeof(double) * r1.forces->values.size()) == 0);
  CHECK(r1.stats.n_edges > 0);
  CHECK(r1.n_triplets > 0);
  CHECK(r1.n_quadruplets > 0);
  CHECK(r1.block_rms.size() == 4);  // h and m for 2 blocks

  Model again(tiny_config(), 7);
  CHECK(again.param_digest() == model.param_digest());
  Model other(tiny_config(), 8);
  CHECK(other.param_digest() != model.param_digest());
}

TEST_CASE("energy is invariant and forces covariant under rigid motion") {
  auto rng = make_rng(12, "model-inv");
  for (auto mode : {ForceMode::direct, ForceMode::gradient}) {
    DYNAMIC_SECTION("force mode " << (mode == ForceMode::direct ? "direct"
                                                                : "gradient")) {
      auto cfg = tiny_config();
      cfg.force_mode = mode;
      Model model(cfg, 3);
      for (int pbc : {0, 2}) {
        auto sys = oracle::random_system(rng, 9, pbc);
        const auto R = oracle::random_rotation(rng);
        const Vec3 shift{1.3, -0.7, 2.1};
        auto rot = oracle::rotate_system(sys, R, shift);

        auto r0 = model.forward(sys);
        auto r1 = model.forward(rot);
        CHECK_THAT(r1.energy_value,
                   WithinRel(r0.energy_value, 1e-9));
        for (std::size_t i = 0; i < sys.size(); ++i) {
          const Vec3 want = mat_vec(r0.force_values[i], R);
          for (int k = 0; k < 3; ++k)
            CHECK_THAT(r1.force_values[i][k], WithinAbs(want[k], 1e-9));
        }
      }
    }
  }
}

TEST_CASE("permutation relabeling leaves predictions unchanged") {
  auto rng = make_rng(13, "model-perm");
  auto sys = oracle::random_system(rng, 8, 2);
  std::vector<std::size_t> perm(sys.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  AtomicSystem shuffled = sys;
  for (std::size_t i = 0; i < sys.size(); ++i) {
    shuffled.positions[perm[i]] = sys.positions[i];
    shuffled.atomic_numbers[perm[i]] = sys.atomic_numbers[i];
  }
  Model model(tiny_config(), 5);
  auto r0 = model.forward(sys);
  auto r1 = model.forward(shuffled);
  CHECK_THAT(r1.energy_value, WithinRel(r0.energy_value, 1e-12));
  for (std::size_t i = 0; i < sys.size(); ++i)
    for (int k = 0; k < 3; ++k)
      CHECK_THAT(r1.force_values[perm[i]][k],
                 WithinAbs(r0.force_values[i][k], 1e-12));
}

TEST_CASE("energy is extensive over far-apart replicas") {
  auto rng = make_rng(14, "model-ext");
  auto sys = oracle::random_system(rng, 6, 0);
  AtomicSystem twin = sys;
  for (const auto& p : sys.positions) {
    twin.positions.push_back(p + Vec3{200.0, 0.0, 0.0});
  }
  twin.atomic_numbers.insert(twin.atomic_numbers.end(),
                             sys.atomic_numbers.begin(),
                             sys.atomic_numbers.end());
  Model model(tiny_config(), 4);
  auto r1 = model.forward(sys);
  auto r2 = model.forward(twin);
  CHECK_THAT(r2.energy_value, WithinRel(2.0 * r1.energy_value, 1e-12));
}

TEST_CASE("gradient-mode forces match finite differences of the energy") {
  auto rng = make_rng(15, "model-fd");
  auto cfg = tiny_config();
  cfg.force_mode = ForceMode::gradient;
  cfg.graph = GraphMode::cutoff;  // knn truncation is not differentiable
  Model model(cfg, 9);

  for (int pbc : {0, 2}) {
    auto sys = oracle::random_system(rng, 7, pbc);
    auto res = model.forward(sys);
    double fscale = 1.0;
    for (const auto& f : res.force_values)
      fscale = std::max({fscale, std::abs(f[0]), std::abs(f[1]), std::abs(f[2])});
    const double h = 1e-5;
    for (std::size_t i = 0; i < sys.size(); i += 2) {
      for (int k = 0; k < 3; ++k) {
        AtomicSystem plus = sys, minus = sys;
        plus.positions[i][k] += h;
        minus.positions[i][k] -= h;
        const double ep =
            model.forward(plus, {.compute_forces = false}).energy_value;
        const double em =
            model.forward(minus, {.compute_forces = false}).energy_value;
        const double fd = -(ep - em) / (2 * h);
        CHECK_THAT(res.force_values[i][k], WithinAbs(fd, 1e-4 * fscale));
      }
    }
  }
}

TEST_CASE("every architecture toggle changes the prediction") {
  auto rng = make_rng(16, "model-tog");
  auto sys = oracle::random_system(rng, 9, 2);
  const auto base_cfg = tiny_config();
  Model base(base_cfg, 21);
  const double e0 = base.forward(sys).energy_value;

  auto differs = [&](ModelConfig cfg) {
    Model m(cfg, 21);
    return m.forward(sys).energy_value != e0;
  };

  auto cfg = base_cfg;
  cfg.quadruplets = false;
  CHECK(differs(cfg));
  cfg = base_cfg;
  cfg.atom_edge = false;
  CHECK(differs(cfg));
  cfg = base_cfg;
  cfg.edge_atom = false;
  CHECK(differs(cfg));
  cfg = base_cfg;
  cfg.atom_atom = false;
  CHECK(differs(cfg));
  cfg = base_cfg;
  cfg.atom_emb_in_output = false;
  CHECK(differs(cfg));
  cfg = base_cfg;
  cfg.global_output_mlp = false;
  CHECK(differs(cfg));
  cfg = base_cfg;
  cfg.symmetric_mp = false;
  CHECK(differs(cfg));
  cfg = base_cfg;
  cfg.basis.angular = AngularBasisKind::spherical_harmonics;
  CHECK(differs(cfg));
  cfg = base_cfg;
  cfg.basis.radial = RadialBasisKind::bessel0;
  CHECK(differs(cfg));
}

TEST_CASE("legacy per-block output heads") {
  auto cfg = tiny_config();
  cfg.global_output_mlp = false;
  Model model(cfg, 2);
  CHECK(model.params.count("out0.headE.W") == 1);
  CHECK(model.params.count("out2.headF.b") == 1);
  CHECK(model.params.count("outmlp.E.W1") == 0);
  auto rng = make_rng(17, "model-legacy");
  auto sys = oracle::random_system(rng, 7, 0);
  auto res = model.forward(sys);
  CHECK(std::isfinite(res.energy_value));

  Model global(tiny_config(), 2);
  CHECK(global.params.count("outmlp.E.W1") == 1);
  CHECK(global.params.count("out0.headE.W") == 0);
}

TEST_CASE("parameter counts are frozen") {
  // catches accidental architecture drift
  CHECK(Model(tiny_config()).num_params() == 12270);
  CHECK(Model(ModelConfig{}).num_params() == 7256706);
}

TEST_CASE("empirical scaling factors roughly preserve message magnitude") {
  auto rng = make_rng(18, "model-scale");
  std::vector<AtomicSystem> fit_set, probe_set;
  for (int i = 0; i < 3; ++i) fit_set.push_back(oracle::random_system(rng, 10, 2));
  for (int i = 0; i < 2; ++i) probe_set.push_back(oracle::random_system(rng, 10, 2));

  Model model(tiny_config(), 6);
  model.fit_scaling_factors(fit_set);
  const auto sites = model.scaling_sites();
  REQUIRE(model.scaling.size() == sites.size());

  // On the data the factors were fitted to, the rescaled aggregation must
  // exactly preserve rms; on a fresh probe it should stay within a factor ~2.
  for (auto& [site, ratio] : model.scaling_check(fit_set))
    CHECK_THAT(ratio, WithinAbs(1.0, 1e-9));
  for (auto& [site, ratio] : model.scaling_check(probe_set)) {
    CHECK(ratio > 0.3);
    CHECK(ratio < 3.0);
  }

  // each target edge aggregates ~ (k_emb - 1) triplet messages, so the raw
  // factor should land near 1/sqrt(k) and certainly below 1
  for (const auto& [site, f] : model.scaling) {
    if (site.find("trip") != std::string::npos && site.find("sym") == std::string::npos) {
      CHECK(f > 0.05);
      CHECK(f < 1.0);
    }
  }
}

TEST_CASE("flop estimate scales linearly with graph size") {
  const auto cfg = tiny_config();
  const double f1 = count_flops_estimate(cfg, 10, 60, 300, 500);
  const double f2 = count_flops_estimate(cfg, 20, 120, 600, 1000);
  CHECK_THAT(f2, WithinRel(2.0 * f1, 1e-12));

  auto no_quad = cfg;
  no_quad.quadruplets = false;
  CHECK(count_flops_estimate(no_quad, 10, 60, 300, 500) < f1);
  CHECK(f1 > 0);
}

TEST_CASE("checkpoint round trip restores the model bit for bit") {
  auto rng = make_rng(19, "model-ckpt");
  auto sys = oracle::random_system(rng, 8, 2);
  Model model(tiny_config(), 13);
  model.fit_scaling_factors({sys});
  const double e0 = model.forward(sys).energy_value;

  const std::string path = temp_path("ckpt.bin");
  save_checkpoint(model, path);
  auto loaded = load_checkpoint<double>(path);
  CHECK(loaded.param_digest() == model.param_digest());
  CHECK(loaded.scaling == model.scaling);
  CHECK(loaded.forward(sys).energy_value == e0);

  SECTION("missing file") {
    CHECK_THROWS_AS(load_checkpoint<double>(temp_path("nope.bin")),
                    CheckpointError);
  }
  SECTION("foreign entries are rejected") {
    Archive ar = load_archive(path);
    ArchiveEntry junk;
    junk.shape = {1};
    junk.values = {0.0};
    ar["param/not.a.param"] = junk;
    save_archive(path, ar);
    CHECK_THROWS_AS(load_checkpoint<double>(path), CheckpointError);
  }
  SECTION("missing parameter is rejected") {
    Archive ar = load_archive(path);
    ar.erase("param/emb.atom");
    save_archive(path, ar);
    CHECK_THROWS_AS(load_checkpoint<double>(path), CheckpointError);
  }
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST_CASE("training-path wiring exposes differentiable outputs") {
  auto rng = make_rng(20, "model-train-wire");
  auto sys = oracle::random_system(rng, 8, 2);

  SECTION("direct mode records energy and forces on the ambient tape") {
    Model model(tiny_config(), 3);
    TapeScope scope;
    auto res = model.forward(sys);
    REQUIRE(res.energy->tape == &scope.tape());
    REQUIRE(res.forces->tape == &scope.tape());
    // scalar loss = energy + sum of squared forces
    auto loss = add(res.energy, reduce_sum(square_(res.forces)));
    backward(loss);
    auto g = model.params.at("emb.atom")->grad;
    REQUIRE(!g.empty());
    double mag = 0;
    for (double v : g) mag += std::abs(v);
    CHECK(mag > 0);
  }

  SECTION("gradient mode detaches the returned tensors") {
    auto cfg = tiny_config();
    cfg.force_mode = ForceMode::gradient;
    Model model(cfg, 3);
    auto res = model.forward(sys);
    CHECK(res.energy->tape == nullptr);
    CHECK(res.forces->tape == nullptr);
    // parameter grads stay clear for the trainer to own
    for (const auto& [name, t] : model.params) CHECK(t->grad.empty());
  }
}

TEST_CASE("model input validation and degenerate systems") {
  Model model(tiny_config(), 1);

  SECTION("atomic number outside the embedding table") {
    AtomicSystem sys;
    sys.atomic_numbers = {1, 99};
    sys.positions = {{0, 0, 0}, {1.5, 0, 0}};
    sys.cell = {{{10, 0, 0}, {0, 10, 0}, {0, 0, 10}}};
    sys.pbc = {false, false, false};
    CHECK_THROWS_AS(model.forward(sys), ContractError);
  }

  SECTION("single atom gives a finite energy and zero force") {
    AtomicSystem sys;
    sys.atomic_numbers = {6};
    sys.positions = {{0, 0, 0}};
    sys.cell = {{{10, 0, 0}, {0, 10, 0}, {0, 0, 10}}};
    sys.pbc = {false, false, false};
    auto res = model.forward(sys);
    CHECK(std::isfinite(res.energy_value));
    for (int k = 0; k < 3; ++k)
      CHECK(res.force_values[0][k] == 0.0);
  }

  SECTION("non-finite parameters are detected") {
    auto rng = make_rng(21, "model-nan");
    auto sys = oracle::random_system(rng, 6, 0);
    Model poisoned(tiny_config(), 1);
    poisoned.params.at("outmlp.E.W2")->values[0] =
        std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(poisoned.forward(sys), NumericError);
  }
}

TEST_CASE("single-precision instantiation tracks the double model") {
  auto rng = make_rng(22, "model-float");
  auto sys = oracle::random_system(rng, 8, 2);
  Model d(tiny_config(), 30);
  ModelT<float> f(tiny_config(), 30);
  const double ed = d.forward(sys).energy_value;
  const double ef = f.forward(sys).energy_value;
  CHECK_THAT(ef, WithinAbs(ed, 1e-2 * std::max(1.0, std::abs(ed))));
}
