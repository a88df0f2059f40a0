#pragma once

// Declarative config shared by all CLI subcommands: one JSON document
// (comments allowed) with optional sections. Resolution is total — unknown
// keys or sections are errors, never silently ignored.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnoc/analysis.hpp"
#include "gnoc/common.hpp"
#include "gnoc/datasets.hpp"
#include "gnoc/model.hpp"
#include "gnoc/training.hpp"

namespace gnoc {

inline nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  GNOC_CHECK(in.good(), ConfigError, cat("cannot open config: ", path));
  try {
    return nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(cat(path, ": ", e.what()));
  }
}

inline void check_keys(const nlohmann::json& j,
                       const std::set<std::string>& allowed,
                       const std::string& where) {
  GNOC_CHECK(j.is_object(), ConfigError, cat(where, ": expected an object"));
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key))
      throw ConfigError(cat(where, ": unknown key \"", key, "\""));
  }
}

namespace detail {

inline const std::set<std::string>& model_keys() {
  static const std::set<std::string> keys{
      "graph",          "k_emb",        "k_qint",
      "radial_basis",   "n_radial",     "cutoff",
      "envelope_p",     "angular_basis", "max_degree",
      "atom_hidden",    "edge_hidden",  "trip_hidden",
      "quad_hidden",    "rbf_embed",    "out_hidden",
      "n_blocks",       "max_z",        "force_mode",
      "quadruplets",    "atom_edge",    "edge_atom",
      "atom_atom",      "atom_emb_in_output", "global_output_mlp",
      "symmetric_mp",   "scaling_factors"};
  return keys;
}

inline const std::set<std::string>& train_keys() {
  static const std::set<std::string> keys{
      "epochs",        "batch_size",      "lr",
      "warmup_steps",  "plateau_factor",  "plateau_patience",
      "plateau_threshold", "lr_min",      "clip_norm",
      "energy_weight", "force_weight",    "beta1",
      "beta2",         "eps",             "weight_decay",
      "normalizer",    "target_val_force_mae", "evals_per_epoch",
      "n_workers",     "seed",            "checkpoint_dir"};
  return keys;
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& slot,
                const std::string& where) {
  if (!j.contains(key)) return;
  try {
    slot = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(cat(where, ".", key, ": ", e.what()));
  }
}

}  // namespace detail

// Pulls a named section from the root document; missing sections resolve to
// defaults, unknown sections are rejected.
inline nlohmann::json config_section(const nlohmann::json& root,
                                     const std::string& name) {
  check_keys(root, {"dataset", "split", "model", "train", "relax", "grid"},
             "config");
  if (!root.contains(name)) return nlohmann::json::object();
  return root.at(name);
}

inline ToyDatasetConfig parse_dataset_section(const nlohmann::json& root) {
  const auto j = config_section(root, "dataset");
  check_keys(j,
             {"potential", "n_trajectories", "n_frames", "steps_per_frame",
              "min_atoms", "max_atoms", "pbc_mode", "z_lo", "z_hi",
              "n_palette", "box_lo", "box_hi", "min_sep", "step_size", "noise",
              "max_step", "seed"},
             "config.dataset");
  ToyDatasetConfig c;
  if (j.contains("potential")) {
    const std::string p = j.at("potential").get<std::string>();
    if (p == "lennard_jones")
      c.potential = ToyPotentialKind::lennard_jones;
    else if (p == "morse")
      c.potential = ToyPotentialKind::morse;
    else
      throw ConfigError(cat("config.dataset.potential: unknown kind \"", p,
                            "\" (lennard_jones, morse)"));
  }
  const std::string w = "config.dataset";
  detail::read_field(j, "n_trajectories", c.n_trajectories, w);
  detail::read_field(j, "n_frames", c.n_frames, w);
  detail::read_field(j, "steps_per_frame", c.steps_per_frame, w);
  detail::read_field(j, "min_atoms", c.min_atoms, w);
  detail::read_field(j, "max_atoms", c.max_atoms, w);
  detail::read_field(j, "pbc_mode", c.pbc_mode, w);
  detail::read_field(j, "z_lo", c.z_lo, w);
  detail::read_field(j, "z_hi", c.z_hi, w);
  detail::read_field(j, "n_palette", c.n_palette, w);
  detail::read_field(j, "box_lo", c.box_lo, w);
  detail::read_field(j, "box_hi", c.box_hi, w);
  detail::read_field(j, "min_sep", c.min_sep, w);
  detail::read_field(j, "step_size", c.step_size, w);
  detail::read_field(j, "noise", c.noise, w);
  detail::read_field(j, "max_step", c.max_step, w);
  detail::read_field(j, "seed", c.seed, w);
  c.validate();
  return c;
}

inline SplitConfig parse_split_section(const nlohmann::json& root) {
  const auto j = config_section(root, "split");
  check_keys(j, {"train_frac", "same_traj_every", "seed"}, "config.split");
  SplitConfig c;
  detail::read_field(j, "train_frac", c.train_frac, "config.split");
  detail::read_field(j, "same_traj_every", c.same_traj_every, "config.split");
  detail::read_field(j, "seed", c.seed, "config.split");
  return c;
}

inline ModelConfig parse_model_section(const nlohmann::json& root) {
  const auto j = config_section(root, "model");
  check_keys(j, detail::model_keys(), "config.model");
  ModelConfig c = j.get<ModelConfig>();
  c.validate();
  return c;
}

inline TrainConfig parse_train_section(const nlohmann::json& root) {
  const auto j = config_section(root, "train");
  check_keys(j, detail::train_keys(), "config.train");
  return j.get<TrainConfig>();  // from_json validates
}

inline RelaxConfig parse_relax_section(const nlohmann::json& root) {
  const auto j = config_section(root, "relax");
  check_keys(j,
             {"method", "max_force_evals", "fmax_tol", "step0", "max_move",
              "diverge_fmax", "history", "record_trajectory"},
             "config.relax");
  RelaxConfig c;
  if (j.contains("method")) {
    const std::string m = j.at("method").get<std::string>();
    if (m == "lbfgs")
      c.method = RelaxMethod::lbfgs;
    else if (m == "gd_linehalve")
      c.method = RelaxMethod::gd_linehalve;
    else
      throw ConfigError(cat("config.relax.method: unknown method \"", m,
                            "\" (lbfgs, gd_linehalve)"));
  }
  const std::string w = "config.relax";
  detail::read_field(j, "max_force_evals", c.max_force_evals, w);
  detail::read_field(j, "fmax_tol", c.fmax_tol, w);
  detail::read_field(j, "step0", c.step0, w);
  detail::read_field(j, "max_move", c.max_move, w);
  detail::read_field(j, "diverge_fmax", c.diverge_fmax, w);
  detail::read_field(j, "history", c.history, w);
  detail::read_field(j, "record_trajectory", c.record_trajectory, w);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Grid spec: variant toggles plus dataset derivations for the aspect suite
// ---------------------------------------------------------------------------

// Declarative derivation of one grid dataset from the base frame pool:
// restrict the element inventory, restrict system size, or subsample.
struct GridDatasetSpec {
  std::string id;
  std::vector<int> elements;  // empty: no element restriction
  int min_atoms = 0;          // 0: no restriction
  int max_atoms = 0;
  int sample = 0;  // 0: keep all; else deterministic random subset
  std::uint64_t sample_seed = 0;
};

struct GridSpec {
  GridConfig run;
  std::vector<GridVariant> variants;
  std::vector<GridDatasetSpec> datasets;
};

inline GridSpec parse_grid_section(const nlohmann::json& root) {
  const auto j = config_section(root, "grid");
  check_keys(j,
             {"baseline_seeds", "ablation_seeds", "seed0", "n_workers",
              "measure_throughput", "throughput", "variants", "datasets"},
             "config.grid");
  GridSpec spec;
  const std::string w = "config.grid";
  detail::read_field(j, "baseline_seeds", spec.run.baseline_seeds, w);
  detail::read_field(j, "ablation_seeds", spec.run.ablation_seeds, w);
  detail::read_field(j, "seed0", spec.run.seed0, w);
  detail::read_field(j, "n_workers", spec.run.n_workers, w);
  detail::read_field(j, "measure_throughput", spec.run.measure_throughput, w);
  if (j.contains("throughput")) {
    const auto& t = j.at("throughput");
    check_keys(t, {"batch_size", "n_batches", "warmup", "n_workers"},
               "config.grid.throughput");
    detail::read_field(t, "batch_size", spec.run.throughput.batch_size,
                       "config.grid.throughput");
    detail::read_field(t, "n_batches", spec.run.throughput.n_batches,
                       "config.grid.throughput");
    detail::read_field(t, "warmup", spec.run.throughput.warmup,
                       "config.grid.throughput");
    detail::read_field(t, "n_workers", spec.run.throughput.n_workers,
                       "config.grid.throughput");
  }
  spec.run.validate();

  const auto base_model = nlohmann::json(parse_model_section(root));
  const auto base_train = nlohmann::json(parse_train_section(root));

  GNOC_CHECK(j.contains("variants") && j.at("variants").is_array() &&
                 !j.at("variants").empty(),
             ConfigError, "config.grid.variants: need a non-empty array");
  std::set<std::string> seen_variants;
  for (const auto& vj : j.at("variants")) {
    check_keys(vj, {"id", "baseline", "exclude_from_correlation", "model",
                    "train"},
               "config.grid.variants[]");
    GNOC_CHECK(vj.contains("id"), ConfigError,
               "config.grid.variants[]: missing id");
    GridVariant var;
    var.id = vj.at("id").get<std::string>();
    GNOC_CHECK(seen_variants.insert(var.id).second, ConfigError,
               cat("config.grid.variants: duplicate id \"", var.id, "\""));
    const std::string vw = cat("config.grid.variants[", var.id, "]");
    detail::read_field(vj, "baseline", var.baseline, vw);
    detail::read_field(vj, "exclude_from_correlation",
                       var.exclude_from_correlation, vw);
    auto mj = base_model;
    if (vj.contains("model")) {
      check_keys(vj.at("model"), detail::model_keys(), cat(vw, ".model"));
      mj.update(vj.at("model"));
    }
    var.model = mj.get<ModelConfig>();
    var.model.validate();
    auto tj = base_train;
    if (vj.contains("train")) {
      check_keys(vj.at("train"), detail::train_keys(), cat(vw, ".train"));
      tj.update(vj.at("train"));
    }
    var.train = tj.get<TrainConfig>();
    spec.variants.push_back(std::move(var));
  }

  GNOC_CHECK(j.contains("datasets") && j.at("datasets").is_array() &&
                 !j.at("datasets").empty(),
             ConfigError, "config.grid.datasets: need a non-empty array");
  std::set<std::string> seen_datasets;
  for (const auto& dj : j.at("datasets")) {
    check_keys(dj, {"id", "elements", "min_atoms", "max_atoms", "sample",
                    "sample_seed"},
               "config.grid.datasets[]");
    GNOC_CHECK(dj.contains("id"), ConfigError,
               "config.grid.datasets[]: missing id");
    GridDatasetSpec ds;
    ds.id = dj.at("id").get<std::string>();
    GNOC_CHECK(seen_datasets.insert(ds.id).second, ConfigError,
               cat("config.grid.datasets: duplicate id \"", ds.id, "\""));
    const std::string dw = cat("config.grid.datasets[", ds.id, "]");
    detail::read_field(dj, "elements", ds.elements, dw);
    detail::read_field(dj, "min_atoms", ds.min_atoms, dw);
    detail::read_field(dj, "max_atoms", ds.max_atoms, dw);
    detail::read_field(dj, "sample", ds.sample, dw);
    detail::read_field(dj, "sample_seed", ds.sample_seed, dw);
    GNOC_CHECK(ds.min_atoms >= 0 && ds.max_atoms >= 0 && ds.sample >= 0,
               ConfigError, cat(dw, ": restrictions must be non-negative"));
    spec.datasets.push_back(std::move(ds));
  }
  return spec;
}

// Applies one derivation spec to the base frame pool.
inline std::vector<AtomicSystem> derive_frames(
    const std::vector<AtomicSystem>& frames, const GridDatasetSpec& spec) {
  auto keep = [&](const AtomicSystem& fr) {
    const int n = int(fr.size());
    if (spec.min_atoms && n < spec.min_atoms) return false;
    if (spec.max_atoms && n > spec.max_atoms) return false;
    if (!spec.elements.empty())
      for (int z : fr.atomic_numbers)
        if (std::find(spec.elements.begin(), spec.elements.end(), z) ==
            spec.elements.end())
          return false;
    return true;
  };
  auto out = filter_frames(frames, keep);
  if (spec.sample && std::size_t(spec.sample) < out.size())
    out = sample_frames(out, std::size_t(spec.sample), spec.sample_seed);
  return out;
}

// Materializes every grid dataset: derive from the pool, then split so train
// and validation stay trajectory-disjoint. Empty cells are config errors.
inline std::vector<GridDataset> build_grid_datasets(
    const std::vector<AtomicSystem>& frames,
    const std::vector<GridDatasetSpec>& specs, const SplitConfig& split) {
  std::vector<GridDataset> out;
  for (const auto& spec : specs) {
    const auto derived = derive_frames(frames, spec);
    const auto parts = split_dataset(derived, {}, split);
    GNOC_CHECK(!parts.train.empty() && !parts.val_id.empty(), ConfigError,
               cat("grid dataset \"", spec.id,
                   "\": derivation left an empty train or validation split"));
    GridDataset ds;
    ds.id = spec.id;
    ds.train = parts.train;
    ds.val = parts.val_id;
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace gnoc
