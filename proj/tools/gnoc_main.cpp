// Command-line front door: dataset generation, profiling, training,
// evaluation, relaxation, and grid analysis over one shared config format.
//
// Exit codes: 0 success, 1 runtime failure, 2 malformed config or flags.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gnoc/analysis.hpp"
#include "gnoc/config.hpp"
#include "gnoc/datasets.hpp"
#include "gnoc/model.hpp"
#include "gnoc/threads.hpp"
#include "gnoc/training.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

using gnoc::cat;

std::string utc_now() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex_digest(std::uint64_t d) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "0x%016llx", (unsigned long long)d);
  return buf;
}

std::vector<int> element_inventory(const std::vector<gnoc::AtomicSystem>& fs) {
  std::set<int> zs;
  for (const auto& fr : fs)
    for (int z : fr.atomic_numbers) zs.insert(z);
  return {zs.begin(), zs.end()};
}

nlohmann::json profile_json(const std::vector<gnoc::AtomicSystem>& frames) {
  const auto p = gnoc::profile_dataset(frames);
  return nlohmann::json{{"n_frames", p.n_frames},
                        {"n_trajectories", p.n_trajectories},
                        {"min_atoms", p.min_atoms},
                        {"max_atoms", p.max_atoms},
                        {"mean_atoms", p.mean_atoms},
                        {"energy_mean", p.energy_mean},
                        {"energy_std", p.energy_std},
                        {"force_rms", p.force_rms},
                        {"n_fixed_atoms", p.n_fixed_atoms},
                        {"n_adsorbate_atoms", p.n_adsorbate_atoms},
                        {"elements", element_inventory(frames)},
                        {"digest", hex_digest(gnoc::dataset_digest(frames))}};
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  GNOC_CHECK(out.good(), gnoc::CheckpointError, cat("cannot write ", path));
  out << j.dump(2) << '\n';
  GNOC_CHECK(out.good(), gnoc::CheckpointError, cat("write failed: ", path));
}

// Run manifest: written under --out before any long work starts, finalized
// with the outcome so failures stay diagnosable.
struct Manifest {
  std::string path;
  nlohmann::json j;

  void start(const std::string& out_dir, const std::string& command,
             const nlohmann::json& resolved) {
    std::filesystem::create_directories(out_dir);
    path = out_dir + "/manifest.json";
    j = {{"command", command}, {"version", kVersion},
         {"out", out_dir},     {"started", utc_now()},
         {"config", resolved}, {"status", "running"}};
    write_json(path, j);
  }
  void note(const std::string& key, const nlohmann::json& v) {
    j[key] = v;
    write_json(path, j);
  }
  void finish_ok(const nlohmann::json& summary) {
    j["status"] = "ok";
    j["finished"] = utc_now();
    if (!summary.is_null()) j["summary"] = summary;
    write_json(path, j);
  }
  void finish_fail(const std::string& err) {
    if (path.empty()) return;
    j["status"] = "failed";
    j["error"] = err;
    j["finished"] = utc_now();
    write_json(path, j);
  }
};

struct CommonFlags {
  std::string config;
  std::string out;
  std::int64_t seed = -1;  // <0: keep config value
  int threads = 0;         // 0: keep config value
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required = true) {
  auto* c = cmd->add_option("-c,--config", f.config,
                            "config file (JSON, comments allowed)");
  if (config_required) c->required();
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--threads", f.threads, "bound internal parallelism");
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonFlags& f) {
  auto root = gnoc::load_config_file(f.config);
  auto cfg = gnoc::parse_dataset_section(root);
  const auto split_cfg = gnoc::parse_split_section(root);
  if (f.seed >= 0) cfg.seed = std::uint64_t(f.seed);

  Manifest man;
  man.start(f.out, "gen-data",
            {{"dataset",
              {{"potential",
                cfg.potential == gnoc::ToyPotentialKind::lennard_jones
                    ? "lennard_jones"
                    : "morse"},
               {"n_trajectories", cfg.n_trajectories},
               {"n_frames", cfg.n_frames},
               {"min_atoms", cfg.min_atoms},
               {"max_atoms", cfg.max_atoms},
               {"z_lo", cfg.z_lo},
               {"z_hi", cfg.z_hi},
               {"pbc_mode", cfg.pbc_mode},
               {"seed", cfg.seed}}},
             {"split",
              {{"train_frac", split_cfg.train_frac},
               {"same_traj_every", split_cfg.same_traj_every},
               {"seed", split_cfg.seed}}}});
  try {
    const auto frames = gnoc::generate_toy_dataset(cfg);
    const auto splits = gnoc::split_dataset(frames, {}, split_cfg);
    gnoc::write_frames(f.out + "/frames.txt", frames);
    gnoc::write_frames(f.out + "/train.txt", splits.train);
    gnoc::write_frames(f.out + "/val_id.txt", splits.val_id);
    gnoc::write_frames(f.out + "/val_same_traj.txt", splits.val_same_traj);

    auto prof = profile_json(frames);
    prof["splits"] = {
        {"train",
         {{"n_frames", splits.train.size()},
          {"digest", hex_digest(gnoc::dataset_digest(splits.train))}}},
        {"val_id",
         {{"n_frames", splits.val_id.size()},
          {"digest", hex_digest(gnoc::dataset_digest(splits.val_id))}}},
        {"val_same_traj",
         {{"n_frames", splits.val_same_traj.size()},
          {"digest", hex_digest(gnoc::dataset_digest(splits.val_same_traj))}}}};
    write_json(f.out + "/profile.json", prof);
    man.finish_ok({{"n_frames", frames.size()}, {"digest", prof["digest"]}});
    std::cout << "wrote " << frames.size() << " frames ("
              << splits.train.size() << " train, " << splits.val_id.size()
              << " val_id, " << splits.val_same_traj.size()
              << " val_same_traj) to " << f.out << "\n"
              << "digest " << prof["digest"].get<std::string>() << "\n";
    return 0;
  } catch (const std::exception& e) {
    man.finish_fail(e.what());
    throw;
  }
}

int cmd_profile(const CommonFlags& f, const std::string& data) {
  const auto frames = gnoc::read_frames(data);
  const auto prof = profile_json(frames);
  std::cout << prof.dump(2) << "\n";
  if (!f.out.empty()) {
    std::filesystem::create_directories(f.out);
    write_json(f.out + "/profile.json", prof);
  }
  return 0;
}

int cmd_train(const CommonFlags& f, const std::string& data,
              const std::string& val, bool resume) {
  auto root = gnoc::load_config_file(f.config);
  auto model_cfg = gnoc::parse_model_section(root);
  auto train_cfg = gnoc::parse_train_section(root);
  if (f.seed >= 0) train_cfg.seed = std::uint64_t(f.seed);
  if (f.threads > 0) train_cfg.n_workers = f.threads;
  train_cfg.checkpoint_dir = f.out;

  const auto train_frames = gnoc::read_frames(data);
  const auto val_frames = gnoc::read_frames(val);

  Manifest man;
  man.start(f.out, "train",
            {{"model", nlohmann::json(model_cfg)},
             {"train", nlohmann::json(train_cfg)}});
  man.note("data",
           {{"train",
             {{"path", data},
              {"n_frames", train_frames.size()},
              {"digest", hex_digest(gnoc::dataset_digest(train_frames))}}},
            {"val",
             {{"path", val},
              {"n_frames", val_frames.size()},
              {"digest", hex_digest(gnoc::dataset_digest(val_frames))}}},
            {"resume", resume}});
  try {
    gnoc::Model model(model_cfg, train_cfg.seed);
    const auto res =
        gnoc::train_model(model, train_frames, val_frames, train_cfg, resume);
    nlohmann::json metrics{
        {"best_val_force_mae", res.best_val_force_mae},
        {"best_val_energy_mae", res.best_val_energy_mae},
        {"best_epoch", res.best_epoch},
        {"epochs_run", res.epochs_run},
        {"early_stopped", res.early_stopped},
        {"param_digest", hex_digest(model.param_digest())}};
    if (!res.curves.empty()) {
      metrics["final_val_force_mae"] = res.curves.back().val_force_mae;
      metrics["final_val_energy_mae"] = res.curves.back().val_energy_mae;
      metrics["final_train_loss"] = res.curves.back().train_loss;
    }
    write_json(f.out + "/metrics.json", metrics);
    man.finish_ok(metrics);
    std::cout << "trained " << res.epochs_run << " epoch(s); best val force MAE "
              << res.best_val_force_mae << " (epoch " << res.best_epoch
              << ")\nparam digest "
              << metrics["param_digest"].get<std::string>() << "\n";
    return 0;
  } catch (const std::exception& e) {
    man.finish_fail(e.what());
    throw;
  }
}

gnoc::Normalizer sidecar_normalizer(const std::string& ckpt) {
  const std::string suffix = ".ckpt";
  std::string stem = ckpt;
  if (stem.size() > suffix.size() &&
      stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
    stem.resize(stem.size() - suffix.size());
  const std::string norm_path = stem + ".norm.json";
  if (std::filesystem::exists(norm_path))
    return gnoc::load_normalizer(norm_path);
  return {};
}

int cmd_eval(const CommonFlags& f, const std::string& ckpt,
             const std::string& data) {
  auto model = gnoc::load_checkpoint<double>(ckpt);
  const auto norm = sidecar_normalizer(ckpt);
  const auto frames = gnoc::read_frames(data);
  const int workers = f.threads > 0 ? f.threads : 1;
  const auto m = gnoc::evaluate_model(model, frames, norm, workers);
  const nlohmann::json out{
      {"energy_mae", m.energy_mae}, {"force_mae", m.force_mae},
      {"force_cos", m.force_cos},   {"efwt", m.efwt},
      {"n_frames", m.n_frames},     {"n_atoms", m.n_atoms},
      {"checkpoint", ckpt},
      {"data_digest", hex_digest(gnoc::dataset_digest(frames))}};
  std::cout << out.dump(2) << "\n";
  if (!f.out.empty()) {
    std::filesystem::create_directories(f.out);
    write_json(f.out + "/eval.json", out);
  }
  return 0;
}

int cmd_relax(const CommonFlags& f, const std::string& ckpt,
              const std::string& data) {
  auto root = gnoc::load_config_file(f.config);
  const auto relax_cfg = gnoc::parse_relax_section(root);
  auto model = gnoc::load_checkpoint<double>(ckpt);
  const auto norm = sidecar_normalizer(ckpt);
  const auto frames = gnoc::read_frames(data);
  const int workers = f.threads > 0 ? f.threads : 1;

  Manifest man;
  man.start(f.out, "relax",
            {{"relax",
              {{"max_force_evals", relax_cfg.max_force_evals},
               {"fmax_tol", relax_cfg.fmax_tol}}},
             {"checkpoint", ckpt},
             {"data", data}});
  try {
    auto fn = gnoc::model_force_fn(model, norm);
    std::vector<gnoc::RelaxResult> results(frames.size());
    gnoc::parallel_chunks(frames.size(), std::size_t(workers),
                          [&](std::size_t b, std::size_t e) {
                            for (std::size_t i = b; i < e; ++i)
                              results[i] = gnoc::relax(frames[i], fn, relax_cfg);
                          });

    std::vector<gnoc::AtomicSystem> relaxed;
    std::ofstream csv(f.out + "/relax.csv");
    GNOC_CHECK(csv.good(), gnoc::CheckpointError,
               cat("cannot write ", f.out, "/relax.csv"));
    csv << "index,trajectory_id,frame_index,converged,n_force_evals,"
           "final_fmax,final_energy\n";
    std::size_t converged = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      auto& r = results[i];
      converged += r.converged;
      csv << i << ',' << (r.system.trajectory_id.empty() ? "-" : r.system.trajectory_id)
          << ',' << r.system.frame_index << ',' << (r.converged ? 1 : 0) << ','
          << r.n_force_evals << ',' << gnoc::fmt_g17(r.final_fmax) << ','
          << gnoc::fmt_g17(r.final_energy) << '\n';
      r.system.has_energy = true;
      r.system.energy = r.final_energy;
      r.system.forces.clear();
      relaxed.push_back(std::move(r.system));
    }
    gnoc::write_frames(f.out + "/relaxed.txt", relaxed);
    man.finish_ok({{"n_structures", results.size()}, {"converged", converged}});
    std::cout << converged << "/" << results.size()
              << " structures converged; results in " << f.out << "\n";
    return 0;
  } catch (const std::exception& e) {
    man.finish_fail(e.what());
    throw;
  }
}

int cmd_grid(const CommonFlags& f, const std::string& data,
             const char* command, bool correlation_only) {
  auto root = gnoc::load_config_file(f.config);
  auto spec = gnoc::parse_grid_section(root);
  const auto split_cfg = gnoc::parse_split_section(root);
  if (f.seed >= 0) spec.run.seed0 = std::uint64_t(f.seed);
  if (f.threads > 0) {
    spec.run.n_workers = f.threads;
    for (auto& v : spec.variants) v.train.n_workers = 1;  // cells parallelize
  }

  std::vector<gnoc::AtomicSystem> pool;
  if (!data.empty()) {
    pool = gnoc::read_frames(data);
  } else {
    pool = gnoc::generate_toy_dataset(gnoc::parse_dataset_section(root));
  }

  nlohmann::json variants_json = nlohmann::json::array();
  for (const auto& v : spec.variants)
    variants_json.push_back({{"id", v.id},
                             {"baseline", v.baseline},
                             {"exclude_from_correlation",
                              v.exclude_from_correlation},
                             {"model", nlohmann::json(v.model)},
                             {"train", nlohmann::json(v.train)}});

  Manifest man;
  man.start(f.out, command,
            {{"grid",
              {{"baseline_seeds", spec.run.baseline_seeds},
               {"ablation_seeds", spec.run.ablation_seeds},
               {"seed0", spec.run.seed0},
               {"n_workers", spec.run.n_workers},
               {"variants", variants_json}}}});
  try {
    const auto datasets =
        gnoc::build_grid_datasets(pool, spec.datasets, split_cfg);
    nlohmann::json ds_json = nlohmann::json::array();
    for (const auto& ds : datasets)
      ds_json.push_back(
          {{"id", ds.id},
           {"n_train", ds.train.size()},
           {"n_val", ds.val.size()},
           {"train_digest", hex_digest(gnoc::dataset_digest(ds.train))}});
    man.note("datasets", ds_json);

    const auto res = gnoc::run_grid(spec.variants, datasets, spec.run);
    gnoc::write_records_csv(f.out + "/records.csv", res.records);
    gnoc::write_tau_csv(f.out + "/tau.csv", res.dataset_ids, res.tau);
    gnoc::write_dendrogram(f.out + "/dendrogram.txt", res.dendrogram,
                           res.dataset_ids);
    if (!correlation_only) {
      gnoc::write_long_csv(f.out + "/long.csv", res.records);

      // 68% improvement intervals vs the baseline, per dataset
      std::ofstream imp(f.out + "/improvements.csv");
      GNOC_CHECK(imp.good(), gnoc::CheckpointError,
                 cat("cannot write ", f.out, "/improvements.csv"));
      imp << "variant,dataset,point,halfwidth,baseline_mean,baseline_std\n";
      const gnoc::GridVariant* base = nullptr;
      for (const auto& v : spec.variants)
        if (v.baseline) {
          base = &v;
          break;
        }
      if (base) {
        for (const auto& ds : datasets) {
          std::vector<double> base_maes;
          std::map<std::string, std::vector<double>> var_maes;
          for (const auto& r : res.records) {
            if (!r.ok() || r.dataset != ds.id) continue;
            if (r.variant == base->id)
              base_maes.push_back(r.force_mae);
            else
              var_maes[r.variant].push_back(r.force_mae);
          }
          if (base_maes.size() < 2) continue;
          for (const auto& [vid, maes] : var_maes) {
            const double mae =
                std::accumulate(maes.begin(), maes.end(), 0.0) / maes.size();
            const auto est = gnoc::improvement_interval(base_maes, mae);
            imp << vid << ',' << ds.id << ',' << gnoc::fmt_g17(est.point)
                << ',' << gnoc::fmt_g17(est.halfwidth) << ','
                << gnoc::fmt_g17(est.baseline_mean) << ','
                << gnoc::fmt_g17(est.baseline_std) << '\n';
          }
        }
      }

      std::ofstream thr(f.out + "/throughput.csv");
      GNOC_CHECK(thr.good(), gnoc::CheckpointError,
                 cat("cannot write ", f.out, "/throughput.csv"));
      thr << "variant,median_delta\n";
      for (const auto& [vid, delta] : res.throughput_delta)
        thr << vid << ',' << gnoc::fmt_g17(delta) << '\n';
    }

    std::size_t failed = 0;
    for (const auto& r : res.records) failed += !r.ok();
    man.finish_ok({{"n_records", res.records.size()},
                   {"n_failed", failed},
                   {"corr_variants", res.corr_variants}});
    std::cout << res.records.size() << " grid runs (" << failed
              << " failed); artifacts in " << f.out << "\n";
    return failed == res.records.size() ? 1 : 0;
  } catch (const std::exception& e) {
    man.finish_fail(e.what());
    throw;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"molecular force-field GNN toolkit"};
  app.require_subcommand(1);

  CommonFlags gen_f, prof_f, train_f, eval_f, relax_f, abl_f, corr_f;
  std::string prof_data, train_data, train_val, eval_ckpt, eval_data,
      relax_ckpt, relax_data, abl_data, corr_data;
  bool train_resume = false;

  auto* gen = app.add_subcommand("gen-data", "generate a labeled toy dataset");
  add_common(gen, gen_f);
  gen->get_option("--out")->required();

  auto* prof = app.add_subcommand("profile", "summarize a frames file");
  add_common(prof, prof_f, /*config_required=*/false);
  prof->add_option("--data", prof_data, "frames file")->required();

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, train_f);
  train->add_option("--data", train_data, "training frames")->required();
  train->add_option("--val", train_val, "validation frames")->required();
  train->get_option("--out")->required();
  train->add_flag("--resume", train_resume,
                  "continue from the latest checkpoint in --out");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_f, /*config_required=*/false);
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "frames file")->required();

  auto* relax = app.add_subcommand("relax", "relax structures with a model");
  add_common(relax, relax_f);
  relax->add_option("--ckpt", relax_ckpt, "checkpoint file")->required();
  relax->add_option("--data", relax_data, "frames file")->required();
  relax->get_option("--out")->required();

  auto* abl = app.add_subcommand(
      "ablate", "run the variant x dataset grid with improvement stats");
  add_common(abl, abl_f);
  abl->add_option("--data", abl_data, "frame pool (default: generate)");
  abl->get_option("--out")->required();

  auto* corr = app.add_subcommand(
      "correlate", "cross-dataset rank correlation and clustering");
  add_common(corr, corr_f);
  corr->add_option("--data", corr_data, "frame pool (default: generate)");
  corr->get_option("--out")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_f);
    if (prof->parsed()) return cmd_profile(prof_f, prof_data);
    if (train->parsed())
      return cmd_train(train_f, train_data, train_val, train_resume);
    if (eval->parsed()) return cmd_eval(eval_f, eval_ckpt, eval_data);
    if (relax->parsed()) return cmd_relax(relax_f, relax_ckpt, relax_data);
    if (abl->parsed()) return cmd_grid(abl_f, abl_data, "ablate", false);
    if (corr->parsed()) return cmd_grid(corr_f, corr_data, "correlate", true);
  } catch (const gnoc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
