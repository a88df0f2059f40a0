#pragma once

// Experiment harness: relative-improvement statistics with uncertainty
// propagation, Kendall rank correlation between datasets, single-linkage
// clustering, and a variant x dataset run grid with throughput comparison.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "gnoc/common.hpp"
#include "gnoc/datasets.hpp"
#include "gnoc/model.hpp"
#include "gnoc/threads.hpp"
#include "gnoc/training.hpp"

namespace gnoc {

// ---------------------------------------------------------------------------
// Improvement statistics
// ---------------------------------------------------------------------------

// baseline/variant - 1; positive means the variant is better.
inline double relative_improvement(double mae_baseline, double mae_variant) {
  GNOC_CHECK(mae_baseline > 0.0 && mae_variant > 0.0, StatisticsError,
             "relative_improvement: MAEs must be positive");
  return mae_baseline / mae_variant - 1.0;
}

inline double median(std::vector<double> v) {
  GNOC_CHECK(!v.empty(), StatisticsError, "median: empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Two-sided 68% critical value of Student's t with `df` degrees of freedom.
inline double student_t68(int df) {
  GNOC_CHECK(df >= 1, StatisticsError, "student_t68: df must be >= 1");
  return boost::math::quantile(boost::math::students_t(double(df)), 0.84);
}

struct ImprovementEstimate {
  double point = 0.0;      // mean(baseline)/variant - 1
  double halfwidth = 0.0;  // 68% interval half-width
  double baseline_mean = 0.0;
  double baseline_std = 0.0;  // sample standard deviation
};

// 68% interval for baseline/variant - 1. The baseline mean carries a
// Student-t uncertainty; the single-run variant is assigned the baseline
// sample standard deviation; both propagate to first order through the
// ratio (df/db = 1/v, df/dv = -b/v^2).
inline ImprovementEstimate improvement_interval(
    const std::vector<double>& baseline_runs, double variant_mae) {
  GNOC_CHECK(baseline_runs.size() >= 2, StatisticsError,
             "improvement_interval: need at least two baseline runs");
  GNOC_CHECK(variant_mae > 0.0, StatisticsError,
             "improvement_interval: variant MAE must be positive");
  const std::size_t n = baseline_runs.size();
  double m = 0.0;
  for (double b : baseline_runs) {
    GNOC_CHECK(b > 0.0, StatisticsError,
               "improvement_interval: baseline MAEs must be positive");
    m += b;
  }
  m /= double(n);
  double s2 = 0.0;
  for (double b : baseline_runs) s2 += (b - m) * (b - m);
  s2 /= double(n - 1);
  const double s = std::sqrt(s2);

  const double u_mean = student_t68(int(n) - 1) * s / std::sqrt(double(n));
  const double u_variant = s;
  const double v = variant_mae;

  ImprovementEstimate est;
  est.baseline_mean = m;
  est.baseline_std = s;
  est.point = m / v - 1.0;
  est.halfwidth = std::sqrt((u_mean / v) * (u_mean / v) +
                            (m * u_variant / (v * v)) * (m * u_variant / (v * v)));
  return est;
}

// ---------------------------------------------------------------------------
// Kendall rank correlation (tau-b, tie-corrected)
// ---------------------------------------------------------------------------

// O(n log n): sort by (x, y), count x-ties and joint ties, then count
// discordant pairs as merge-sort inversions of the y sequence.
inline double kendall_tau(const std::vector<double>& x,
                          const std::vector<double>& y) {
  GNOC_CHECK(x.size() == y.size(), ContractError,
             "kendall_tau: length mismatch");
  const std::size_t n = x.size();
  GNOC_CHECK(n >= 2, ContractError,
             "kendall_tau: need at least two observations");

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (x[a] != x[b]) return x[a] < x[b];
    return y[a] < y[b];
  });

  auto pair_count = [](std::uint64_t t) { return t * (t - 1) / 2; };
  std::uint64_t tx = 0, txy = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && x[idx[j]] == x[idx[i]]) ++j;
    tx += pair_count(j - i);
    for (std::size_t k = i; k < j;) {
      std::size_t l = k;
      while (l < j && y[idx[l]] == y[idx[k]]) ++l;
      txy += pair_count(l - k);
      k = l;
    }
    i = j;
  }

  std::vector<double> ys(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[idx[i]];
  std::uint64_t discordant = 0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo + width < n; lo += 2 * width) {
      const std::size_t mid = lo + width, hi = std::min(lo + 2 * width, n);
      std::size_t a = lo, b = mid, out = lo;
      while (a < mid && b < hi) {
        if (ys[b] < ys[a]) {
          discordant += mid - a;
          buf[out++] = ys[b++];
        } else {
          buf[out++] = ys[a++];
        }
      }
      while (a < mid) buf[out++] = ys[a++];
      while (b < hi) buf[out++] = ys[b++];
      std::copy(buf.begin() + lo, buf.begin() + hi, ys.begin() + lo);
    }
  }

  std::uint64_t ty = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && ys[j] == ys[i]) ++j;
    ty += pair_count(j - i);
    i = j;
  }

  const std::uint64_t n0 = pair_count(n);
  // concordant - discordant; pairs tied in x contribute no inversions
  const std::int64_t cd =
      std::int64_t(n0 - tx - ty + txy) - 2 * std::int64_t(discordant);
  GNOC_CHECK(n0 > tx && n0 > ty, StatisticsError,
             "kendall_tau: a ranking is constant");
  return double(cd) / std::sqrt(double(n0 - tx) * double(n0 - ty));
}

// ---------------------------------------------------------------------------
// Single-linkage hierarchical clustering
// ---------------------------------------------------------------------------

// One agglomeration step. Cluster ids 0..n-1 are the input points; merge k
// creates cluster n+k. `a < b` always; ties broken by smallest (a, b).
struct MergeStep {
  int a = 0;
  int b = 0;
  double height = 0.0;
  int size = 0;  // members of the new cluster
};

inline std::vector<MergeStep> hierarchical_cluster(
    const std::vector<std::vector<double>>& dist) {
  const std::size_t n = dist.size();
  GNOC_CHECK(n >= 1, ContractError, "hierarchical_cluster: empty matrix");
  for (std::size_t i = 0; i < n; ++i) {
    GNOC_CHECK(dist[i].size() == n, ContractError,
               "hierarchical_cluster: matrix is not square");
    GNOC_CHECK(dist[i][i] == 0.0, ContractError,
               "hierarchical_cluster: nonzero diagonal");
    for (std::size_t j = 0; j < i; ++j)
      GNOC_CHECK(dist[i][j] == dist[j][i], ContractError,
                 "hierarchical_cluster: matrix is not symmetric");
  }

  std::vector<int> id(n);
  std::iota(id.begin(), id.end(), 0);
  std::vector<int> size(n, 1);
  auto cur = dist;  // current cluster-cluster distances by active slot

  std::vector<MergeStep> merges;
  merges.reserve(n - 1);
  for (std::size_t step = 0; step + 1 < n; ++step) {
    const std::size_t m = cur.size();
    std::size_t bi = 0, bj = 1;
    auto key = [&](std::size_t i, std::size_t j) {
      return std::tuple{cur[i][j], std::min(id[i], id[j]),
                        std::max(id[i], id[j])};
    };
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j)
        if (key(i, j) < key(bi, bj)) bi = i, bj = j;

    MergeStep ms;
    ms.a = std::min(id[bi], id[bj]);
    ms.b = std::max(id[bi], id[bj]);
    ms.height = cur[bi][bj];
    ms.size = size[bi] + size[bj];
    merges.push_back(ms);

    // nearest-point update: d(merged, k) = min(d(a,k), d(b,k))
    for (std::size_t k = 0; k < m; ++k) {
      if (k == bi || k == bj) continue;
      cur[bi][k] = cur[k][bi] = std::min(cur[bi][k], cur[bj][k]);
    }
    id[bi] = int(n + step);
    size[bi] += size[bj];
    for (auto& row : cur) row.erase(row.begin() + std::ptrdiff_t(bj));
    cur.erase(cur.begin() + std::ptrdiff_t(bj));
    id.erase(id.begin() + std::ptrdiff_t(bj));
    size.erase(size.begin() + std::ptrdiff_t(bj));
  }
  return merges;
}

// Expands each cluster id (leaf or merge product) to its member points.
inline std::vector<std::vector<int>> cluster_members(
    const std::vector<MergeStep>& merges, int n_points) {
  std::vector<std::vector<int>> members(std::size_t(n_points) + merges.size());
  for (int i = 0; i < n_points; ++i) members[std::size_t(i)] = {i};
  for (std::size_t k = 0; k < merges.size(); ++k) {
    auto& dst = members[std::size_t(n_points) + k];
    const auto& ma = members[std::size_t(merges[k].a)];
    const auto& mb = members[std::size_t(merges[k].b)];
    dst.insert(dst.end(), ma.begin(), ma.end());
    dst.insert(dst.end(), mb.begin(), mb.end());
    std::sort(dst.begin(), dst.end());
  }
  return members;
}

// ---------------------------------------------------------------------------
// Run grid
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string variant;
  std::string dataset;
  std::uint64_t seed = 0;
  double force_mae = std::numeric_limits<double>::quiet_NaN();
  double energy_mae = std::numeric_limits<double>::quiet_NaN();
  double throughput = std::numeric_limits<double>::quiet_NaN();  // samples/s
  double wall_seconds = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
  bool ok() const { return status == "ok"; }
};

struct GridVariant {
  std::string id;
  ModelConfig model;
  TrainConfig train;
  bool baseline = false;
  bool exclude_from_correlation = false;  // e.g. batch-size sweeps
};

struct GridDataset {
  std::string id;
  std::vector<AtomicSystem> train;
  std::vector<AtomicSystem> val;
};

struct ThroughputConfig {
  int batch_size = 4;
  int n_batches = 200;  // steady-state window
  int warmup = 20;
  int n_workers = 1;
  void validate() const {
    GNOC_CHECK(batch_size >= 1 && n_batches >= 1 && warmup >= 0 &&
                   n_workers >= 1,
               ConfigError, "ThroughputConfig: counts must be positive");
  }
};

struct GridConfig {
  int baseline_seeds = 5;  // replicates for the baseline variant
  int ablation_seeds = 1;
  std::uint64_t seed0 = 0;
  int n_workers = 1;  // concurrent grid cells
  bool measure_throughput = true;
  ThroughputConfig throughput;
  void validate() const {
    GNOC_CHECK(baseline_seeds >= 1 && ablation_seeds >= 1, ConfigError,
               "GridConfig: seed counts must be positive");
    GNOC_CHECK(n_workers >= 1, ConfigError,
               "GridConfig: n_workers must be positive");
    throughput.validate();
  }
};

struct GridResult {
  std::vector<RunRecord> records;
  std::vector<std::string> corr_variants;  // variants entering the tau matrix
  std::vector<std::string> dataset_ids;
  std::vector<std::vector<double>> mae;  // [dataset][corr_variant] force MAE
  std::vector<std::vector<double>> tau;  // [dataset][dataset]
  std::vector<MergeStep> dendrogram;     // over datasets at distance 1 - tau
  std::map<std::string, double> throughput_delta;  // median vs baseline
};

// Steady-state training throughput in samples/sec: full forward+backward
// batches, timed after a warmup window.
inline double measure_throughput(ModelT<double>& model,
                                 const std::vector<AtomicSystem>& frames,
                                 LossWeights weights = {},
                                 const ThroughputConfig& tc = {}) {
  GNOC_CHECK(!frames.empty(), DatasetError, "measure_throughput: no frames");
  tc.validate();
  if (model.cfg.force_mode != ForceMode::direct) weights.force = 0.0;

  std::vector<double> e_targets(frames.size(), 0.0);
  std::vector<std::vector<Vec3>> f_targets(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].has_energy) e_targets[i] = frames[i].energy;
    f_targets[i] = frames[i].forces.empty()
                       ? std::vector<Vec3>(frames[i].size(), Vec3{0, 0, 0})
                       : frames[i].forces;
  }

  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  std::size_t cursor = 0, samples = 0;
  for (int b = 0; b < tc.warmup + tc.n_batches; ++b) {
    if (b == tc.warmup) {
      t0 = clock::now();
      samples = 0;
    }
    std::vector<const AtomicSystem*> batch;
    std::vector<double> et;
    std::vector<std::vector<Vec3>> ft;
    for (int k = 0; k < tc.batch_size; ++k) {
      const std::size_t i = cursor++ % frames.size();
      batch.push_back(&frames[i]);
      et.push_back(e_targets[i]);
      ft.push_back(f_targets[i]);
    }
    zero_grads(model.params);
    detail::train_batch(model, batch, et, ft, weights, tc.n_workers);
    samples += batch.size();
  }
  const double dt = std::chrono::duration<double>(clock::now() - t0).count();
  GNOC_CHECK(dt > 0.0, StatisticsError, "measure_throughput: zero elapsed time");
  return double(samples) / dt;
}

namespace detail {

struct GridJob {
  std::size_t variant = 0;
  std::size_t dataset = 0;
  std::uint64_t seed = 0;
};

}  // namespace detail

// Trains every (variant, dataset) cell — `baseline_seeds` replicates for the
// baseline, one per ablation — then correlates datasets by the Kendall tau of
// their per-variant force MAEs and clusters them at distance 1 - tau.
// Cell failures are recorded and the grid continues.
inline GridResult run_grid(const std::vector<GridVariant>& variants,
                           const std::vector<GridDataset>& datasets,
                           const GridConfig& cfg = {}) {
  GNOC_CHECK(!variants.empty() && !datasets.empty(), ContractError,
             "run_grid: variants and datasets must be non-empty");
  cfg.validate();

  std::vector<detail::GridJob> jobs;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const int reps =
        variants[v].baseline ? cfg.baseline_seeds : cfg.ablation_seeds;
    for (int s = 0; s < reps; ++s)
      for (std::size_t d = 0; d < datasets.size(); ++d)
        jobs.push_back({v, d, cfg.seed0 + std::uint64_t(s)});
  }

  GridResult out;
  out.records.resize(jobs.size());
  for (const auto& ds : datasets) out.dataset_ids.push_back(ds.id);

  auto run_job = [&](std::size_t j) {
    const auto& job = jobs[j];
    const auto& var = variants[job.variant];
    const auto& ds = datasets[job.dataset];
    RunRecord rec;
    rec.variant = var.id;
    rec.dataset = ds.id;
    rec.seed = job.seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      // seed depends on (variant, replicate) only: identical datasets then
      // produce bit-identical runs, so their rank correlation is exactly 1
      const std::uint64_t cell_seed = fnv1a(cat(var.id, "|", job.seed));
      Model model(var.model, cell_seed);
      TrainConfig tc = var.train;
      tc.seed = cell_seed;
      tc.checkpoint_dir.clear();
      const auto res = train_model(model, ds.train, ds.val, tc);
      const auto m = evaluate_model(model, ds.val, res.normalizer);
      rec.force_mae = m.force_mae;
      rec.energy_mae = m.energy_mae;
      if (cfg.measure_throughput)
        rec.throughput = measure_throughput(model, ds.train, tc.loss,
                                            cfg.throughput);
      GNOC_CHECK(std::isfinite(rec.force_mae) && std::isfinite(rec.energy_mae),
                 NumericError, "run_grid: non-finite validation metrics");
    } catch (const std::exception& e) {
      rec.status = cat("failed: ", e.what());
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    out.records[j] = std::move(rec);
  };
  parallel_chunks(jobs.size(), std::size_t(cfg.n_workers),
                  [&](std::size_t begin, std::size_t end) {
                    for (std::size_t j = begin; j < end; ++j) run_job(j);
                  });

  // mean force MAE per (variant, dataset) over ok replicates
  std::map<std::pair<std::string, std::string>, std::vector<double>> cell_mae,
      cell_thr;
  std::set<std::string> broken;  // variants with any failed cell
  for (const auto& r : out.records) {
    if (!r.ok()) {
      broken.insert(r.variant);
      continue;
    }
    cell_mae[{r.variant, r.dataset}].push_back(r.force_mae);
    if (std::isfinite(r.throughput))
      cell_thr[{r.variant, r.dataset}].push_back(r.throughput);
  }

  for (const auto& var : variants)
    if (!var.exclude_from_correlation && !broken.count(var.id))
      out.corr_variants.push_back(var.id);

  const std::size_t nd = datasets.size();
  out.mae.assign(nd, std::vector<double>(out.corr_variants.size(), 0.0));
  for (std::size_t d = 0; d < nd; ++d)
    for (std::size_t v = 0; v < out.corr_variants.size(); ++v) {
      const auto& runs = cell_mae[{out.corr_variants[v], datasets[d].id}];
      out.mae[d][v] =
          runs.empty()
              ? std::numeric_limits<double>::quiet_NaN()
              : std::accumulate(runs.begin(), runs.end(), 0.0) / runs.size();
    }

  out.tau.assign(nd, std::vector<double>(nd, 1.0));
  bool tau_complete = nd >= 1;
  for (std::size_t a = 0; a < nd; ++a)
    for (std::size_t b = a + 1; b < nd; ++b) {
      double t = std::numeric_limits<double>::quiet_NaN();
      if (out.corr_variants.size() >= 2) {
        try {
          t = kendall_tau(out.mae[a], out.mae[b]);
        } catch (const StatisticsError&) {
          // constant ranking: correlation undefined, leave NaN
        }
      }
      out.tau[a][b] = out.tau[b][a] = t;
      if (!std::isfinite(t)) tau_complete = false;
    }

  if (tau_complete && nd >= 2) {
    std::vector<std::vector<double>> dist(nd, std::vector<double>(nd, 0.0));
    for (std::size_t a = 0; a < nd; ++a)
      for (std::size_t b = 0; b < nd; ++b)
        if (a != b) dist[a][b] = 1.0 - out.tau[a][b];
    out.dendrogram = hierarchical_cluster(dist);
  }

  // median relative throughput improvement vs the baseline variant
  const GridVariant* base = nullptr;
  for (const auto& var : variants)
    if (var.baseline) {
      base = &var;
      break;
    }
  if (base && cfg.measure_throughput) {
    for (const auto& var : variants) {
      if (var.id == base->id) continue;
      std::vector<double> deltas;
      for (const auto& ds : datasets) {
        const auto& bt = cell_thr[{base->id, ds.id}];
        const auto& vt = cell_thr[{var.id, ds.id}];
        if (bt.empty() || vt.empty()) continue;
        deltas.push_back(median(vt) / median(bt) - 1.0);
      }
      if (!deltas.empty()) out.throughput_delta[var.id] = median(deltas);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

inline void write_records_csv(const std::string& path,
                              const std::vector<RunRecord>& records) {
  std::ofstream out(path);
  GNOC_CHECK(out.good(), CheckpointError, cat("cannot write ", path));
  out << "variant,dataset,seed,force_mae,energy_mae,throughput,wall_seconds,"
         "status\n";
  for (const auto& r : records) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    out << r.variant << ',' << r.dataset << ',' << r.seed << ','
        << fmt_g17(r.force_mae) << ',' << fmt_g17(r.energy_mae) << ','
        << fmt_g17(r.throughput) << ',' << fmt_g17(r.wall_seconds) << ','
        << status << '\n';
  }
  GNOC_CHECK(out.good(), CheckpointError, cat("write failed: ", path));
}

inline void write_tau_csv(const std::string& path,
                          const std::vector<std::string>& ids,
                          const std::vector<std::vector<double>>& tau) {
  GNOC_CHECK(tau.size() == ids.size(), ContractError,
             "write_tau_csv: id/matrix size mismatch");
  std::ofstream out(path);
  GNOC_CHECK(out.good(), CheckpointError, cat("cannot write ", path));
  out << "dataset";
  for (const auto& id : ids) out << ',' << id;
  out << '\n';
  for (std::size_t i = 0; i < tau.size(); ++i) {
    out << ids[i];
    for (double t : tau[i]) out << ',' << fmt_g17(t);
    out << '\n';
  }
  GNOC_CHECK(out.good(), CheckpointError, cat("write failed: ", path));
}

// Merge list, one line per agglomeration; leaves are labeled, internal
// clusters referenced as #id.
inline void write_dendrogram(const std::string& path,
                             const std::vector<MergeStep>& merges,
                             const std::vector<std::string>& labels) {
  std::ofstream out(path);
  GNOC_CHECK(out.good(), CheckpointError, cat("cannot write ", path));
  const int n = int(labels.size());
  auto name = [&](int id) {
    return id < n ? labels[std::size_t(id)] : cat("#", id);
  };
  for (std::size_t k = 0; k < merges.size(); ++k) {
    const auto& m = merges[k];
    out << "#" << (n + int(k)) << " = " << name(m.a) << " + " << name(m.b)
        << " @ " << fmt_g17(m.height) << " (size " << m.size << ")\n";
  }
  GNOC_CHECK(out.good(), CheckpointError, cat("write failed: ", path));
}

// Long format for external plotting: one (metric, value) row per record.
inline void write_long_csv(const std::string& path,
                           const std::vector<RunRecord>& records) {
  std::ofstream out(path);
  GNOC_CHECK(out.good(), CheckpointError, cat("cannot write ", path));
  out << "variant,dataset,seed,metric,value\n";
  for (const auto& r : records) {
    if (!r.ok()) continue;
    const std::pair<const char*, double> rows[] = {
        {"force_mae", r.force_mae},
        {"energy_mae", r.energy_mae},
        {"throughput", r.throughput},
        {"wall_seconds", r.wall_seconds}};
    for (const auto& [metric, value] : rows) {
      if (!std::isfinite(value)) continue;
      out << r.variant << ',' << r.dataset << ',' << r.seed << ',' << metric
          << ',' << fmt_g17(value) << '\n';
    }
  }
  GNOC_CHECK(out.good(), CheckpointError, cat("write failed: ", path));
}

}  // namespace gnoc
