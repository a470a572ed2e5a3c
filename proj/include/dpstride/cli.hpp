#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dpstride/dataset.hpp"
#include "dpstride/decoder.hpp"
#include "dpstride/denoiser.hpp"
#include "dpstride/dp.hpp"
#include "dpstride/errors.hpp"
#include "dpstride/eval.hpp"
#include "dpstride/io.hpp"
#include "dpstride/mlp.hpp"
#include "dpstride/random.hpp"
#include "dpstride/schedule.hpp"
#include "dpstride/table.hpp"

namespace dpstride::cli {

using nlohmann::json;

struct RunConfig {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string output_dir = "out";
  int threads = 0;

  std::size_t grid_steps = 64;

  std::string schedule_kind = "trig";  // trig | linear_vp | custom
  std::vector<double> schedule_times, schedule_f, schedule_g;

  std::string dataset_kind = "gaussian";  // gaussian | mixture2d | ring2d
  std::vector<double> dataset_mean = {0.3, -0.2};
  double dataset_var = 0.25;
  std::vector<MixtureComponent> mixture_components;  // empty = default 4 bumps
  double ring_radius = 0.7;
  double ring_noise = 0.05;

  std::string model_kind = "analytic";  // analytic | mlp
  std::string model_path;
  std::vector<std::uint32_t> mlp_hidden = {64, 64, 64};
  std::uint32_t time_features = 16;
  bool variance_logits = false;
  std::uint32_t discrete_steps = 0;

  std::uint64_t train_steps = 20000;
  std::uint32_t batch_size = 64;
  double learning_rate = 1e-3;

  std::uint64_t table_samples = 1024;
  std::uint64_t eval_samples = 2048;
  std::string variance_mode = "fixed_posterior";  // | interpolated
  std::string decoder = "continuous_gaussian";    // | discretized_256
  std::string clip_x0 = "auto";                   // auto | on | off

  std::vector<std::size_t> budgets;  // empty = default, filled by finalize()
  bool budgets_explicit = false;
  std::vector<std::uint64_t> mc_counts = {128, 4096};
};

namespace detail {

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw ValidationError("unknown config key '" + it.key() + "' in " + where);
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ValidationError("config root must be an object");
  detail::check_keys(doc, {"seed", "output_dir", "threads", "grid", "schedule", "dataset",
                           "model", "train", "estimate", "budgets", "mc_counts"},
                     "config root");
  RunConfig cfg;
  if (doc.contains("seed")) {
    cfg.seed = detail::get_or<std::uint64_t>(doc, "seed", 0);
    cfg.seed_set = true;
  }
  cfg.output_dir = detail::get_or<std::string>(doc, "output_dir", cfg.output_dir);
  cfg.threads = detail::get_or<int>(doc, "threads", cfg.threads);

  if (doc.contains("grid")) {
    const json& g = doc.at("grid");
    detail::check_keys(g, {"steps"}, "grid");
    cfg.grid_steps = detail::get_or<std::size_t>(g, "steps", cfg.grid_steps);
  }
  if (doc.contains("schedule")) {
    const json& s = doc.at("schedule");
    detail::check_keys(s, {"kind", "times", "f", "g"}, "schedule");
    cfg.schedule_kind = detail::get_or<std::string>(s, "kind", cfg.schedule_kind);
    cfg.schedule_times = detail::get_or<std::vector<double>>(s, "times", {});
    cfg.schedule_f = detail::get_or<std::vector<double>>(s, "f", {});
    cfg.schedule_g = detail::get_or<std::vector<double>>(s, "g", {});
  }
  if (doc.contains("dataset")) {
    const json& d = doc.at("dataset");
    detail::check_keys(d, {"kind", "mean", "var", "components", "radius", "noise_std"}, "dataset");
    cfg.dataset_kind = detail::get_or<std::string>(d, "kind", cfg.dataset_kind);
    cfg.dataset_mean = detail::get_or<std::vector<double>>(d, "mean", cfg.dataset_mean);
    cfg.dataset_var = detail::get_or<double>(d, "var", cfg.dataset_var);
    cfg.ring_radius = detail::get_or<double>(d, "radius", cfg.ring_radius);
    cfg.ring_noise = detail::get_or<double>(d, "noise_std", cfg.ring_noise);
    if (d.contains("components")) {
      for (const json& c : d.at("components")) {
        detail::check_keys(c, {"weight", "mean", "var"}, "dataset.components");
        MixtureComponent mc;
        mc.weight = detail::get_or<double>(c, "weight", 1.0);
        mc.mean = detail::get_or<std::vector<double>>(c, "mean", {});
        mc.var = detail::get_or<double>(c, "var", 0.01);
        cfg.mixture_components.push_back(std::move(mc));
      }
    }
  }
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    detail::check_keys(m, {"kind", "path", "hidden", "time_features", "variance_logits",
                           "discrete_steps"},
                       "model");
    cfg.model_kind = detail::get_or<std::string>(m, "kind", cfg.model_kind);
    cfg.model_path = detail::get_or<std::string>(m, "path", cfg.model_path);
    cfg.mlp_hidden = detail::get_or<std::vector<std::uint32_t>>(m, "hidden", cfg.mlp_hidden);
    cfg.time_features = detail::get_or<std::uint32_t>(m, "time_features", cfg.time_features);
    cfg.variance_logits = detail::get_or<bool>(m, "variance_logits", cfg.variance_logits);
    cfg.discrete_steps = detail::get_or<std::uint32_t>(m, "discrete_steps", cfg.discrete_steps);
  }
  if (doc.contains("train")) {
    const json& t = doc.at("train");
    detail::check_keys(t, {"steps", "batch_size", "learning_rate"}, "train");
    cfg.train_steps = detail::get_or<std::uint64_t>(t, "steps", cfg.train_steps);
    cfg.batch_size = detail::get_or<std::uint32_t>(t, "batch_size", cfg.batch_size);
    cfg.learning_rate = detail::get_or<double>(t, "learning_rate", cfg.learning_rate);
  }
  if (doc.contains("estimate")) {
    const json& e = doc.at("estimate");
    detail::check_keys(e, {"table_samples", "eval_samples", "variance_mode", "decoder", "clip_x0"},
                       "estimate");
    cfg.table_samples = detail::get_or<std::uint64_t>(e, "table_samples", cfg.table_samples);
    cfg.eval_samples = detail::get_or<std::uint64_t>(e, "eval_samples", cfg.eval_samples);
    cfg.variance_mode = detail::get_or<std::string>(e, "variance_mode", cfg.variance_mode);
    cfg.decoder = detail::get_or<std::string>(e, "decoder", cfg.decoder);
    cfg.clip_x0 = detail::get_or<std::string>(e, "clip_x0", cfg.clip_x0);
  }
  if (doc.contains("budgets")) {
    cfg.budgets = detail::get_or<std::vector<std::size_t>>(doc, "budgets", {});
    cfg.budgets_explicit = true;
  }
  cfg.mc_counts = detail::get_or<std::vector<std::uint64_t>>(doc, "mc_counts", cfg.mc_counts);
  return cfg;
}

inline std::vector<std::size_t> default_budgets(std::size_t T) {
  std::vector<std::size_t> budgets;
  for (std::size_t k : {8, 16, 32, 64, 128, 256})
    if (k <= T) budgets.push_back(k);
  if (budgets.empty()) budgets.push_back(T);
  return budgets;
}

// Fills derived defaults and rejects inconsistent settings.
inline void finalize_config(RunConfig& cfg) {
  if (cfg.grid_steps < 1 || cfg.grid_steps > 100000)
    throw ValidationError("grid.steps must be between 1 and 100000");
  if (cfg.schedule_kind != "trig" && cfg.schedule_kind != "linear_vp" && cfg.schedule_kind != "custom")
    throw ValidationError("schedule.kind must be trig, linear_vp, or custom");
  if (cfg.schedule_kind == "custom" &&
      (cfg.schedule_times.empty() || cfg.schedule_f.empty() || cfg.schedule_g.empty()))
    throw ValidationError("custom schedule needs times, f, and g arrays");
  if (cfg.dataset_kind != "gaussian" && cfg.dataset_kind != "mixture2d" && cfg.dataset_kind != "ring2d")
    throw ValidationError("dataset.kind must be gaussian, mixture2d, or ring2d");
  if (cfg.model_kind != "analytic" && cfg.model_kind != "mlp")
    throw ValidationError("model.kind must be analytic or mlp");
  if (cfg.model_kind == "analytic" && cfg.dataset_kind != "gaussian")
    throw ValidationError("the analytic model is defined only for the gaussian dataset");
  if (cfg.variance_mode != "fixed_posterior" && cfg.variance_mode != "interpolated")
    throw ValidationError("estimate.variance_mode must be fixed_posterior or interpolated");
  if (cfg.decoder != "continuous_gaussian" && cfg.decoder != "discretized_256")
    throw ValidationError("estimate.decoder must be continuous_gaussian or discretized_256");
  if (cfg.clip_x0 != "auto" && cfg.clip_x0 != "on" && cfg.clip_x0 != "off")
    throw ValidationError("estimate.clip_x0 must be auto, on, or off");
  if (cfg.model_kind == "mlp" && cfg.clip_x0 == "off")
    throw ValidationError(
        "model.kind=mlp needs clipping: its x0 reconstruction is unbounded where f(t) vanishes");
  if (cfg.model_kind == "mlp" && cfg.discrete_steps > 0 && cfg.discrete_steps % cfg.grid_steps != 0)
    throw ValidationError("model.discrete_steps must be a multiple of grid.steps");
  if (cfg.table_samples < 1) throw ValidationError("estimate.table_samples must be >= 1");
  if (cfg.eval_samples < 2) throw ValidationError("estimate.eval_samples must be >= 2");
  if (cfg.batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw ValidationError("train.learning_rate must be > 0");
  if (cfg.budgets_explicit) {
    if (cfg.budgets.empty()) throw ValidationError("budgets must not be empty");
    for (std::size_t k : cfg.budgets)
      if (k < 1 || k > cfg.grid_steps)
        throw ValidationError("budget " + std::to_string(k) + " outside [1, grid.steps]");
  } else {
    cfg.budgets = default_budgets(cfg.grid_steps);
  }
  if (cfg.mc_counts.empty()) throw ValidationError("mc_counts must not be empty");
  for (std::size_t i = 0; i < cfg.mc_counts.size(); ++i) {
    if (cfg.mc_counts[i] < 2) throw ValidationError("mc_counts entries must be >= 2");
    if (i > 0 && cfg.mc_counts[i] <= cfg.mc_counts[i - 1])
      throw ValidationError("mc_counts must be strictly increasing");
  }
}

inline NoiseSchedule make_schedule(const RunConfig& cfg) {
  if (cfg.schedule_kind == "trig") return NoiseSchedule::trig();
  if (cfg.schedule_kind == "linear_vp") return NoiseSchedule::linear_vp();
  return NoiseSchedule::tabulated(cfg.schedule_times, cfg.schedule_f, cfg.schedule_g);
}

inline Dataset make_dataset(const RunConfig& cfg) {
  Dataset data = [&] {
    if (cfg.dataset_kind == "gaussian") return Dataset::gaussian(cfg.dataset_mean, cfg.dataset_var);
    if (cfg.dataset_kind == "mixture2d")
      return cfg.mixture_components.empty() ? Dataset::default_mixture2d()
                                            : Dataset::mixture2d(cfg.mixture_components);
    return Dataset::ring2d(cfg.ring_radius, cfg.ring_noise);
  }();
  // The discretized decoder's likelihood exists only on the lattice.
  data.set_quantized(cfg.decoder == "discretized_256");
  return data;
}

inline std::unique_ptr<Denoiser> make_model(const RunConfig& cfg, const NoiseSchedule& sched) {
  if (cfg.model_kind == "analytic") {
    // Matches the gaussian dataset exactly; quantization noise from the
    // discretized lattice is the only approximation left.
    return std::make_unique<AnalyticGaussianDenoiser>(sched, cfg.dataset_mean, cfg.dataset_var);
  }
  if (cfg.model_path.empty())
    throw ValidationError("model.kind=mlp needs model.path (train one with the train command)");
  return std::make_unique<MlpDenoiser>(MlpDenoiser::load(cfg.model_path));
}

inline bool resolve_clip(const RunConfig& cfg) {
  if (cfg.clip_x0 == "on") return true;
  if (cfg.clip_x0 == "off") return false;
  return cfg.model_kind == "mlp" || cfg.decoder == "discretized_256";
}

inline VarianceMode variance_mode_of(const RunConfig& cfg) {
  return cfg.variance_mode == "interpolated" ? VarianceMode::interpolated
                                             : VarianceMode::fixed_posterior;
}

inline DecoderMode decoder_mode_of(const RunConfig& cfg) {
  return cfg.decoder == "discretized_256" ? DecoderMode::discretized_256
                                          : DecoderMode::continuous_gaussian;
}

namespace detail {

inline std::filesystem::path out_path(const RunConfig& cfg, const std::string& name) {
  std::filesystem::create_directories(cfg.output_dir);
  return std::filesystem::path(cfg.output_dir) / name;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FileFormatError("cannot open " + path.string());
  json doc;
  try {
    is >> doc;
  } catch (const json::exception& e) {
    throw FileFormatError("invalid JSON in " + path.string() + ": " + e.what());
  }
  return doc;
}

inline std::uint64_t require_seed(const RunConfig& cfg) {
  if (!cfg.seed_set) throw ValidationError("this command is stochastic: pass --seed (or set seed in the config)");
  return cfg.seed;
}

// Table build plus the forward pass accounting promise.
inline CostTable build_table_checked(const Denoiser& model, const NoiseSchedule& sched,
                                     const Grid& grid, const Dataset& data,
                                     const RunConfig& cfg, std::uint64_t table_seed,
                                     std::uint64_t n_samples, std::ostream& out) {
  BuildOptions opts;
  opts.variance_mode = variance_mode_of(cfg);
  opts.decoder_mode = decoder_mode_of(cfg);
  opts.clip_x0 = resolve_clip(cfg);
  opts.n_threads = cfg.threads;
  std::uint64_t before = forward_pass_count();
  auto t0 = std::chrono::steady_clock::now();
  CostTable table = build_table(model, sched, grid, data, n_samples, table_seed, opts);
  auto t1 = std::chrono::steady_clock::now();
  std::uint64_t passes = forward_pass_count() - before;
  std::uint64_t expected = n_samples * grid.T();
  double secs = std::chrono::duration<double>(t1 - t0).count();
  out << "table: " << grid.T() << " grid steps, " << n_samples << " samples, " << passes
      << " forward passes (expected " << expected << "), " << fmt_double(secs) << " s\n";
  if (passes != expected)
    throw Error("forward pass count mismatch: got " + std::to_string(passes) + ", expected " +
                std::to_string(expected));
  return table;
}

struct CompareRow {
  std::uint64_t n_samples = 0;  // table samples (ablation only)
  std::size_t K = 0;
  std::string kind;
  double nats = 0.0;
  double bits_per_dim = 0.0;
  double stderr_nats = 0.0;
};

inline void write_compare_csv(const std::filesystem::path& path,
                              const std::vector<CompareRow>& rows, bool with_counts) {
  std::ofstream os(path);
  if (!os) throw FileFormatError("cannot open " + path.string() + " for writing");
  os << (with_counts ? "n_samples,K,stride_kind,nats,bits_per_dim,stderr\n"
                     : "K,stride_kind,nats,bits_per_dim,stderr\n");
  for (const auto& r : rows) {
    if (with_counts) os << r.n_samples << ",";
    os << r.K << "," << r.kind << "," << fmt_double(r.nats) << "," << fmt_double(r.bits_per_dim)
       << "," << fmt_double(r.stderr_nats) << "\n";
  }
}

inline StridePath stride_of_kind(const std::string& kind, const Grid& grid, std::size_t K,
                                 const DpTables* dp) {
  if (kind == "even") return even_stride(grid, K);
  if (kind == "quadratic") return quadratic_stride(grid, K);
  if (kind == "dp") {
    if (!dp) throw ValidationError("dp stride needs a solved table");
    return extract_path(*dp, grid, K);
  }
  throw ValidationError("stride kind must be dp, even, or quadratic");
}

}  // namespace detail

// Per-command options that don't belong in the config file.
struct CommandArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<int> threads;
  std::optional<std::size_t> grid_steps;
  std::optional<std::uint64_t> table_samples;
  std::optional<std::uint64_t> eval_samples;
  std::optional<std::string> variance_mode;
  std::optional<std::string> decoder;
  std::optional<std::string> clip_x0;
  std::optional<std::string> model_path;
  std::optional<std::string> schedule_kind;
  std::optional<std::string> dataset_kind;
  std::optional<std::uint64_t> train_steps;
  std::vector<std::size_t> budgets;
  std::vector<std::uint64_t> mc_counts;

  std::string table_path;      // input table for solve/eval/sample
  std::string schedules_path;  // input schedules for eval/sample
  std::size_t budget = 0;
  std::string stride_kind = "dp";
  std::uint64_t n_chains = 256;
  bool replay = false;
};

inline RunConfig resolve_config(const CommandArgs& a) {
  RunConfig cfg;
  if (!a.config_path.empty()) cfg = config_from_json(detail::read_json_file(a.config_path));
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.seed_set = true;
  }
  if (a.output_dir) cfg.output_dir = *a.output_dir;
  if (a.threads) cfg.threads = *a.threads;
  if (a.grid_steps) cfg.grid_steps = *a.grid_steps;
  if (a.table_samples) cfg.table_samples = *a.table_samples;
  if (a.eval_samples) cfg.eval_samples = *a.eval_samples;
  if (a.variance_mode) cfg.variance_mode = *a.variance_mode;
  if (a.decoder) cfg.decoder = *a.decoder;
  if (a.clip_x0) cfg.clip_x0 = *a.clip_x0;
  if (a.model_path) cfg.model_path = *a.model_path;
  if (a.schedule_kind) cfg.schedule_kind = *a.schedule_kind;
  if (a.dataset_kind) cfg.dataset_kind = *a.dataset_kind;
  if (a.train_steps) cfg.train_steps = *a.train_steps;
  if (!a.budgets.empty()) {
    cfg.budgets = a.budgets;
    cfg.budgets_explicit = true;
  }
  if (!a.mc_counts.empty()) cfg.mc_counts = a.mc_counts;
  finalize_config(cfg);
  return cfg;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
  if (cfg.model_kind != "mlp") throw ValidationError("train requires model.kind=mlp");
  std::uint64_t seed = detail::require_seed(cfg);
  NoiseSchedule sched = make_schedule(cfg);
  Dataset data = make_dataset(cfg);
  MlpConfig mcfg;
  mcfg.hidden = cfg.mlp_hidden;
  mcfg.time_features = cfg.time_features;
  mcfg.variance_logits = cfg.variance_logits;
  mcfg.discrete_steps = cfg.discrete_steps;
  TrainOptions topt;
  topt.steps = cfg.train_steps;
  topt.batch_size = cfg.batch_size;
  topt.learning_rate = cfg.learning_rate;
  auto t0 = std::chrono::steady_clock::now();
  TrainResult result = train_mlp(data, sched, mcfg, topt, derive_seed(seed, "train"));
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::filesystem::path model_path =
      cfg.model_path.empty() ? detail::out_path(cfg, "model.bin") : std::filesystem::path(cfg.model_path);
  if (model_path.has_parent_path()) std::filesystem::create_directories(model_path.parent_path());
  result.model.save(model_path);
  std::ofstream trace(detail::out_path(cfg, "train_loss.csv"));
  trace << "step,loss\n";
  for (auto [step, loss] : result.loss_trace) trace << step << "," << fmt_double(loss) << "\n";
  out << "trained " << result.model.param_count() << " parameters for " << cfg.train_steps
      << " steps in " << fmt_double(secs) << " s\n";
  if (!result.loss_trace.empty())
    out << "loss: " << fmt_double(result.loss_trace.front().second) << " -> "
        << fmt_double(result.loss_trace.back().second) << "\n";
  out << "model written to " << model_path.string() << "\n";
  return 0;
}

inline int cmd_table(const RunConfig& cfg, std::ostream& out) {
  std::uint64_t seed = detail::require_seed(cfg);
  NoiseSchedule sched = make_schedule(cfg);
  Dataset data = make_dataset(cfg);
  auto model = make_model(cfg, sched);
  if (variance_mode_of(cfg) == VarianceMode::interpolated && !model->has_variance_logits())
    throw ValidationError("interpolated variance needs a model with variance logits");
  Grid grid = Grid::uniform(cfg.grid_steps);
  CostTable table = detail::build_table_checked(*model, sched, grid, data, cfg,
                                                derive_seed(seed, "table"), cfg.table_samples, out);
  auto path = detail::out_path(cfg, "table.bin");
  save_table(table, path);
  out << "prior term: " << fmt_double(table.prior_term) << " nats\n";
  out << "table written to " << path.string() << "\n";
  return 0;
}

inline int cmd_solve(const RunConfig& cfg, const CommandArgs& args, std::ostream& out) {
  std::filesystem::path table_path =
      args.table_path.empty() ? detail::out_path(cfg, "table.bin") : std::filesystem::path(args.table_path);
  CostTable table = load_table(table_path);
  DpTables dp = solve_all_budgets(table);
  json doc = schedules_json(dp, table);
  auto sched_path = detail::out_path(cfg, "schedules.json");
  std::ofstream os(sched_path);
  os << doc.dump(2) << "\n";
  // defaulted budgets follow the table's grid, not the config's
  std::vector<std::size_t> budgets =
      cfg.budgets_explicit ? cfg.budgets : default_budgets(table.grid.T());
  for (std::size_t K : budgets) {
    if (K > table.grid.T()) throw ValidationError("budget " + std::to_string(K) + " exceeds table grid");
    double cost = dp.C(K, table.grid.T());
    double total = cost + table.prior_term;
    out << "K=" << K << ": cost " << fmt_double(cost) << " nats, total " << fmt_double(total)
        << " nats, " << fmt_double(total / (table.dim * std::numbers::ln2)) << " bits/dim\n";
  }
  out << "schedules written to " << sched_path.string() << "\n";
  return 0;
}

namespace detail {

// Resolve the evaluation path for eval/sample: dp paths come from a
// schedules document (or are solved from a table on the fly), fixed strides
// from the grid.
inline StridePath resolve_path(const RunConfig& cfg, const CommandArgs& args, const Grid& grid,
                               const CostTable* table) {
  if (args.budget < 1 || args.budget > grid.T())
    throw ValidationError("--budget must be between 1 and the number of grid steps");
  if (args.stride_kind == "dp") {
    if (!args.schedules_path.empty()) {
      json doc = read_json_file(args.schedules_path);
      StridePath p = path_from_schedules(doc, args.budget);
      if (p.indices.back() != grid.T()) throw ValidationError("schedules document grid does not match");
      return p;
    }
    if (!table) throw ValidationError("dp stride needs --schedules or --table");
    DpTables dp = solve_all_budgets(*table);
    return extract_path(dp, grid, args.budget);
  }
  return stride_of_kind(args.stride_kind, grid, args.budget, nullptr);
}

}  // namespace detail

inline int cmd_eval(const RunConfig& cfg, const CommandArgs& args, std::ostream& out) {
  NoiseSchedule sched = make_schedule(cfg);
  Dataset data = make_dataset(cfg);
  auto model = make_model(cfg, sched);
  std::optional<CostTable> table;
  if (!args.table_path.empty()) table = load_table(args.table_path);
  else if (args.replay || args.stride_kind == "dp") {
    auto p = detail::out_path(cfg, "table.bin");
    if (args.replay && !std::filesystem::exists(p))
      throw ValidationError("--replay needs a table (build one with the table command)");
    if (std::filesystem::exists(p)) table = load_table(p);
  }
  Grid grid = table ? table->grid : Grid::uniform(cfg.grid_steps);
  StridePath path = detail::resolve_path(cfg, args, grid, table ? &*table : nullptr);

  ElboReport report;
  if (args.replay) {
    if (!table) throw ValidationError("--replay needs --table");
    report = elbo_for_path_replay(*model, sched, path, data, *table, cfg.threads);
  } else {
    std::uint64_t seed = detail::require_seed(cfg);
    EvalOptions opts;
    opts.variance_mode = variance_mode_of(cfg);
    opts.decoder_mode = decoder_mode_of(cfg);
    opts.clip_x0 = resolve_clip(cfg);
    opts.n_threads = cfg.threads;
    report = elbo_for_path(*model, sched, path, data, cfg.eval_samples, derive_seed(seed, "eval"), opts);
  }

  std::vector<detail::CompareRow> rows{{0, args.budget, args.stride_kind, report.total_nats,
                                        report.bits_per_dim, report.standard_error}};
  detail::write_compare_csv(detail::out_path(cfg, "report.csv"), rows, false);
  std::ofstream tr(detail::out_path(cfg, "transitions.csv"));
  tr << "s,t,nats\n";
  for (const auto& pt : report.per_transition)
    tr << fmt_double(pt.s) << "," << fmt_double(pt.t) << "," << fmt_double(pt.nats) << "\n";
  out << "K=" << args.budget << " " << args.stride_kind << ": " << fmt_double(report.total_nats)
      << " nats (prior " << fmt_double(report.prior_nats) << "), "
      << fmt_double(report.bits_per_dim) << " bits/dim, se " << fmt_double(report.standard_error)
      << ", n=" << report.n_samples << "\n";
  return 0;
}

inline int cmd_sample(const RunConfig& cfg, const CommandArgs& args, std::ostream& out) {
  std::uint64_t seed = detail::require_seed(cfg);
  NoiseSchedule sched = make_schedule(cfg);
  auto model = make_model(cfg, sched);
  std::optional<CostTable> table;
  if (!args.table_path.empty()) table = load_table(args.table_path);
  else if (args.stride_kind == "dp" && args.schedules_path.empty()) {
    auto p = detail::out_path(cfg, "table.bin");
    if (std::filesystem::exists(p)) table = load_table(p);
  }
  Grid grid = table ? table->grid : Grid::uniform(cfg.grid_steps);
  StridePath path = detail::resolve_path(cfg, args, grid, table ? &*table : nullptr);
  EvalOptions opts;
  opts.variance_mode = variance_mode_of(cfg);
  opts.decoder_mode = decoder_mode_of(cfg);
  opts.clip_x0 = resolve_clip(cfg);
  opts.n_threads = cfg.threads;
  std::uint64_t before = forward_pass_count();
  MatrixD samples = ancestral_sample(*model, sched, path, args.n_chains, derive_seed(seed, "sample"), opts);
  std::uint64_t passes = forward_pass_count() - before;
  auto csv = detail::out_path(cfg, "samples.csv");
  std::ofstream os(csv);
  for (std::size_t c = 0; c < samples.cols(); ++c) os << (c ? "," : "") << "x" << c;
  os << "\n";
  for (std::size_t r = 0; r < samples.rows(); ++r) {
    for (std::size_t c = 0; c < samples.cols(); ++c)
      os << (c ? "," : "") << fmt_double(samples(r, c));
    os << "\n";
  }
  out << args.n_chains << " chains, K=" << args.budget << " (" << args.stride_kind << "), "
      << passes << " forward passes\n";
  for (std::size_t c = 0; c < samples.cols(); ++c) {
    double m = 0.0, sq = 0.0;
    for (std::size_t r = 0; r < samples.rows(); ++r) m += samples(r, c);
    m /= static_cast<double>(samples.rows());
    for (std::size_t r = 0; r < samples.rows(); ++r) {
      double d = samples(r, c) - m;
      sq += d * d;
    }
    double sd = samples.rows() > 1 ? std::sqrt(sq / (static_cast<double>(samples.rows()) - 1.0)) : 0.0;
    out << "x" << c << ": mean " << fmt_double(m) << ", sd " << fmt_double(sd) << "\n";
  }
  out << "samples written to " << csv.string() << "\n";
  return 0;
}

inline int cmd_compare(const RunConfig& cfg, std::ostream& out) {
  std::uint64_t seed = detail::require_seed(cfg);
  NoiseSchedule sched = make_schedule(cfg);
  Dataset data = make_dataset(cfg);
  auto model = make_model(cfg, sched);
  if (variance_mode_of(cfg) == VarianceMode::interpolated && !model->has_variance_logits())
    throw ValidationError("interpolated variance needs a model with variance logits");
  Grid grid = Grid::uniform(cfg.grid_steps);
  CostTable table = detail::build_table_checked(*model, sched, grid, data, cfg,
                                                derive_seed(seed, "table"), cfg.table_samples, out);
  save_table(table, detail::out_path(cfg, "table.bin"));
  DpTables dp = solve_all_budgets(table);
  {
    std::ofstream os(detail::out_path(cfg, "schedules.json"));
    os << schedules_json(dp, table).dump(2) << "\n";
  }
  EvalOptions opts;
  opts.variance_mode = variance_mode_of(cfg);
  opts.decoder_mode = decoder_mode_of(cfg);
  opts.clip_x0 = resolve_clip(cfg);
  opts.n_threads = cfg.threads;
  std::uint64_t eval_seed = derive_seed(seed, "eval");
  std::vector<detail::CompareRow> rows;
  for (std::size_t K : cfg.budgets) {
    for (const char* kind : {"dp", "even", "quadratic"}) {
      StridePath path = detail::stride_of_kind(kind, grid, K, &dp);
      // One eval seed for every row: same data points, paired comparison.
      ElboReport rep = elbo_for_path(*model, sched, path, data, cfg.eval_samples, eval_seed, opts);
      rows.push_back({0, K, kind, rep.total_nats, rep.bits_per_dim, rep.standard_error});
      out << "K=" << K << " " << kind << ": " << fmt_double(rep.total_nats) << " nats, "
          << fmt_double(rep.bits_per_dim) << " bits/dim, se " << fmt_double(rep.standard_error)
          << "\n";
    }
  }
  auto csv = detail::out_path(cfg, "compare.csv");
  detail::write_compare_csv(csv, rows, false);
  out << "comparison written to " << csv.string() << "\n";
  return 0;
}

inline int cmd_ablate_mc(const RunConfig& cfg, std::ostream& out) {
  std::uint64_t seed = detail::require_seed(cfg);
  NoiseSchedule sched = make_schedule(cfg);
  Dataset data = make_dataset(cfg);
  auto model = make_model(cfg, sched);
  Grid grid = Grid::uniform(cfg.grid_steps);
  EvalOptions opts;
  opts.variance_mode = variance_mode_of(cfg);
  opts.decoder_mode = decoder_mode_of(cfg);
  opts.clip_x0 = resolve_clip(cfg);
  opts.n_threads = cfg.threads;
  // Same data points for every row: schedule quality is the only thing that
  // changes between table sizes.
  std::uint64_t eval_seed = derive_seed(seed, "eval");
  std::vector<detail::CompareRow> rows;
  for (std::uint64_t count : cfg.mc_counts) {
    CostTable table = detail::build_table_checked(
        *model, sched, grid, data, cfg, derive_seed(derive_seed(seed, "table"), count), count, out);
    DpTables dp = solve_all_budgets(table);
    for (std::size_t K : cfg.budgets) {
      StridePath path = extract_path(dp, grid, K);
      ElboReport rep = elbo_for_path(*model, sched, path, data, cfg.eval_samples, eval_seed, opts);
      rows.push_back({count, K, "dp", rep.total_nats, rep.bits_per_dim, rep.standard_error});
      out << "n=" << count << " K=" << K << ": " << fmt_double(rep.total_nats) << " nats, se "
          << fmt_double(rep.standard_error) << "\n";
    }
  }
  auto csv = detail::out_path(cfg, "ablate_mc.csv");
  detail::write_compare_csv(csv, rows, true);
  out << "ablation written to " << csv.string() << "\n";
  return 0;
}

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ELBO-optimal inference strides for diffusion models"};
  app.require_subcommand(1);
  CommandArgs a;

  auto add_common = [&](CLI::App* sub, bool with_seed) {
    sub->add_option("--config", a.config_path, "JSON config file");
    if (with_seed) sub->add_option("--seed", a.seed, "master seed (required unless set in config)");
    sub->add_option("--output-dir", a.output_dir, "artifact directory");
    sub->add_option("--threads", a.threads, "worker threads (0 = hardware)");
    sub->add_option("--grid-steps", a.grid_steps, "grid resolution T");
    sub->add_option("--n-table-samples", a.table_samples, "Monte Carlo samples per table entry");
    sub->add_option("--n-eval-samples", a.eval_samples, "Monte Carlo samples per evaluation");
    sub->add_option("--variance-mode", a.variance_mode, "fixed_posterior | interpolated");
    sub->add_option("--decoder", a.decoder, "continuous_gaussian | discretized_256");
    sub->add_option("--clip-x0", a.clip_x0, "auto | on | off");
    sub->add_option("--model", a.model_path, "model file (mlp kind)");
    sub->add_option("--schedule", a.schedule_kind, "trig | linear_vp | custom");
    sub->add_option("--dataset", a.dataset_kind, "gaussian | mixture2d | ring2d");
  };

  CLI::App* train = app.add_subcommand("train", "train an mlp noise predictor");
  add_common(train, true);
  train->add_option("--train-steps", a.train_steps, "optimizer steps");

  CLI::App* table = app.add_subcommand("table", "estimate the per-transition cost table");
  add_common(table, true);

  CLI::App* solve = app.add_subcommand("solve", "optimal schedules for every budget");
  add_common(solve, false);
  solve->add_option("--table", a.table_path, "cost table file");
  solve->add_option("--budgets", a.budgets, "budgets to report")->delimiter(',');

  CLI::App* eval = app.add_subcommand("eval", "Monte Carlo bound for one schedule");
  add_common(eval, true);
  eval->add_option("--budget", a.budget, "number of inference steps")->required();
  eval->add_option("--stride-kind", a.stride_kind, "dp | even | quadratic");
  eval->add_option("--table", a.table_path, "cost table file (for dp strides or --replay)");
  eval->add_option("--schedules", a.schedules_path, "schedules document (for dp strides)");
  eval->add_flag("--replay", a.replay, "re-evaluate on the exact table draws");

  CLI::App* sample = app.add_subcommand("sample", "draw data by ancestral simulation");
  add_common(sample, true);
  sample->add_option("--budget", a.budget, "number of inference steps")->required();
  sample->add_option("--stride-kind", a.stride_kind, "dp | even | quadratic");
  sample->add_option("--table", a.table_path, "cost table file (for dp strides)");
  sample->add_option("--schedules", a.schedules_path, "schedules document (for dp strides)");
  sample->add_option("--n-chains", a.n_chains, "number of samples");

  CLI::App* compare = app.add_subcommand("compare", "dp vs fixed strides across budgets");
  add_common(compare, true);
  compare->add_option("--budgets", a.budgets, "budgets to compare")->delimiter(',');

  CLI::App* ablate = app.add_subcommand("ablate-mc", "schedule stability vs table sample count");
  add_common(ablate, true);
  ablate->add_option("--budgets", a.budgets, "budgets to evaluate")->delimiter(',');
  ablate->add_option("--mc-counts", a.mc_counts, "table sample counts")->delimiter(',');

  std::vector<const char*> argv;
  argv.push_back("dpstride");
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig cfg = resolve_config(a);
    if (train->parsed()) return cmd_train(cfg, out);
    if (table->parsed()) return cmd_table(cfg, out);
    if (solve->parsed()) return cmd_solve(cfg, a, out);
    if (eval->parsed()) return cmd_eval(cfg, a, out);
    if (sample->parsed()) return cmd_sample(cfg, a, out);
    if (compare->parsed()) return cmd_compare(cfg, out);
    if (ablate->parsed()) return cmd_ablate_mc(cfg, out);
    err << "error[usage]: no command\n";
    return 2;
  } catch (const ValidationError& e) {
    err << "error[config]: " << e.what() << "\n";
    return 2;
  } catch (const FileFormatError& e) {
    err << "error[file]: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    err << "error[config]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error[numeric]: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
    return 3;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args), std::cout, std::cerr);
}

}  // namespace dpstride::cli
