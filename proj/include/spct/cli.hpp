#pragma once

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "spct/data.hpp"
#include "spct/engine.hpp"
#include "spct/io.hpp"
#include "spct/verify.hpp"

namespace spct {

// exit codes: 0 success, 1 runtime/check failure, 2 usage/config,
// 3 numerical abort
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitNumeric = 3,
};

struct DataParams {
  int n = 200;
  int hw = 32;
  double labeled_ratio = 0.05;
};

struct ParsedConfig {
  TrainConfig train;
  DataParams data;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& value, const std::string& key, int line) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last)
    throw ValueError("config line " + std::to_string(line) + ": key '" + key +
                     "' has invalid value '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& value, const std::string& key,
                       int line) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValueError("config line " + std::to_string(line) + ": key '" + key +
                   "' expects true/false, got '" + value + "'");
}

}  // namespace detail

/// Flat `key = value` config with `#` comments. Keys are exactly the
/// TrainConfig field names plus the data-generation keys (n, hw,
/// labeled_ratio); unknown keys are rejected with their line number.
inline ParsedConfig parse_config_text(const std::string& text) {
  ParsedConfig cfg;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    std::string s = detail::trim(hash == std::string::npos
                                     ? raw
                                     : raw.substr(0, hash));
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ValueError("config line " + std::to_string(line) +
                       ": expected 'key = value', got '" + s + "'");
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string value = detail::trim(s.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ValueError("config line " + std::to_string(line) +
                       ": empty key or value");

    TrainConfig& t = cfg.train;
    if (key == "views")
      t.views = detail::parse_number<int>(value, key, line);
    else if (key == "epochs")
      t.epochs = detail::parse_number<int>(value, key, line);
    else if (key == "iters_per_epoch")
      t.iters_per_epoch = detail::parse_number<int>(value, key, line);
    else if (key == "batch_labeled")
      t.batch_labeled = detail::parse_number<int>(value, key, line);
    else if (key == "batch_unlabeled")
      t.batch_unlabeled = detail::parse_number<int>(value, key, line);
    else if (key == "lambda1")
      t.lambda1 = detail::parse_number<double>(value, key, line);
    else if (key == "lambda2")
      t.lambda2 = detail::parse_number<double>(value, key, line);
    else if (key == "epsilon_floor")
      t.epsilon_floor = detail::parse_number<double>(value, key, line);
    else if (key == "gamma0")
      t.gamma0 = detail::parse_number<double>(value, key, line);
    else if (key == "pace_ramp_epochs")
      t.pace_ramp_epochs = detail::parse_number<int>(value, key, line);
    else if (key == "alpha_max")
      t.alpha_max = detail::parse_number<double>(value, key, line);
    else if (key == "alpha_ramp_epochs")
      t.alpha_ramp_epochs = detail::parse_number<int>(value, key, line);
    else if (key == "beta")
      t.beta = detail::parse_number<double>(value, key, line);
    else if (key == "base_lr")
      t.base_lr = detail::parse_number<double>(value, key, line);
    else if (key == "seed")
      t.seed = detail::parse_number<std::uint64_t>(value, key, line);
    else if (key == "enable_spc")
      t.enable_spc = detail::parse_bool(value, key, line);
    else if (key == "enable_consistency")
      t.enable_consistency = detail::parse_bool(value, key, line);
    else if (key == "parallel_views")
      t.parallel_views = detail::parse_bool(value, key, line);
    else if (key == "n")
      cfg.data.n = detail::parse_number<int>(value, key, line);
    else if (key == "hw")
      cfg.data.hw = detail::parse_number<int>(value, key, line);
    else if (key == "labeled_ratio")
      cfg.data.labeled_ratio = detail::parse_number<double>(value, key, line);
    else
      throw ValueError("config line " + std::to_string(line) +
                       ": unknown key '" + key + "'");
  }
  return cfg;
}

inline ParsedConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

namespace detail {

inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    out.push_back(parse_number<std::uint64_t>(cur, "seeds", 0));
    cur.clear();
  };
  for (char c : s) {
    if (c == ',')
      flush();
    else if (!std::isspace(static_cast<unsigned char>(c)))
      cur += c;
  }
  flush();
  return out;
}

inline void write_text(const std::filesystem::path& path,
                       const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

inline int cmd_gen_data(const std::string& out_dir, std::uint64_t seed, int n,
                        int hw, double labeled_ratio, std::ostream& os) {
  try {
    const Dataset ds = generate(seed, n, hw, labeled_ratio);
    save_dataset(out_dir, ds);
    os << "|S|=" << ds.labeled.size() << " |U|=" << ds.unlabeled.size()
       << " |T|=" << ds.test.size() << "\n";
    return kExitOk;
  } catch (const ValueError& e) {
    std::cerr << "gen-data: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "gen-data: " << e.what() << "\n";
    return kExitFailure;
  }
}

inline int cmd_train(const std::string& config_path,
                     const std::string& data_dir, const std::string& out_dir,
                     bool stamp, std::ostream& os) {
  ParsedConfig cfg;
  try {
    if (!config_path.empty()) cfg = parse_config_file(config_path);
  } catch (const ValueError& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitFailure;
  }
  try {
    cfg.train.validate();
  } catch (const ValueError& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    const Dataset ds = load_dataset(data_dir);
    TrainResult result = train(cfg.train, ds);
    std::filesystem::create_directories(out_dir);
    detail::write_text(std::filesystem::path(out_dir) / "record.csv",
                       result.record.to_csv());
    save_checkpoint(out_dir, result.ensemble,
                    cfg.train.epochs > 0 ? cfg.train.epochs - 1 : 0);
    if (stamp) {
      std::ostringstream st;
      st << "unix_time=" << std::time(nullptr) << "\n";
      detail::write_text(std::filesystem::path(out_dir) / "stamp.txt",
                         st.str());
    }
    const EvalResult ev =
        evaluate(result.ensemble, ds, cfg.train.enable_consistency);
    os << "final_dsc=" << fmt_double(ev.mean_dsc)
       << " final_hd=" << fmt_double(ev.mean_hd) << "\n";
    return kExitOk;
  } catch (const TrainAbort& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitFailure;
  }
}

struct AblationCell {
  bool self_consistency = false;
  bool self_paced = false;
  std::vector<double> dsc_per_seed;
  std::vector<std::string> errors;

  double mean() const {
    double s = 0.0;
    for (double v : dsc_per_seed) s += v;
    return dsc_per_seed.empty() ? 0.0 : s / dsc_per_seed.size();
  }
  double stddev() const {
    if (dsc_per_seed.size() < 2) return 0.0;
    const double m = mean();
    double acc = 0.0;
    for (double v : dsc_per_seed) acc += (v - m) * (v - m);
    return std::sqrt(acc / (dsc_per_seed.size() - 1));
  }
};

/// The four-cell {self-paced x self-consistency} grid over a seed list.
/// Cells run on a small worker pool; failures are reported per cell and the
/// remaining cells still run.
inline std::vector<AblationCell> run_ablation(const TrainConfig& base,
                                              const Dataset& ds,
                                              const std::vector<std::uint64_t>& seeds,
                                              int jobs) {
  struct Task {
    int cell;
    std::size_t seed_idx;
  };
  const bool flags[4][2] = {
      {false, false}, {false, true}, {true, false}, {true, true}};
  std::vector<AblationCell> cells(4);
  for (int c = 0; c < 4; ++c) {
    cells[static_cast<std::size_t>(c)].self_consistency = flags[c][0];
    cells[static_cast<std::size_t>(c)].self_paced = flags[c][1];
    cells[static_cast<std::size_t>(c)].dsc_per_seed.assign(seeds.size(), 0.0);
  }
  std::vector<Task> tasks;
  for (int c = 0; c < 4; ++c)
    for (std::size_t s = 0; s < seeds.size(); ++s) tasks.push_back({c, s});

  std::vector<std::string> task_errors(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task t = tasks[i];
      TrainConfig cfg = base;
      cfg.enable_consistency = flags[t.cell][0];
      cfg.enable_spc = flags[t.cell][1];
      cfg.seed = seeds[t.seed_idx];
      try {
        TrainResult r = train(cfg, ds);
        const EvalResult ev = evaluate(r.ensemble, ds, cfg.enable_consistency);
        cells[static_cast<std::size_t>(t.cell)].dsc_per_seed[t.seed_idx] =
            ev.mean_dsc;
      } catch (const Error& e) {
        task_errors[i] = e.what();
      }
    }
  };
  const int workers =
      std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (!task_errors[i].empty())
      cells[static_cast<std::size_t>(tasks[i].cell)].errors.push_back(
          "seed " + std::to_string(seeds[tasks[i].seed_idx]) + ": " +
          task_errors[i]);
  return cells;
}

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::string out = "self_consistency,self_paced,mean_dsc,std_dsc\n";
  for (const auto& c : cells) {
    out += std::string(c.self_consistency ? "1" : "0") + "," +
           (c.self_paced ? "1" : "0") + "," + fmt_double(c.mean()) + "," +
           fmt_double(c.stddev()) + "\n";
  }
  return out;
}

inline int cmd_ablate(const std::string& config_path,
                      const std::string& data_dir, const std::string& out_dir,
                      const std::string& seeds_arg, int jobs,
                      std::ostream& os) {
  ParsedConfig cfg;
  std::vector<std::uint64_t> seeds;
  try {
    if (!config_path.empty()) cfg = parse_config_file(config_path);
    seeds = detail::parse_seed_list(seeds_arg);
    if (seeds.empty())
      throw ValueError("ablate: need at least one seed");
    cfg.train.validate();
  } catch (const ValueError& e) {
    std::cerr << "ablate: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "ablate: " << e.what() << "\n";
    return kExitFailure;
  }
  try {
    const Dataset ds = load_dataset(data_dir);
    if (jobs <= 0)
      jobs = std::max(1u, std::thread::hardware_concurrency());
    const auto cells = run_ablation(cfg.train, ds, seeds, jobs);
    std::filesystem::create_directories(out_dir);
    detail::write_text(std::filesystem::path(out_dir) / "ablation.csv",
                       ablation_csv(cells));

    bool any_error = false;
    for (const auto& c : cells)
      for (const auto& e : c.errors) {
        std::cerr << "ablate: cell(consistency=" << c.self_consistency
                  << ", spc=" << c.self_paced << ") " << e << "\n";
        any_error = true;
      }
    // cells: 0 = neither, 1 = spc only, 2 = consistency only, 3 = full
    const double neither = cells[0].mean(), spc_only = cells[1].mean(),
                 cons_only = cells[2].mean(), full = cells[3].mean();
    const bool ordering = full >= cons_only && full >= spc_only &&
                          cons_only >= neither && spc_only >= neither;
    os << "ablation mean DSC: neither=" << fmt_double(neither)
       << " spc_only=" << fmt_double(spc_only)
       << " consistency_only=" << fmt_double(cons_only)
       << " full=" << fmt_double(full) << "\n";
    os << "ordering full >= each single >= neither: "
       << (ordering ? "PASS" : "FAIL") << "\n";
    return any_error ? kExitFailure : kExitOk;
  } catch (const Error& e) {
    std::cerr << "ablate: " << e.what() << "\n";
    return kExitFailure;
  }
}

inline int cmd_verify(std::uint64_t seed, long long cases, long long probes,
                      const std::string& out_csv, bool inject_gradient_fault,
                      std::ostream& os) {
  if (cases < 1) {
    std::cerr << "verify: --cases must be >= 1\n";
    return kExitUsage;
  }
  if (probes < 100) {
    std::cerr << "verify: --probes must be >= 100\n";
    return kExitUsage;
  }
  try {
    const VerifyReport report =
        run_all_checks(seed, cases, probes, inject_gradient_fault);
    if (!out_csv.empty()) write_verify_csv(out_csv, report);
    for (const auto& c : report.checks)
      os << (c.pass ? "PASS" : "FAIL") << " " << c.name
         << " cases=" << c.cases << " max_error=" << fmt_double(c.max_error)
         << " tolerance=" << fmt_double(c.tolerance) << "\n";
    return report.all_pass() ? kExitOk : kExitFailure;
  } catch (const Error& e) {
    std::cerr << "verify: " << e.what() << "\n";
    return kExitFailure;
  }
}

// ---------------------------------------------------------------------------
// Argument wiring.
// ---------------------------------------------------------------------------

inline int run_cli(std::vector<std::string> args, std::ostream& os = std::cout) {
  CLI::App app{"self-paced self-consistent co-training for semi-supervised "
               "segmentation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out;
  std::uint64_t gen_seed = 1;
  int gen_n = 200, gen_hw = 32;
  double gen_ratio = 0.05;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--n", gen_n, "number of training images");
  gen->add_option("--hw", gen_hw, "image height/width");
  gen->add_option("--labeled-ratio", gen_ratio, "labeled fraction of n");

  auto* tr = app.add_subcommand("train", "train on a generated dataset");
  std::string tr_config, tr_data, tr_out;
  bool tr_stamp = false;
  tr->add_option("--config", tr_config, "key = value config file");
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_flag("--stamp", tr_stamp, "also write a wall-clock stamp file");

  auto* ab = app.add_subcommand("ablate", "run the 4-cell ablation grid");
  std::string ab_config, ab_data, ab_out, ab_seeds;
  int ab_jobs = 0;
  ab->add_option("--config", ab_config, "key = value config file");
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--seeds", ab_seeds, "comma-separated seed list")->required();
  ab->add_option("--jobs", ab_jobs, "parallel training runs (0 = all cores)");

  auto* ve = app.add_subcommand("verify", "run the numerical certification "
                                          "suite");
  std::uint64_t ve_seed = 1;
  long long ve_cases = 1000, ve_probes = 1000;
  std::string ve_out = "verify.csv";
  bool ve_fault = false;
  ve->add_option("--seed", ve_seed, "check seed");
  ve->add_option("--cases", ve_cases, "cases per check");
  ve->add_option("--probes", ve_probes, "probes per optimality case");
  ve->add_option("--out", ve_out, "verify.csv path");
  ve->add_flag("--inject-gradient-fault", ve_fault,
               "debug hook: corrupt one gradient to exercise the failure path")
      ->group("");  // hidden

  std::vector<const char*> argv;
  argv.push_back("spct");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    os << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  if (gen->parsed())
    return cmd_gen_data(gen_out, gen_seed, gen_n, gen_hw, gen_ratio, os);
  if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_stamp, os);
  if (ab->parsed())
    return cmd_ablate(ab_config, ab_data, ab_out, ab_seeds, ab_jobs, os);
  if (ve->parsed())
    return cmd_verify(ve_seed, ve_cases, ve_probes, ve_out, ve_fault, os);
  return kExitUsage;
}

}  // namespace spct
