// Copyright 2026 The UMKD Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "umkd/experiment.hpp"
#include "umkd/gradcheck_cases.hpp"

namespace {

int cmd_run(const std::string& config_path, bool dry_run, bool overwrite, const std::optional<std::uint64_t>& seed) {
  umkd::RunOptions opt;
  opt.dry_run = dry_run;
  opt.overwrite = overwrite;
  opt.seed_override = seed;
  opt.log = dry_run ? &std::cout : &std::cerr;
  auto res = umkd::run_experiment(umkd::read_text_file(config_path), opt);
  if (!dry_run) {
    std::cout << umkd::summary_markdown(res.summary);
    std::cout << "run directory: " << res.dir.string() << "\n";
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& json_out) {
  std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
  auto cmp = umkd::compare_runs(paths);
  for (const auto& w : cmp.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << cmp.to_markdown();
  if (!json_out.empty()) umkd::write_text_file(json_out, cmp.to_json().dump(2) + "\n");
  return 0;
}

int cmd_gradcheck(int instances, const std::string& json_out) {
  auto s = umkd::gradcheck::run_suite(instances);
  for (const auto& o : s.ops)
    std::cout << (o.failures ? "FAIL " : "ok   ") << o.op << "  instances=" << o.instances
              << "  worst_rel_err=" << o.worst_rel_error << "\n";
  for (const auto& m : s.missing) std::cout << "FAIL " << m << "  (no registered case)\n";
  std::cout << "elapsed " << s.seconds << " s\n";
  if (!json_out.empty()) umkd::write_text_file(json_out, s.to_json().dump(2) + "\n");
  return s.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-expert knowledge distillation for medical image grading"};
  app.require_subcommand(1);

  std::string config_path;
  bool dry_run = false, deterministic = false, overwrite = false;
  std::optional<std::uint64_t> seed_override;
  auto* run = app.add_subcommand("run", "Train experts and distil students as configured");
  run->add_option("config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_flag("--dry-run", dry_run, "Print the resolved config and planned stages, then exit");
  run->add_option("--seed-override", seed_override, "Run a single seed instead of the configured list");
  run->add_flag("--deterministic", deterministic, "Single-threaded, bit-reproducible execution (always on)");
  run->add_flag("--overwrite", overwrite, "Reuse an output directory that already holds a run");

  std::vector<std::string> dirs;
  std::string compare_json;
  auto* compare = app.add_subcommand("compare", "Tabulate completed runs with a delta row");
  compare->add_option("dirs", dirs, "Run directories")->required();
  compare->add_option("--json", compare_json, "Also write the table as JSON");

  int instances = 50;
  std::string gradcheck_json;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc->add_option("--instances", instances, "Random instances per op")->check(CLI::PositiveNumber);
  gc->add_option("--json", gradcheck_json, "Write the report as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, dry_run, overwrite, seed_override);
    if (*compare) return cmd_compare(dirs, compare_json);
    if (*gc) return cmd_gradcheck(instances, gradcheck_json);
  } catch (const umkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
