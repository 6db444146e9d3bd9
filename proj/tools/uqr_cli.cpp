// uqr: synth | run | report. Exit codes: 0 ok, 1 internal, 2 config/usage,
// 3 data, 4 numeric.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "uqr/pipeline.hpp"

namespace {

int cmd_synth(const std::string& law_name, std::size_t n, std::uint64_t seed, double scale, const std::string& out) {
  const auto law = uqr::NoiseLaw::parse(law_name, scale);
  const auto d = uqr::synth_heteroscedastic(n, seed, law);
  std::filesystem::create_directories(out);
  const auto dir = std::filesystem::path(out);
  uqr::write_csv((dir / "data.csv").string(), d);
  std::ofstream(dir / "schema.json") << uqr::Schema::for_dataset(d).to_json().dump(2) << '\n';
  std::cout << "wrote " << n << " rows (" << law.name() << " noise) to " << (dir / "data.csv").string() << '\n';
  return 0;
}

int cmd_run(const std::string& config, std::optional<std::uint64_t> seed, std::optional<std::string> out) {
  const auto cfg = uqr::RunConfig::load(config, seed);
  const auto res = uqr::run(cfg, out);
  uqr::write_reports_csv(std::cout, res.reports);
  std::cout << "outputs in " << res.out_dir.string() << '\n';
  return 0;
}

int cmd_report(const std::string& dir) {
  const auto s = uqr::report(dir);
  std::cout << uqr::render_summary(s);
  std::cout << s.row_count() << " rows across " << s.sections.size() << " methods; summary in "
            << (std::filesystem::path(dir) / uqr::kSummaryFile).string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal uncertainty intervals for boosted regressors"};
  app.set_version_flag("--version", std::string(uqr::kVersion));
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "write a synthetic heteroscedastic dataset");
  std::string law = "constant", synth_out = ".";
  std::size_t n = 1000;
  std::uint64_t synth_seed = 0;
  double scale = 1.0;
  synth->add_option("--law", law, "noise law: constant, linear or sinusoidal")->capture_default_str();
  synth->add_option("--n", n, "number of rows")->capture_default_str();
  synth->add_option("--seed", synth_seed, "random seed")->capture_default_str();
  synth->add_option("--scale", scale, "noise scale")->capture_default_str();
  synth->add_option("--out", synth_out, "output directory (data.csv, schema.json)")->capture_default_str();

  auto* run = app.add_subcommand("run", "execute a run from a JSON config");
  std::string config;
  std::optional<std::uint64_t> run_seed;
  std::optional<std::string> run_out;
  run->add_option("config", config, "config file")->required();
  run->add_option("--seed", run_seed, "override every stage seed");
  run->add_option("--out", run_out, "output directory (overrides the config)");

  auto* rep = app.add_subcommand("report", "summarise a completed run directory");
  std::string dir;
  rep->add_option("dir", dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(law, n, synth_seed, scale, synth_out);
    if (*run) return cmd_run(config, run_seed, run_out);
    if (*rep) return cmd_report(dir);
  } catch (const uqr::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
