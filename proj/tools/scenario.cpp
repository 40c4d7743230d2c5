// scenario: batch runs, metrics and plots.
//
//   scenario run FILE [--accelerated] [--out DIR]
//   scenario metrics RECORD [--json]
//   scenario plot RECORD [--out DIR]
//   scenario identify FILE --out MODEL

#include "mgchil/metrics.hpp"
#include "mgchil/plots.hpp"
#include "mgchil/scenario.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>

namespace {

void print_metrics(const mgchil::MetricsReport& m, std::ostream& os) {
  os << std::fixed << std::setprecision(3);
  os << "rows               " << m.rows << "\n"
     << "SoC min / max      " << m.soc_min << " / " << m.soc_max << " %\n"
     << "limit violations   " << m.limit_violations << "\n"
     << "peak excursion     " << m.peak_excursion << " kW\n";
  for (const auto& e : m.events) {
    os << "event t=" << e.t_event << " s  " << std::showpos << e.magnitude << std::noshowpos
       << " kW  recovery ";
    if (e.recovery_time) os << *e.recovery_time << " s";
    else os << "none";
    os << "  peak " << e.peak_excursion << " kW\n";
  }
  for (const auto& s : m.segments) {
    os << "segment " << s.mode << (s.recovery ? " (SoC recovery)" : "") << "  " << s.t_start
       << "-" << s.t_end << " s  rmse " << s.rmse << " kW";
    if (!std::isnan(s.rmse_settled)) os << "  settled " << s.rmse_settled << " kW";
    os << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scenario runner"};
  app.require_subcommand(1);

  std::string file, out_dir = "runs", model_out;
  bool accelerated = false, json = false;

  auto* run = app.add_subcommand("run", "Run a scenario and write its run record");
  run->add_option("file", file, "Scenario file")->required()->check(CLI::ExistingFile);
  run->add_flag("--accelerated", accelerated, "Run as fast as possible, in process");
  run->add_option("--out", out_dir, "Output directory");

  auto* metrics = app.add_subcommand("metrics", "Summarize a run record");
  metrics->add_option("record", file, "Run record")->required()->check(CLI::ExistingFile);
  metrics->add_flag("--json", json, "Print JSON");

  auto* plot = app.add_subcommand("plot", "Write SVG figures for a run record");
  plot->add_option("record", file, "Run record")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", out_dir, "Output directory (default: next to the record)");

  auto* ident = app.add_subcommand("identify", "Step-test the scenario plant and save the model");
  ident->add_option("file", file, "Scenario file")->required()->check(CLI::ExistingFile);
  ident->add_option("--out", model_out, "Model file to write")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const mgchil::Scenario s = mgchil::load_scenario(file);
      mgchil::RunOptions opt;
      opt.accelerated = accelerated;
      opt.out_dir = out_dir;
      const std::string base = std::filesystem::path(file).parent_path().string();
      opt.base_dir = base.empty() ? "." : base;
      mgchil::RunResult res;
      try {
        res = mgchil::run_scenario(s, opt);
      } catch (...) {
        std::cerr << "scenario: run failed; partial record kept in " << out_dir << "\n";
        throw;
      }
      std::cout << "record " << res.record_path << " (" << res.rows << " ticks)\n";
      if (!accelerated)
        std::cout << std::fixed << std::setprecision(3) << "tick period sim "
                  << res.sim_clock.mean_period * 1e3 << " ms, ctl " << res.ctl_clock.mean_period * 1e3
                  << " ms, overruns " << res.sim_clock.overruns + res.ctl_clock.overruns << "\n";
      if (res.bridge_errors) std::cout << "bridge command errors " << res.bridge_errors << "\n";
      print_metrics(mgchil::compute_metrics(mgchil::load_run_record(res.record_path)), std::cout);
    } else if (*metrics) {
      const auto m = mgchil::compute_metrics(mgchil::load_run_record(file));
      if (json) std::cout << mgchil::metrics_json(m).dump(2) << "\n";
      else print_metrics(m, std::cout);
    } else if (*plot) {
      const auto rec = mgchil::load_run_record(file);
      const std::filesystem::path p(file);
      const std::string dir = plot->count("--out") ? out_dir : (p.parent_path().empty() ? "." : p.parent_path().string());
      for (const auto& path : mgchil::emit_plots(rec, dir, p.stem().string())) std::cout << path << "\n";
    } else if (*ident) {
      const mgchil::Scenario s = mgchil::load_scenario(file);
      const auto res = mgchil::identify_scenario_plant(s);
      mgchil::save_model(model_out, res.model);
      std::cout << "order " << res.order << (res.reflected ? " (unstable poles reflected)" : "")
                << ", written to " << model_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "scenario: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
