// ctl: microgrid controller service.
//
//   ctl run --config FILE --sim HOST[:PMU_PORT] [--modbus-port N]
//           [--delay-in N] [--delay-out N] [--accelerated]
//           [--bridge-port N] [--duration S]
//
// With --accelerated the loop ticks on each arriving PCC frame instead of
// its own clock, so it keeps lock-step with whatever rate the simulator runs.

#include "mgchil/config.hpp"
#include "mgchil/net.hpp"
#include "signal.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Microgrid controller service"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "Run the controller");
  std::string config_path, sim_addr = "127.0.0.1:4712", bridge_bind = "127.0.0.1";
  int delay_in = 1, delay_out = 1;
  std::uint16_t modbus_port = 1502, bridge_port = 4713;
  bool accelerated = false;
  double duration = 0.0;
  run->add_option("--config", config_path, "Controller config file")->required()->check(CLI::ExistingFile);
  run->add_option("--sim", sim_addr, "Simulator address HOST[:PMU_PORT]");
  run->add_option("--modbus-port", modbus_port, "Simulator Modbus port");
  run->add_option("--delay-in", delay_in, "Ingress delay in ticks")->check(CLI::NonNegativeNumber);
  run->add_option("--delay-out", delay_out, "Egress delay in ticks")->check(CLI::NonNegativeNumber);
  run->add_flag("--accelerated", accelerated, "Tick on frame arrival instead of the wall clock");
  run->add_option("--bridge-port", bridge_port, "Operator bridge port");
  run->add_option("--bridge-bind", bridge_bind, "Operator bridge listen address");
  run->add_option("--duration", duration, "Stop after this many seconds (0 = until interrupted)");
  CLI11_PARSE(app, argc, argv);

  try {
    const mgchil::ControllerFile file = mgchil::load_controller_file(config_path);
    const std::string base = std::filesystem::path(config_path).parent_path().string();
    const mgchil::ControllerConfig cfg =
        mgchil::controller_config_from_file(file, delay_in, delay_out, base.empty() ? "." : base);

    mgchil::ControllerOptions opt;
    const auto colon = sim_addr.rfind(':');
    opt.sim_host = colon == std::string::npos ? sim_addr : sim_addr.substr(0, colon);
    if (colon != std::string::npos)
      opt.pmu_port = static_cast<std::uint16_t>(std::stoi(sim_addr.substr(colon + 1)));
    opt.modbus_port = modbus_port;
    opt.bridge_port = bridge_port;
    opt.bridge_bind = bridge_bind;

    mgchil::ControllerService ctl(cfg, opt);
    ctl.start();
    std::cerr << "ctl: simulator " << opt.sim_host << ":" << opt.pmu_port << "/" << opt.modbus_port
              << ", bridge on " << bridge_bind << ":" << ctl.bridge_port() << "\n";

    tools::install_stop_handler();
    mgchil::LoopClock clock(cfg.sample_time());
    clock.start();
    const long limit = duration > 0.0 ? std::lround(duration / cfg.sample_time()) : -1;
    long ticks = 0;
    bool was_linked = false;
    while (!tools::g_stop && (limit < 0 || ticks < limit)) {
      if (accelerated) {
        if (!ctl.wait_for_frame(std::chrono::milliseconds(200))) continue;
      } else if (!clock.wait_next()) {
        std::cerr << "ctl: tick " << ticks << " overran\n";
      }
      const auto out = ctl.tick();
      ++ticks;
      if (ctl.linked() != was_linked) {
        was_linked = !was_linked;
        std::cerr << "ctl: simulator link " << (was_linked ? "up" : "down") << "\n";
      }
      if (out.report.flags & mgchil::kFlagFailsafe && ticks % 50 == 0)
        std::cerr << "ctl: measurements stale, failsafe command\n";
    }
    ctl.stop();
    std::cout << "ticks " << ticks << ", frame errors " << ctl.frame_errors() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "ctl: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
