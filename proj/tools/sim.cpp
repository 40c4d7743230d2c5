// sim: microgrid simulator service.
//
//   sim run --scenario FILE [--ports PMU,MODBUS] [--bind ADDR] [--out DIR]
//
// Streams six PMUs on the synchrophasor port and serves the inverter
// registers over Modbus TCP at the scenario's sample rate until the scenario
// ends. The scenario's mode schedule is ignored here; it is the operator's
// business (see `scenario run`).

#include "mgchil/net.hpp"
#include "mgchil/scenario.hpp"
#include "signal.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Microgrid simulator service"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "Run the simulator in real time");
  std::string scenario_path, ports = "4712,1502", bind = "127.0.0.1", out_dir = ".";
  run->add_option("--scenario", scenario_path, "Scenario file")->required()->check(CLI::ExistingFile);
  run->add_option("--ports", ports, "PMU and Modbus ports, comma separated");
  run->add_option("--bind", bind, "Listen address");
  run->add_option("--out", out_dir, "Directory for the run record");
  CLI11_PARSE(app, argc, argv);

  try {
    const mgchil::Scenario s = mgchil::load_scenario(scenario_path);
    mgchil::SimulatorOptions opt;
    opt.bind = bind;
    const auto comma = ports.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("--ports expects PMU,MODBUS");
    opt.pmu_port = static_cast<std::uint16_t>(std::stoi(ports.substr(0, comma)));
    opt.modbus_port = static_cast<std::uint16_t>(std::stoi(ports.substr(comma + 1)));

    const auto epoch = static_cast<std::uint32_t>(
        std::chrono::duration_cast<std::chrono::seconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count());
    mgchil::SimulatorService sim(mgchil::SimulatorCore(mgchil::make_plant(s), {}, epoch), opt);
    sim.start();
    std::cerr << "sim: PMU stream on " << bind << ":" << sim.pmu_port() << ", Modbus on " << bind
              << ":" << sim.modbus_port() << ", epoch " << epoch << "\n";

    tools::install_stop_handler();
    std::filesystem::create_directories(out_dir);
    const std::string path = (std::filesystem::path(out_dir) / (s.name + "_sim.csv")).string();
    mgchil::RunRecordWriter writer(path, mgchil::run_meta(s, false));
    mgchil::LoopClock clock(s.time_step);
    clock.start();
    long ticks = 0;
    for (long k = 0; k < s.ticks() && !tools::g_stop; ++k) {
      if (!clock.wait_next()) std::cerr << "sim: tick " << k << " overran\n";
      writer.write(sim.tick());
      ++ticks;
    }
    writer.flush();
    sim.stop();

    const mgchil::PlantState st = sim.plant_state();
    const auto& cs = clock.stats();
    std::cout << "ticks " << ticks << "\n"
              << "final t " << st.t << " s, P_PCC " << st.p_pcc << " kW, SoC " << st.battery.soc
              << " %\n"
              << "mean tick period " << cs.mean_period * 1e3 << " ms, max lateness "
              << cs.max_jitter * 1e3 << " ms, overruns " << cs.overruns << "\n"
              << "reference writes " << sim.reference_writes() << "\n"
              << "record " << path << "\n";
  } catch (const std::exception& e) {
    std::cerr << "sim: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
