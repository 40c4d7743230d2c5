#pragma once

// Scenario files (YAML) and the batch driver. A run launches the simulator
// and controller sides, issues the mode schedule through the operator bridge
// command parser, and streams a run record to disk.

#include "mgchil/bridge.hpp"
#include "mgchil/config.hpp"
#include "mgchil/net.hpp"
#include "mgchil/record.hpp"
#include "mgchil/runtime.hpp"
#include "mgchil/sysid.hpp"

#include <filesystem>
#include <iostream>
#include <thread>

namespace mgchil {

struct ScheduleEntry {
  double t = 0.0;
  Mode mode = Mode::kOff;
  std::optional<double> p_ref, q_ref;
  double ramp = 0.0;  // kW/s toward p_ref/q_ref; 0 = step

  bool operator==(const ScheduleEntry&) const = default;
};

struct Scenario {
  std::string name = "scenario";
  double duration = 0.0;   // s
  double time_step = 0.1;  // s
  DemandProfile demand;
  std::vector<std::array<double, 2>> pv_profile;
  double soc_init = 50.0;
  double battery_capacity_kwh = 1000.0;
  double p_max = 250.0, q_max = 250.0, ramp = 80.0;
  int delay_in = 1, delay_out = 1;
  double rate_limit = 0.5;
  std::vector<ScheduleEntry> schedule;
  ControllerSettings controller;

  long ticks() const { return std::lround(duration / time_step); }
  InverterModel inverter() const {
    InverterModel inv;
    inv.p_max = p_max;
    inv.q_max = q_max;
    inv.ramp_limit = ramp;
    return inv;
  }
  bool operator==(const Scenario&) const = default;
};

inline Scenario parse_scenario(const std::string& text, const std::string& source = "<scenario>") {
  YamlReader r(source);
  const YAML::Node root = r.load(text);
  r.check_keys(root, {"name", "duration", "time_step", "demand", "pv_profile", "battery", "inverter",
                      "delays", "rate_limit", "events", "schedule", "controller"},
               "");
  Scenario s;
  if (const YAML::Node n = root["name"]) s.name = r.get<std::string>(n, "name");
  if (!root["duration"]) r.fail(root, "duration", "required");
  s.duration = r.non_negative(root, "duration", "", 0.0);
  s.time_step = r.positive(root, "time_step", "", s.time_step);
  s.rate_limit = r.positive(root, "rate_limit", "", s.rate_limit);

  if (const YAML::Node d = root["demand"]) {
    r.check_keys(d, {"base", "sine_amplitude", "sine_period", "noise_std", "noise_seed", "reactive_ratio"},
                 "demand");
    s.demand.base = r.number(d, "base", "demand", s.demand.base);
    s.demand.sine_amplitude = r.number(d, "sine_amplitude", "demand", s.demand.sine_amplitude);
    s.demand.sine_period = r.positive(d, "sine_period", "demand", s.demand.sine_period);
    s.demand.noise_std = r.non_negative(d, "noise_std", "demand", s.demand.noise_std);
    if (const YAML::Node n = d["noise_seed"]) s.demand.noise_seed = r.get<std::uint64_t>(n, "demand.noise_seed");
    s.demand.reactive_ratio = r.number(d, "reactive_ratio", "demand", s.demand.reactive_ratio);
  }

  if (const YAML::Node pv = root["pv_profile"]) {
    if (!pv.IsSequence()) r.fail(pv, "pv_profile", "expected a list of [t, kW] points");
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const YAML::Node pt = pv[i];
      if (!pt.IsSequence() || pt.size() != 2) r.fail(pt, "pv_profile", "expected [t, kW]");
      const double t = r.get<double>(pt[0], "pv_profile");
      const double kw = r.get<double>(pt[1], "pv_profile");
      if (kw < 0.0) r.fail(pt, "pv_profile", "PV power must be >= 0");
      if (!s.pv_profile.empty() && !(t > s.pv_profile.back()[0]))
        r.fail(pt, "pv_profile", "times must be strictly increasing");
      s.pv_profile.push_back({t, kw});
    }
  }

  if (const YAML::Node b = root["battery"]) {
    r.check_keys(b, {"soc_init", "capacity_kwh"}, "battery");
    s.soc_init = r.number(b, "soc_init", "battery", s.soc_init);
    if (s.soc_init < 0.0 || s.soc_init > 100.0) r.fail(b["soc_init"], "battery.soc_init", "must be in [0, 100]");
    s.battery_capacity_kwh = r.positive(b, "capacity_kwh", "battery", s.battery_capacity_kwh);
  }

  if (const YAML::Node n = root["inverter"]) {
    const InverterModel inv = parse_inverter(r, n, "inverter");
    s.p_max = inv.p_max;
    s.q_max = inv.q_max;
    s.ramp = inv.ramp_limit;
  }

  if (const YAML::Node d = root["delays"]) {
    r.check_keys(d, {"in", "out"}, "delays");
    s.delay_in = r.count(d, "in", "delays", s.delay_in);
    s.delay_out = r.count(d, "out", "delays", s.delay_out);
  }

  if (const YAML::Node ev = root["events"]) {
    if (!ev.IsSequence()) r.fail(ev, "events", "expected a list");
    for (std::size_t i = 0; i < ev.size(); ++i) {
      const YAML::Node e = ev[i];
      const std::string ctx = "events[" + std::to_string(i) + "]";
      r.check_keys(e, {"t_on", "t_off", "kw", "spike_kw", "spike_s"}, ctx);
      if (!e["t_on"] || !e["kw"]) r.fail(e, ctx, "t_on and kw are required");
      LoadEvent le;
      le.t_on = r.non_negative(e, "t_on", ctx, 0.0);
      le.t_off = r.number(e, "t_off", ctx, std::numeric_limits<double>::infinity());
      le.magnitude = r.number(e, "kw", ctx, 0.0);
      le.transient_spike = r.number(e, "spike_kw", ctx, 0.0);
      le.spike_duration = r.non_negative(e, "spike_s", ctx, 0.0);
      if (!(le.t_off > le.t_on)) r.fail(e, ctx + ".t_off", "must be after t_on");
      s.demand.events.push_back(le);
    }
  }

  if (const YAML::Node sch = root["schedule"]) {
    if (!sch.IsSequence()) r.fail(sch, "schedule", "expected a list");
    for (std::size_t i = 0; i < sch.size(); ++i) {
      const YAML::Node e = sch[i];
      const std::string ctx = "schedule[" + std::to_string(i) + "]";
      r.check_keys(e, {"t", "mode", "p_ref", "q_ref", "ramp"}, ctx);
      if (!e["t"] || !e["mode"]) r.fail(e, ctx, "t and mode are required");
      ScheduleEntry se;
      se.t = r.non_negative(e, "t", ctx, 0.0);
      const auto m = parse_mode(r.get<std::string>(e["mode"], ctx + ".mode"));
      if (!m) r.fail(e["mode"], ctx + ".mode", "expected off, adaptive or manual");
      se.mode = *m;
      if (e["p_ref"]) se.p_ref = r.number(e, "p_ref", ctx, 0.0);
      if (e["q_ref"]) se.q_ref = r.number(e, "q_ref", ctx, 0.0);
      se.ramp = r.non_negative(e, "ramp", ctx, 0.0);
      if (se.p_ref && std::abs(*se.p_ref) > s.p_max) r.fail(e["p_ref"], ctx + ".p_ref", "outside inverter rating");
      if (se.q_ref && std::abs(*se.q_ref) > s.q_max) r.fail(e["q_ref"], ctx + ".q_ref", "outside inverter rating");
      if (!s.schedule.empty() && !(se.t > s.schedule.back().t))
        r.fail(e["t"], ctx + ".t", "schedule times must be strictly increasing");
      if (se.t > s.duration) r.fail(e["t"], ctx + ".t", "beyond scenario duration");
      s.schedule.push_back(se);
    }
  }

  if (const YAML::Node c = root["controller"]) s.controller = parse_controller_settings(r, c, "controller");
  return s;
}

inline Scenario load_scenario(const std::string& path) {
  return parse_scenario(read_text_file(path), path);
}

inline std::string serialize_scenario(const Scenario& s) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << s.name;
  out << YAML::Key << "duration" << YAML::Value << s.duration;
  out << YAML::Key << "time_step" << YAML::Value << s.time_step;
  out << YAML::Key << "demand" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "base" << YAML::Value << s.demand.base;
  out << YAML::Key << "sine_amplitude" << YAML::Value << s.demand.sine_amplitude;
  out << YAML::Key << "sine_period" << YAML::Value << s.demand.sine_period;
  out << YAML::Key << "noise_std" << YAML::Value << s.demand.noise_std;
  out << YAML::Key << "noise_seed" << YAML::Value << s.demand.noise_seed;
  out << YAML::Key << "reactive_ratio" << YAML::Value << s.demand.reactive_ratio;
  out << YAML::EndMap;
  out << YAML::Key << "pv_profile" << YAML::Value << YAML::BeginSeq;
  for (const auto& p : s.pv_profile) out << YAML::Flow << YAML::BeginSeq << p[0] << p[1] << YAML::EndSeq;
  out << YAML::EndSeq;
  out << YAML::Key << "battery" << YAML::Value << YAML::Flow << YAML::BeginMap << YAML::Key
      << "soc_init" << YAML::Value << s.soc_init << YAML::Key << "capacity_kwh" << YAML::Value
      << s.battery_capacity_kwh << YAML::EndMap;
  out << YAML::Key << "inverter" << YAML::Value << YAML::Flow << YAML::BeginMap << YAML::Key
      << "p_max" << YAML::Value << s.p_max << YAML::Key << "q_max" << YAML::Value << s.q_max
      << YAML::Key << "ramp" << YAML::Value << s.ramp << YAML::EndMap;
  out << YAML::Key << "delays" << YAML::Value << YAML::Flow << YAML::BeginMap << YAML::Key << "in"
      << YAML::Value << s.delay_in << YAML::Key << "out" << YAML::Value << s.delay_out << YAML::EndMap;
  out << YAML::Key << "rate_limit" << YAML::Value << s.rate_limit;
  out << YAML::Key << "events" << YAML::Value << YAML::BeginSeq;
  for (const auto& e : s.demand.events) {
    out << YAML::Flow << YAML::BeginMap << YAML::Key << "t_on" << YAML::Value << e.t_on;
    if (std::isfinite(e.t_off)) out << YAML::Key << "t_off" << YAML::Value << e.t_off;
    out << YAML::Key << "kw" << YAML::Value << e.magnitude << YAML::Key << "spike_kw"
        << YAML::Value << e.transient_spike << YAML::Key << "spike_s" << YAML::Value
        << e.spike_duration << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::Key << "schedule" << YAML::Value << YAML::BeginSeq;
  for (const auto& e : s.schedule) {
    out << YAML::Flow << YAML::BeginMap << YAML::Key << "t" << YAML::Value << e.t << YAML::Key
        << "mode" << YAML::Value << std::string(to_string(e.mode));
    if (e.p_ref) out << YAML::Key << "p_ref" << YAML::Value << *e.p_ref;
    if (e.q_ref) out << YAML::Key << "q_ref" << YAML::Value << *e.q_ref;
    if (e.ramp != 0.0) out << YAML::Key << "ramp" << YAML::Value << e.ramp;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::Key << "controller" << YAML::Value;
  emit_controller_settings(out, s.controller);
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// Turns the mode schedule into operator bridge command lines, tick by tick,
// exactly as a person at the console would type them.
class ScheduleDriver {
 public:
  ScheduleDriver(std::vector<ScheduleEntry> schedule, double sample_time)
      : schedule_(std::move(schedule)), ts_(sample_time) {}

  std::vector<std::string> commands(long tick) {
    std::vector<std::string> out;
    const double t = static_cast<double>(tick) * ts_;
    while (next_ < schedule_.size() && schedule_[next_].t <= t + 1e-9) {
      const ScheduleEntry& e = schedule_[next_++];
      target_p_ = e.p_ref.value_or(target_p_);
      target_q_ = e.q_ref.value_or(target_q_);
      ramp_ = e.ramp;
      if (e.ramp == 0.0 && (e.p_ref || e.q_ref)) {
        cur_p_ = target_p_;
        cur_q_ = target_q_;
        out.push_back(format_bridge_command(RefCommand{cur_p_, cur_q_}));
      }
      out.push_back(format_bridge_command(ModeCommand{e.mode}));
    }
    if (ramp_ > 0.0 && (cur_p_ != target_p_ || cur_q_ != target_q_)) {
      const double step = ramp_ * ts_;
      auto move = [step](double cur, double target) {
        return std::abs(target - cur) <= step ? target : cur + (target > cur ? step : -step);
      };
      cur_p_ = move(cur_p_, target_p_);
      cur_q_ = move(cur_q_, target_q_);
      out.push_back(format_bridge_command(RefCommand{cur_p_, cur_q_}));
    }
    return out;
  }

 private:
  std::vector<ScheduleEntry> schedule_;
  double ts_;
  std::size_t next_ = 0;
  double cur_p_ = 0.0, cur_q_ = 0.0;
  double target_p_ = 0.0, target_q_ = 0.0;
  double ramp_ = 0.0;
};

inline PlantConfig plant_config(const Scenario& s) {
  PlantConfig cfg;
  cfg.model = default_plant_model(s.time_step);
  cfg.inverter = s.inverter();
  cfg.battery_capacity_kwh = s.battery_capacity_kwh;
  return cfg;
}

inline Plant make_plant(const Scenario& s) {
  return Plant(plant_config(s), s.demand, s.pv_profile, s.soc_init);
}

// Offline step test against a quiet copy of the simulator (constant demand,
// no PV). The step is kept within one tick of ramp so the inverter follows it.
inline EraResult identify_scenario_plant(const Scenario& s, std::size_t n_samples = 120) {
  DemandProfile quiet;
  quiet.base = s.demand.base;
  quiet.reactive_ratio = s.demand.reactive_ratio;
  const Plant plant(plant_config(s), quiet, {}, 50.0);
  const double amplitude = std::min(10.0, s.ramp * s.time_step);
  return identify_plant(plant, amplitude, n_samples);
}

inline LtiModel resolve_controller_model(const Scenario& s, const std::string& base_dir = ".") {
  const std::string& m = s.controller.model;
  if (m == "identify") return identify_scenario_plant(s).model;
  if (m == "plant" || m == "default") return default_plant_model(s.time_step);
  std::filesystem::path p(m);
  if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
  return load_model(p.string());
}

inline CoSimSetup make_setup(const Scenario& s, const std::string& base_dir = ".") {
  CoSimSetup setup;
  setup.plant = plant_config(s);
  setup.demand = s.demand;
  setup.pv_profile = s.pv_profile;
  setup.soc_init = s.soc_init;
  setup.controller = make_controller_config(s.controller, s.time_step, s.inverter(), s.rate_limit,
                                            s.delay_in, s.delay_out,
                                            resolve_controller_model(s, base_dir));
  return setup;
}

inline RunMeta run_meta(const Scenario& s, bool accelerated) {
  RunMeta m;
  auto num = [](double v) { return detail::fmt_double(v); };
  m.values["scenario"] = s.name;
  m.values["Ts"] = num(s.time_step);
  m.values["p_max"] = num(s.p_max);
  m.values["q_max"] = num(s.q_max);
  m.values["ramp"] = num(s.ramp);
  m.values["delay_in"] = std::to_string(s.delay_in);
  m.values["delay_out"] = std::to_string(s.delay_out);
  m.values["clock"] = accelerated ? "accelerated" : "realtime";
  return m;
}

struct RunOptions {
  bool accelerated = true;
  std::string out_dir = ".";
  std::string stem;         // record file stem; defaults to the scenario name
  std::string base_dir = ".";  // for relative model paths
  bool quiet = true;
  // Accelerated runs only: called after each tick with the row just written.
  std::function<void(const RunRow&, CoSimulation&)> observer;
  // Realtime runs only: bind address for the three services (ports are
  // chosen by the OS).
  std::string bind = "127.0.0.1";
};

struct RunResult {
  std::string record_path;
  long rows = 0;
  TransportStats transport;
  ClockStats sim_clock, ctl_clock;
  long bridge_errors = 0;
  std::vector<std::string> bridge_replies;
};

inline std::string record_path_for(const Scenario& s, const RunOptions& opt) {
  std::filesystem::create_directories(opt.out_dir);
  const std::string stem = opt.stem.empty() ? s.name : opt.stem;
  return (std::filesystem::path(opt.out_dir) / (stem + ".csv")).string();
}

inline RunResult run_accelerated(const Scenario& s, const RunOptions& opt) {
  RunResult res;
  res.record_path = record_path_for(s, opt);
  CoSimulation sim(make_setup(s, opt.base_dir));
  RunRecordWriter writer(res.record_path, run_meta(s, true));
  ScheduleDriver driver(s.schedule, s.time_step);
  const long n = s.ticks();
  for (long k = 0; k < n; ++k) {
    for (const std::string& cmd : driver.commands(k)) {
      const std::string reply = sim.bridge(cmd);
      if (reply.find("\"ok\":false") != std::string::npos) ++res.bridge_errors;
      res.bridge_replies.push_back(reply);
    }
    const RunRow row = sim.step();
    writer.write(row);
    ++res.rows;
    if (opt.observer) opt.observer(row, sim);
  }
  writer.flush();
  res.transport = sim.transport();
  return res;
}

// Both services on loopback sockets with real 10 Hz clocks. The schedule is
// sent over a bridge connection; controller columns of the record are the
// newest controller report available when the plant ticks.
inline RunResult run_realtime(const Scenario& s, const RunOptions& opt) {
  RunResult res;
  res.record_path = record_path_for(s, opt);
  const CoSimSetup setup = make_setup(s, opt.base_dir);
  const auto epoch = static_cast<std::uint32_t>(
      std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
          .count());

  SimulatorOptions so;
  so.bind = opt.bind;
  so.pmu_port = so.modbus_port = 0;
  SimulatorService sim(SimulatorCore(make_plant(s), setup.pmu, epoch), so);
  sim.start();

  ControllerOptions co;
  co.sim_host = opt.bind;
  co.pmu_port = sim.pmu_port();
  co.modbus_port = sim.modbus_port();
  co.bridge_bind = opt.bind;
  co.bridge_port = 0;
  co.epoch = epoch;
  ControllerService ctl(setup.controller, co);
  ctl.start();

  asio::io_context io;
  tcp::socket bridge(io);
  bridge.connect(tcp::endpoint(asio::ip::make_address(opt.bind), ctl.bridge_port()));

  RunRecordWriter writer(res.record_path, run_meta(s, false));
  const long n = s.ticks();
  const double ts = s.time_step;
  const auto t0 = std::chrono::steady_clock::now() + std::chrono::milliseconds(300);
  auto at = [t0](double sec) {
    return t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                    std::chrono::duration<double>(sec));
  };

  std::exception_ptr failure;
  std::mutex failure_mu;
  auto guard = [&](auto&& body) {
    try {
      body();
    } catch (...) {
      std::lock_guard lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  };

  LoopClock sim_clock(ts), ctl_clock(ts);
  std::thread sim_thread([&] {
    guard([&] {
      sim_clock.start(at(0.0));
      for (long k = 0; k < n; ++k) {
        sim_clock.wait_next();
        const RunRow row = sim.tick([&ctl](RunRow& r) {
          if (auto o = ctl.latest()) annotate_row(r, *o);
        });
        writer.write(row);
        ++res.rows;
      }
    });
  });
  std::thread ctl_thread([&] {
    guard([&] {
      ctl_clock.start(at(ts / 2));
      for (long k = 0; k < n; ++k) {
        ctl_clock.wait_next();
        ctl.tick();
      }
    });
  });

  ScheduleDriver driver(s.schedule, ts);
  std::string inbox;
  guard([&] {
    for (long k = 0; k < n; ++k) {
      std::this_thread::sleep_until(at(k * ts));
      std::string batch;
      for (const std::string& cmd : driver.commands(k)) batch += cmd + "\n";
      if (!batch.empty()) asio::write(bridge, asio::buffer(batch));
      // Drain telemetry and replies so the server never backs up.
      while (bridge.available() > 0) {
        std::array<char, 8192> buf;
        const std::size_t got = bridge.read_some(asio::buffer(buf));
        inbox.append(buf.data(), got);
      }
      std::size_t nl;
      while ((nl = inbox.find('\n')) != std::string::npos) {
        const std::string line = inbox.substr(0, nl);
        inbox.erase(0, nl + 1);
        if (line.rfind("{\"cmd\"", 0) == 0 || line.find("\"ok\":") != std::string::npos) {
          res.bridge_replies.push_back(line);
          if (line.find("\"ok\":false") != std::string::npos) ++res.bridge_errors;
        }
      }
    }
  });

  sim_thread.join();
  ctl_thread.join();
  writer.flush();
  res.sim_clock = sim_clock.stats();
  res.ctl_clock = ctl_clock.stats();
  boost::system::error_code ec;
  bridge.close(ec);
  ctl.stop();
  sim.stop();
  if (failure) std::rethrow_exception(failure);
  return res;
}

inline RunResult run_scenario(const Scenario& s, const RunOptions& opt = {}) {
  return opt.accelerated ? run_accelerated(s, opt) : run_realtime(s, opt);
}

}  // namespace mgchil
