#pragma once

// Loop plumbing shared by the networked services and the in-process
// co-simulation: step delay lines, the 10 Hz loop clock, the controller-side
// tick (ingress delay -> controller -> egress delay) and the simulator-side
// tick. CoSimulation wires the two together through the wire codecs without
// sockets, which makes accelerated runs deterministic.

#include "mgchil/bridge.hpp"
#include "mgchil/control.hpp"
#include "mgchil/plant.hpp"
#include "mgchil/protocol.hpp"
#include "mgchil/record.hpp"

#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <thread>
#include <vector>

namespace mgchil {

// Output at push k is the payload pushed at k - depth; empty while filling.
template <typename T>
class DelayLine {
 public:
  explicit DelayLine(int depth = 0) : depth_(depth) {
    if (depth < 0) throw std::invalid_argument("delay depth must be >= 0");
  }

  std::optional<T> push(T payload) {
    if (depth_ == 0) return payload;
    fifo_.push_back(std::move(payload));
    if (static_cast<int>(fifo_.size()) <= depth_) return std::nullopt;
    T out = std::move(fifo_.front());
    fifo_.pop_front();
    return out;
  }

  int depth() const { return depth_; }
  std::size_t pending() const { return fifo_.size(); }
  void clear() { fifo_.clear(); }

 private:
  int depth_ = 0;
  std::deque<T> fifo_;
};

template <typename T>
std::optional<T> inject_delay(DelayLine<T>& line, T payload) {
  return line.push(std::move(payload));
}

enum class ClockMode { kRealtime, kAccelerated };

struct ClockStats {
  long ticks = 0;
  double mean_period = 0.0;  // s, from first to last wake-up
  double max_jitter = 0.0;   // s, latest wake-up relative to its deadline
  long overruns = 0;         // woke a full period or more past the deadline
};

// Fixed-rate scheduler on absolute deadlines, so lateness never accumulates.
// A late tick still runs (nothing is skipped); it is counted as an overrun.
class LoopClock {
 public:
  using SteadyClock = std::chrono::steady_clock;

  explicit LoopClock(double sample_time = 0.1, ClockMode mode = ClockMode::kRealtime)
      : ts_(sample_time), mode_(mode) {
    if (!(sample_time > 0.0)) throw std::invalid_argument("sample time must be positive");
  }

  void start(SteadyClock::time_point at = SteadyClock::now()) {
    start_ = at;
    ticks_ = 0;
    stats_ = {};
  }

  // Blocks until tick `tick_count()` is due. Returns false on overrun.
  bool wait_next() {
    bool on_time = true;
    if (mode_ == ClockMode::kRealtime) {
      const auto deadline = start_ + std::chrono::duration_cast<SteadyClock::duration>(
                                         std::chrono::duration<double>(ts_ * ticks_));
      std::this_thread::sleep_until(deadline);
      const auto now = SteadyClock::now();
      const double late = std::chrono::duration<double>(now - deadline).count();
      stats_.max_jitter = std::max(stats_.max_jitter, late);
      if (late >= ts_) {
        ++stats_.overruns;
        on_time = false;
      }
      if (ticks_ == 0) first_ = now;
      else stats_.mean_period = std::chrono::duration<double>(now - first_).count() / ticks_;
    }
    ++ticks_;
    stats_.ticks = ticks_;
    return on_time;
  }

  long tick_count() const { return ticks_; }
  double sample_time() const { return ts_; }
  ClockMode mode() const { return mode_; }
  const ClockStats& stats() const { return stats_; }

 private:
  double ts_;
  ClockMode mode_;
  SteadyClock::time_point start_ = SteadyClock::now();
  SteadyClock::time_point first_;
  long ticks_ = 0;
  ClockStats stats_;
};

// What the controller service gathers each tick from the PMU stream (PCC
// flows) and the Modbus poll (SoC, PV).
struct MeasurementSnapshot {
  double t = 0.0;  // plant time of the PMU frame
  double p_pcc = 0.0, q_pcc = 0.0;
  double soc = 50.0, p_pv = 0.0;
  bool operator==(const MeasurementSnapshot&) const = default;
};

// Controller side of one tick. A tick without a fresh snapshot pushes an
// empty slot so the delay lines keep their tick alignment.
class ControllerLoop {
 public:
  explicit ControllerLoop(ControllerConfig cfg)
      : ctl_(cfg), ingress_(cfg.delay_in), egress_(cfg.delay_out),
        age_(std::numeric_limits<int>::max() / 2) {}

  struct Output {
    TickReport report;
    std::optional<InverterCommand> to_inverter;  // egress output this tick
    std::optional<MeasurementSnapshot> used;     // measurement behind the report
    int age_ticks = 0;
  };

  Output tick(std::optional<MeasurementSnapshot> fresh) {
    Output out;
    auto delayed = ingress_.push(std::move(fresh));
    if (delayed && *delayed) {
      last_ = **delayed;
      age_ = 0;
    } else if (age_ < std::numeric_limits<int>::max() / 2) {
      ++age_;
    }
    Measurements m;
    if (last_) m = {last_->p_pcc, last_->q_pcc, last_->soc, last_->p_pv, age_};
    else m.age_ticks = age_;
    out.report = ctl_.tick(m);
    out.used = last_;
    out.age_ticks = age_;
    if (auto c = egress_.push(out.report.command)) out.to_inverter = *c;
    return out;
  }

  Controller& controller() { return ctl_; }
  const Controller& controller() const { return ctl_; }

 private:
  Controller ctl_;
  DelayLine<std::optional<MeasurementSnapshot>> ingress_;
  DelayLine<InverterCommand> egress_;
  std::optional<MeasurementSnapshot> last_;
  int age_;
};

inline constexpr std::uint32_t kDefaultEpoch = 1700000000;

// Frame timestamp of plant tick k, in integer microseconds.
inline FrameTime tick_frame_time(std::uint32_t epoch, long tick, double sample_time) {
  const auto step_us = static_cast<std::int64_t>(std::llround(sample_time * 1e6));
  const std::int64_t us = static_cast<std::int64_t>(tick) * step_us;
  return {epoch + static_cast<std::uint32_t>(us / 1000000),
          static_cast<std::uint32_t>(us % 1000000)};
}

// Simulator side of one tick: publishes the register image and PMU frames
// for the current state, then advances the plant with the inverter reference
// currently held in the register bank.
class SimulatorCore {
 public:
  SimulatorCore(Plant plant, PmuConfig pmu = {}, std::uint32_t epoch = kDefaultEpoch)
      : plant_(std::move(plant)), pmu_(pmu), epoch_(epoch),
        bank_(plant_.config().inverter.p_max, plant_.config().inverter.q_max) {}

  RegisterBank& bank() { return bank_; }
  const RegisterBank& bank() const { return bank_; }
  const Plant& plant() const { return plant_; }
  std::uint32_t epoch() const { return epoch_; }

  void publish() {
    const PlantState& s = plant_.state();
    bank_.publish(s.battery.soc, s.p_pv, s.faults);
  }

  std::vector<Bytes> frames() const {
    const PlantState& s = plant_.state();
    const FrameTime ft = tick_frame_time(epoch_, plant_.tick(), plant_.sample_time());
    std::vector<Bytes> out;
    out.reserve(kPmuCount);
    for (int id = 1; id <= kPmuCount; ++id)
      out.push_back(encode_data_frame(sample_pmu(s, id, pmu_), static_cast<std::uint16_t>(id), ft));
    return out;
  }

  // Row for the current state, plant columns only.
  RunRow row() const {
    const PlantState& s = plant_.state();
    RunRow r;
    r.tick = plant_.tick();
    r.t = s.t;
    r.p_dem = s.p_dem;
    r.q_dem = s.q_dem;
    r.p_pcc = s.p_pcc;
    r.q_pcc = s.q_pcc;
    r.soc = s.battery.soc;
    r.p_pv = s.p_pv;
    r.p_inv = s.p_inv_applied;
    r.q_inv = s.q_inv_applied;
    r.event_kw = plant_.demand().event_load(s.t);
    r.faults = s.faults;
    return r;
  }

  void advance() {
    const RegisterMap regs = bank_.view();
    plant_.step(regs.p_ref, regs.q_ref);
  }

 private:
  Plant plant_;
  PmuConfig pmu_;
  std::uint32_t epoch_;
  RegisterBank bank_;
};

inline void annotate_row(RunRow& r, const ControllerLoop::Output& o) {
  const TickReport& rep = o.report;
  r.cmd_p = rep.command.p;
  r.cmd_q = rep.command.q;
  r.mode = std::string(to_string(rep.mode));
  r.flags = rep.flags;
  r.p_dem_bar = rep.p_dem_bar;
  r.p_dem_hat = rep.p_dem_hat;
  r.p_ref_manual = rep.p_ref_manual;
  if (rep.tracking) {
    r.p_ref = rep.p_ref;
    r.q_ref = rep.q_ref;
    r.p_soc_bar = rep.p_soc_bar;
    r.err_p = rep.err_p;
    r.err_q = rep.err_q;
  }
  if (o.used) r.meas_t = o.used->t;
}

struct CoSimSetup {
  PlantConfig plant;
  DemandProfile demand;
  std::vector<std::array<double, 2>> pv_profile;
  double soc_init = 50.0;
  ControllerConfig controller;
  PmuConfig pmu;
  std::uint32_t epoch = kDefaultEpoch;
};

struct TransportStats {
  long frames = 0;
  long frame_errors = 0;
  long modbus_requests = 0;
  long modbus_exceptions = 0;
};

// Accelerated, single-threaded closed loop. Every message still goes through
// its encoder and decoder: six PMU frames, one Modbus read and (when the
// egress line delivers) one Modbus write per tick.
class CoSimulation {
 public:
  explicit CoSimulation(const CoSimSetup& setup)
      : sim_(Plant(setup.plant, setup.demand, setup.pv_profile, setup.soc_init), setup.pmu,
             setup.epoch),
        loop_(setup.controller) {}

  Controller& controller() { return loop_.controller(); }
  const Plant& plant() const { return sim_.plant(); }
  const TransportStats& transport() const { return stats_; }
  const ControllerLoop::Output& last() const { return last_; }

  // Operator bridge, in-process: same parser and reply as the socket server.
  std::string bridge(const std::string& line) { return handle_bridge_line(controller(), line); }

  RunRow step() {
    sim_.publish();

    // Synchrophasor stream.
    for (const Bytes& f : sim_.frames()) assembler_.feed(f);
    std::optional<DataFrame> pcc;
    while (auto raw = assembler_.next()) {
      try {
        DataFrame f = decode_data_frame(*raw);
        ++stats_.frames;
        if (f.idcode == static_cast<std::uint16_t>(PmuBus::kPcc)) pcc = f;
      } catch (const ProtocolError&) {
        ++stats_.frame_errors;
      }
    }

    // Modbus poll of SoC and PV.
    std::optional<MeasurementSnapshot> snap;
    const ModbusResponse rd = transact(build_read_holding_request(next_header(), kRegSoc, 2));
    if (pcc && !rd.exception && rd.registers.size() == 2) {
      snap = MeasurementSnapshot{frame_time_since(pcc->time, sim_.epoch()), pcc->sample.p_kw,
                                 pcc->sample.q_kvar, rd.registers[0] / 100.0,
                                 rd.registers[1] / 10.0};
    }

    last_ = loop_.tick(snap);
    if (last_.to_inverter) {
      const std::array<std::uint16_t, 2> regs{scale_signed(last_.to_inverter->p, 10.0),
                                              scale_signed(last_.to_inverter->q, 10.0)};
      transact(build_write_multiple_request(next_header(), kRegPRef, regs));
    }

    RunRow row = sim_.row();
    annotate_row(row, last_);
    sim_.advance();
    return row;
  }

 private:
  ModbusHeader next_header() { return {txn_++, 1}; }

  ModbusResponse transact(const Bytes& req) {
    ++stats_.modbus_requests;
    ModbusResponse r = parse_response(sim_.bank().handle(req));
    if (r.exception) ++stats_.modbus_exceptions;
    return r;
  }

  SimulatorCore sim_;
  ControllerLoop loop_;
  FrameAssembler assembler_;
  ControllerLoop::Output last_;
  TransportStats stats_;
  std::uint16_t txn_ = 0;
};

}  // namespace mgchil
