#pragma once

// Operator bridge line protocol.
//
// Server -> client: one JSON object per line per tick (telemetry), plus one
// JSON reply line per command: {"ok":true,"cmd":"..."} or
// {"ok":false,"error":"..."}.
//
// Client -> server, one command per line:
//   mode off|adaptive|manual
//   ref <P kW> <Q kvar>
//   gains p|q <k_p> <k_i> <k_d>

#include "mgchil/control.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace mgchil {

struct ModeCommand {
  Mode mode;
  bool operator==(const ModeCommand&) const = default;
};
struct RefCommand {
  double p = 0.0, q = 0.0;
  bool operator==(const RefCommand&) const = default;
};
struct GainsCommand {
  Channel channel = Channel::kP;
  double k_p = 0.0, k_i = 0.0, k_d = 0.0;
  bool operator==(const GainsCommand&) const = default;
};

using BridgeCommand = std::variant<ModeCommand, RefCommand, GainsCommand>;

struct BridgeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline double parse_number(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw BridgeError("not a number: '" + s + "'");
  return v;
}
}  // namespace detail

inline BridgeCommand parse_bridge_command(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> w;
  for (std::string tok; is >> tok;) w.push_back(tok);
  if (w.empty()) throw BridgeError("empty command");
  const std::string& verb = w[0];
  if (verb == "mode") {
    if (w.size() != 2) throw BridgeError("usage: mode off|adaptive|manual");
    const auto m = parse_mode(w[1]);
    if (!m) throw BridgeError("unknown mode '" + w[1] + "'");
    return ModeCommand{*m};
  }
  if (verb == "ref") {
    if (w.size() != 3) throw BridgeError("usage: ref <P> <Q>");
    return RefCommand{detail::parse_number(w[1]), detail::parse_number(w[2])};
  }
  if (verb == "gains") {
    if (w.size() != 5 || (w[1] != "p" && w[1] != "q"))
      throw BridgeError("usage: gains p|q <kp> <ki> <kd>");
    return GainsCommand{w[1] == "p" ? Channel::kP : Channel::kQ, detail::parse_number(w[2]),
                        detail::parse_number(w[3]), detail::parse_number(w[4])};
  }
  throw BridgeError("unknown command '" + verb + "'");
}

inline std::string format_bridge_command(const BridgeCommand& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  if (auto* m = std::get_if<ModeCommand>(&c)) os << "mode " << to_string(m->mode);
  else if (auto* r = std::get_if<RefCommand>(&c)) os << "ref " << r->p << ' ' << r->q;
  else if (auto* g = std::get_if<GainsCommand>(&c))
    os << "gains " << (g->channel == Channel::kP ? "p" : "q") << ' ' << g->k_p << ' ' << g->k_i
       << ' ' << g->k_d;
  return os.str();
}

// Applies a command to the controller; references outside the inverter
// rating are refused.
inline void apply_bridge_command(Controller& ctl, const BridgeCommand& c) {
  if (auto* m = std::get_if<ModeCommand>(&c)) {
    ctl.set_mode(m->mode);
  } else if (auto* r = std::get_if<RefCommand>(&c)) {
    const auto& inv = ctl.config().inverter;
    if (std::abs(r->p) > inv.p_max || std::abs(r->q) > inv.q_max)
      throw BridgeError("reference outside inverter rating");
    ctl.set_manual_reference(r->p, r->q);
  } else if (auto* g = std::get_if<GainsCommand>(&c)) {
    try {
      ctl.set_gains(g->channel, g->k_p, g->k_i, g->k_d);
    } catch (const std::invalid_argument& e) {
      throw BridgeError(e.what());
    }
  }
}

// Parses and applies one line; returns the reply line (without newline).
inline std::string handle_bridge_line(Controller& ctl, const std::string& line) {
  nlohmann::json reply;
  try {
    const BridgeCommand c = parse_bridge_command(line);
    apply_bridge_command(ctl, c);
    reply = {{"ok", true}, {"cmd", format_bridge_command(c)}};
  } catch (const BridgeError& e) {
    reply = {{"ok", false}, {"error", e.what()}};
  }
  return reply.dump();
}

struct Telemetry {
  long tick = 0;
  double t = 0.0;
  double p_pcc = 0.0, q_pcc = 0.0;
  double soc = 0.0, p_pv = 0.0;
  TickReport report;
};

inline nlohmann::json telemetry_json(const Telemetry& tm) {
  const TickReport& r = tm.report;
  return {{"tick", tm.tick},
          {"t", tm.t},
          {"p_pcc", tm.p_pcc},
          {"q_pcc", tm.q_pcc},
          {"p_ref", r.p_ref},
          {"q_ref", r.q_ref},
          {"p_ref_manual", r.p_ref_manual},
          {"p_dem_bar", r.p_dem_bar},
          {"p_soc_bar", r.p_soc_bar},
          {"soc", tm.soc},
          {"p_pv", tm.p_pv},
          {"cmd_p", r.command.p},
          {"cmd_q", r.command.q},
          {"mode", std::string(to_string(r.mode))},
          {"flags", r.flags}};
}

inline std::string telemetry_line(const Telemetry& tm) { return telemetry_json(tm).dump(); }

}  // namespace mgchil
