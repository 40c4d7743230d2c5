#pragma once

// YAML readers shared by controller config files and scenario files.
// Errors carry the source name and 1-based line of the offending node.

#include "mgchil/control.hpp"
#include "mgchil/lti.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>

namespace mgchil {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class YamlReader {
 public:
  explicit YamlReader(std::string source) : source_(std::move(source)) {}

  YAML::Node load(const std::string& text) const {
    YAML::Node root;
    try {
      root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
      throw ConfigError(source_ + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    if (!root || root.IsNull()) throw ConfigError(source_ + ": file is empty");
    if (!root.IsMap()) fail(root, "<root>", "expected a mapping");
    return root;
  }

  [[noreturn]] void fail(const YAML::Node& at, const std::string& field, const std::string& msg) const {
    const int line = at.Mark().line;
    throw ConfigError(source_ + (line >= 0 ? ":" + std::to_string(line + 1) : std::string()) +
                      ": " + field + ": " + msg);
  }

  void check_keys(const YAML::Node& map, std::initializer_list<std::string_view> allowed,
                  const std::string& ctx) const {
    if (!map.IsMap()) fail(map, ctx.empty() ? "<root>" : ctx, "expected a mapping");
    for (const auto& kv : map) {
      const auto key = kv.first.as<std::string>();
      bool ok = false;
      for (auto a : allowed) ok = ok || key == a;
      if (!ok) fail(kv.first, join(ctx, key), "unknown key");
    }
  }

  static std::string join(const std::string& ctx, const std::string& key) {
    return ctx.empty() ? key : ctx + "." + key;
  }

  template <typename T>
  T get(const YAML::Node& n, const std::string& field) const {
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      fail(n, field, "wrong type");
    }
  }

  double number(const YAML::Node& map, const char* key, const std::string& ctx, double fallback) const {
    const YAML::Node n = map[key];
    if (!n) return fallback;
    const double v = get<double>(n, join(ctx, key));
    if (!std::isfinite(v)) fail(n, join(ctx, key), "must be finite");
    return v;
  }

  double positive(const YAML::Node& map, const char* key, const std::string& ctx, double fallback) const {
    const double v = number(map, key, ctx, fallback);
    if (!(v > 0.0)) fail(map[key] ? map[key] : map, join(ctx, key), "must be positive");
    return v;
  }

  double non_negative(const YAML::Node& map, const char* key, const std::string& ctx,
                      double fallback) const {
    const double v = number(map, key, ctx, fallback);
    if (v < 0.0) fail(map[key], join(ctx, key), "must be >= 0");
    return v;
  }

  int count(const YAML::Node& map, const char* key, const std::string& ctx, int fallback) const {
    const YAML::Node n = map[key];
    if (!n) return fallback;
    const int v = get<int>(n, join(ctx, key));
    if (v < 0) fail(n, join(ctx, key), "must be >= 0");
    return v;
  }

  const std::string& source() const { return source_; }

 private:
  std::string source_;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path + ": cannot open");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Loop tuning that both controller configs and scenarios may override.
struct ControllerSettings {
  double kp_p = 0.8, ki_p = 2.0, kd_p = 0.0;
  double kp_q = 0.8, ki_q = 2.0, kd_q = 0.0;
  SocPolicy soc;
  bool decoupling = true;
  // "identify" (step-test the simulator), "plant" (exact plant model) or a
  // model file path.
  std::string model = "identify";
  int stale_hold_ticks = 3;
  int stale_failsafe_ticks = 50;

  bool operator==(const ControllerSettings& o) const {
    return kp_p == o.kp_p && ki_p == o.ki_p && kd_p == o.kd_p && kp_q == o.kp_q &&
           ki_q == o.ki_q && kd_q == o.kd_q && soc.dead_low == o.soc.dead_low &&
           soc.dead_high == o.soc.dead_high && soc.abs_low == o.soc.abs_low &&
           soc.abs_high == o.soc.abs_high && soc.k_p == o.soc.k_p && soc.k_i == o.soc.k_i &&
           soc.windup_limit == o.soc.windup_limit && decoupling == o.decoupling &&
           model == o.model && stale_hold_ticks == o.stale_hold_ticks &&
           stale_failsafe_ticks == o.stale_failsafe_ticks;
  }
};

inline ControllerSettings parse_controller_settings(const YamlReader& r, const YAML::Node& map,
                                                    const std::string& ctx,
                                                    std::initializer_list<std::string_view> extra = {}) {
  std::vector<std::string_view> allowed{"gains", "soc", "decoupling", "model", "stale_hold_ticks",
                                        "stale_failsafe_ticks"};
  allowed.insert(allowed.end(), extra.begin(), extra.end());
  if (!map.IsMap()) r.fail(map, ctx, "expected a mapping");
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      r.fail(kv.first, YamlReader::join(ctx, key), "unknown key");
  }

  ControllerSettings s;
  if (const YAML::Node g = map["gains"]) {
    const std::string gctx = YamlReader::join(ctx, "gains");
    r.check_keys(g, {"p", "q"}, gctx);
    auto loop = [&](const char* name, double& kp, double& ki, double& kd) {
      const YAML::Node n = g[name];
      if (!n) return;
      const std::string lctx = YamlReader::join(gctx, name);
      r.check_keys(n, {"kp", "ki", "kd"}, lctx);
      kp = r.non_negative(n, "kp", lctx, kp);
      ki = r.non_negative(n, "ki", lctx, ki);
      kd = r.non_negative(n, "kd", lctx, kd);
    };
    loop("p", s.kp_p, s.ki_p, s.kd_p);
    loop("q", s.kp_q, s.ki_q, s.kd_q);
  }
  if (const YAML::Node n = map["soc"]) {
    const std::string sctx = YamlReader::join(ctx, "soc");
    r.check_keys(n, {"dead_zone", "absolute", "kp", "ki", "windup"}, sctx);
    auto pair = [&](const char* key, double& lo, double& hi) {
      const YAML::Node p = n[key];
      if (!p) return;
      if (!p.IsSequence() || p.size() != 2) r.fail(p, YamlReader::join(sctx, key), "expected [low, high]");
      lo = r.get<double>(p[0], YamlReader::join(sctx, key));
      hi = r.get<double>(p[1], YamlReader::join(sctx, key));
    };
    pair("dead_zone", s.soc.dead_low, s.soc.dead_high);
    pair("absolute", s.soc.abs_low, s.soc.abs_high);
    s.soc.k_p = r.non_negative(n, "kp", sctx, s.soc.k_p);
    s.soc.k_i = r.non_negative(n, "ki", sctx, s.soc.k_i);
    s.soc.windup_limit = r.positive(n, "windup", sctx, s.soc.windup_limit);
    try {
      s.soc.validate();
    } catch (const std::invalid_argument& e) {
      r.fail(n, sctx, e.what());
    }
  }
  if (const YAML::Node n = map["decoupling"]) s.decoupling = r.get<bool>(n, YamlReader::join(ctx, "decoupling"));
  if (const YAML::Node n = map["model"]) s.model = r.get<std::string>(n, YamlReader::join(ctx, "model"));
  s.stale_hold_ticks = r.count(map, "stale_hold_ticks", ctx, s.stale_hold_ticks);
  s.stale_failsafe_ticks = r.count(map, "stale_failsafe_ticks", ctx, s.stale_failsafe_ticks);
  if (s.stale_failsafe_ticks < s.stale_hold_ticks)
    r.fail(map, YamlReader::join(ctx, "stale_failsafe_ticks"), "must be >= stale_hold_ticks");
  return s;
}

inline void emit_controller_settings(YAML::Emitter& out, const ControllerSettings& s) {
  out << YAML::BeginMap;
  out << YAML::Key << "gains" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "p" << YAML::Value << YAML::Flow << YAML::BeginMap << YAML::Key << "kp"
      << YAML::Value << s.kp_p << YAML::Key << "ki" << YAML::Value << s.ki_p << YAML::Key << "kd"
      << YAML::Value << s.kd_p << YAML::EndMap;
  out << YAML::Key << "q" << YAML::Value << YAML::Flow << YAML::BeginMap << YAML::Key << "kp"
      << YAML::Value << s.kp_q << YAML::Key << "ki" << YAML::Value << s.ki_q << YAML::Key << "kd"
      << YAML::Value << s.kd_q << YAML::EndMap;
  out << YAML::EndMap;
  out << YAML::Key << "soc" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "dead_zone" << YAML::Value << YAML::Flow << YAML::BeginSeq << s.soc.dead_low
      << s.soc.dead_high << YAML::EndSeq;
  out << YAML::Key << "absolute" << YAML::Value << YAML::Flow << YAML::BeginSeq << s.soc.abs_low
      << s.soc.abs_high << YAML::EndSeq;
  out << YAML::Key << "kp" << YAML::Value << s.soc.k_p;
  out << YAML::Key << "ki" << YAML::Value << s.soc.k_i;
  out << YAML::Key << "windup" << YAML::Value << s.soc.windup_limit;
  out << YAML::EndMap;
  out << YAML::Key << "decoupling" << YAML::Value << s.decoupling;
  out << YAML::Key << "model" << YAML::Value << s.model;
  out << YAML::Key << "stale_hold_ticks" << YAML::Value << s.stale_hold_ticks;
  out << YAML::Key << "stale_failsafe_ticks" << YAML::Value << s.stale_failsafe_ticks;
  out << YAML::EndMap;
}

// Builds a ControllerConfig from settings plus run-level parameters. The
// model must already be resolved.
inline ControllerConfig make_controller_config(const ControllerSettings& s, double sample_time,
                                               const InverterModel& inverter, double rate_limit,
                                               int delay_in, int delay_out, LtiModel model) {
  ControllerConfig c;
  c.gains_p.k_p = s.kp_p;
  c.gains_p.k_i = s.ki_p;
  c.gains_p.k_d = s.kd_p;
  c.gains_q.k_p = s.kp_q;
  c.gains_q.k_i = s.ki_q;
  c.gains_q.k_d = s.kd_q;
  c.gains_p.sample_time = c.gains_q.sample_time = sample_time;
  c.soc = s.soc;
  c.soc.sample_time = sample_time;
  c.soc.x_i = 0.0;
  c.rate_limit = rate_limit;
  c.inverter = inverter;
  c.model = std::move(model);
  c.decoupling = s.decoupling;
  c.delay_in = delay_in;
  c.delay_out = delay_out;
  c.stale_hold_ticks = s.stale_hold_ticks;
  c.stale_failsafe_ticks = s.stale_failsafe_ticks;
  c.validate();
  return c;
}

// Standalone controller config file for `ctl run`:
//
//   time_step: 0.1
//   rate_limit: 0.5
//   inverter: {p_max: 250, q_max: 250, ramp: 80}
//   initial_mode: off
//   manual_ref: [0, 0]
//   model: default        # or a model file written by `scenario identify`
//   gains: {p: {kp: 0.8, ki: 2.0, kd: 0}, q: {kp: 0.8, ki: 2.0, kd: 0}}
//   soc: {dead_zone: [30, 80], absolute: [20, 90], kp: 5, ki: 0.5, windup: 50}
struct ControllerFile {
  ControllerSettings settings;
  double time_step = 0.1;
  double rate_limit = 0.5;
  InverterModel inverter;
  Mode initial_mode = Mode::kOff;
  double manual_p = 0.0, manual_q = 0.0;
};

inline InverterModel parse_inverter(const YamlReader& r, const YAML::Node& n, const std::string& ctx) {
  InverterModel inv;
  r.check_keys(n, {"p_max", "q_max", "ramp"}, ctx);
  inv.p_max = r.positive(n, "p_max", ctx, inv.p_max);
  inv.q_max = r.positive(n, "q_max", ctx, inv.q_max);
  inv.ramp_limit = r.positive(n, "ramp", ctx, inv.ramp_limit);
  return inv;
}

inline ControllerFile parse_controller_file(const std::string& text, const std::string& source) {
  YamlReader r(source);
  const YAML::Node root = r.load(text);
  ControllerFile f;
  f.settings = parse_controller_settings(
      r, root, "", {"time_step", "rate_limit", "inverter", "initial_mode", "manual_ref"});
  if (!root["model"]) f.settings.model = "default";
  if (f.settings.model == "identify" || f.settings.model == "plant")
    r.fail(root["model"], "model", "a standalone controller needs 'default' or a model file path");
  f.time_step = r.positive(root, "time_step", "", f.time_step);
  f.rate_limit = r.positive(root, "rate_limit", "", f.rate_limit);
  if (const YAML::Node n = root["inverter"]) f.inverter = parse_inverter(r, n, "inverter");
  if (const YAML::Node n = root["initial_mode"]) {
    const auto m = parse_mode(r.get<std::string>(n, "initial_mode"));
    if (!m) r.fail(n, "initial_mode", "expected off, adaptive or manual");
    f.initial_mode = *m;
  }
  if (const YAML::Node n = root["manual_ref"]) {
    if (!n.IsSequence() || n.size() != 2) r.fail(n, "manual_ref", "expected [P, Q]");
    f.manual_p = r.get<double>(n[0], "manual_ref");
    f.manual_q = r.get<double>(n[1], "manual_ref");
  }
  return f;
}

inline ControllerFile load_controller_file(const std::string& path) {
  return parse_controller_file(read_text_file(path), path);
}

inline ControllerConfig controller_config_from_file(const ControllerFile& f, int delay_in,
                                                    int delay_out, const std::string& base_dir = ".") {
  LtiModel model = default_plant_model(f.time_step);
  if (f.settings.model != "default") {
    std::string path = f.settings.model;
    if (!path.empty() && path[0] != '/') path = base_dir + "/" + path;
    model = load_model(path);
    if (std::abs(model.sample_time - f.time_step) > 1e-12)
      throw ConfigError("model sample time does not match time_step");
  }
  ControllerConfig c = make_controller_config(f.settings, f.time_step, f.inverter, f.rate_limit,
                                              delay_in, delay_out, std::move(model));
  c.initial_mode = f.initial_mode;
  c.manual_p = f.manual_p;
  c.manual_q = f.manual_q;
  return c;
}

}  // namespace mgchil
