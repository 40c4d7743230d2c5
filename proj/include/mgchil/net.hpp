#pragma once

// TCP services: the simulator endpoint (synchrophasor stream + Modbus server)
// and the controller endpoint (their clients + the operator bridge).
//
// Threading: each service owns one io thread that runs every socket; the
// tick loop runs on the caller's thread and talks to the io thread only
// through posted handlers and a mutex-guarded mailbox.

#include "mgchil/bridge.hpp"
#include "mgchil/protocol.hpp"
#include "mgchil/runtime.hpp"

#include <boost/asio.hpp>

#include <array>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>

namespace mgchil {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;

struct ServiceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One connection. Outgoing messages queue up to max_queue; beyond that the
// oldest unsent message is dropped. All members are io-thread only.
class Session : public std::enable_shared_from_this<Session> {
 public:
  using DataFn = std::function<void(const std::shared_ptr<Session>&, std::string_view)>;
  using CloseFn = std::function<void(const std::shared_ptr<Session>&)>;

  Session(tcp::socket socket, std::size_t max_queue)
      : socket_(std::move(socket)), max_queue_(max_queue) {}

  void start(DataFn on_data, CloseFn on_close) {
    on_data_ = std::move(on_data);
    on_close_ = std::move(on_close);
    boost::system::error_code ec;
    socket_.set_option(tcp::no_delay(true), ec);
    do_read();
  }

  void send(std::shared_ptr<const std::string> msg) {
    if (closed_) return;
    queue_.push_back(std::move(msg));
    while (queue_.size() > max_queue_) {
      // Never drop the message that is mid-write.
      queue_.erase(queue_.begin() + (writing_ ? 1 : 0));
      ++dropped_;
    }
    if (!writing_) do_write();
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    boost::system::error_code ec;
    socket_.shutdown(tcp::socket::shutdown_both, ec);
    socket_.close(ec);
    if (on_close_) on_close_(shared_from_this());
  }

  bool closed() const { return closed_; }
  std::size_t dropped() const { return dropped_; }

 private:
  void do_read() {
    auto self = shared_from_this();
    socket_.async_read_some(asio::buffer(rbuf_), [self](boost::system::error_code ec, std::size_t n) {
      if (ec) return self->close();
      if (self->on_data_) self->on_data_(self, std::string_view(self->rbuf_.data(), n));
      if (!self->closed_) self->do_read();
    });
  }

  void do_write() {
    if (queue_.empty() || closed_) {
      writing_ = false;
      return;
    }
    writing_ = true;
    auto self = shared_from_this();
    auto msg = queue_.front();
    asio::async_write(socket_, asio::buffer(*msg), [self, msg](boost::system::error_code ec, std::size_t) {
      if (ec) return self->close();
      self->queue_.pop_front();
      self->do_write();
    });
  }

  tcp::socket socket_;
  std::size_t max_queue_;
  std::array<char, 4096> rbuf_{};
  std::deque<std::shared_ptr<const std::string>> queue_;
  bool writing_ = false;
  bool closed_ = false;
  std::size_t dropped_ = 0;
  DataFn on_data_;
  CloseFn on_close_;
};

inline tcp::acceptor bind_acceptor(asio::io_context& io, const std::string& host,
                                   std::uint16_t port) {
  try {
    tcp::endpoint ep(asio::ip::make_address(host), port);
    tcp::acceptor acc(io);
    acc.open(ep.protocol());
    acc.set_option(tcp::acceptor::reuse_address(true));
    acc.bind(ep);
    acc.listen();
    return acc;
  } catch (const boost::system::system_error& e) {
    throw ServiceError("cannot listen on " + host + ":" + std::to_string(port) + ": " + e.what());
  }
}

// Accept loop; `on_accept` runs on the io thread.
inline void accept_loop(tcp::acceptor& acc, std::function<void(tcp::socket)> on_accept) {
  acc.async_accept([&acc, on_accept](boost::system::error_code ec, tcp::socket s) {
    if (ec == asio::error::operation_aborted || !acc.is_open()) return;
    if (!ec) on_accept(std::move(s));
    accept_loop(acc, on_accept);
  });
}

class IoThread {
 public:
  IoThread() : guard_(asio::make_work_guard(io_)) {}
  ~IoThread() { stop(); }

  asio::io_context& io() { return io_; }
  void run() {
    thread_ = std::thread([this] { io_.run(); });
  }
  void stop() {
    guard_.reset();
    io_.stop();
    if (thread_.joinable()) thread_.join();
  }
  // Runs `f` on the io thread and waits for it; runs inline when stopped.
  template <typename F>
  void call(F&& f) {
    if (!thread_.joinable() || io_.stopped()) return f();
    std::promise<void> done;
    asio::post(io_, [&] {
      f();
      done.set_value();
    });
    done.get_future().wait();
  }
  template <typename F>
  void post(F&& f) {
    asio::post(io_, std::forward<F>(f));
  }

 private:
  asio::io_context io_;
  asio::executor_work_guard<asio::io_context::executor_type> guard_;
  std::thread thread_;
};

// --- simulator ------------------------------------------------------------

struct SimulatorOptions {
  std::string bind = "127.0.0.1";
  std::uint16_t pmu_port = 4712;
  std::uint16_t modbus_port = 1502;
  std::size_t max_queue = 64;  // frames-per-tick bundles per PMU client
};

class SimulatorService {
 public:
  SimulatorService(SimulatorCore core, SimulatorOptions opt)
      : core_(std::move(core)), opt_(std::move(opt)),
        pmu_acc_(io_.io()), modbus_acc_(io_.io()) {}
  ~SimulatorService() { stop(); }

  void start() {
    pmu_acc_ = bind_acceptor(io_.io(), opt_.bind, opt_.pmu_port);
    modbus_acc_ = bind_acceptor(io_.io(), opt_.bind, opt_.modbus_port);
    accept_loop(pmu_acc_, [this](tcp::socket s) { add_pmu_client(std::move(s)); });
    accept_loop(modbus_acc_, [this](tcp::socket s) { add_modbus_client(std::move(s)); });
    io_.run();
  }

  void stop() {
    io_.call([this] {
      boost::system::error_code ec;
      pmu_acc_.close(ec);
      modbus_acc_.close(ec);
      auto pmu = pmu_clients_;
      for (auto& [p, c] : pmu) c.session->close();
      auto mb = modbus_clients_;
      for (auto& [p, s] : mb) s->close();
    });
    io_.stop();
  }

  std::uint16_t pmu_port() const { return pmu_acc_.local_endpoint().port(); }
  std::uint16_t modbus_port() const { return modbus_acc_.local_endpoint().port(); }

  // One plant tick. `annotate` may fill controller columns of the row.
  RunRow tick(const std::function<void(RunRow&)>& annotate = {}) {
    std::lock_guard lock(mu_);
    core_.publish();
    auto bundle = std::make_shared<std::string>();
    for (const Bytes& f : core_.frames()) bundle->append(f.begin(), f.end());
    io_.post([this, bundle] {
      for (auto& [p, c] : pmu_clients_)
        if (c.streaming) c.session->send(bundle);
    });
    RunRow row = core_.row();
    if (annotate) annotate(row);
    core_.advance();
    return row;
  }

  PlantState plant_state() const {
    std::lock_guard lock(mu_);
    return core_.plant().state();
  }
  std::uint64_t reference_writes() const {
    std::lock_guard lock(mu_);
    return core_.bank().write_count();
  }

 private:
  struct PmuClient {
    std::shared_ptr<Session> session;
    FrameAssembler assembler;
    bool streaming = true;
  };

  void add_pmu_client(tcp::socket s) {
    auto session = std::make_shared<Session>(std::move(s), opt_.max_queue);
    pmu_clients_[session.get()].session = session;
    session->start(
        [this](const std::shared_ptr<Session>& self, std::string_view data) {
          auto& c = pmu_clients_[self.get()];
          c.assembler.feed(ByteView(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
          while (auto raw = c.assembler.next()) {
            try {
              const CommandFrame cmd = decode_command_frame(*raw);
              c.streaming = cmd.command == PmuCommand::kStartStreaming;
            } catch (const ProtocolError&) {
            }
          }
        },
        [this](const std::shared_ptr<Session>& self) { pmu_clients_.erase(self.get()); });
  }

  void add_modbus_client(tcp::socket s) {
    auto session = std::make_shared<Session>(std::move(s), opt_.max_queue);
    modbus_clients_[session.get()] = session;
    auto buf = std::make_shared<Bytes>();
    session->start(
        [this, buf](const std::shared_ptr<Session>& self, std::string_view data) {
          buf->insert(buf->end(), data.begin(), data.end());
          while (auto len = modbus_frame_length(*buf)) {
            if (*len > 260) return self->close();
            if (buf->size() < *len) break;
            const Bytes adu(buf->begin(), buf->begin() + static_cast<std::ptrdiff_t>(*len));
            buf->erase(buf->begin(), buf->begin() + static_cast<std::ptrdiff_t>(*len));
            Bytes resp;
            try {
              std::lock_guard lock(mu_);
              resp = core_.bank().handle(adu);
            } catch (const ProtocolError&) {
              return self->close();
            }
            self->send(std::make_shared<const std::string>(resp.begin(), resp.end()));
          }
        },
        [this](const std::shared_ptr<Session>& self) { modbus_clients_.erase(self.get()); });
  }

  mutable std::mutex mu_;  // guards core_
  SimulatorCore core_;
  SimulatorOptions opt_;
  IoThread io_;
  tcp::acceptor pmu_acc_;
  tcp::acceptor modbus_acc_;
  std::map<Session*, PmuClient> pmu_clients_;
  std::map<Session*, std::shared_ptr<Session>> modbus_clients_;
};

// --- controller -----------------------------------------------------------

struct ControllerOptions {
  std::string sim_host = "127.0.0.1";
  std::uint16_t pmu_port = 4712;
  std::uint16_t modbus_port = 1502;
  std::string bridge_bind = "127.0.0.1";
  std::uint16_t bridge_port = 4713;
  std::size_t max_queue = 256;
  std::chrono::milliseconds backoff_min{100};
  std::chrono::milliseconds backoff_max{2000};
  std::uint32_t epoch = 0;  // subtracted from frame timestamps
};

// Reconnecting client connection; io-thread only.
class ClientLink {
 public:
  using ConnectFn = std::function<void(const std::shared_ptr<Session>&)>;

  ClientLink(asio::io_context& io, tcp::endpoint ep, std::size_t max_queue,
             std::chrono::milliseconds backoff_min, std::chrono::milliseconds backoff_max)
      : io_(io), ep_(ep), timer_(io), max_queue_(max_queue), min_(backoff_min), max_(backoff_max),
        backoff_(backoff_min) {}

  void start(Session::DataFn on_data, ConnectFn on_connect) {
    on_data_ = std::move(on_data);
    on_connect_ = std::move(on_connect);
    connect();
  }
  void stop() {
    stopped_ = true;
    timer_.cancel();
    if (session_) session_->close();
  }

  const std::shared_ptr<Session>& session() const { return session_; }
  long reconnects() const { return attempts_; }

 private:
  void connect() {
    if (stopped_) return;
    ++attempts_;
    auto sock = std::make_shared<tcp::socket>(io_);
    sock->async_connect(ep_, [this, sock](boost::system::error_code ec) {
      if (stopped_) return;
      if (ec) return retry();
      backoff_ = min_;
      session_ = std::make_shared<Session>(std::move(*sock), max_queue_);
      session_->start(on_data_, [this](const std::shared_ptr<Session>&) {
        session_.reset();
        retry();
      });
      if (on_connect_) on_connect_(session_);
    });
  }

  void retry() {
    if (stopped_) return;
    timer_.expires_after(backoff_);
    backoff_ = std::min(backoff_ * 2, max_);
    timer_.async_wait([this](boost::system::error_code ec) {
      if (!ec) connect();
    });
  }

  asio::io_context& io_;
  tcp::endpoint ep_;
  asio::steady_timer timer_;
  std::size_t max_queue_;
  std::chrono::milliseconds min_, max_, backoff_;
  Session::DataFn on_data_;
  ConnectFn on_connect_;
  std::shared_ptr<Session> session_;
  bool stopped_ = false;
  long attempts_ = 0;
};

class ControllerService {
 public:
  ControllerService(ControllerConfig cfg, ControllerOptions opt)
      : loop_(std::move(cfg)), opt_(std::move(opt)), bridge_acc_(io_.io()) {}
  ~ControllerService() { stop(); }

  void start() {
    bridge_acc_ = bind_acceptor(io_.io(), opt_.bridge_bind, opt_.bridge_port);
    accept_loop(bridge_acc_, [this](tcp::socket s) { add_bridge_client(std::move(s)); });

    tcp::resolver resolver(io_.io());
    const auto addr = resolver.resolve(opt_.sim_host, "")->endpoint().address();
    pmu_ = std::make_unique<ClientLink>(io_.io(), tcp::endpoint(addr, opt_.pmu_port),
                                        opt_.max_queue, opt_.backoff_min, opt_.backoff_max);
    modbus_ = std::make_unique<ClientLink>(io_.io(), tcp::endpoint(addr, opt_.modbus_port),
                                           opt_.max_queue, opt_.backoff_min, opt_.backoff_max);
    pmu_->start([this](const std::shared_ptr<Session>&, std::string_view d) { on_pmu_data(d); },
                [this](const std::shared_ptr<Session>& s) {
                  pmu_assembler_ = FrameAssembler();
                  const Bytes cmd = encode_command_frame({1, {}, PmuCommand::kStartStreaming});
                  s->send(std::make_shared<const std::string>(cmd.begin(), cmd.end()));
                });
    modbus_->start([this](const std::shared_ptr<Session>&, std::string_view d) { on_modbus_data(d); },
                   [this](const std::shared_ptr<Session>& s) {
                     modbus_buf_.clear();
                     // Prime SoC/PV so the first tick after connecting has them.
                     const Bytes poll = build_read_holding_request({0xFFFF, 1}, kRegSoc, 2);
                     s->send(std::make_shared<const std::string>(poll.begin(), poll.end()));
                   });
    io_.run();
  }

  void stop() {
    io_.call([this] {
      boost::system::error_code ec;
      bridge_acc_.close(ec);
      if (pmu_) pmu_->stop();
      if (modbus_) modbus_->stop();
      auto clients = bridge_clients_;
      for (auto& [p, s] : clients) s->close();
    });
    io_.stop();
    pmu_.reset();
    modbus_.reset();
  }

  std::uint16_t bridge_port() const { return bridge_acc_.local_endpoint().port(); }

  // Lock-step mode: waits for a PCC frame newer than the last one consumed.
  bool wait_for_frame(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, timeout, [this] { return pcc_seq_ != consumed_seq_; });
  }

  bool linked() const {
    std::lock_guard lock(mu_);
    return pmu_up_ && modbus_up_;
  }

  ControllerLoop::Output tick() {
    // Operator commands first, in arrival order.
    std::deque<std::pair<std::weak_ptr<Session>, std::string>> cmds;
    std::optional<MeasurementSnapshot> fresh;
    {
      std::lock_guard lock(mu_);
      cmds.swap(bridge_inbox_);
      if (pcc_seq_ != consumed_seq_ && have_regs_) {
        fresh = MeasurementSnapshot{pcc_.t, pcc_.p_pcc, pcc_.q_pcc, soc_, pv_};
      }
      consumed_seq_ = pcc_seq_;
    }
    for (auto& [who, line] : cmds) {
      auto reply = std::make_shared<const std::string>(handle_bridge_line(loop_.controller(), line) + "\n");
      io_.post([who = who, reply] {
        if (auto s = who.lock()) s->send(reply);
      });
    }

    ControllerLoop::Output out = loop_.tick(fresh);
    ++ticks_;

    const Bytes poll = build_read_holding_request({txn_++, 1}, kRegSoc, 2);
    std::optional<Bytes> write;
    if (out.to_inverter) {
      const std::array<std::uint16_t, 2> regs{scale_signed(out.to_inverter->p, 10.0),
                                              scale_signed(out.to_inverter->q, 10.0)};
      write = build_write_multiple_request({txn_++, 1}, kRegPRef, regs);
    }

    Telemetry tm;
    tm.tick = ticks_ - 1;
    tm.report = out.report;
    if (out.used) {
      tm.t = out.used->t;
      tm.p_pcc = out.used->p_pcc;
      tm.q_pcc = out.used->q_pcc;
      tm.soc = out.used->soc;
      tm.p_pv = out.used->p_pv;
    }
    auto line = std::make_shared<const std::string>(telemetry_line(tm) + "\n");

    io_.post([this, poll, write, line] {
      if (auto& s = modbus_->session()) {
        if (write) s->send(std::make_shared<const std::string>(write->begin(), write->end()));
        s->send(std::make_shared<const std::string>(poll.begin(), poll.end()));
      }
      for (auto& [p, s] : bridge_clients_) s->send(line);
    });
    {
      std::lock_guard lock(mu_);
      latest_ = out;
    }
    return out;
  }

  std::optional<ControllerLoop::Output> latest() const {
    std::lock_guard lock(mu_);
    return latest_;
  }
  long frame_errors() const {
    std::lock_guard lock(mu_);
    return frame_errors_;
  }

 private:
  struct PccSample {
    double t = 0.0, p_pcc = 0.0, q_pcc = 0.0;
  };

  void on_pmu_data(std::string_view d) {
    pmu_assembler_.feed(ByteView(reinterpret_cast<const std::uint8_t*>(d.data()), d.size()));
    while (auto raw = pmu_assembler_.next()) {
      try {
        const DataFrame f = decode_data_frame(*raw);
        if (f.idcode != static_cast<std::uint16_t>(PmuBus::kPcc)) continue;
        {
          std::lock_guard lock(mu_);
          pcc_ = {frame_time_since(f.time, opt_.epoch), f.sample.p_kw, f.sample.q_kvar};
          ++pcc_seq_;
          pmu_up_ = true;
        }
        cv_.notify_all();
      } catch (const ProtocolError&) {
        std::lock_guard lock(mu_);
        ++frame_errors_;
      }
    }
  }

  void on_modbus_data(std::string_view d) {
    modbus_buf_.insert(modbus_buf_.end(), d.begin(), d.end());
    while (auto len = modbus_frame_length(modbus_buf_)) {
      if (modbus_buf_.size() < *len) break;
      const Bytes adu(modbus_buf_.begin(), modbus_buf_.begin() + static_cast<std::ptrdiff_t>(*len));
      modbus_buf_.erase(modbus_buf_.begin(), modbus_buf_.begin() + static_cast<std::ptrdiff_t>(*len));
      try {
        const ModbusResponse r = parse_response(adu);
        std::lock_guard lock(mu_);
        modbus_up_ = true;
        if (r.function == kFcReadHolding && !r.exception && r.registers.size() == 2) {
          soc_ = r.registers[0] / 100.0;
          pv_ = r.registers[1] / 10.0;
          have_regs_ = true;
        }
      } catch (const ProtocolError&) {
        modbus_buf_.clear();
      }
    }
  }

  void add_bridge_client(tcp::socket s) {
    auto session = std::make_shared<Session>(std::move(s), opt_.max_queue);
    bridge_clients_[session.get()] = session;
    auto partial = std::make_shared<std::string>();
    session->start(
        [this, partial](const std::shared_ptr<Session>& self, std::string_view data) {
          partial->append(data);
          std::size_t nl;
          while ((nl = partial->find('\n')) != std::string::npos) {
            std::string line = partial->substr(0, nl);
            partial->erase(0, nl + 1);
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            std::lock_guard lock(mu_);
            bridge_inbox_.emplace_back(self, std::move(line));
          }
          if (partial->size() > 4096) self->close();
        },
        [this](const std::shared_ptr<Session>& self) { bridge_clients_.erase(self.get()); });
  }

  ControllerLoop loop_;
  ControllerOptions opt_;
  IoThread io_;
  tcp::acceptor bridge_acc_;
  std::unique_ptr<ClientLink> pmu_, modbus_;
  FrameAssembler pmu_assembler_;
  Bytes modbus_buf_;
  std::map<Session*, std::shared_ptr<Session>> bridge_clients_;
  std::uint16_t txn_ = 0;
  long ticks_ = 0;

  mutable std::mutex mu_;  // guards everything below
  std::condition_variable cv_;
  PccSample pcc_;
  std::uint64_t pcc_seq_ = 0, consumed_seq_ = 0;
  double soc_ = 50.0, pv_ = 0.0;
  bool have_regs_ = false;
  bool pmu_up_ = false, modbus_up_ = false;
  long frame_errors_ = 0;
  std::deque<std::pair<std::weak_ptr<Session>, std::string>> bridge_inbox_;
  std::optional<ControllerLoop::Output> latest_;
};

}  // namespace mgchil
