#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <chrono>
#include <deque>
#include <mutex>
#include <set>
#include <thread>

#include "softtouch/errors.hpp"
#include "softtouch/teleop.hpp"

namespace softtouch::teleop {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using Clock = std::chrono::steady_clock;

namespace {

constexpr auto kCyclePeriod = std::chrono::milliseconds(10);

struct Outgoing {
  bool binary = false;
  std::string data;
};

}  // namespace

struct TeleopServer::Impl {
  class Connection;

  Impl(config::TeleopSettings s, tasks::TaskSpec spec, std::uint64_t seed)
      : settings(s), session(std::move(s), std::move(spec), seed), acceptor(ioc), stream_timer(ioc) {}

  config::TeleopSettings settings;
  std::mutex mutex;  // guards session, received, worst_latency
  TeleopSession session;
  std::vector<Clock::time_point> received;  // commands not yet seen by a cycle
  double worst_latency = 0.0;

  asio::io_context ioc;
  tcp::acceptor acceptor;
  asio::steady_timer stream_timer;
  std::set<std::shared_ptr<Connection>> connections;  // I/O thread only
  std::vector<CueFlags> last_cues;                     // I/O thread only
  std::thread io_thread;
  std::thread control_thread;
  std::atomic<bool> running{false};
  std::atomic<std::uint64_t> packets{0};
  int port = 0;

  class Connection : public std::enable_shared_from_this<Connection> {
   public:
    Connection(Impl& owner, tcp::socket socket) : owner_(owner), ws_(std::move(socket)) {}

    void start() {
      ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
      ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
        if (ec) return self->drop();
        self->read();
      });
    }

    void send(Outgoing m) {
      queue_.push_back(std::move(m));
      if (queue_.size() == 1) write();
    }

    void close() {
      beast::error_code ec;
      beast::get_lowest_layer(ws_).socket().close(ec);
    }

    bool greeted = false;

   private:
    void read() {
      ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) return self->drop();
        const std::string text = beast::buffers_to_string(self->buffer_.data());
        self->buffer_.consume(self->buffer_.size());
        self->onMessage(text);
        self->read();
      });
    }

    void onMessage(const std::string& text) {
      Envelope e;
      try {
        e = parseEnvelope(text);
      } catch (const Error& err) {
        send({false, encodeError(0, err.what())});
        return;
      }
      if (e.type == "hello") greeted = true;
      std::string reply;
      if (!greeted) {
        reply = encodeError(e.seq, "session: send hello first");
      } else {
        std::lock_guard<std::mutex> lock(owner_.mutex);
        reply = handleMessage(owner_.session, e);
        if (e.type == "command_pose" || e.type == "set_preset") owner_.received.push_back(Clock::now());
      }
      send({false, std::move(reply)});
    }

    void write() {
      ws_.text(!queue_.front().binary);
      ws_.async_write(asio::buffer(queue_.front().data), [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) return self->drop();
        self->owner_.packets.fetch_add(1);
        self->queue_.pop_front();
        if (!self->queue_.empty()) self->write();
      });
    }

    void drop() { owner_.connections.erase(shared_from_this()); }

    Impl& owner_;
    websocket::stream<beast::tcp_stream> ws_;
    beast::flat_buffer buffer_;
    std::deque<Outgoing> queue_;
  };

  void accept() {
    acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      auto c = std::make_shared<Connection>(*this, std::move(socket));
      connections.insert(c);
      c->start();
      accept();
    });
  }

  void stream() {
    const auto period = std::chrono::duration<double>(1.0 / settings.stream_hz);
    stream_timer.expires_after(std::chrono::duration_cast<Clock::duration>(period));
    stream_timer.async_wait([this](beast::error_code ec) {
      if (ec || !running) return;
      StatePacket p;
      {
        std::lock_guard<std::mutex> lock(mutex);
        p = session.state();
      }
      std::vector<Outgoing> out;
      last_cues.resize(p.arms.size());
      for (std::size_t a = 0; a < p.arms.size(); ++a) {
        const CueFlags& now = p.arms[a].cues;
        const CueFlags& was = last_cues[a];
        const int arm = static_cast<int>(a);
        if (now.force != was.force) out.push_back({false, encodeCue(p.sequence, arm, "force", now.force)});
        if (now.deformation != was.deformation)
          out.push_back({false, encodeCue(p.sequence, arm, "deformation", now.deformation)});
        if (now.workspace != was.workspace)
          out.push_back({false, encodeCue(p.sequence, arm, "workspace", now.workspace)});
        last_cues[a] = now;
      }
      out.push_back({false, encodeState(p)});
      const std::vector<std::uint8_t> frame = encodeFieldFrame(p);
      out.push_back({true, std::string(frame.begin(), frame.end())});
      for (const auto& c : std::vector<std::shared_ptr<Connection>>(connections.begin(), connections.end())) {
        if (!c->greeted) continue;
        for (const Outgoing& m : out) c->send(m);
      }
      stream();
    });
  }

  // Paces the simulation to wall time; a late cycle does not try to catch up
  // beyond one period so a stall does not turn into a burst.
  void control() {
    auto next = Clock::now();
    while (running) {
      next += kCyclePeriod;
      std::this_thread::sleep_until(next);
      std::lock_guard<std::mutex> lock(mutex);
      if (!session.live()) break;
      const std::size_t seen = received.size();
      session.cycle();
      const auto done = Clock::now();
      for (std::size_t i = 0; i < seen; ++i) {
        worst_latency = std::max(worst_latency, std::chrono::duration<double>(done - received[i]).count());
      }
      received.erase(received.begin(), received.begin() + static_cast<std::ptrdiff_t>(seen));
      if (done - next > kCyclePeriod) next = done;
    }
  }
};

TeleopServer::TeleopServer(config::TeleopSettings settings, tasks::TaskSpec spec, std::uint64_t seed)
    : impl_(std::make_unique<Impl>(std::move(settings), std::move(spec), seed)) {}

TeleopServer::~TeleopServer() { stop(); }

int TeleopServer::start() {
  Impl& m = *impl_;
  if (m.running) throw SessionError("teleop server: already started");
  beast::error_code ec;
  const tcp::endpoint ep(asio::ip::make_address("127.0.0.1"), static_cast<unsigned short>(m.settings.port));
  m.acceptor.open(ep.protocol(), ec);
  if (!ec) m.acceptor.set_option(asio::socket_base::reuse_address(true), ec);
  if (!ec) m.acceptor.bind(ep, ec);
  if (!ec) m.acceptor.listen(asio::socket_base::max_listen_connections, ec);
  if (ec) throw SessionError("teleop server: cannot listen on port " + std::to_string(m.settings.port) + ": " + ec.message());
  m.port = m.acceptor.local_endpoint().port();
  m.running = true;
  m.accept();
  m.stream();
  m.io_thread = std::thread([&m] { m.ioc.run(); });
  m.control_thread = std::thread([&m] { m.control(); });
  return m.port;
}

void TeleopServer::stop() {
  Impl& m = *impl_;
  if (!m.running.exchange(false)) return;
  if (m.control_thread.joinable()) m.control_thread.join();
  asio::post(m.ioc, [&m] {
    beast::error_code ec;
    m.acceptor.close(ec);
    m.stream_timer.cancel();
    for (const auto& c : std::vector<std::shared_ptr<Impl::Connection>>(m.connections.begin(), m.connections.end()))
      c->close();
    m.connections.clear();
  });
  if (m.io_thread.joinable()) m.io_thread.join();
  std::lock_guard<std::mutex> lock(m.mutex);
  m.session.close();
}

int TeleopServer::port() const { return impl_->port; }

std::uint64_t TeleopServer::packetsSent() const { return impl_->packets.load(); }

double TeleopServer::worstApplyLatency() const {
  std::lock_guard<std::mutex> lock(impl_->mutex);
  return impl_->worst_latency;
}

}  // namespace softtouch::teleop
