#pragma once

#include <boost/asio/dispatch.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/asio/strand.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pieeg/service.hpp"

namespace pieeg::server {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using service::json;

struct ServerConfig {
  std::string bind{"127.0.0.1"};  // loopback unless configured otherwise
  unsigned short port{8080};      // 0 picks a free port
  int threads{2};
  int send_buffer_bytes{0};  // 0 keeps the system default
};

// PIEEG_BIND, PIEEG_PORT and PIEEG_DATA_DIR override the defaults.
inline void apply_env(ServerConfig& cfg, service::ServiceConfig& svc) {
  if (const char* b = std::getenv("PIEEG_BIND")) cfg.bind = b;
  if (const char* p = std::getenv("PIEEG_PORT")) {
    try {
      int v = std::stoi(p);
      if (v < 0 || v > 65535) throw std::out_of_range("port");
      cfg.port = static_cast<unsigned short>(v);
    } catch (const std::exception&) {
      throw DomainError(std::string("PIEEG_PORT is not a port: ") + p);
    }
  }
  if (const char* d = std::getenv("PIEEG_DATA_DIR")) svc.data_dir = d;
}

struct Reply {
  http::status status{http::status::ok};
  std::string body;
  std::string content_type{"application/json"};
};

// Maps one REST request onto the service.
inline Reply route(service::Service& svc, http::verb method, std::string target, const std::string& body) {
  if (auto q = target.find('?'); q != std::string::npos) target.resize(q);
  while (target.size() > 1 && target.back() == '/') target.pop_back();
  auto ok = [](const json& doc) { return Reply{http::status::ok, doc.dump(), "application/json"}; };
  auto fail = [](int status, const std::string& reason, const std::string& msg) {
    return Reply{static_cast<http::status>(status),
                 json{{"error", reason}, {"message", msg}, {"status", status}}.dump(), "application/json"};
  };
  auto parse = [&]() -> json {
    if (body.find_first_not_of(" \t\r\n") == std::string::npos) return nullptr;
    try {
      return json::parse(body);
    } catch (const json::exception&) {
      throw service::invalid("invalid_json", "request body is not valid JSON");
    }
  };
  auto method_is = [&](http::verb v) {
    if (method != v) throw service::ServiceError(405, "method_not_allowed", "use " + std::string(http::to_string(v)));
  };
  try {
    if (target == "/status") return method_is(http::verb::get), ok(svc.status());
    if (target == "/stream/start") return method_is(http::verb::post), ok(svc.start_stream(parse()));
    if (target == "/stream/stop") return method_is(http::verb::post), ok(svc.stop_stream());
    if (target == "/filters") {
      if (method == http::verb::get) return ok(svc.status()["filters"]);
      return method_is(http::verb::put), ok(svc.set_filters(parse()));
    }
    if (target == "/session/start") return method_is(http::verb::post), ok(svc.start_session(parse()));
    if (target == "/session/stop") return method_is(http::verb::post), ok(svc.stop_session());
    if (target == "/records") return method_is(http::verb::get), ok(svc.list_records());
    const std::string prefix = "/records/";
    if (target.rfind(prefix, 0) == 0) {
      method_is(http::verb::get);
      auto id = target.substr(prefix.size());
      if (id.size() > 5 && id.ends_with("/data")) {
        std::ifstream in(svc.record_file(id.substr(0, id.size() - 5)));
        std::ostringstream text;
        text << in.rdbuf();
        return Reply{http::status::ok, text.str(), "text/csv"};
      }
      return ok(svc.get_record(id));
    }
    return fail(404, "not_found", "no endpoint " + target);
  } catch (const service::ServiceError& e) {
    return fail(e.status(), e.reason(), e.what());
  } catch (const ParseError& e) {
    return fail(422, "invalid_record", e.what());
  } catch (const Error& e) {
    return fail(500, e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail(500, "internal", e.what());
  }
}

// One subscriber: pushes the subscription's messages as text frames, one
// write in flight at a time; a stalled peer leaves messages queued in the
// subscription, which then skips stale batches.
class StreamSession : public std::enable_shared_from_this<StreamSession> {
 public:
  StreamSession(tcp::socket&& socket, service::Service& svc) : ws_(std::move(socket)), svc_(svc) {}

  ~StreamSession() { svc_.unsubscribe(sub_); }

  template <class Body, class Allocator>
  void run(http::request<Body, http::basic_fields<Allocator>> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&StreamSession::on_accept, shared_from_this()));
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    ws_.text(true);
    sub_ = svc_.subscribe();
    std::weak_ptr<StreamSession> weak = shared_from_this();
    auto ex = ws_.get_executor();
    sub_->set_notifier([weak, ex] {
      net::post(ex, [weak] {
        if (auto self = weak.lock()) self->pump();
      });
    });
    pump();
    read();
  }

  void read() {
    ws_.async_read(in_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      self->in_.consume(self->in_.size());  // client messages are ignored
      self->read();
    });
  }

  void pump() {
    if (writing_ || closed_) return;
    auto msg = sub_->try_pop();
    if (!msg) return;
    writing_ = true;
    ws_.async_write(net::buffer(*msg), [self = shared_from_this(), msg](beast::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) return self->close();
      self->pump();
    });
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    svc_.unsubscribe(sub_);
  }

  websocket::stream<beast::tcp_stream> ws_;
  service::Service& svc_;
  std::shared_ptr<service::Subscription> sub_;
  beast::flat_buffer in_;
  bool writing_{false};
  bool closed_{false};
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, service::Service& svc) : stream_(std::move(socket)), svc_(svc) {}

  void run() {
    net::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpSession::read, shared_from_this()));
  }

 private:
  void read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(60));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      beast::error_code ignored;
      stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
      return;
    }
    if (websocket::is_upgrade(req_)) {
      std::string target(req_.target());
      if (target.substr(0, target.find('?')) == "/stream") {
        stream_.expires_never();
        std::make_shared<StreamSession>(stream_.release_socket(), svc_)->run(std::move(req_));
        return;
      }
    }
    auto res = std::make_shared<http::response<http::string_body>>();
    res->version(req_.version());
    res->keep_alive(req_.keep_alive());
    res->set(http::field::server, "pieeg");
    res->set(http::field::access_control_allow_origin, "*");
    if (req_.method() == http::verb::options) {
      res->result(http::status::no_content);
      res->set(http::field::access_control_allow_methods, "GET, POST, PUT, OPTIONS");
      res->set(http::field::access_control_allow_headers, "Content-Type");
    } else {
      auto reply = route(svc_, req_.method(), std::string(req_.target()), req_.body());
      res->result(reply.status);
      res->set(http::field::content_type, reply.content_type);
      res->body() = std::move(reply.body);
    }
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!res->keep_alive()) {
        beast::error_code ignored;
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
        return;
      }
      self->read();
    });
  }

  beast::tcp_stream stream_;
  service::Service& svc_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

// HTTP control surface and WebSocket stream on one port. The service must
// outlive the server.
class Server {
 public:
  Server(service::Service& svc, ServerConfig cfg) : svc_(svc), cfg_(std::move(cfg)), ioc_(std::max(cfg_.threads, 1)) {}

  ~Server() { stop(); }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  void start() {
    beast::error_code ec;
    auto addr = net::ip::make_address(cfg_.bind, ec);
    if (ec) throw DomainError("invalid bind address '" + cfg_.bind + "'");
    tcp::endpoint ep(addr, cfg_.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(ep, ec);
    if (ec) throw BackendError("cannot bind " + cfg_.bind + ":" + std::to_string(cfg_.port) + ": " + ec.message());
    acceptor_.listen(net::socket_base::max_listen_connections);
    port_ = acceptor_.local_endpoint().port();
    accept();
    for (int i = 0; i < std::max(cfg_.threads, 1); ++i) threads_.emplace_back([this] { ioc_.run(); });
  }

  unsigned short port() const { return port_; }
  const std::string& bind_address() const { return cfg_.bind; }

  void stop() {
    ioc_.stop();
    for (auto& t : threads_)
      if (t.joinable()) t.join();
    threads_.clear();
  }

 private:
  void accept() {
    acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (!ec) {
        if (cfg_.send_buffer_bytes > 0) {
          beast::error_code ignored;
          socket.set_option(net::socket_base::send_buffer_size(cfg_.send_buffer_bytes), ignored);
        }
        std::make_shared<HttpSession>(std::move(socket), svc_)->run();
      }
      if (acceptor_.is_open()) accept();
    });
  }

  service::Service& svc_;
  ServerConfig cfg_;
  net::io_context ioc_;
  tcp::acceptor acceptor_{ioc_};
  unsigned short port_{0};
  std::vector<std::thread> threads_;
};

}  // namespace pieeg::server
