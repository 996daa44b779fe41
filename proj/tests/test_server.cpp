#include <gtest/gtest.h>
#include <sys/socket.h>

#include <filesystem>
#include <thread>

#include "httplib.h"
#include "pieeg/server.hpp"

using namespace pieeg;
using namespace std::chrono_literals;
namespace fs = std::filesystem;
namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using service::json;
using tcp = net::ip::tcp;

namespace {

struct Fixture {
  fs::path dir;
  std::unique_ptr<service::Service> svc;
  std::unique_ptr<server::Server> srv;
  std::unique_ptr<httplib::Client> http;

  explicit Fixture(const std::string& tag, std::size_t depth = 4, int send_buffer = 0) {
    dir = fs::temp_directory_path() / ("pieeg_server_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    service::ServiceConfig sc;
    sc.data_dir = dir.string();
    sc.queue_depth = depth;
    svc = std::make_unique<service::Service>(sc);
    server::ServerConfig cfg;
    cfg.port = 0;
    cfg.send_buffer_bytes = send_buffer;
    srv = std::make_unique<server::Server>(*svc, cfg);
    srv->start();
    http = std::make_unique<httplib::Client>("127.0.0.1", srv->port());
    http->set_read_timeout(30, 0);
  }

  ~Fixture() {
    srv->stop();
    srv.reset();
    svc.reset();
    fs::remove_all(dir);
  }

  std::pair<int, json> call(const std::string& method, const std::string& path, const std::string& body = "") {
    httplib::Result r = method == "GET"    ? http->Get(path)
                        : method == "PUT"  ? http->Put(path, body, "application/json")
                        : method == "POST" ? http->Post(path, body, "application/json")
                                           : http->Delete(path);
    if (!r) throw std::runtime_error("http request failed");
    json doc = r->get_header_value("Content-Type") == "application/json" ? json::parse(r->body) : json(r->body);
    return {r->status, doc};
  }
};

struct WsClient {
  net::io_context ioc;
  websocket::stream<tcp::socket> ws{ioc};

  WsClient(unsigned short port, int receive_buffer = 0) {
    auto& s = ws.next_layer();
    s.open(tcp::v4());
    if (receive_buffer > 0) s.set_option(net::socket_base::receive_buffer_size(receive_buffer));
    timeval tv{20, 0};  // a missing message fails the test instead of hanging it
    ::setsockopt(s.native_handle(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    s.connect({net::ip::make_address("127.0.0.1"), port});
    ws.handshake("127.0.0.1", "/stream");
  }

  json next() {
    beast::flat_buffer b;
    ws.read(b);
    return json::parse(beast::buffers_to_string(b.data()));
  }

  // Reads until a samples batch arrives; other messages go to `others`.
  json next_batch(std::vector<json>* others = nullptr) {
    for (;;) {
      auto m = next();
      if (m["type"] == "samples") return m;
      if (others) others->push_back(m);
    }
  }
};

}  // namespace

TEST(Server, ConfigDefaultsToLoopback) {
  server::ServerConfig cfg;
  EXPECT_EQ(cfg.bind, "127.0.0.1");
  service::ServiceConfig sc;
  ::setenv("PIEEG_BIND", "0.0.0.0", 1);
  ::setenv("PIEEG_PORT", "9123", 1);
  ::setenv("PIEEG_DATA_DIR", "/tmp/pieeg-env", 1);
  server::apply_env(cfg, sc);
  EXPECT_EQ(cfg.bind, "0.0.0.0");
  EXPECT_EQ(cfg.port, 9123);
  EXPECT_EQ(sc.data_dir, "/tmp/pieeg-env");
  ::setenv("PIEEG_PORT", "http", 1);
  EXPECT_THROW(server::apply_env(cfg, sc), DomainError);
  ::unsetenv("PIEEG_BIND");
  ::unsetenv("PIEEG_PORT");
  ::unsetenv("PIEEG_DATA_DIR");
}

TEST(Server, RestControlSurface) {
  Fixture f("rest");
  auto [code, doc] = f.call("GET", "/status");
  EXPECT_EQ(code, 200);
  EXPECT_EQ(doc["mode"], "idle");

  std::tie(code, doc) = f.call("POST", "/session/start", R"({"protocol":"alpha"})");
  EXPECT_EQ(code, 409);
  EXPECT_EQ(doc["error"], "not_streaming");

  std::tie(code, doc) = f.call("POST", "/stream/start", "{not json");
  EXPECT_EQ(code, 422);
  EXPECT_EQ(doc["error"], "invalid_json");
  std::tie(code, doc) = f.call("POST", "/stream/start", R"({"sps":251})");
  EXPECT_EQ(code, 422);
  EXPECT_EQ(doc["error"], "invalid_sps");

  std::tie(code, doc) = f.call("POST", "/stream/start", R"({"backend":"simulated","scenario":"alpha_test","sps":250,"gain":24,"speed":20})");
  EXPECT_EQ(code, 200);
  EXPECT_EQ(doc["mode"], "streaming");
  std::tie(code, doc) = f.call("GET", "/status");
  EXPECT_EQ(doc["mode"], "streaming");
  EXPECT_EQ(doc["sps"], 250);
  EXPECT_EQ(doc["stream"]["scenario"], "alpha_test");

  std::tie(code, doc) = f.call("POST", "/stream/start", "{}");
  EXPECT_EQ(code, 409);
  std::tie(code, doc) = f.call("PUT", "/filters", R"({"band":[8,12],"notch":true})");
  EXPECT_EQ(code, 200);
  EXPECT_EQ(doc["filters"]["band"], json({8.0, 12.0}));
  std::tie(code, doc) = f.call("GET", "/status/");
  EXPECT_EQ(doc["filters"]["notch"], true);

  std::tie(code, doc) = f.call("GET", "/stream/start");
  EXPECT_EQ(code, 405);
  std::tie(code, doc) = f.call("GET", "/nowhere");
  EXPECT_EQ(code, 404);
  std::tie(code, doc) = f.call("GET", "/records/nope");
  EXPECT_EQ(code, 404);

  std::tie(code, doc) = f.call("POST", "/stream/stop");
  EXPECT_EQ(code, 200);
  EXPECT_EQ(doc["mode"], "idle");
}

TEST(Server, WebSocketDeliversContiguousBatches) {
  Fixture f("ws");
  WsClient c(f.srv->port());
  auto hello = c.next();
  EXPECT_EQ(hello["type"], "status");
  EXPECT_EQ(hello["mode"], "idle");
  f.call("POST", "/stream/start", R"({"scenario":"alpha_test","speed":20})");
  for (std::uint64_t k = 0; k < 10; ++k) {
    auto b = c.next_batch();
    ASSERT_EQ(b["seq0"].get<std::uint64_t>(), 250 * k);
    ASSERT_EQ(b["frames"], 250);
    ASSERT_EQ(b["channels"].size(), 16u);
    ASSERT_EQ(b["channels"][15].size(), 250u);
  }
  f.call("POST", "/stream/stop");
}

TEST(Server, StalledWebSocketSkipsWithExactAccounting) {
  Fixture f("stall", 2, 4096);
  WsClient fast(f.srv->port());
  WsClient slow(f.srv->port(), 4096);
  f.call("POST", "/stream/start", R"({"scenario":"zero","speed":20})");
  std::vector<json> fast_batches, slow_batches, slow_status, ignored;
  // The slow peer stops reading while the fast one takes 20 batches.
  for (int i = 0; i < 20; ++i) fast_batches.push_back(fast.next_batch(&ignored));
  f.call("POST", "/stream/stop");
  auto drain = [](WsClient& c, std::vector<json>& batches, std::vector<json>* status) {
    for (;;) {
      auto m = c.next();
      if (m["type"] == "samples") batches.push_back(m);
      if (m["type"] == "status") {
        if (status) status->push_back(m);
        if (m["mode"] == "idle" && !m.contains("skipped") && !batches.empty() && batches.back()["final"] == true) return;
      }
    }
  };
  drain(fast, fast_batches, nullptr);
  drain(slow, slow_batches, &slow_status);

  std::uint64_t skipped = 0;
  for (const auto& s : slow_status)
    if (s.contains("skipped")) skipped += s["skipped"].get<std::uint64_t>();
  EXPECT_GE(skipped, 1u);
  EXPECT_EQ(slow_batches.size() + skipped, fast_batches.size());
  for (std::size_t k = 0; k < fast_batches.size(); ++k)
    EXPECT_EQ(fast_batches[k]["seq0"].get<std::uint64_t>(), 250 * k);
}

TEST(Server, SessionRecordsOverRest) {
  Fixture f("session", 64);
  WsClient c(f.srv->port());
  f.call("POST", "/stream/start", R"({"scenario":"alpha_test","speed":20})");
  auto [code, doc] = f.call("POST", "/session/start", R"({"protocol":"alpha","cycles":1})");
  ASSERT_EQ(code, 200);
  EXPECT_EQ(doc["mode"], "session");
  auto id = doc["session"]["id"].get<std::string>();
  std::vector<std::string> cues;
  while (cues.empty() || cues.back() != "done") {
    auto m = c.next();
    if (m["type"] == "cue") cues.push_back(m["label"]);
  }
  EXPECT_EQ(cues, (std::vector<std::string>{"eyes_closed", "eyes_open", "done"}));
  ASSERT_TRUE(f.svc->wait_mode(service::Mode::streaming, 10s));
  f.call("POST", "/stream/stop");

  std::tie(code, doc) = f.call("GET", "/records");
  ASSERT_EQ(doc["records"].size(), 1u);
  EXPECT_EQ(doc["records"][0]["id"], id);
  std::tie(code, doc) = f.call("GET", "/records/" + id);
  EXPECT_EQ(code, 200);
  EXPECT_EQ(doc["frames"], 2500);
  EXPECT_EQ(doc["markers"].size(), 2u);
  EXPECT_EQ(doc["alpha"].size(), 16u);
  std::tie(code, doc) = f.call("GET", "/records/" + id + "/data");
  EXPECT_EQ(code, 200);
  EXPECT_EQ(doc.get<std::string>().rfind("# pieeg-record v1\n", 0), 0u);
}

TEST(Server, DisconnectedSubscriberIsReaped) {
  Fixture f("reap");
  {
    WsClient gone(f.srv->port());
    gone.next();
    EXPECT_EQ(f.svc->subscriber_count(), 1u);
    gone.ws.close(websocket::close_code::normal);
  }
  auto deadline = std::chrono::steady_clock::now() + 5s;
  while (f.svc->subscriber_count() != 0 && std::chrono::steady_clock::now() < deadline)
    std::this_thread::sleep_for(10ms);
  EXPECT_EQ(f.svc->subscriber_count(), 0u);

  WsClient dropped(f.srv->port());
  WsClient stays(f.srv->port());
  f.call("POST", "/stream/start", R"({"scenario":"zero","speed":20})");
  stays.next_batch();
  dropped.ws.next_layer().close();  // abrupt loss
  for (int i = 0; i < 5; ++i) stays.next_batch();
  EXPECT_EQ(f.call("GET", "/status").second["mode"], "streaming");
  deadline = std::chrono::steady_clock::now() + 5s;
  while (f.svc->subscriber_count() != 1 && std::chrono::steady_clock::now() < deadline)
    std::this_thread::sleep_for(10ms);
  EXPECT_EQ(f.svc->subscriber_count(), 1u);
}
