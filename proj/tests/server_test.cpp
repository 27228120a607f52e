// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/server.hpp"

#include "star/io.hpp"

#include <boost/asio.hpp>
#include <boost/beast.hpp>
#include <boost/beast/websocket.hpp>
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

namespace star {
namespace {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using json = nlohmann::json;

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.layers = 1;
  c.heads = 2;
  c.width = 16;
  c.patch = 8;
  c.frames = 2;
  c.image_width = 16;
  c.image_height = 16;
  c.noise_features = 8;
  return c;
}

ChunkResult fake_chunk(int index) {
  ChunkResult r;
  r.index = index;
  r.command = {CommandKind::move_forward, 0.25};
  r.frames.assign(2, Image(4, 4, 3, 0.5f));
  r.poses.assign(2, Pose::identity());
  return r;
}

// Server on a background io thread, stopped on destruction.
class Running {
 public:
  Running(const DenoiserModel& model, ServerOptions o) : server_(model, std::move(o)) {
    thread_ = std::thread([this] { server_.run(); });
  }
  ~Running() {
    server_.stop();
    thread_.join();
  }
  unsigned short port() const { return server_.port(); }
  Server& server() { return server_; }

 private:
  Server server_;
  std::thread thread_;
};

class Client {
 public:
  explicit Client(unsigned short port) : ws_(ioc_) {
    tcp::resolver resolver(ioc_);
    net::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("127.0.0.1", "/");
  }
  void send(const json& j) { ws_.write(net::buffer(j.dump())); }
  json read() {
    beast::flat_buffer b;
    ws_.read(b);
    return json::parse(beast::buffers_to_string(b.data()));
  }
  /// Next message of the given type, skipping others.
  json read_type(const std::string& type) {
    for (;;) {
      json j = read();
      if (j.at("type") == type) return j;
    }
  }
  /// True when the server closed the connection.
  bool closed() {
    beast::flat_buffer b;
    beast::error_code ec;
    ws_.read(b, ec);
    return ec == websocket::error::closed || ec == net::error::eof;
  }

 private:
  net::io_context ioc_;
  websocket::stream<tcp::socket> ws_;
};

http::response<http::string_body> http_get(unsigned short port, const std::string& target) {
  net::io_context ioc;
  tcp::socket s(ioc);
  tcp::resolver resolver(ioc);
  net::connect(s, resolver.resolve("127.0.0.1", std::to_string(port)));
  http::request<http::empty_body> req{http::verb::get, target, 11};
  req.set(http::field::host, "127.0.0.1");
  http::write(s, req);
  beast::flat_buffer b;
  http::response<http::string_body> res;
  http::read(s, b, res);
  return res;
}

json command(CommandKind kind, double magnitude) {
  return {{"type", "command"}, {"kind", to_string(kind)}, {"magnitude", magnitude}};
}

void expect_pose(const json& got, const Pose& want) {
  const Pose p = pose_from_json(got);
  EXPECT_LT((p.translation - want.translation).norm(), 1e-9);
  EXPECT_LT((p.rotation - want.rotation).norm(), 1e-9);
}

class ServerTest : public ::testing::Test {
 protected:
  Denoiser model{small_config(), 5};
};

TEST(Base64, RoundTripAndKnownVector) {
  const std::string foobar = "foobar";
  EXPECT_EQ(base64_encode({reinterpret_cast<const std::uint8_t*>(foobar.data()), foobar.size()}), "Zm9vYmFy");
  for (std::size_t n = 0; n < 12; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<std::uint8_t>(251 * i + 7);
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes) << n;
  }
  EXPECT_THROW(base64_decode("abc"), std::invalid_argument);
}

TEST(EncodePng, SignatureAndHeader) {
  Image im(5, 3, 3, 0.25f);
  const auto png = encode_png(im);
  const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  ASSERT_GT(png.size(), 24u);
  EXPECT_TRUE(std::equal(sig, sig + 8, png.begin()));
  // IHDR width and height, big endian.
  EXPECT_EQ(png[19], 5);
  EXPECT_EQ(png[23], 3);
  EXPECT_THROW(encode_png(Image(2, 2, 1)), std::invalid_argument);
}

TEST(OutboundQueue, DropsFramesNotIndices) {
  OutboundQueue q(2);
  EXPECT_FALSE(q.push_chunk(fake_chunk(0), false));
  q.push({{"type", "metrics"}});
  EXPECT_FALSE(q.push_chunk(fake_chunk(1), false));
  EXPECT_TRUE(q.push_chunk(fake_chunk(2), false));
  EXPECT_EQ(q.dropped(), 1u);
  EXPECT_EQ(q.waiting_chunks(), 3u);
  EXPECT_EQ(q.size(), 4u);

  std::vector<json> out;
  while (!q.empty()) {
    out.push_back(json::parse(q.front()));
    q.pop();
  }
  EXPECT_EQ(out[0]["index"], 0);
  EXPECT_EQ(out[1]["type"], "metrics");
  EXPECT_EQ(out[3]["index"], 2);
  EXPECT_TRUE(out[3]["frames_dropped"].get<bool>());
  EXPECT_TRUE(out[3]["frames"].empty());
  EXPECT_EQ(out[2]["frames"].size(), 2u);
  EXPECT_FALSE(q.push_chunk(fake_chunk(3), false));
}

TEST_F(ServerTest, LoopbackChunksFollowCommandFold) {
  Running srv(model, {});
  Client c(srv.port());
  c.send({{"type", "hello"}, {"scene_seed", 7}});
  const json ready = c.read_type("ready");
  EXPECT_EQ(ready["width"], 16);
  EXPECT_EQ(ready["height"], 16);
  EXPECT_EQ(ready["k"], 2);

  const std::vector<InteractionCommand> cmds = {{CommandKind::move_forward, 0.25},
                                                {CommandKind::yaw_left, 10.0},
                                                {CommandKind::strafe_right, 0.1},
                                                {CommandKind::pitch_up, 5.0},
                                                {CommandKind::move_forward, 0.0}};
  Pose pose = start_pose();
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    c.send(command(cmds[i].kind, cmds[i].magnitude));
    const json chunk = c.read_type("chunk");
    EXPECT_EQ(chunk["index"], static_cast<int>(i));
    EXPECT_EQ(chunk["encoding"], "f32");
    EXPECT_EQ(chunk["command"]["kind"], to_string(cmds[i].kind));
    ASSERT_EQ(chunk["frames"].size(), 2u);
    EXPECT_EQ(base64_decode(chunk["frames"][0].get<std::string>()).size(), 16u * 16u * 3u * sizeof(float));
    pose = accumulate(pose, command_to_delta(cmds[i]));
    expect_pose(chunk["pose"], pose);
    const json metrics = c.read_type("metrics");
    EXPECT_GE(metrics["fps"].get<double>(), 0.0);
    EXPECT_GE(metrics["latency_ms"].get<double>(), 0.0);
  }
  c.send({{"type", "bye"}});
  EXPECT_TRUE(c.closed());
}

TEST_F(ServerTest, BurstCoalescesLatestWins) {
  Running srv(model, {});
  Client c(srv.port());
  c.send({{"type", "hello"}, {"scene_seed", 1}});
  c.read_type("ready");
  const int n = 8;
  for (int i = 0; i < n; ++i) c.send(command(CommandKind::move_forward, 0.01 * (i + 1)));
  int chunks = 0;
  double last_magnitude = 0.0;
  for (;;) {
    const json j = c.read();
    if (j["type"] == "chunk") {
      EXPECT_EQ(j["index"], chunks);
      last_magnitude = j["command"]["magnitude"].get<double>();
      ++chunks;
    }
    if (j["type"] == "metrics" && chunks + j["coalesced"].get<int>() == n) break;
  }
  EXPECT_GE(chunks, 1);
  // The newest command is never the one replaced.
  EXPECT_DOUBLE_EQ(last_magnitude, 0.01 * n);
}

TEST_F(ServerTest, ConcurrentClientsAreIndependent) {
  Running srv(model, {});
  auto roam = [&](CommandKind kind, std::uint64_t* id, Pose* final_pose, int* chunks) {
    Client c(srv.port());
    c.send({{"type", "hello"}, {"scene_seed", 3}});
    *id = c.read_type("ready")["session_id"].get<std::uint64_t>();
    for (int i = 0; i < 3; ++i) {
      c.send(command(kind, 0.0));
      const json chunk = c.read_type("chunk");
      if (chunk["index"] == i) ++*chunks;
      *final_pose = pose_from_json(chunk["pose"]);
    }
  };
  std::uint64_t id_a = 0, id_b = 0;
  Pose pa, pb;
  int ca = 0, cb = 0;
  std::thread a(roam, CommandKind::move_forward, &id_a, &pa, &ca);
  std::thread b(roam, CommandKind::yaw_right, &id_b, &pb, &cb);
  a.join();
  b.join();
  EXPECT_NE(id_a, id_b);
  EXPECT_EQ(ca, 3);
  EXPECT_EQ(cb, 3);
  Pose wa = start_pose(), wb = start_pose();
  for (int i = 0; i < 3; ++i) {
    wa = accumulate(wa, command_to_delta({CommandKind::move_forward, 0.0}));
    wb = accumulate(wb, command_to_delta({CommandKind::yaw_right, 0.0}));
  }
  EXPECT_LT((pa.translation - wa.translation).norm(), 1e-9);
  EXPECT_LT((pb.rotation - wb.rotation).norm(), 1e-9);
  EXPECT_EQ(srv.server().sessions_started(), 2u);
}

TEST_F(ServerTest, HandshakeErrors) {
  const auto root = std::filesystem::temp_directory_path() / "star_server_episodes";
  std::filesystem::remove_all(root);
  DatasetOptions o;
  o.width = o.height = 16;
  o.chunk_frames = 2;
  save_episode(make_pair(11, o).reference, root / "0003");
  ServerOptions so;
  so.episodes = root;
  Running srv(model, so);
  {
    Client c(srv.port());
    c.send({{"type", "hello"}, {"episode_id", "0099"}});
    const json e = c.read();
    EXPECT_EQ(e["type"], "error");
    EXPECT_EQ(e["code"], "not_found");
    EXPECT_TRUE(c.closed());
  }
  {
    Client c(srv.port());
    c.send({{"type", "hello"}, {"episode_id", "../0003"}});
    EXPECT_EQ(c.read()["code"], "not_found");
  }
  {
    Client c(srv.port());
    c.send(command(CommandKind::move_forward, 0.1));
    const json e = c.read();
    EXPECT_EQ(e["code"], "bad_handshake");
    EXPECT_TRUE(c.closed());
  }
  {
    Client c(srv.port());
    c.send({{"type", "hello"}, {"episode_id", "0003"}});
    c.read_type("ready");
    c.send({{"type", "command"}, {"kind", "teleport"}});
    EXPECT_EQ(c.read()["code"], "bad_message");
    c.send(command(CommandKind::move_forward, -1.0));
    EXPECT_EQ(c.read()["code"], "bad_message");
    // The session survives bad messages.
    c.send(command(CommandKind::move_forward, 0.1));
    EXPECT_EQ(c.read_type("chunk")["index"], 0);
  }
  std::filesystem::remove_all(root);
}

TEST_F(ServerTest, PngFrames) {
  ServerOptions so;
  so.png_frames = true;
  Running srv(model, so);
  Client c(srv.port());
  c.send({{"type", "hello"}, {"scene_seed", 2}});
  c.read_type("ready");
  c.send({{"type", "freeze"}, {"frozen", true}});
  c.send(command(CommandKind::stop, 0.0));
  const json chunk = c.read_type("chunk");
  EXPECT_EQ(chunk["encoding"], "png");
  const auto bytes = base64_decode(chunk["frames"][0].get<std::string>());
  ASSERT_GT(bytes.size(), 8u);
  EXPECT_EQ(bytes[1], 'P');
}

TEST_F(ServerTest, StaticFiles) {
  const auto ui = std::filesystem::temp_directory_path() / "star_server_ui";
  std::filesystem::remove_all(ui);
  std::filesystem::create_directories(ui / "js");
  write_text(ui / "index.html", "<html>roam</html>");
  write_text(ui / "js" / "app.js", "console.log(1);");
  {
    std::ofstream bin(ui / "blob.bin", std::ios::binary);
    const char raw[] = {'\0', '\xff', '\r', '\n', '\x1a'};
    bin.write(raw, sizeof(raw));
  }
  write_text(ui.parent_path() / "star_server_secret.txt", "secret");
  ServerOptions so;
  so.ui_dir = ui;
  Running srv(model, so);

  auto res = http_get(srv.port(), "/");
  EXPECT_EQ(res.result(), http::status::ok);
  EXPECT_EQ(res.body(), "<html>roam</html>");
  EXPECT_EQ(res[http::field::content_type], "text/html");
  res = http_get(srv.port(), "/js/app.js?v=2");
  EXPECT_EQ(res.result(), http::status::ok);
  EXPECT_EQ(res[http::field::content_type], "application/javascript");
  res = http_get(srv.port(), "/blob.bin");
  EXPECT_EQ(res.body(), std::string("\0\xff\r\n\x1a", 5));
  EXPECT_EQ(http_get(srv.port(), "/missing.html").result(), http::status::not_found);
  EXPECT_EQ(http_get(srv.port(), "/../star_server_secret.txt").result(), http::status::not_found);
  EXPECT_EQ(http_get(srv.port(), "/js/../../star_server_secret.txt").result(), http::status::not_found);

  // WebSocket upgrades still work on the same port.
  Client c(srv.port());
  c.send({{"type", "hello"}, {"scene_seed", 4}});
  EXPECT_EQ(c.read()["type"], "ready");
  std::filesystem::remove_all(ui);
  std::filesystem::remove(ui.parent_path() / "star_server_secret.txt");
}

TEST_F(ServerTest, NoUiDirMeansNotFound) {
  Running srv(model, {});
  EXPECT_EQ(http_get(srv.port(), "/index.html").result(), http::status::not_found);
}

}  // namespace
}  // namespace star
