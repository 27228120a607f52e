// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/server.hpp"

#include <boost/asio.hpp>
#include <boost/beast.hpp>
#include <boost/beast/websocket.hpp>
#include <openssl/evp.h>
#include <png.h>

#include <chrono>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <mutex>
#include <thread>

namespace star {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using json = nlohmann::json;

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw std::invalid_argument("base64: invalid input");
  // EVP_DecodeBlock keeps the zero bytes that padding stands for.
  std::size_t pad = 0;
  for (std::size_t i = text.size(); i > 0 && text[i - 1] == '='; --i) ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::vector<std::uint8_t> raw_f32(const Image& image) {
  std::vector<std::uint8_t> out(image.data.size() * sizeof(float));
  std::memcpy(out.data(), image.data.data(), out.size());
  return out;
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.channels != 3) throw std::invalid_argument("encode_png: RGB images only");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("encode_png: libpng init failed");
  }
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> row(static_cast<std::size_t>(image.width) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("encode_png: libpng error");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        v->insert(v->end(), data, data + n);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      const float v = image.data[static_cast<std::size_t>(y) * row.size() + i];
      row[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::optional<Episode> EpisodeStore::find(const std::string& id) const {
  if (root_.empty() || id.empty() || id.find('/') != std::string::npos || id.find('\\') != std::string::npos ||
      id == "." || id == "..") {
    return std::nullopt;
  }
  const auto dir = root_ / id;
  try {
    if (std::filesystem::exists(dir / "meta.json")) return load_episode(dir);
    if (std::filesystem::exists(dir / "reference" / "meta.json")) return load_episode(dir / "reference");
  } catch (const std::exception&) {
    return std::nullopt;
  }
  return std::nullopt;
}

Episode reference_for_seed(std::uint64_t scene_seed, const DenoiserConfig& config) {
  DatasetOptions o;
  o.width = config.image_width;
  o.height = config.image_height;
  o.chunk_frames = config.frames;
  return make_pair(scene_seed, o).reference;
}

json chunk_message(const ChunkResult& r, bool png, bool drop_frames) {
  json frames = json::array();
  if (!drop_frames) {
    for (const Image& f : r.frames) frames.push_back(base64_encode(png ? encode_png(f) : raw_f32(f)));
  }
  return {{"type", "chunk"},
          {"index", r.index},
          {"pose", pose_to_json(r.poses.back())},
          {"coverage", r.coverage},
          {"command", {{"kind", to_string(r.command.kind)}, {"magnitude", r.command.magnitude}}},
          {"encoding", png ? "png" : "f32"},
          {"frames", frames},
          {"frames_dropped", drop_frames}};
}

bool OutboundQueue::push_chunk(const ChunkResult& r, bool png) {
  const bool drop = chunks_ >= max_chunks_;
  if (drop) ++dropped_;
  items_.push_back({chunk_message(r, png, drop).dump(), true});
  ++chunks_;
  return drop;
}

void OutboundQueue::push(const json& message) { items_.push_back({message.dump(), false}); }

void OutboundQueue::pop() {
  if (items_.front().chunk) --chunks_;
  items_.pop_front();
}

namespace {

json error_message(std::string_view code, std::string_view text) {
  return {{"type", "error"}, {"code", code}, {"text", text}};
}

std::string_view mime_type(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  if (ext == ".html" || ext == ".htm") return "text/html";
  if (ext == ".js" || ext == ".mjs") return "application/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".png") return "image/png";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".wasm") return "application/wasm";
  return "application/octet-stream";
}

}  // namespace

class WsSession;

struct Server::Impl {
  const DenoiserModel& model;
  ServerOptions options;
  EpisodeStore store;
  net::io_context ioc;
  tcp::acceptor acceptor;
  std::mutex mu;
  std::vector<std::weak_ptr<WsSession>> sessions;
  std::atomic<std::size_t> started{0};
  std::atomic<std::uint64_t> next_id{1};

  Impl(const DenoiserModel& m, ServerOptions o)
      : model(m), options(std::move(o)), store(options.episodes), acceptor(ioc) {
    const tcp::endpoint ep(net::ip::make_address(options.host), options.port);
    acceptor.open(ep.protocol());
    acceptor.set_option(net::socket_base::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen();
  }

  void accept();
  void track(const std::shared_ptr<WsSession>& s);
  http::response<http::string_body> serve_static(const http::request<http::string_body>& req) const;
};

// One WebSocket connection. Network I/O runs on the server's io_context;
// chunk generation runs on a dedicated worker thread that posts results
// back.
class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(Server::Impl& server, tcp::socket&& socket)
      : server_(server), ws_(std::move(socket)), queue_(server.options.max_queued_chunks) {}

  ~WsSession() {
    stop_worker();
    if (worker_.joinable()) {
      if (worker_.get_id() == std::this_thread::get_id()) {
        worker_.detach();
      } else {
        worker_.join();
      }
    }
  }

  void start(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (!ec) self->do_read();
    });
  }

  void stop_worker() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
  }

  void join_worker() {
    stop_worker();
    if (worker_.joinable() && worker_.get_id() != std::this_thread::get_id()) worker_.join();
  }

 private:
  void do_read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_read(ec); });
  }

  void on_read(beast::error_code ec) {
    if (ec) {
      stop_worker();
      return;
    }
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    handle(text);
    if (!closing_) do_read();
  }

  void handle(const std::string& text) {
    json msg;
    try {
      msg = json::parse(text);
    } catch (const json::exception&) {
      fail_or_report("bad_message", "message is not JSON");
      return;
    }
    const std::string type = msg.is_object() ? msg.value("type", "") : "";
    if (!session_) {
      if (type != "hello") return fail("bad_handshake", "first message must be hello");
      return hello(msg);
    }
    if (type == "command") return command(msg);
    if (type == "freeze") {
      std::lock_guard lock(mu_);
      freeze_ = msg.value("frozen", true);
      return;
    }
    if (type == "bye") return close();
    if (type == "hello") return send(error_message("bad_message", "session already started"));
    send(error_message("bad_message", "unknown message type"));
  }

  void hello(const json& msg) {
    std::optional<Episode> ref;
    try {
      if (msg.contains("episode_id")) {
        ref = server_.store.find(msg.at("episode_id").get<std::string>());
        if (!ref) return fail("not_found", "unknown episode_id");
      } else if (msg.contains("scene_seed")) {
        ref = reference_for_seed(msg.at("scene_seed").get<std::uint64_t>(), server_.model.config());
      } else {
        return fail("bad_handshake", "hello needs episode_id or scene_seed");
      }
      session_ = std::make_unique<Session>(server_.model, std::move(*ref), server_.options.session);
    } catch (const std::exception& e) {
      return fail("bad_handshake", e.what());
    }
    id_ = server_.next_id++;
    ++server_.started;
    const DenoiserConfig& c = server_.model.config();
    send({{"type", "ready"}, {"session_id", id_}, {"width", c.image_width}, {"height", c.image_height}, {"k", c.frames}});
    worker_ = std::thread([self = shared_from_this()] { self->work(); });
  }

  void command(const json& msg) {
    InteractionCommand cmd;
    const auto kind = parse_command_kind(msg.value("kind", ""));
    cmd.magnitude = msg.value("magnitude", 0.0);
    if (!kind) return send(error_message("bad_message", "unknown command kind"));
    cmd.kind = *kind;
    if (!cmd.valid()) return send(error_message("bad_message", "invalid command magnitude"));
    {
      std::lock_guard lock(mu_);
      // Latest wins: a command still waiting for the next chunk is replaced.
      if (pending_) ++coalesced_;
      pending_ = cmd;
      pending_since_ = std::chrono::steady_clock::now();
    }
    cv_.notify_all();
  }

  void work() {
    for (;;) {
      InteractionCommand cmd;
      std::chrono::steady_clock::time_point since;
      bool freeze = false;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || pending_.has_value(); });
        if (stop_) return;
        cmd = *pending_;
        pending_.reset();
        since = pending_since_;
        freeze = freeze_;
      }
      session_->set_freeze(freeze);
      ChunkResult r;
      try {
        r = session_->step(cmd);
      } catch (const std::exception& e) {
        net::post(ws_.get_executor(), [self = shared_from_this(), text = std::string(e.what())] {
          self->send(error_message("internal", text));
        });
        continue;
      }
      const double latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
      net::post(ws_.get_executor(), [self = shared_from_this(), r = std::move(r), latency_ms] {
        self->deliver(r, latency_ms);
      });
    }
  }

  void deliver(const ChunkResult& r, double latency_ms) {
    if (closing_) return;
    queue_.push_chunk(r, server_.options.png_frames);
    std::size_t coalesced;
    {
      std::lock_guard lock(mu_);
      coalesced = coalesced_;
    }
    const double fps = r.seconds > 0.0 ? static_cast<double>(r.frames.size()) / r.seconds : 0.0;
    queue_.push({{"type", "metrics"},
                 {"fps", fps},
                 {"latency_ms", latency_ms},
                 {"dropped", queue_.dropped()},
                 {"coalesced", coalesced}});
    flush();
  }

  void send(const json& msg) {
    queue_.push(msg);
    flush();
  }

  void fail(std::string_view code, std::string_view text) {
    send(error_message(code, text));
    close();
  }

  void fail_or_report(std::string_view code, std::string_view text) {
    if (session_) {
      send(error_message(code, text));
    } else {
      fail("bad_handshake", text);
    }
  }

  void close() {
    closing_ = true;
    stop_worker();
    if (!writing_ && queue_.empty()) do_close();
  }

  void do_close() {
    if (closed_) return;
    closed_ = true;
    ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
  }

  void flush() {
    if (writing_) return;
    if (queue_.empty()) {
      if (closing_) do_close();
      return;
    }
    writing_ = true;
    auto text = std::make_shared<std::string>(queue_.front());
    ws_.text(true);
    ws_.async_write(net::buffer(*text), [self = shared_from_this(), text](beast::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) {
        self->stop_worker();
        return;
      }
      self->queue_.pop();
      self->flush();
    });
  }

  Server::Impl& server_;
  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  OutboundQueue queue_;
  bool writing_ = false;
  bool closing_ = false;
  bool closed_ = false;
  std::uint64_t id_ = 0;
  std::unique_ptr<Session> session_;

  // Shared with the worker.
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<InteractionCommand> pending_;
  std::chrono::steady_clock::time_point pending_since_;
  std::size_t coalesced_ = 0;
  bool freeze_ = false;
  bool stop_ = false;
  std::thread worker_;
};

namespace {

// First request on a connection: a WebSocket upgrade or a static file.
class HttpConnection : public std::enable_shared_from_this<HttpConnection> {
 public:
  HttpConnection(Server::Impl& server, tcp::socket&& socket) : server_(server), stream_(std::move(socket)) {}

  void start() {
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (!ec) self->on_request();
    });
  }

 private:
  void on_request() {
    if (websocket::is_upgrade(req_)) {
      stream_.expires_never();
      auto s = std::make_shared<WsSession>(server_, stream_.release_socket());
      server_.track(s);
      s->start(std::move(req_));
      return;
    }
    auto res = std::make_shared<http::response<http::string_body>>(server_.serve_static(req_));
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
      beast::error_code ignored;
      self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
    });
  }

  Server::Impl& server_;
  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

}  // namespace

void Server::Impl::accept() {
  acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;
    std::make_shared<HttpConnection>(*this, std::move(socket))->start();
    accept();
  });
}

void Server::Impl::track(const std::shared_ptr<WsSession>& s) {
  std::lock_guard lock(mu);
  std::erase_if(sessions, [](const std::weak_ptr<WsSession>& w) { return w.expired(); });
  sessions.push_back(s);
}

http::response<http::string_body> Server::Impl::serve_static(const http::request<http::string_body>& req) const {
  auto respond = [&](http::status status, std::string body, std::string_view type) {
    http::response<http::string_body> res{status, req.version()};
    res.set(http::field::server, "star");
    res.set(http::field::content_type, std::string(type));
    res.keep_alive(false);
    res.body() = req.method() == http::verb::head ? std::string() : std::move(body);
    res.prepare_payload();
    return res;
  };
  if (req.method() != http::verb::get && req.method() != http::verb::head) {
    return respond(http::status::method_not_allowed, "method not allowed\n", "text/plain");
  }
  std::string target(req.target());
  target = target.substr(0, target.find('?'));
  if (options.ui_dir.empty() || target.empty() || target[0] != '/' || target.find("..") != std::string::npos) {
    return respond(http::status::not_found, "not_found\n", "text/plain");
  }
  if (target.back() == '/') target += "index.html";
  const auto path = options.ui_dir / target.substr(1);
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) return respond(http::status::not_found, "not_found\n", "text/plain");
  std::ifstream in(path, std::ios::binary);
  std::string body{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return respond(http::status::ok, std::move(body), mime_type(path));
}

Server::Server(const DenoiserModel& model, ServerOptions options)
    : impl_(std::make_unique<Impl>(model, std::move(options))) {
  impl_->accept();
}

Server::~Server() {
  stop();
  std::lock_guard lock(impl_->mu);
  for (auto& w : impl_->sessions) {
    if (auto s = w.lock()) s->join_worker();
  }
}

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

void Server::run() { impl_->ioc.run(); }

void Server::stop() {
  net::post(impl_->ioc, [impl = impl_.get()] {
    beast::error_code ec;
    impl->acceptor.close(ec);
  });
  impl_->ioc.stop();
  std::vector<std::shared_ptr<WsSession>> live;
  {
    std::lock_guard lock(impl_->mu);
    for (auto& w : impl_->sessions) {
      if (auto s = w.lock()) live.push_back(s);
    }
  }
  for (auto& s : live) s->stop_worker();
}

std::size_t Server::sessions_started() const { return impl_->started; }

}  // namespace star
