#pragma once

#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "pbt/aging.hpp"
#include "pbt/errors.hpp"
#include "pbt/matrix.hpp"
#include "pbt/model.hpp"

namespace pbt {

struct EmbedEndpoint {
  std::string host = "127.0.0.1";
  int port = 0;
  double timeout_s = 5.0;
};

namespace detail {

inline void set_timeouts(httplib::Client& cli, double timeout_s) {
  auto sec = static_cast<time_t>(timeout_s);
  auto usec = static_cast<time_t>((timeout_s - static_cast<double>(sec)) * 1e6);
  cli.set_connection_timeout(sec, usec);
  cli.set_read_timeout(sec, usec);
  cli.set_write_timeout(sec, usec);
}

}  // namespace detail

// POST /embed {"prompt": ...} -> {"dim", "tokens", "mask"} parsed into a
// TokenMatrix. Transport failures map to EmbedderUnavailable, malformed
// payloads to ProtocolError, inconsistent widths to DimensionMismatch.
inline TokenMatrix fetch_token_matrix(const EmbedEndpoint& ep, const std::string& prompt) {
  httplib::Client cli(ep.host, ep.port);
  detail::set_timeouts(cli, ep.timeout_s);
  nlohmann::json body;
  body["prompt"] = prompt;
  auto res = cli.Post("/embed", body.dump(), "application/json");
  if (!res)
    throw EmbedderUnavailable("embedding service unreachable at " + ep.host + ":" +
                              std::to_string(ep.port) + " (" + httplib::to_string(res.error()) +
                              ")");
  if (res->status != 200)
    throw ProtocolError("embedding service returned status " + std::to_string(res->status));
  nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
  if (j.is_discarded()) throw ProtocolError("embedding response is not valid JSON");
  if (!j.contains("dim") || !j["dim"].is_number_integer())
    throw ProtocolError("embedding response missing integer 'dim'");
  if (!j.contains("tokens") || !j["tokens"].is_array())
    throw ProtocolError("embedding response missing 'tokens' array");
  if (!j.contains("mask") || !j["mask"].is_array())
    throw ProtocolError("embedding response missing 'mask' array");
  int dim = j["dim"].get<int>();
  if (dim < 1) throw ProtocolError("embedding response 'dim' must be positive");
  const auto& tokens = j["tokens"];
  const auto& mask = j["mask"];
  if (mask.size() != tokens.size())
    throw ProtocolError("embedding response mask length must equal token row count");
  TokenMatrix tm;
  tm.rows = Mat(static_cast<int>(tokens.size()), dim);
  tm.mask.resize(tokens.size());
  for (size_t r = 0; r < tokens.size(); ++r) {
    if (!tokens[r].is_array()) throw ProtocolError("token row is not an array");
    if (static_cast<int>(tokens[r].size()) != dim)
      throw DimensionMismatch("token row width " + std::to_string(tokens[r].size()) +
                              " does not match dim " + std::to_string(dim));
    for (int c = 0; c < dim; ++c) {
      if (!tokens[r][static_cast<size_t>(c)].is_number())
        throw ProtocolError("token entries must be numbers");
      tm.rows(static_cast<int>(r), c) = tokens[r][static_cast<size_t>(c)].get<double>();
      if (!std::isfinite(tm.rows(static_cast<int>(r), c)))
        throw ProtocolError("token entries must be finite");
    }
    if (!mask[r].is_number_integer()) throw ProtocolError("mask entries must be integers");
    tm.mask[r] = mask[r].get<int>();
  }
  return tm;
}

// Remote aging embedder: fetches the token matrix and pools the last valid
// row. The service dimension must equal the configured d_embed.
inline Mat embed_remote(const std::string& prompt, const EmbedEndpoint& ep, int d_embed) {
  TokenMatrix tm = fetch_token_matrix(ep, prompt);
  if (tm.rows.cols != d_embed)
    throw DimensionMismatch("embedding service dim " + std::to_string(tm.rows.cols) +
                            " does not match configured d_embed " + std::to_string(d_embed));
  return last_valid_pool(tm);
}

inline EmbedFn remote_embedder(const EmbedEndpoint& ep, int d_embed) {
  return [ep, d_embed](const std::string& prompt) { return embed_remote(prompt, ep, d_embed); };
}

// In-process stub speaking the wire protocol. Valid rows are hash embeddings
// of growing token prefixes (up to the final 8), so the last valid row equals
// embed_hash(prompt); two trailing masked-out rows exercise the pooling rule.
class StubEmbedServer {
 public:
  explicit StubEmbedServer(int d_embed) : d_embed_(d_embed) {
    svr_.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
      handle(req, res);
    });
  }

  ~StubEmbedServer() { stop(); }

  // Binds 127.0.0.1 (an ephemeral port when 0) and serves on a background
  // thread; returns the bound port.
  int start(int port = 0) {
    if (running_) return port_;
    if (port == 0) {
      port_ = svr_.bind_to_any_port("127.0.0.1");
      if (port_ <= 0) throw EmbedderUnavailable("stub server could not bind a port");
    } else {
      if (!svr_.bind_to_port("127.0.0.1", port))
        throw EmbedderUnavailable("stub server could not bind port " + std::to_string(port));
      port_ = port;
    }
    worker_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
    running_ = true;
    return port_;
  }

  void stop() {
    if (!running_) return;
    svr_.stop();
    if (worker_.joinable()) worker_.join();
    running_ = false;
  }

  // Blocks until the server stops (foreground serving for the CLI).
  void wait() {
    if (worker_.joinable()) worker_.join();
    running_ = false;
  }

  int port() const { return port_; }

  EmbedEndpoint endpoint(double timeout_s = 5.0) const {
    EmbedEndpoint ep;
    ep.host = "127.0.0.1";
    ep.port = port_;
    ep.timeout_s = timeout_s;
    return ep;
  }

 private:
  void handle(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.contains("prompt") || !j["prompt"].is_string()) {
      res.status = 400;
      res.set_content("{\"error\":\"body must be JSON with a string 'prompt'\"}",
                      "application/json");
      return;
    }
    std::string prompt = j["prompt"].get<std::string>();
    std::vector<std::string> words = tokenize(prompt);
    if (words.empty()) {
      res.status = 400;
      res.set_content("{\"error\":\"prompt has no tokens\"}", "application/json");
      return;
    }
    size_t k = words.size();
    size_t m = k < 8 ? k : 8;
    nlohmann::ordered_json out;
    out["dim"] = d_embed_;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    nlohmann::ordered_json mask = nlohmann::ordered_json::array();
    auto push_row = [&](const Mat& e, int valid) {
      nlohmann::ordered_json row = nlohmann::ordered_json::array();
      for (int c = 0; c < e.cols; ++c) row.push_back(e(0, c));
      rows.push_back(row);
      mask.push_back(valid);
    };
    for (size_t p = k - m + 1; p <= k; ++p) {
      std::string joined;
      for (size_t i = 0; i < p; ++i) {
        if (i) joined += " ";
        joined += words[i];
      }
      push_row(embed_hash(joined, d_embed_), 1);
    }
    push_row(embed_hash("padding row zero", d_embed_), 0);
    push_row(embed_hash("padding row one", d_embed_), 0);
    out["tokens"] = rows;
    out["mask"] = mask;
    res.status = 200;
    res.set_content(out.dump(), "application/json");
  }

  int d_embed_;
  int port_ = 0;
  bool running_ = false;
  httplib::Server svr_;
  std::thread worker_;
};

}  // namespace pbt
