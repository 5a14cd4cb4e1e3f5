// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "malcve/util/httplib_client.hpp"

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "malcve/util/files.hpp"

namespace testing_support {

inline malcve::fs::path fixture(const std::string& rel) { return malcve::fs::path(MALCVE_FIXTURE_DIR) / rel; }

inline std::vector<float> random_unit(std::mt19937_64& rng, std::size_t dim) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<float> v(dim);
    double s = 0;
    for (auto& x : v) {
        x = n(rng);
        s += double(x) * x;
    }
    for (auto& x : v) x = static_cast<float>(x / std::sqrt(s));
    return v;
}

/// httplib server on an ephemeral localhost port, serving until destroyed.
class LocalServer {
public:
    LocalServer() = default;
    ~LocalServer() { stop(); }
    LocalServer(const LocalServer&) = delete;
    LocalServer& operator=(const LocalServer&) = delete;

    httplib::Server& server() { return server_; }

    void start() {
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    void stop() {
        if (thread_.joinable()) {
            server_.stop();
            thread_.join();
        }
    }
    std::string url(const std::string& path = "") const {
        return "http://127.0.0.1:" + std::to_string(port_) + path;
    }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
};

}  // namespace testing_support
