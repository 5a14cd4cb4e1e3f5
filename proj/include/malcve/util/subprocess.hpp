// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "malcve/errors.hpp"
#include "malcve/util/files.hpp"

namespace malcve {

struct ProcessResult {
    int exit_code = -1;      ///< -1 when killed or signalled
    bool timed_out = false;
    std::string output;      ///< stdout and stderr interleaved, truncated to the cap
};

/// Resolves argv[0] the way execvp would. Empty when not found.
inline std::optional<fs::path> find_executable(const std::string& name) {
    auto usable = [](const fs::path& p) {
        struct stat st {};
        return ::stat(p.c_str(), &st) == 0 && S_ISREG(st.st_mode) && ::access(p.c_str(), X_OK) == 0;
    };
    if (name.empty()) return std::nullopt;
    if (name.find('/') != std::string::npos) return usable(name) ? std::optional<fs::path>(name) : std::nullopt;
    std::string path = env_or("PATH", "/usr/local/bin:/usr/bin:/bin");
    std::size_t pos = 0;
    while (pos <= path.size()) {
        auto colon = path.find(':', pos);
        if (colon == std::string::npos) colon = path.size();
        fs::path dir = path.substr(pos, colon - pos);
        if (dir.empty()) dir = ".";
        if (usable(dir / name)) return dir / name;
        pos = colon + 1;
    }
    return std::nullopt;
}

/// Runs `argv` directly (no shell) in its own process group. The group is
/// killed when `timeout` elapses. Throws ConfigError if argv[0] cannot be
/// found.
inline ProcessResult run_process(const std::vector<std::string>& argv, std::chrono::milliseconds timeout,
                                 std::size_t output_cap = 64 * 1024) {
    if (argv.empty()) throw ConfigError("empty command line");
    auto exe = find_executable(argv[0]);
    if (!exe) throw ConfigError("executable not found: " + argv[0]);

    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) throw Error(std::string("pipe: ") + std::strerror(errno));
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);

    pid_t pid = ::fork();
    if (pid < 0) {
        ::close(fds[0]);
        ::close(fds[1]);
        throw Error(std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(fds[1], STDOUT_FILENO);
        ::dup2(fds[1], STDERR_FILENO);
        int devnull = ::open("/dev/null", O_RDONLY);
        if (devnull >= 0) ::dup2(devnull, STDIN_FILENO);
        ::execv(exe->c_str(), args.data());
        ::_exit(127);
    }
    ::setpgid(pid, pid);
    ::close(fds[1]);

    ProcessResult r;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    char buf[4096];
    for (;;) {
        auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) {
            r.timed_out = true;
            break;
        }
        pollfd p{fds[0], POLLIN, 0};
        int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 1000)));
        if (rc < 0 && errno == EINTR) continue;
        if (rc <= 0) continue;
        ssize_t n = ::read(fds[0], buf, sizeof buf);
        if (n <= 0) break;  // every writer closed
        if (r.output.size() < output_cap)
            r.output.append(buf, std::min<std::size_t>(static_cast<std::size_t>(n), output_cap - r.output.size()));
    }
    ::close(fds[0]);
    if (r.timed_out) ::kill(-pid, SIGKILL);

    int status = 0;
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    if (!r.timed_out && WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
    return r;
}

}  // namespace malcve
