#pragma once

#include "sds/agent.hpp"
#include "sds/core_model.hpp"
#include "sds/device_sim.hpp"
#include "sds/governors.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace sds::protocol {

inline constexpr std::uint16_t kDefaultPort = 7431;
inline constexpr std::chrono::seconds kReadDeadline{10};

struct Hello {
    std::string device_profile;
    bool operator==(const Hello&) const = default;
};

struct FrameDone {
    double stage1_ms = 0.0;
    double stage2_ms = 0.0;
    double total_ms = 0.0;
    long proposals = 0;
    double cpu_temp = 0.0;
    double gpu_temp = 0.0;
    bool operator==(const FrameDone&) const = default;
};

/// An observation, optionally carrying the previous frame's result.
struct Obs {
    Observation observation;
    std::optional<FrameDone> frame_done;
    bool operator==(const Obs&) const = default;
};

struct Act {
    std::size_t cpu_level = 0;
    std::size_t gpu_level = 0;
    bool operator==(const Act&) const = default;
};

struct Bye {
    bool operator==(const Bye&) const = default;
};

using Message = std::variant<Hello, Obs, Act, FrameDone, Bye>;

/// Wire tag: hello | obs | act | frame_done | bye.
std::string tag(const Message& m);

enum class DecodeErrorKind { Truncated, LengthMismatch, BadUtf8, BadJson, UnknownType, MissingField, BadField };

class DecodeError : public std::runtime_error {
public:
    DecodeError(DecodeErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    DecodeErrorKind kind() const noexcept { return kind_; }

private:
    DecodeErrorKind kind_;
};

/// 4-byte big-endian payload length followed by compact UTF-8 JSON {"type": ..., "body": {...}}.
std::vector<std::uint8_t> encode(const Message& m);
std::string encode_payload(const Message& m);

/// Decodes exactly one frame (prefix included).
Message decode(std::span<const std::uint8_t> frame);
Message decode_payload(std::string_view payload);

bool valid_utf8(std::string_view s) noexcept;

FrameDone frame_done_from(const FrameTrace& trace);

/// Token used by the state machine: Obs messages split by stage.
enum class Token { Hello, ObsStart, ObsRpn, Act, FrameDone, Bye };
Token token_of(const Message& m);

class ProtocolError : public EnvironmentClosed {
public:
    using EnvironmentClosed::EnvironmentClosed;
};

/// Accepts exactly the traces Hello (ObsStart Act ObsRpn Act [FrameDone])* Bye.
class SessionStateMachine {
public:
    /// Throws ProtocolError on an illegal message; the session is then closed.
    void accept(Token t);
    void accept(const Message& m) { accept(token_of(m)); }
    bool closed() const noexcept { return state_ == State::Closed; }
    /// True when the consumed prefix is a complete legal trace.
    bool complete() const noexcept { return state_ == State::Closed && !failed_; }

private:
    enum class State { AwaitHello, Boundary, FrameComplete, AwaitFirstAct, AwaitRpnObs, AwaitSecondAct, Closed };
    State state_ = State::AwaitHello;
    bool failed_ = false;
};

/// True when the whole token sequence is a legal session.
bool legal_trace(std::span<const Token> tokens);

class ChannelClosed : public EnvironmentClosed {
public:
    using EnvironmentClosed::EnvironmentClosed;
};

/// Bidirectional message transport.
class Channel {
public:
    virtual ~Channel() = default;
    virtual void send(const Message& m) = 0;
    /// Blocks until a message arrives; throws ChannelClosed on disconnect or deadline.
    virtual Message receive() = 0;
    /// Hangs up; the peer's next receive fails.
    virtual void close() {}
};

/// One end of an in-process channel pair.
class LoopbackChannel final : public Channel {
public:
    static std::pair<std::unique_ptr<LoopbackChannel>, std::unique_ptr<LoopbackChannel>> pair(
        std::chrono::milliseconds deadline = kReadDeadline);

    void send(const Message& m) override;
    Message receive() override;
    void close() override;

    /// Every frame this end has sent, as raw bytes.
    const std::vector<std::vector<std::uint8_t>>& sent_frames() const noexcept { return sent_; }

private:
    struct Queue {
        std::mutex mu;
        std::condition_variable cv;
        std::deque<std::vector<std::uint8_t>> frames;
        bool closed = false;
    };
    LoopbackChannel(std::shared_ptr<Queue> in, std::shared_ptr<Queue> out, std::chrono::milliseconds deadline);

    std::shared_ptr<Queue> in_;
    std::shared_ptr<Queue> out_;
    std::chrono::milliseconds deadline_;
    std::vector<std::vector<std::uint8_t>> sent_;
};

/// Length-prefixed frames over a connected TCP socket, with a read deadline.
class TcpChannel final : public Channel {
public:
    explicit TcpChannel(int fd, std::chrono::milliseconds deadline = kReadDeadline);
    ~TcpChannel() override;
    TcpChannel(const TcpChannel&) = delete;
    TcpChannel& operator=(const TcpChannel&) = delete;

    static std::unique_ptr<TcpChannel> connect(const std::string& host, std::uint16_t port,
                                               std::chrono::milliseconds deadline = kReadDeadline);

    void send(const Message& m) override;
    Message receive() override;
    void close() override;

private:
    void read_exact(std::uint8_t* dst, std::size_t n);
    int fd_;
};

/// Listening socket; accepts one session at a time.
class TcpListener {
public:
    explicit TcpListener(std::uint16_t port, const std::string& bind_address = "0.0.0.0");
    ~TcpListener();
    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;

    std::uint16_t port() const noexcept { return port_; }
    std::unique_ptr<TcpChannel> accept(std::chrono::milliseconds deadline = kReadDeadline);

private:
    int fd_;
    std::uint16_t port_;
};

struct DeviceSessionStats {
    long frames = 0;
    bool agent_ended = false;
};

/// Device side: Hello, then per frame Obs/Act/Obs/Act with the previous frame's result piggybacked
/// on the next frame-start Obs; a standalone FrameDone and Bye close the session.
DeviceSessionStats serve_device(Channel& channel, SimulatedDevice& device, const std::string& profile_name,
                                long frames);

struct AgentSessionStats {
    long frames = 0;
    std::vector<FrameDone> results;
};

/// Agent side: answers each Obs with the governor's action until Bye.
AgentSessionStats serve_agent(Channel& channel, Governor& governor, const LatencyConstraint& budget);

/// A device reached over a channel, seen through the DeviceEnvironment interface so the training
/// loop can drive it. The frame result arrives with the next frame-start observation.
class RemoteDevice final : public DeviceEnvironment {
public:
    RemoteDevice(Channel& channel, FrequencyTable table, LatencyConstraint budget);

    const FrequencyTable& table() const override { return table_; }
    LatencyConstraint budget() const override { return budget_; }
    Observation frame_start() override;
    Observation after_rpn(const Action& first) override;
    FrameTrace finish_frame(const Action& second) override;

    const std::string& device_profile() const noexcept { return device_profile_; }
    /// Ends the session from the agent side: Bye at a frame boundary, otherwise a hang-up.
    void close();

private:
    Message receive();

    Channel& channel_;
    FrequencyTable table_;
    LatencyConstraint budget_;
    SessionStateMachine machine_;
    std::string device_profile_;
    std::optional<Observation> pending_start_;
    Action first_;
    long frame_ = 0;
    bool ended_ = false;
};

}  // namespace sds::protocol
