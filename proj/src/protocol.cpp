#include "sds/protocol.hpp"

#include <nlohmann/json.hpp>

#include <arpa/inet.h>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace sds::protocol {

using ordered_json = nlohmann::ordered_json;

namespace {

template <class... Fs>
struct Overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

const char* stage_name(Stage s) { return s == Stage::FrameStart ? "frame_start" : "after_rpn"; }

ordered_json frame_done_json(const FrameDone& d) {
    ordered_json j;
    j["stage1_ms"] = d.stage1_ms;
    j["stage2_ms"] = d.stage2_ms;
    j["total_ms"] = d.total_ms;
    j["proposals"] = d.proposals;
    j["cpu_temp"] = d.cpu_temp;
    j["gpu_temp"] = d.gpu_temp;
    return j;
}

ordered_json body_of(const Message& m) {
    return std::visit(
        Overloaded{
            [](const Hello& h) {
                ordered_json j;
                j["device_profile"] = h.device_profile;
                return j;
            },
            [](const Obs& o) {
                const Observation& ob = o.observation;
                ordered_json j;
                j["stage"] = stage_name(ob.stage);
                j["cpu_temp"] = ob.cpu_temp;
                j["gpu_temp"] = ob.gpu_temp;
                j["cpu_level"] = ob.cpu_level;
                j["gpu_level"] = ob.gpu_level;
                j["slack_ms"] = ob.slack_ms;
                if (ob.proposals) j["proposals"] = *ob.proposals;
                if (o.frame_done) j["frame_done"] = frame_done_json(*o.frame_done);
                return j;
            },
            [](const Act& a) {
                ordered_json j;
                j["cpu_level"] = a.cpu_level;
                j["gpu_level"] = a.gpu_level;
                return j;
            },
            [](const FrameDone& d) { return frame_done_json(d); },
            [](const Bye&) { return ordered_json::object(); },
        },
        m);
}

const ordered_json& field(const ordered_json& body, const char* name) {
    auto it = body.find(name);
    if (it == body.end()) throw DecodeError(DecodeErrorKind::MissingField, std::string("missing field: ") + name);
    return *it;
}

double number(const ordered_json& body, const char* name) {
    const auto& v = field(body, name);
    if (!v.is_number()) throw DecodeError(DecodeErrorKind::BadField, std::string("field is not a number: ") + name);
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw DecodeError(DecodeErrorKind::BadField, std::string("non-finite field: ") + name);
    return x;
}

long integer(const ordered_json& body, const char* name) {
    const auto& v = field(body, name);
    if (!v.is_number_integer()) {
        throw DecodeError(DecodeErrorKind::BadField, std::string("field is not an integer: ") + name);
    }
    return v.get<long>();
}

std::size_t level(const ordered_json& body, const char* name) {
    const long x = integer(body, name);
    if (x < 0) throw DecodeError(DecodeErrorKind::BadField, std::string("negative level: ") + name);
    return static_cast<std::size_t>(x);
}

FrameDone frame_done_body(const ordered_json& b) {
    if (!b.is_object()) throw DecodeError(DecodeErrorKind::BadField, "frame_done must be an object");
    FrameDone d;
    d.stage1_ms = number(b, "stage1_ms");
    d.stage2_ms = number(b, "stage2_ms");
    d.total_ms = number(b, "total_ms");
    d.proposals = integer(b, "proposals");
    d.cpu_temp = number(b, "cpu_temp");
    d.gpu_temp = number(b, "gpu_temp");
    return d;
}

Obs obs_body(const ordered_json& b) {
    Obs o;
    const auto& stage = field(b, "stage");
    if (stage == "frame_start") {
        o.observation.stage = Stage::FrameStart;
    } else if (stage == "after_rpn") {
        o.observation.stage = Stage::AfterRpn;
    } else {
        throw DecodeError(DecodeErrorKind::BadField, "unknown stage");
    }
    o.observation.cpu_temp = number(b, "cpu_temp");
    o.observation.gpu_temp = number(b, "gpu_temp");
    o.observation.cpu_level = level(b, "cpu_level");
    o.observation.gpu_level = level(b, "gpu_level");
    o.observation.slack_ms = number(b, "slack_ms");
    if (o.observation.stage == Stage::AfterRpn) {
        o.observation.proposals = integer(b, "proposals");
    } else if (b.contains("proposals")) {
        throw DecodeError(DecodeErrorKind::BadField, "frame_start observation carries proposals");
    }
    if (auto it = b.find("frame_done"); it != b.end()) o.frame_done = frame_done_body(*it);
    try {
        validate(o.observation);
    } catch (const DomainError& e) {
        throw DecodeError(DecodeErrorKind::BadField, e.what());
    }
    return o;
}

void write_be32(std::uint8_t* dst, std::uint32_t v) {
    dst[0] = static_cast<std::uint8_t>(v >> 24);
    dst[1] = static_cast<std::uint8_t>(v >> 16);
    dst[2] = static_cast<std::uint8_t>(v >> 8);
    dst[3] = static_cast<std::uint8_t>(v);
}

std::uint32_t read_be32(const std::uint8_t* src) {
    return (std::uint32_t{src[0]} << 24) | (std::uint32_t{src[1]} << 16) | (std::uint32_t{src[2]} << 8) |
           std::uint32_t{src[3]};
}

// Caps a single message so a corrupt prefix cannot make us allocate gigabytes.
constexpr std::uint32_t kMaxPayload = 1u << 20;

}  // namespace

std::string tag(const Message& m) {
    static const char* const tags[] = {"hello", "obs", "act", "frame_done", "bye"};
    return tags[m.index()];
}

std::string encode_payload(const Message& m) {
    ordered_json j;
    j["type"] = tag(m);
    j["body"] = body_of(m);
    return j.dump();
}

std::vector<std::uint8_t> encode(const Message& m) {
    const std::string payload = encode_payload(m);
    std::vector<std::uint8_t> out(4 + payload.size());
    write_be32(out.data(), static_cast<std::uint32_t>(payload.size()));
    std::memcpy(out.data() + 4, payload.data(), payload.size());
    return out;
}

bool valid_utf8(std::string_view s) noexcept {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t n = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            n = 1;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            n = 2;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            n = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + n >= s.size()) return false;
        for (std::size_t k = 1; k <= n; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        // Overlong forms, surrogates and out-of-range code points.
        if ((n == 1 && cp < 0x80) || (n == 2 && cp < 0x800) || (n == 3 && cp < 0x10000)) return false;
        if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
        i += n + 1;
    }
    return true;
}

Message decode_payload(std::string_view payload) {
    if (!valid_utf8(payload)) throw DecodeError(DecodeErrorKind::BadUtf8, "payload is not valid UTF-8");
    ordered_json j;
    try {
        j = ordered_json::parse(payload);
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(DecodeErrorKind::BadJson, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw DecodeError(DecodeErrorKind::BadJson, "payload must be a JSON object");
    const auto& type = field(j, "type");
    const auto& body = field(j, "body");
    if (!type.is_string()) throw DecodeError(DecodeErrorKind::BadField, "type must be a string");
    if (!body.is_object()) throw DecodeError(DecodeErrorKind::BadField, "body must be an object");
    const auto t = type.get<std::string>();
    if (t == "hello") {
        const auto& name = field(body, "device_profile");
        if (!name.is_string()) throw DecodeError(DecodeErrorKind::BadField, "device_profile must be a string");
        return Hello{name.get<std::string>()};
    }
    if (t == "obs") return obs_body(body);
    if (t == "act") return Act{level(body, "cpu_level"), level(body, "gpu_level")};
    if (t == "frame_done") return frame_done_body(body);
    if (t == "bye") return Bye{};
    throw DecodeError(DecodeErrorKind::UnknownType, "unknown message type: " + t);
}

Message decode(std::span<const std::uint8_t> frame) {
    if (frame.size() < 4) throw DecodeError(DecodeErrorKind::Truncated, "frame shorter than its length prefix");
    const std::uint32_t n = read_be32(frame.data());
    if (n != frame.size() - 4) {
        throw DecodeError(frame.size() - 4 < n ? DecodeErrorKind::Truncated : DecodeErrorKind::LengthMismatch,
                          "length prefix " + std::to_string(n) + " does not match payload of " +
                              std::to_string(frame.size() - 4) + " bytes");
    }
    return decode_payload(
        std::string_view(reinterpret_cast<const char*>(frame.data()) + 4, frame.size() - 4));
}

FrameDone frame_done_from(const FrameTrace& trace) {
    return {trace.stage1_ms, trace.stage2_ms, trace.total_ms, trace.proposals, trace.cpu_temp, trace.gpu_temp};
}

Token token_of(const Message& m) {
    return std::visit(Overloaded{
                          [](const Hello&) { return Token::Hello; },
                          [](const Obs& o) {
                              return o.observation.stage == Stage::FrameStart ? Token::ObsStart : Token::ObsRpn;
                          },
                          [](const Act&) { return Token::Act; },
                          [](const FrameDone&) { return Token::FrameDone; },
                          [](const Bye&) { return Token::Bye; },
                      },
                      m);
}

void SessionStateMachine::accept(Token t) {
    State next = State::Closed;
    bool ok = false;
    switch (state_) {
        case State::AwaitHello:
            ok = t == Token::Hello;
            next = State::Boundary;
            break;
        case State::Boundary:
        case State::FrameComplete:
            if (t == Token::ObsStart) {
                ok = true;
                next = State::AwaitFirstAct;
            } else if (t == Token::Bye) {
                ok = true;
                next = State::Closed;
            } else if (t == Token::FrameDone && state_ == State::FrameComplete) {
                ok = true;
                next = State::Boundary;
            }
            break;
        case State::AwaitFirstAct:
            ok = t == Token::Act;
            next = State::AwaitRpnObs;
            break;
        case State::AwaitRpnObs:
            ok = t == Token::ObsRpn;
            next = State::AwaitSecondAct;
            break;
        case State::AwaitSecondAct:
            ok = t == Token::Act;
            next = State::FrameComplete;
            break;
        case State::Closed:
            break;
    }
    if (!ok) {
        const bool was_closed = state_ == State::Closed;
        state_ = State::Closed;
        failed_ = true;
        throw ProtocolError(was_closed ? "message after session end" : "out-of-order message");
    }
    state_ = next;
}

bool legal_trace(std::span<const Token> tokens) {
    SessionStateMachine m;
    try {
        for (Token t : tokens) m.accept(t);
    } catch (const ProtocolError&) {
        return false;
    }
    return m.complete();
}

// ---------------------------------------------------------------------------------------------

LoopbackChannel::LoopbackChannel(std::shared_ptr<Queue> in, std::shared_ptr<Queue> out,
                                 std::chrono::milliseconds deadline)
    : in_(std::move(in)), out_(std::move(out)), deadline_(deadline) {}

std::pair<std::unique_ptr<LoopbackChannel>, std::unique_ptr<LoopbackChannel>> LoopbackChannel::pair(
    std::chrono::milliseconds deadline) {
    auto a = std::make_shared<Queue>();
    auto b = std::make_shared<Queue>();
    return {std::unique_ptr<LoopbackChannel>(new LoopbackChannel(a, b, deadline)),
            std::unique_ptr<LoopbackChannel>(new LoopbackChannel(b, a, deadline))};
}

void LoopbackChannel::send(const Message& m) {
    auto bytes = encode(m);
    sent_.push_back(bytes);
    std::lock_guard lock(out_->mu);
    if (out_->closed) throw ChannelClosed("peer closed the channel");
    out_->frames.push_back(std::move(bytes));
    out_->cv.notify_one();
}

Message LoopbackChannel::receive() {
    std::unique_lock lock(in_->mu);
    if (!in_->cv.wait_for(lock, deadline_, [&] { return !in_->frames.empty() || in_->closed; })) {
        throw ChannelClosed("read deadline expired");
    }
    if (in_->frames.empty()) throw ChannelClosed("peer closed the channel");
    auto bytes = std::move(in_->frames.front());
    in_->frames.pop_front();
    lock.unlock();
    return decode(bytes);
}

void LoopbackChannel::close() {
    for (auto* q : {in_.get(), out_.get()}) {
        std::lock_guard lock(q->mu);
        q->closed = true;
        q->cv.notify_all();
    }
}

// ---------------------------------------------------------------------------------------------

namespace {

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

void set_deadline(int fd, std::chrono::milliseconds deadline) {
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(deadline.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((deadline.count() % 1000) * 1000);
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

TcpChannel::TcpChannel(int fd, std::chrono::milliseconds deadline) : fd_(fd) { set_deadline(fd_, deadline); }

void TcpChannel::close() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

TcpChannel::~TcpChannel() {
    if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<TcpChannel> TcpChannel::connect(const std::string& host, std::uint16_t port,
                                                std::chrono::milliseconds deadline) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port);
    if (int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
        throw ChannelClosed("cannot resolve " + host + ": " + ::gai_strerror(rc));
    }
    int fd = -1;
    for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
        fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw ChannelClosed("cannot connect to " + host + ":" + service);
    return std::make_unique<TcpChannel>(fd, deadline);
}

void TcpChannel::send(const Message& m) {
    const auto bytes = encode(m);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw ChannelClosed(errno_text("send failed"));
        }
        off += static_cast<std::size_t>(n);
    }
}

void TcpChannel::read_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t off = 0;
    while (off < n) {
        const ssize_t r = ::recv(fd_, dst + off, n - off, 0);
        if (r == 0) throw ChannelClosed(off == 0 ? "peer closed the connection" : "truncated frame");
        if (r < 0) {
            if (errno == EINTR) continue;
            if (errno == EAGAIN || errno == EWOULDBLOCK) throw ChannelClosed("read deadline expired");
            throw ChannelClosed(errno_text("recv failed"));
        }
        off += static_cast<std::size_t>(r);
    }
}

Message TcpChannel::receive() {
    std::uint8_t prefix[4];
    read_exact(prefix, 4);
    const std::uint32_t n = read_be32(prefix);
    if (n > kMaxPayload) throw DecodeError(DecodeErrorKind::LengthMismatch, "frame length exceeds limit");
    std::string payload(n, '\0');
    read_exact(reinterpret_cast<std::uint8_t*>(payload.data()), n);
    return decode_payload(payload);
}

TcpListener::TcpListener(std::uint16_t port, const std::string& bind_address) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw std::runtime_error(errno_text("socket"));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, bind_address.c_str(), &addr.sin_addr) != 1) {
        ::close(fd_);
        throw std::invalid_argument("bad bind address: " + bind_address);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 1) != 0) {
        const std::string msg = errno_text("bind/listen");
        ::close(fd_);
        throw std::runtime_error(msg);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { ::close(fd_); }

std::unique_ptr<TcpChannel> TcpListener::accept(std::chrono::milliseconds deadline) {
    for (;;) {
        const int fd = ::accept(fd_, nullptr, nullptr);
        if (fd >= 0) return std::make_unique<TcpChannel>(fd, deadline);
        if (errno != EINTR) throw std::runtime_error(errno_text("accept"));
    }
}

// ---------------------------------------------------------------------------------------------

namespace {

Action checked_action(const Message& m, const FrequencyTable& table) {
    const auto& act = std::get<Act>(m);
    const Action a{act.cpu_level, act.gpu_level};
    try {
        action_to_index(a, table);
    } catch (const DomainError& e) {
        throw ProtocolError(std::string("invalid action: ") + e.what());
    }
    return a;
}

}  // namespace

DeviceSessionStats serve_device(Channel& channel, SimulatedDevice& device, const std::string& profile_name,
                                long frames) {
    SessionStateMachine machine;
    DeviceSessionStats stats;
    auto send = [&](const Message& m) {
        machine.accept(m);
        channel.send(m);
    };
    auto receive = [&] {
        Message m = channel.receive();
        machine.accept(m);
        return m;
    };

    send(Hello{profile_name});
    std::optional<FrameDone> pending;
    for (long f = 0; f < frames; ++f) {
        send(Obs{device.frame_start(), pending});
        pending.reset();
        std::optional<Message> reply;
        try {
            reply = receive();
        } catch (const ChannelClosed&) {
            // The agent may hang up while a frame-start observation is outstanding.
            stats.agent_ended = true;
            return stats;
        }
        const Observation mid = device.after_rpn(checked_action(*reply, device.table()));
        send(Obs{mid, std::nullopt});
        const FrameTrace trace = device.finish_frame(checked_action(receive(), device.table()));
        pending = frame_done_from(trace);
        ++stats.frames;
    }
    if (pending) send(*pending);
    send(Bye{});
    return stats;
}

AgentSessionStats serve_agent(Channel& channel, Governor& governor, const LatencyConstraint& budget) {
    SessionStateMachine machine;
    AgentSessionStats stats;
    auto receive = [&] {
        Message m = channel.receive();
        machine.accept(m);
        return m;
    };
    auto send = [&](const Message& m) {
        machine.accept(m);
        channel.send(m);
    };

    receive();  // Hello; anything else is rejected by the state machine
    Action first{};
    FrameTrace trace;
    auto record = [&](const FrameDone& d) {
        stats.results.push_back(d);
        trace.frame_id = stats.frames;
        trace.stage1_ms = d.stage1_ms;
        trace.stage2_ms = d.stage2_ms;
        trace.total_ms = d.total_ms;
        trace.proposals = d.proposals;
        trace.cpu_temp = d.cpu_temp;
        trace.gpu_temp = d.gpu_temp;
        governor.frame_done(trace);
    };
    for (;;) {
        Message m = receive();
        if (std::holds_alternative<Bye>(m)) return stats;
        if (const auto* done = std::get_if<FrameDone>(&m)) {
            record(*done);
            continue;
        }
        const auto& obs = std::get<Obs>(m);
        if (obs.frame_done) record(*obs.frame_done);
        Action a;
        if (obs.observation.stage == Stage::FrameStart) {
            a = first = governor.first(obs.observation, budget);
            trace.first = a;
        } else {
            a = governor.second(obs.observation, first, budget);
            trace.second = a;
            ++stats.frames;
        }
        send(Act{a.cpu_level, a.gpu_level});
    }
}

// ---------------------------------------------------------------------------------------------

RemoteDevice::RemoteDevice(Channel& channel, FrequencyTable table, LatencyConstraint budget)
    : channel_(channel), table_(std::move(table)), budget_(budget) {
    Message hello = receive();
    device_profile_ = std::get<Hello>(hello).device_profile;
}

Message RemoteDevice::receive() {
    if (ended_) throw ChannelClosed("session has ended");
    Message m = channel_.receive();
    machine_.accept(m);
    if (std::holds_alternative<Bye>(m)) {
        ended_ = true;
        throw EnvironmentEnded("device ended the session");
    }
    return m;
}

Observation RemoteDevice::frame_start() {
    if (pending_start_) {
        Observation o = *pending_start_;
        pending_start_.reset();
        return o;
    }
    Message m = receive();
    return std::get<Obs>(m).observation;
}

Observation RemoteDevice::after_rpn(const Action& first) {
    first_ = first;
    const Message act = Act{first.cpu_level, first.gpu_level};
    machine_.accept(act);
    channel_.send(act);
    return std::get<Obs>(receive()).observation;
}

FrameTrace RemoteDevice::finish_frame(const Action& second) {
    const Message act = Act{second.cpu_level, second.gpu_level};
    machine_.accept(act);
    channel_.send(act);

    // The result arrives either on the next frame-start Obs or standalone before Bye.
    Message m = receive();
    FrameDone done;
    if (auto* obs = std::get_if<Obs>(&m)) {
        if (!obs->frame_done) throw ProtocolError("frame-start observation without the previous frame's result");
        done = *obs->frame_done;
        pending_start_ = obs->observation;
    } else {
        done = std::get<FrameDone>(m);
    }
    FrameTrace trace;
    trace.frame_id = frame_++;
    trace.proposals = done.proposals;
    trace.stage1_ms = done.stage1_ms;
    trace.stage2_ms = done.stage2_ms;
    trace.total_ms = done.total_ms;
    trace.first = first_;
    trace.second = second;
    trace.cpu_temp = trace.max_cpu_temp = done.cpu_temp;
    trace.gpu_temp = trace.max_gpu_temp = done.gpu_temp;
    return trace;
}

void RemoteDevice::close() {
    if (ended_) return;
    ended_ = true;
    // Bye is only legal at a frame boundary; mid-frame the connection is simply dropped.
    SessionStateMachine probe = machine_;
    try {
        probe.accept(Token::Bye);
        channel_.send(Bye{});
    } catch (const EnvironmentClosed&) {
    }
    channel_.close();
}

}  // namespace sds::protocol
