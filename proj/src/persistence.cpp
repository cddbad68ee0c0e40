#include "wsn/persistence.hpp"

#include <boost/crc.hpp>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fcntl.h>
#include <unistd.h>

namespace wsn::persistence {

namespace fs = std::filesystem;

namespace {

void put_le(Bytes& out, std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int width) {
    std::uint64_t v = 0;
    for (int i = width - 1; i >= 0; --i)
        v = (v << 8) | p[i];
    return v;
}

std::string segment_name(std::uint64_t first_offset) {
    return "log-" + std::to_string(first_offset) + ".seg";
}

std::optional<std::uint64_t> parse_segment_name(const std::string& name) {
    constexpr std::string_view prefix = "log-";
    constexpr std::string_view suffix = ".seg";
    if (name.size() <= prefix.size() + suffix.size() || !name.starts_with(prefix) || !name.ends_with(suffix))
        return std::nullopt;
    std::uint64_t v = 0;
    const char* first = name.data() + prefix.size();
    const char* last = name.data() + name.size() - suffix.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last)
        return std::nullopt;
    return v;
}

std::vector<std::pair<std::uint64_t, fs::path>> list_segments(const fs::path& dir) {
    std::vector<std::pair<std::uint64_t, fs::path>> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file())
            continue;
        if (auto first = parse_segment_name(entry.path().filename().string()))
            out.emplace_back(*first, entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

Bytes read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot read " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct ScannedRecord {
    std::uint64_t position;
    std::uint32_t frame_bytes;
    std::uint64_t timestamp_ms;
    std::string_view topic;
    std::span<const std::uint8_t> payload;
};

struct DecodedBody {
    std::uint64_t timestamp_ms;
    std::string_view topic;
    std::span<const std::uint8_t> payload;
};

std::optional<DecodedBody> decode_body(std::span<const std::uint8_t> body) {
    if (body.size() < kBodyPrefixBytes)
        return std::nullopt;
    const auto ts = get_le(body.data(), 8);
    const auto topic_len = static_cast<std::size_t>(get_le(body.data() + 8, 2));
    if (kBodyPrefixBytes + topic_len > body.size())
        return std::nullopt;
    std::string_view topic(reinterpret_cast<const char*>(body.data() + kBodyPrefixBytes), topic_len);
    return DecodedBody{ts, topic, body.subspan(kBodyPrefixBytes + topic_len)};
}

// Walks the frames of one segment. Returns the number of bytes that hold
// intact records. An incomplete frame at the end is reported by leaving
// `torn` set; a complete frame with a bad checksum or layout throws.
template <class Visit>
std::uint64_t scan_segment(std::span<const std::uint8_t> data, std::uint64_t first_offset, bool& torn,
                           Visit&& visit) {
    std::uint64_t pos = 0;
    std::uint64_t offset = first_offset;
    torn = false;
    while (pos < data.size()) {
        const auto left = data.size() - pos;
        if (left < kFrameHeaderBytes) {
            torn = true;
            break;
        }
        const auto body_len = get_le(data.data() + pos, 4);
        const auto stored_crc = static_cast<std::uint32_t>(get_le(data.data() + pos + 4, 4));
        // A damaged frame that runs to the end of the data is what a crash
        // mid-write leaves behind; anything after it means real corruption.
        const bool reaches_end = left - kFrameHeaderBytes <= body_len;
        if (left - kFrameHeaderBytes < body_len) {
            torn = true;
            break;
        }
        auto body = data.subspan(pos + kFrameHeaderBytes, body_len);
        std::optional<DecodedBody> decoded;
        const char* problem = nullptr;
        if (body_len < kBodyPrefixBytes)
            problem = " has an impossible length";
        else if (crc32c(body) != stored_crc)
            problem = " failed its checksum";
        else if (!(decoded = decode_body(body)))
            problem = " has a malformed body";
        if (problem) {
            if (reaches_end) {
                torn = true;
                break;
            }
            throw ReplayError(offset, "record " + std::to_string(offset) + problem);
        }
        visit(offset, ScannedRecord{pos, static_cast<std::uint32_t>(kFrameHeaderBytes + body_len),
                                    decoded->timestamp_ms, decoded->topic, decoded->payload});
        pos += kFrameHeaderBytes + body_len;
        ++offset;
    }
    return pos;
}

void write_all(int fd, const Bytes& frame) {
    std::size_t done = 0;
    while (done < frame.size()) {
        const auto n = ::write(fd, frame.data() + done, frame.size() - done);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            throw AppendError(std::string("log write failed: ") + std::strerror(errno));
        }
        done += static_cast<std::size_t>(n);
    }
}

} // namespace

std::uint32_t crc32c(std::span<const std::uint8_t> data) {
    boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true> crc;
    crc.process_bytes(data.data(), data.size());
    return crc.checksum();
}

Bytes encode_record(std::uint64_t timestamp_ms, std::string_view topic, std::span<const std::uint8_t> payload) {
    Bytes body;
    body.reserve(kBodyPrefixBytes + topic.size() + payload.size());
    put_le(body, timestamp_ms, 8);
    put_le(body, topic.size(), 2);
    body.insert(body.end(), topic.begin(), topic.end());
    body.insert(body.end(), payload.begin(), payload.end());

    Bytes frame;
    frame.reserve(kFrameHeaderBytes + body.size());
    put_le(frame, body.size(), 4);
    put_le(frame, crc32c(body), 4);
    frame.insert(frame.end(), body.begin(), body.end());
    return frame;
}

std::unique_ptr<MessageLog> MessageLog::open(const fs::path& dir, LogOptions options) {
    fs::create_directories(dir);
    std::unique_ptr<MessageLog> log(new MessageLog());
    log->dir_ = dir;
    log->options_ = options;

    const auto found = list_segments(dir);
    std::uint64_t expected = found.empty() ? 0 : found.front().first;
    log->base_offset_ = expected;
    for (std::size_t i = 0; i < found.size(); ++i) {
        const auto& [first, path] = found[i];
        if (first != expected)
            throw ReplayError(expected, "segment " + path.filename().string() + " does not continue offset " +
                                            std::to_string(expected));
        const auto data = read_file(path);
        const bool newest = i + 1 == found.size();
        bool torn = false;
        std::uint64_t in_segment = 0;
        const auto seg_index = static_cast<std::uint32_t>(i);
        const auto good = scan_segment(data, first, torn, [&](std::uint64_t offset, const ScannedRecord& r) {
            log->index_.push_back(Location{seg_index, r.position, r.frame_bytes});
            log->by_topic_[std::string(r.topic)].push_back(offset);
            ++in_segment;
        });
        if (torn && !newest)
            throw ReplayError(first + in_segment, "segment " + path.filename().string() + " ends mid-record");
        if (torn)
            fs::resize_file(path, good);
        expected = first + in_segment;

        const int fd = ::open(path.c_str(), O_RDWR | O_APPEND | O_CLOEXEC);
        if (fd < 0)
            throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
        log->segments_.push_back(Segment{first, path, fd, good});
    }
    if (log->segments_.empty())
        log->roll_segment(0);
    return log;
}

MessageLog::~MessageLog() { close_all(); }

void MessageLog::close_all() noexcept {
    for (auto& s : segments_) {
        if (s.fd >= 0)
            ::close(s.fd);
        s.fd = -1;
    }
}

void MessageLog::roll_segment(std::uint64_t first_offset) {
    const auto path = dir_ / segment_name(first_offset);
    const int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0)
        throw AppendError("cannot create segment " + path.string() + ": " + std::strerror(errno));
    std::unique_lock lock(index_mutex_);
    segments_.push_back(Segment{first_offset, path, fd, 0});
}

std::uint64_t MessageLog::append(std::string_view topic, std::span<const std::uint8_t> payload,
                                 std::uint64_t timestamp_ms) {
    if (payload.size() > kMaxPayloadBytes)
        throw AppendError("payload above 256 KiB");
    if (topic.empty() || topic.size() > 0xFFFF)
        throw AppendError("topic length out of range");

    std::lock_guard guard(write_mutex_);
    const auto offset = next_offset();
    if (segments_.back().bytes > 0 && segments_.back().bytes >= options_.segment_bytes)
        roll_segment(offset);

    auto& seg = segments_.back();
    const auto frame = encode_record(timestamp_ms, topic, payload);
    try {
        write_all(seg.fd, frame);
    } catch (const AppendError&) {
        // Drop whatever part of the frame made it out so the tail stays clean.
        [[maybe_unused]] const int rc = ::ftruncate(seg.fd, static_cast<off_t>(seg.bytes));
        throw;
    }
    if (options_.durability == Durability::Fsync && ::fsync(seg.fd) != 0)
        throw AppendError(std::string("fsync failed: ") + std::strerror(errno));

    const auto position = seg.bytes;
    seg.bytes += frame.size();

    std::unique_lock lock(index_mutex_);
    index_.push_back(Location{static_cast<std::uint32_t>(segments_.size() - 1), position,
                              static_cast<std::uint32_t>(frame.size())});
    auto it = by_topic_.find(topic);
    if (it == by_topic_.end())
        it = by_topic_.emplace(std::string(topic), std::vector<std::uint64_t>{}).first;
    it->second.push_back(offset);
    return offset;
}

std::uint64_t MessageLog::next_offset() const {
    std::shared_lock lock(index_mutex_);
    return base_offset_ + index_.size();
}

LogRecord MessageLog::read_at(std::uint64_t offset) const {
    Location loc;
    int fd;
    {
        std::shared_lock lock(index_mutex_);
        loc = index_.at(offset - base_offset_);
        fd = segments_[loc.segment].fd;
    }
    Bytes frame(loc.frame_bytes);
    std::size_t done = 0;
    while (done < frame.size()) {
        const auto n = ::pread(fd, frame.data() + done, frame.size() - done,
                               static_cast<off_t>(loc.position + done));
        if (n < 0 && errno == EINTR)
            continue;
        if (n <= 0)
            throw ReplayError(offset, "record " + std::to_string(offset) + " could not be read back");
        done += static_cast<std::size_t>(n);
    }
    const auto body_len = get_le(frame.data(), 4);
    const auto stored_crc = static_cast<std::uint32_t>(get_le(frame.data() + 4, 4));
    auto body = std::span<const std::uint8_t>(frame).subspan(kFrameHeaderBytes);
    if (body_len != body.size() || crc32c(body) != stored_crc)
        throw ReplayError(offset, "record " + std::to_string(offset) + " failed its checksum");
    auto decoded = decode_body(body);
    if (!decoded)
        throw ReplayError(offset, "record " + std::to_string(offset) + " has a malformed body");
    return LogRecord{offset, decoded->timestamp_ms, std::string(decoded->topic),
                     Bytes(decoded->payload.begin(), decoded->payload.end())};
}

void MessageLog::replay(std::uint64_t from_offset, const std::function<void(const LogRecord&)>& visit) const {
    const auto end = next_offset();
    if (from_offset < base_offset_ || from_offset > end)
        throw std::out_of_range("replay offset " + std::to_string(from_offset) + " outside the log");
    for (auto offset = from_offset; offset < end; ++offset)
        visit(read_at(offset));
}

std::vector<LogRecord> MessageLog::replay(std::uint64_t from_offset) const {
    std::vector<LogRecord> out;
    replay(from_offset, [&](const LogRecord& r) { out.push_back(r); });
    return out;
}

std::vector<LogRecord> MessageLog::history(std::string_view topic, std::size_t limit) const {
    std::vector<std::uint64_t> offsets;
    {
        std::shared_lock lock(index_mutex_);
        auto it = by_topic_.find(topic);
        if (it == by_topic_.end() || limit == 0)
            return {};
        const auto& all = it->second;
        const auto take = std::min(limit, all.size());
        offsets.assign(all.end() - static_cast<std::ptrdiff_t>(take), all.end());
    }
    std::vector<LogRecord> out;
    out.reserve(offsets.size());
    for (auto offset : offsets)
        out.push_back(read_at(offset));
    return out;
}

std::optional<LogRecord> MessageLog::latest(std::string_view topic) const {
    auto h = history(topic, 1);
    if (h.empty())
        return std::nullopt;
    return std::move(h.front());
}

std::vector<std::string> MessageLog::topics() const {
    std::shared_lock lock(index_mutex_);
    std::vector<std::string> out;
    out.reserve(by_topic_.size());
    for (const auto& [topic, _] : by_topic_)
        out.push_back(topic);
    return out;
}

std::uint64_t MessageLog::count(std::string_view topic) const {
    std::shared_lock lock(index_mutex_);
    auto it = by_topic_.find(topic);
    return it == by_topic_.end() ? 0 : it->second.size();
}

void MessageLog::flush() {
    std::lock_guard guard(write_mutex_);
    for (auto& s : segments_)
        ::fsync(s.fd);
}

std::vector<fs::path> MessageLog::segment_paths() const {
    std::shared_lock lock(index_mutex_);
    std::vector<fs::path> out;
    for (const auto& s : segments_)
        out.push_back(s.path);
    return out;
}

std::vector<LogRecord> MessageLog::read_all(const fs::path& dir) {
    std::vector<LogRecord> out;
    if (!fs::exists(dir))
        return out;
    const auto found = list_segments(dir);
    std::uint64_t expected = found.empty() ? 0 : found.front().first;
    for (std::size_t i = 0; i < found.size(); ++i) {
        const auto& [first, path] = found[i];
        if (first != expected)
            throw ReplayError(expected, "segment " + path.filename().string() + " does not continue the log");
        const auto data = read_file(path);
        bool torn = false;
        std::uint64_t in_segment = 0;
        scan_segment(data, first, torn, [&](std::uint64_t offset, const ScannedRecord& r) {
            out.push_back(LogRecord{offset, r.timestamp_ms, std::string(r.topic),
                                    Bytes(r.payload.begin(), r.payload.end())});
            ++in_segment;
        });
        expected = first + in_segment;
        if (torn && i + 1 != found.size())
            throw ReplayError(expected, "segment " + path.filename().string() + " ends mid-record");
    }
    return out;
}

} // namespace wsn::persistence
