#pragma once

// Segmented append-only message log.
//
// Record frame (all integers little-endian):
//   u32 body_length | u32 crc32c(body) | body
//   body = u64 timestamp_ms | u16 topic_length | topic | payload
//
// Segments are named log-<first_offset>.seg and roll over once they exceed
// the configured size. Offsets are not stored; they follow from the segment
// name and the record position.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wsn::persistence {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::size_t kMaxPayloadBytes = 256 * 1024;
inline constexpr std::uint64_t kDefaultSegmentBytes = 64ull * 1024 * 1024;
inline constexpr std::size_t kFrameHeaderBytes = 8;
inline constexpr std::size_t kBodyPrefixBytes = 10;

struct LogRecord {
    std::uint64_t offset = 0;
    std::uint64_t timestamp_ms = 0;
    std::string topic;
    Bytes payload;

    bool operator==(const LogRecord&) const = default;
};

class AppendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ReplayError : public std::runtime_error {
public:
    ReplayError(std::uint64_t offset, const std::string& what)
        : std::runtime_error(what), offset_(offset) {}
    // Offset of the first record that failed verification.
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

std::uint32_t crc32c(std::span<const std::uint8_t> data);

Bytes encode_record(std::uint64_t timestamp_ms, std::string_view topic, std::span<const std::uint8_t> payload);

enum class Durability {
    Write, // handed to the kernel before append returns; survives process death
    Fsync, // fsync after every append; survives power loss
};

struct LogOptions {
    std::uint64_t segment_bytes = kDefaultSegmentBytes;
    Durability durability = Durability::Write;
};

class MessageLog {
public:
    // Opens or creates the log in `dir`, verifying every record. A torn
    // record at the very end of the newest segment is truncated away;
    // damage anywhere else throws ReplayError.
    static std::unique_ptr<MessageLog> open(const std::filesystem::path& dir, LogOptions options = {});

    MessageLog(const MessageLog&) = delete;
    MessageLog& operator=(const MessageLog&) = delete;
    ~MessageLog();

    std::uint64_t append(std::string_view topic, std::span<const std::uint8_t> payload,
                         std::uint64_t timestamp_ms);

    // Records [from_offset, next_offset()) read back from disk.
    std::vector<LogRecord> replay(std::uint64_t from_offset = 0) const;
    void replay(std::uint64_t from_offset, const std::function<void(const LogRecord&)>& visit) const;

    // Up to `limit` newest records on exactly `topic`, oldest first.
    std::vector<LogRecord> history(std::string_view topic, std::size_t limit) const;
    std::optional<LogRecord> latest(std::string_view topic) const;

    std::uint64_t next_offset() const;
    std::size_t size() const { return static_cast<std::size_t>(next_offset() - base_offset_); }
    bool empty() const { return size() == 0; }
    std::vector<std::string> topics() const;
    std::uint64_t count(std::string_view topic) const;

    void flush();
    const std::filesystem::path& directory() const { return dir_; }
    std::vector<std::filesystem::path> segment_paths() const;

    // Reads a log directory without opening it for writing. Same recovery
    // semantics as open(), but torn tails are skipped rather than truncated.
    static std::vector<LogRecord> read_all(const std::filesystem::path& dir);

private:
    struct Segment {
        std::uint64_t first_offset = 0;
        std::filesystem::path path;
        int fd = -1;
        std::uint64_t bytes = 0;
    };
    struct Location {
        std::uint32_t segment;
        std::uint64_t position;
        std::uint32_t frame_bytes;
    };

    MessageLog() = default;
    void close_all() noexcept;
    void roll_segment(std::uint64_t first_offset);
    LogRecord read_at(std::uint64_t offset) const;

    std::filesystem::path dir_;
    LogOptions options_;
    std::vector<Segment> segments_;
    std::uint64_t base_offset_ = 0;
    std::vector<Location> index_;
    std::map<std::string, std::vector<std::uint64_t>, std::less<>> by_topic_;

    std::mutex write_mutex_;
    mutable std::shared_mutex index_mutex_;
};

} // namespace wsn::persistence
