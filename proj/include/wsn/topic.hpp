#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace wsn {

// A concrete publish topic: non-empty, no '+' or '#', no NUL, at most 65535 bytes.
class TopicName {
public:
    static std::optional<TopicName> parse(std::string_view s);
    static bool valid(std::string_view s);

    const std::string& str() const { return value_; }
    std::vector<std::string_view> levels() const;

    auto operator<=>(const TopicName&) const = default;

private:
    explicit TopicName(std::string s) : value_(std::move(s)) {}
    std::string value_;
};

// A subscription pattern. '+' must occupy a whole level; '#' must be the
// whole final level.
class TopicFilter {
public:
    static std::optional<TopicFilter> parse(std::string_view s);
    static bool valid(std::string_view s);

    const std::string& str() const { return value_; }
    std::vector<std::string_view> levels() const;

    auto operator<=>(const TopicFilter&) const = default;

private:
    explicit TopicFilter(std::string s) : value_(std::move(s)) {}
    std::string value_;
};

std::vector<std::string_view> split_levels(std::string_view s);

// '+' matches exactly one level, '#' matches zero or more trailing levels
// (including the parent level itself), and a filter starting with a
// wildcard never matches a topic whose first level starts with '$'.
bool topic_matches(const TopicFilter& filter, const TopicName& topic);
bool topic_matches(std::string_view filter, std::string_view topic);

// Level trie from filters to subscriber ids. A subscriber holding several
// overlapping filters is reported once per match.
class SubscriptionTrie {
public:
    using SubscriberId = std::uint64_t;

    SubscriptionTrie();
    ~SubscriptionTrie();
    SubscriptionTrie(SubscriptionTrie&&) noexcept;
    SubscriptionTrie& operator=(SubscriptionTrie&&) noexcept;

    // Returns true when the (filter, subscriber) pair is new.
    bool insert(const TopicFilter& filter, SubscriberId who, std::uint8_t qos = 0);
    bool erase(const TopicFilter& filter, SubscriberId who);
    void erase_all(SubscriberId who, const std::vector<TopicFilter>& filters);

    // Matching subscribers with the highest granted QoS among their matching filters.
    std::map<SubscriberId, std::uint8_t> match(const TopicName& topic) const;

    std::size_t size() const { return entries_; }

private:
    struct Node;
    std::unique_ptr<Node> root_;
    std::size_t entries_ = 0;
};

} // namespace wsn
