#include "wsn/topic.hpp"

#include "wsn/mqtt.hpp"

namespace wsn {

std::vector<std::string_view> split_levels(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto slash = s.find('/', start);
        if (slash == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, slash - start));
        start = slash + 1;
    }
}

bool TopicName::valid(std::string_view s) {
    if (s.empty() || s.size() > 0xFFFF)
        return false;
    if (s.find_first_of("+#") != std::string_view::npos)
        return false;
    return mqtt::valid_mqtt_utf8(s);
}

std::optional<TopicName> TopicName::parse(std::string_view s) {
    if (!valid(s))
        return std::nullopt;
    return TopicName(std::string(s));
}

std::vector<std::string_view> TopicName::levels() const { return split_levels(value_); }

bool TopicFilter::valid(std::string_view s) {
    if (s.empty() || s.size() > 0xFFFF || !mqtt::valid_mqtt_utf8(s))
        return false;
    const auto levels = split_levels(s);
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const auto level = levels[i];
        if (level == "#") {
            if (i + 1 != levels.size())
                return false;
        } else if (level != "+" && level.find_first_of("+#") != std::string_view::npos) {
            return false;
        }
    }
    return true;
}

std::optional<TopicFilter> TopicFilter::parse(std::string_view s) {
    if (!valid(s))
        return std::nullopt;
    return TopicFilter(std::string(s));
}

std::vector<std::string_view> TopicFilter::levels() const { return split_levels(value_); }

namespace {

bool starts_with_wildcard(std::string_view filter) {
    return !filter.empty() && (filter.front() == '+' || filter.front() == '#');
}

bool levels_match(const std::vector<std::string_view>& f, const std::vector<std::string_view>& t) {
    std::size_t i = 0;
    for (; i < f.size(); ++i) {
        if (f[i] == "#")
            return true;
        if (i >= t.size())
            return false;
        if (f[i] != "+" && f[i] != t[i])
            return false;
    }
    return i == t.size();
}

} // namespace

bool topic_matches(std::string_view filter, std::string_view topic) {
    if (!topic.empty() && topic.front() == '$' && starts_with_wildcard(filter))
        return false;
    return levels_match(split_levels(filter), split_levels(topic));
}

bool topic_matches(const TopicFilter& filter, const TopicName& topic) {
    return topic_matches(std::string_view(filter.str()), std::string_view(topic.str()));
}

struct SubscriptionTrie::Node {
    std::map<std::string, std::unique_ptr<Node>, std::less<>> children;
    std::map<SubscriberId, std::uint8_t> subscribers;

    bool empty() const { return children.empty() && subscribers.empty(); }
};

SubscriptionTrie::SubscriptionTrie() : root_(std::make_unique<Node>()) {}
SubscriptionTrie::~SubscriptionTrie() = default;
SubscriptionTrie::SubscriptionTrie(SubscriptionTrie&&) noexcept = default;
SubscriptionTrie& SubscriptionTrie::operator=(SubscriptionTrie&&) noexcept = default;

bool SubscriptionTrie::insert(const TopicFilter& filter, SubscriberId who, std::uint8_t qos) {
    Node* node = root_.get();
    for (auto level : filter.levels()) {
        auto it = node->children.find(level);
        if (it == node->children.end())
            it = node->children.emplace(std::string(level), std::make_unique<Node>()).first;
        node = it->second.get();
    }
    auto [it, inserted] = node->subscribers.insert_or_assign(who, qos);
    if (inserted)
        ++entries_;
    return inserted;
}

bool SubscriptionTrie::erase(const TopicFilter& filter, SubscriberId who) {
    const auto levels = filter.levels();
    std::vector<Node*> path{root_.get()};
    for (auto level : levels) {
        auto it = path.back()->children.find(level);
        if (it == path.back()->children.end())
            return false;
        path.push_back(it->second.get());
    }
    if (path.back()->subscribers.erase(who) == 0)
        return false;
    --entries_;
    for (std::size_t i = levels.size(); i > 0; --i) {
        if (!path[i]->empty())
            break;
        path[i - 1]->children.erase(path[i - 1]->children.find(levels[i - 1]));
    }
    return true;
}

void SubscriptionTrie::erase_all(SubscriberId who, const std::vector<TopicFilter>& filters) {
    for (const auto& f : filters)
        erase(f, who);
}

std::map<SubscriptionTrie::SubscriberId, std::uint8_t> SubscriptionTrie::match(const TopicName& topic) const {
    std::map<SubscriberId, std::uint8_t> out;
    const auto levels = topic.levels();
    const bool dollar = topic.str().front() == '$';

    auto collect = [&](const Node& n) {
        for (const auto& [id, qos] : n.subscribers) {
            auto [it, inserted] = out.emplace(id, qos);
            if (!inserted && qos > it->second)
                it->second = qos;
        }
    };

    auto walk = [&](auto&& self, const Node& node, std::size_t depth) -> void {
        const bool wildcards_allowed = !(dollar && depth == 0);
        if (wildcards_allowed) {
            if (auto it = node.children.find("#"); it != node.children.end())
                collect(*it->second);
        }
        if (depth == levels.size()) {
            collect(node);
            return;
        }
        if (auto it = node.children.find(levels[depth]); it != node.children.end())
            self(self, *it->second, depth + 1);
        if (wildcards_allowed) {
            if (auto it = node.children.find("+"); it != node.children.end())
                self(self, *it->second, depth + 1);
        }
    };
    walk(walk, *root_, 0);
    return out;
}

} // namespace wsn
