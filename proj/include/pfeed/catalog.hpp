#pragma once

// Catalog items, customer events and the relation vocabulary shared by every stage.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pfeed {

/// How a query item led to a purchase.
enum class Relation : std::uint8_t { view = 0, buy = 1 };

std::string_view to_string(Relation r);
Relation parse_relation(std::string_view s);

enum class EventType : std::uint8_t { view = 0, buy = 1 };

std::string_view to_string(EventType e);
EventType parse_event_type(std::string_view s);
inline Relation relation_of(EventType e) { return e == EventType::view ? Relation::view : Relation::buy; }

struct Item {
  std::string id;
  std::string title;
  std::vector<std::string> category_path;
  bool deal = false;
  std::int64_t release_date = 0;  // days since epoch
  double popularity = 0;

  /// Category key: the path joined with " > ".
  std::string category() const;
};

/// Text fed to the tokenizer: title, then the category path.
std::string metadata_text(const Item& item);

class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<Item> items);

  const std::vector<Item>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const Item& at(std::size_t index) const { return items_.at(index); }
  std::optional<std::size_t> index_of(std::string_view id) const;
  const Item* find(std::string_view id) const;
  std::vector<std::string> ids() const;

 private:
  std::vector<Item> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Event {
  std::string customer_id;
  std::string item_id;
  EventType type = EventType::view;
  std::int64_t timestamp = 0;  // epoch seconds
  std::string session_id;
};

// Tab-separated text formats. Lines starting with '#' are comments.
//   catalog: item_id  title  category_path(" > ")  deal(0/1)  release_date  popularity
//   events:  customer_id  item_id  view|buy  timestamp  session_id
Catalog read_catalog(const std::filesystem::path& path);
void write_catalog(const std::filesystem::path& path, const Catalog& catalog, std::string_view header = {});
std::vector<Event> read_events(const std::filesystem::path& path);
void write_events(const std::filesystem::path& path, const std::vector<Event>& events, std::string_view header = {});

}  // namespace pfeed
