#include "pfeed/catalog.hpp"

#include <ostream>

#include "pfeed/errors.hpp"
#include "pfeed/io.hpp"

namespace pfeed {

std::string_view to_string(Relation r) { return r == Relation::view ? "view" : "buy"; }

Relation parse_relation(std::string_view s) {
  if (s == "view") return Relation::view;
  if (s == "buy") return Relation::buy;
  throw InputError("unknown relation '" + std::string(s) + "'");
}

std::string_view to_string(EventType e) { return e == EventType::view ? "view" : "buy"; }

EventType parse_event_type(std::string_view s) {
  if (s == "view") return EventType::view;
  if (s == "buy") return EventType::buy;
  throw InputError("unknown event type '" + std::string(s) + "'");
}

std::string Item::category() const { return io::join(category_path, " > "); }

std::string metadata_text(const Item& item) { return item.title + " | " + item.category(); }

Catalog::Catalog(std::vector<Item> items) : items_(std::move(items)) {
  index_.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!index_.emplace(items_[i].id, i).second) throw InputError("duplicate item id '" + items_[i].id + "'");
  }
}

std::optional<std::size_t> Catalog::index_of(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const Item* Catalog::find(std::string_view id) const {
  auto idx = index_of(id);
  return idx ? &items_[*idx] : nullptr;
}

std::vector<std::string> Catalog::ids() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& item : items_) out.push_back(item.id);
  return out;
}

Catalog read_catalog(const std::filesystem::path& path) {
  std::vector<Item> items;
  io::for_each_record(path, [&](const std::vector<std::string_view>& f, std::size_t line) {
    if (f.size() != 6) {
      throw InputError(path.string() + ":" + std::to_string(line) + ": expected 6 catalog fields");
    }
    Item item;
    item.id = f[0];
    item.title = f[1];
    for (auto part : io::split(f[2], '>')) {
      while (!part.empty() && part.front() == ' ') part.remove_prefix(1);
      while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
      if (!part.empty()) item.category_path.emplace_back(part);
    }
    item.deal = io::parse_int(f[3]) != 0;
    item.release_date = io::parse_int(f[4]);
    item.popularity = io::parse_double(f[5]);
    items.push_back(std::move(item));
  });
  return Catalog(std::move(items));
}

void write_catalog(const std::filesystem::path& path, const Catalog& catalog, std::string_view header) {
  io::write_atomic(path, [&](std::ostream& os) {
    if (!header.empty()) os << "# " << header << '\n';
    os << "# item_id\ttitle\tcategory_path\tdeal\trelease_date\tpopularity\n";
    for (const auto& item : catalog.items()) {
      os << item.id << '\t' << item.title << '\t' << item.category() << '\t' << (item.deal ? 1 : 0) << '\t'
         << item.release_date << '\t' << item.popularity << '\n';
    }
  });
}

std::vector<Event> read_events(const std::filesystem::path& path) {
  std::vector<Event> events;
  io::for_each_record(path, [&](const std::vector<std::string_view>& f, std::size_t line) {
    if (f.size() != 5) throw InputError(path.string() + ":" + std::to_string(line) + ": expected 5 event fields");
    Event e;
    e.customer_id = f[0];
    e.item_id = f[1];
    e.type = parse_event_type(f[2]);
    e.timestamp = io::parse_int(f[3]);
    if (e.timestamp < 0) throw InputError(path.string() + ":" + std::to_string(line) + ": negative timestamp");
    e.session_id = f[4];
    events.push_back(std::move(e));
  });
  return events;
}

void write_events(const std::filesystem::path& path, const std::vector<Event>& events, std::string_view header) {
  io::write_atomic(path, [&](std::ostream& os) {
    if (!header.empty()) os << "# " << header << '\n';
    os << "# customer_id\titem_id\tevent_type\ttimestamp\tsession_id\n";
    for (const auto& e : events) {
      os << e.customer_id << '\t' << e.item_id << '\t' << to_string(e.type) << '\t' << e.timestamp << '\t'
         << e.session_id << '\n';
    }
  });
}

}  // namespace pfeed
