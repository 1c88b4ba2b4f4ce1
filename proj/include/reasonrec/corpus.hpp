#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "reasonrec/common.hpp"
#include "reasonrec/tokenizer.hpp"

namespace reasonrec {

using Json = nlohmann::json;

struct CorpusConfig {
  int num_items = 500;
  int num_users = 1000;
  int latent_dim = 8;
  int num_genres = 10;
  // Raw events per user, target included.
  int min_events = 4;
  int max_events = 8;
  int max_history = 20;
  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;
  // Softmax temperature of the user's item choice over latent affinity.
  double choice_temperature = 0.3;
  double item_noise = 0.35;
  double user_noise = 0.5;
  double preference_strength = 2.0;
  double rating_noise = 0.5;
  double mean_gap_hours = 36.0;
  int context_length = 512;
  std::string category = "music";

  void validate() const;
};

struct Item {
  ItemId item_id = 0;
  std::vector<std::pair<std::string, std::string>> attributes;
  std::string title;
  std::vector<double> latent;

  bool operator==(const Item&) const = default;
};

struct Interaction {
  int user_id = 0;
  ItemId item_id = 0;
  int rating = 3;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

struct UserHistory {
  int user_id = 0;
  std::vector<Interaction> events;  // ascending timestamps, at most max_history
  ItemId target = 0;
  std::int64_t target_timestamp = 0;
  std::vector<double> latent;

  bool operator==(const UserHistory&) const = default;
};

struct Catalog {
  std::string category = "music";
  std::vector<Item> items;

  int size() const { return static_cast<int>(items.size()); }
  const Item& at(ItemId id) const { return items.at(static_cast<std::size_t>(id)); }
};

enum class Split { kTrain, kVal, kTest };

struct World {
  Catalog catalog;
  std::vector<UserHistory> train, val, test;

  const std::vector<UserHistory>& split(Split s) const {
    switch (s) {
      case Split::kTrain: return train;
      case Split::kVal: return val;
      case Split::kTest: return test;
    }
    return train;
  }
};

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train|val|test)");
}

inline std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

namespace detail {

inline constexpr std::array<std::string_view, 16> kGenres = {
    "jazz", "rock", "folk", "soul", "funk",  "pop",   "blues", "metal",
    "punk", "disco", "house", "reggae", "opera", "swing", "techno", "gospel"};
inline constexpr std::array<std::string_view, 4> kMoods = {"calm", "dark", "warm", "loud"};
inline constexpr std::array<std::string_view, 3> kFormats = {"vinyl", "cd", "tape"};

inline std::vector<double> unit_gaussian(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (auto& x : v) {
    x = normal(rng);
    norm += x * x;
  }
  norm = std::sqrt(std::max(norm, 1e-300));
  for (auto& x : v) x /= norm;
  return v;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::string zero_pad(int value, int width) {
  std::string s = std::to_string(value);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return s;
}

}  // namespace detail

inline void CorpusConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("corpus." + key + ": " + why);
  };
  if (num_items < 1) fail("num_items", "must be >= 1");
  if (num_users < 1) fail("num_users", "must be >= 1");
  if (latent_dim < 1) fail("latent_dim", "must be >= 1");
  if (num_genres < 1 || num_genres > static_cast<int>(detail::kGenres.size()))
    fail("num_genres", "must be in [1, " + std::to_string(detail::kGenres.size()) + "]");
  if (min_events < 2) fail("min_events", "must be >= 2 (one history event plus the target)");
  if (max_events < min_events) fail("max_events", "must be >= min_events");
  if (max_events > num_items) fail("max_events", "must be <= num_items (items are not repeated)");
  if (max_history < 1) fail("max_history", "must be >= 1");
  if (train_ratio < 0 || val_ratio < 0 || test_ratio < 0)
    fail("train_ratio", "split ratios must be non-negative");
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
    fail("train_ratio", "split ratios must sum to 1");
  if (!(choice_temperature > 0)) fail("choice_temperature", "must be > 0");
  if (item_noise < 0) fail("item_noise", "must be >= 0");
  if (user_noise < 0) fail("user_noise", "must be >= 0");
  if (rating_noise < 0) fail("rating_noise", "must be >= 0");
  if (!(mean_gap_hours > 0)) fail("mean_gap_hours", "must be > 0");
  if (context_length < 1) fail("context_length", "must be >= 1");
  if (category.empty()) fail("category", "must be non-empty");
  for (char c : category)
    if (!Vocabulary::is_text_char(c) || c == '\n') fail("category", "must be printable ASCII");
}

// Relative time between an event and "now": the largest two of {d, h, min},
// the leading unit integral and the second with one decimal.
inline std::string format_time_delta(std::int64_t seconds) {
  if (seconds < 0) seconds = 0;
  char buf[64];
  if (seconds >= 86400) {
    const std::int64_t days = seconds / 86400;
    const double hours = static_cast<double>(seconds % 86400) / 3600.0;
    std::snprintf(buf, sizeof buf, "%lldd %.1fh", static_cast<long long>(days), hours);
  } else if (seconds >= 3600) {
    const std::int64_t hours = seconds / 3600;
    const double minutes = static_cast<double>(seconds % 3600) / 60.0;
    std::snprintf(buf, sizeof buf, "%lldh %.1fmin", static_cast<long long>(hours), minutes);
  } else {
    std::snprintf(buf, sizeof buf, "%.1fmin", static_cast<double>(seconds) / 60.0);
  }
  return buf;
}

inline std::string user_prompt_text(const UserHistory& history, const Catalog& catalog,
                                    std::int64_t now) {
  std::string text = "<bos>Analyze in depth and finally recommend next " + catalog.category +
                     " I might purchase inside the answer tags.\n"
                     "For example, <answer> a product </answer>.\n"
                     "Below is my historical " +
                     catalog.category + " purchases and ratings (out of 5):\n";
  for (const auto& ev : history.events) {
    text += format_time_delta(now - ev.timestamp);
    text += " ago: [";
    text += catalog.at(ev.item_id).title;
    text += "] (";
    text += std::to_string(ev.rating);
    text += ")\n";
  }
  return text;
}

inline TokenSequence render_user_prompt(const UserHistory& history, const Catalog& catalog,
                                        std::int64_t now) {
  if (history.events.empty()) throw ConfigError("render_user_prompt: empty history");
  return tokenize(user_prompt_text(history, catalog, now));
}

inline TokenSequence render_user_prompt(const UserHistory& history, const Catalog& catalog) {
  return render_user_prompt(history, catalog, history.target_timestamp);
}

inline std::string item_prompt_text(const Item& item, std::string_view category) {
  std::string text = "<bos>Summarize key attributes of the following " + std::string(category) +
                     " inside <answer> and </answer>:\n";
  for (const auto& [key, value] : item.attributes) {
    text += key;
    text += ": ";
    text += value;
    text += '\n';
  }
  return text;
}

inline TokenSequence render_item_prompt(const Item& item, std::string_view category) {
  return tokenize(item_prompt_text(item, category));
}

inline std::string make_title(const std::vector<std::pair<std::string, std::string>>& attrs) {
  std::string mood, genre, code;
  for (const auto& [k, v] : attrs) {
    if (k == "mood") mood = v;
    if (k == "genre") genre = v;
    if (k == "code") code = v;
  }
  std::string title;
  for (const auto* part : {&mood, &genre, &code}) {
    if (part->empty()) continue;
    if (!title.empty()) title += ' ';
    title += *part;
  }
  if (title.empty())
    for (const auto& [k, v] : attrs) title += (title.empty() ? "" : " ") + v;
  return title;
}

// Planted-structure world: genres are directions in latent space, items sit
// near their genre direction, users lean towards a favourite and a secondary
// genre, and each user's sequence is drawn without replacement from a softmax
// over latent affinity.
inline World generate_world(const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  const Stream root = root_stream(seed, StreamTag::kWorld);
  const int dim = config.latent_dim;

  World world;
  world.catalog.category = config.category;

  std::vector<std::vector<double>> genre_dir;
  std::vector<double> mood_a, mood_b;
  {
    auto rng = root.child(0).engine();
    for (int g = 0; g < config.num_genres; ++g) genre_dir.push_back(detail::unit_gaussian(rng, dim));
    mood_a = detail::unit_gaussian(rng, dim);
    mood_b = detail::unit_gaussian(rng, dim);
  }

  const int code_width = static_cast<int>(std::to_string(std::max(config.num_items - 1, 0)).size());
  world.catalog.items.reserve(static_cast<std::size_t>(config.num_items));
  for (int i = 0; i < config.num_items; ++i) {
    auto rng = root.child(1, static_cast<std::uint64_t>(i)).engine();
    std::uniform_int_distribution<int> pick_genre(0, config.num_genres - 1);
    std::uniform_int_distribution<int> pick_format(0, static_cast<int>(detail::kFormats.size()) - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int genre = pick_genre(rng);
    Item item;
    item.item_id = i;
    item.latent = genre_dir[static_cast<std::size_t>(genre)];
    const double scale = config.item_noise / std::sqrt(static_cast<double>(dim));
    for (auto& x : item.latent) x += scale * normal(rng);
    const int mood = 2 * (detail::dot(item.latent, mood_a) > 0 ? 1 : 0) +
                     (detail::dot(item.latent, mood_b) > 0 ? 1 : 0);
    item.attributes = {
        {"genre", std::string(detail::kGenres[static_cast<std::size_t>(genre)])},
        {"mood", std::string(detail::kMoods[static_cast<std::size_t>(mood)])},
        {"format", std::string(detail::kFormats[static_cast<std::size_t>(pick_format(rng))])},
        {"code", detail::zero_pad(i, code_width)},
    };
    item.title = make_title(item.attributes);
    world.catalog.items.push_back(std::move(item));
  }

  std::vector<UserHistory> users;
  users.reserve(static_cast<std::size_t>(config.num_users));
  std::vector<double> keys(static_cast<std::size_t>(config.num_items));
  std::vector<int> order(static_cast<std::size_t>(config.num_items));
  for (int u = 0; u < config.num_users; ++u) {
    auto rng = root.child(2, static_cast<std::uint64_t>(u)).engine();
    std::uniform_int_distribution<int> pick_genre(0, config.num_genres - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const int fav = pick_genre(rng);
    int second = pick_genre(rng);
    if (config.num_genres > 1)
      while (second == fav) second = pick_genre(rng);

    UserHistory h;
    h.user_id = u;
    h.latent.assign(static_cast<std::size_t>(dim), 0.0);
    const double noise = config.user_noise / std::sqrt(static_cast<double>(dim));
    for (int k = 0; k < dim; ++k) {
      h.latent[static_cast<std::size_t>(k)] =
          config.preference_strength * (genre_dir[static_cast<std::size_t>(fav)][static_cast<std::size_t>(k)] +
                                        0.5 * genre_dir[static_cast<std::size_t>(second)][static_cast<std::size_t>(k)]) +
          noise * normal(rng);
    }

    // Gumbel-top-k: descending perturbed keys give sequential choice without
    // replacement from softmax(affinity / temperature).
    for (int i = 0; i < config.num_items; ++i) {
      const double a = detail::dot(h.latent, world.catalog.items[static_cast<std::size_t>(i)].latent);
      const double g = -std::log(-std::log(std::max(unif(rng), 1e-300)));
      keys[static_cast<std::size_t>(i)] = a / config.choice_temperature + g;
    }
    std::iota(order.begin(), order.end(), 0);
    std::uniform_int_distribution<int> pick_count(config.min_events, config.max_events);
    const int count = pick_count(rng);
    std::partial_sort(order.begin(), order.begin() + count, order.end(), [&](int a, int b) {
      const double ka = keys[static_cast<std::size_t>(a)], kb = keys[static_cast<std::size_t>(b)];
      return ka != kb ? ka > kb : a < b;
    });

    std::exponential_distribution<double> gap(1.0 / (config.mean_gap_hours * 3600.0));
    std::uniform_int_distribution<std::int64_t> start(0, 30'000'000);
    std::int64_t t = 1'600'000'000 + start(rng);
    std::vector<Interaction> raw;
    for (int e = 0; e < count; ++e) {
      const ItemId item = order[static_cast<std::size_t>(e)];
      const double a = detail::dot(h.latent, world.catalog.items[static_cast<std::size_t>(item)].latent);
      const double r = 3.0 + 1.5 * a + config.rating_noise * normal(rng);
      const int rating = static_cast<int>(std::clamp<long>(std::lround(r), 1, 5));
      t += 1 + static_cast<std::int64_t>(gap(rng));
      raw.push_back({u, item, rating, t});
    }
    h.target = raw.back().item_id;
    h.target_timestamp = raw.back().timestamp;
    raw.pop_back();
    const std::size_t keep = std::min<std::size_t>(raw.size(), static_cast<std::size_t>(config.max_history));
    h.events.assign(raw.end() - static_cast<std::ptrdiff_t>(keep), raw.end());
    users.push_back(std::move(h));
  }

  for (const auto& h : users) {
    const auto len = render_user_prompt(h, world.catalog).size();
    if (static_cast<int>(len) > config.context_length) {
      throw ConfigError("corpus.context_length: user " + std::to_string(h.user_id) +
                        " renders to " + std::to_string(len) + " tokens, above context_length " +
                        std::to_string(config.context_length));
    }
  }

  std::vector<int> perm(static_cast<std::size_t>(config.num_users));
  std::iota(perm.begin(), perm.end(), 0);
  {
    auto rng = root.child(3).engine();
    std::shuffle(perm.begin(), perm.end(), rng);
  }
  const auto n = static_cast<double>(config.num_users);
  const auto n_train = static_cast<std::size_t>(std::floor(n * config.train_ratio + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(n * config.val_ratio + 1e-9));
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto& dst = i < n_train ? world.train : (i < n_train + n_val ? world.val : world.test);
    dst.push_back(users[static_cast<std::size_t>(perm[i])]);
  }
  auto by_id = [](const UserHistory& a, const UserHistory& b) { return a.user_id < b.user_id; };
  std::sort(world.train.begin(), world.train.end(), by_id);
  std::sort(world.val.begin(), world.val.end(), by_id);
  std::sort(world.test.begin(), world.test.end(), by_id);
  return world;
}

// Serialization. Catalog: one JSON object per item. Splits: one JSON object
// per UserHistory. Field names match the struct members.

inline Json to_json(const Item& item) {
  Json attrs = Json::array();
  for (const auto& [k, v] : item.attributes) attrs.push_back(Json::array({k, v}));
  return Json{{"item_id", item.item_id}, {"title", item.title}, {"attributes", attrs},
              {"latent", item.latent}};
}

inline Item item_from_json(const Json& j) {
  Item item;
  item.item_id = j.at("item_id").get<ItemId>();
  item.title = j.at("title").get<std::string>();
  for (const auto& kv : j.at("attributes"))
    item.attributes.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
  item.latent = j.value("latent", std::vector<double>{});
  return item;
}

inline Json to_json(const UserHistory& h) {
  Json events = Json::array();
  for (const auto& e : h.events)
    events.push_back({{"item_id", e.item_id}, {"rating", e.rating}, {"timestamp", e.timestamp}});
  return Json{{"user_id", h.user_id},
              {"events", events},
              {"target", h.target},
              {"target_timestamp", h.target_timestamp},
              {"latent", h.latent}};
}

inline UserHistory history_from_json(const Json& j) {
  UserHistory h;
  h.user_id = j.at("user_id").get<int>();
  for (const auto& e : j.at("events")) {
    h.events.push_back({h.user_id, e.at("item_id").get<ItemId>(), e.at("rating").get<int>(),
                        e.at("timestamp").get<std::int64_t>()});
  }
  h.target = j.at("target").get<ItemId>();
  h.target_timestamp = j.at("target_timestamp").get<std::int64_t>();
  h.latent = j.value("latent", std::vector<double>{});
  return h;
}

inline std::string serialize_catalog(const Catalog& catalog) {
  std::string out;
  for (const auto& item : catalog.items) out += to_json(item).dump() + "\n";
  return out;
}

inline std::string serialize_split(const std::vector<UserHistory>& split) {
  std::string out;
  for (const auto& h : split) out += to_json(h).dump() + "\n";
  return out;
}

inline void save_world(const World& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& body) {
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    f << body;
  };
  write("catalog.jsonl", serialize_catalog(world.catalog));
  write("train.jsonl", serialize_split(world.train));
  write("val.jsonl", serialize_split(world.val));
  write("test.jsonl", serialize_split(world.test));
  write("meta.json", Json{{"category", world.catalog.category}}.dump() + "\n");
}

inline World load_world(const std::filesystem::path& dir) {
  auto lines = [&](const char* name) {
    std::ifstream f(dir / name);
    if (!f) throw std::runtime_error("cannot read " + (dir / name).string());
    std::vector<Json> out;
    std::string line;
    while (std::getline(f, line))
      if (!line.empty()) out.push_back(Json::parse(line));
    return out;
  };
  World w;
  {
    std::ifstream f(dir / "meta.json");
    if (f) w.catalog.category = Json::parse(f).value("category", std::string("music"));
  }
  for (const auto& j : lines("catalog.jsonl")) w.catalog.items.push_back(item_from_json(j));
  for (const auto& j : lines("train.jsonl")) w.train.push_back(history_from_json(j));
  for (const auto& j : lines("val.jsonl")) w.val.push_back(history_from_json(j));
  for (const auto& j : lines("test.jsonl")) w.test.push_back(history_from_json(j));
  for (std::size_t i = 0; i < w.catalog.items.size(); ++i)
    if (w.catalog.items[i].item_id != static_cast<ItemId>(i))
      throw std::runtime_error("catalog.jsonl: item ids must be dense and ordered");
  return w;
}

}  // namespace reasonrec
