#include "hmr/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>
#include <zlib.h>

#include "hmr/checkpoint.hpp"
#include "hmr/rng.hpp"

namespace hmr {

namespace {

bool parse_int64(const std::string& s, std::int64_t& out) {
    if (s.empty()) return false;
    std::size_t pos = 0;
    try {
        out = std::stoll(s, &pos);
    } catch (...) {
        return false;
    }
    return pos == s.size();
}

std::vector<std::string> split_on(const std::string& line, const std::string& sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        std::size_t at = line.find(sep, start);
        if (at == std::string::npos) {
            parts.push_back(line.substr(start));
            break;
        }
        parts.push_back(line.substr(start, at - start));
        start = at + sep.size();
    }
    return parts;
}

void check_quality(const char* what, const IngestStats& stats) {
    if (stats.lines == 0) throw DataError(std::string(what) + ": file contains no lines");
    if (stats.malformed * 100 > stats.lines)
        throw DataError(std::string(what) + ": " + std::to_string(stats.malformed) + " of " +
                        std::to_string(stats.lines) + " lines malformed (more than 1%)");
}

std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

}  // namespace

MovielensData ingest_movielens(const std::string& ratings_path, const std::string& movies_path) {
    MovielensData out;

    std::ifstream movies(movies_path, std::ios::binary);
    if (!movies) throw IoError("ingest_movielens: cannot open " + movies_path);
    std::string line;
    while (std::getline(movies, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        ++out.movies_stats.lines;
        // MovieID::Title::Genres; titles may contain colons, so take the
        // first separator for the id and the last for the genre list.
        std::size_t first = line.find("::");
        std::size_t last = line.rfind("::");
        if (first == std::string::npos || last == first) {
            ++out.movies_stats.malformed;
            continue;
        }
        std::string id = line.substr(0, first);
        std::string genres = line.substr(last + 2);
        std::int64_t ignored;
        if (!parse_int64(id, ignored)) {
            ++out.movies_stats.malformed;
            continue;
        }
        std::string first_genre = genres.substr(0, genres.find('|'));
        out.item_first_genre[id] = first_genre;
    }
    check_quality("ingest_movielens(movies)", out.movies_stats);

    std::ifstream ratings(ratings_path, std::ios::binary);
    if (!ratings) throw IoError("ingest_movielens: cannot open " + ratings_path);
    while (std::getline(ratings, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        ++out.ratings_stats.lines;
        auto parts = split_on(line, "::");
        std::int64_t ts;
        if (parts.size() != 4 || parts[0].empty() || parts[1].empty() || !parse_int64(parts[3], ts) || ts < 0) {
            ++out.ratings_stats.malformed;
            continue;
        }
        out.interactions.push_back({parts[0], parts[1], ts});
        ++out.ratings_stats.interactions;
    }
    check_quality("ingest_movielens(ratings)", out.ratings_stats);
    return out;
}

AmazonData ingest_amazon(const std::string& path) {
    gzFile gz = gzopen(path.c_str(), "rb");
    if (!gz) throw IoError("ingest_amazon: cannot open " + path);

    AmazonData out;
    std::string line;
    char buf[1 << 16];
    bool line_done = false;
    auto handle_line = [&]() {
        if (line.empty()) return;
        ++out.stats.lines;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            const auto& user = j.at("reviewerID");
            const auto& item = j.at("asin");
            const auto& ts = j.at("unixReviewTime");
            if (!user.is_string() || !item.is_string() || !ts.is_number_integer()) {
                ++out.stats.malformed;
            } else {
                out.interactions.push_back({user.get<std::string>(), item.get<std::string>(),
                                            ts.get<std::int64_t>()});
                ++out.stats.interactions;
            }
        } catch (const nlohmann::json::exception&) {
            ++out.stats.malformed;
        }
        line.clear();
    };

    while (gzgets(gz, buf, sizeof(buf)) != nullptr) {
        line += buf;
        line_done = !line.empty() && line.back() == '\n';
        if (line_done) {
            line.pop_back();
            line = strip_cr(std::move(line));
            handle_line();
        }
    }
    int errnum = 0;
    gzerror(gz, &errnum);
    gzclose(gz);
    if (errnum != Z_OK && errnum != Z_STREAM_END)
        throw DataError("ingest_amazon: corrupt gzip stream in " + path);
    handle_line();  // last line without trailing newline
    check_quality("ingest_amazon", out.stats);
    return out;
}

std::vector<RawInteraction> five_core_filter(std::vector<RawInteraction> interactions) {
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& it : interactions) ++counts[it.user];
    std::vector<RawInteraction> kept;
    kept.reserve(interactions.size());
    for (auto& it : interactions)
        if (counts[it.user] >= 5) kept.push_back(std::move(it));
    if (kept.empty()) throw DataError("five_core_filter: no user has five or more interactions");
    return kept;
}

std::int64_t assign_attr_amazon(std::int64_t item_index) { return (item_index % 50) + 1; }

DatasetSplit build_sequences(const std::vector<RawInteraction>& interactions, int L, AttrScheme scheme,
                             const std::unordered_map<std::string, std::string>* item_first_genre) {
    if (L < 1) throw ConfigError("build_sequences: L must be >= 1");
    if (interactions.empty()) throw DataError("build_sequences: no interactions");
    if (scheme == AttrScheme::FirstGenre && !item_first_genre)
        throw ConfigError("build_sequences: FirstGenre scheme needs a genre map");

    // Deterministic pass: sort by (user, timestamp, file order); ids are
    // assigned contiguously from 1 in first-appearance order along it.
    std::vector<std::size_t> order(interactions.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& ia = interactions[a];
        const auto& ib = interactions[b];
        if (ia.user != ib.user) return ia.user < ib.user;
        if (ia.timestamp != ib.timestamp) return ia.timestamp < ib.timestamp;
        return a < b;
    });

    std::unordered_map<std::string, std::int64_t> item_map;
    std::unordered_map<std::string, std::int64_t> genre_map;
    std::vector<std::int64_t> item_attr(1, 0);  // indexed by remapped item id

    auto genre_id = [&](const std::string& raw_item) -> std::int64_t {
        auto at = item_first_genre->find(raw_item);
        if (at == item_first_genre->end() || at->second.empty()) return 0;  // resolved to UNKNOWN later
        auto [g, inserted] = genre_map.try_emplace(at->second, static_cast<std::int64_t>(genre_map.size()) + 1);
        (void)inserted;
        return g->second;
    };

    struct UserRows {
        std::vector<std::int64_t> items;
    };
    std::vector<UserRows> users;
    std::string current_user;

    for (std::size_t oi : order) {
        const auto& it = interactions[oi];
        if (users.empty() || it.user != current_user) {
            current_user = it.user;
            users.emplace_back();
        }
        auto [entry, inserted] = item_map.try_emplace(it.item, static_cast<std::int64_t>(item_map.size()) + 1);
        if (inserted) {
            std::int64_t attr = 0;
            if (scheme == AttrScheme::HashBuckets)
                attr = assign_attr_amazon(entry->second);
            else
                attr = genre_id(it.item);  // 0 marks UNKNOWN until the genre count is final
            item_attr.push_back(attr);
        }
        users.back().items.push_back(entry->second);
    }

    std::int64_t num_attrs;
    if (scheme == AttrScheme::HashBuckets) {
        num_attrs = 50;
    } else {
        // UNKNOWN is a dedicated bucket after the observed genres.
        num_attrs = static_cast<std::int64_t>(genre_map.size()) + 1;
        for (auto& a : item_attr)
            if (a == 0) a = num_attrs;
        item_attr[0] = 0;  // padding stays padding
    }

    const std::int64_t num_items = static_cast<std::int64_t>(item_map.size());
    if (num_items >= (1ll << 24))
        throw DataError("build_sequences: item vocabulary too large for the float32 cache format");

    std::size_t retained = 0, dropped = 0;
    for (const auto& u : users) (u.items.size() >= 2 ? retained : dropped) += 1;
    if (retained == 0) throw DataError("build_sequences: no user has two or more interactions");

    DatasetSplit split;
    split.L = L;
    split.num_items = num_items;
    split.num_attrs = num_attrs;
    split.num_users = static_cast<std::int64_t>(retained);
    split.users_dropped = dropped;
    const std::size_t Ls = static_cast<std::size_t>(L);
    split.inputs = IntTensor::zeros({retained, Ls});
    split.attrs = IntTensor::zeros({retained, Ls});
    split.train_targets = IntTensor::zeros({retained, Ls});
    split.test_target.resize(retained);

    std::size_t row = 0;
    for (const auto& u : users) {
        if (u.items.size() < 2) continue;
        split.test_target[row] = u.items.back();
        const std::size_t prefix_len = u.items.size() - 1;
        const std::size_t keep = std::min(prefix_len, Ls);
        const std::size_t pad = Ls - keep;
        for (std::size_t i = 0; i < keep; ++i) {
            const std::int64_t item = u.items[prefix_len - keep + i];
            split.inputs.at(row * Ls + pad + i) = item;
            split.attrs.at(row * Ls + pad + i) = item_attr[static_cast<std::size_t>(item)];
        }
        // teacher forcing: position t predicts the item stored at t+1;
        // the last position has no successor inside the prefix (its true
        // next item is the held-out test target) and stays masked.
        for (std::size_t t = 0; t + 1 < Ls; ++t)
            split.train_targets.at(row * Ls + t) = split.inputs.at(row * Ls + t + 1);
        ++row;
    }
    return split;
}

DatasetSplit synthetic_generate(int num_users, int cycle_len, int L, std::uint64_t seed) {
    if (cycle_len < 2) throw ConfigError("synthetic_generate: cycle_len must be >= 2");
    if (num_users < 1) throw ConfigError("synthetic_generate: num_users must be >= 1");
    Rng rng(seed);
    const int history = 4 * cycle_len;
    std::vector<RawInteraction> interactions;
    interactions.reserve(static_cast<std::size_t>(num_users) * static_cast<std::size_t>(history));
    char name[16];
    for (int u = 0; u < num_users; ++u) {
        std::snprintf(name, sizeof(name), "u%05d", u);
        const std::int64_t base = static_cast<std::int64_t>(u) * cycle_len + 1;
        const std::uint64_t phase = rng.uniform_index(static_cast<std::uint64_t>(cycle_len));
        for (int t = 0; t < history; ++t) {
            const std::int64_t item = base + static_cast<std::int64_t>((phase + static_cast<std::uint64_t>(t)) %
                                                                       static_cast<std::uint64_t>(cycle_len));
            interactions.push_back({name, std::to_string(item), t});
        }
    }
    return build_sequences(interactions, L, AttrScheme::HashBuckets);
}

void save_split(const std::string& path, const DatasetSplit& split) {
    auto to_floats = [](const IntTensor& t) {
        std::vector<float> v(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<float>(t.at(i));
        return v;
    };
    std::vector<NamedArray> arrays;
    arrays.push_back({"inputs", split.inputs.shape, to_floats(split.inputs)});
    arrays.push_back({"attrs", split.attrs.shape, to_floats(split.attrs)});
    arrays.push_back({"train_targets", split.train_targets.shape, to_floats(split.train_targets)});
    std::vector<float> tt(split.test_target.size());
    for (std::size_t i = 0; i < tt.size(); ++i) tt[i] = static_cast<float>(split.test_target[i]);
    arrays.push_back({"test_target", Shape{split.test_target.size()}, std::move(tt)});
    write_container(path, arrays);

    nlohmann::ordered_json j;
    j["num_users"] = split.num_users;
    j["num_items"] = split.num_items;
    j["num_attrs"] = split.num_attrs;
    j["L"] = split.L;
    std::ofstream os(path + ".json", std::ios::trunc);
    if (!os) throw IoError("save_split: cannot open " + path + ".json");
    os << j.dump(2) << "\n";
}

DatasetSplit load_split(const std::string& path) {
    auto arrays = read_container(path);
    if (arrays.size() != 4 || arrays[0].name != "inputs" || arrays[1].name != "attrs" ||
        arrays[2].name != "train_targets" || arrays[3].name != "test_target")
        throw DataError("load_split: " + path + " is not a dataset cache");

    std::ifstream is(path + ".json");
    if (!is) throw IoError("load_split: cannot open sidecar " + path + ".json");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_split: invalid sidecar JSON: " + std::string(e.what()));
    }

    DatasetSplit split;
    split.num_users = j.at("num_users").get<std::int64_t>();
    split.num_items = j.at("num_items").get<std::int64_t>();
    split.num_attrs = j.at("num_attrs").get<std::int64_t>();
    split.L = j.at("L").get<int>();

    auto to_ints = [](const NamedArray& a) {
        std::vector<std::int64_t> v(a.values.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::int64_t>(a.values[i]);
        return IntTensor(a.shape, std::move(v));
    };
    split.inputs = to_ints(arrays[0]);
    split.attrs = to_ints(arrays[1]);
    split.train_targets = to_ints(arrays[2]);
    split.test_target.resize(arrays[3].values.size());
    for (std::size_t i = 0; i < split.test_target.size(); ++i)
        split.test_target[i] = static_cast<std::int64_t>(arrays[3].values[i]);

    if (split.inputs.shape != Shape{static_cast<std::size_t>(split.num_users), static_cast<std::size_t>(split.L)})
        throw DataError("load_split: sidecar does not match cached arrays");
    return split;
}

}  // namespace hmr
