#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "hmr/tensor.hpp"

namespace hmr {

struct RawInteraction {
    std::string user;
    std::string item;
    std::int64_t timestamp = 0;
};

struct IngestStats {
    std::size_t lines = 0;
    std::size_t malformed = 0;
    std::size_t interactions = 0;
};

struct MovielensData {
    std::vector<RawInteraction> interactions;
    std::unordered_map<std::string, std::string> item_first_genre;  // raw item id -> first listed genre
    IngestStats ratings_stats;
    IngestStats movies_stats;
};

struct AmazonData {
    std::vector<RawInteraction> interactions;
    IngestStats stats;
};

// Left-padded per-user training rows plus the held-out last item.
struct DatasetSplit {
    IntTensor inputs;                       // [U, L]
    IntTensor attrs;                        // [U, L], zero exactly where inputs is zero
    IntTensor train_targets;                // [U, L], next-item teacher forcing, 0 = masked
    std::vector<std::int64_t> test_target;  // [U]
    std::int64_t num_users = 0;
    std::int64_t num_items = 0;
    std::int64_t num_attrs = 0;
    int L = 0;
    std::size_t users_dropped = 0;  // fewer than 2 usable interactions

    std::size_t user_count() const { return test_target.size(); }
};

// "::"-separated MovieLens-1M files (UserID::MovieID::Rating::Timestamp
// and MovieID::Title::Genres with |-separated genres). Malformed lines
// are counted and skipped; more than 1% malformed raises DataError.
MovielensData ingest_movielens(const std::string& ratings_path, const std::string& movies_path);

// gzip JSON-lines Amazon reviews, parsed line by line with bounded
// memory; keeps (reviewerID, asin, unixReviewTime) per review.
AmazonData ingest_amazon(const std::string& path);

// Keeps only interactions of users with at least five of them.
std::vector<RawInteraction> five_core_filter(std::vector<RawInteraction> interactions);

// Deterministic attribute bucket for Amazon items: ((id mod 50) + 1),
// applied to the contiguous post-remap item index.
std::int64_t assign_attr_amazon(std::int64_t item_index);

enum class AttrScheme {
    HashBuckets,  // assign_attr_amazon on the remapped item id
    FirstGenre,   // first listed genre; empty/missing genre -> UNKNOWN bucket
};

// Remaps ids (contiguous from 1, first appearance during a pass sorted
// by user, timestamp, file order), sorts each user chronologically,
// holds out the final item, truncates the prefix to the most recent L
// and left-pads, and shifts targets by one for teacher forcing.
DatasetSplit build_sequences(const std::vector<RawInteraction>& interactions, int L, AttrScheme scheme,
                             const std::unordered_map<std::string, std::string>* item_first_genre = nullptr);

// Test fixture: each user repeats a user-specific cycle of cycle_len
// distinct items (history of 4*cycle_len events), so the held-out next
// item is exactly the cycle successor of the last prefix item.
DatasetSplit synthetic_generate(int num_users, int cycle_len, int L, std::uint64_t seed);

// Split cache: binary container (see checkpoint.hpp) with a JSON sidecar
// at path + ".json" holding {num_users, num_items, num_attrs, L}.
void save_split(const std::string& path, const DatasetSplit& split);
DatasetSplit load_split(const std::string& path);

}  // namespace hmr
