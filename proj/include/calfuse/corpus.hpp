#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace calfuse {

struct Passage {
    std::string id;
    std::string text;
    std::vector<std::string> entity_mentions;

    friend bool operator==(const Passage&, const Passage&) = default;
};

/// A multi-hop question. `gold_chain` is in hop order; its last element is
/// the last-hop target. `entities` are the precomputed query-side entity
/// annotations used to seed graph retrieval.
struct Query {
    std::string id;
    std::string text;
    std::vector<std::string> gold_chain;
    std::vector<std::string> entities;

    std::size_t hop_count() const { return gold_chain.size(); }
    const std::string& last_hop() const { return gold_chain.back(); }

    friend bool operator==(const Query&, const Query&) = default;
};

/// Immutable passage collection, held in id order so that every downstream
/// result is independent of the order records were read in.
class Corpus {
public:
    Corpus() = default;
    /// Throws Error naming the first duplicated id.
    explicit Corpus(std::vector<Passage> passages);

    std::span<const Passage> passages() const { return passages_; }
    std::size_t size() const { return passages_.size(); }
    std::optional<std::size_t> index_of(const std::string& id) const;
    const Passage* find(const std::string& id) const;

    friend bool operator==(const Corpus& a, const Corpus& b) { return a.passages_ == b.passages_; }

private:
    std::vector<Passage> passages_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Dense id -> unit vector table. Every vector is L2-normalized on insert.
class EmbeddingStore {
public:
    explicit EmbeddingStore(std::size_t dimension = 0) : dimension_(dimension) {}

    /// Normalizes and stores `values`. The first insert fixes the dimension
    /// when it was not given at construction. Throws on a zero vector, a
    /// dimension mismatch or a duplicate id.
    void add(std::string id, std::span<const double> values);

    std::size_t dimension() const { return dimension_; }
    std::size_t size() const { return ids_.size(); }
    const std::string& id(std::size_t row) const { return ids_[row]; }
    std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * dimension_, dimension_};
    }
    std::optional<std::span<const double>> find(const std::string& id) const;

private:
    std::size_t dimension_;
    std::vector<std::string> ids_;
    std::vector<double> data_;
    std::unordered_map<std::string, std::size_t> index_;
};

double dot(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// File formats (line-delimited JSON; binary embeddings)
// ---------------------------------------------------------------------------

/// passages.jsonl: {"id","text"}; annotations.jsonl: {"passage_id","entities"}.
/// An empty annotations path means "no annotations". Annotation lines for
/// the same passage accumulate.
Corpus load_corpus(const std::filesystem::path& passages_path,
                   const std::filesystem::path& annotations_path);

/// queries.jsonl: {"id","text","gold_chain",["entities"]}. Every gold id must
/// resolve in `corpus`; the result is sorted by query id.
std::vector<Query> load_queries(const std::filesystem::path& path, const Corpus& corpus);

/// Accepts JSONL {"id","vector"} or the CFEMB1 binary block; the format is
/// detected from the leading magic bytes.
EmbeddingStore load_embeddings(const std::filesystem::path& path,
                               std::optional<std::size_t> expected_dimension = std::nullopt);

void write_passages(const std::filesystem::path& path, const Corpus& corpus);
void write_annotations(const std::filesystem::path& path, const Corpus& corpus);
void write_queries(const std::filesystem::path& path, std::span<const Query> queries);
void write_embeddings_jsonl(const std::filesystem::path& path, const EmbeddingStore& store);

/// Little-endian layout: "CFEMB1", u32 dimension, u64 count, then per record
/// u16 id length, id bytes, dimension x f32.
void write_embeddings_binary(const std::filesystem::path& path, const EmbeddingStore& store);

inline constexpr std::string_view kEmbeddingMagic = "CFEMB1";

// ---------------------------------------------------------------------------
// Tune/test split
// ---------------------------------------------------------------------------

enum class Split { tune, test };

std::string_view to_string(Split s);

/// Lowercase hex MD5 of `text`.
std::string md5_hex(std::string_view text);

/// First 8 bytes of MD5(id), read big-endian, divided by 2^64.
double md5_unit_fraction(std::string_view id);

/// A query goes to tune iff md5_unit_fraction(id) < tune_fraction.
using SplitAssignment = std::map<std::string, Split>;
SplitAssignment md5_split(std::span<const Query> queries, double tune_fraction);

}  // namespace calfuse
