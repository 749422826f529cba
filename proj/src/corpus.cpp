#include "calfuse/corpus.hpp"

#include "calfuse/error.hpp"

#include <openssl/evp.h>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>

namespace calfuse {

using nlohmann::json;

Corpus::Corpus(std::vector<Passage> passages) : passages_(std::move(passages)) {
    std::sort(passages_.begin(), passages_.end(),
              [](const Passage& a, const Passage& b) { return a.id < b.id; });
    index_.reserve(passages_.size());
    for (std::size_t i = 0; i < passages_.size(); ++i) {
        if (!index_.emplace(passages_[i].id, i).second) {
            throw Error("duplicate passage id \"" + passages_[i].id + "\"");
        }
    }
}

std::optional<std::size_t> Corpus::index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

const Passage* Corpus::find(const std::string& id) const {
    auto idx = index_of(id);
    return idx ? &passages_[*idx] : nullptr;
}

void EmbeddingStore::add(std::string id, std::span<const double> values) {
    if (dimension_ == 0) dimension_ = values.size();
    if (values.size() != dimension_) {
        throw Error("embedding \"" + id + "\" has dimension " + std::to_string(values.size()) +
                    ", expected " + std::to_string(dimension_));
    }
    double norm2 = 0.0;
    for (double v : values) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw Error("embedding \"" + id + "\" is a zero or non-finite vector");
    }
    if (!index_.emplace(id, ids_.size()).second) {
        throw Error("duplicate embedding id \"" + id + "\"");
    }
    for (double v : values) data_.push_back(v / norm);
    ids_.push_back(std::move(id));
}

std::optional<std::span<const double>> EmbeddingStore::find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return row(it->second);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

namespace {

std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream in(path, mode);
    if (!in) throw Error("cannot open " + path.string());
    return in;
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream out(path, mode | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

/// Calls `fn(record, line_number)` for each non-blank line of a JSONL file.
template <typename Fn>
void for_each_record(const std::filesystem::path& path, Fn&& fn) {
    auto in = open_in(path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error& e) {
            throw Error(path.string() + ":" + std::to_string(line_no) + ": malformed JSON (" +
                        e.what() + ")");
        }
        try {
            fn(record, line_no);
        } catch (const json::exception& e) {
            throw Error(path.string() + ":" + std::to_string(line_no) + ": bad record (" +
                        e.what() + ")");
        }
    }
}

std::string where(const std::filesystem::path& path, std::size_t line_no) {
    return path.string() + ":" + std::to_string(line_no) + ": ";
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& passages_path,
                   const std::filesystem::path& annotations_path) {
    std::vector<Passage> passages;
    std::unordered_map<std::string, std::size_t> seen;
    for_each_record(passages_path, [&](const json& r, std::size_t line_no) {
        if (!r.is_object() || !r.contains("id") || !r.contains("text")) {
            throw Error(where(passages_path, line_no) + "expected {\"id\", \"text\"}");
        }
        Passage p{r.at("id").get<std::string>(), r.at("text").get<std::string>(), {}};
        if (!seen.emplace(p.id, passages.size()).second) {
            throw Error(where(passages_path, line_no) + "duplicate passage id \"" + p.id + "\"");
        }
        passages.push_back(std::move(p));
    });

    if (!annotations_path.empty()) {
        for_each_record(annotations_path, [&](const json& r, std::size_t line_no) {
            if (!r.is_object() || !r.contains("passage_id") || !r.contains("entities")) {
                throw Error(where(annotations_path, line_no) +
                            "expected {\"passage_id\", \"entities\"}");
            }
            const auto pid = r.at("passage_id").get<std::string>();
            auto it = seen.find(pid);
            if (it == seen.end()) {
                throw Error(where(annotations_path, line_no) + "unknown passage id \"" + pid + "\"");
            }
            auto& mentions = passages[it->second].entity_mentions;
            for (const auto& e : r.at("entities")) mentions.push_back(e.get<std::string>());
        });
    }
    return Corpus(std::move(passages));
}

std::vector<Query> load_queries(const std::filesystem::path& path, const Corpus& corpus) {
    std::vector<Query> queries;
    std::unordered_map<std::string, bool> seen;
    for_each_record(path, [&](const json& r, std::size_t line_no) {
        if (!r.is_object() || !r.contains("id") || !r.contains("gold_chain")) {
            throw Error(where(path, line_no) + "expected {\"id\", \"text\", \"gold_chain\"}");
        }
        Query q;
        q.id = r.at("id").get<std::string>();
        q.text = r.value("text", "");
        q.gold_chain = r.at("gold_chain").get<std::vector<std::string>>();
        if (r.contains("entities")) q.entities = r.at("entities").get<std::vector<std::string>>();
        if (q.gold_chain.empty()) {
            throw Error(where(path, line_no) + "query \"" + q.id + "\" has an empty gold_chain");
        }
        for (const auto& gid : q.gold_chain) {
            if (!corpus.index_of(gid)) {
                throw Error(where(path, line_no) + "query \"" + q.id +
                            "\" references unknown passage \"" + gid + "\"");
            }
        }
        if (!seen.emplace(q.id, true).second) {
            throw Error(where(path, line_no) + "duplicate query id \"" + q.id + "\"");
        }
        queries.push_back(std::move(q));
    });
    std::sort(queries.begin(), queries.end(),
              [](const Query& a, const Query& b) { return a.id < b.id; });
    return queries;
}

namespace {

template <typename T>
T read_le(std::istream& in, const std::filesystem::path& path) {
    std::array<char, sizeof(T)> buf{};
    if (!in.read(buf.data(), buf.size())) throw Error(path.string() + ": truncated binary embeddings");
    T value{};
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    std::memcpy(&value, buf.data(), sizeof(T));
    return value;
}

template <typename T>
void write_le(std::ostream& out, T value) {
    std::array<char, sizeof(T)> buf{};
    std::memcpy(buf.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    out.write(buf.data(), buf.size());
}

EmbeddingStore load_binary_embeddings(const std::filesystem::path& path) {
    auto in = open_in(path, std::ios::binary);
    std::string magic(kEmbeddingMagic.size(), '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (magic != kEmbeddingMagic) throw Error(path.string() + ": bad magic");
    const auto dim = read_le<std::uint32_t>(in, path);
    const auto count = read_le<std::uint64_t>(in, path);
    EmbeddingStore store(dim);
    std::vector<double> values(dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = read_le<std::uint16_t>(in, path);
        std::string id(len, '\0');
        if (!in.read(id.data(), len)) throw Error(path.string() + ": truncated id");
        for (auto& v : values) v = static_cast<double>(read_le<float>(in, path));
        store.add(std::move(id), values);
    }
    return store;
}

}  // namespace

EmbeddingStore load_embeddings(const std::filesystem::path& path,
                               std::optional<std::size_t> expected_dimension) {
    bool binary = false;
    {
        auto in = open_in(path, std::ios::binary);
        std::string head(kEmbeddingMagic.size(), '\0');
        in.read(head.data(), static_cast<std::streamsize>(head.size()));
        binary = in.gcount() == static_cast<std::streamsize>(head.size()) && head == kEmbeddingMagic;
    }

    EmbeddingStore store = [&] {
        if (binary) return load_binary_embeddings(path);
        EmbeddingStore s(expected_dimension.value_or(0));
        for_each_record(path, [&](const json& r, std::size_t line_no) {
            if (!r.is_object() || !r.contains("id") || !r.contains("vector")) {
                throw Error(where(path, line_no) + "expected {\"id\", \"vector\"}");
            }
            auto values = r.at("vector").get<std::vector<double>>();
            try {
                s.add(r.at("id").get<std::string>(), values);
            } catch (const Error& e) {
                throw Error(where(path, line_no) + e.what());
            }
        });
        return s;
    }();

    if (expected_dimension && store.size() > 0 && store.dimension() != *expected_dimension) {
        throw Error(path.string() + ": dimension " + std::to_string(store.dimension()) +
                    " does not match expected " + std::to_string(*expected_dimension));
    }
    return store;
}

void write_passages(const std::filesystem::path& path, const Corpus& corpus) {
    auto out = open_out(path);
    for (const auto& p : corpus.passages()) {
        out << json{{"id", p.id}, {"text", p.text}}.dump() << '\n';
    }
}

void write_annotations(const std::filesystem::path& path, const Corpus& corpus) {
    auto out = open_out(path);
    for (const auto& p : corpus.passages()) {
        if (p.entity_mentions.empty()) continue;
        out << json{{"passage_id", p.id}, {"entities", p.entity_mentions}}.dump() << '\n';
    }
}

void write_queries(const std::filesystem::path& path, std::span<const Query> queries) {
    auto out = open_out(path);
    for (const auto& q : queries) {
        json r{{"id", q.id}, {"text", q.text}, {"gold_chain", q.gold_chain}};
        if (!q.entities.empty()) r["entities"] = q.entities;
        out << r.dump() << '\n';
    }
}

void write_embeddings_jsonl(const std::filesystem::path& path, const EmbeddingStore& store) {
    auto out = open_out(path);
    for (std::size_t r = 0; r < store.size(); ++r) {
        auto row = store.row(r);
        json rec{{"id", store.id(r)}, {"vector", std::vector<double>(row.begin(), row.end())}};
        out << rec.dump() << '\n';
    }
}

void write_embeddings_binary(const std::filesystem::path& path, const EmbeddingStore& store) {
    auto out = open_out(path, std::ios::binary);
    out.write(kEmbeddingMagic.data(), static_cast<std::streamsize>(kEmbeddingMagic.size()));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dimension()));
    write_le<std::uint64_t>(out, store.size());
    for (std::size_t r = 0; r < store.size(); ++r) {
        const auto& id = store.id(r);
        if (id.size() > 0xFFFF) throw Error("embedding id too long for binary format: " + id);
        write_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
        for (double v : store.row(r)) write_le<float>(out, static_cast<float>(v));
    }
}

std::string_view to_string(Split s) { return s == Split::tune ? "tune" : "test"; }

namespace {

std::array<unsigned char, 16> md5_digest(std::string_view text) {
    std::array<unsigned char, 16> digest{};
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_md5(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), text.data(), text.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest.data(), &len) != 1 || len != digest.size()) {
        throw Error("MD5 digest failed");
    }
    return digest;
}

}  // namespace

std::string md5_hex(std::string_view text) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned char b : md5_digest(text)) {
        out.push_back(kHex[b >> 4]);
        out.push_back(kHex[b & 0xF]);
    }
    return out;
}

double md5_unit_fraction(std::string_view id) {
    const auto digest = md5_digest(id);
    std::uint64_t prefix = 0;
    for (int i = 0; i < 8; ++i) prefix = (prefix << 8) | digest[i];
    return static_cast<double>(prefix) * 0x1.0p-64;
}

SplitAssignment md5_split(std::span<const Query> queries, double tune_fraction) {
    SplitAssignment out;
    for (const auto& q : queries) {
        out[q.id] = md5_unit_fraction(q.id) < tune_fraction ? Split::tune : Split::test;
    }
    return out;
}

}  // namespace calfuse
