#pragma once

// File formats: MFT tensor containers, JSON partitions/presets, CSV reports.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "moeforge/dense_ffn.hpp"
#include "moeforge/importance.hpp"
#include "moeforge/moe_layer.hpp"
#include "moeforge/partitioner.hpp"
#include "moeforge/routing_analysis.hpp"
#include "moeforge/sampler.hpp"
#include "moeforge/trainer.hpp"

namespace moeforge {

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s)
{
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw FormatError("not a number: '" + std::string(s) + "'");
    return v;
}

inline std::uint64_t parse_uint(std::string_view s)
{
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw FormatError("not a nonnegative integer: '" + std::string(s) + "'");
    return v;
}

inline std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw FormatError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// MFT: "MFT1", u32 tensor count, then per tensor
//   u32 name length, name bytes (UTF-8), u32 rank, rank x u64 dims, f64 payload (row-major).
// Every integer and float is little-endian.
// ---------------------------------------------------------------------------

struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;

    bool operator==(const NamedTensor&) const = default;
};

using TensorList = std::vector<NamedTensor>;

namespace detail {

template <typename T>
void put_le(std::string& out, T value)
{
    std::uint64_t bits = 0;
    if constexpr (std::is_same_v<T, double>)
        std::memcpy(&bits, &value, sizeof value);
    else
        bits = static_cast<std::uint64_t>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const char* what)
    {
        if (bytes_.size() - pos_ < sizeof(T))
            throw FormatError(std::string("MFT: truncated while reading ") + what);
        std::uint64_t bits = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        if constexpr (std::is_same_v<T, double>) {
            double v;
            std::memcpy(&v, &bits, sizeof v);
            return v;
        } else {
            return static_cast<T>(bits);
        }
    }

    std::string_view take(std::size_t n, const char* what)
    {
        if (bytes_.size() - pos_ < n)
            throw FormatError(std::string("MFT: truncated while reading ") + what);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const noexcept { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode_mft(const TensorList& tensors)
{
    std::set<std::string> names;
    std::string out = "MFT1";
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (!names.insert(t.name).second)
            throw FormatError("MFT: duplicate tensor name '" + t.name + "'");
        std::uint64_t expect = 1;
        for (auto d : t.dims)
            expect *= d;
        if (expect != t.data.size())
            throw FormatError("MFT: tensor '" + t.name + "' payload does not match its dims");
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims)
            detail::put_le<std::uint64_t>(out, d);
        for (double v : t.data)
            detail::put_le<double>(out, v);
    }
    return out;
}

inline TensorList decode_mft(std::string_view bytes)
{
    detail::ByteReader in(bytes);
    if (in.take(4, "magic") != "MFT1")
        throw FormatError("MFT: bad magic");
    const auto count = in.get<std::uint32_t>("tensor count");
    TensorList out;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto name_len = in.get<std::uint32_t>("name length");
        t.name = std::string(in.take(name_len, "name"));
        if (!names.insert(t.name).second)
            throw FormatError("MFT: duplicate tensor name '" + t.name + "'");
        const auto rank = in.get<std::uint32_t>("rank");
        std::uint64_t elems = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.dims.push_back(in.get<std::uint64_t>("dims"));
            elems *= t.dims.back();
        }
        if (elems > bytes.size() / 8)
            throw FormatError("MFT: tensor '" + t.name + "' larger than the file");
        t.data.resize(elems);
        for (auto& v : t.data)
            v = in.get<double>("payload");
        out.push_back(std::move(t));
    }
    if (!in.done())
        throw FormatError("MFT: trailing bytes after last tensor");
    return out;
}

inline void write_mft(const std::string& path, const TensorList& tensors) { write_file(path, encode_mft(tensors)); }

inline TensorList read_mft(const std::string& path) { return decode_mft(read_file(path)); }

inline const NamedTensor& find_tensor(const TensorList& tensors, std::string_view name)
{
    for (const auto& t : tensors)
        if (t.name == name)
            return t;
    throw FormatError("missing tensor '" + std::string(name) + "'");
}

inline bool has_tensor(const TensorList& tensors, std::string_view name)
{
    for (const auto& t : tensors)
        if (t.name == name)
            return true;
    return false;
}

inline NamedTensor to_tensor(std::string name, const Matrix& m)
{
    auto data = m.data();
    return {std::move(name), {m.rows(), m.cols()}, {data.begin(), data.end()}};
}

inline Matrix to_matrix(const NamedTensor& t)
{
    if (t.dims.size() != 2)
        throw FormatError("tensor '" + t.name + "' is not a matrix");
    try {
        return Matrix(t.dims[0], t.dims[1], t.data);
    } catch (const Error& e) {
        throw FormatError("tensor '" + t.name + "': " + e.what());
    }
}

inline void append_ffn(TensorList& out, const std::string& prefix, const DenseFfn& f)
{
    out.push_back(to_tensor(prefix + "w_up", f.w_up));
    out.push_back(to_tensor(prefix + "w_gate", f.w_gate));
    out.push_back(to_tensor(prefix + "w_down", f.w_down));
}

inline DenseFfn ffn_from_tensors(const TensorList& tensors, const std::string& prefix = "")
{
    DenseFfn f;
    f.w_up = to_matrix(find_tensor(tensors, prefix + "w_up"));
    f.w_gate = to_matrix(find_tensor(tensors, prefix + "w_gate"));
    f.w_down = to_matrix(find_tensor(tensors, prefix + "w_down"));
    try {
        f.validate();
    } catch (const ShapeError& e) {
        throw FormatError(e.what());
    }
    return f;
}

inline TensorList ffn_to_tensors(const DenseFfn& f)
{
    TensorList out;
    append_ffn(out, "", f);
    return out;
}

namespace detail {

inline NamedTensor index_tensor(std::string name, const IndexSet& idx)
{
    NamedTensor t{std::move(name), {idx.size()}, {}};
    for (auto i : idx)
        t.data.push_back(static_cast<double>(i));
    return t;
}

inline IndexSet tensor_indices(const NamedTensor& t)
{
    if (t.dims.size() != 1)
        throw FormatError("tensor '" + t.name + "' is not an index list");
    IndexSet out;
    for (double v : t.data) {
        if (!(v >= 0.0) || v != std::floor(v))
            throw FormatError("tensor '" + t.name + "' holds a non-index value");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

} // namespace detail

/// Layer tensors: "moe.config" = [N, k, scale_factor, noise_enabled, has_residual],
/// "gate.w_g", "gate.w_noise", "expert.<i>.{w_up,w_gate,w_down,indices}" and, when
/// present, "residual.{w_up,w_gate,w_down,indices}".
inline TensorList layer_to_tensors(const MoeLayer& layer)
{
    TensorList out;
    out.push_back({"moe.config",
                   {5},
                   {static_cast<double>(layer.expert_count()), static_cast<double>(layer.gate.k), layer.scale_factor,
                    layer.gate.noise_enabled ? 1.0 : 0.0, layer.residual_expert ? 1.0 : 0.0}});
    out.push_back(to_tensor("gate.w_g", layer.gate.w_g));
    out.push_back(to_tensor("gate.w_noise", layer.gate.w_noise));
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
        const std::string prefix = "expert." + std::to_string(i) + ".";
        append_ffn(out, prefix, layer.experts[i].weights);
        out.push_back(detail::index_tensor(prefix + "indices", layer.experts[i].source_indices));
    }
    if (layer.residual_expert) {
        append_ffn(out, "residual.", layer.residual_expert->weights);
        out.push_back(detail::index_tensor("residual.indices", layer.residual_expert->source_indices));
    }
    return out;
}

inline MoeLayer layer_from_tensors(const TensorList& tensors)
{
    const auto& cfg = find_tensor(tensors, "moe.config");
    if (cfg.data.size() != 5)
        throw FormatError("tensor 'moe.config' must hold 5 values");
    MoeLayer layer;
    const auto n = static_cast<std::size_t>(cfg.data[0]);
    layer.gate.k = static_cast<std::size_t>(cfg.data[1]);
    layer.scale_factor = cfg.data[2];
    layer.gate.noise_enabled = cfg.data[3] != 0.0;
    layer.gate.w_g = to_matrix(find_tensor(tensors, "gate.w_g"));
    layer.gate.w_noise = to_matrix(find_tensor(tensors, "gate.w_noise"));
    for (std::size_t i = 0; i < n; ++i) {
        const std::string prefix = "expert." + std::to_string(i) + ".";
        ExpertFfn e;
        e.weights = ffn_from_tensors(tensors, prefix);
        e.source_indices = detail::tensor_indices(find_tensor(tensors, prefix + "indices"));
        layer.experts.push_back(std::move(e));
    }
    if (cfg.data[4] != 0.0) {
        ExpertFfn r;
        r.weights = ffn_from_tensors(tensors, "residual.");
        r.source_indices = detail::tensor_indices(find_tensor(tensors, "residual.indices"));
        layer.residual_expert = std::move(r);
    }
    try {
        layer.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("layer file: ") + e.what());
    }
    return layer;
}

// ---------------------------------------------------------------------------
// JSON documents
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json partition_to_json(const ExpertPartition& p)
{
    nlohmann::ordered_json j;
    j["method"] = std::string(to_string(p.method));
    j["n"] = p.expert_count();
    j["m"] = p.expert_size;
    j["hidden_dim"] = p.hidden_dim;
    j["sets"] = p.sets;
    j["residual"] = p.shared_residual ? *p.shared_residual : IndexSet{};
    return j;
}

inline ExpertPartition partition_from_json(const nlohmann::json& j)
{
    try {
        ExpertPartition p;
        p.method = parse_partition_method(j.at("method").get<std::string>());
        p.expert_size = j.at("m").get<std::size_t>();
        p.hidden_dim = j.at("hidden_dim").get<std::size_t>();
        p.sets = j.at("sets").get<std::vector<IndexSet>>();
        if (p.sets.size() != j.at("n").get<std::size_t>())
            throw FormatError("partition: 'n' disagrees with the number of sets");
        auto residual = j.value("residual", IndexSet{});
        if (!residual.empty())
            p.shared_residual = std::move(residual);
        validate_partition(p);
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("partition: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("partition: ") + e.what());
    }
}

inline std::string partition_to_text(const ExpertPartition& p) { return partition_to_json(p).dump(2) + "\n"; }

inline nlohmann::ordered_json importance_to_json(const ImportanceVector& v)
{
    nlohmann::ordered_json j;
    j["samples_seen"] = v.samples_seen;
    j["values"] = v.values;
    return j;
}

/// {"domains": [...], "weights": [...]}; weights are renormalized if they sum to a
/// positive value other than 1 (percentages are accepted).
inline DomainWeights domain_weights_from_json(const nlohmann::json& j)
{
    try {
        DomainWeights w;
        w.domains = j.at("domains").get<std::vector<std::string>>();
        w.weights = j.at("weights").get<Vector>();
        if (w.weights.size() != w.domains.size())
            throw FormatError("preset: weights and domains differ in length");
        double sum = 0.0;
        for (double v : w.weights)
            sum += v;
        if (!(sum > 0.0))
            throw FormatError("preset: weights must sum to a positive value");
        for (auto& v : w.weights)
            v /= sum;
        w.validate();
        return w;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("preset: ") + e.what());
    }
}

inline nlohmann::json read_json(const std::string& path)
{
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("'" + path + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// CSV (header row, comma separated, RFC-4180 quoting)
// ---------------------------------------------------------------------------

inline std::string csv_field(std::string_view s)
{
    if (s.find_first_of(",\"\r\n") == std::string_view::npos)
        return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"')
            out += '"';
        out += c;
    }
    return out + "\"";
}

/// Splits one record; quoted fields may contain commas and doubled quotes.
inline std::vector<std::string> split_csv_line(std::string_view line)
{
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else {
            fields.back() += c;
        }
    }
    if (quoted)
        throw FormatError("unterminated quoted field");
    return fields;
}

inline std::string train_report_csv(const TrainReport& r)
{
    std::string out = "step,loss,importance_loss,load_loss,lr\n";
    for (std::size_t s = 0; s < r.loss.size(); ++s)
        out += std::to_string(s) + "," + format_double(r.loss[s]) + "," + format_double(r.importance_loss[s]) + "," +
               format_double(r.load_loss[s]) + "," + format_double(r.lr[s]) + "\n";
    return out;
}

inline constexpr std::string_view kRoutingHeader = "token_id,domain,layer,expert_id,weight";

inline std::string routing_rows_csv(std::span<const RoutingRow> rows)
{
    std::string out = std::string(kRoutingHeader) + "\n";
    for (const auto& r : rows)
        out += std::to_string(r.token_id) + "," + csv_field(r.domain) + "," + std::to_string(r.layer) + "," +
               std::to_string(r.expert_id) + "," + format_double(r.weight) + "\n";
    return out;
}

/// Parses routing rows; errors cite the 1-based line number.
inline std::vector<RoutingRow> parse_routing_csv(std::string_view text)
{
    std::vector<RoutingRow> rows;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool header_seen = false;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos)
            end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            line.remove_suffix(1);
        if (line.empty())
            continue;
        if (!header_seen) {
            header_seen = true;
            if (line != kRoutingHeader)
                throw FormatError("line " + std::to_string(line_no) + ": expected header '" +
                                  std::string(kRoutingHeader) + "'");
            continue;
        }
        try {
            const auto f = split_csv_line(line);
            if (f.size() != 5)
                throw FormatError("expected 5 fields, found " + std::to_string(f.size()));
            rows.push_back({parse_uint(f[0]), f[1], static_cast<std::size_t>(parse_uint(f[2])),
                            static_cast<std::size_t>(parse_uint(f[3])), parse_double(f[4])});
        } catch (const FormatError& e) {
            throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return rows;
}

/// Rows are experts, columns are domains.
inline std::string heatmap_csv(const RoutingStats& stats, std::size_t layer)
{
    std::string out = "expert";
    for (const auto& d : stats.domains())
        out += "," + csv_field(d);
    out += "\n";
    for (std::size_t e = 0; e < stats.experts(); ++e) {
        out += std::to_string(e);
        for (std::size_t d = 0; d < stats.domains().size(); ++d)
            out += "," + std::to_string(stats.count(layer, e, d));
        out += "\n";
    }
    return out;
}

inline std::string distance_csv(const Matrix& dist, const std::vector<std::string>& labels)
{
    std::string out = "domain";
    for (const auto& d : labels)
        out += "," + csv_field(d);
    out += "\n";
    for (std::size_t a = 0; a < dist.rows(); ++a) {
        out += csv_field(labels[a]);
        for (std::size_t b = 0; b < dist.cols(); ++b)
            out += "," + format_double(dist(a, b));
        out += "\n";
    }
    return out;
}

inline std::string schedule_csv(const std::vector<ScheduleEntry>& log, const std::vector<std::string>& domains)
{
    std::string out = "step";
    for (const auto& d : domains)
        out += "," + csv_field(d);
    out += ",drawn\n";
    for (const auto& e : log) {
        out += std::to_string(e.step);
        for (double w : e.weights)
            out += "," + format_double(w);
        out += "," + csv_field(domains[e.domain]) + "\n";
    }
    return out;
}

} // namespace moeforge
