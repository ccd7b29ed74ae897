#pragma once

// Matrix, label and manifest I/O.
//
// NPY support is deliberately narrow: format version 1.0, little-endian,
// C order, one or two dimensions. A 1-D array of length n loads as a 1 x n
// matrix. Float payloads may be <f4 or <f8 and are widened to double; label
// files additionally accept <i4 and <i8.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"

namespace conealign {

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

enum class FileFormat { npy, csv };

inline FileFormat format_from_path(const std::filesystem::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".npy") return FileFormat::npy;
    if (ext == ".csv") return FileFormat::csv;
    throw FormatError("cannot infer format from extension of '" + p.string() + "' (expected .npy or .csv)");
}

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

struct NpyHeader {
    std::string descr;
    bool fortran_order = false;
    std::vector<std::size_t> shape;
    std::size_t data_offset = 0;
};

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' || s.front() == '\n'))
        s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n'))
        s.remove_suffix(1);
    return s;
}

// Finds the value text following 'key': in a python dict literal.
inline std::string_view dict_value(std::string_view dict, std::string_view key, const std::string& file) {
    const std::string needle = "'" + std::string(key) + "'";
    auto pos = dict.find(needle);
    if (pos == std::string_view::npos) throw FormatError(file + ": npy header lacks key " + needle);
    pos = dict.find(':', pos + needle.size());
    if (pos == std::string_view::npos) throw FormatError(file + ": malformed npy header");
    auto rest = trim(dict.substr(pos + 1));
    std::size_t end = 0;
    if (!rest.empty() && rest.front() == '(') {
        end = rest.find(')');
        if (end == std::string_view::npos) throw FormatError(file + ": unterminated shape tuple");
        return rest.substr(0, end + 1);
    }
    if (!rest.empty() && rest.front() == '\'') {
        end = rest.find('\'', 1);
        if (end == std::string_view::npos) throw FormatError(file + ": unterminated string in header");
        return rest.substr(0, end + 1);
    }
    end = rest.find_first_of(",}");
    return trim(rest.substr(0, end));
}

inline NpyHeader parse_npy_header(std::string_view bytes, const std::string& file) {
    constexpr std::string_view magic("\x93NUMPY", 6);
    if (bytes.size() < 10 || bytes.substr(0, 6) != magic) throw FormatError(file + ": missing NPY magic");
    const auto major = static_cast<unsigned char>(bytes[6]);
    const auto minor = static_cast<unsigned char>(bytes[7]);
    if (major != 1 || minor != 0) {
        throw FormatError(file + ": unsupported NPY version " + std::to_string(major) + "." + std::to_string(minor));
    }
    const std::size_t header_len = static_cast<unsigned char>(bytes[8]) |
                                   (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    if (bytes.size() < 10 + header_len) throw FormatError(file + ": truncated NPY header");
    const auto dict = bytes.substr(10, header_len);

    NpyHeader h;
    h.data_offset = 10 + header_len;

    auto descr = dict_value(dict, "descr", file);
    if (descr.size() < 2 || descr.front() != '\'') throw FormatError(file + ": malformed descr");
    h.descr = std::string(descr.substr(1, descr.size() - 2));

    auto fortran = dict_value(dict, "fortran_order", file);
    if (fortran == "True") h.fortran_order = true;
    else if (fortran == "False") h.fortran_order = false;
    else throw FormatError(file + ": malformed fortran_order");

    auto shape = dict_value(dict, "shape", file);
    if (shape.front() != '(') throw FormatError(file + ": malformed shape");
    auto inner = shape.substr(1, shape.size() - 2);
    while (!inner.empty()) {
        auto comma = inner.find(',');
        auto tok = trim(inner.substr(0, comma));
        if (!tok.empty()) {
            std::size_t v = 0;
            auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (ec != std::errc{} || p != tok.data() + tok.size()) throw FormatError(file + ": bad shape entry");
            h.shape.push_back(v);
        }
        if (comma == std::string_view::npos) break;
        inner.remove_prefix(comma + 1);
    }
    if (h.fortran_order) throw FormatError(file + ": Fortran-order arrays are not supported");
    if (h.shape.empty() || h.shape.size() > 2) {
        throw FormatError(file + ": only 1-D and 2-D arrays are supported (got " + std::to_string(h.shape.size()) +
                          "-D)");
    }
    return h;
}

inline std::string npy_header(std::string_view descr, std::size_t rows, std::size_t cols, bool one_dim) {
    std::string dict = "{'descr': '" + std::string(descr) + "', 'fortran_order': False, 'shape': (";
    if (one_dim) dict += std::to_string(cols) + ",), }";
    else dict += std::to_string(rows) + ", " + std::to_string(cols) + "), }";
    // Pad so the payload starts on a 64-byte boundary, terminated by '\n'.
    const std::size_t total = 10 + dict.size() + 1;
    dict.append((64 - total % 64) % 64, ' ');
    dict.push_back('\n');
    std::string out("\x93NUMPY\x01\x00", 8);
    out.push_back(static_cast<char>(dict.size() & 0xff));
    out.push_back(static_cast<char>((dict.size() >> 8) & 0xff));
    out += dict;
    return out;
}

template <class T>
std::vector<double> widen_payload(std::string_view payload, std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        T v;
        std::memcpy(&v, payload.data() + i * sizeof(T), sizeof(T));
        out[i] = static_cast<double>(v);
    }
    return out;
}

inline void check_finite(const Matrix& m, const std::string& file) {
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        if (!std::isfinite(m.data[i])) {
            throw DataError(file + ": non-finite value at row " + std::to_string(i / std::max<std::size_t>(m.cols, 1)) +
                            ", column " + std::to_string(i % std::max<std::size_t>(m.cols, 1)));
        }
    }
}

struct RawNpy {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    bool integral = false;
};

inline RawNpy read_npy(const std::filesystem::path& path, bool allow_int) {
    const std::string file = path.string();
    const std::string bytes = read_file(path);
    const NpyHeader h = parse_npy_header(bytes, file);

    RawNpy raw;
    raw.rows = h.shape.size() == 2 ? h.shape[0] : 1;
    raw.cols = h.shape.size() == 2 ? h.shape[1] : h.shape[0];
    const std::size_t count = raw.rows * raw.cols;
    std::size_t width = 0;
    if (h.descr == "<f8") width = 8;
    else if (h.descr == "<f4") width = 4;
    else if (allow_int && (h.descr == "<i8" || h.descr == "<i4")) width = h.descr == "<i8" ? 8 : 4;
    else throw FormatError(file + ": unsupported dtype '" + h.descr + "'");

    const std::string_view payload = std::string_view(bytes).substr(h.data_offset);
    if (payload.size() != count * width) {
        throw FormatError(file + ": payload holds " + std::to_string(payload.size()) + " bytes, shape requires " +
                          std::to_string(count * width));
    }
    if (h.descr == "<f8") raw.values = widen_payload<double>(payload, count);
    else if (h.descr == "<f4") raw.values = widen_payload<float>(payload, count);
    else if (h.descr == "<i8") raw.values = widen_payload<std::int64_t>(payload, count), raw.integral = true;
    else raw.values = widen_payload<std::int32_t>(payload, count), raw.integral = true;
    return raw;
}

inline bool parse_double(std::string_view tok, double& out) {
    tok = trim(tok);
    if (tok.empty()) return false;
    if (tok.front() == '+') tok.remove_prefix(1);
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
    return ec == std::errc{} && p == tok.data() + tok.size();
}

inline Matrix read_csv(const std::filesystem::path& path) {
    const std::string file = path.string();
    const std::string text = read_file(path);
    std::vector<double> values;
    std::size_t cols = 0;
    std::size_t rows = 0;
    std::size_t line_no = 0;
    std::string_view rest(text);
    while (!rest.empty()) {
        auto nl = rest.find('\n');
        auto line = trim(rest.substr(0, nl));
        rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
        ++line_no;
        if (line.empty()) continue;

        std::vector<double> fields;
        bool numeric = true;
        std::string_view cur = line;
        while (true) {
            auto comma = cur.find(',');
            double v = 0.0;
            if (!parse_double(cur.substr(0, comma), v)) numeric = false;
            fields.push_back(v);
            if (comma == std::string_view::npos) break;
            cur.remove_prefix(comma + 1);
        }
        if (!numeric) {
            // Only the first non-empty line may be a header.
            if (rows == 0 && cols == 0) {
                cols = fields.size();
                continue;
            }
            throw FormatError(file + ": non-numeric field on line " + std::to_string(line_no));
        }
        if (cols == 0) cols = fields.size();
        if (fields.size() != cols) {
            throw FormatError(file + ": ragged row on line " + std::to_string(line_no) + " (" +
                              std::to_string(fields.size()) + " fields, expected " + std::to_string(cols) + ")");
        }
        values.insert(values.end(), fields.begin(), fields.end());
        ++rows;
    }
    if (rows == 0) cols = 0;
    return Matrix(rows, cols, std::move(values));
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace detail

inline Matrix load_matrix(const std::filesystem::path& path, FileFormat format) {
    Matrix m;
    if (format == FileFormat::npy) {
        auto raw = detail::read_npy(path, false);
        m = Matrix(raw.rows, raw.cols, std::move(raw.values));
    } else {
        m = detail::read_csv(path);
    }
    detail::check_finite(m, path.string());
    return m;
}

inline Matrix load_matrix(const std::filesystem::path& path) { return load_matrix(path, format_from_path(path)); }

inline void save_matrix(const Matrix& m, const std::filesystem::path& path, FileFormat format) {
    if (m.data.size() != m.rows * m.cols) throw DimensionError("matrix data length does not match its shape");
    if (format == FileFormat::npy) {
        std::string bytes = detail::npy_header("<f8", m.rows, m.cols, false);
        bytes.append(reinterpret_cast<const char*>(m.data.data()), m.data.size() * sizeof(double));
        detail::write_file(path, bytes);
        return;
    }
    std::string text;
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (j) text.push_back(',');
            text += detail::format_double(m(i, j));
        }
        text.push_back('\n');
    }
    detail::write_file(path, text);
}

inline void save_matrix(const Matrix& m, const std::filesystem::path& path) {
    save_matrix(m, path, format_from_path(path));
}

/// Writes a 1-D float64 array (shape (n,)).
inline void save_vector(std::span<const double> v, const std::filesystem::path& path) {
    std::string bytes = detail::npy_header("<f8", 1, v.size(), true);
    bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    detail::write_file(path, bytes);
}

inline std::vector<double> load_vector(const std::filesystem::path& path) {
    return as_vector(load_matrix(path));
}

/// Labels are stored as 1-D <i8 npy arrays; csv label files hold one
/// integer per line (a single column, optional header).
inline LabelVector load_labels(const std::filesystem::path& path) {
    std::vector<double> vals;
    if (format_from_path(path) == FileFormat::npy) {
        auto raw = detail::read_npy(path, true);
        if (raw.rows != 1 && raw.cols != 1) throw FormatError(path.string() + ": labels must be one-dimensional");
        vals = std::move(raw.values);
    } else {
        vals = as_vector(detail::read_csv(path));
    }
    std::vector<std::int64_t> out;
    out.reserve(vals.size());
    for (double v : vals) {
        if (!std::isfinite(v) || v != std::floor(v) || v < 0) {
            throw DataError(path.string() + ": label values must be non-negative integers");
        }
        out.push_back(static_cast<std::int64_t>(v));
    }
    return LabelVector::from_values(std::move(out));
}

inline void save_labels(const LabelVector& labels, const std::filesystem::path& path) {
    std::string bytes = detail::npy_header("<i8", 1, labels.size(), true);
    bytes.append(reinterpret_cast<const char*>(labels.values.data()), labels.values.size() * sizeof(std::int64_t));
    detail::write_file(path, bytes);
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

inline constexpr std::string_view kManifestFileKeys[] = {
    "activations", "sae_dict", "cbm_dict", "sae_codes", "cbm_codes", "concept_labels", "class_labels",
};

/// A dataset manifest: named file references plus free-form metadata.
/// Paths are stored relative to the manifest file and resolved on load.
struct Manifest {
    std::filesystem::path base_dir;
    std::map<std::string, std::filesystem::path> files;
    std::map<std::string, std::string> metadata;

    std::optional<Matrix> activations;
    std::optional<Matrix> sae_dict;
    std::optional<Matrix> cbm_dict;
    std::optional<Matrix> sae_codes;
    std::optional<Matrix> cbm_codes;
    std::optional<Matrix> concept_labels;
    std::optional<LabelVector> class_labels;

    bool has(std::string_view key) const { return files.count(std::string(key)) != 0; }

    std::filesystem::path path_of(std::string_view key) const {
        auto it = files.find(std::string(key));
        if (it == files.end()) throw ManifestError("manifest has no '" + std::string(key) + "' entry");
        return it->second.is_absolute() ? it->second : base_dir / it->second;
    }

    const std::optional<Matrix>* matrix_slot(std::string_view key) const {
        if (key == "activations") return &activations;
        if (key == "sae_dict") return &sae_dict;
        if (key == "cbm_dict") return &cbm_dict;
        if (key == "sae_codes") return &sae_codes;
        if (key == "cbm_codes") return &cbm_codes;
        if (key == "concept_labels") return &concept_labels;
        return nullptr;
    }
};

namespace detail {

struct DimRef {
    std::string key;
    std::string file;
    std::size_t rows;
    std::size_t cols;
};

inline void require_equal(const DimRef& a, bool a_rows, const DimRef& b, bool b_rows, const char* what) {
    const auto va = a_rows ? a.rows : a.cols;
    const auto vb = b_rows ? b.rows : b.cols;
    if (va == vb) return;
    auto describe = [](const DimRef& r, bool rows) {
        return r.key + " ('" + r.file + "', " + std::to_string(r.rows) + "x" + std::to_string(r.cols) + ") " +
               (rows ? "rows " : "cols ") + std::to_string(rows ? r.rows : r.cols);
    };
    throw DimensionError(std::string(what) + " mismatch: " + describe(a, a_rows) + " vs " + describe(b, b_rows));
}

} // namespace detail

/// Checks that every loaded entry agrees on n (samples), d (ambient
/// dimension) and the per-dictionary atom counts.
inline void validate_manifest(const Manifest& m) {
    std::map<std::string, detail::DimRef> dims;
    for (auto key : kManifestFileKeys) {
        const std::string k(key);
        if (!m.has(k)) continue;
        if (k == "class_labels") {
            if (m.class_labels) dims.emplace(k, detail::DimRef{k, m.path_of(k).string(), m.class_labels->size(), 1});
            continue;
        }
        const auto& slot = *m.matrix_slot(k);
        if (slot) dims.emplace(k, detail::DimRef{k, m.path_of(k).string(), slot->rows, slot->cols});
    }
    auto get = [&](const char* k) -> const detail::DimRef* {
        auto it = dims.find(k);
        return it == dims.end() ? nullptr : &it->second;
    };
    const auto* act = get("activations");
    const auto* sd = get("sae_dict");
    const auto* cd = get("cbm_dict");
    const auto* sc = get("sae_codes");
    const auto* cc = get("cbm_codes");
    const auto* cl = get("concept_labels");
    const auto* yl = get("class_labels");

    // Ambient dimension.
    if (act && sd) detail::require_equal(*sd, false, *act, false, "ambient dimension");
    if (act && cd) detail::require_equal(*cd, false, *act, false, "ambient dimension");
    if (!act && sd && cd) detail::require_equal(*sd, false, *cd, false, "ambient dimension");
    // Sample count.
    const detail::DimRef* n_ref = act ? act : (sc ? sc : (cc ? cc : (cl ? cl : yl)));
    for (const auto* r : {sc, cc, cl, yl}) {
        if (r && n_ref && r != n_ref) detail::require_equal(*r, true, *n_ref, true, "sample count");
    }
    // Atom counts.
    if (sd && sc) detail::require_equal(*sc, false, *sd, true, "SAE atom count");
    if (cd && cc) detail::require_equal(*cc, false, *cd, true, "CBM concept count");
    if (cd && cl) detail::require_equal(*cl, false, *cd, true, "CBM concept count");
    if (!cd && cc && cl) detail::require_equal(*cl, false, *cc, false, "CBM concept count");
}

inline Manifest load_manifest(const std::filesystem::path& path, std::span<const std::string_view> required = {}) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ManifestError(path.string() + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw ManifestError(path.string() + ": manifest must be a JSON object");

    Manifest m;
    m.base_dir = path.parent_path();
    for (auto key : kManifestFileKeys) {
        const std::string k(key);
        if (!j.contains(k) || j[k].is_null()) continue;
        if (!j[k].is_string()) throw ManifestError(path.string() + ": '" + k + "' must be a file path string");
        m.files[k] = std::filesystem::path(j[k].get<std::string>());
    }
    for (auto key : required) {
        if (!m.has(key)) throw ManifestError(path.string() + ": missing required key '" + std::string(key) + "'");
    }
    if (j.contains("metadata")) {
        if (!j["metadata"].is_object()) throw ManifestError(path.string() + ": 'metadata' must be an object");
        for (auto& [k, v] : j["metadata"].items()) m.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }

    for (const auto& [k, rel] : m.files) {
        const auto p = m.path_of(k);
        if (!std::filesystem::exists(p)) throw ManifestError(path.string() + ": '" + k + "' refers to missing file '" + p.string() + "'");
        if (k == "class_labels") {
            m.class_labels = load_labels(p);
            continue;
        }
        auto mat = load_matrix(p);
        if (k == "activations") m.activations = std::move(mat);
        else if (k == "sae_dict") m.sae_dict = std::move(mat);
        else if (k == "cbm_dict") m.cbm_dict = std::move(mat);
        else if (k == "sae_codes") m.sae_codes = std::move(mat);
        else if (k == "cbm_codes") m.cbm_codes = std::move(mat);
        else if (k == "concept_labels") m.concept_labels = std::move(mat);
    }
    validate_manifest(m);
    return m;
}

/// Writes the manifest JSON (file entries as stored, i.e. usually relative).
inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    for (auto key : kManifestFileKeys) {
        const std::string k(key);
        auto it = m.files.find(k);
        if (it != m.files.end()) j[k] = it->second.generic_string();
    }
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : m.metadata) meta[k] = v;
    j["metadata"] = meta;
    detail::write_file(path, j.dump(2) + "\n");
}

} // namespace conealign
