#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace longgee {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// One trip, as it appears in a CSV row.
struct TripRecord {
    std::string subject_id;
    int trip_index = 0; // 1-based ordinal within subject
    double time = 0.0;  // rescaled study time in [0,1]
    double offset = 0.0; // mileage, > 0
    Eigen::VectorXd x;  // trip-level covariates
    std::int64_t count = 0;
};

// All trips of one subject, column-oriented for the numerics.
struct Subject {
    std::string subject_id;
    Eigen::VectorXd z;               // subject-level covariates
    std::vector<int> trip_index;     // 1-based, parallel to the columns below
    Eigen::VectorXd time;
    Eigen::VectorXd offset;
    Eigen::MatrixXd x;               // n_trips x p_x
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> count;

    int n_trips() const { return static_cast<int>(time.size()); }
};

struct Panel {
    std::vector<Subject> subjects;
    int p_z = 0;
    int p_x = 0;
    std::vector<std::string> z_names; // column names, kept for round-tripping
    std::vector<std::string> x_names;

    int n_subjects() const { return static_cast<int>(subjects.size()); }
    std::int64_t n_obs() const {
        std::int64_t n = 0;
        for (const auto& s : subjects) n += s.n_trips();
        return n;
    }
};

namespace detail {

inline void check_trip(const std::string& subject, double time, double offset,
                       std::int64_t count, const std::string& where) {
    if (!(offset > 0.0))
        throw DataError("offset must be > 0 (subject " + subject + ", " + where + ")");
    if (!(time >= 0.0 && time <= 1.0))
        throw DataError("time must lie in [0,1] (subject " + subject + ", " + where + ")");
    if (count < 0)
        throw DataError("count must be >= 0 (subject " + subject + ", " + where + ")");
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

// Assemble a panel from row records. Rows may arrive in any order; trips are
// sorted by (time, trip_index) within subject and subjects keep first-appearance
// order. Missing trip indices (0) are assigned by encounter order.
inline Panel build_panel(std::vector<TripRecord> rows, int p_z,
                         const std::vector<Eigen::VectorXd>* subject_z = nullptr,
                         const std::map<std::string, Eigen::VectorXd>* z_by_id = nullptr) {
    (void)subject_z;
    Panel panel;
    panel.p_z = p_z;

    std::map<std::string, int> index_of;
    std::vector<std::string> order;
    std::vector<std::vector<TripRecord>> grouped;
    for (auto& r : rows) {
        auto it = index_of.find(r.subject_id);
        if (it == index_of.end()) {
            index_of.emplace(r.subject_id, static_cast<int>(order.size()));
            order.push_back(r.subject_id);
            grouped.emplace_back();
            it = index_of.find(r.subject_id);
        }
        grouped[it->second].push_back(std::move(r));
    }
    if (grouped.empty()) throw DataError("panel has no rows");

    panel.p_x = static_cast<int>(grouped.front().front().x.size());
    for (std::size_t g = 0; g < grouped.size(); ++g) {
        auto& trips = grouped[g];
        int next_index = 0;
        for (auto& t : trips) next_index = std::max(next_index, t.trip_index);
        for (auto& t : trips)
            if (t.trip_index <= 0) t.trip_index = ++next_index;
        std::stable_sort(trips.begin(), trips.end(), [](const TripRecord& a, const TripRecord& b) {
            if (a.time != b.time) return a.time < b.time;
            return a.trip_index < b.trip_index;
        });
        for (std::size_t j = 1; j < trips.size(); ++j)
            if (trips[j].time == trips[j - 1].time && trips[j].trip_index == trips[j - 1].trip_index)
                throw DataError("duplicate (subject, time, trip_index) for subject " + order[g]);

        Subject s;
        s.subject_id = order[g];
        const int k = static_cast<int>(trips.size());
        s.trip_index.resize(k);
        s.time.resize(k);
        s.offset.resize(k);
        s.x.resize(k, panel.p_x);
        s.count.resize(k);
        for (int j = 0; j < k; ++j) {
            const auto& t = trips[j];
            if (static_cast<int>(t.x.size()) != panel.p_x)
                throw DataError("inconsistent trip covariate dimension for subject " + s.subject_id);
            detail::check_trip(s.subject_id, t.time, t.offset, t.count,
                               "trip_index " + std::to_string(t.trip_index));
            s.trip_index[j] = t.trip_index;
            s.time[j] = t.time;
            s.offset[j] = t.offset;
            s.x.row(j) = t.x.transpose();
            s.count[j] = t.count;
        }
        if (z_by_id != nullptr) {
            auto it = z_by_id->find(s.subject_id);
            if (it == z_by_id->end())
                throw DataError("missing subject covariates for subject " + s.subject_id);
            s.z = it->second;
        } else {
            s.z = Eigen::VectorXd::Zero(p_z);
        }
        if (static_cast<int>(s.z.size()) != p_z)
            throw DataError("inconsistent subject covariate dimension for subject " + s.subject_id);
        panel.subjects.push_back(std::move(s));
    }
    for (int j = 0; j < panel.p_z; ++j) panel.z_names.push_back("z" + std::to_string(j + 1));
    for (int j = 0; j < panel.p_x; ++j) panel.x_names.push_back("x" + std::to_string(j + 1));
    return panel;
}

struct CsvSchema {
    std::string subject_col = "subject";
    std::string time_col = "time";
    std::string offset_col = "offset";
    std::string count_col = "count";
    std::string trip_index_col = "trip_index"; // optional in the file
    std::vector<std::string> z_cols;
    std::vector<std::string> x_cols;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_double(const std::string& s, const std::string& col, std::size_t row) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw DataError("non-numeric value '" + s + "' in column " + col + " at data row " +
                        std::to_string(row));
    return v;
}

inline std::int64_t parse_count(const std::string& s, const std::string& col, std::size_t row) {
    char* end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
        throw DataError("non-integer value '" + s + "' in column " + col + " at data row " +
                        std::to_string(row));
    return v;
}

} // namespace detail

inline Panel load_panel(std::istream& in, const CsvSchema& schema) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = detail::split_csv_line(line);
    std::map<std::string, int> col;
    for (std::size_t j = 0; j < header.size(); ++j) col[header[j]] = static_cast<int>(j);

    auto require = [&](const std::string& name) {
        auto it = col.find(name);
        if (it == col.end()) throw DataError("missing column '" + name + "'");
        return it->second;
    };
    const int c_subject = require(schema.subject_col);
    const int c_time = require(schema.time_col);
    const int c_offset = require(schema.offset_col);
    const int c_count = require(schema.count_col);
    const int c_trip = col.count(schema.trip_index_col) ? col[schema.trip_index_col] : -1;
    std::vector<int> c_z, c_x;
    for (const auto& name : schema.z_cols) c_z.push_back(require(name));
    for (const auto& name : schema.x_cols) c_x.push_back(require(name));

    std::vector<TripRecord> rows;
    std::map<std::string, Eigen::VectorXd> z_by_id;
    std::size_t row_no = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        ++row_no;
        const auto cells = detail::split_csv_line(line);
        auto cell = [&](int j) -> const std::string& {
            if (j < 0 || j >= static_cast<int>(cells.size()))
                throw DataError("short row at data row " + std::to_string(row_no));
            return cells[j];
        };
        TripRecord r;
        r.subject_id = cell(c_subject);
        r.time = detail::parse_double(cell(c_time), schema.time_col, row_no);
        r.offset = detail::parse_double(cell(c_offset), schema.offset_col, row_no);
        r.count = detail::parse_count(cell(c_count), schema.count_col, row_no);
        if (c_trip >= 0)
            r.trip_index = static_cast<int>(detail::parse_count(cell(c_trip), schema.trip_index_col, row_no));
        if (!(r.offset > 0.0))
            throw DataError("offset must be > 0 at data row " + std::to_string(row_no));
        if (!(r.time >= 0.0 && r.time <= 1.0))
            throw DataError("time outside [0,1] at data row " + std::to_string(row_no));
        if (r.count < 0)
            throw DataError("negative count at data row " + std::to_string(row_no));
        r.x.resize(c_x.size());
        for (std::size_t j = 0; j < c_x.size(); ++j)
            r.x[j] = detail::parse_double(cell(c_x[j]), schema.x_cols[j], row_no);
        Eigen::VectorXd z(c_z.size());
        for (std::size_t j = 0; j < c_z.size(); ++j)
            z[j] = detail::parse_double(cell(c_z[j]), schema.z_cols[j], row_no);
        auto it = z_by_id.find(r.subject_id);
        if (it == z_by_id.end())
            z_by_id.emplace(r.subject_id, z);
        else if (z.size() > 0 && (it->second - z).cwiseAbs().maxCoeff() > 0.0)
            throw DataError("subject covariates differ across rows for subject " + r.subject_id +
                            " at data row " + std::to_string(row_no));
        rows.push_back(std::move(r));
    }
    Panel p = build_panel(std::move(rows), static_cast<int>(c_z.size()), nullptr, &z_by_id);
    if (!schema.z_cols.empty()) p.z_names = schema.z_cols;
    if (!schema.x_cols.empty()) p.x_names = schema.x_cols;
    return p;
}

inline Panel load_panel(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return load_panel(in, schema);
}

inline void write_panel(const Panel& panel, std::ostream& out) {
    out << "subject,trip_index,time,offset,count";
    for (const auto& n : panel.z_names) out << ',' << n;
    for (const auto& n : panel.x_names) out << ',' << n;
    out << '\n';
    for (const auto& s : panel.subjects) {
        for (int j = 0; j < s.n_trips(); ++j) {
            out << s.subject_id << ',' << s.trip_index[j] << ','
                << detail::format_double(s.time[j]) << ','
                << detail::format_double(s.offset[j]) << ',' << s.count[j];
            for (int c = 0; c < panel.p_z; ++c) out << ',' << detail::format_double(s.z[c]);
            for (int c = 0; c < panel.p_x; ++c) out << ',' << detail::format_double(s.x(j, c));
            out << '\n';
        }
    }
    if (!out) throw IoError("write failure");
}

inline void write_panel(const Panel& panel, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    write_panel(panel, out);
    out.flush();
    if (!out) throw IoError("write failure on '" + path + "'");
}

// Schema matching write_panel output for a given panel.
inline CsvSchema default_schema(const Panel& panel) {
    CsvSchema s;
    s.z_cols = panel.z_names;
    s.x_cols = panel.x_names;
    return s;
}

inline bool panels_equal(const Panel& a, const Panel& b) {
    if (a.n_subjects() != b.n_subjects() || a.p_z != b.p_z || a.p_x != b.p_x) return false;
    for (int i = 0; i < a.n_subjects(); ++i) {
        const auto& sa = a.subjects[i];
        const auto& sb = b.subjects[i];
        if (sa.subject_id != sb.subject_id || sa.n_trips() != sb.n_trips()) return false;
        if (sa.trip_index != sb.trip_index) return false;
        if (sa.z.size() != sb.z.size() || !sa.z.cwiseEqual(sb.z).all()) return false;
        if (!sa.time.cwiseEqual(sb.time).all()) return false;
        if (!sa.offset.cwiseEqual(sb.offset).all()) return false;
        if (sa.x.cols() != sb.x.cols() || !sa.x.cwiseEqual(sb.x).all()) return false;
        if (!sa.count.cwiseEqual(sb.count).all()) return false;
    }
    return true;
}

} // namespace longgee
