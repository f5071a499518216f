#pragma once

#include <nlohmann/json.hpp>

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

// Files: RFC-4180 CSV, JSON, binary dumps with a JSON header, SHA-256, and the
// output-directory lock.

namespace qad {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const fs::path& p);

/// Shortest round-trip decimal form ('.' decimal point, no locale).
std::string format_number(double v);
std::string csv_escape(const std::string& field);

class CsvWriter {
public:
    CsvWriter(const fs::path& path, const std::vector<std::string>& header);
    ~CsvWriter();
    CsvWriter(const CsvWriter&) = delete;
    CsvWriter& operator=(const CsvWriter&) = delete;

    CsvWriter& operator<<(double v);
    CsvWriter& operator<<(long v);
    CsvWriter& operator<<(int v) { return *this << static_cast<long>(v); }
    CsvWriter& operator<<(const std::string& s);
    CsvWriter& operator<<(const char* s) { return *this << std::string(s); }
    void end_row();
    /// Flush and move the finished file into place.
    void close();

private:
    fs::path path_, tmp_;
    std::ofstream out_;
    size_t columns_ = 0;
    size_t in_row_ = 0;
    bool closed_ = false;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const;  // throws IoError when absent
    double number(size_t row, const std::string& name) const;
    std::vector<double> numbers(const std::string& name) const;
};

CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const fs::path& p);

/// Write via a temporary file and rename, so readers never see a partial file.
void write_text_atomic(const fs::path& p, const std::string& text);
std::string read_text(const fs::path& p);
void write_json(const fs::path& p, const json& j);
json read_json(const fs::path& p);

/// Binary dump: "QADBLOB1", header length (u64 LE), header JSON, float64 payload.
/// The header gains "payload_sha256" and "payload_count".
void write_blob(const fs::path& p, json header, const std::vector<double>& payload);
struct Blob {
    json header;
    std::vector<double> payload;
};
Blob read_blob(const fs::path& p);

/// Exclusive advisory lock on <dir>/.qad.lock for the lifetime of the object.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    int fd_ = -1;
    fs::path path_;
};

}  // namespace qad
