#include "qad/io.hpp"

#include <openssl/evp.h>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <sstream>

namespace qad {

std::string sha256_hex(const void* data, size_t n) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(data, n, md.data(), &len, EVP_sha256(), nullptr) != 1) throw IoError("sha256: digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

std::string sha256_hex(const std::string& bytes) { return sha256_hex(bytes.data(), bytes.size()); }

std::string sha256_file(const fs::path& p) { return sha256_hex(read_text(p)); }

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::array<char, 64> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

CsvWriter::CsvWriter(const fs::path& path, const std::vector<std::string>& header)
    : path_(path), tmp_(path.string() + ".part"), columns_(header.size()) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot write " + tmp_.string());
    for (size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << csv_escape(header[i]);
    out_ << "\r\n";
}

CsvWriter::~CsvWriter() {
    if (!closed_) {
        out_.close();
        std::error_code ec;
        fs::remove(tmp_, ec);
    }
}

CsvWriter& CsvWriter::operator<<(double v) { return *this << format_number(v); }
CsvWriter& CsvWriter::operator<<(long v) { return *this << std::to_string(v); }

CsvWriter& CsvWriter::operator<<(const std::string& s) {
    if (in_row_ == columns_) throw IoError(path_.string() + ": too many fields in a row");
    out_ << (in_row_ ? "," : "") << csv_escape(s);
    ++in_row_;
    return *this;
}

void CsvWriter::end_row() {
    if (in_row_ != columns_) throw IoError(path_.string() + ": row has the wrong number of fields");
    out_ << "\r\n";
    in_row_ = 0;
}

void CsvWriter::close() {
    if (closed_) return;
    if (in_row_ != 0) throw IoError(path_.string() + ": unfinished row");
    out_.close();
    if (!out_) throw IoError("failed writing " + tmp_.string());
    fs::rename(tmp_, path_);
    closed_ = true;
}

int CsvTable::column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    throw IoError("csv: no column '" + name + "'");
}

double CsvTable::number(size_t row, const std::string& name) const {
    const std::string& f = rows.at(row).at(column(name));
    double v = 0;
    auto [end, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
    if (f.empty() || ec != std::errc() || end != f.data() + f.size())
        throw IoError("csv: column '" + name + "' row " + std::to_string(row) + " is not a number: '" + f + "'");
    return v;
}

std::vector<double> CsvTable::numbers(const std::string& name) const {
    std::vector<double> out;
    for (size_t r = 0; r < rows.size(); ++r) out.push_back(number(r, name));
    return out;
}

CsvTable parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, any = false;
    for (size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            rec.push_back(field);
            field.clear();
            any = true;
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            rec.push_back(field);
            records.push_back(rec);
            rec.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw IoError("csv: unterminated quoted field");
    if (any || !field.empty()) {
        rec.push_back(field);
        records.push_back(rec);
    }
    CsvTable t;
    if (records.empty()) return t;
    t.header = records.front();
    for (size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != t.header.size())
            throw IoError("csv: record " + std::to_string(r) + " has " + std::to_string(records[r].size()) +
                          " fields, header has " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(records[r]));
    }
    return t;
}

CsvTable read_csv(const fs::path& p) { return parse_csv(read_text(p)); }

void write_text_atomic(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    fs::path tmp = p.string() + ".part";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    fs::rename(tmp, p);
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_json(const fs::path& p, const json& j) { write_text_atomic(p, j.dump(2) + "\n"); }

json read_json(const fs::path& p) {
    try {
        return json::parse(read_text(p));
    } catch (const json::parse_error& e) {
        throw IoError(p.string() + ": " + e.what());
    }
}

namespace {
const char kMagic[8] = {'Q', 'A', 'D', 'B', 'L', 'O', 'B', '1'};
}

void write_blob(const fs::path& p, json header, const std::vector<double>& payload) {
    header["payload_count"] = payload.size();
    header["payload_sha256"] = sha256_hex(payload.data(), payload.size() * sizeof(double));
    std::string h = header.dump();
    std::string bytes(kMagic, 8);
    uint64_t n = h.size();
    for (int i = 0; i < 8; ++i) bytes += static_cast<char>((n >> (8 * i)) & 0xff);
    bytes += h;
    bytes.append(reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(double));
    write_text_atomic(p, bytes);
}

Blob read_blob(const fs::path& p) {
    std::string bytes = read_text(p);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw IoError(p.string() + ": not a blob file");
    uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    if (16 + n > bytes.size()) throw IoError(p.string() + ": truncated header");
    Blob b;
    b.header = json::parse(bytes.substr(16, n));
    size_t count = b.header.at("payload_count").get<size_t>();
    size_t off = 16 + n;
    if (bytes.size() - off != count * sizeof(double)) throw IoError(p.string() + ": payload size mismatch");
    b.payload.resize(count);
    std::memcpy(b.payload.data(), bytes.data() + off, count * sizeof(double));
    if (sha256_hex(b.payload.data(), count * sizeof(double)) != b.header.at("payload_sha256").get<std::string>())
        throw IoError(p.string() + ": payload hash mismatch");
    return b;
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".qad.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path_.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw IoError("output directory " + dir.string() + " is in use by another qad process (" + path_.string() + ")");
    }
    std::string pid = std::to_string(::getpid()) + "\n";
    if (::ftruncate(fd_, 0) == 0) {
        ssize_t w = ::write(fd_, pid.data(), pid.size());
        (void)w;
    }
}

DirectoryLock::~DirectoryLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

}  // namespace qad
