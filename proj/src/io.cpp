#include "fbtc/io.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fbtc {

namespace {

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream f(path, mode);
    if (!f) throw IoError("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream f(path, mode);
    if (!f) throw IoError("cannot open for reading: " + path);
    return f;
}

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<int> read_dims_header(std::istream& in, const std::string& path) {
    int k = 0;
    if (!(in >> k) || k < 1) throw IoError("bad tensor header in " + path);
    std::vector<int> dims(static_cast<size_t>(k));
    for (int& d : dims)
        if (!(in >> d) || d < 1) throw IoError("bad tensor dims in " + path);
    return dims;
}

}  // namespace

void write_tensor_text(const std::string& path, const DenseTensor& t) {
    std::ofstream f = open_out(path);
    f << t.order();
    for (int d : t.dims) f << ' ' << d;
    f << '\n';
    for (double v : t.values) f << fmt17(v) << '\n';
    if (!f) throw IoError("write failed: " + path);
}

DenseTensor read_tensor_text(const std::string& path) {
    std::ifstream f = open_in(path);
    DenseTensor t(read_dims_header(f, path));
    for (double& v : t.values)
        if (!(f >> v)) throw IoError("truncated tensor file: " + path);
    return t;
}

void write_mask_text(const std::string& path, const MaskTensor& m) {
    std::ofstream f = open_out(path);
    f << m.dims.size();
    for (int d : m.dims) f << ' ' << d;
    f << '\n';
    for (auto v : m.flags) f << int(v) << '\n';
    if (!f) throw IoError("write failed: " + path);
}

MaskTensor read_mask_text(const std::string& path) {
    std::ifstream f = open_in(path);
    MaskTensor m(read_dims_header(f, path));
    for (auto& v : m.flags) {
        int x = 0;
        if (!(f >> x) || (x != 0 && x != 1)) throw IoError("bad mask entry in " + path);
        v = static_cast<std::uint8_t>(x);
    }
    return m;
}

void write_image(const std::string& path, const DenseTensor& img) {
    const bool rgb = img.order() == 3 && img.dims[2] == 3;
    if (!(img.order() == 2 || rgb)) throw IoError("write_image: expects HxW or HxWx3");
    std::ofstream f = open_out(path, std::ios::binary);
    f << (rgb ? "P6" : "P5") << '\n' << img.dims[1] << ' ' << img.dims[0] << '\n' << 255 << '\n';
    for (double v : img.values) {
        const double c = std::min(255.0, std::max(0.0, std::round(v)));
        f.put(static_cast<char>(static_cast<unsigned char>(c)));
    }
    if (!f) throw IoError("write failed: " + path);
}

DenseTensor read_image(const std::string& path) {
    std::ifstream f = open_in(path, std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (!f || (magic != "P5" && magic != "P6") || w < 1 || h < 1 || maxval != 255)
        throw IoError("unsupported image header in " + path);
    f.get();  // single whitespace after maxval
    const bool rgb = magic == "P6";
    DenseTensor img(rgb ? std::vector<int>{h, w, 3} : std::vector<int>{h, w});
    for (double& v : img.values) {
        const int c = f.get();
        if (c == EOF) throw IoError("truncated image file: " + path);
        v = static_cast<double>(c);
    }
    return img;
}

namespace {

// True when every comma-separated cell is a fully consumed number.
bool parse_numeric_row(const std::string& line, std::vector<double>& out) {
    out.clear();
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            size_t pos = 0;
            const double v = std::stod(cell, &pos);
            while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
            if (pos != cell.size()) return false;
            out.push_back(v);
        } catch (const std::exception&) {
            return false;
        }
    }
    return !out.empty();
}

}  // namespace

std::vector<std::vector<double>> read_query_csv(const std::string& path) {
    std::ifstream f = open_in(path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("empty query file: " + path);
    size_t k = 1;
    for (char c : line)
        if (c == ',') ++k;
    std::vector<std::vector<double>> rows;
    // the first line is an optional header; keep it when it is already data
    std::vector<double> first;
    if (parse_numeric_row(line, first)) {
        if (first.size() != k) throw IoError("ragged query row in " + path);
        rows.push_back(std::move(first));
    }
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (row.size() != k) throw IoError("ragged query row in " + path);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw IoError("no query rows in " + path);
    return rows;
}

std::string file_digest(const std::string& path) {
    std::ifstream f = open_in(path, std::ios::binary);
    std::uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        const std::streamsize n = f.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!f) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

void write_coords_csv(const std::string& path, const std::vector<std::vector<double>>& coords) {
    std::ofstream f = open_out(path);
    f << "mode,position,coordinate\n";
    for (size_t k = 0; k < coords.size(); ++k)
        for (size_t i = 0; i < coords[k].size(); ++i)
            f << k << ',' << i << ',' << fmt17(coords[k][i]) << '\n';
    if (!f) throw IoError("write failed: " + path);
}

std::vector<std::vector<double>> read_coords_csv(const std::string& path) {
    std::ifstream f = open_in(path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("empty coords file: " + path);
    std::vector<std::vector<double>> coords;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 3) throw IoError("bad coords row in " + path);
        const size_t mode = static_cast<size_t>(std::stoul(cells[0]));
        if (coords.size() <= mode) coords.resize(mode + 1);
        coords[mode].push_back(std::stod(cells[2]));
    }
    return coords;
}

}  // namespace fbtc
