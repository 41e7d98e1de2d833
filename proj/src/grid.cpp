#include "fbtc/grid.hpp"

#include "fbtc/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fbtc {

std::vector<std::vector<double>> build_coord_sets(const ObservationSet& obs) {
    std::vector<std::vector<double>> sets(obs.order);
    for (int k = 0; k < obs.order; ++k) {
        std::vector<double>& s = sets[k];
        s.reserve(obs.points.size());
        for (const auto& p : obs.points) s.push_back(p.index[k]);
        std::sort(s.begin(), s.end());
        s.erase(std::unique(s.begin(), s.end()), s.end());
    }
    return sets;
}

GriddedData allocate(const ObservationSet& obs) {
    if (obs.points.empty()) throw std::invalid_argument("allocate: no observations");
    GriddedData g;
    g.coord_sets = build_coord_sets(obs);
    std::vector<int> dims;
    dims.reserve(g.coord_sets.size());
    for (const auto& s : g.coord_sets) dims.push_back(static_cast<int>(s.size()));
    g.Y = DenseTensor(dims);
    g.O = MaskTensor(dims);
    g.multiplicity.assign(g.Y.values.size(), 0);

    std::vector<double> sums(g.Y.values.size(), 0.0);
    std::vector<int> idx(obs.order);
    for (const auto& p : obs.points) {
        for (int k = 0; k < obs.order; ++k) {
            const auto& s = g.coord_sets[k];
            const auto it = std::lower_bound(s.begin(), s.end(), p.index[k]);
            idx[k] = static_cast<int>(it - s.begin());
        }
        const auto f = static_cast<size_t>(g.Y.flat_index(idx));
        sums[f] += p.value;
        g.multiplicity[f] += 1;
        g.O.flags[f] = 1;
    }
    for (size_t f = 0; f < sums.size(); ++f)
        if (g.multiplicity[f] > 0) g.Y.values[f] = sums[f] / g.multiplicity[f];
    return g;
}

ObservationSet deallocate(const GriddedData& g) {
    ObservationSet obs;
    obs.order = g.Y.order();
    const int K = obs.order;
    std::vector<int> idx(K, 0);
    const std::int64_t total = g.Y.size();
    for (std::int64_t f = 0; f < total; ++f) {
        if (g.O.flags[static_cast<size_t>(f)]) {
            Observation p;
            p.index.resize(K);
            for (int k = 0; k < K; ++k) p.index[k] = g.coord_sets[k][idx[k]];
            p.value = g.Y.values[static_cast<size_t>(f)];
            obs.points.push_back(std::move(p));
        }
        for (int k = K - 1; k >= 0; --k) {
            if (++idx[k] < g.Y.dims[k]) break;
            idx[k] = 0;
        }
    }
    if (obs.points.empty()) throw std::invalid_argument("deallocate: empty mask");
    return obs;
}

ObservationSet quantize_coords(const ObservationSet& obs, double tol) {
    if (tol <= 0) return obs;
    ObservationSet out = obs;
    for (auto& p : out.points)
        for (auto& x : p.index) x = std::round(x / tol) * tol;
    return out;
}

namespace {

// True when every comma-separated cell is a fully consumed number.
bool numeric_row(const std::string& line, std::vector<double>& out) {
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

ObservationSet read_point_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty csv " + path);
    int cols = 1;
    for (char c : line) cols += c == ',';
    ObservationSet obs;
    obs.order = cols - 1;
    if (obs.order < 1) throw IoError("bad header in " + path);
    // the header is optional; keep a leading numeric line as data
    std::vector<double> first;
    if (numeric_row(line, first) && static_cast<int>(first.size()) == cols) {
        Observation p;
        p.index.assign(first.begin(), first.end() - 1);
        p.value = first.back();
        obs.points.push_back(std::move(p));
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Observation p;
        p.index.resize(obs.order);
        std::stringstream ss(line);
        std::string tok;
        for (int k = 0; k < obs.order; ++k) {
            if (!std::getline(ss, tok, ',')) throw IoError("short row in " + path);
            p.index[k] = std::stod(tok);
        }
        if (!std::getline(ss, tok, ',')) throw IoError("short row in " + path);
        p.value = std::stod(tok);
        obs.points.push_back(std::move(p));
    }
    if (obs.points.empty()) throw IoError("no data rows in " + path);
    return obs;
}

void write_point_csv(const std::string& path, const ObservationSet& obs) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    for (int k = 0; k < obs.order; ++k) out << "i" << (k + 1) << ",";
    out << "y\n";
    char buf[64];
    for (const auto& p : obs.points) {
        for (double x : p.index) {
            std::snprintf(buf, sizeof buf, "%.17g", x);
            out << buf << ",";
        }
        std::snprintf(buf, sizeof buf, "%.17g", p.value);
        out << buf << "\n";
    }
}

}  // namespace fbtc
