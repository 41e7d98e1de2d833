#pragma once

#include "fbtc/tensor.hpp"

#include <string>
#include <vector>

namespace fbtc {

struct Observation {
    std::vector<double> index;  // real-valued, one entry per mode
    double value = 0.0;
};

struct ObservationSet {
    int order = 0;
    std::vector<Observation> points;
};

// Gridded form: dense value tensor Y over the Cartesian product of the
// per-mode coordinate sets, indicator O, and per-cell multiplicity.
struct GriddedData {
    std::vector<std::vector<double>> coord_sets;  // strictly ascending
    DenseTensor Y;
    MaskTensor O;
    std::vector<int> multiplicity;  // flat, same layout as Y

    std::vector<int> dims() const { return Y.dims; }
};

std::vector<std::vector<double>> build_coord_sets(const ObservationSet& obs);

// Each point lands at the exact position of its coordinates in the coordinate
// sets; colliding points are averaged and their count retained.
GriddedData allocate(const ObservationSet& obs);

// One point per flagged cell. Errors on an empty mask.
ObservationSet deallocate(const GriddedData& g);

// Round coordinates to multiples of tol before gridding (0 = off).
ObservationSet quantize_coords(const ObservationSet& obs, double tol);

// Point-cloud CSV: header i1,...,iK,y; one observation per row.
ObservationSet read_point_csv(const std::string& path);
void write_point_csv(const std::string& path, const ObservationSet& obs);

}  // namespace fbtc
