#include "voxseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace voxseg {

double dice_region(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref) {
    if (pred.size() != ref.size()) throw std::invalid_argument("dice_region dim mismatch");
    int64_t np = 0, nr = 0, ni = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, r = ref[i] != 0;
        np += p;
        nr += r;
        ni += (p && r);
    }
    if (np == 0 && nr == 0) return 1.0;
    if (np == 0 || nr == 0) return 0.0;
    return 2.0 * double(ni) / double(np + nr);
}

double percentile_linear(std::vector<double> values, double p) {
    if (values.empty()) throw std::invalid_argument("percentile of empty set");
    std::sort(values.begin(), values.end());
    if (values.size() == 1) return values[0];
    const double rank = (p / 100.0) * double(values.size() - 1);
    const size_t lo = size_t(std::floor(rank));
    const size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - double(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

namespace {

struct Point3 {
    int64_t z, y, x;
};

// Boundary voxels: in the set with some 6-neighbor outside it (or outside
// the grid).
std::vector<Point3> boundary_voxels(const std::vector<uint8_t>& mask, const Dims3& dims) {
    std::vector<Point3> out;
    auto at = [&](int64_t z, int64_t y, int64_t x) -> bool {
        if (z < 0 || z >= dims[0] || y < 0 || y >= dims[1] || x < 0 || x >= dims[2]) return false;
        return mask[size_t((z * dims[1] + y) * dims[2] + x)] != 0;
    };
    for (int64_t z = 0; z < dims[0]; ++z)
        for (int64_t y = 0; y < dims[1]; ++y)
            for (int64_t x = 0; x < dims[2]; ++x) {
                if (!at(z, y, x)) continue;
                if (!at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) ||
                    !at(z, y, x - 1) || !at(z, y, x + 1))
                    out.push_back({z, y, x});
            }
    return out;
}

// Directed nearest-boundary distances in mm, one per voxel of `from`.
std::vector<double> directed_distances(const std::vector<Point3>& from,
                                       const std::vector<Point3>& to, const Spacing3& spacing) {
    std::vector<double> dists(from.size());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < int64_t(from.size()); ++i) {
        double best = std::numeric_limits<double>::max();
        const auto& a = from[size_t(i)];
        for (const auto& b : to) {
            const double dz = double(a.z - b.z) * spacing[0];
            const double dy = double(a.y - b.y) * spacing[1];
            const double dx = double(a.x - b.x) * spacing[2];
            const double d2 = dz * dz + dy * dy + dx * dx;
            if (d2 < best) best = d2;
        }
        dists[size_t(i)] = std::sqrt(best);
    }
    return dists;
}

bool any_set(const std::vector<uint8_t>& mask) {
    for (uint8_t v : mask)
        if (v) return true;
    return false;
}

}  // namespace

double hausdorff(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref,
                 const Dims3& dims, const Spacing3& spacing, int percentile) {
    if (pred.size() != ref.size() ||
        int64_t(pred.size()) != dims[0] * dims[1] * dims[2])
        throw std::invalid_argument("hausdorff dim mismatch");
    if (percentile < 1 || percentile > 100)
        throw std::invalid_argument("percentile must be in [1,100]");

    const bool has_pred = any_set(pred), has_ref = any_set(ref);
    if (!has_pred && !has_ref) return 0.0;
    if (!has_pred || !has_ref) return kHausdorffInf;

    const std::vector<Point3> bp = boundary_voxels(pred, dims);
    const std::vector<Point3> br = boundary_voxels(ref, dims);
    std::vector<double> d_pr = directed_distances(bp, br, spacing);
    std::vector<double> d_rp = directed_distances(br, bp, spacing);

    if (percentile == 100) {
        const double m1 = *std::max_element(d_pr.begin(), d_pr.end());
        const double m2 = *std::max_element(d_rp.begin(), d_rp.end());
        return std::max(m1, m2);
    }
    return std::max(percentile_linear(std::move(d_pr), double(percentile)),
                    percentile_linear(std::move(d_rp), double(percentile)));
}

CaseScores evaluate_case(const SegmentationMap& pred, const SegmentationMap& ref,
                         const Spacing3& spacing, int percentile) {
    if (pred.dims != ref.dims) throw std::invalid_argument("evaluate_case dim mismatch");
    const RegionMasks mp = regions_from_labels(pred);
    const RegionMasks mr = regions_from_labels(ref);
    CaseScores s;
    s.et = {dice_region(mp.et, mr.et), hausdorff(mp.et, mr.et, pred.dims, spacing, percentile)};
    s.wt = {dice_region(mp.wt, mr.wt), hausdorff(mp.wt, mr.wt, pred.dims, spacing, percentile)};
    s.tc = {dice_region(mp.tc, mr.tc), hausdorff(mp.tc, mr.tc, pred.dims, spacing, percentile)};
    return s;
}

AggregateStats aggregate_values(const std::vector<double>& values) {
    AggregateStats s;
    std::vector<double> finite;
    for (double v : values) {
        if (std::isinf(v))
            ++s.infinite_count;
        else
            finite.push_back(v);
    }
    s.finite_count = int(finite.size());
    if (finite.empty()) return s;

    double sum = 0.0;
    for (double v : finite) sum += v;
    s.mean = sum / double(finite.size());
    double sq = 0.0;
    for (double v : finite) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / double(finite.size()));
    s.median = percentile_linear(finite, 50.0);
    s.q1 = percentile_linear(finite, 25.0);
    s.q3 = percentile_linear(finite, 75.0);

    const double iqr = s.q3 - s.q1;
    const double lo_fence = s.q1 - 1.5 * iqr, hi_fence = s.q3 + 1.5 * iqr;
    s.whisker_lo = s.q3;
    s.whisker_hi = s.q1;
    bool any_in = false;
    for (double v : finite) {
        if (v < lo_fence || v > hi_fence) {
            s.outliers.push_back(v);
        } else {
            s.whisker_lo = any_in ? std::min(s.whisker_lo, v) : v;
            s.whisker_hi = any_in ? std::max(s.whisker_hi, v) : v;
            any_in = true;
        }
    }
    std::sort(s.outliers.begin(), s.outliers.end());
    return s;
}

AggregateReport aggregate(const std::vector<CaseScores>& cases) {
    if (cases.empty()) throw std::invalid_argument("aggregate over empty case list");
    auto collect = [&](auto pick) {
        std::vector<double> v;
        v.reserve(cases.size());
        for (const auto& c : cases) v.push_back(pick(c));
        return v;
    };
    AggregateReport r;
    r.case_count = int(cases.size());
    r.dice_et = aggregate_values(collect([](const CaseScores& c) { return c.et.dice; }));
    r.dice_wt = aggregate_values(collect([](const CaseScores& c) { return c.wt.dice; }));
    r.dice_tc = aggregate_values(collect([](const CaseScores& c) { return c.tc.dice; }));
    r.hd_et = aggregate_values(collect([](const CaseScores& c) { return c.et.hausdorff_mm; }));
    r.hd_wt = aggregate_values(collect([](const CaseScores& c) { return c.wt.hausdorff_mm; }));
    r.hd_tc = aggregate_values(collect([](const CaseScores& c) { return c.tc.hausdorff_mm; }));
    return r;
}

std::string format_report(const AggregateReport& r) {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed;
    os << "cases\t" << r.case_count << "\n";
    os << "metric\tregion\tmean\tmedian\tstd\tn\tn_inf\n";
    auto row = [&os](const char* metric, const char* region, const AggregateStats& s) {
        os << metric << "\t" << region << "\t" << s.mean << "\t(" << s.median << ")\t" << s.stddev
           << "\t" << s.finite_count << "\t" << s.infinite_count << "\n";
    };
    row("dice", "ET", r.dice_et);
    row("dice", "WT", r.dice_wt);
    row("dice", "TC", r.dice_tc);
    row("hausdorff", "ET", r.hd_et);
    row("hausdorff", "WT", r.hd_wt);
    row("hausdorff", "TC", r.hd_tc);
    auto box = [&os](const char* metric, const char* region, const AggregateStats& s) {
        os << "boxplot\t" << metric << "\t" << region << "\t" << s.q1 << "\t" << s.median << "\t"
           << s.q3 << "\t" << s.whisker_lo << "\t" << s.whisker_hi;
        for (double v : s.outliers) os << "\t" << v;
        os << "\n";
    };
    box("dice", "ET", r.dice_et);
    box("dice", "WT", r.dice_wt);
    box("dice", "TC", r.dice_tc);
    box("hausdorff", "ET", r.hd_et);
    box("hausdorff", "WT", r.hd_wt);
    box("hausdorff", "TC", r.hd_tc);
    return os.str();
}

}  // namespace voxseg
