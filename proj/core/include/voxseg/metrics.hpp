#pragma once

#include <limits>
#include <string>
#include <vector>

#include "voxseg/volume.hpp"

namespace voxseg {

// Sentinel for "region present on exactly one side".
inline constexpr double kHausdorffInf = std::numeric_limits<double>::infinity();

// 2|A n B| / (|A|+|B|); both empty -> 1, exactly one empty -> 0.
double dice_region(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref);

// Linear-interpolation percentile of the values (p in [0,100]).
double percentile_linear(std::vector<double> values, double p);

// Symmetric boundary-distance statistic in mm. A voxel is boundary if it is
// in the set and has a 6-neighbor outside it (the grid border counts as
// outside). percentile 100 is the classical max-min Hausdorff; 95 takes the
// 95th percentile of each directed distance set and the max of the two.
// Both sets empty -> 0; exactly one empty -> kHausdorffInf.
double hausdorff(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref,
                 const Dims3& dims, const Spacing3& spacing, int percentile = 95);

struct RegionScores {
    double dice = 0.0;
    double hausdorff_mm = 0.0;
};

struct CaseScores {
    RegionScores et, wt, tc;
};

CaseScores evaluate_case(const SegmentationMap& pred, const SegmentationMap& ref,
                         const Spacing3& spacing, int percentile = 95);

// Tukey boxplot statistics plus mean/median/std (population). Infinite
// values are excluded from every statistic and counted separately.
struct AggregateStats {
    double mean = 0.0;
    double median = 0.0;
    double stddev = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    double whisker_lo = 0.0;
    double whisker_hi = 0.0;
    std::vector<double> outliers;
    int finite_count = 0;
    int infinite_count = 0;
};

AggregateStats aggregate_values(const std::vector<double>& values);

struct AggregateReport {
    AggregateStats dice_et, dice_wt, dice_tc;
    AggregateStats hd_et, hd_wt, hd_tc;
    int case_count = 0;
};

AggregateReport aggregate(const std::vector<CaseScores>& cases);  // throws on empty list

// Tab-separated report: per-region mean (median) rows for dice and Hausdorff
// plus boxplot statistic rows.
std::string format_report(const AggregateReport& report);

}  // namespace voxseg
