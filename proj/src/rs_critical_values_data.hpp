#pragma once

// Critical values of sqrt(W(1)' (int_0^1 Wbar Wbar' dr)^{-1} W(1)): the
// 1-alpha empirical quantiles from 2e5 paths of length 2000, seed 20240801
// (regenerate with the critvals CLI command). The ell = 1 entries at alpha
// 0.05 and 0.10 are pinned to the published 6.747 and 5.323; the simulated
// values at this seed are 6.73495 and 5.30357.

namespace slim::detail {

struct RsCriticalValueRow {
  int ell;
  double alpha;
  double cv;
};

inline constexpr RsCriticalValueRow kRsCriticalValues[] = {
    {1, 0.010, 10.0347},  {1, 0.025, 8.15448},  {1, 0.050, 6.747},    {1, 0.100, 5.323},
    {2, 0.010, 14.0571},  {2, 0.025, 11.9113},  {2, 0.050, 10.2101},  {2, 0.100, 8.46462},
    {3, 0.010, 17.4859},  {3, 0.025, 15.1002},  {3, 0.050, 13.2231},  {3, 0.100, 11.2489},
    {4, 0.010, 20.6274},  {4, 0.025, 18.0683},  {4, 0.050, 16.0855},  {4, 0.100, 13.949},
    {5, 0.010, 23.8241},  {5, 0.025, 21.1178},  {5, 0.050, 18.9263},  {5, 0.100, 16.5938},
    {6, 0.010, 26.9153},  {6, 0.025, 23.9878},  {6, 0.050, 21.6347},  {6, 0.100, 19.1537},
    {7, 0.010, 29.7159},  {7, 0.025, 26.7672},  {7, 0.050, 24.2817},  {7, 0.100, 21.6612},
    {8, 0.010, 32.5484},  {8, 0.025, 29.4293},  {8, 0.050, 26.8656},  {8, 0.100, 24.0911},
    {9, 0.010, 35.4743},  {9, 0.025, 32.1074},  {9, 0.050, 29.4258},  {9, 0.100, 26.5401},
    {10, 0.010, 38.2689}, {10, 0.025, 34.8468}, {10, 0.050, 32.0445}, {10, 0.100, 29.0161},
};

}  // namespace slim::detail
